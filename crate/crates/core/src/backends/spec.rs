use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::geometry::BBox;

use super::cassette::CassetteRecorder;
use super::http::{HttpEmbedder, HttpEndpoint, HttpGrounder, HttpMllm, HttpMllmConfig, HttpTracker, RetryPolicy};
use super::mock::{
    MeanColorEmbedder, SceneGrounder, SceneObject, ScriptedMllm, ScriptedTracker, TableEntry, TableGrounder,
};
use super::{BackendError, Embedder, Grounder, Mllm, Replaying, VisualTracker};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MllmSpec {
    Http(HttpMllmConfig),
    Scripted { replies: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GrounderSpec {
    Http(HttpEndpoint),
    Table { entries: Vec<TableEntry> },
    Scene { objects: Vec<SceneObject> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrackerSpec {
    Http(HttpEndpoint),
    Scripted {
        boxes: Vec<BBox>,
        #[serde(default)]
        dx: f64,
        #[serde(default)]
        dy: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbedderSpec {
    Http(HttpEndpoint),
    MeanColor,
}

/// The `[backends]` configuration table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSpecs {
    pub mllm: Option<MllmSpec>,
    pub grounder: Option<GrounderSpec>,
    pub tracker: Option<TrackerSpec>,
    pub embedder: Option<EmbedderSpec>,
    #[serde(default = "default_attempts")]
    pub retry_attempts: u32,
    #[serde(default = "default_backoff_ms")]
    pub retry_base_delay_ms: u64,
}

fn default_attempts() -> u32 {
    3
}

fn default_backoff_ms() -> u64 {
    1000
}

impl Default for BackendSpecs {
    fn default() -> Self {
        BackendSpecs {
            mllm: None,
            grounder: None,
            tracker: None,
            embedder: None,
            retry_attempts: default_attempts(),
            retry_base_delay_ms: default_backoff_ms(),
        }
    }
}

impl BackendSpecs {
    pub fn is_complete(&self) -> bool {
        self.mllm.is_some() && self.grounder.is_some() && self.tracker.is_some() && self.embedder.is_some()
    }

    fn retry(&self) -> RetryPolicy {
        RetryPolicy {
            attempts: self.retry_attempts.max(1),
            base_delay: Duration::from_millis(self.retry_base_delay_ms),
        }
    }

    /// Instantiates fresh live backends; each call yields an independent set.
    pub fn build(&self) -> Result<BackendSet, BackendError> {
        let missing = |what: &str| BackendError::Config(format!("no [backends.{what}] configured"));
        let retry = self.retry();
        let mllm: Box<dyn Mllm> = match self.mllm.as_ref().ok_or_else(|| missing("mllm"))? {
            MllmSpec::Http(cfg) => Box::new(HttpMllm::new(cfg, retry)?),
            MllmSpec::Scripted { replies } => Box::new(ScriptedMllm::new(replies.clone())),
        };
        let grounder: Box<dyn Grounder> = match self.grounder.as_ref().ok_or_else(|| missing("grounder"))? {
            GrounderSpec::Http(ep) => Box::new(HttpGrounder::new(ep, retry)?),
            GrounderSpec::Table { entries } => Box::new(TableGrounder::new(entries.clone())?),
            GrounderSpec::Scene { objects } => Box::new(SceneGrounder::new(objects.clone())),
        };
        let tracker: Box<dyn VisualTracker> = match self.tracker.as_ref().ok_or_else(|| missing("tracker"))? {
            TrackerSpec::Http(ep) => Box::new(HttpTracker::new(ep, retry)?),
            TrackerSpec::Scripted { boxes, dx, dy } => Box::new(ScriptedTracker::drifting(boxes.clone(), *dx, *dy)),
        };
        let embedder: Box<dyn Embedder> = match self.embedder.as_ref().ok_or_else(|| missing("embedder"))? {
            EmbedderSpec::Http(ep) => Box::new(HttpEmbedder::new(ep, retry)?),
            EmbedderSpec::MeanColor => Box::new(MeanColorEmbedder::new()),
        };
        Ok(BackendSet { mllm, grounder, tracker, embedder })
    }
}

/// One sequence's worth of model backends.
pub struct BackendSet {
    pub mllm: Box<dyn Mllm>,
    pub grounder: Box<dyn Grounder>,
    pub tracker: Box<dyn VisualTracker>,
    pub embedder: Box<dyn Embedder>,
}

impl BackendSet {
    pub fn new(
        mllm: impl Mllm + 'static,
        grounder: impl Grounder + 'static,
        tracker: impl VisualTracker + 'static,
        embedder: impl Embedder + 'static,
    ) -> Self {
        BackendSet {
            mllm: Box::new(mllm),
            grounder: Box::new(grounder),
            tracker: Box::new(tracker),
            embedder: Box::new(embedder),
        }
    }

    /// All four roles served from one cassette, in call order.
    pub fn replay(player: Replaying) -> Self {
        BackendSet::new(player.clone(), player.clone(), player.clone(), player)
    }

    /// Wraps every backend so its calls land in `recorder`.
    pub fn record(self, recorder: &CassetteRecorder) -> Self {
        BackendSet::new(
            recorder.wrap(self.mllm),
            recorder.wrap(self.grounder),
            recorder.wrap(self.tracker),
            recorder.wrap(self.embedder),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specs_parse_from_toml() {
        let text = r#"
            [mllm]
            kind = "http"
            base_url = "https://api.example.com"
            model = "vision-model"

            [grounder]
            kind = "scene"
            objects = [{ color = [200, 30, 30], words = ["red"], weak_words = ["square"] }]

            [tracker]
            kind = "scripted"
            boxes = [[1, 2, 3, 4]]
            dx = 2.5

            [embedder]
            kind = "mean_color"
        "#;
        let specs: BackendSpecs = toml::from_str(text).unwrap();
        assert!(specs.is_complete());
        match specs.mllm.as_ref().unwrap() {
            MllmSpec::Http(c) => {
                assert_eq!(c.api_key_env.as_deref(), Some("OPENAI_API_KEY"));
                assert_eq!(c.max_image_side, 2048);
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(specs.retry_attempts, 3);
        let set = specs.build();
        assert!(set.is_ok());
    }

    #[test]
    fn missing_role_is_config_error() {
        let specs = BackendSpecs { embedder: Some(EmbedderSpec::MeanColor), ..Default::default() };
        assert!(matches!(specs.build(), Err(BackendError::Config(_))));
    }
}
