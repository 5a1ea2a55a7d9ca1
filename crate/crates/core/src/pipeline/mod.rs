//! Per-sequence orchestration: describe the target on the first frame, build
//! the token partition, then ground, sort and verify candidates on every later
//! frame. Also loads sequences from disk and writes results back.

mod batch;
mod config;
mod io;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, BackendSet};
use crate::geometry::{BBox, GeometryError, Image};
use crate::rpo::{self, DescriptionPair, RpoError, RpoTrace};
use crate::semantic::{self, SemanticError, SemanticPlan};
use crate::verify::{score_frame, ScoredProposal, TemplateEmbedding, VerifyError};

pub use self::batch::{backends_for, run_batch, BatchOutcome, BatchStatus, PreparedBackends};
pub use self::config::{ConfigError, EngineConfig, Mode, PipelineConfig};
pub use self::io::{format_box, load_predictions, load_sequence, parse_boxes, save_predictions, SequenceSpec};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("no groundtruth file at {0}")]
    MissingGroundtruth(PathBuf),
    #[error("no frames (png/jpg) in {0}")]
    NoFrames(PathBuf),
    #[error("invalid sequence: {0}")]
    InvalidSequence(String),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Rpo(#[from] RpoError),
    #[error(transparent)]
    Semantic(#[from] SemanticError),
    #[error(transparent)]
    Verify(#[from] VerifyError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

impl PipelineError {
    pub(crate) fn io(path: &Path, e: std::io::Error) -> Self {
        PipelineError::Io { path: path.to_path_buf(), message: e.to_string() }
    }
}

/// Per-frame verification table, as written to `scores.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameScores {
    /// 1-based frame number.
    pub frame: usize,
    pub candidates: Vec<ScoredProposal>,
    pub chosen: usize,
}

/// Why a run stopped early, as written to `error.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    /// 1-based frame being processed when the run stopped.
    pub frame: usize,
    pub stage: String,
    pub message: String,
}

/// Everything one sequence run produced, complete or not.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceOutput {
    pub name: String,
    pub predictions: Vec<BBox>,
    pub descriptions: Option<DescriptionPair>,
    pub trace: Option<RpoTrace>,
    pub plan: Option<SemanticPlan>,
    pub scores: Vec<FrameScores>,
    pub failure: Option<Failure>,
}

impl SequenceOutput {
    pub fn is_complete(&self) -> bool {
        self.failure.is_none()
    }
}

struct Stage<'a> {
    out: &'a mut SequenceOutput,
    frame: usize,
    stage: &'static str,
}

impl Stage<'_> {
    fn fail(&mut self, e: impl Into<PipelineError>) {
        let e = e.into();
        log::error!("{}: frame {} ({}): {e}", self.out.name, self.frame, self.stage);
        self.out.failure = Some(Failure { frame: self.frame, stage: self.stage.into(), message: e.to_string() });
    }
}

fn load_frame(spec: &SequenceSpec, index: usize) -> Result<Image, PipelineError> {
    Ok(Image::load(&spec.frames[index])?)
}

/// Only the description loop on the first frame.
pub fn run_rpo(
    spec: &SequenceSpec,
    cfg: &EngineConfig,
    backends: &mut BackendSet,
) -> Result<(DescriptionPair, RpoTrace), PipelineError> {
    let first = load_frame(spec, 0)?;
    Ok(rpo::optimize(
        &first,
        &first,
        &spec.initial_box(),
        backends.mllm.as_mut(),
        backends.grounder.as_mut(),
        &cfg.rpo,
    )?)
}

/// Tracks one sequence. Never fails outright: an error stops the run and is
/// reported in [`SequenceOutput::failure`] alongside everything produced so far.
pub fn run_sequence(spec: &SequenceSpec, cfg: &EngineConfig, backends: &mut BackendSet) -> SequenceOutput {
    let mut out = SequenceOutput {
        name: spec.name.clone(),
        predictions: Vec::new(),
        descriptions: None,
        trace: None,
        plan: None,
        scores: Vec::new(),
        failure: None,
    };
    let gt = spec.initial_box();
    let context = cfg.pipeline.context_factor;

    macro_rules! attempt {
        ($frame:expr, $stage:expr, $e:expr) => {
            match $e {
                Ok(v) => v,
                Err(err) => {
                    Stage { out: &mut out, frame: $frame, stage: $stage }.fail(err);
                    return out;
                }
            }
        };
    }

    let first = attempt!(1, "load", load_frame(spec, 0));
    let (descriptions, trace) = attempt!(
        1,
        "rpo",
        rpo::optimize(&first, &first, &gt, backends.mllm.as_mut(), backends.grounder.as_mut(), &cfg.rpo)
    );
    log::info!("{}: target described as {:?} ({:?})", spec.name, descriptions.fore, trace.outcome);
    out.trace = Some(trace);
    let plan = attempt!(
        1,
        "partition",
        semantic::track_descriptions(
            &first,
            &first,
            &gt,
            &descriptions,
            backends.mllm.as_mut(),
            backends.grounder.as_mut(),
            &cfg.rpo,
        )
    );
    out.descriptions = Some(descriptions);
    out.plan = Some(plan.clone());
    let session = attempt!(1, "tracker_init", backends.tracker.init(&first, gt));
    out.predictions.push(gt);

    let mut template: Option<TemplateEmbedding> = None;
    for index in 1..spec.frames.len() {
        let frame_no = index + 1;
        let frame = attempt!(frame_no, "load", load_frame(spec, index));
        let vt = attempt!(frame_no, "tracker_predict", backends.tracker.predict(&session, &frame));
        let partition = match &plan {
            SemanticPlan::Bypass => {
                out.predictions.push(vt.bbox);
                continue;
            }
            SemanticPlan::Partition(p) => p,
        };
        let grounding = attempt!(frame_no, "ground", backends.grounder.ground(&frame, &partition.caption));
        let proposals =
            attempt!(frame_no, "classify", semantic::classify_frame(&grounding, partition, Some(vt.bbox), &cfg.rpo));
        if template.is_none() {
            template = Some(attempt!(
                frame_no,
                "template",
                TemplateEmbedding::compute(&first, &gt, backends.embedder.as_mut(), context)
            ));
        }
        let t = template.as_ref().expect("just computed");
        let selection =
            attempt!(frame_no, "verify", score_frame(t, &frame, &proposals, backends.embedder.as_mut(), context));
        let selection = selection.expect("the visual tracker box is always a candidate");
        out.predictions.push(selection.chosen_box());
        out.scores.push(FrameScores { frame: frame_no, candidates: selection.candidates, chosen: selection.chosen });
    }
    out
}

/// Writes `<out_dir>/<name>/{predictions.txt, rpo_trace.jsonl, partition.json, scores.jsonl, error.json}`.
///
/// Files for stages that never ran are left out; a stale `error.json` from an
/// earlier run is removed.
pub fn save_artifacts(output: &SequenceOutput, out_dir: &Path, emit_scores: bool) -> Result<PathBuf, PipelineError> {
    let dir = out_dir.join(&output.name);
    fs::create_dir_all(&dir).map_err(|e| PipelineError::io(&dir, e))?;
    save_predictions(&output.predictions, &dir.join("predictions.txt"))?;
    let write = |name: &str, text: String| {
        let path = dir.join(name);
        fs::write(&path, text).map_err(|e| PipelineError::io(&path, e))
    };
    if let Some(trace) = &output.trace {
        write("rpo_trace.jsonl", trace.to_jsonl())?;
    }
    if let Some(plan) = &output.plan {
        write("partition.json", serde_json::to_string_pretty(plan).expect("serializable") + "\n")?;
    }
    if emit_scores && output.plan.is_some() {
        io::write_json_lines(&output.scores, &dir.join("scores.jsonl"))?;
    }
    let err_path = dir.join("error.json");
    match &output.failure {
        Some(f) => write("error.json", serde_json::to_string_pretty(f).expect("serializable") + "\n")?,
        None if err_path.exists() => fs::remove_file(&err_path).map_err(|e| PipelineError::io(&err_path, e))?,
        None => {}
    }
    Ok(dir)
}
