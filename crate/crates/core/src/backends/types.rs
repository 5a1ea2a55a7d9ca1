use serde::{Deserialize, Serialize};

use crate::geometry::{BBox, Image};

use super::BackendError;

/// Output of a phrase-grounding model: `N` proposals scored against `M` caption tokens.
///
/// `alignment[n][m]` is the probability-scaled score between proposal `n` and token `m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingResult {
    pub tokens: Vec<String>,
    pub proposals: Vec<BBox>,
    pub alignment: Vec<Vec<f64>>,
}

impl GroundingResult {
    /// Checks shape and range, failing with [`BackendError::ProtocolViolation`].
    pub fn new(tokens: Vec<String>, proposals: Vec<BBox>, alignment: Vec<Vec<f64>>) -> Result<Self, BackendError> {
        let g = GroundingResult { tokens, proposals, alignment };
        g.validate()?;
        Ok(g)
    }

    pub fn empty(tokens: Vec<String>) -> Self {
        GroundingResult { tokens, proposals: Vec::new(), alignment: Vec::new() }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.alignment.len() != self.proposals.len() {
            return Err(BackendError::ProtocolViolation(format!(
                "{} proposals but {} alignment rows",
                self.proposals.len(),
                self.alignment.len()
            )));
        }
        let m = self.tokens.len();
        for (n, row) in self.alignment.iter().enumerate() {
            if row.len() != m {
                return Err(BackendError::ProtocolViolation(format!(
                    "alignment row {n} has {} columns, expected {m}",
                    row.len()
                )));
            }
            if let Some(v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(BackendError::ProtocolViolation(format!("alignment score {v} in row {n} outside [0, 1]")));
            }
        }
        for b in &self.proposals {
            b.validate().map_err(|e| BackendError::ProtocolViolation(e.to_string()))?;
        }
        Ok(())
    }

    pub fn num_proposals(&self) -> usize {
        self.proposals.len()
    }

    pub fn num_tokens(&self) -> usize {
        self.tokens.len()
    }

    pub fn score(&self, proposal: usize, token: usize) -> f64 {
        self.alignment[proposal][token]
    }
}

#[derive(Debug, Clone)]
pub struct ChatRequest {
    pub image: Option<Image>,
    pub prompt: String,
    pub temperature: f64,
}

impl ChatRequest {
    pub fn new(image: Option<Image>, prompt: impl Into<String>, temperature: f64) -> Result<Self, BackendError> {
        let prompt = prompt.into();
        if prompt.trim().is_empty() {
            return Err(BackendError::Rejected { status: None, message: "empty prompt".into() });
        }
        Ok(ChatRequest { image, prompt, temperature })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Cosine similarity of the L2-normalised vectors; 0 if either is the zero vector.
    pub fn cosine(&self, other: &FeatureVector) -> f64 {
        let (na, nb) = (self.norm(), other.norm());
        if na == 0.0 || nb == 0.0 || self.dim() != other.dim() {
            return 0.0;
        }
        let dot: f64 = self.0.iter().zip(&other.0).map(|(a, b)| (a / na) * (b / nb)).sum();
        dot.clamp(-1.0, 1.0)
    }

    pub(crate) fn check(self, declared: Option<usize>) -> Result<Self, BackendError> {
        if let Some(d) = declared {
            if self.dim() != d {
                return Err(BackendError::ProtocolViolation(format!(
                    "embedding has {} values, backend declared {d}",
                    self.dim()
                )));
            }
        }
        if self.0.iter().any(|v| !v.is_finite()) {
            return Err(BackendError::ProtocolViolation("embedding contains non-finite values".into()));
        }
        Ok(self)
    }
}

/// Opaque per-sequence tracker session identifier.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SessionHandle(pub String);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackerPrediction {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
}

/// Multimodal chat model.
pub trait Mllm: Send {
    fn complete(&mut self, req: &ChatRequest) -> Result<String, BackendError>;
}

/// Open-vocabulary phrase grounder.
pub trait Grounder: Send {
    fn ground(&mut self, img: &Image, caption: &str) -> Result<GroundingResult, BackendError>;
}

/// Conventional single-object tracker.
pub trait VisualTracker: Send {
    fn init(&mut self, frame: &Image, bbox: BBox) -> Result<SessionHandle, BackendError>;
    fn predict(&mut self, session: &SessionHandle, frame: &Image) -> Result<TrackerPrediction, BackendError>;
}

/// Image/text encoder into a shared feature space.
pub trait Embedder: Send {
    fn embed_image(&mut self, img: &Image) -> Result<FeatureVector, BackendError>;
    fn embed_text(&mut self, text: &str) -> Result<FeatureVector, BackendError>;
}

impl<T: Mllm + ?Sized> Mllm for Box<T> {
    fn complete(&mut self, req: &ChatRequest) -> Result<String, BackendError> {
        (**self).complete(req)
    }
}

impl<T: Grounder + ?Sized> Grounder for Box<T> {
    fn ground(&mut self, img: &Image, caption: &str) -> Result<GroundingResult, BackendError> {
        (**self).ground(img, caption)
    }
}

impl<T: VisualTracker + ?Sized> VisualTracker for Box<T> {
    fn init(&mut self, frame: &Image, bbox: BBox) -> Result<SessionHandle, BackendError> {
        (**self).init(frame, bbox)
    }

    fn predict(&mut self, session: &SessionHandle, frame: &Image) -> Result<TrackerPrediction, BackendError> {
        (**self).predict(session, frame)
    }
}

impl<T: Embedder + ?Sized> Embedder for Box<T> {
    fn embed_image(&mut self, img: &Image) -> Result<FeatureVector, BackendError> {
        (**self).embed_image(img)
    }

    fn embed_text(&mut self, text: &str) -> Result<FeatureVector, BackendError> {
        (**self).embed_text(text)
    }
}
