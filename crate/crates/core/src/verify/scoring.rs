use serde::{Deserialize, Serialize};

use crate::backends::{Embedder, FeatureVector};
use crate::geometry::{crop, iou, BBox, GeometryError, Image};
use crate::semantic::{FrameProposals, ProposalSource};

use super::VerifyError;

/// Embedding of the target patch on the first frame, computed once per sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateEmbedding(pub FeatureVector);

impl TemplateEmbedding {
    pub fn compute(
        first_frame: &Image,
        gt: &BBox,
        embedder: &mut dyn Embedder,
        context_factor: f64,
    ) -> Result<Self, VerifyError> {
        let patch = match crop(first_frame, gt, context_factor) {
            Ok(p) => p,
            Err(GeometryError::EmptyCrop(b)) => return Err(VerifyError::EmptyTemplate(b)),
            Err(e) => return Err(VerifyError::InvalidInput(e.to_string())),
        };
        Ok(TemplateEmbedding(embedder.embed_image(&patch)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredProposal {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub source: ProposalSource,
    pub s_fore: f64,
    pub s_back: f64,
    pub s: f64,
}

impl ScoredProposal {
    pub fn new(bbox: BBox, source: ProposalSource, s_fore: f64, s_back: f64) -> Self {
        ScoredProposal { bbox, source, s_fore, s_back, s: s_fore * (1.0 - s_back) }
    }
}

/// Appearance similarity of each foreground candidate to the template, clamped to `[0, 1]`.
///
/// A candidate whose crop is empty scores 0 without an embedder call.
pub fn foreground_scores(
    template: &TemplateEmbedding,
    frame: &Image,
    fore: &[(BBox, ProposalSource)],
    embedder: &mut dyn Embedder,
    context_factor: f64,
) -> Result<Vec<f64>, VerifyError> {
    fore.iter()
        .map(|(bbox, _)| match crop(frame, bbox, context_factor) {
            Ok(patch) => Ok(template.0.cosine(&embedder.embed_image(&patch)?).max(0.0)),
            Err(GeometryError::EmptyCrop(_)) => Ok(0.0),
            Err(e) => Err(VerifyError::InvalidInput(e.to_string())),
        })
        .collect()
}

/// Highest IoU of each foreground candidate with any background proposal.
pub fn background_scores(proposals: &FrameProposals) -> Vec<f64> {
    proposals.fore.iter().map(|(f, _)| proposals.back.iter().map(|b| iou(f, b)).fold(0.0, f64::max)).collect()
}

/// Index of the highest combined score. Ties prefer the visual tracker, then the earliest entry.
pub fn combine_and_select(scored: &[ScoredProposal]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, p) in scored.iter().enumerate() {
        best = match best {
            None => Some(i),
            Some(b) => {
                let cur = &scored[b];
                let better = p.s > cur.s
                    || (p.s == cur.s
                        && p.source == ProposalSource::VisualTracker
                        && cur.source != ProposalSource::VisualTracker);
                Some(if better { i } else { b })
            }
        };
    }
    best
}

/// Full score table for one frame plus the chosen entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub candidates: Vec<ScoredProposal>,
    pub chosen: usize,
}

impl Selection {
    pub fn chosen_box(&self) -> BBox {
        self.candidates[self.chosen].bbox
    }
}

/// Scores every foreground candidate of a frame and selects the output box.
pub fn score_frame(
    template: &TemplateEmbedding,
    frame: &Image,
    proposals: &FrameProposals,
    embedder: &mut dyn Embedder,
    context_factor: f64,
) -> Result<Option<Selection>, VerifyError> {
    let s_fore = foreground_scores(template, frame, &proposals.fore, embedder, context_factor)?;
    let s_back = background_scores(proposals);
    let candidates: Vec<ScoredProposal> = proposals
        .fore
        .iter()
        .zip(s_fore.iter().zip(&s_back))
        .map(|(&(bbox, source), (&f, &b))| ScoredProposal::new(bbox, source, f, b))
        .collect();
    Ok(combine_and_select(&candidates).map(|chosen| Selection { candidates, chosen }))
}
