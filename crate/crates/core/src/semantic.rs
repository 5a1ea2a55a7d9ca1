//! Template-time token partition and per-frame sorting of grounded proposals
//! into foreground and background sets.

use std::collections::BTreeSet;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, ChatRequest, Grounder, GroundingResult, Mllm};
use crate::geometry::{annotate, annotation_thickness, iou, BBox, Image, GREEN};
use crate::rpo::{render_suitability_prompt, DescriptionPair, RpoConfig};

#[derive(Debug, Error)]
pub enum SemanticError {
    #[error("frame grounding has {actual} tokens but the partition was built on {expected}")]
    CaptionMismatch { expected: usize, actual: usize },
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ProposalSource {
    Grounded,
    VisualTracker,
}

/// Caption tokens that point at the target (`fore`) or at other objects (`back`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenPartition {
    pub caption: String,
    pub num_tokens: usize,
    pub fore_token_indices: BTreeSet<usize>,
    pub back_token_indices: BTreeSet<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameProposals {
    pub fore: Vec<(BBox, ProposalSource)>,
    pub back: Vec<BBox>,
}

/// Outcome of the suitability gate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SemanticPlan {
    Partition(TokenPartition),
    /// The target cannot be told apart by text; follow the visual tracker.
    Bypass,
}

/// Reads the verdict line of a suitability reply. Anything unreadable counts as suitable.
pub fn parse_verdict(reply: &str) -> bool {
    let verdict = reply.lines().rev().find_map(|l| {
        let upper = l.to_uppercase();
        upper.find("VERDICT").map(|i| upper[i + "VERDICT".len()..].to_string())
    });
    match verdict {
        Some(v) if v.contains("UNSUITABLE") => false,
        Some(v) if v.contains("SUITABLE") => true,
        _ => {
            log::warn!("no readable suitability verdict in reply; assuming suitable");
            true
        }
    }
}

pub fn suitability_gate(
    annotated_first_frame: &Image,
    mllm: &mut dyn Mllm,
    temperature: f64,
) -> Result<bool, BackendError> {
    let req = ChatRequest::new(Some(annotated_first_frame.clone()), render_suitability_prompt(), temperature)?;
    Ok(parse_verdict(&mllm.complete(&req)?))
}

fn caption_words(text: &str) -> impl Iterator<Item = &str> {
    text.split(|c: char| c.is_whitespace() || c == '.')
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()))
        .filter(|w| !w.is_empty())
}

/// Joins every foreground then background word as `"w1. w2. w3."`, returning
/// the caption and each word's byte range in it.
pub fn concat(fore: &str, back: &str) -> (String, Vec<(String, Range<usize>)>) {
    let mut caption = String::new();
    let mut spans = Vec::new();
    for word in caption_words(fore).chain(caption_words(back)) {
        if !caption.is_empty() {
            caption.push(' ');
        }
        let start = caption.len();
        caption.push_str(word);
        spans.push((word.to_string(), start..caption.len()));
        caption.push('.');
    }
    (caption, spans)
}

/// Splits the template grounding's tokens into foreground and background sets.
pub fn partition_tokens(template_grounding: &GroundingResult, gt: &BBox, cfg: &RpoConfig) -> TokenPartition {
    let g = template_grounding;
    let ious: Vec<f64> = g.proposals.iter().map(|p| iou(p, gt)).collect();
    let mut fore = BTreeSet::new();
    let mut back = BTreeSet::new();
    for m in 0..g.num_tokens() {
        let matched = || (0..g.num_proposals()).filter(|&n| g.score(n, m) > cfg.theta2);
        if matched().any(|n| ious[n] > cfg.theta1) {
            fore.insert(m);
        } else if matched().any(|n| ious[n] < cfg.theta3) {
            back.insert(m);
        }
    }
    TokenPartition {
        caption: String::new(),
        num_tokens: g.num_tokens(),
        fore_token_indices: fore,
        back_token_indices: back,
    }
}

/// Sorts one frame's proposals by the token sets they align with. A proposal
/// matching both sets goes to the foreground; one matching neither is dropped.
pub fn classify_frame(
    frame_grounding: &GroundingResult,
    partition: &TokenPartition,
    vt_box: Option<BBox>,
    cfg: &RpoConfig,
) -> Result<FrameProposals, SemanticError> {
    let g = frame_grounding;
    if g.num_tokens() != partition.num_tokens {
        return Err(SemanticError::CaptionMismatch { expected: partition.num_tokens, actual: g.num_tokens() });
    }
    let mut out = FrameProposals::default();
    for (n, bbox) in g.proposals.iter().enumerate() {
        let hits = |set: &BTreeSet<usize>| set.iter().any(|&m| g.score(n, m) > cfg.theta2);
        if hits(&partition.fore_token_indices) {
            out.fore.push((*bbox, ProposalSource::Grounded));
        } else if hits(&partition.back_token_indices) {
            out.back.push(*bbox);
        }
    }
    if let Some(b) = vt_box {
        out.fore.push((b, ProposalSource::VisualTracker));
    }
    Ok(out)
}

/// Runs the suitability gate and, when it passes, grounds the combined caption
/// on the template to build the frozen token partition.
pub fn track_descriptions(
    first_frame: &Image,
    template_img: &Image,
    gt: &BBox,
    descriptions: &DescriptionPair,
    mllm: &mut dyn Mllm,
    grounder: &mut dyn Grounder,
    cfg: &RpoConfig,
) -> Result<SemanticPlan, SemanticError> {
    let marked = annotate(first_frame, gt, GREEN, annotation_thickness(first_frame.width(), first_frame.height()));
    if !suitability_gate(&marked, mllm, cfg.temperature)? {
        log::info!("target judged unsuitable for text tracking; following the visual tracker");
        return Ok(SemanticPlan::Bypass);
    }
    let (caption, _) = concat(&descriptions.fore, &descriptions.back);
    let grounding = grounder.ground(template_img, &caption)?;
    let mut partition = partition_tokens(&grounding, gt, cfg);
    partition.caption = caption;
    if partition.fore_token_indices.is_empty() && partition.back_token_indices.is_empty() {
        log::warn!("no caption token grounds on the template; every frame will fall back to the visual tracker");
    }
    Ok(SemanticPlan::Partition(partition))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::mock::{ScriptedMllm, TableEntry, TableGrounder};

    fn bb(x: f64, y: f64, w: f64, h: f64) -> BBox {
        BBox::new(x, y, w, h).unwrap()
    }

    fn toks(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("t{i}")).collect()
    }

    fn part(m: usize, fore: &[usize], back: &[usize]) -> TokenPartition {
        TokenPartition {
            caption: String::new(),
            num_tokens: m,
            fore_token_indices: fore.iter().copied().collect(),
            back_token_indices: back.iter().copied().collect(),
        }
    }

    #[test]
    fn verdicts() {
        assert!(parse_verdict("VERDICT: SUITABLE"));
        assert!(!parse_verdict("VERDICT: UNSUITABLE, object too small"));
        assert!(parse_verdict("maybe?"));
        assert!(!parse_verdict("Thinking...\n**Verdict:** unsuitable, many identical cups"));
    }

    #[test]
    fn gate_uses_mllm() {
        let mut m = ScriptedMllm::new(["VERDICT: UNSUITABLE"]);
        assert!(!suitability_gate(&Image::filled(8, 8, [0, 0, 0]), &mut m, 0.0).unwrap());
        assert!(m.prompts()[0].contains("VERDICT: SUITABLE"));
    }

    #[test]
    fn concat_examples() {
        assert_eq!(concat("red car", "road").0, "red. car. road.");
        assert_eq!(concat("car", "").0, "car.");
        assert_eq!(concat("red car", "road. trees").0, "red. car. road. trees.");
        let (caption, spans) = concat("small red car", "road. parked trucks");
        for (word, range) in &spans {
            assert_eq!(&caption[range.clone()], word);
        }
        assert_eq!(spans.len(), 6);
    }

    #[test]
    fn partition_example() {
        let gt = bb(0.0, 0.0, 10.0, 10.0);
        let g = GroundingResult::new(
            toks(2),
            vec![bb(0.0, 0.0, 10.0, 8.0), bb(50.0, 50.0, 10.0, 10.0)],
            vec![vec![0.9, 0.0], vec![0.0, 0.9]],
        )
        .unwrap();
        let p = partition_tokens(&g, &gt, &RpoConfig::default());
        assert_eq!(p.fore_token_indices, [0].into());
        assert_eq!(p.back_token_indices, [1].into());
    }

    #[test]
    fn unmatched_token_in_neither_set() {
        let gt = bb(0.0, 0.0, 10.0, 10.0);
        let g = GroundingResult::new(toks(2), vec![gt], vec![vec![0.9, 0.1]]).unwrap();
        let p = partition_tokens(&g, &gt, &RpoConfig::default());
        assert_eq!(p.fore_token_indices, [0].into());
        assert!(p.back_token_indices.is_empty());
    }

    #[test]
    fn classify_frame_cases() {
        let cfg = RpoConfig::default();
        let p = part(3, &[0], &[1]);
        let a = bb(0.0, 0.0, 5.0, 5.0);
        let b = bb(10.0, 0.0, 5.0, 5.0);
        let c = bb(20.0, 0.0, 5.0, 5.0);
        let d = bb(30.0, 0.0, 5.0, 5.0);
        let g = GroundingResult::new(
            toks(3),
            vec![a, b, c, d],
            vec![vec![0.9, 0.0, 0.0], vec![0.0, 0.9, 0.0], vec![0.9, 0.9, 0.0], vec![0.0, 0.0, 0.9]],
        )
        .unwrap();
        let vt = bb(1.0, 1.0, 5.0, 5.0);
        let out = classify_frame(&g, &p, Some(vt), &cfg).unwrap();
        assert_eq!(
            out.fore,
            vec![(a, ProposalSource::Grounded), (c, ProposalSource::Grounded), (vt, ProposalSource::VisualTracker)]
        );
        assert_eq!(out.back, vec![b]);
    }

    #[test]
    fn empty_grounding_falls_back_to_tracker() {
        let vt = bb(1.0, 1.0, 5.0, 5.0);
        let out =
            classify_frame(&GroundingResult::empty(toks(2)), &part(2, &[0], &[1]), Some(vt), &RpoConfig::default())
                .unwrap();
        assert_eq!(out.fore, vec![(vt, ProposalSource::VisualTracker)]);
        assert!(out.back.is_empty());
    }

    #[test]
    fn token_count_mismatch() {
        let err = classify_frame(&GroundingResult::empty(toks(3)), &part(2, &[], &[]), None, &RpoConfig::default());
        assert!(matches!(err, Err(SemanticError::CaptionMismatch { expected: 2, actual: 3 })));
    }

    #[test]
    fn track_descriptions_paths() {
        let img = Image::filled(64, 64, [0, 0, 0]);
        let gt = bb(0.0, 0.0, 10.0, 10.0);
        let desc = DescriptionPair::new("red car", "road").unwrap();
        let tokens: Vec<String> = ["red", ".", "car", ".", "road", "."].iter().map(|s| s.to_string()).collect();
        let entry = TableEntry {
            caption: "red. car. road.".into(),
            result: GroundingResult::new(
                tokens,
                vec![gt, bb(40.0, 40.0, 10.0, 10.0)],
                vec![vec![0.9, 0.0, 0.5, 0.0, 0.0, 0.0], vec![0.0, 0.0, 0.0, 0.0, 0.8, 0.0]],
            )
            .unwrap(),
        };

        let mut g = TableGrounder::new(vec![entry.clone()]).unwrap();
        let calls = g.call_counter();
        let mut m = ScriptedMllm::new(["VERDICT: UNSUITABLE"]);
        let plan = track_descriptions(&img, &img, &gt, &desc, &mut m, &mut g, &RpoConfig::default()).unwrap();
        assert_eq!(plan, SemanticPlan::Bypass);
        assert_eq!(calls.get(), 0);

        let mut m = ScriptedMllm::new(["VERDICT: SUITABLE"]);
        let plan = track_descriptions(&img, &img, &gt, &desc, &mut m, &mut g, &RpoConfig::default()).unwrap();
        let SemanticPlan::Partition(p) = plan else { panic!("expected partition") };
        assert_eq!(p.caption, "red. car. road.");
        assert_eq!(p.fore_token_indices, [0, 2].into());
        assert_eq!(p.back_token_indices, [4].into());
    }
}
