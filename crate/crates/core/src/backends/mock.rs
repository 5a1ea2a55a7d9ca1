//! Deterministic in-process backends for tests, fixtures and offline runs.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::geometry::{BBox, Image, Rgb};

use super::{
    BackendError, ChatRequest, Embedder, FeatureVector, Grounder, GroundingResult, Mllm, SessionHandle,
    TrackerPrediction, VisualTracker,
};

/// Shared call counter handed out by the scripted backends.
#[derive(Debug, Clone, Default)]
pub struct CallCounter(Arc<AtomicUsize>);

impl CallCounter {
    pub fn get(&self) -> usize {
        self.0.load(Ordering::SeqCst)
    }

    fn bump(&self) {
        self.0.fetch_add(1, Ordering::SeqCst);
    }
}

/// Splits a caption into lowercase alphanumeric runs and single punctuation marks.
pub fn simple_tokenize(caption: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for c in caption.chars().flat_map(char::to_lowercase) {
        if c.is_alphanumeric() {
            word.push(c);
            continue;
        }
        if !word.is_empty() {
            tokens.push(std::mem::take(&mut word));
        }
        if !c.is_whitespace() {
            tokens.push(c.to_string());
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

/// Chat model that replays a fixed queue of replies, first in first out.
#[derive(Debug, Clone, Default)]
pub struct ScriptedMllm {
    replies: VecDeque<String>,
    prompts: Vec<String>,
    calls: CallCounter,
}

impl ScriptedMllm {
    pub fn new<I, S>(replies: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        ScriptedMllm { replies: replies.into_iter().map(Into::into).collect(), ..Default::default() }
    }

    pub fn call_counter(&self) -> CallCounter {
        self.calls.clone()
    }

    /// Prompts received so far, in order.
    pub fn prompts(&self) -> &[String] {
        &self.prompts
    }
}

impl Mllm for ScriptedMllm {
    fn complete(&mut self, req: &ChatRequest) -> Result<String, BackendError> {
        self.calls.bump();
        self.prompts.push(req.prompt.clone());
        self.replies.pop_front().ok_or(BackendError::ScriptExhausted("mllm"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableEntry {
    pub caption: String,
    pub result: GroundingResult,
}

/// Grounder answering from a caption-keyed table; unknown captions ground to nothing.
#[derive(Debug, Clone, Default)]
pub struct TableGrounder {
    entries: Vec<TableEntry>,
    calls: CallCounter,
}

impl TableGrounder {
    pub fn new(entries: Vec<TableEntry>) -> Result<Self, BackendError> {
        for e in &entries {
            e.result.validate()?;
        }
        Ok(TableGrounder { entries, calls: CallCounter::default() })
    }

    pub fn call_counter(&self) -> CallCounter {
        self.calls.clone()
    }
}

impl Grounder for TableGrounder {
    fn ground(&mut self, _img: &Image, caption: &str) -> Result<GroundingResult, BackendError> {
        self.calls.bump();
        let key = caption.trim();
        Ok(self
            .entries
            .iter()
            .find(|e| e.caption.trim() == key)
            .map(|e| e.result.clone())
            .unwrap_or_else(|| GroundingResult::empty(simple_tokenize(caption))))
    }
}

/// A flat-coloured object the scene grounder can find by exact pixel colour.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub color: Rgb,
    /// Words that identify this object strongly.
    pub words: Vec<String>,
    /// Words shared with other objects; scored below the usual alignment threshold.
    #[serde(default)]
    pub weak_words: Vec<String>,
}

/// Grounder over synthetic scenes: each configured object present in the frame
/// yields one proposal at the bounding box of its colour, scored per caption token.
#[derive(Debug, Clone)]
pub struct SceneGrounder {
    objects: Vec<SceneObject>,
    strong: f64,
    weak: f64,
    calls: CallCounter,
}

impl SceneGrounder {
    pub const STRONG_SCORE: f64 = 0.9;
    pub const WEAK_SCORE: f64 = 0.15;

    pub fn new(objects: Vec<SceneObject>) -> Self {
        SceneGrounder { objects, strong: Self::STRONG_SCORE, weak: Self::WEAK_SCORE, calls: CallCounter::default() }
    }

    pub fn call_counter(&self) -> CallCounter {
        self.calls.clone()
    }
}

/// Tight box around every pixel of exactly `color`, if any.
pub fn color_bbox(img: &Image, color: Rgb) -> Option<BBox> {
    let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0, 0);
    let mut found = false;
    for y in 0..img.height() {
        for x in 0..img.width() {
            if img.pixel(x, y) == color {
                found = true;
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    found.then(|| BBox::from_corners(x0 as f64, y0 as f64, x1 as f64, y1 as f64).expect("ordered corners"))
}

impl Grounder for SceneGrounder {
    fn ground(&mut self, img: &Image, caption: &str) -> Result<GroundingResult, BackendError> {
        self.calls.bump();
        let tokens = simple_tokenize(caption);
        let mut proposals = Vec::new();
        let mut alignment = Vec::new();
        for obj in &self.objects {
            let Some(bbox) = color_bbox(img, obj.color) else { continue };
            let row: Vec<f64> = tokens
                .iter()
                .map(|t| {
                    if obj.words.iter().any(|w| w == t) {
                        self.strong
                    } else if obj.weak_words.iter().any(|w| w == t) {
                        self.weak
                    } else {
                        0.0
                    }
                })
                .collect();
            // an object the caption never mentions is not proposed
            if row.iter().all(|&s| s == 0.0) {
                continue;
            }
            proposals.push(bbox);
            alignment.push(row);
        }
        GroundingResult::new(tokens, proposals, alignment)
    }
}

/// Tracker replaying a per-frame box list, optionally drifting by `(dx, dy)` per frame.
///
/// Frame `t` (0-based, counted from the init frame) returns `boxes[t] + t * (dx, dy)`;
/// the last box repeats when the list runs out.
#[derive(Debug, Clone)]
pub struct ScriptedTracker {
    boxes: Vec<BBox>,
    dx: f64,
    dy: f64,
    frame: Option<usize>,
    sessions: usize,
}

impl ScriptedTracker {
    pub fn oracle(boxes: Vec<BBox>) -> Self {
        Self::drifting(boxes, 0.0, 0.0)
    }

    pub fn drifting(boxes: Vec<BBox>, dx: f64, dy: f64) -> Self {
        ScriptedTracker { boxes, dx, dy, frame: None, sessions: 0 }
    }

    fn session_id(&self) -> SessionHandle {
        SessionHandle(format!("scripted-{}", self.sessions))
    }
}

impl VisualTracker for ScriptedTracker {
    fn init(&mut self, _frame: &Image, bbox: BBox) -> Result<SessionHandle, BackendError> {
        if self.boxes.is_empty() {
            self.boxes.push(bbox);
        }
        self.sessions += 1;
        self.frame = Some(0);
        Ok(self.session_id())
    }

    fn predict(&mut self, session: &SessionHandle, _frame: &Image) -> Result<TrackerPrediction, BackendError> {
        let Some(prev) = self.frame else { return Err(BackendError::SessionLost) };
        if *session != self.session_id() {
            return Err(BackendError::SessionLost);
        }
        let t = prev + 1;
        self.frame = Some(t);
        let base = self.boxes[t.min(self.boxes.len() - 1)];
        Ok(TrackerPrediction { bbox: base.translate(t as f64 * self.dx, t as f64 * self.dy), score: 1.0 })
    }
}

/// Embeds an image as its mean colour plus a constant channel, so that mixing
/// in dark background changes direction and not just magnitude.
#[derive(Debug, Clone, Default)]
pub struct MeanColorEmbedder {
    calls: CallCounter,
}

impl MeanColorEmbedder {
    pub const DIM: usize = 4;
    const BIAS: f64 = 0.25;

    pub fn new() -> Self {
        Self::default()
    }

    pub fn call_counter(&self) -> CallCounter {
        self.calls.clone()
    }
}

impl Embedder for MeanColorEmbedder {
    fn embed_image(&mut self, img: &Image) -> Result<FeatureVector, BackendError> {
        self.calls.bump();
        let n = (img.width() as usize * img.height() as usize).max(1) as f64;
        let mut sum = [0.0f64; 3];
        for px in img.as_bytes().chunks_exact(3) {
            for (s, &c) in sum.iter_mut().zip(px) {
                *s += c as f64;
            }
        }
        let mut v: Vec<f64> = sum.iter().map(|s| s / n / 255.0).collect();
        v.push(Self::BIAS);
        Ok(FeatureVector(v))
    }

    fn embed_text(&mut self, text: &str) -> Result<FeatureVector, BackendError> {
        if text.trim().is_empty() {
            return Err(BackendError::Rejected { status: None, message: "empty text".into() });
        }
        self.calls.bump();
        let digest = Sha256::digest(text.as_bytes());
        Ok(FeatureVector(digest[..Self::DIM].iter().map(|&b| b as f64 / 255.0).collect()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bb(x: f64, y: f64, w: f64, h: f64) -> BBox {
        BBox::new(x, y, w, h).unwrap()
    }

    #[test]
    fn scripted_mllm_is_fifo() {
        let mut m = ScriptedMllm::new(["FOREGROUND: red car\nBACKGROUND: road. trees", "second"]);
        let req = ChatRequest::new(None, "describe", 0.0).unwrap();
        assert_eq!(m.complete(&req).unwrap(), "FOREGROUND: red car\nBACKGROUND: road. trees");
        assert_eq!(m.complete(&req).unwrap(), "second");
        assert!(matches!(m.complete(&req), Err(BackendError::ScriptExhausted(_))));
        assert_eq!(m.call_counter().get(), 3);
    }

    #[test]
    fn table_grounder_returns_configured_result() {
        let result = GroundingResult::new(
            simple_tokenize("red car. road"),
            vec![bb(0.0, 0.0, 5.0, 5.0), bb(10.0, 10.0, 5.0, 5.0)],
            vec![vec![0.9, 0.8, 0.1, 0.0], vec![0.0, 0.0, 0.0, 0.7]],
        )
        .unwrap();
        let mut g =
            TableGrounder::new(vec![TableEntry { caption: "red car. road".into(), result: result.clone() }]).unwrap();
        let img = Image::filled(4, 4, [0, 0, 0]);
        assert_eq!(g.ground(&img, "red car. road").unwrap(), result);
        assert_eq!(g.call_counter().get(), 1);
    }

    #[test]
    fn table_grounder_unknown_caption_is_empty() {
        let mut g = TableGrounder::new(vec![]).unwrap();
        let img = Image::filled(4, 4, [0, 0, 0]);
        let r = g.ground(&img, "red car. road").unwrap();
        assert_eq!(r.num_proposals(), 0);
        assert_eq!(r.num_tokens(), 4);
        assert!(r.alignment.is_empty());
    }

    #[test]
    fn scene_grounder_finds_colored_squares() {
        let mut img = Image::filled(32, 32, [0, 0, 0]);
        img.fill_rect(2, 3, 10, 9, [200, 0, 0]);
        img.fill_rect(20, 20, 25, 30, [0, 0, 200]);
        let mut g = SceneGrounder::new(vec![
            SceneObject { color: [200, 0, 0], words: vec!["red".into()], weak_words: vec!["square".into()] },
            SceneObject { color: [0, 0, 200], words: vec!["blue".into()], weak_words: vec!["square".into()] },
            SceneObject { color: [0, 200, 0], words: vec!["green".into()], weak_words: vec![] },
        ]);
        let r = g.ground(&img, "red. square. blue. green.").unwrap();
        assert_eq!(r.proposals, vec![bb(2.0, 3.0, 8.0, 6.0), bb(20.0, 20.0, 5.0, 10.0)]);
        assert_eq!(r.tokens.len(), 8);
        assert_eq!(r.alignment[0][0], 0.9);
        assert_eq!(r.alignment[0][2], 0.15);
        assert_eq!(r.alignment[1][4], 0.9);
    }

    #[test]
    fn drifting_tracker_follows_closed_form() {
        let gt: Vec<BBox> = (0..5).map(|t| bb(10.0 + t as f64, 20.0, 8.0, 8.0)).collect();
        let mut tr = ScriptedTracker::drifting(gt.clone(), 2.0, -1.0);
        let img = Image::filled(4, 4, [0, 0, 0]);
        let s = tr.init(&img, gt[0]).unwrap();
        for (t, g) in gt.iter().enumerate().skip(1) {
            let p = tr.predict(&s, &img).unwrap();
            assert_eq!(p.bbox, g.translate(2.0 * t as f64, -(t as f64)));
        }
    }

    #[test]
    fn predict_before_init_is_session_lost() {
        let mut tr = ScriptedTracker::oracle(vec![bb(0.0, 0.0, 1.0, 1.0)]);
        let img = Image::filled(4, 4, [0, 0, 0]);
        let err = tr.predict(&SessionHandle("x".into()), &img).unwrap_err();
        assert!(matches!(err, BackendError::SessionLost));
    }

    #[test]
    fn mean_color_embedder_is_deterministic() {
        let mut e = MeanColorEmbedder::new();
        let img = Image::filled(3, 3, [255, 0, 0]);
        let a = e.embed_image(&img).unwrap();
        let b = e.embed_image(&img).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim(), MeanColorEmbedder::DIM);
        assert_eq!(e.embed_text("red").unwrap(), e.embed_text("red").unwrap());
    }

    #[test]
    fn tokenizer_splits_punctuation() {
        assert_eq!(simple_tokenize("Red car. road"), vec!["red", "car", ".", "road"]);
        assert_eq!(simple_tokenize("man's hat"), vec!["man", "'", "s", "hat"]);
    }
}
