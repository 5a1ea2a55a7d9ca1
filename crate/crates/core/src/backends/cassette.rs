//! Ordered record/replay of backend calls.
//!
//! A cassette is a JSON array of `{kind, digest, response_json}` entries, one per
//! backend call, in call order. The digest is a SHA-256 over a canonical JSON
//! rendering of the request (prompt, caption, image content hash, box). Sampling
//! temperature and credentials never enter the digest.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::geometry::{BBox, Image};

use super::{
    BackendError, ChatRequest, Embedder, FeatureVector, Grounder, GroundingResult, Mllm, SessionHandle,
    TrackerPrediction, VisualTracker,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallKind {
    Chat,
    Ground,
    TrackerInit,
    TrackerPredict,
    EmbedImage,
    EmbedText,
}

impl CallKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CallKind::Chat => "chat",
            CallKind::Ground => "ground",
            CallKind::TrackerInit => "tracker_init",
            CallKind::TrackerPredict => "tracker_predict",
            CallKind::EmbedImage => "embed_image",
            CallKind::EmbedText => "embed_text",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CassetteEntry {
    pub kind: CallKind,
    pub digest: String,
    pub response_json: Value,
}

/// In-memory cassette contents.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Cassette {
    pub entries: Vec<CassetteEntry>,
}

impl Cassette {
    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let text =
            fs::read_to_string(path).map_err(|e| BackendError::CassetteIo(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| BackendError::CassetteIo(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<(), BackendError> {
        let io = |e: std::io::Error| BackendError::CassetteIo(format!("{}: {e}", path.display()));
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io)?;
        }
        let mut text = serde_json::to_string_pretty(self).expect("cassette serializes");
        text.push('\n');
        // write-then-rename so a crash never leaves a truncated cassette behind
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, text).map_err(io)?;
        fs::rename(&tmp, path).map_err(io)
    }
}

fn digest_of(canonical: &Value) -> String {
    hex::encode(Sha256::digest(canonical.to_string().as_bytes()))
}

fn image_field(img: Option<&Image>) -> Value {
    img.map(|i| Value::String(i.content_digest())).unwrap_or(Value::Null)
}

pub fn chat_digest(req: &ChatRequest) -> String {
    digest_of(&json!({ "kind": "chat", "prompt": req.prompt, "image": image_field(req.image.as_ref()) }))
}

pub fn ground_digest(img: &Image, caption: &str) -> String {
    digest_of(&json!({ "kind": "ground", "caption": caption, "image": image_field(Some(img)) }))
}

pub fn tracker_init_digest(img: &Image, bbox: &BBox) -> String {
    digest_of(&json!({ "kind": "tracker_init", "box": bbox, "image": image_field(Some(img)) }))
}

pub fn tracker_predict_digest(session: &SessionHandle, img: &Image) -> String {
    digest_of(&json!({ "kind": "tracker_predict", "session": session, "image": image_field(Some(img)) }))
}

pub fn embed_image_digest(img: &Image) -> String {
    digest_of(&json!({ "kind": "embed_image", "image": image_field(Some(img)) }))
}

pub fn embed_text_digest(text: &str) -> String {
    digest_of(&json!({ "kind": "embed_text", "text": text }))
}

#[derive(Debug)]
struct RecorderState {
    path: PathBuf,
    cassette: Cassette,
    dirty: bool,
}

impl RecorderState {
    fn flush(&mut self) -> Result<(), BackendError> {
        self.cassette.save(&self.path)?;
        self.dirty = false;
        Ok(())
    }
}

impl Drop for RecorderState {
    fn drop(&mut self) {
        if self.dirty {
            if let Err(e) = self.flush() {
                log::error!("failed to flush cassette on drop: {e}");
            }
        }
    }
}

/// Single-writer cassette recorder shared by the wrapped backends of one sequence.
#[derive(Debug, Clone)]
pub struct CassetteRecorder(Arc<Mutex<RecorderState>>);

impl CassetteRecorder {
    pub fn create(path: impl Into<PathBuf>) -> Self {
        CassetteRecorder(Arc::new(Mutex::new(RecorderState {
            path: path.into(),
            cassette: Cassette::default(),
            dirty: true,
        })))
    }

    pub fn wrap<B>(&self, inner: B) -> Recording<B> {
        Recording { inner, recorder: self.clone() }
    }

    pub fn flush(&self) -> Result<(), BackendError> {
        self.lock().flush()
    }

    pub fn len(&self) -> usize {
        self.lock().cassette.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn lock(&self) -> MutexGuard<'_, RecorderState> {
        self.0.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn push<R: Serialize>(&self, kind: CallKind, digest: String, response: &R) {
        let response_json = serde_json::to_value(response).expect("backend responses serialize");
        let mut st = self.lock();
        st.cassette.entries.push(CassetteEntry { kind, digest, response_json });
        st.dirty = true;
    }
}

/// Backend wrapper that forwards to `inner` and records every successful call.
#[derive(Debug)]
pub struct Recording<B> {
    inner: B,
    recorder: CassetteRecorder,
}

impl<B: Mllm> Mllm for Recording<B> {
    fn complete(&mut self, req: &ChatRequest) -> Result<String, BackendError> {
        let out = self.inner.complete(req)?;
        self.recorder.push(CallKind::Chat, chat_digest(req), &out);
        Ok(out)
    }
}

impl<B: Grounder> Grounder for Recording<B> {
    fn ground(&mut self, img: &Image, caption: &str) -> Result<GroundingResult, BackendError> {
        let out = self.inner.ground(img, caption)?;
        self.recorder.push(CallKind::Ground, ground_digest(img, caption), &out);
        Ok(out)
    }
}

impl<B: VisualTracker> VisualTracker for Recording<B> {
    fn init(&mut self, frame: &Image, bbox: BBox) -> Result<SessionHandle, BackendError> {
        let out = self.inner.init(frame, bbox)?;
        self.recorder.push(CallKind::TrackerInit, tracker_init_digest(frame, &bbox), &json!({ "session": out }));
        Ok(out)
    }

    fn predict(&mut self, session: &SessionHandle, frame: &Image) -> Result<TrackerPrediction, BackendError> {
        let out = self.inner.predict(session, frame)?;
        self.recorder.push(CallKind::TrackerPredict, tracker_predict_digest(session, frame), &out);
        Ok(out)
    }
}

impl<B: Embedder> Embedder for Recording<B> {
    fn embed_image(&mut self, img: &Image) -> Result<FeatureVector, BackendError> {
        let out = self.inner.embed_image(img)?;
        self.recorder.push(CallKind::EmbedImage, embed_image_digest(img), &json!({ "vector": out }));
        Ok(out)
    }

    fn embed_text(&mut self, text: &str) -> Result<FeatureVector, BackendError> {
        let out = self.inner.embed_text(text)?;
        self.recorder.push(CallKind::EmbedText, embed_text_digest(text), &json!({ "vector": out }));
        Ok(out)
    }
}

#[derive(Debug)]
struct PlayerState {
    cassette: Cassette,
    cursor: usize,
}

/// Serves recorded responses in order, verifying each request digest.
#[derive(Debug, Clone)]
pub struct Replaying(Arc<Mutex<PlayerState>>);

impl Replaying {
    pub fn open(path: &Path) -> Result<Self, BackendError> {
        if !path.is_file() {
            return Err(BackendError::CassetteIo(format!("no cassette at {}", path.display())));
        }
        Ok(Self::from_cassette(Cassette::load(path)?))
    }

    pub fn from_cassette(cassette: Cassette) -> Self {
        Replaying(Arc::new(Mutex::new(PlayerState { cassette, cursor: 0 })))
    }

    /// Entries not yet served.
    pub fn remaining(&self) -> usize {
        let st = self.lock();
        st.cassette.entries.len() - st.cursor
    }

    fn lock(&self) -> MutexGuard<'_, PlayerState> {
        self.0.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn next<R: DeserializeOwned>(&self, kind: CallKind, digest: String) -> Result<R, BackendError> {
        let mut st = self.lock();
        let index = st.cursor;
        let entry = st.cassette.entries.get(index).ok_or(BackendError::CassetteExhausted { index })?;
        if entry.kind != kind || entry.digest != digest {
            return Err(BackendError::DigestMismatch {
                index,
                kind: kind.as_str().to_string(),
                expected: format!("{}:{}", entry.kind.as_str(), entry.digest),
                actual: format!("{}:{}", kind.as_str(), digest),
            });
        }
        let value = entry.response_json.clone();
        st.cursor += 1;
        serde_json::from_value(value)
            .map_err(|e| BackendError::CassetteIo(format!("call {index}: malformed recorded response: {e}")))
    }
}

#[derive(Deserialize)]
struct SessionReply {
    session: SessionHandle,
}

#[derive(Deserialize)]
struct VectorReply {
    vector: FeatureVector,
}

impl Mllm for Replaying {
    fn complete(&mut self, req: &ChatRequest) -> Result<String, BackendError> {
        self.next(CallKind::Chat, chat_digest(req))
    }
}

impl Grounder for Replaying {
    fn ground(&mut self, img: &Image, caption: &str) -> Result<GroundingResult, BackendError> {
        let g: GroundingResult = self.next(CallKind::Ground, ground_digest(img, caption))?;
        g.validate()?;
        Ok(g)
    }
}

impl VisualTracker for Replaying {
    fn init(&mut self, frame: &Image, bbox: BBox) -> Result<SessionHandle, BackendError> {
        let r: SessionReply = self.next(CallKind::TrackerInit, tracker_init_digest(frame, &bbox))?;
        Ok(r.session)
    }

    fn predict(&mut self, session: &SessionHandle, frame: &Image) -> Result<TrackerPrediction, BackendError> {
        self.next(CallKind::TrackerPredict, tracker_predict_digest(session, frame))
    }
}

impl Embedder for Replaying {
    fn embed_image(&mut self, img: &Image) -> Result<FeatureVector, BackendError> {
        let r: VectorReply = self.next(CallKind::EmbedImage, embed_image_digest(img))?;
        Ok(r.vector)
    }

    fn embed_text(&mut self, text: &str) -> Result<FeatureVector, BackendError> {
        let r: VectorReply = self.next(CallKind::EmbedText, embed_text_digest(text))?;
        Ok(r.vector)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::mock::ScriptedMllm;

    fn req(prompt: &str, temperature: f64) -> ChatRequest {
        ChatRequest::new(Some(Image::filled(2, 2, [1, 2, 3])), prompt, temperature).unwrap()
    }

    #[test]
    fn record_then_replay_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        let rec = CassetteRecorder::create(&path);
        let mut live = rec.wrap(ScriptedMllm::new(["a", "b", "c"]));
        let answers: Vec<String> = ["p1", "p2", "p3"].iter().map(|p| live.complete(&req(p, 0.0)).unwrap()).collect();
        rec.flush().unwrap();

        let mut replay = Replaying::open(&path).unwrap();
        for (p, a) in ["p1", "p2", "p3"].iter().zip(&answers) {
            // temperature is not part of the digest
            assert_eq!(&replay.complete(&req(p, 0.7)).unwrap(), a);
        }
        assert_eq!(replay.remaining(), 0);
    }

    #[test]
    fn perturbed_prompt_is_digest_mismatch() {
        let mut c = Cassette::default();
        for p in ["p1", "p2"] {
            c.entries.push(CassetteEntry {
                kind: CallKind::Chat,
                digest: chat_digest(&req(p, 0.0)),
                response_json: json!("ok"),
            });
        }
        let mut replay = Replaying::from_cassette(c);
        replay.complete(&req("p1", 0.0)).unwrap();
        match replay.complete(&req("p2 changed", 0.0)) {
            Err(BackendError::DigestMismatch { index, .. }) => assert_eq!(index, 1),
            other => panic!("expected mismatch, got {other:?}"),
        }
    }

    #[test]
    fn exhausted_cassette() {
        let mut c = Cassette::default();
        for p in ["p1", "p2"] {
            c.entries.push(CassetteEntry {
                kind: CallKind::Chat,
                digest: chat_digest(&req(p, 0.0)),
                response_json: json!("ok"),
            });
        }
        let mut replay = Replaying::from_cassette(c);
        replay.complete(&req("p1", 0.0)).unwrap();
        replay.complete(&req("p2", 0.0)).unwrap();
        assert!(matches!(replay.complete(&req("p3", 0.0)), Err(BackendError::CassetteExhausted { index: 2 })));
    }

    #[test]
    fn image_content_enters_digest() {
        let a = ChatRequest::new(Some(Image::filled(2, 2, [0, 0, 0])), "p", 0.0).unwrap();
        let b = ChatRequest::new(Some(Image::filled(2, 2, [0, 0, 1])), "p", 0.0).unwrap();
        let c = ChatRequest::new(None, "p", 0.0).unwrap();
        assert_ne!(chat_digest(&a), chat_digest(&b));
        assert_ne!(chat_digest(&a), chat_digest(&c));
    }

    #[test]
    fn missing_cassette_is_error() {
        assert!(Replaying::open(Path::new("/nonexistent/cassette.json")).is_err());
    }
}
