//! Synthetic moving-square sequences with a matching scripted-backend
//! configuration, so the whole pipeline runs offline.
//!
//! The canvas is split into three horizontal bands. The red target moves in
//! the middle band; each distractor keeps to its own outer band, so no two
//! squares ever overlap. All positions are whole pixels.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::backends::mock::SceneObject;
use crate::backends::{BackendSpecs, EmbedderSpec, GrounderSpec, MllmSpec, TrackerSpec};
use crate::geometry::{BBox, Image, Rgb};
use crate::pipeline::{format_box, EngineConfig};

pub const BACKGROUND: Rgb = [40, 40, 40];
pub const TARGET: Rgb = [220, 40, 40];
pub const DISTRACTORS: [Rgb; 2] = [[40, 60, 220], [40, 200, 60]];
const DISTRACTOR_WORDS: [&str; 2] = ["blue", "green"];

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthParams {
    pub frames: usize,
    pub width: u32,
    pub height: u32,
    /// Side of every square, in pixels.
    pub size: u32,
    /// Largest per-frame speed along each axis, in whole pixels.
    pub max_speed: i64,
    /// Number of distractor squares (0 to 2).
    pub distractors: usize,
    /// Per-frame drift of the scripted visual tracker.
    pub tracker_drift: (f64, f64),
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            frames: 30,
            width: 256,
            height: 256,
            size: 24,
            max_speed: 3,
            distractors: 2,
            tracker_drift: (3.0, 0.0),
            seed: 0,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidParams(m));
        if self.frames == 0 {
            return bad("need at least one frame".into());
        }
        if self.size == 0 {
            return bad("square size must be positive".into());
        }
        if self.height / 3 <= self.size || self.width <= self.size + 1 {
            return bad(format!(
                "a {}x{} canvas cannot hold three bands of {}px squares",
                self.width, self.height, self.size
            ));
        }
        if self.distractors > DISTRACTORS.len() {
            return bad(format!("at most {} distractors", DISTRACTORS.len()));
        }
        if self.max_speed < 0 {
            return bad("max_speed must be non-negative".into());
        }
        if !(self.tracker_drift.0.is_finite() && self.tracker_drift.1.is_finite()) {
            return bad("tracker drift must be finite".into());
        }
        Ok(())
    }
}

/// Position on `[lo, hi]` after moving `v` per step for `t` steps, bouncing off both ends.
fn bounce(start: i64, v: i64, t: i64, lo: i64, hi: i64) -> i64 {
    let span = hi - lo;
    if span == 0 {
        return lo;
    }
    let period = 2 * span;
    let p = (start - lo + v * t).rem_euclid(period);
    lo + if p <= span { p } else { period - p }
}

#[derive(Debug, Clone, Copy)]
struct Track {
    x0: i64,
    y0: i64,
    vx: i64,
    vy: i64,
    x_range: (i64, i64),
    y_range: (i64, i64),
}

impl Track {
    fn random(rng: &mut ChaCha8Rng, p: &SynthParams, band: u32) -> Track {
        let size = p.size as i64;
        let band_h = (p.height / 3) as i64;
        let top = band as i64 * band_h;
        let x_range = (0, p.width as i64 - size);
        let y_range = (top, top + band_h - size - 1);
        let speed = p.max_speed;
        Track {
            x0: rng.random_range(x_range.0..=x_range.1),
            y0: rng.random_range(y_range.0..=y_range.1),
            vx: rng.random_range(-speed..=speed),
            vy: rng.random_range(-speed..=speed),
            x_range,
            y_range,
        }
    }

    fn at(&self, t: usize, size: u32) -> BBox {
        let x = bounce(self.x0, self.vx, t as i64, self.x_range.0, self.x_range.1);
        let y = bounce(self.y0, self.vy, t as i64, self.y_range.0, self.y_range.1);
        BBox::new(x as f64, y as f64, size as f64, size as f64).expect("non-negative size")
    }
}

#[derive(Debug, Clone)]
pub struct SynthSequence {
    pub frames: Vec<Image>,
    pub groundtruth: Vec<BBox>,
    /// Per distractor, its box in every frame.
    pub distractors: Vec<Vec<BBox>>,
    pub params: SynthParams,
}

fn paint(img: &mut Image, b: &BBox, color: Rgb) {
    img.fill_rect(b.x as i64, b.y as i64, b.right() as i64, b.bottom() as i64, color);
}

pub fn generate(params: &SynthParams) -> Result<SynthSequence, SynthError> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let target = Track::random(&mut rng, params, 1);
    let others: Vec<Track> = (0..params.distractors).map(|i| Track::random(&mut rng, params, [0, 2][i])).collect();

    let mut seq = SynthSequence {
        frames: Vec::with_capacity(params.frames),
        groundtruth: Vec::with_capacity(params.frames),
        distractors: vec![Vec::with_capacity(params.frames); others.len()],
        params: *params,
    };
    for t in 0..params.frames {
        let mut img = Image::filled(params.width, params.height, BACKGROUND);
        for (i, track) in others.iter().enumerate() {
            let b = track.at(t, params.size);
            paint(&mut img, &b, DISTRACTORS[i]);
            seq.distractors[i].push(b);
        }
        let b = target.at(t, params.size);
        paint(&mut img, &b, TARGET);
        seq.groundtruth.push(b);
        seq.frames.push(img);
    }
    Ok(seq)
}

impl SynthSequence {
    /// Scene objects and scripted replies that describe this scene, and a
    /// drifting tracker seeded with the true boxes.
    pub fn config(&self) -> EngineConfig {
        let mut objects =
            vec![SceneObject { color: TARGET, words: vec!["red".into()], weak_words: vec!["square".into()] }];
        for i in 0..self.distractors.len() {
            objects.push(SceneObject {
                color: DISTRACTORS[i],
                words: vec![DISTRACTOR_WORDS[i].into()],
                weak_words: vec!["square".into()],
            });
        }
        let back: Vec<String> =
            DISTRACTOR_WORDS[..self.distractors.len()].iter().map(|w| format!("{w} square")).collect();
        let describe = format!("FOREGROUND: red square\nBACKGROUND: {}", back.join(". "));
        let (dx, dy) = self.params.tracker_drift;
        let mut cfg = EngineConfig {
            backends: BackendSpecs {
                mllm: Some(MllmSpec::Scripted { replies: vec![describe, "VERDICT: SUITABLE".into()] }),
                grounder: Some(GrounderSpec::Scene { objects }),
                tracker: Some(TrackerSpec::Scripted { boxes: self.groundtruth.clone(), dx, dy }),
                embedder: Some(EmbedderSpec::MeanColor),
                ..Default::default()
            },
            ..Default::default()
        };
        cfg.pipeline.cassette_dir = Some("cassettes".into());
        cfg
    }

    /// Writes `img/NNNN.png`, `groundtruth.txt`, `nlp.txt` and `config.toml` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), SynthError> {
        let io = |path: &Path, e: &dyn std::fmt::Display| SynthError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        let img_dir = dir.join("img");
        fs::create_dir_all(&img_dir).map_err(|e| io(&img_dir, &e))?;
        for (i, frame) in self.frames.iter().enumerate() {
            let path = img_dir.join(format!("{:04}.png", i + 1));
            frame.save(&path).map_err(|e| io(&path, &e))?;
        }
        let gt: String = self.groundtruth.iter().map(|b| format_box(b) + "\n").collect();
        let write = |name: &str, text: &str| {
            let path = dir.join(name);
            fs::write(&path, text).map_err(|e| io(&path, &e))
        };
        write("groundtruth.txt", &gt)?;
        write("nlp.txt", "red square\n")?;
        let toml = toml::to_string(&self.config()).map_err(|e| io(&dir.join("config.toml"), &e))?;
        write("config.toml", &toml)
    }
}
