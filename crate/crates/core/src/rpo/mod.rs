//! Reflection-based prompt optimisation of the target description.
//!
//! The chat model describes the green-boxed target; the grounder tries to find
//! that description in the template frame; words that led to the target or away
//! from it are fed back to the model until the description grounds well enough
//! or the iteration budget runs out. The background description is frozen after
//! the first reply.

mod classify;
mod extract;
mod prompts;

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backends::{BackendError, ChatRequest, Grounder, Mllm};
use crate::geometry::{annotate, annotation_thickness, BBox, Image, GREEN};

pub use self::classify::{align_tokens, classify_words, quality, token_owners, word_spans, WordClasses};
pub use self::extract::{extract_descriptions, extract_foreground, normalize, DescriptionPair};
pub use self::prompts::{
    avoid_repeat_suffix, format_reminder_suffix, render_init_prompt, render_suitability_prompt, render_update_prompt,
};

#[derive(Debug, Error)]
pub enum RpoError {
    #[error("could not extract descriptions: {0}")]
    ExtractionFailed(String),
    #[error("token {index} ({token:?}) does not align with the caption at byte {position}")]
    TokenMapFailure { token: String, index: usize, position: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("target box must have positive area, got {0}")]
    InvalidTarget(BBox),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// Thresholds shared by prompt optimisation and semantic tracking.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RpoConfig {
    /// IoU above which a proposal counts as the target.
    pub theta1: f64,
    /// Alignment score above which a proposal matches a token.
    pub theta2: f64,
    /// IoU below which a proposal counts as something else.
    pub theta3: f64,
    /// Grounding quality that ends the loop.
    pub epsilon: f64,
    pub max_iters: usize,
    /// Sampling temperature for chat requests.
    pub temperature: f64,
}

impl Default for RpoConfig {
    fn default() -> Self {
        RpoConfig { theta1: 0.3, theta2: 0.2, theta3: 0.1, epsilon: 0.4, max_iters: 5, temperature: 0.0 }
    }
}

impl RpoConfig {
    pub fn validate(&self) -> Result<(), RpoError> {
        let bad = |msg: String| Err(RpoError::InvalidConfig(msg));
        if !(0.0 <= self.theta3 && self.theta3 < self.theta1 && self.theta1 <= 1.0) {
            return bad(format!("need 0 <= theta3 < theta1 <= 1, got theta3={} theta1={}", self.theta3, self.theta1));
        }
        if !(0.0 < self.theta2 && self.theta2 < 1.0) {
            return bad(format!("need 0 < theta2 < 1, got {}", self.theta2));
        }
        if !(0.0 < self.epsilon && self.epsilon <= 1.0) {
            return bad(format!("need 0 < epsilon <= 1, got {}", self.epsilon));
        }
        if self.max_iters < 1 {
            return bad("max_iters must be at least 1".into());
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return bad(format!("temperature must be finite and non-negative, got {}", self.temperature));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RpoIteration {
    pub index: usize,
    pub fore_text: String,
    pub pos_words: Vec<String>,
    pub neg_words: Vec<String>,
    pub quality: f64,
    /// Prompt whose reply produced `fore_text`.
    pub prompt_sent: String,
    pub raw_mllm_reply: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RpoOutcome {
    Converged,
    Exhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RpoTrace {
    pub back: String,
    pub iterations: Vec<RpoIteration>,
    pub outcome: RpoOutcome,
    pub chosen_iter: usize,
}

impl RpoTrace {
    /// One JSON object per iteration, then `{outcome, chosen_iter}`.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for it in &self.iterations {
            let line = json!({
                "iter": it.index,
                "fore": it.fore_text,
                "back": self.back,
                "pos": it.pos_words,
                "neg": it.neg_words,
                "r": it.quality,
                "prompt_digest": hex::encode(Sha256::digest(it.prompt_sent.as_bytes())),
            });
            out.push_str(&line.to_string());
            out.push('\n');
        }
        let outcome = match self.outcome {
            RpoOutcome::Converged => "converged",
            RpoOutcome::Exhausted => "exhausted",
        };
        out.push_str(&json!({ "outcome": outcome, "chosen_iter": self.chosen_iter }).to_string());
        out.push('\n');
        out
    }

    pub fn final_quality(&self) -> f64 {
        self.iterations.last().map_or(0.0, |it| it.quality)
    }
}

/// Sends `prompt`, parsing the reply with `parse`; one re-ask on a parse failure.
fn ask<T>(
    mllm: &mut dyn Mllm,
    image: &Image,
    prompt: String,
    temperature: f64,
    parse: impl Fn(&str) -> Result<T, RpoError>,
) -> Result<(T, String, String), RpoError> {
    let reply = mllm.complete(&ChatRequest::new(Some(image.clone()), prompt.clone(), temperature)?)?;
    match parse(&reply) {
        Ok(v) => Ok((v, reply, prompt)),
        Err(first) => {
            log::warn!("unparseable chat reply ({first}); asking again");
            let retry = format!("{prompt}{}", format_reminder_suffix());
            let reply = mllm.complete(&ChatRequest::new(Some(image.clone()), retry.clone(), temperature)?)?;
            let v = parse(&reply)?;
            Ok((v, reply, retry))
        }
    }
}

/// Runs the describe / ground / reflect loop on the first frame.
///
/// `template_img` is the image the descriptions are grounded on. Returns the
/// chosen descriptions (the converged iteration, or the best-quality one when the
/// budget runs out) and the full trace.
pub fn optimize(
    first_frame: &Image,
    template_img: &Image,
    gt: &BBox,
    mllm: &mut dyn Mllm,
    grounder: &mut dyn Grounder,
    cfg: &RpoConfig,
) -> Result<(DescriptionPair, RpoTrace), RpoError> {
    cfg.validate()?;
    if gt.validate().is_err() || gt.area() <= 0.0 {
        return Err(RpoError::InvalidTarget(*gt));
    }
    let marked = annotate(first_frame, gt, GREEN, annotation_thickness(first_frame.width(), first_frame.height()));

    let (initial, mut reply, mut prompt) =
        ask(mllm, &marked, render_init_prompt(), cfg.temperature, extract_descriptions)?;
    let back = initial.back.clone();
    let mut fore = initial.fore.clone();
    let mut iterations: Vec<RpoIteration> = Vec::new();
    let mut outcome = RpoOutcome::Exhausted;

    for index in 0..cfg.max_iters {
        let pair = DescriptionPair::new(&fore, &back)?;
        let grounding = grounder.ground(template_img, &pair.fore)?;
        let r = quality(&grounding, gt);
        iterations.push(RpoIteration {
            index,
            fore_text: pair.fore.clone(),
            pos_words: Vec::new(),
            neg_words: Vec::new(),
            quality: r,
            prompt_sent: prompt.clone(),
            raw_mllm_reply: reply.clone(),
        });
        log::debug!("rpo iteration {index}: {:?} grounds with quality {r:.4}", pair.fore);
        if r > cfg.epsilon {
            outcome = RpoOutcome::Converged;
            break;
        }
        if index + 1 == cfg.max_iters {
            break;
        }

        let classes = classify_words(&grounding, &pair.fore_words, gt, cfg)?;
        let last = iterations.last_mut().expect("just pushed");
        last.pos_words = classes.pos.iter().cloned().collect();
        last.neg_words = classes.neg.iter().cloned().collect();

        let update = render_update_prompt(&classes.pos, &classes.neg);
        let (mut next, mut next_reply, mut next_prompt) =
            ask(mllm, &marked, update.clone(), cfg.temperature, extract_foreground)?;
        let seen: Vec<String> = iterations.iter().map(|it| it.fore_text.clone()).collect();
        if seen.contains(&next) {
            let nudged = format!("{update}{}", avoid_repeat_suffix(&seen));
            (next, next_reply, next_prompt) = ask(mllm, &marked, nudged, cfg.temperature, extract_foreground)?;
            if seen.contains(&next) {
                log::warn!("chat model repeated a previous description twice; stopping");
                break;
            }
        }
        fore = next;
        reply = next_reply;
        prompt = next_prompt;
    }

    let chosen_iter = match outcome {
        RpoOutcome::Converged => iterations.len() - 1,
        RpoOutcome::Exhausted => {
            iterations
                .iter()
                .enumerate()
                .fold(0, |best, (i, it)| if it.quality > iterations[best].quality { i } else { best })
        }
    };
    let descriptions = DescriptionPair::new(&iterations[chosen_iter].fore_text, &back)?;
    Ok((descriptions, RpoTrace { back, iterations, outcome, chosen_iter }))
}
