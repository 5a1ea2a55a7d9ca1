use std::collections::BTreeSet;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::backends::GroundingResult;
use crate::geometry::{iou, BBox};

use super::{RpoConfig, RpoError};

/// Strips sub-word markers used by common tokenizers (WordPiece `##`, byte-level BPE `Ġ`,
/// SentencePiece `▁`, `</w>` end markers).
fn token_text(token: &str) -> String {
    let t = token.trim_start_matches("##").trim_start_matches(['Ġ', '▁']);
    t.strip_suffix("</w>").unwrap_or(t).trim().to_lowercase()
}

fn is_special(token: &str) -> bool {
    let t = token.trim();
    (t.starts_with('[') && t.ends_with(']') && t.len() > 2) || (t.starts_with('<') && t.ends_with('>') && t.len() > 2)
}

/// Locates each token in `caption` by greedy left-to-right matching.
///
/// Special tokens (`[CLS]`, `<s>`, ...) that do not occur literally map to `None`.
pub fn align_tokens(caption: &str, tokens: &[String]) -> Result<Vec<Option<Range<usize>>>, RpoError> {
    let hay = caption.to_lowercase();
    let mut cursor = 0;
    let mut spans = Vec::with_capacity(tokens.len());
    for (index, token) in tokens.iter().enumerate() {
        let text = token_text(token);
        if text.is_empty() {
            spans.push(None);
            continue;
        }
        let start = cursor + (hay[cursor..].len() - hay[cursor..].trim_start().len());
        if hay[start..].starts_with(&text) {
            cursor = start + text.len();
            spans.push(Some(start..cursor));
        } else if is_special(token) {
            spans.push(None);
        } else {
            return Err(RpoError::TokenMapFailure { token: token.clone(), index, position: start });
        }
    }
    Ok(spans)
}

/// Character ranges of whitespace-separated words in `caption`.
pub fn word_spans(caption: &str) -> Vec<Range<usize>> {
    let mut spans = Vec::new();
    let mut start = None;
    for (i, c) in caption.char_indices() {
        match (c.is_whitespace(), start) {
            (false, None) => start = Some(i),
            (true, Some(s)) => {
                spans.push(s..i);
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        spans.push(s..caption.len());
    }
    spans
}

/// For each token, the index of the span in `words` containing its first character.
pub fn token_owners(caption: &str, words: &[Range<usize>], tokens: &[String]) -> Result<Vec<Option<usize>>, RpoError> {
    let spans = align_tokens(caption, tokens)?;
    Ok(spans
        .into_iter()
        .map(|span| span.and_then(|s| words.iter().position(|w| w.start <= s.start && s.start < w.end)))
        .collect())
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordClasses {
    pub pos: BTreeSet<String>,
    pub neg: BTreeSet<String>,
}

/// Splits the words of a grounded description into helpful (positive) and
/// misleading (negative) words.
///
/// A word's score against a proposal is the maximum over its tokens. A word is
/// positive when some proposal scoring above `theta2` overlaps `gt` by more than
/// `theta1`; negative when it is not positive and every proposal scoring above
/// `theta2` overlaps `gt` by less than `theta3` (including when there is none).
/// Repeated words are classified once, pooling the tokens of all occurrences.
pub fn classify_words(
    g: &GroundingResult,
    words: &[String],
    gt: &BBox,
    cfg: &RpoConfig,
) -> Result<WordClasses, RpoError> {
    let caption = words.join(" ");
    let spans = word_spans(&caption);
    let owners = token_owners(&caption, &spans, &g.tokens)?;

    let mut distinct: Vec<&str> = Vec::new();
    for w in words {
        if !distinct.contains(&w.as_str()) {
            distinct.push(w);
        }
    }
    let ious: Vec<f64> = g.proposals.iter().map(|p| iou(p, gt)).collect();

    let mut out = WordClasses::default();
    for word in distinct {
        let token_cols: Vec<usize> =
            owners.iter().enumerate().filter(|(_, o)| o.is_some_and(|wi| words[wi] == word)).map(|(m, _)| m).collect();
        let matching = (0..g.num_proposals()).filter(|&n| {
            let score = token_cols.iter().map(|&m| g.score(n, m)).fold(f64::NEG_INFINITY, f64::max);
            score > cfg.theta2
        });
        let mut positive = false;
        let mut all_low = true;
        for n in matching {
            positive |= ious[n] > cfg.theta1;
            all_low &= ious[n] < cfg.theta3;
        }
        if positive {
            out.pos.insert(word.to_string());
        } else if all_low {
            out.neg.insert(word.to_string());
        }
    }
    Ok(out)
}

/// Grounding quality: best IoU of any proposal with `gt`, or 0 without proposals.
pub fn quality(g: &GroundingResult, gt: &BBox) -> f64 {
    g.proposals.iter().map(|p| iou(p, gt)).fold(0.0, f64::max)
}
