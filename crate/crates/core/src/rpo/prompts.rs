//! Shipped prompt templates. The wording is ours; only the two-line output
//! format is a contract, because [`super::extract_descriptions`] parses it.

use std::collections::BTreeSet;

const INIT_PROMPT: &str = "\
The object marked with the green bounding box in this image is the target to be tracked.

1. Describe the target inside the green box so that an open-vocabulary object detector can find it. \
Use a short noun phrase built from concrete visual words: category, colour, shape, material, pose or position.
2. List the other salient objects in the scene that are NOT the target, as short noun phrases separated by '.'.

Do not mention the green box itself. Answer with exactly these two lines and nothing else:
FOREGROUND: <description of the target in the green box>
BACKGROUND: <other objects in the scene, separated by '.'>";

const UPDATE_HEADER: &str = "\
Your previous description of the object in the green bounding box did not let the detector locate it precisely.";

const FRESH_STRATEGY: &str = "\
None of your previous words pointed the detector at the target. Use a completely different description strategy: \
name a different category or part, or describe the target by its colour, texture or position relative to nearby objects.";

const UPDATE_FOOTER: &str = "\
Write a new short description of the object in the green box. Answer with exactly one line and nothing else:
FOREGROUND: <new description of the target in the green box>";

const SUITABILITY_PROMPT: &str = "\
The object marked with the green bounding box in this image is the target to be tracked.
Consider the other objects in the scene and how the target relates to them. Decide whether a short text description \
can reliably tell the target apart from everything else (for example, it fails when several identical objects are present \
or the target is too small or ambiguous to name).
Answer with exactly one line:
VERDICT: SUITABLE
or
VERDICT: UNSUITABLE <short reason>";

const FORMAT_REMINDER: &str = "\
Your previous answer did not follow the required format. Reply again, starting the line with FOREGROUND:";

/// Initial describe-the-target prompt.
pub fn render_init_prompt() -> String {
    INIT_PROMPT.to_string()
}

fn word_list(words: &BTreeSet<String>) -> String {
    if words.is_empty() {
        "(none)".to_string()
    } else {
        words.iter().map(String::as_str).collect::<Vec<_>>().join(", ")
    }
}

/// Reflection prompt built from the positive and negative words of the last round.
///
/// Words are listed in lexicographic order so the prompt is a pure function of the two sets.
pub fn render_update_prompt(pos: &BTreeSet<String>, neg: &BTreeSet<String>) -> String {
    let mut out = String::from(UPDATE_HEADER);
    out.push_str("\n\n");
    out.push_str(&format!("Helpful words to keep or extend: {}\n", word_list(pos)));
    out.push_str(&format!("Misleading words to avoid: {}\n", word_list(neg)));
    if pos.is_empty() {
        out.push('\n');
        out.push_str(FRESH_STRATEGY);
        out.push('\n');
    }
    out.push('\n');
    out.push_str(UPDATE_FOOTER);
    out
}

pub fn render_suitability_prompt() -> String {
    SUITABILITY_PROMPT.to_string()
}

/// Appended after a reply that could not be parsed.
pub fn format_reminder_suffix() -> String {
    format!("\n\n{FORMAT_REMINDER}")
}

/// Appended when the model repeated a description it already gave.
pub fn avoid_repeat_suffix(seen: &[String]) -> String {
    let listed: Vec<String> = seen.iter().map(|s| format!("\"{s}\"")).collect();
    format!("\n\nDo not repeat a description you have already given. Already tried: {}.", listed.join(", "))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(words: &[&str]) -> BTreeSet<String> {
        words.iter().map(|w| w.to_string()).collect()
    }

    #[test]
    fn init_prompt_contract() {
        let p = render_init_prompt();
        assert!(p.contains("FOREGROUND:"));
        assert!(p.contains("BACKGROUND:"));
        assert!(p.contains("green bounding box"));
        assert_eq!(p, render_init_prompt());
    }

    #[test]
    fn update_prompt_lists_words() {
        let p = render_update_prompt(&set(&["hanging"]), &set(&["person"]));
        assert!(p.contains("Helpful words to keep or extend: hanging"));
        assert!(p.contains("Misleading words to avoid: person"));
        assert!(!p.contains("completely different"));
        assert!(p.contains("FOREGROUND:"));
    }

    #[test]
    fn empty_positive_asks_for_fresh_strategy() {
        let p = render_update_prompt(&set(&[]), &set(&[]));
        assert!(p.contains("completely different description strategy"));
        assert!(p.contains("(none)"));
    }

    #[test]
    fn update_prompt_is_order_independent() {
        let a = render_update_prompt(&set(&["b", "a", "c"]), &set(&["z", "y"]));
        let b = render_update_prompt(&set(&["c", "a", "b"]), &set(&["y", "z"]));
        assert_eq!(a, b);
        assert!(a.contains("a, b, c"));
    }

    #[test]
    fn suitability_prompt_names_both_verdicts() {
        let p = render_suitability_prompt();
        assert!(p.contains("VERDICT: SUITABLE") && p.contains("VERDICT: UNSUITABLE"));
    }
}
