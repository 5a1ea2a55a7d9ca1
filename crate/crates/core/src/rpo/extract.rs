use serde::{Deserialize, Serialize};

use super::RpoError;

/// Foreground and background descriptions with their word segmentation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DescriptionPair {
    pub fore: String,
    pub back: String,
    pub fore_words: Vec<String>,
    pub back_words: Vec<String>,
}

impl DescriptionPair {
    /// Normalises both texts (lowercase, single spaces, no edge punctuation) and segments them.
    pub fn new(fore: &str, back: &str) -> Result<Self, RpoError> {
        let fore = normalize(fore);
        let back = normalize(back);
        if fore.is_empty() {
            return Err(RpoError::ExtractionFailed("empty foreground description".into()));
        }
        let fore_words = fore.split(' ').map(String::from).collect();
        let back_words = if back.is_empty() { Vec::new() } else { back.split(' ').map(String::from).collect() };
        Ok(DescriptionPair { fore, back, fore_words, back_words })
    }
}

/// Lowercases, collapses whitespace and trims non-alphanumeric characters from both ends.
pub fn normalize(text: &str) -> String {
    let cleaned: String = text.chars().filter(|c| !matches!(c, '*' | '`')).collect();
    let collapsed = cleaned.split_whitespace().collect::<Vec<_>>().join(" ");
    collapsed.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase()
}

#[derive(Clone, Copy, PartialEq)]
enum Marker {
    Fore,
    Back,
}

/// Strips list bullets, numbering, headings and emphasis from the start of a line.
fn strip_decoration(line: &str) -> String {
    let no_emphasis = line.replace("**", "").replace("__", "");
    let mut s = no_emphasis.trim_start();
    loop {
        let before = s;
        s = s.trim_start_matches(['-', '*', '#', '>', '•', '+']).trim_start();
        let digits = s.len() - s.trim_start_matches(|c: char| c.is_ascii_digit()).len();
        if digits > 0 && s[digits..].starts_with(['.', ')']) {
            s = s[digits + 1..].trim_start();
        }
        if s == before {
            return s.to_string();
        }
    }
}

fn marker_of(line: &str) -> Option<(Marker, String)> {
    let stripped = strip_decoration(line);
    let lower = stripped.to_lowercase();
    let marker = if lower.starts_with("foreground") {
        Marker::Fore
    } else if lower.starts_with("background") {
        Marker::Back
    } else {
        return None;
    };
    // allow "Foreground description:" style labels, but the colon must come soon
    let colon = stripped.find(':')?;
    if stripped[..colon].split_whitespace().count() > 3 {
        return None;
    }
    Some((marker, stripped[colon + 1..].to_string()))
}

/// Raw text following the last occurrence of each marker. An empty marker line
/// takes its text from the next non-marker line.
fn scan(text: &str) -> (Option<String>, Option<String>) {
    let lines: Vec<&str> = text.lines().collect();
    let (mut fore, mut back) = (None, None);
    for (i, line) in lines.iter().enumerate() {
        let Some((marker, mut rest)) = marker_of(line) else { continue };
        if normalize(&rest).is_empty() {
            if let Some(next) = lines[i + 1..].iter().find(|l| !l.trim().is_empty()) {
                if marker_of(next).is_none() {
                    rest = next.to_string();
                }
            }
        }
        match marker {
            Marker::Fore => fore = Some(rest),
            Marker::Back => back = Some(rest),
        }
    }
    (fore, back)
}

/// Reads the FOREGROUND/BACKGROUND pair out of a chat reply.
pub fn extract_descriptions(reply: &str) -> Result<DescriptionPair, RpoError> {
    let (fore, back) = scan(reply);
    let fore = fore.ok_or_else(|| RpoError::ExtractionFailed("no FOREGROUND marker in reply".into()))?;
    DescriptionPair::new(&fore, back.as_deref().unwrap_or(""))
}

/// Reads only the FOREGROUND line, as requested by reflection prompts.
pub fn extract_foreground(reply: &str) -> Result<String, RpoError> {
    let (fore, _) = scan(reply);
    let fore = normalize(&fore.ok_or_else(|| RpoError::ExtractionFailed("no FOREGROUND marker in reply".into()))?);
    if fore.is_empty() {
        return Err(RpoError::ExtractionFailed("empty foreground description".into()));
    }
    Ok(fore)
}
