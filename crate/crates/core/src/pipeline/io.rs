use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::geometry::BBox;

use super::PipelineError;

const FRAME_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// A tracking sequence on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSpec {
    pub name: String,
    pub frames: Vec<PathBuf>,
    /// At least the first frame's box; later entries are used only for evaluation.
    pub groundtruth: Vec<BBox>,
    /// Dataset-provided language annotation, if any.
    pub language: Option<String>,
}

impl SequenceSpec {
    pub fn initial_box(&self) -> BBox {
        self.groundtruth[0]
    }
}

/// Parses one `x,y,w,h` box per non-empty line; commas, tabs and spaces all separate fields.
pub fn parse_boxes(text: &str) -> Result<Vec<BBox>, String> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split(|c: char| c == ',' || c.is_whitespace()).filter(|f| !f.is_empty()).collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 4 {
            return Err(format!("line {}: expected 4 values, found {}", i + 1, fields.len()));
        }
        let mut v = [0.0; 4];
        for (slot, f) in v.iter_mut().zip(&fields) {
            *slot = f.parse().map_err(|_| format!("line {}: {f:?} is not a number", i + 1))?;
        }
        out.push(BBox::new(v[0], v[1], v[2], v[3]).map_err(|e| format!("line {}: {e}", i + 1))?);
    }
    Ok(out)
}

pub fn format_box(b: &BBox) -> String {
    format!("{:.4},{:.4},{:.4},{:.4}", b.x, b.y, b.w, b.h)
}

/// Reads `<dir>/img/*`, `<dir>/groundtruth.txt` and the optional `<dir>/nlp.txt`.
pub fn load_sequence(dir: &Path) -> Result<SequenceSpec, PipelineError> {
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .ok_or_else(|| PipelineError::InvalidSequence(format!("{} has no directory name", dir.display())))?;
    let gt_path = dir.join("groundtruth.txt");
    if !gt_path.is_file() {
        return Err(PipelineError::MissingGroundtruth(gt_path));
    }
    let text = fs::read_to_string(&gt_path).map_err(|e| PipelineError::io(&gt_path, e))?;
    let mut groundtruth =
        parse_boxes(&text).map_err(|m| PipelineError::InvalidSequence(format!("{}: {m}", gt_path.display())))?;

    let img_dir = dir.join("img");
    let mut frames: Vec<PathBuf> = match fs::read_dir(&img_dir) {
        Ok(entries) => entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| FRAME_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
            })
            .collect(),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(PipelineError::io(&img_dir, e)),
    };
    frames.sort();
    if frames.is_empty() {
        return Err(PipelineError::NoFrames(img_dir));
    }
    if groundtruth.is_empty() {
        return Err(PipelineError::InvalidSequence(format!("{} has no boxes", gt_path.display())));
    }
    if groundtruth[0].area() <= 0.0 {
        return Err(PipelineError::InvalidSequence(format!("first groundtruth box {} has zero area", groundtruth[0])));
    }
    if groundtruth.len() > frames.len() {
        log::warn!(
            "{name}: {} groundtruth boxes for {} frames; ignoring the extra boxes",
            groundtruth.len(),
            frames.len()
        );
        groundtruth.truncate(frames.len());
    }

    let nlp = dir.join("nlp.txt");
    let language = if nlp.is_file() {
        let t = fs::read_to_string(&nlp).map_err(|e| PipelineError::io(&nlp, e))?;
        Some(t.trim().to_string()).filter(|t| !t.is_empty())
    } else {
        None
    };
    Ok(SequenceSpec { name, frames, groundtruth, language })
}

/// Writes one `x,y,w,h` line per box; an empty list still creates the file.
pub fn save_predictions(predictions: &[BBox], path: &Path) -> Result<(), PipelineError> {
    let mut text = String::new();
    for b in predictions {
        text.push_str(&format_box(b));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| PipelineError::io(path, e))
}

pub fn load_predictions(path: &Path) -> Result<Vec<BBox>, PipelineError> {
    let text = fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    parse_boxes(&text).map_err(|m| PipelineError::InvalidSequence(format!("{}: {m}", path.display())))
}

pub(crate) fn write_json_lines<T: Serialize>(items: &[T], path: &Path) -> Result<(), PipelineError> {
    let mut text = String::new();
    for item in items {
        text.push_str(&serde_json::to_string(item).expect("serializable"));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| PipelineError::io(path, e))
}
