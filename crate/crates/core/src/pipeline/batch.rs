use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backends::{BackendSet, CassetteRecorder, Replaying};

use super::{run_sequence, save_artifacts, EngineConfig, Mode, PipelineError, SequenceOutput, SequenceSpec};

/// Backends for one sequence plus the cassette plumbing that must be closed afterwards.
pub struct PreparedBackends {
    pub set: BackendSet,
    recorder: Option<CassetteRecorder>,
    player: Option<Replaying>,
}

impl PreparedBackends {
    /// Flushes a recording; for a replay, returns how many recorded calls went unused.
    pub fn finish(self) -> Result<usize, PipelineError> {
        if let Some(r) = &self.recorder {
            r.flush()?;
        }
        Ok(self.player.as_ref().map_or(0, Replaying::remaining))
    }
}

/// Instantiates independent backends for `sequence` according to the configured mode.
///
/// Replay never touches `[backends]`; every call is served from the sequence's cassette.
pub fn backends_for(cfg: &EngineConfig, sequence: &str) -> Result<PreparedBackends, PipelineError> {
    let cassette = cfg.cassette_path(sequence);
    match cfg.pipeline.mode {
        Mode::Live => Ok(PreparedBackends { set: cfg.backends.build()?, recorder: None, player: None }),
        Mode::Record => {
            let path = cassette.expect("validated: record mode has a cassette dir");
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(|e| PipelineError::io(parent, e))?;
            }
            let recorder = CassetteRecorder::create(path);
            let set = cfg.backends.build()?.record(&recorder);
            Ok(PreparedBackends { set, recorder: Some(recorder), player: None })
        }
        Mode::Replay => {
            let path = cassette.expect("validated: replay mode has a cassette dir");
            let player = Replaying::open(&path)?;
            Ok(PreparedBackends { set: BackendSet::replay(player.clone()), recorder: None, player: Some(player) })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum BatchStatus {
    Completed { frames: usize },
    Failed { message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchOutcome {
    pub sequence: String,
    #[serde(flatten)]
    pub status: BatchStatus,
}

fn run_one(spec: &SequenceSpec, cfg: &EngineConfig, out_dir: &Path) -> Result<SequenceOutput, PipelineError> {
    let mut prepared = backends_for(cfg, &spec.name)?;
    let output = run_sequence(spec, cfg, &mut prepared.set);
    let unused = prepared.finish()?;
    if unused > 0 && output.is_complete() {
        log::warn!("{}: {unused} recorded call(s) were not replayed", spec.name);
    }
    save_artifacts(&output, out_dir, cfg.pipeline.emit_scores)?;
    Ok(output)
}

/// Runs every sequence with its configuration, up to `jobs` at a time, each with
/// its own backends. Outcomes come back in input order.
pub fn run_batch(work_items: &[(SequenceSpec, EngineConfig)], out_dir: &Path, jobs: usize) -> Vec<BatchOutcome> {
    let work = || {
        work_items
            .par_iter()
            .map(|(spec, cfg)| {
                let status = match run_one(spec, cfg, out_dir) {
                    Ok(o) => match o.failure {
                        None => BatchStatus::Completed { frames: o.predictions.len() },
                        Some(f) => {
                            BatchStatus::Failed { message: format!("frame {} ({}): {}", f.frame, f.stage, f.message) }
                        }
                    },
                    Err(e) => BatchStatus::Failed { message: e.to_string() },
                };
                BatchOutcome { sequence: spec.name.clone(), status }
            })
            .collect()
    };
    match rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build() {
        Ok(pool) => pool.install(work),
        Err(e) => {
            log::warn!("could not start a {jobs}-thread pool ({e}); using the global pool");
            work()
        }
    }
}
