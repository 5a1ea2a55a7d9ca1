use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use vltrack_core::eval::{format_table, MetricReport};
use vltrack_core::pipeline::{
    self, backends_for, load_predictions, load_sequence, run_batch, run_sequence, save_artifacts, BatchStatus,
    EngineConfig, Mode, SequenceSpec,
};
use vltrack_core::synth::{self, SynthParams};

use crate::{Command, GlobalOpts, SynthArgs};

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_PARTIAL: u8 = 2;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

fn usage(message: impl fmt::Display) -> CliError {
    CliError { code: EXIT_USAGE, message: message.to_string() }
}

fn failed(message: impl fmt::Display) -> CliError {
    CliError { code: EXIT_PARTIAL, message: message.to_string() }
}

pub fn dispatch(g: &GlobalOpts, command: Command) -> Result<u8, CliError> {
    match command {
        Command::Track { sequences, out } => track(g, &sequences, &out),
        Command::Rpo { sequence, out } => rpo(g, &sequence, out.as_deref()),
        Command::Eval { sequences, pred, json } => eval(&sequences, &pred, json),
        Command::Synth(args) => synth(g, &args),
        Command::ReplayVerify { sequences, expected } => replay_verify(g, &sequences, &expected),
    }
}

/// A directory without groundtruth whose subdirectories have some is a dataset root.
fn expand_sequences(paths: &[PathBuf]) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for p in paths {
        if !p.join("groundtruth.txt").is_file() {
            let mut children: Vec<PathBuf> = fs::read_dir(p)
                .map(|rd| {
                    rd.filter_map(|e| e.ok().map(|e| e.path()))
                        .filter(|c| c.join("groundtruth.txt").is_file())
                        .collect()
                })
                .unwrap_or_default();
            if !children.is_empty() {
                children.sort();
                out.extend(children);
                continue;
            }
        }
        out.push(p.clone());
    }
    out
}

fn load_config(g: &GlobalOpts, sequence_dir: &Path, force_mode: Option<Mode>) -> Result<EngineConfig, CliError> {
    let local = sequence_dir.join("config.toml");
    let path = g.config.clone().or_else(|| local.is_file().then_some(local));
    let mut overrides = g.overrides.clone();
    if let Some(mode) = force_mode.or(g.mode) {
        let name = match mode {
            Mode::Live => "live",
            Mode::Record => "record",
            Mode::Replay => "replay",
        };
        overrides.push(format!("pipeline.mode=\"{name}\""));
    }
    if let Some(dir) = &g.cassette_dir {
        let abs = std::path::absolute(dir).map_err(|e| usage(format!("{}: {e}", dir.display())))?;
        let quoted = serde_json::to_string(&abs.to_string_lossy()).expect("string serializes");
        overrides.push(format!("pipeline.cassette_dir={quoted}"));
    }
    EngineConfig::load(path.as_deref(), &overrides).map_err(usage)
}

/// Loads every sequence and its configuration before anything runs.
fn prepare(
    g: &GlobalOpts,
    paths: &[PathBuf],
    force_mode: Option<Mode>,
) -> Result<Vec<(SequenceSpec, EngineConfig)>, CliError> {
    let mut items = Vec::new();
    for dir in expand_sequences(paths) {
        let spec = load_sequence(&dir).map_err(usage)?;
        let cfg = load_config(g, &dir, force_mode)?;
        if cfg.pipeline.mode == Mode::Replay {
            let tape = cfg.cassette_path(&spec.name).expect("replay config has a cassette dir");
            if !tape.is_file() {
                return Err(usage(format!("replay mode: no cassette for {} at {}", spec.name, tape.display())));
            }
        }
        items.push((spec, cfg));
    }
    Ok(items)
}

fn track(g: &GlobalOpts, sequences: &[PathBuf], out: &Path) -> Result<u8, CliError> {
    let items = prepare(g, sequences, None)?;
    fs::create_dir_all(out).map_err(|e| usage(format!("{}: {e}", out.display())))?;
    let outcomes = run_batch(&items, out, g.jobs);
    let mut code = EXIT_OK;
    for o in &outcomes {
        match &o.status {
            BatchStatus::Completed { frames } => println!("{}: completed, {frames} frames", o.sequence),
            BatchStatus::Failed { message } => {
                println!("{}: FAILED: {message}", o.sequence);
                code = EXIT_PARTIAL;
            }
        }
    }
    let summary = out.join("summary.json");
    let text = serde_json::to_string_pretty(&outcomes).expect("serializable") + "\n";
    fs::write(&summary, text).map_err(|e| failed(format!("{}: {e}", summary.display())))?;
    Ok(code)
}

fn rpo(g: &GlobalOpts, sequence: &Path, out: Option<&Path>) -> Result<u8, CliError> {
    let items = prepare(g, &[sequence.to_path_buf()], None)?;
    let [(spec, cfg)] = items.as_slice() else {
        return Err(usage("rpo takes exactly one sequence"));
    };
    let mut prepared = backends_for(cfg, &spec.name).map_err(usage)?;
    let result = pipeline::run_rpo(spec, cfg, &mut prepared.set);
    // a replayed track cassette is only partly consumed here
    prepared.finish().map_err(failed)?;
    let (descriptions, trace) = result.map_err(failed)?;
    let jsonl = trace.to_jsonl();
    print!("{jsonl}");
    log::info!("foreground {:?}, background {:?}", descriptions.fore, descriptions.back);
    if let Some(path) = out {
        fs::write(path, &jsonl).map_err(|e| failed(format!("{}: {e}", path.display())))?;
    }
    Ok(EXIT_OK)
}

fn eval(sequences: &[PathBuf], pred: &Path, json: bool) -> Result<u8, CliError> {
    let mut rows = Vec::new();
    let mut errors = Vec::new();
    for dir in expand_sequences(sequences) {
        let spec = load_sequence(&dir).map_err(usage)?;
        let path = pred.join(&spec.name).join("predictions.txt");
        let report = load_predictions(&path)
            .map_err(|e| e.to_string())
            .and_then(|p| MetricReport::compute(&p, &spec.groundtruth).map_err(|e| format!("{}: {e}", path.display())));
        match report {
            Ok(r) => rows.push((spec.name, r)),
            Err(e) => errors.push(format!("{}: {e}", spec.name)),
        }
    }
    let reports: Vec<MetricReport> = rows.iter().map(|(_, r)| r.clone()).collect();
    let overall = MetricReport::pooled(&reports);
    if json {
        let sequences: serde_json::Map<String, serde_json::Value> =
            rows.iter().map(|(n, r)| (n.clone(), serde_json::to_value(r).expect("serializable"))).collect();
        let doc = serde_json::json!({ "sequences": sequences, "overall": overall, "errors": errors });
        println!("{}", serde_json::to_string_pretty(&doc).expect("serializable"));
    } else {
        let mut table_rows = rows.clone();
        if rows.len() > 1 {
            if let Some(o) = overall {
                table_rows.push(("overall".into(), o));
            }
        }
        print!("{}", format_table(&table_rows));
        for e in &errors {
            eprintln!("error: {e}");
        }
    }
    Ok(if errors.is_empty() { EXIT_OK } else { EXIT_PARTIAL })
}

fn synth(g: &GlobalOpts, a: &SynthArgs) -> Result<u8, CliError> {
    let params = SynthParams {
        frames: a.frames,
        width: a.width,
        height: a.height,
        size: a.size,
        max_speed: a.speed,
        distractors: a.distractors,
        tracker_drift: (a.drift_x, a.drift_y),
        seed: g.seed,
    };
    let seq = synth::generate(&params).map_err(usage)?;
    seq.write(&a.out).map_err(usage)?;
    println!("wrote {} frames to {}", seq.frames.len(), a.out.display());
    Ok(EXIT_OK)
}

const COMPARED: [&str; 4] = ["predictions.txt", "rpo_trace.jsonl", "partition.json", "scores.jsonl"];

fn replay_verify(g: &GlobalOpts, sequences: &[PathBuf], expected: &Path) -> Result<u8, CliError> {
    let items = prepare(g, sequences, Some(Mode::Replay))?;
    let scratch = tempfile::tempdir().map_err(usage)?;
    let mut code = EXIT_OK;
    for (spec, cfg) in &items {
        let mut problems = Vec::new();
        let mut prepared = backends_for(cfg, &spec.name).map_err(usage)?;
        let output = run_sequence(spec, cfg, &mut prepared.set);
        if let Some(f) = &output.failure {
            problems.push(format!("replay stopped at frame {} ({}): {}", f.frame, f.stage, f.message));
        }
        match prepared.finish() {
            Ok(0) => {}
            Ok(n) if output.failure.is_none() => problems.push(format!("{n} recorded call(s) were never replayed")),
            Ok(_) => {}
            Err(e) => problems.push(e.to_string()),
        }
        let dir = save_artifacts(&output, scratch.path(), cfg.pipeline.emit_scores).map_err(failed)?;
        for name in COMPARED {
            let got = fs::read(dir.join(name)).ok();
            let want = fs::read(expected.join(&spec.name).join(name)).ok();
            match (got, want) {
                (None, None) => {}
                (Some(a), Some(b)) if a == b => {}
                (Some(_), Some(_)) => problems.push(format!("{name} differs")),
                (None, Some(_)) => problems.push(format!("{name} was not produced")),
                (Some(_), None) => problems.push(format!("{name} has no recorded counterpart")),
            }
        }
        if problems.is_empty() {
            println!("{}: ok", spec.name);
        } else {
            code = EXIT_PARTIAL;
            for p in problems {
                println!("{}: MISMATCH: {p}", spec.name);
            }
        }
    }
    Ok(code)
}
