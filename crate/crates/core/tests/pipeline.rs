mod support;

use std::fs;
use std::path::Path;

use serde_json::Value;
use vltrack_core::backends::{CallKind, Cassette};
use vltrack_core::pipeline::{load_predictions, load_sequence, run_batch, BatchStatus, EngineConfig, SequenceSpec};
use vltrack_core::synth::{self, SynthParams};

fn write_synth(dir: &Path, frames: usize, seed: u64) {
    synth::generate(&SynthParams { frames, seed, ..Default::default() }).unwrap().write(dir).unwrap();
}

fn work(dirs: &[&Path], mode: &str) -> Vec<(SequenceSpec, EngineConfig)> {
    dirs.iter()
        .map(|d| {
            let spec = load_sequence(d).unwrap();
            let cfg = EngineConfig::load(Some(&d.join("config.toml")), &[format!("pipeline.mode=\"{mode}\"")]).unwrap();
            (spec, cfg)
        })
        .collect()
}

fn read(path: &Path) -> String {
    fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn recorded_batch_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("alpha"), tmp.path().join("beta"));
    write_synth(&a, 8, 1);
    write_synth(&b, 6, 2);
    let out = tmp.path().join("out");
    let outcomes = run_batch(&work(&[&a, &b], "record"), &out, 2);
    assert_eq!(outcomes.iter().map(|o| o.sequence.as_str()).collect::<Vec<_>>(), ["alpha", "beta"]);
    assert_eq!(outcomes[0].status, BatchStatus::Completed { frames: 8 });
    assert_eq!(outcomes[1].status, BatchStatus::Completed { frames: 6 });

    let seq = out.join("alpha");
    assert_eq!(load_predictions(&seq.join("predictions.txt")).unwrap().len(), 8);
    assert!(!seq.join("error.json").exists());
    let trace: Vec<Value> =
        read(&seq.join("rpo_trace.jsonl")).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(trace.last().unwrap()["outcome"], "converged");
    let plan: Value = serde_json::from_str(&read(&seq.join("partition.json"))).unwrap();
    assert_eq!(plan["mode"], "partition");
    assert_eq!(plan["caption"], "red. square. blue. square. green. square.");
    let scores: Vec<Value> =
        read(&seq.join("scores.jsonl")).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(scores.len(), 7);
    assert_eq!(scores[0]["frame"], 2);
    for row in &scores {
        let chosen = row["chosen"].as_u64().unwrap() as usize;
        assert!(chosen < row["candidates"].as_array().unwrap().len());
    }

    let tape = a.join("cassettes").join("alpha.json");
    let raw: Value = serde_json::from_str(&read(&tape)).unwrap();
    support::assert_schema("cassette.schema.json", &raw);
    let cassette = Cassette::load(&tape).unwrap();
    let kinds: Vec<CallKind> = cassette.entries.iter().map(|e| e.kind).collect();
    assert_eq!(kinds.iter().filter(|k| **k == CallKind::TrackerInit).count(), 1);
    assert_eq!(kinds.iter().filter(|k| **k == CallKind::TrackerPredict).count(), 7);
}

#[test]
fn batch_output_does_not_depend_on_job_count() {
    let tmp = tempfile::tempdir().unwrap();
    let dirs: Vec<_> = (0..3).map(|i| tmp.path().join(format!("s{i}"))).collect();
    for (i, d) in dirs.iter().enumerate() {
        write_synth(d, 5, 10 + i as u64);
    }
    let refs: Vec<&Path> = dirs.iter().map(|d| d.as_path()).collect();
    let items = work(&refs, "live");
    run_batch(&items, &tmp.path().join("one"), 1);
    run_batch(&items, &tmp.path().join("three"), 3);
    for i in 0..3 {
        for name in ["predictions.txt", "rpo_trace.jsonl", "partition.json", "scores.jsonl"] {
            let one = read(&tmp.path().join("one").join(format!("s{i}")).join(name));
            let three = read(&tmp.path().join("three").join(format!("s{i}")).join(name));
            assert_eq!(one, three, "s{i}/{name}");
        }
    }
}

#[test]
fn tampered_cassette_stops_replay_with_partial_output() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("seq");
    write_synth(&dir, 6, 3);
    run_batch(&work(&[&dir], "record"), &tmp.path().join("rec"), 1);

    let tape = dir.join("cassettes").join("seq.json");
    let mut cassette = Cassette::load(&tape).unwrap();
    let predicts: Vec<usize> =
        (0..cassette.entries.len()).filter(|&i| cassette.entries[i].kind == CallKind::TrackerPredict).collect();
    // the third frame's tracker call
    let victim = predicts[1];
    cassette.entries[victim].digest = "0".repeat(64);
    cassette.save(&tape).unwrap();

    let out = tmp.path().join("rep");
    let outcomes = run_batch(&work(&[&dir], "replay"), &out, 1);
    let BatchStatus::Failed { message } = &outcomes[0].status else {
        panic!("replay of a tampered cassette succeeded");
    };
    assert!(message.contains("digest mismatch"), "{message}");
    let err: Value = serde_json::from_str(&read(&out.join("seq").join("error.json"))).unwrap();
    assert_eq!(err["frame"], 3);
    assert_eq!(load_predictions(&out.join("seq").join("predictions.txt")).unwrap().len(), 2);
}

#[test]
fn replay_without_cassette_is_a_setup_error() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("seq");
    write_synth(&dir, 3, 4);
    let outcomes = run_batch(&work(&[&dir], "replay"), &tmp.path().join("out"), 1);
    let BatchStatus::Failed { message } = &outcomes[0].status else {
        panic!("replay without a cassette succeeded");
    };
    assert!(message.contains("seq.json"), "{message}");
}
