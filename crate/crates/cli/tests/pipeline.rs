//! End-to-end runs of the installed binary over tiny corpora.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn semtok() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_semtok"));
    // Keep test output quiet; the assertions read stdout, not the log.
    cmd.env("RUST_LOG", "error");
    cmd
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("binary runs");
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Small-corpus flags shared by the pipeline tests.
fn tiny_gen_args(dir: &Path) -> Vec<String> {
    [
        "gen-data",
        "--out-dir",
        dir.to_str().unwrap(),
        "--train-scenes",
        "24",
        "--val-scenes",
        "8",
        "--data-seed",
        "5",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

#[test]
fn gen_data_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    run_ok(semtok().args(tiny_gen_args(&a)));
    run_ok(semtok().args(tiny_gen_args(&b)));
    for name in ["train-corpus.jsonl", "train-truth.jsonl", "val-corpus.jsonl", "val-truth.jsonl"] {
        let fa = std::fs::read(a.join(name)).unwrap();
        let fb = std::fs::read(b.join(name)).unwrap();
        assert_eq!(fa, fb, "{name} differs between identical runs");
        assert!(!fa.is_empty());
    }
}

#[test]
fn zero_epoch_training_checkpoints_the_init() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    run_ok(semtok().args(tiny_gen_args(&out)));
    run_ok(semtok().args([
        "train",
        "--out-dir",
        out.to_str().unwrap(),
        "--epochs",
        "0",
        "--seed",
        "9",
    ]));

    let metrics = std::fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    assert!(metrics.is_empty(), "expected an empty loss log, got {metrics:?}");

    let ckpt = semtok_core::checkpoint::load(out.join("checkpoint.bin")).unwrap();
    assert_eq!(ckpt.step, 0);
    assert_eq!(ckpt.epoch, 0);
    let init = semtok_core::encoder::ModelParams::init(&ckpt.config, 9).unwrap();
    assert_eq!(ckpt.params, init, "zero-epoch checkpoint must hold the untouched init");
}

#[test]
fn the_pipeline_produces_a_parsable_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    run_ok(semtok().args(tiny_gen_args(&out)));
    run_ok(semtok().args([
        "train",
        "--out-dir",
        out.to_str().unwrap(),
        "--epochs",
        "2",
        "--batch-size",
        "8",
    ]));
    let text = stdout_of(&run_ok(semtok().args(["eval", "--out-dir", out.to_str().unwrap()])));
    assert!(text.contains("retrieval"), "{text}");

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("eval-report.json")).unwrap()).unwrap();
    for key in ["t2i_top1", "i2t_top1"] {
        let v = report["retrieval"][key].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v), "{key} = {v}");
    }
    assert_eq!(report["retrieval"]["n"].as_u64().unwrap(), 8);
    let acc = report["swap_choice"]["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    let group = report["group"]["group_correct"].as_f64().unwrap();
    let text_c = report["group"]["text_correct"].as_f64().unwrap();
    let image_c = report["group"]["image_correct"].as_f64().unwrap();
    assert!(group <= text_c.min(image_c) + 1e-12);

    // Metrics lines parse and carry the schedule.
    let metrics = std::fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    let mut steps = 0;
    for line in metrics.lines() {
        let rec: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(rec["loss"].as_f64().unwrap().is_finite());
        steps += 1;
    }
    assert_eq!(steps, 6, "24 scenes / batch 8 = 3 steps over 2 epochs");
}

#[test]
fn manifests_record_the_effective_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    run_ok(semtok().args(tiny_gen_args(&out)));
    run_ok(semtok().args([
        "train",
        "--out-dir",
        out.to_str().unwrap(),
        "--epochs",
        "0",
        "--lr",
        "0.025",
    ]));
    let gen: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest-gen-data.json")).unwrap())
            .unwrap();
    assert_eq!(gen["command"], "gen-data");
    assert_eq!(gen["config"]["data"]["seed"], 5, "flag must override the preset");

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest-train.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["config"]["train"]["epochs"], 0, "flag must override the preset");
    assert_eq!(manifest["config"]["train"]["lr"], 0.025);
    assert!(manifest["version"].as_str().unwrap().contains('.'));
}

#[test]
fn config_file_feeds_the_run_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let config_path = dir.path().join("run.toml");
    std::fs::write(
        &config_path,
        format!(
            "[paths]\nout_dir = \"{}\"\n\n[data]\ntrain_scenes = 24\nval_scenes = 6\nseed = 11\n",
            out.display()
        ),
    )
    .unwrap();
    run_ok(semtok().args([
        "gen-data",
        "--config",
        config_path.to_str().unwrap(),
        "--val-scenes",
        "4",
    ]));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest-gen-data.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["config"]["data"]["train_scenes"], 24);
    assert_eq!(manifest["config"]["data"]["val_scenes"], 4, "flag beats the file");
    let n = std::fs::read_to_string(out.join("val-corpus.jsonl")).unwrap().lines().count();
    assert_eq!(n, 5, "header plus four scenes");
}

#[test]
fn unknown_config_keys_are_rejected_by_name() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("bad.toml");
    std::fs::write(&config_path, "[train]\nbatch_sizes = 4\n").unwrap();
    let out = semtok()
        .args(["gen-data", "--config", config_path.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("batch_sizes"), "error must name the bad key: {stderr}");
}

#[test]
fn invalid_couplings_fail_before_any_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let config_path = dir.path().join("bad.toml");
    // Scene width 16 against the preset model width 32.
    std::fs::write(
        &config_path,
        format!(
            "[paths]\nout_dir = \"{}\"\n\n[scene]\nn_objects = 12\nn_predicates = 6\nd = 16\nsigma = 0.05\ntwin_rate = 0.3\n",
            out.display()
        ),
    )
    .unwrap();
    let res = semtok()
        .args(["gen-data", "--config", config_path.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!res.status.success());
    assert!(!out.exists(), "validation failures must not leave artifacts behind");
}

#[test]
fn resume_is_deterministic_and_appends_metrics() {
    // Two directories run the identical sequence: two fresh epochs, then
    // a resume to four. The artifacts must come out byte-identical, and
    // the resumed process must append to the log rather than truncate it.
    let dir = tempfile::tempdir().unwrap();
    let runs = [dir.path().join("a"), dir.path().join("b")];
    let train = |out: &PathBuf, epochs: &str, resume: bool| {
        let mut args = vec![
            "train".to_string(),
            "--out-dir".into(),
            out.to_str().unwrap().into(),
            "--epochs".into(),
            epochs.into(),
            "--batch-size".into(),
            "8".into(),
        ];
        if resume {
            args.push("--resume".into());
            args.push(out.join("checkpoint.bin").to_str().unwrap().into());
        }
        run_ok(semtok().args(args));
    };
    for out in &runs {
        run_ok(semtok().args(tiny_gen_args(out)));
        train(out, "2", false);
        train(out, "4", true);
    }

    let a = std::fs::read(runs[0].join("checkpoint.bin")).unwrap();
    let b = std::fs::read(runs[1].join("checkpoint.bin")).unwrap();
    assert_eq!(a, b, "identical run sequences produced different checkpoints");

    let ma = std::fs::read_to_string(runs[0].join("metrics.jsonl")).unwrap();
    let mb = std::fs::read_to_string(runs[1].join("metrics.jsonl")).unwrap();
    assert_eq!(ma, mb, "metric logs differ");
    assert_eq!(ma.lines().count(), 12, "24 scenes / batch 8 over 4 epochs, appended across runs");

    let ckpt = semtok_core::checkpoint::load(runs[0].join("checkpoint.bin")).unwrap();
    assert_eq!(ckpt.epoch, 4);

    // Resuming under a different seed would silently fork the run, so the
    // trainer refuses it.
    let out = semtok()
        .args([
            "train",
            "--out-dir",
            runs[0].to_str().unwrap(),
            "--epochs",
            "6",
            "--batch-size",
            "8",
            "--seed",
            "1234",
            "--resume",
            runs[0].join("checkpoint.bin").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("seed"), "{stderr}");
}

#[test]
fn inspect_prints_the_documented_rank_cells() {
    // Two tangibles joined by one intangible relation, the canonical
    // person-beside-tree wiring: node-to-edge cells carry 6, edge-to-node
    // cells carry 5, the directed node pair carries 7.
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("pair.jsonl");
    let ts = semtok_core::tokens::TokenSet {
        sample_id: "fig2".into(),
        d: 4,
        l: vec![0.1, 0.2, 0.3, 0.4],
        tangible: vec![vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0]],
        intangible: vec![vec![0.0, 0.0, 1.0, 0.0]],
        triplets: vec![semtok_core::tokens::Triplet { subject: 0, object: 1, predicate: 0 }],
        neighbors: vec![vec![1], vec![0]],
        captions: vec![vec![0]],
    };
    semtok_core::tokens::write_corpus([&ts], &corpus).unwrap();

    let out = run_ok(semtok().args(["inspect", "--corpus", corpus.to_str().unwrap(), "--sample", "fig2"]));
    let text = stdout_of(&out);

    let grid: std::collections::HashMap<&str, Vec<&str>> = text
        .lines()
        .skip_while(|l| !l.contains("rank grid"))
        .skip(2)
        .take(4)
        .map(|line| {
            let mut cells = line.split_whitespace();
            (cells.next().unwrap(), cells.collect())
        })
        .collect();
    // Columns: l v0 v1 u0. Person to beside and tree to beside sit at 6.
    assert_eq!(grid["v0"][3], "6", "{text}");
    assert_eq!(grid["v1"][3], "6", "{text}");
    // Beside to person and beside to tree sit at 5.
    assert_eq!(grid["u0"][1], "5", "{text}");
    assert_eq!(grid["u0"][2], "5", "{text}");
    // The directed subject-object connection sits at 7.
    assert_eq!(grid["v0"][2], "7", "{text}");

    assert!(text.contains("weight table"), "{text}");
    assert!(text.contains("rank 7: 8.000000"), "zero encoding table is [1..8]: {text}");
}

#[test]
fn inspect_dumps_checkpoint_inventories() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    run_ok(semtok().args(tiny_gen_args(&out)));
    run_ok(semtok().args(["train", "--out-dir", out.to_str().unwrap(), "--epochs", "0"]));
    let text = stdout_of(&run_ok(semtok().args([
        "inspect",
        "--checkpoint",
        out.join("checkpoint.bin").to_str().unwrap(),
    ])));
    assert!(text.contains("rank.a"), "{text}");
    assert!(text.contains("temp.tau"), "{text}");
    assert!(text.contains("total"), "{text}");
    assert!(text.contains("temperature scale"), "{text}");
}

#[test]
fn verify_passes_and_reports_each_check() {
    let text = stdout_of(&run_ok(semtok().args(["verify", "--seed", "3"])));
    for name in [
        "rank-oracle-agreement",
        "weight-table-law",
        "gradient-fidelity",
        "structural-invariances",
    ] {
        assert!(text.contains(name), "missing {name} in:\n{text}");
    }
    assert_eq!(text.matches("PASS").count(), 4, "{text}");
    assert!(!text.contains("FAIL"), "{text}");
}
