use std::path::Path;
use std::process::{Command, Output};

fn grpose(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_grpose")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: [&str; 28] = [
    "--data.train_samples", "6",
    "--heldout_samples", "4",
    "--test_samples", "2",
    "--stem", "4",
    "--channels", "[4, 6, 6, 8]",
    "--temb", "8",
    "--base.epochs", "1",
    "--posenet.epochs", "1",
    "--target_pck", "0.0",
    "--adapter.epochs", "2",
    "--pose_loss_last_epochs", "1",
    "--adapter.batch", "3",
    "--ddim_steps", "2",
    "--lp_max_t", "1000",
];

fn train(phase: &str, run: &Path, extra: &[&str]) -> Output {
    let run = run.to_str().unwrap();
    let mut args = vec!["train", "--phase", phase, "--run", run];
    args.extend(TINY);
    args.extend(extra);
    grpose(&args)
}

#[test]
fn usage_errors_exit_with_2() {
    assert_eq!(code(&grpose(&["frobnicate"])), 2);
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = grpose(&["gen-data", "--out", out, "--alhpa", "0.1"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("alhpa"));
    assert_eq!(code(&grpose(&["gen-data", "--out", out, "--k", "many"])), 2);
    assert_eq!(code(&grpose(&["ablate", "everything", "--root", out])), 2);
    assert_eq!(code(&grpose(&["train", "--phase", "decoder", "--run", out])), 2);
    assert_eq!(code(&grpose(&["gradcheck", "no_such_fragment"])), 2);
    assert_eq!(code(&grpose(&["--help"])), 0);
}

#[test]
fn missing_prerequisites_exit_with_4() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let o = train("adapter", &run, &[]);
    assert_eq!(code(&o), 4);
    assert!(stderr(&o).contains("base.grpt"), "{}", stderr(&o));
    let o = grpose(&["eval", "--run", run.to_str().unwrap()]);
    assert_eq!(code(&o), 4);
}

#[test]
fn corrupt_checkpoint_is_refused_with_an_offset() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("base.grpt"), b"NOTACHECKPOINT").unwrap();
    let o = grpose(&["sample", "--run", dir.path().to_str().unwrap(), "--no-adapter"]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("offset"), "{}", stderr(&o));
}

#[test]
fn inspect_graph_writes_knn_edges() {
    let dir = tempfile::tempdir().unwrap();
    let o = grpose(&["inspect-graph", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = std::fs::read_to_string(dir.path().join("edges.txt")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 64 * 9);
    let mut out_degree = [0usize; 64];
    for l in &lines {
        let f: Vec<&str> = l.split(' ').collect();
        assert_eq!(f.len(), 3);
        let (s, d): (usize, usize) = (f[0].parse().unwrap(), f[1].parse().unwrap());
        assert_ne!(s, d);
        let w: f64 = f[2].parse().unwrap();
        assert!(w > 0.0 && w <= 1.0);
        out_degree[s] += 1;
    }
    assert!(out_degree.iter().all(|&n| n == 9));
    assert!(dir.path().join("adjacency.png").exists());
}

#[test]
fn gradcheck_passes_on_a_registered_fragment() {
    let o = grpose(&["gradcheck", "graph_conv", "pgi_stage"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = String::from_utf8_lossy(&o.stdout);
    assert_eq!(text.matches(": pass").count(), 2, "{text}");
}

#[test]
fn gen_data_writes_manifest_and_images() {
    let dir = tempfile::tempdir().unwrap();
    let o = grpose(&["gen-data", "--out", dir.path().to_str().unwrap(), "--count", "3", "--offset", "5"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let manifest = std::fs::read_to_string(dir.path().join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 3);
    assert!(manifest.starts_with("{\"id\":5,"));
    assert!(dir.path().join("pose/000005.png").exists());
    assert!(dir.path().join("target/000007.png").exists());
}

#[test]
fn three_phases_then_sample_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    for phase in ["base", "posenet"] {
        let o = train(phase, &run, &[]);
        assert_eq!(code(&o), 0, "{phase}: {}", stderr(&o));
    }
    // lr = 0 keeps the zero-initialised adapter, so sampling must match the base.
    let o = train("adapter", &run, &["--adapter.lr", "0"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let log = std::fs::read_to_string(run.join("adapter_loss.csv")).unwrap();
    assert!(log.lines().nth(2).unwrap().ends_with(",1"), "{log}");
    for f in ["config.toml", "seed.txt", "git_describe.txt", "hashes.json", "base.grpt", "adapter.grpt"] {
        assert!(run.join(f).exists(), "{f}");
    }
    assert!(!run.join("LOCK").exists());

    let r = run.to_str().unwrap();
    let with = dir.path().join("with");
    let without = dir.path().join("without");
    let o = grpose(&["sample", "--run", r, "--indices", "0,1", "--out", with.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = grpose(&["sample", "--run", r, "--indices", "0,1", "--no-adapter", "--out", without.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["0000.png", "0001.png", "grid.png"] {
        assert_eq!(std::fs::read(with.join(f)).unwrap(), std::fs::read(without.join(f)).unwrap(), "{f}");
    }
    let sidecar = std::fs::read_to_string(with.join("0001.txt")).unwrap();
    assert!(sidecar.contains("adapter = true") && sidecar.contains("checkpoint_hash = "));

    let o = grpose(&["eval", "--run", r, "--save-images"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let summary = std::fs::read_to_string(run.join("eval_summary.txt")).unwrap();
    assert!(summary.contains("samples = 2"), "{summary}");
    assert_eq!(std::fs::read_dir(run.join("eval_samples")).unwrap().count(), 2);
}
