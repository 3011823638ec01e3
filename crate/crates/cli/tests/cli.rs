use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use depthmotion::dataset::{load_dataset, read_manifest, write_pfm};
use depthmotion::evaluator::{depth_metrics, read_metrics_csv};
use depthmotion::networks::Models;
use depthmotion::trainer::predict_depth;

const SMALL: &str = "height = 16\nwidth = 48\ncount = 2\n";

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_depthmotion"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("run.cfg");
    std::fs::write(&p, text).unwrap();
    p
}

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn generate_writes_the_documented_layout() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), "height = 16\nwidth = 48\ncount = 1\npreset = dynamic\n");
    let data = tmp.path().join("data");
    ok(&["generate", "--config", s(&cfg), "--seed", "3", "--out", s(&data)]);
    let files: Vec<String> = tree(&data).into_keys().collect();
    let mut want = vec!["manifest.txt".to_string()];
    for f in 1..=3 {
        for kind in ["frame_{}.png", "mask_{}.png", "depth_{}.pfm"] {
            want.push(format!("triplet_00000/{}", kind.replace("{}", &f.to_string())));
        }
    }
    want.push("triplet_00000/poses.txt".into());
    want.push("triplet_00000/intrinsics.txt".into());
    want.sort();
    assert_eq!(files, want);
    let manifest = read_manifest(&data).unwrap();
    assert_eq!((manifest[0].seed, manifest[0].preset.as_str()), (3, "dynamic"));
}

#[test]
fn same_seed_same_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), SMALL);
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    ok(&["generate", "--config", s(&cfg), "--seed", "5", "--out", s(&a)]);
    ok(&["generate", "--config", s(&cfg), "--seed", "5", "--out", s(&b)]);
    ok(&["generate", "--config", s(&cfg), "--seed", "6", "--out", s(&c)]);
    assert_eq!(tree(&a), tree(&b));
    assert_ne!(tree(&a), tree(&c));

    let (ra, rb) = (tmp.path().join("ra"), tmp.path().join("rb"));
    for r in [&ra, &rb] {
        ok(&["train", "--config", s(&cfg), "--dataset", s(&a), "--steps", "2", "--mode", "motion", "--out", s(r)]);
    }
    assert_eq!(tree(&ra), tree(&rb));
}

#[test]
fn degenerate_manifest_lists_co_moving_objects() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), &format!("{SMALL}preset = degenerate\n"));
    let data = tmp.path().join("data");
    ok(&["generate", "--config", s(&cfg), "--out", s(&data)]);
    let manifest = read_manifest(&data).unwrap();
    assert_eq!(manifest.len(), 2);
    for (m, e) in manifest.iter().zip(load_dataset(&data).unwrap()) {
        let want: Vec<u8> = e.truth.objects.iter().filter(|o| o.moves_with_camera).map(|o| o.instance).collect();
        assert!(!want.is_empty());
        assert_eq!(m.comoving, want);
    }
}

#[test]
fn sequence_presets_write_every_window() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), "height = 16\nwidth = 48\ncount = 2\nsequence_length = 5\npreset = sequence\n");
    let data = tmp.path().join("data");
    ok(&["generate", "--config", s(&cfg), "--out", s(&data)]);
    let manifest = read_manifest(&data).unwrap();
    let seqs: Vec<Option<(u64, usize)>> = manifest.iter().map(|m| m.sequence).collect();
    assert_eq!(seqs, vec![Some((0, 1)), Some((0, 2)), Some((0, 3)), Some((1, 1)), Some((1, 2)), Some((1, 3))]);
}

#[test]
fn untrained_checkpoint_matches_initialization() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), SMALL);
    let data = tmp.path().join("data");
    let run_dir = tmp.path().join("run");
    ok(&["generate", "--config", s(&cfg), "--out", s(&data)]);
    ok(&["train", "--config", s(&cfg), "--dataset", s(&data), "--steps", "0", "--seed", "4", "--out", s(&run_dir)]);
    let want = tmp.path().join("init.txt");
    Models::new(4, 2).unwrap().save(&want).unwrap();
    assert_eq!(std::fs::read(run_dir.join("checkpoint.txt")).unwrap(), std::fs::read(&want).unwrap());
    let curve = std::fs::read_to_string(run_dir.join("loss.csv")).unwrap();
    assert_eq!(curve.lines().count(), 1);
}

/// Metrics written by `eval` match metrics computed directly from the
/// checkpoint's predictions, under every cap and scaling choice.
#[test]
fn eval_metrics_match_library_computation() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), SMALL);
    let data = tmp.path().join("data");
    ok(&["generate", "--config", s(&cfg), "--out", s(&data)]);
    let ckpt = tmp.path().join("ckpt.txt");
    let models = Models::new(1, 2).unwrap();
    models.save(&ckpt).unwrap();
    let entries = load_dataset(&data).unwrap();
    for (scale, cap) in [("on", "80"), ("off", "80"), ("on", "20")] {
        let out = tmp.path().join(format!("eval_{scale}_{cap}"));
        let stdout = ok(&[
            "eval", "--dataset", s(&data), "--checkpoint", s(&ckpt), "--out", s(&out), "--median-scale", scale, "--cap", cap,
        ]);
        assert!(stdout.contains("abs_rel"));
        let rows = read_metrics_csv(&out.join("metrics.csv")).unwrap();
        assert_eq!(rows.len(), entries.len());
        for (row, e) in rows.iter().zip(&entries) {
            let pred = predict_depth(&models, &e.triplet).unwrap();
            let gt = &e.truth.depths.as_ref().unwrap()[1];
            let want = depth_metrics(&pred, gt, &vec![true; gt.len()], cap.parse().unwrap(), scale == "on").unwrap();
            for (a, b) in row.to_array().iter().zip(want.to_array()) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{scale} {cap}: {a} vs {b}");
            }
        }
        for e in &entries {
            assert!(out.join("depth").join(format!("{}_gray.png", e.name)).is_file());
            assert!(out.join("depth").join(format!("{}_color.png", e.name)).is_file());
        }
    }
}

/// Ground truth replaced by the checkpoint's own prediction.
#[test]
fn eval_of_a_perfect_prediction_scores_zero_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), SMALL);
    let data = tmp.path().join("data");
    ok(&["generate", "--config", s(&cfg), "--out", s(&data)]);
    let ckpt = tmp.path().join("ckpt.txt");
    let models = Models::new(5, 2).unwrap();
    models.save(&ckpt).unwrap();
    for e in load_dataset(&data).unwrap() {
        let pred = predict_depth(&models, &e.triplet).unwrap();
        write_pfm(&data.join(&e.name).join("depth_2.pfm"), &pred, e.triplet.height, e.triplet.width).unwrap();
    }
    let out = tmp.path().join("eval");
    ok(&["eval", "--dataset", s(&data), "--checkpoint", s(&ckpt), "--out", s(&out), "--median-scale", "off"]);
    let rows = read_metrics_csv(&out.join("metrics.csv")).unwrap();
    assert_eq!(rows.len(), 2);
    for m in rows {
        let [abs_rel, sq_rel, rmse, rmse_log, d1, d2, d3] = m.to_array();
        // depth files hold 32-bit floats
        for e in [abs_rel, sq_rel, rmse, rmse_log] {
            assert!(e < 1e-6, "{m:?}");
        }
        assert_eq!([d1, d2, d3], [1.0; 3]);
    }
}

#[test]
fn refine_without_learning_rate_reproduces_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(
        tmp.path(),
        "height = 16\nwidth = 48\ncount = 1\nsequence_length = 5\npreset = sequence\nrefine_learning_rate = 0\n",
    );
    let data = tmp.path().join("data");
    ok(&["generate", "--config", s(&cfg), "--out", s(&data)]);
    let ckpt = tmp.path().join("ckpt.txt");
    Models::new(2, 2).unwrap().save(&ckpt).unwrap();
    let (ev, rf) = (tmp.path().join("eval"), tmp.path().join("refine"));
    ok(&["eval", "--config", s(&cfg), "--dataset", s(&data), "--checkpoint", s(&ckpt), "--out", s(&ev)]);
    ok(&[
        "refine", "--config", s(&cfg), "--dataset", s(&data), "--checkpoint", s(&ckpt), "--out", s(&rf), "--refine-steps", "2",
    ]);
    let (te, mut tr) = (tree(&ev), tree(&rf));
    let unrefined = tr.remove("metrics_unrefined.csv").expect("unrefined metrics written");
    assert_eq!(unrefined, te["metrics.csv"]);
    assert!(te.contains_key("odometry.csv"));
    assert_eq!(te, tr);
}

#[test]
fn flags_override_config_values() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), &format!("{SMALL}seed = 1\n"));
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["generate", "--config", s(&cfg), "--out", s(&a)]);
    ok(&["generate", "--config", s(&cfg), "--seed", "7", "--out", s(&b)]);
    let seeds = |d: &Path| read_manifest(d).unwrap().iter().map(|m| m.seed).collect::<Vec<_>>();
    assert_eq!(seeds(&a), vec![1, 2]);
    assert_eq!(seeds(&b), vec![7, 8]);
}

#[test]
fn bad_invocations_exit_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), SMALL);
    let data = tmp.path().join("data");
    ok(&["generate", "--config", s(&cfg), "--out", s(&data)]);
    let missing = tmp.path().join("nope.txt");
    let out = run(&["eval", "--dataset", s(&data), "--checkpoint", s(&missing), "--out", s(&tmp.path().join("x"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.txt"));

    let bad = tmp.path().join("bad.cfg");
    std::fs::write(&bad, "stepz = 3\n").unwrap();
    let out = run(&["generate", "--config", s(&bad), "--out", s(&tmp.path().join("y"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("stepz"));

    assert!(!run(&["generate"]).status.success());
    assert!(!run(&["train", "--dataset", s(tmp.path()), "--out", s(&tmp.path().join("z"))]).status.success());
    assert!(!run(&["eval", "--mode", "sideways"]).status.success());
    assert!(!run(&["eval", "--median-scale", "maybe"]).status.success());
}

#[test]
fn report_compares_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), SMALL);
    let data = tmp.path().join("data");
    ok(&["generate", "--config", s(&cfg), "--out", s(&data)]);
    let mut runs = Vec::new();
    for seed in [1u64, 2] {
        let ckpt = tmp.path().join(format!("ckpt{seed}.txt"));
        Models::new(seed, 2).unwrap().save(&ckpt).unwrap();
        let out = tmp.path().join(format!("model{seed}"));
        ok(&["eval", "--dataset", s(&data), "--checkpoint", s(&ckpt), "--out", s(&out)]);
        runs.push(out);
    }
    let rep = tmp.path().join("report");
    let stdout = ok(&["report", s(&runs[0]), s(&runs[1]), "--out", s(&rep)]);
    assert!(stdout.contains("model1") && stdout.contains("model2"));
    assert_eq!(std::fs::read_to_string(rep.join("report.txt")).unwrap(), stdout);
    let csv = std::fs::read_to_string(rep.join("report.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("run,"));
    assert!(lines[1].starts_with("model1,") && lines[2].starts_with("model2,"));
    assert!(!run(&["report", s(tmp.path())]).status.success());
}
