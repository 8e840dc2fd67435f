use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ion_core::checkpoint::Checkpoint;
use ion_core::eval::{coco_map, GroundTruthObject};
use ion_core::io::load_jsonl;
use ion_core::postprocess::Detection;
use ion_core::train::model::init_rng;
use ion_core::train::runner::detect;
use ion_core::train::{evaluate_model, ExperimentConfig, IonModel, SyntheticScene};

fn ion(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ion")).args(args).output().expect("run ion")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn unknown_flags_and_subcommands_are_usage_errors() {
    assert_eq!(ion(&["eval", "--bogus"]).status.code(), Some(1));
    assert_eq!(ion(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(ion(&[]).status.code(), Some(1));
    let help = ion(&["--help"]);
    assert_eq!(help.status.code(), Some(0));
    let text = stdout(&help);
    for sub in ["gradcheck", "rfield", "train", "detect", "postprocess", "eval", "threshsearch", "gen-data"] {
        assert!(text.contains(sub), "{sub} missing from help");
    }
    assert!(text.contains("--seed") && text.contains("--verbose"));
}

#[test]
fn gradcheck_lists_each_op_once_and_passes() {
    let o = ion(&["gradcheck", "--instances", "5", "--seed", "4"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    for op in ion_core::verify::registry() {
        let lines = text.lines().filter(|l| l.split_whitespace().next() == Some(op.name)).count();
        assert_eq!(lines, 1, "{}", op.name);
    }
    assert!(text.lines().all(|l| l.contains("max_rel_error=")));
}

#[test]
fn gradcheck_with_corrupted_backward_fails_verification() {
    let o = ion(&["gradcheck", "--corrupt", "irnn_learned"]);
    assert_eq!(o.status.code(), Some(3));
    let text = stdout(&o);
    let line = text.lines().find(|l| l.starts_with("irnn_learned")).unwrap();
    assert!(line.ends_with("FAIL"), "{line}");
    assert_eq!(ion(&["gradcheck", "--corrupt", "nonexistent"]).status.code(), Some(1));
}

#[test]
fn rfield_reports_and_rejects_unknown_operator() {
    let o = ion(&["rfield", "--operator", "conv5x5x2"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("window=9x9"), "{}", stdout(&o));
    let o = ion(&["rfield", "--operator", "gap"]);
    assert!(stdout(&o).contains("full_image=true spatially_varying=false"));
    assert_eq!(ion(&["rfield", "--operator", "conv7"]).status.code(), Some(1));
}

fn fixture_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    // one class, six objects; ranked detections hit, hit, miss, hit, hit
    let mut gt = String::new();
    let mut dets = String::new();
    for i in 0..6u32 {
        let x = 20.0 * i as f64;
        gt.push_str(&format!(
            "{{\"image_id\":0,\"class_id\":1,\"box\":[{x},0,{},10],\"difficult\":false}}\n",
            x + 10.0
        ));
    }
    let scores = [0.9, 0.8, 0.7, 0.6, 0.5];
    let hits = [Some(0), Some(1), None, Some(2), Some(3)];
    for (s, h) in scores.iter().zip(hits) {
        let x = match h {
            Some(i) => 20.0 * i as f64,
            None => 500.0,
        };
        dets.push_str(&format!(
            "{{\"image_id\":0,\"class_id\":1,\"score\":{s},\"box\":[{x},0,{},10]}}\n",
            x + 10.0
        ));
    }
    fs::write(dir.path().join("gt.jsonl"), gt).unwrap();
    fs::write(dir.path().join("dets.jsonl"), dets).unwrap();
    dir
}

fn key(text: &str, k: &str) -> f64 {
    let prefix = format!("{k}=");
    text.lines().find_map(|l| l.strip_prefix(&prefix)).unwrap_or_else(|| panic!("{k} missing")).parse().unwrap()
}

#[test]
fn eval_fixture_matches_hand_computed_ap() {
    // hit, hit, miss, hit, hit over six objects: precision 1, 1, 3/4, 4/5 at
    // recall 1/6..4/6; the precision envelope lifts 3/4 to 4/5, so
    // AP = (1 + 1 + 0.8 + 0.8) / 6 = 0.6
    let dir = fixture_dir();
    let d = dir.path();
    let o = ion(&["eval", "--detections", p(&d.join("dets.jsonl")), "--ground-truth", p(&d.join("gt.jsonl"))]);
    assert_eq!(o.status.code(), Some(0));
    let dets: Vec<Detection> = load_jsonl(d.join("dets.jsonl")).unwrap();
    let gts: Vec<GroundTruthObject> = load_jsonl(d.join("gt.jsonl")).unwrap();
    let want = coco_map(&dets, &gts);
    assert!((key(&stdout(&o), "map_50") - want.map_50).abs() < 1e-6);
    assert!((key(&stdout(&o), "map_50") - 0.6).abs() < 1e-6, "{}", stdout(&o));
}

#[test]
fn eval_of_five_of_six_recall_fixture_is_five_sixths() {
    // six objects, five perfect detections: precision 1 up to recall 5/6
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut gt = String::new();
    let mut dets = String::new();
    for i in 0..6 {
        let x = 20 * i;
        gt.push_str(&format!("{{\"image_id\":0,\"class_id\":1,\"box\":[{x},0,{},10],\"difficult\":false}}\n", x + 10));
        if i < 5 {
            dets.push_str(&format!("{{\"image_id\":0,\"class_id\":1,\"score\":0.{},\"box\":[{x},0,{},10]}}\n", 9 - i, x + 10));
        }
    }
    fs::write(d.join("gt.jsonl"), gt).unwrap();
    fs::write(d.join("dets.jsonl"), dets).unwrap();
    let o = ion(&["eval", "--detections", p(&d.join("dets.jsonl")), "--ground-truth", p(&d.join("gt.jsonl"))]);
    assert_eq!(o.status.code(), Some(0));
    assert!((key(&stdout(&o), "map_50") - 5.0 / 6.0).abs() < 1e-6, "{}", stdout(&o));
}

#[test]
fn empty_detections_give_zero_report() {
    let dir = fixture_dir();
    let d = dir.path();
    fs::write(d.join("empty.jsonl"), "").unwrap();
    let o = ion(&["eval", "--detections", p(&d.join("empty.jsonl")), "--ground-truth", p(&d.join("gt.jsonl"))]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    for k in ["map_50", "map_50_95", "ar", "ap_small", "ap_medium", "ap_large"] {
        assert_eq!(key(&text, k), 0.0, "{k}");
    }
}

#[test]
fn parse_errors_are_data_errors_with_line_numbers() {
    let dir = fixture_dir();
    let d = dir.path();
    fs::write(d.join("bad.jsonl"), "{\"image_id\":0,\"class_id\":1,\"score\":0.5,\"box\":[0,0,1,1]}\n{oops}\n").unwrap();
    let o = ion(&["eval", "--detections", p(&d.join("bad.jsonl")), "--ground-truth", p(&d.join("gt.jsonl"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"), "{}", String::from_utf8_lossy(&o.stderr));
    let o = ion(&["eval", "--detections", p(&d.join("missing.jsonl")), "--ground-truth", p(&d.join("gt.jsonl"))]);
    assert_eq!(o.status.code(), Some(2));
    fs::write(d.join("bad.cfg"), "stage1.iters = 1\nnot_a_key = 3\n").unwrap();
    let o = ion(&["gen-data", "--config", p(&d.join("bad.cfg")), "--out-dir", p(&d.join("x"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn staged_pipeline_reproduces_in_process_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg_text = "train_images = 30\ntest_images = 5\nstage1.iters = 8\nstage2.iters = 4\nrois_per_image = 16\n";
    fs::write(d.join("exp.cfg"), cfg_text).unwrap();
    let cfg_path = d.join("exp.cfg");
    let run_ok = |args: &[&str]| {
        let o = ion(args);
        assert_eq!(o.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        o
    };
    run_ok(&["--seed", "9", "train", "--config", p(&cfg_path), "--out-dir", p(&d.join("run"))]);
    for f in ["model.ckpt", "curve.csv", "metrics.txt", "config.txt"] {
        assert!(d.join("run").join(f).exists(), "{f}");
    }
    run_ok(&["--seed", "9", "gen-data", "--config", p(&cfg_path), "--split", "test", "--out-dir", p(&d.join("data"))]);
    let ckpt = d.join("run/model.ckpt");
    run_ok(&[
        "--seed", "9", "detect", "--config", p(&cfg_path), "--checkpoint", p(&ckpt),
        "--scenes", p(&d.join("data/scenes.jsonl")), "--out", p(&d.join("raw.jsonl")),
    ]);
    run_ok(&["postprocess", "--config", p(&cfg_path), "--input", p(&d.join("raw.jsonl")), "--out", p(&d.join("final.jsonl"))]);
    let ev = run_ok(&[
        "eval", "--detections", p(&d.join("final.jsonl")), "--ground-truth", p(&d.join("data/gt.jsonl")),
    ]);

    // in process: same config, same checkpoint, same test scenes
    let cfg = ExperimentConfig { seed: 9, ..ExperimentConfig::parse(cfg_text).unwrap() };
    let mut model = IonModel::new(&cfg, &mut init_rng(cfg.seed)).unwrap();
    model.load_checkpoint(&Checkpoint::load(&ckpt).unwrap()).unwrap();
    let (_, test) = ion_core::train::datasets(&cfg);
    let scenes: Vec<SyntheticScene> = load_jsonl(d.join("data/scenes.jsonl")).unwrap();
    assert_eq!(scenes, test);
    let in_process = detect(&model, &test, &cfg.voting).unwrap();
    let from_files: Vec<Detection> = load_jsonl(d.join("final.jsonl")).unwrap();
    assert_eq!(from_files, in_process);
    let eval = evaluate_model(&model, &test, &cfg.voting).unwrap();
    assert!(stdout(&ev).ends_with(&eval.to_key_values()));
    assert_eq!(fs::read_to_string(d.join("run/metrics.txt")).unwrap(), eval.to_key_values());
}

#[test]
fn seed_changes_generated_data() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for s in ["1", "2"] {
        let o = ion(&["--seed", s, "gen-data", "--count", "3", "--out-dir", p(&d.join(s))]);
        assert_eq!(o.status.code(), Some(0));
    }
    let a = fs::read(d.join("1/scenes.jsonl")).unwrap();
    let b = fs::read(d.join("2/scenes.jsonl")).unwrap();
    assert_ne!(a, b);
    let o = ion(&["--seed", "1", "gen-data", "--count", "3", "--out-dir", p(&d.join("1b"))]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(fs::read(d.join("1b/scenes.jsonl")).unwrap(), a);
}

#[test]
fn threshsearch_reports_thresholds() {
    let dir = fixture_dir();
    let d = dir.path();
    let o = ion(&[
        "threshsearch", "--detections", p(&d.join("dets.jsonl")), "--ground-truth", p(&d.join("gt.jsonl")),
        "--samples", "10",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let nms = key(&text, "nms_iou");
    assert!((0.0..=1.0).contains(&nms));
    key(&text, "vote_iou");
}
