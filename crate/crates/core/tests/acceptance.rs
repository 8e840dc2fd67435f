//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any
//! fails. Built with `harness = false` so the report always prints:
//!
//! ```text
//! cargo test --release -p ion-core --test acceptance
//! ```

mod support;

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use ion_core::eval::{average_precision, coco_map, map_at, size_stratified};
use ion_core::irnn::{irnn_accumulator_forward, irnn_direction_forward, Direction, IrnnDirectionParams, Recurrence};
use ion_core::postprocess::{flip_merge, generate_anchor_shapes, nms, weighted_vote, AnchorConfig, Detection};
use ion_core::rfield::{probe, ProbeOperator};
use ion_core::train::{clip_gradient, lr_at, run_experiment, ExperimentConfig, ExperimentOutcome, IonModel, LrSchedule};
use ion_core::verify::{registry, run_suite, DEFAULT_INSTANCES, TOLERANCE};
use ion_core::voting_bench::{run as voting_bench, VotingBenchConfig};
use ion_core::Rng64;
use rand::{Rng, SeedableRng};
use support::*;

/// Regression floors for the default training configuration, frozen from
/// the first full run at the default seed (ION 0.978, conv5-only baseline
/// 0.873, unnormalized fusion 0.955, ION + seg loss 0.985 AP@0.5). The
/// absolute requirement is 0.80; the frozen floor leaves ~0.03 headroom
/// below the measured value.
const ION_AP50_REQUIRED: f64 = 0.80;
const ION_AP50_FROZEN: f64 = 0.95;
const SEG_MAX_DROP: f64 = 0.01;

type Check = Result<String, String>;

fn check(f: impl FnOnce() -> String) -> Check {
    catch_unwind(AssertUnwindSafe(f)).map_err(|e| {
        e.downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())
    })
}

fn gradients() -> String {
    let t = Instant::now();
    assert!(DEFAULT_INSTANCES >= 5);
    let suite = run_suite(11, DEFAULT_INSTANCES, &[]).unwrap();
    let worst = suite.reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    for r in &suite.reports {
        assert!(r.max_rel_error <= TOLERANCE, "{}: {:.3e}", r.op_name, r.max_rel_error);
    }
    for op in registry() {
        assert!(op.run(5, 1, true).unwrap().max_rel_error > TOLERANCE, "{} misses a corrupted backward", op.name);
    }
    let secs = t.elapsed().as_secs_f64();
    assert!(secs < 60.0, "{secs:.1}s");
    format!("{} ops x {DEFAULT_INSTANCES} instances, worst {worst:.2e}, {secs:.1}s", suite.reports.len())
}

fn receptive_fields() -> String {
    let n = 15;
    let r = probe(ProbeOperator::Conv3x3x2, n, 1).unwrap();
    assert_eq!((r.window_h, r.window_w, r.changed_cells), (5, 5, 25));
    let r = probe(ProbeOperator::Conv5x5x2, n, 1).unwrap();
    assert_eq!((r.window_h, r.window_w, r.changed_cells), (9, 9, 81));
    let r = probe(ProbeOperator::GlobalAverage, n, 1).unwrap();
    assert!(r.full_image && !r.spatially_varying);
    let r = probe(ProbeOperator::Irnn, n, 1).unwrap();
    assert!(r.full_image && r.spatially_varying);
    let r = probe(ProbeOperator::IrnnTwoDirection, n, 1).unwrap();
    assert_eq!((r.window_h, r.window_w, r.window[0]), (1, n, n / 2));
    "5x5, 9x9, gap full+constant, irnn full+varying, irnn2dir one row".into()
}

fn irnn_exactness() -> String {
    let mut rng = Rng64::seed_from_u64(100);
    for i in 0..100 {
        let x = random_map(&mut rng);
        let c = x.channels();
        let eye = IrnnDirectionParams {
            recurrence: Recurrence::Learned(identity(c)),
            ..IrnnDirectionParams::learned(c)
        };
        let w: Vec<f64> = (0..c * c).map(|_| rng.random_range(-0.8..0.8)).collect();
        let learned = IrnnDirectionParams {
            recurrence: Recurrence::Learned(w.clone()),
            ..IrnnDirectionParams::learned(c)
        };
        for dir in Direction::ALL {
            let acc = irnn_accumulator_forward(&x, dir).unwrap();
            assert_eq!(bits(&irnn_direction_forward(&x, dir, &eye).unwrap()), bits(&acc), "map {i} {dir:?}");
            assert_eq!(bits(&acc), bits(&reference(&x, dir, None, &vec![0.0; c])), "map {i} {dir:?}");
            let batched = irnn_direction_forward(&x, dir, &learned).unwrap();
            assert_eq!(bits(&batched), bits(&reference(&x, dir, Some(&w), &vec![0.0; c])), "map {i} {dir:?}");
        }
    }
    "100 maps x 4 directions bitwise".into()
}

fn nms_and_voting() -> String {
    let mut rng = Rng64::seed_from_u64(40);
    let mut worst: f64 = 0.0;
    for case in 0..1000 {
        let d = instance(&mut rng, 20, 1, 1, case % 4 == 0);
        let (t, v) = (rng.random_range(0.05..0.95), rng.random_range(0.0..1.0));
        let keep = nms(&d, t).keep;
        let got: BTreeSet<usize> = keep.iter().copied().collect();
        assert_eq!(got, nms_recursive(&d, (0..d.len()).collect(), t), "case {case}");
        let kept: Vec<Detection> = keep.iter().map(|&i| d[i]).collect();
        for (k, voted) in kept.iter().zip(weighted_vote(&kept, &d, v)) {
            for (a, b) in voted.bbox.to_array().iter().zip(vote_oracle(k, &d, v)) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    assert!(worst <= 1e-9, "{worst:e}");
    format!("1000 instances, exact NMS sets, vote error {worst:.1e}")
}

fn metrics() -> String {
    let gts = [gt(0, [0.0, 0.0, 10.0, 10.0]), gt(0, [50.0, 50.0, 60.0, 60.0])];
    let dets = [
        det(0, 0.9, [0.0, 0.0, 10.0, 10.0]),
        det(0, 0.8, [100.0, 100.0, 110.0, 110.0]),
        det(0, 0.7, [50.0, 50.0, 60.0, 60.0]),
    ];
    let ap = map_at(&dets, &gts, 0.5);
    assert!((ap - 5.0 / 6.0).abs() < 1e-12, "{ap}");
    assert!((ap_oracle(&[true, false, true], 2) - average_precision(&[true, false, true], 2)).abs() < 1e-12);
    let (mut gts, mut dets) = (Vec::new(), Vec::new());
    for i in 0..4u64 {
        let o = 20.0 * i as f64;
        gts.push(gt(i, [o, 0.0, o + 10.0, 10.0]));
        dets.push(det(i, 0.5, [o, 0.0, o + 10.0, 7.0]));
    }
    let m = coco_map(&dets, &gts).map_coco;
    assert!((m - 0.5).abs() < 1e-12, "{m}");
    let s = size_stratified(&[det(0, 0.9, [0.0, 0.0, 32.0, 32.0])], &[gt(0, [0.0, 0.0, 32.0, 32.0])]);
    assert_eq!((s.small.num_gt, s.medium.num_gt), (1, 0));
    format!("AP {ap:.6}, mAP@[.5:.95] {m:.6}, 32x32 in small")
}

fn voting_direction() -> String {
    let t = Instant::now();
    let r = voting_bench(0, &VotingBenchConfig::default(), &[0.5, 0.854]);
    let (d50, d85) = r.delta(0.5).unwrap();
    let (_, n85) = r.delta(0.854).unwrap();
    let secs = t.elapsed().as_secs_f64();
    assert!(d50 > 0.0 && d85 < 0.0, "vote 0.5: dAP50 {d50:+.4} dAP85 {d85:+.4}");
    assert!(n85 >= -0.005, "vote 0.854: dAP85 {n85:+.4}");
    assert!(secs < 30.0, "{secs:.1}s");
    format!("vote 0.5: dAP50 {d50:+.4} dAP85 {d85:+.4}; vote 0.854: dAP85 {n85:+.4}; {secs:.1}s")
}

fn schedule_and_clip() -> String {
    let (s1, s2) = (LrSchedule::STAGE1, LrSchedule::STAGE2);
    assert_eq!(lr_at(&s1, 0).unwrap(), 5e-3);
    assert_eq!(lr_at(&s1, s1.total_iters).unwrap(), 1e-4);
    assert_eq!(lr_at(&s2, 0).unwrap(), 1e-3);
    assert_eq!(lr_at(&s2, s2.total_iters).unwrap(), 1e-5);
    let mut rng = Rng64::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.random_range(1..200);
        let mut g: Vec<f64> = (0..n).map(|_| rng.random_range(-100.0..100.0)).collect();
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        let thr = rng.random_range(0.01..norm.max(0.02));
        clip_gradient(&mut g, thr);
        if norm > thr {
            worst = worst.max((g.iter().map(|v| v * v).sum::<f64>().sqrt() - thr).abs());
        }
    }
    assert!(worst <= 1e-12, "{worst:e}");
    format!("endpoints exact, post-clip norm error {worst:.1e}")
}

fn variant(extra: &str) -> ExperimentConfig {
    ExperimentConfig::parse(extra).unwrap()
}

fn checkpoint_bytes(m: &mut IonModel) -> Vec<u8> {
    let mut buf = Vec::new();
    m.to_checkpoint().write_to(&mut buf).unwrap();
    buf
}

struct Runs {
    ion: ExperimentOutcome,
    seg: ExperimentOutcome,
}

fn training(runs: &mut Option<Runs>) -> String {
    let t = Instant::now();
    let cfg = variant("");
    let mut ion = run_experiment(&cfg).unwrap();
    let mut again = run_experiment(&cfg).unwrap();
    assert!(checkpoint_bytes(&mut ion.model) == checkpoint_bytes(&mut again.model), "checkpoints differ");
    let base = run_experiment(&variant("skip_sources = conv5\ncontext = none\nnorm_mode = none\n")).unwrap();
    let unnorm = run_experiment(&variant("norm_mode = none\n")).unwrap();
    let seg = run_experiment(&variant("seg_loss = true\n")).unwrap();
    let (a, b, u) = (ion.eval.map_50, base.eval.map_50, unnorm.eval.map_50);
    *runs = Some(Runs { ion, seg });
    let line = format!(
        "ION {a:.4} (frozen floor {ION_AP50_FROZEN}), conv5-only {b:.4}, unnormalized {u:.4}, {:.0}s",
        t.elapsed().as_secs_f64()
    );
    assert!(a >= ION_AP50_REQUIRED && a >= ION_AP50_FROZEN, "{line}");
    assert!(a >= b && a >= u, "{line}");
    line
}

fn seg_loss(runs: &Option<Runs>) -> String {
    let r = runs.as_ref().expect("training runs unavailable");
    let (off, on) = (r.ion.eval.map_50, r.seg.eval.map_50);
    let line = format!("seg off {off:.4}, on {on:.4}, change {:+.4}", on - off);
    assert!(on >= off - SEG_MAX_DROP, "{line}");
    line
}

fn anchors_and_flip() -> String {
    let a = generate_anchor_shapes(&AnchorConfig::default());
    assert_eq!(a.len(), 22);
    let mut rng = Rng64::seed_from_u64(10);
    for _ in 0..50 {
        let (outputs, flipped) = symmetric_flip_fixture(&mut rng);
        assert_eq!(flip_merge(&outputs, &flipped).unwrap(), outputs);
    }
    "22 anchor shapes, flip_merge identity on 50 symmetric fixtures".into()
}

fn main() -> ExitCode {
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    std::panic::set_hook(Box::new(|_| {}));
    let mut runs = None;
    let results: Vec<(u32, &str, Check)> = vec![
        (1, "gradient verification", check(gradients)),
        (2, "receptive fields", check(receptive_fields)),
        (3, "IRNN exactness", check(irnn_exactness)),
        (4, "NMS and voting oracles", check(nms_and_voting)),
        (5, "metric fixtures", check(metrics)),
        (6, "voting threshold direction", check(voting_direction)),
        (7, "LR endpoints and clipping", check(schedule_and_clip)),
        (8, "deterministic toy training", check(|| training(&mut runs))),
        (9, "segmentation loss", check(|| seg_loss(&runs))),
        (10, "anchors and flip merge", check(anchors_and_flip)),
    ];
    let mut failed = 0;
    for (n, name, r) in &results {
        match r {
            Ok(detail) => println!("criterion {n:>2} PASS  {name}: {detail}"),
            Err(msg) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name}: {msg}");
            }
        }
    }
    println!("{} of {} criteria pass", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
