use std::time::Instant;

use ion_core::voting_bench::{run, VotingBenchConfig};

#[test]
fn wide_voting_trades_high_iou_for_recall_and_narrow_voting_is_safe() {
    let t = Instant::now();
    let r = run(0, &VotingBenchConfig::default(), &[0.5, 0.854]);
    print!("{}", r.to_table());
    let (d50, d85) = r.delta(0.5).unwrap();
    assert!(d50 > 0.0, "{d50}");
    assert!(d85 < 0.0, "{d85}");
    let (_, d85_narrow) = r.delta(0.854).unwrap();
    assert!(d85_narrow >= -0.005, "{d85_narrow}");
    assert!(t.elapsed().as_secs_f64() < 30.0);
}

#[test]
fn direction_holds_across_seeds() {
    for seed in 1..6 {
        let r = run(seed, &VotingBenchConfig::default(), &[0.5, 0.854]);
        let (d50, d85) = r.delta(0.5).unwrap();
        let (_, n85) = r.delta(0.854).unwrap();
        assert!(d50 > 0.0 && d85 < 0.0 && n85 >= -0.005, "seed {seed}\n{}", r.to_table());
    }
}

#[test]
fn without_loose_boxes_voting_cannot_help_recall() {
    // tight clusters only: the NMS winner already localizes well
    let cfg = VotingBenchConfig {
        loose_boxes: 0,
        tight_prob: 1.0,
        images: 200,
        ..Default::default()
    };
    let r = run(3, &cfg, &[0.5]);
    let (d50, _) = r.delta(0.5).unwrap();
    assert!(d50.abs() < 1e-3, "{d50}");
}
