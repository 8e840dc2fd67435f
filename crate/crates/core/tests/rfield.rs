use ion_core::rfield::{probe, ProbeOperator};

const GRID: usize = 15;

#[test]
fn two_3x3_convs_see_5x5() {
    let r = probe(ProbeOperator::Conv3x3x2, GRID, 1).unwrap();
    assert_eq!((r.window_h, r.window_w, r.changed_cells), (5, 5, 25));
    assert_eq!(r.window, [5, 5, 9, 9]);
    assert!(!r.full_image);
}

#[test]
fn two_5x5_convs_see_9x9() {
    let r = probe(ProbeOperator::Conv5x5x2, GRID, 1).unwrap();
    assert_eq!((r.window_h, r.window_w, r.changed_cells), (9, 9, 81));
    assert_eq!(r.window, [3, 3, 11, 11]);
}

#[test]
fn global_average_is_full_and_constant() {
    let r = probe(ProbeOperator::GlobalAverage, GRID, 1).unwrap();
    assert!(r.full_image);
    assert!(!r.spatially_varying);
}

#[test]
fn stacked_irnn_is_full_and_varying() {
    for seed in 0..3 {
        let r = probe(ProbeOperator::Irnn, GRID, seed).unwrap();
        assert!(r.full_image, "{r:?}");
        assert!(r.spatially_varying);
    }
}

#[test]
fn two_direction_first_layer_is_one_row() {
    let r = probe(ProbeOperator::IrnnTwoDirection, GRID, 1).unwrap();
    assert_eq!(r.window_h, 1);
    assert_eq!(r.window_w, GRID);
    assert_eq!(r.window[0], GRID / 2);
    assert_eq!(r.changed_cells, GRID);
}

#[test]
fn windows_independent_of_grid_size() {
    for size in [11, 13, 21] {
        assert_eq!(probe(ProbeOperator::Conv3x3x2, size, 4).unwrap().window_h, 5);
        assert_eq!(probe(ProbeOperator::Conv5x5x2, size, 4).unwrap().window_w, 9);
        assert!(probe(ProbeOperator::Irnn, size, 4).unwrap().full_image);
    }
}
