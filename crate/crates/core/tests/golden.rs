//! Toy chain against values worked out by hand.
//!
//! Unit covariances, GPS on every keyframe and a between factor on every
//! link. The information of keyframe j after eliminating its predecessors
//! is a_1 = 2, a_j = 3 − 1/a_{j−1} for interior j, a_4 = 2 − 1/a_3, so each
//! diagonal block is √a_j·I up to sign and R_j·T_j = −I.

use chainfg::eliminate::{eliminate, solve_net, ElimOptions};
use chainfg::perfmodel::{qr_cycles, PipelineConfig};
use chainfg::{ChainFactorGraph, ElimMode, Exec, Mat};

fn expected_info() -> [f64; 4] {
    let a1 = 2.0;
    let a2 = 3.0 - 1.0 / a1;
    let a3 = 3.0 - 1.0 / a2;
    let a4 = 2.0 - 1.0 / a3;
    [a1, a2, a3, a4]
}

fn assert_scaled_identity(m: &Mat, s: f64) {
    for r in 0..2 {
        for c in 0..2 {
            let want = if r == c { s } else { 0.0 };
            assert!((m[(r, c)] - want).abs() < 1e-14, "{m:?} vs {s}");
        }
    }
}

#[test]
fn serial_conditionals() {
    let g = ChainFactorGraph::toy_example();
    let net = eliminate(&g, &ChainFactorGraph::toy_truth(), ElimMode::Serial, ElimOptions::default()).unwrap();
    for (c, a) in net.conditionals.iter().zip(expected_info()) {
        let s = c.r_block[(0, 0)].signum();
        assert_scaled_identity(&c.r_block, s * a.sqrt());
        match &c.t_block {
            Some(t) => assert_scaled_identity(t, -s / a.sqrt()),
            None => assert_eq!(c.index, 4),
        }
    }
    assert_eq!(net.trace.iter().map(|s| s.rows).collect::<Vec<_>>(), vec![4, 6, 8, 8]);
}

#[test]
fn parallel_rows() {
    let g = ChainFactorGraph::toy_example();
    let net = eliminate(&g, &ChainFactorGraph::toy_truth(), ElimMode::Parallel, ElimOptions::default()).unwrap();
    assert_eq!(net.trace.iter().map(|s| s.rows).collect::<Vec<_>>(), vec![4, 4, 6, 8]);
}

#[test]
fn single_shifted_fix() {
    // Moving the GPS reading of keyframe 1 by e pulls the estimate; for unit
    // weights the response is the first column of (AᵀA)⁻¹ times e.
    let mut g = ChainFactorGraph::toy_example();
    g.gps.get_mut(&1).unwrap().z = [1.0, 0.0];
    let truth = ChainFactorGraph::toy_truth();
    let delta = solve_net(&eliminate(&g, &truth, ElimMode::Parallel, ElimOptions::default()).unwrap(), Exec::Inline).unwrap();
    // Tridiagonal (2,-1;-1,3,-1;-1,3,-1;-1,2) inverse, first column, times 1.
    let want = [13.0 / 21.0, 5.0 / 21.0, 2.0 / 21.0, 1.0 / 21.0];
    for (j, w) in want.iter().enumerate() {
        assert!((delta[2 * j] - w).abs() < 1e-14, "{delta:?}");
        assert!(delta[2 * j + 1].abs() < 1e-14);
    }
}

#[test]
fn cycle_model_reference_points() {
    let cfg = |n_u| PipelineConfig {
        n_u,
        ..Default::default()
    };
    assert_eq!(qr_cycles(12, 6, 3, &cfg(1)).unwrap(), 179.0);
    assert!((qr_cycles(12, 6, 3, &cfg(5)).unwrap() - 45.4).abs() < 1e-12);
}
