#![allow(dead_code)]

use chainfg::synth::{generate, NoiseLevels, SynthConfig};
use chainfg::{BetweenFactor, ChainFactorGraph, Factor, GpsFactor, KeyframeState, Mat, MotionFactor, StateLayout};
use rand::Rng;

pub fn rand_spd(rng: &mut impl Rng, dim: usize) -> Mat {
    let b = Mat::from_fn(dim, dim, |_, _| rng.random_range(-0.5..0.5));
    let mut s = b.transpose().mul(&b);
    for i in 0..dim {
        s[(i, i)] += rng.random_range(0.05..0.5);
    }
    // Exact symmetry.
    Mat::from_fn(dim, dim, |r, c| 0.5 * (s[(r, c)] + s[(c, r)]))
}

pub fn rand_state(rng: &mut impl Rng, layout: StateLayout) -> KeyframeState {
    let v: Vec<f64> = (0..layout.dim()).map(|_| rng.random_range(-3.0..3.0)).collect();
    KeyframeState::from_slice(layout, &v).unwrap()
}

pub fn rand_factor(rng: &mut impl Rng, layout: StateLayout, kind: chainfg::FactorKind, index: usize) -> Factor {
    let mut r = || rng.random_range(-2.0..2.0);
    let z2 = [r(), r()];
    let zb: Vec<f64> = (0..layout.between_dim()).map(|_| r()).collect();
    let zm: Vec<f64> = (0..layout.motion_dim()).map(|_| r()).collect();
    match kind {
        chainfg::FactorKind::Gps => Factor::Gps(GpsFactor {
            index,
            z: z2,
            sigma: rand_spd(rng, 2),
        }),
        chainfg::FactorKind::Between => Factor::Between(BetweenFactor {
            index,
            z: zb,
            sigma: rand_spd(rng, layout.between_dim()),
        }),
        chainfg::FactorKind::Motion => Factor::Motion(MotionFactor {
            index,
            dt: rng.random_range(0.2..1.5),
            z: zm,
            sigma: rand_spd(rng, layout.motion_dim()),
        }),
    }
}

/// Random chain with every pair connected and at least one GPS factor.
/// In pose-only layouts one fix leaves the global heading free; with
/// velocity the world-frame bias term pins it, so one fix is enough.
pub fn rand_chain(rng: &mut impl Rng, layout: StateLayout, n: usize) -> (ChainFactorGraph, Vec<KeyframeState>) {
    use chainfg::FactorKind::*;
    let mut g = ChainFactorGraph::new(layout, n);
    let anchor = rng.random_range(1..=n);
    for j in 1..=n {
        if j == anchor || rng.random_bool(0.4) {
            g.add(rand_factor(rng, layout, Gps, j));
        }
        if j < n {
            // Headings are only seen by between factors, velocities and
            // biases only by motion factors.
            g.add(rand_factor(rng, layout, Between, j));
            if layout.has_velocity() {
                g.add(rand_factor(rng, layout, Motion, j));
            }
        }
    }
    let states = (0..n).map(|_| rand_state(rng, layout)).collect();
    (g, states)
}

/// Noisy synthetic dataset plus a perturbed start and the truth.
pub fn synth_case(
    layout: StateLayout,
    n: usize,
    noise: NoiseLevels,
    seed: u64,
) -> (ChainFactorGraph, Vec<KeyframeState>, Vec<KeyframeState>) {
    let (g, truth) = generate(&SynthConfig::new(n, layout, noise, seed)).unwrap();
    let x0 = g.dead_reckon();
    (g, x0, truth)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

pub fn state_diff(a: &[KeyframeState], b: &[KeyframeState], layout: StateLayout) -> f64 {
    let fa: Vec<f64> = a.iter().flat_map(|s| s.to_vec(layout)).collect();
    let fb: Vec<f64> = b.iter().flat_map(|s| s.to_vec(layout)).collect();
    max_abs_diff(&fa, &fb)
}
