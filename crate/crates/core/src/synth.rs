//! Synthetic datasets: a unit-speed path with a sinusoidal heading.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::blockla::Mat;
use crate::error::{Error, Result};
use crate::factors::{BetweenFactor, Factor, GpsFactor, KeyframeState, MotionFactor, StateLayout};
use crate::graph::ChainFactorGraph;

/// Declared standard deviations never go below this, so zero-noise data
/// still has invertible covariances.
pub const MIN_SIGMA: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseLevels {
    pub gps: f64,
    pub lidar: f64,
    pub motion: f64,
}

impl Default for NoiseLevels {
    fn default() -> Self {
        Self {
            gps: 0.1,
            lidar: 0.02,
            motion: 0.02,
        }
    }
}

impl NoiseLevels {
    pub const ZERO: NoiseLevels = NoiseLevels {
        gps: 0.0,
        lidar: 0.0,
        motion: 0.0,
    };

    /// `gps=0.1,lidar=0.02,motion=0.02`; omitted keys keep their defaults.
    pub fn parse(s: &str) -> Result<Self> {
        let mut out = Self::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("expected key=value, got {part:?}")))?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad noise value {v:?}")))?;
            match k.trim() {
                "gps" => out.gps = v,
                "lidar" => out.lidar = v,
                "motion" => out.motion = v,
                other => return Err(Error::InvalidArgument(format!("unknown noise key {other:?}"))),
            }
        }
        out.check()?;
        Ok(out)
    }

    fn check(&self) -> Result<()> {
        for v in [self.gps, self.lidar, self.motion] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("noise stddev {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub n: usize,
    pub layout: StateLayout,
    pub noise: NoiseLevels,
    pub seed: u64,
    /// GPS on keyframes 1, 1+k, 1+2k, ...
    pub gps_every: usize,
}

impl SynthConfig {
    pub fn new(n: usize, layout: StateLayout, noise: NoiseLevels, seed: u64) -> Self {
        Self {
            n,
            layout,
            noise,
            seed,
            gps_every: 1,
        }
    }
}

const DT: f64 = 1.0;
const BIAS: f64 = 0.02;

fn heading(j: usize) -> f64 {
    0.6 * (2.0 * std::f64::consts::PI * j as f64 / 25.0).sin()
}

pub fn ground_truth(n: usize, layout: StateLayout) -> Vec<KeyframeState> {
    let mut out: Vec<KeyframeState> = Vec::with_capacity(n);
    for j in 0..n {
        let th = heading(j);
        let mut s = KeyframeState::pose(0.0, 0.0, th);
        s.vx = th.cos();
        s.vy = th.sin();
        s.bias = BIAS;
        if let Some(p) = out.last() {
            s.x = p.x + 0.5 * (p.vx + s.vx) * DT;
            s.y = p.y + 0.5 * (p.vy + s.vy) * DT;
        }
        out.push(s);
    }
    out.into_iter().map(|s| s.restricted(layout)).collect()
}

fn iso(dim: usize, sd: f64) -> Mat {
    let s = sd.max(MIN_SIGMA);
    Mat::identity(dim).scaled(s * s)
}

/// Factor graph with measurements drawn around the ground truth, and the
/// ground truth itself.
pub fn generate(cfg: &SynthConfig) -> Result<(ChainFactorGraph, Vec<KeyframeState>)> {
    if cfg.n == 0 {
        return Err(Error::InvalidArgument("n must be at least 1".into()));
    }
    if cfg.gps_every == 0 {
        return Err(Error::InvalidArgument("gps_every must be at least 1".into()));
    }
    cfg.noise.check()?;
    let layout = cfg.layout;
    let truth = ground_truth(cfg.n, layout);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut noisy = |clean: Vec<f64>, sd: f64| -> Vec<f64> {
        clean.into_iter().map(|v| v + sd * std_normal.sample(&mut rng)).collect()
    };

    let mut g = ChainFactorGraph::new(layout, cfg.n);
    for j in 1..=cfg.n {
        if (j - 1) % cfg.gps_every == 0 {
            let s = truth[j - 1];
            let z = noisy(vec![s.x, s.y], cfg.noise.gps);
            g.add(Factor::Gps(GpsFactor {
                index: j,
                z: [z[0], z[1]],
                sigma: iso(2, cfg.noise.gps),
            }));
        }
        if j == cfg.n {
            break;
        }
        let dim = layout.between_dim();
        let mut b = Factor::Between(BetweenFactor {
            index: j,
            z: vec![0.0; dim],
            sigma: iso(dim, cfg.noise.lidar),
        });
        let clean = b.predict(layout, &truth)?;
        if let Factor::Between(bf) = &mut b {
            bf.z = noisy(clean, cfg.noise.lidar);
        }
        g.add(b);
        if layout.has_velocity() {
            let dim = layout.motion_dim();
            let mut m = Factor::Motion(MotionFactor {
                index: j,
                dt: DT,
                z: vec![0.0; dim],
                sigma: iso(dim, cfg.noise.motion),
            });
            let clean = m.predict(layout, &truth)?;
            if let Factor::Motion(mf) = &mut m {
                mf.z = noisy(clean, cfg.noise.motion);
            }
            g.add(m);
        }
    }
    Ok((g, truth))
}
