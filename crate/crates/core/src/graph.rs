//! Chain factor graph container.
//!
//! Factors at keyframe `j` are kept in the fixed order GPS, between, motion,
//! and that order is used everywhere rows are stacked (assembly, storage).

use std::collections::BTreeMap;
use std::fmt;

use crate::blockla::Mat;
use crate::error::{Error, Result};
use crate::factors::{
    BetweenFactor, Factor, GpsFactor, KeyframeState, MotionFactor, StateLayout, WhitenedBlockRow,
};

#[derive(Debug, Clone, PartialEq)]
pub struct ChainFactorGraph {
    pub layout: StateLayout,
    pub n: usize,
    pub gps: BTreeMap<usize, GpsFactor>,
    pub between: BTreeMap<usize, BetweenFactor>,
    pub motion: BTreeMap<usize, MotionFactor>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub index: usize,
    pub reason: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "keyframe {}: {}", self.index, self.reason)
    }
}

/// Whitened factors of one linearization over keyframes `first..=last`,
/// grouped per keyframe.
#[derive(Debug, Clone)]
pub struct LinearizedChain {
    pub layout: StateLayout,
    pub first: usize,
    pub unary: Vec<Option<WhitenedBlockRow>>,
    /// Factors on `(j, j+1)`, between before motion, at slot `j − first`.
    pub binary: Vec<Vec<WhitenedBlockRow>>,
}

impl LinearizedChain {
    /// Last keyframe covered.
    pub fn last(&self) -> usize {
        self.first + self.unary.len() - 1
    }

    pub fn n(&self) -> usize {
        self.unary.len()
    }

    pub fn unary(&self, j: usize) -> Option<&WhitenedBlockRow> {
        j.checked_sub(self.first)
            .and_then(|k| self.unary.get(k))
            .and_then(|u| u.as_ref())
    }

    /// Binary factors on `(j, j+1)`; empty outside the covered range.
    pub fn binary(&self, j: usize) -> &[WhitenedBlockRow] {
        j.checked_sub(self.first)
            .and_then(|k| self.binary.get(k))
            .map_or(&[], |v| v.as_slice())
    }
}

impl ChainFactorGraph {
    pub fn new(layout: StateLayout, n: usize) -> Self {
        Self {
            layout,
            n,
            gps: BTreeMap::new(),
            between: BTreeMap::new(),
            motion: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, f: Factor) {
        match f {
            Factor::Gps(g) => {
                self.gps.insert(g.index, g);
            }
            Factor::Between(b) => {
                self.between.insert(b.index, b);
            }
            Factor::Motion(m) => {
                self.motion.insert(m.index, m);
            }
        }
    }

    /// All factors attached at keyframe `j`, in stacking order.
    pub fn factors_at(&self, j: usize) -> Vec<Factor> {
        let mut out = Vec::with_capacity(3);
        if let Some(g) = self.gps.get(&j) {
            out.push(Factor::Gps(g.clone()));
        }
        if let Some(b) = self.between.get(&j) {
            out.push(Factor::Between(b.clone()));
        }
        if let Some(m) = self.motion.get(&j) {
            out.push(Factor::Motion(m.clone()));
        }
        out
    }

    /// Every factor in stacking order `(g₁, b₁, m₁, g₂, …)`.
    pub fn factors(&self) -> Vec<Factor> {
        let mut keys: Vec<usize> = self
            .gps
            .keys()
            .chain(self.between.keys())
            .chain(self.motion.keys())
            .copied()
            .collect();
        keys.sort_unstable();
        keys.dedup();
        keys.into_iter().flat_map(|j| self.factors_at(j)).collect()
    }

    pub fn factor_count(&self) -> usize {
        self.gps.len() + self.between.len() + self.motion.len()
    }

    pub fn validate(&self) -> std::result::Result<(), Vec<Violation>> {
        let mut v = Vec::new();
        let n = self.n;
        for f in self.factors() {
            let j = f.index();
            let last = f.keyframes().into_iter().max().unwrap_or(j);
            if j == 0 || last > n {
                v.push(Violation {
                    index: j,
                    reason: format!("{:?} factor references keyframes outside 1..={n}", f.kind()),
                });
                continue;
            }
            if let Err(e) = f.check(self.layout) {
                v.push(Violation {
                    index: j,
                    reason: e.to_string(),
                });
                continue;
            }
            if let Err(e) = f.whitening() {
                v.push(Violation {
                    index: j,
                    reason: e.to_string(),
                });
            }
        }
        if n > 0 && self.gps.is_empty() {
            v.push(Violation {
                index: 0,
                reason: "gauge unfixed: no unary factor".into(),
            });
        }
        for j in 1..n {
            if !self.between.contains_key(&j) && !self.motion.contains_key(&j) {
                v.push(Violation {
                    index: j,
                    reason: format!("disconnected at {}-{}", j, j + 1),
                });
            }
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(v)
        }
    }

    /// [`ChainFactorGraph::validate`] folded into a single error.
    pub fn check(&self) -> Result<()> {
        self.validate().map_err(|v| {
            let msgs: Vec<String> = v.iter().map(|x| x.to_string()).collect();
            Error::ChainViolation(msgs.join("; "))
        })
    }

    fn check_states(&self, states: &[KeyframeState]) -> Result<()> {
        if states.len() != self.n {
            return Err(Error::InvalidArgument(format!(
                "{} states for {} keyframes",
                states.len(),
                self.n
            )));
        }
        Ok(())
    }

    pub fn linearize(&self, states: &[KeyframeState]) -> Result<LinearizedChain> {
        self.check_states(states)?;
        if self.n == 0 {
            return Err(Error::InvalidArgument("empty chain".into()));
        }
        self.linearize_window(states, 1, self.n)
    }

    /// Linearizes only the factors inside `lo..=hi`: unary factors on the
    /// window and binary factors with both ends in it.
    pub fn linearize_window(&self, states: &[KeyframeState], lo: usize, hi: usize) -> Result<LinearizedChain> {
        if lo == 0 || lo > hi || hi > self.n {
            return Err(Error::InvalidArgument(format!("window {lo}..={hi} on a chain of {}", self.n)));
        }
        let mut unary = Vec::with_capacity(hi - lo + 1);
        let mut binary = Vec::with_capacity(hi - lo);
        for j in lo..=hi {
            unary.push(match self.gps.get(&j) {
                Some(g) => Some(Factor::Gps(g.clone()).linearize(self.layout, states)?),
                None => None,
            });
            if j < hi {
                let mut rows = Vec::new();
                if let Some(b) = self.between.get(&j) {
                    rows.push(Factor::Between(b.clone()).linearize(self.layout, states)?);
                }
                if let Some(m) = self.motion.get(&j) {
                    rows.push(Factor::Motion(m.clone()).linearize(self.layout, states)?);
                }
                binary.push(rows);
            }
        }
        Ok(LinearizedChain {
            layout: self.layout,
            first: lo,
            unary,
            binary,
        })
    }

    /// Full whitened system `(A_b, ε_b)`.
    pub fn assemble(&self, states: &[KeyframeState]) -> Result<(Mat, Vec<f64>)> {
        self.check_states(states)?;
        let d = self.layout.dim();
        let rows: Vec<WhitenedBlockRow> = self
            .factors()
            .iter()
            .map(|f| f.linearize(self.layout, states))
            .collect::<Result<_>>()?;
        let m: usize = rows.iter().map(|r| r.rows()).sum();
        let mut a = Mat::zeros(m, self.n * d);
        let mut eps = Vec::with_capacity(m);
        let mut r0 = 0;
        for row in &rows {
            for (idx, block) in &row.blocks {
                a.set_block(r0, (idx - 1) * d, block);
            }
            eps.extend_from_slice(&row.residual);
            r0 += row.rows();
        }
        Ok((a, eps))
    }

    pub fn cost(&self, states: &[KeyframeState]) -> Result<f64> {
        self.check_states(states)?;
        crate::factors::total_cost(self.factors().iter(), self.layout, states)
    }

    /// Initial guess by chaining odometry from the first GPS fix.
    ///
    /// Headings and positions follow the between factors; without one, the
    /// motion increment or the previous velocity is used. Velocities are
    /// finite differences of the chained positions, biases start at zero.
    pub fn dead_reckon(&self) -> Vec<KeyframeState> {
        let layout = self.layout;
        let mut out: Vec<KeyframeState> = Vec::with_capacity(self.n);
        if self.n == 0 {
            return out;
        }
        let first = self.gps.values().next();
        let mut cur = KeyframeState::default();
        if let Some(g) = first {
            cur.x = g.z[0];
            cur.y = g.z[1];
        }
        out.push(cur);
        for j in 1..self.n {
            let mut next = cur;
            if let Some(b) = self.between.get(&j) {
                if layout.has_heading() {
                    let (s, c) = cur.theta.sin_cos();
                    next.x = cur.x + c * b.z[0] - s * b.z[1];
                    next.y = cur.y + s * b.z[0] + c * b.z[1];
                    next.theta = crate::factors::wrap_angle(cur.theta + b.z[2]);
                } else {
                    next.x = cur.x + b.z[0];
                    next.y = cur.y + b.z[1];
                }
            } else if let Some(m) = self.motion.get(&j) {
                next.x = cur.x + m.z[0] + cur.vx * m.dt;
                next.y = cur.y + m.z[1] + cur.vy * m.dt;
            } else if let Some(g) = self.gps.get(&(j + 1)) {
                next.x = g.z[0];
                next.y = g.z[1];
            }
            out.push(next);
            cur = next;
        }
        if first.is_some() {
            // Shift so the first GPS-constrained keyframe sits on its fix.
            let (&k, g) = self.gps.iter().next().expect("nonempty");
            let (ox, oy) = (g.z[0] - out[k - 1].x, g.z[1] - out[k - 1].y);
            for s in &mut out {
                s.x += ox;
                s.y += oy;
            }
        }
        if layout.has_velocity() {
            for j in 0..self.n.saturating_sub(1) {
                let dt = self.motion.get(&(j + 1)).map_or(1.0, |m| m.dt);
                out[j].vx = (out[j + 1].x - out[j].x) / dt;
                out[j].vy = (out[j + 1].y - out[j].y) / dt;
            }
            if self.n > 1 {
                let k = self.n - 1;
                out[k].vx = out[k - 1].vx;
                out[k].vy = out[k - 1].vy;
            }
        }
        out.into_iter().map(|s| s.restricted(layout)).collect()
    }

    /// Four keyframes on a line, linear layout, GPS at each keyframe and a
    /// between factor on each consecutive pair, unit covariances.
    pub fn toy_example() -> Self {
        let truth = Self::toy_truth();
        let mut g = Self::new(StateLayout::LINEAR, 4);
        for (j, s) in truth.iter().enumerate() {
            g.add(Factor::Gps(GpsFactor {
                index: j + 1,
                z: [s.x, s.y],
                sigma: Mat::identity(2),
            }));
        }
        for j in 1..4 {
            let (a, b) = (truth[j - 1], truth[j]);
            g.add(Factor::Between(BetweenFactor {
                index: j,
                z: vec![b.x - a.x, b.y - a.y],
                sigma: Mat::identity(2),
            }));
        }
        g
    }

    pub fn toy_truth() -> Vec<KeyframeState> {
        (0..4).map(|i| KeyframeState::at(i as f64, 0.0)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_is_valid() {
        let g = ChainFactorGraph::toy_example();
        assert_eq!(g.validate(), Ok(()));
        assert_eq!(g.factor_count(), 7);
        assert_eq!(g.n, 4);
        assert_eq!(g.cost(&ChainFactorGraph::toy_truth()).unwrap(), 0.0);
    }

    #[test]
    fn missing_between_disconnects() {
        let mut g = ChainFactorGraph::toy_example();
        g.between.remove(&2);
        let v = g.validate().unwrap_err();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].index, 2);
        assert!(v[0].reason.contains("disconnected at 2-3"));
    }

    #[test]
    fn no_unary_is_gauge_violation() {
        let mut g = ChainFactorGraph::toy_example();
        g.gps.clear();
        let v = g.validate().unwrap_err();
        assert!(v.iter().any(|x| x.reason.contains("gauge unfixed")));
    }

    #[test]
    fn out_of_range_factor() {
        let mut g = ChainFactorGraph::toy_example();
        g.add(Factor::Between(BetweenFactor {
            index: 4,
            z: vec![1.0, 0.0],
            sigma: Mat::identity(2),
        }));
        let v = g.validate().unwrap_err();
        assert!(v.iter().any(|x| x.index == 4 && x.reason.contains("outside")));
    }

    #[test]
    fn toy_assembly_shape() {
        let g = ChainFactorGraph::toy_example();
        let (a, eps) = g.assemble(&ChainFactorGraph::toy_truth()).unwrap();
        assert_eq!((a.nrows(), a.ncols()), (14, 8));
        assert_eq!(eps.len(), 14);
        assert!(eps.iter().all(|e| *e == 0.0));
        // Rows of g1, b1, g2, b2, ...: every row touches one or two
        // consecutive block columns.
        let blocks_touched = |r: usize| -> Vec<usize> {
            let mut v: Vec<usize> = (0..8).filter(|&c| a[(r, c)] != 0.0).map(|c| c / 2).collect();
            v.dedup();
            v
        };
        assert_eq!(blocks_touched(0), vec![0]);
        assert_eq!(blocks_touched(2), vec![0, 1]);
        assert_eq!(blocks_touched(4), vec![1]);
        assert_eq!(blocks_touched(13), vec![3]);
    }

    #[test]
    fn single_gps_assembly() {
        let mut g = ChainFactorGraph::new(StateLayout::LINEAR, 1);
        g.add(Factor::Gps(GpsFactor {
            index: 1,
            z: [2.0, 3.0],
            sigma: Mat::diag(&[4.0, 9.0]),
        }));
        let (a, eps) = g.assemble(&[KeyframeState::default()]).unwrap();
        assert_eq!(a, Mat::diag(&[-0.5, -1.0 / 3.0]));
        assert_eq!(eps, vec![1.0, 1.0]);
    }

    #[test]
    fn dead_reckon_follows_toy() {
        let g = ChainFactorGraph::toy_example();
        assert_eq!(g.dead_reckon(), ChainFactorGraph::toy_truth());
    }
}
