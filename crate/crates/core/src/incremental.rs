//! Incremental smoothing on a chain Bayes tree.
//!
//! A new keyframe only touches the last two conditionals. They are dropped
//! and the three most recent keyframes are re-eliminated from their stored
//! factors plus the cached `τ` that summarizes everything older.

use std::collections::BTreeMap;

use crate::eliminate::{
    eliminate_window, solve_conditionals, ChainConditional, ElimMode, ElimOptions, EliminationStep, TauFactor,
};
use crate::error::{Error, Result};
use crate::factors::{Factor, GpsFactor, KeyframeState};
use crate::graph::ChainFactorGraph;
use crate::solver::retract;

#[derive(Debug, Clone)]
pub struct ChainBayesTree {
    /// Every factor seen so far.
    pub graph: ChainFactorGraph,
    pub lin_points: Vec<KeyframeState>,
    /// One per keyframe, index order.
    pub conditionals: Vec<ChainConditional>,
    pub root: usize,
    /// Forward separator factor arriving at each keyframe.
    pub tau_cache: BTreeMap<usize, TauFactor>,
    /// Eliminations performed by the last `init`/`update`.
    pub last_trace: Vec<EliminationStep>,
    /// Elimination mode inside the update window.
    pub window_mode: ElimMode,
    pub opts: ElimOptions,
}

fn forward_taus(taus: BTreeMap<(usize, usize), TauFactor>) -> impl Iterator<Item = (usize, TauFactor)> {
    taus.into_iter()
        .filter(|((from, on), _)| from + 1 == *on)
        .map(|((_, on), t)| (on, t))
}

impl ChainBayesTree {
    /// Batch serial elimination of the whole graph.
    pub fn init(graph: ChainFactorGraph, states: Vec<KeyframeState>) -> Result<Self> {
        Self::init_with(graph, states, ElimMode::Serial, ElimOptions::default())
    }

    pub fn init_with(
        graph: ChainFactorGraph,
        states: Vec<KeyframeState>,
        window_mode: ElimMode,
        opts: ElimOptions,
    ) -> Result<Self> {
        graph.check()?;
        let states: Vec<KeyframeState> = states.iter().map(|s| s.restricted(graph.layout)).collect();
        let lin = graph.linearize(&states)?;
        let net = eliminate_window(&lin, 1, graph.n, None, ElimMode::Serial, opts)?;
        Ok(Self {
            graph,
            lin_points: states,
            conditionals: net.conditionals,
            root: net.root,
            tau_cache: forward_taus(net.taus).collect(),
            last_trace: net.trace,
            window_mode,
            opts,
        })
    }

    pub fn n(&self) -> usize {
        self.graph.n
    }

    /// Appends keyframe `n+1` with its optional GPS factor and the binary
    /// factors linking it to `n`.
    pub fn update(&mut self, gps: Option<GpsFactor>, binaries: Vec<Factor>, x_init: KeyframeState) -> Result<()> {
        let j = self.n();
        if j == 0 {
            return Err(Error::InvalidArgument("update on an empty tree".into()));
        }
        if let Some(g) = &gps {
            if g.index != j + 1 {
                return Err(Error::ChainViolation(format!("GPS factor on {} offered for keyframe {}", g.index, j + 1)));
            }
        }
        if binaries.is_empty() {
            return Err(Error::ChainViolation(format!("keyframe {} arrives without a factor to {j}", j + 1)));
        }
        for f in &binaries {
            if matches!(f, Factor::Gps(_)) || f.index() != j {
                return Err(Error::ChainViolation(format!(
                    "{:?} factor on {:?} cannot link {j} to {}",
                    f.kind(),
                    f.keyframes(),
                    j + 1
                )));
            }
        }

        let mut graph = self.graph.clone();
        graph.n = j + 1;
        if let Some(g) = gps {
            graph.add(Factor::Gps(g));
        }
        for f in binaries {
            graph.add(f);
        }
        for f in graph.factors_at(j).iter().chain(graph.factors_at(j + 1).iter()) {
            f.check(graph.layout)?;
            f.whitening()?;
        }
        let mut lin_points = self.lin_points.clone();
        lin_points.push(x_init.restricted(graph.layout));

        let lo = j.saturating_sub(1).max(1);
        let hi = j + 1;
        let tau_in = if lo > 1 { self.tau_cache.get(&lo) } else { None };
        let lin = graph.linearize_window(&lin_points, lo, hi)?;
        let net = eliminate_window(&lin, lo, hi, tau_in, self.window_mode, self.opts)?;

        self.conditionals.truncate(lo - 1);
        self.conditionals.extend(net.conditionals);
        self.root = net.root;
        self.tau_cache.retain(|&k, _| k <= lo);
        self.tau_cache.extend(forward_taus(net.taus));
        self.last_trace = net.trace;
        self.graph = graph;
        self.lin_points = lin_points;
        Ok(())
    }

    /// Stacked increments relative to the linearization points.
    pub fn solve(&self) -> Result<Vec<f64>> {
        solve_conditionals(&self.conditionals, self.root, self.opts.exec)
    }

    pub fn estimate(&self) -> Result<Vec<KeyframeState>> {
        retract(self.graph.layout, &self.lin_points, &self.solve()?)
    }

    /// Full re-elimination at new linearization points.
    pub fn relinearize(&self, states: Vec<KeyframeState>) -> Result<Self> {
        Self::init_with(self.graph.clone(), states, self.window_mode, self.opts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blockla::Mat;
    use crate::eliminate::{eliminate_serial, solve_net, Exec};
    use crate::factors::{BetweenFactor, StateLayout};

    fn toy_prefix(n: usize) -> ChainFactorGraph {
        let full = ChainFactorGraph::toy_example();
        let mut g = ChainFactorGraph::new(StateLayout::LINEAR, n);
        for j in 1..=n {
            for f in full.factors_at(j) {
                if f.keyframes().iter().all(|&k| k <= n) {
                    g.add(f);
                }
            }
        }
        g
    }

    fn start() -> Vec<KeyframeState> {
        vec![
            KeyframeState::at(0.2, 0.1),
            KeyframeState::at(0.9, -0.3),
            KeyframeState::at(2.4, 0.2),
            KeyframeState::at(2.8, 0.0),
        ]
    }

    #[test]
    fn init_matches_batch() {
        let g = ChainFactorGraph::toy_example();
        let tree = ChainBayesTree::init(g.clone(), start()).unwrap();
        assert_eq!(tree.conditionals.len(), 4);
        assert_eq!(tree.root, 4);
        let batch = solve_net(&eliminate_serial(&g, &start()).unwrap(), Exec::Inline).unwrap();
        assert_eq!(tree.solve().unwrap(), batch);
    }

    #[test]
    fn update_replaces_only_the_tail() {
        let mut tree = ChainBayesTree::init(toy_prefix(3), start()[..3].to_vec()).unwrap();
        let before = tree.conditionals[0].clone();
        let full = ChainFactorGraph::toy_example();
        let gps = full.gps.get(&4).cloned();
        let b = Factor::Between(full.between[&3].clone());
        tree.update(gps, vec![b], start()[3]).unwrap();
        assert_eq!(tree.conditionals[0], before);
        assert_eq!(tree.last_trace.len(), 3);
        assert_eq!(tree.root, 4);
        let batch = solve_net(&eliminate_serial(&full, &start()).unwrap(), Exec::Inline).unwrap();
        let inc = tree.solve().unwrap();
        for (a, b) in inc.iter().zip(&batch) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn update_from_single_keyframe() {
        let mut tree = ChainBayesTree::init(toy_prefix(1), start()[..1].to_vec()).unwrap();
        let full = ChainFactorGraph::toy_example();
        tree.update(full.gps.get(&2).cloned(), vec![Factor::Between(full.between[&1].clone())], start()[1])
            .unwrap();
        assert_eq!(tree.last_trace.len(), 2);
        let batch = solve_net(&eliminate_serial(&toy_prefix(2), &start()[..2]).unwrap(), Exec::Inline).unwrap();
        assert_eq!(tree.solve().unwrap(), batch);
    }

    #[test]
    fn parallel_window_gives_same_estimate() {
        let full = ChainFactorGraph::toy_example();
        let mut a = ChainBayesTree::init(toy_prefix(1), start()[..1].to_vec()).unwrap();
        let mut b = ChainBayesTree::init_with(toy_prefix(1), start()[..1].to_vec(), ElimMode::Parallel, ElimOptions::default())
            .unwrap();
        for j in 1..4 {
            let gps = full.gps.get(&(j + 1)).cloned();
            let bin = vec![Factor::Between(full.between[&j].clone())];
            a.update(gps.clone(), bin.clone(), start()[j]).unwrap();
            b.update(gps, bin, start()[j]).unwrap();
        }
        assert_eq!(b.root, 3);
        let (ea, eb) = (a.estimate().unwrap(), b.estimate().unwrap());
        for (x, y) in ea.iter().zip(&eb) {
            assert!((x.x - y.x).abs() < 1e-12 && (x.y - y.y).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_misplaced_factors() {
        let mut tree = ChainBayesTree::init(toy_prefix(2), start()[..2].to_vec()).unwrap();
        let wrong = Factor::Between(BetweenFactor {
            index: 1,
            z: vec![1.0, 0.0],
            sigma: Mat::identity(2),
        });
        assert!(matches!(
            tree.update(None, vec![wrong], KeyframeState::default()),
            Err(Error::ChainViolation(_))
        ));
        assert!(matches!(tree.update(None, vec![], KeyframeState::default()), Err(Error::ChainViolation(_))));
        assert_eq!(tree.n(), 2);
    }

    #[test]
    fn relinearize_matches_init() {
        let tree = ChainBayesTree::init(ChainFactorGraph::toy_example(), start()).unwrap();
        let moved = tree.estimate().unwrap();
        let re = tree.relinearize(moved.clone()).unwrap();
        let fresh = ChainBayesTree::init(ChainFactorGraph::toy_example(), moved).unwrap();
        assert_eq!(re.conditionals, fresh.conditionals);
        assert!(re.solve().unwrap().iter().all(|v| v.abs() < 1e-12));
    }
}
