//! Variable elimination on the chain.
//!
//! Eliminating keyframe `i` stacks the separator factors `τ` arriving at `i`,
//! its GPS factor and the binary factors toward its separator into `A̅ᵢ`
//! (columns: `xᵢ | separator | rhs`), then runs a partial QR over the `xᵢ`
//! columns. The top rows give the conditional `Rᵢ Δᵢ + T Δₛ = dᵢ`, the
//! remainder is the new `τ` on the separator.
//!
//! Serial mode sweeps `1 → n`. Parallel mode eliminates `(i, n+1−i)` pairs
//! from both ends until the two frontiers are adjacent; the last variable
//! eliminated is the root and sits in the middle.

use std::collections::BTreeMap;

use crate::blockla::{back_substitute, partial_qr_profiled, ColumnProfile, Mat, PhaseEntry, PIVOT_TOL};
use crate::error::{Error, Result};
use crate::factors::{KeyframeState, WhitenedBlockRow};
use crate::graph::{ChainFactorGraph, LinearizedChain};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ElimMode {
    Serial,
    Parallel,
}

impl std::str::FromStr for ElimMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "serial" => Ok(ElimMode::Serial),
            "parallel" => Ok(ElimMode::Parallel),
            o => Err(Error::InvalidArgument(format!("unknown mode {o:?}"))),
        }
    }
}

impl std::fmt::Display for ElimMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ElimMode::Serial => "serial",
            ElimMode::Parallel => "parallel",
        })
    }
}

/// How the two lanes of a parallel stage are run. Both give bit-identical
/// results.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Exec {
    Inline,
    #[default]
    Threaded,
}

/// What is kept of the QR remainder as the separator factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TauPolicy {
    /// The whole remainder; its row count grows along the sweep.
    #[default]
    Raw,
    /// Re-triangularized to at most `state_dim` rows.
    Compact,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ElimOptions {
    pub exec: Exec,
    pub tau: TauPolicy,
}

/// Separator factor `τ` on one keyframe.
#[derive(Debug, Clone, PartialEq)]
pub struct TauFactor {
    pub on_index: usize,
    /// Keyframe whose elimination produced it.
    pub from_index: usize,
    pub a_block: Mat,
    /// Already in right-hand-side form (the negated whitened residual).
    pub rhs: Vec<f64>,
}

impl TauFactor {
    pub fn rows(&self) -> usize {
        self.a_block.nrows()
    }
}

/// `p(xᵢ | x_parent)`: `Rᵢ Δᵢ + T Δ_parent = dᵢ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainConditional {
    pub index: usize,
    pub r_block: Mat,
    pub t_block: Option<Mat>,
    pub d: Vec<f64>,
    pub parent: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EliminationStep {
    pub stage: usize,
    pub index: usize,
    pub separator: Option<usize>,
    pub rows: usize,
    /// Value columns of `A̅`, rhs excluded.
    pub cols: usize,
    pub phase_log: Vec<PhaseEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainBayesNet {
    /// Sorted by index, contiguous.
    pub conditionals: Vec<ChainConditional>,
    pub root: usize,
    pub mode: ElimMode,
    pub trace: Vec<EliminationStep>,
    /// Keyed by `(eliminated, separator)`.
    pub taus: BTreeMap<(usize, usize), TauFactor>,
}

impl ChainBayesNet {
    pub fn first_index(&self) -> usize {
        self.conditionals.first().map_or(1, |c| c.index)
    }

    pub fn conditional(&self, index: usize) -> Option<&ChainConditional> {
        let first = self.first_index();
        index.checked_sub(first).and_then(|k| self.conditionals.get(k))
    }

    /// Keyframes eliminated at each stage, in trace order.
    pub fn stages(&self) -> Vec<Vec<usize>> {
        stages_of(&self.trace)
    }

    pub fn max_abar_rows(&self) -> usize {
        self.trace.iter().map(|s| s.rows).max().unwrap_or(0)
    }

    /// Stacks the conditionals into the block upper-triangular factor of the
    /// window, columns in keyframe order, plus its rhs.
    pub fn stacked_r(&self) -> (Mat, Vec<f64>) {
        let first = self.first_index();
        let k = self.conditionals.len();
        let d = self.conditionals.first().map_or(0, |c| c.r_block.nrows());
        let mut r = Mat::zeros(k * d, k * d);
        let mut rhs = Vec::with_capacity(k * d);
        for c in &self.conditionals {
            let row = (c.index - first) * d;
            r.set_block(row, row, &c.r_block);
            if let (Some(t), Some(p)) = (&c.t_block, c.parent) {
                r.set_block(row, (p - first) * d, t);
            }
            rhs.extend_from_slice(&c.d);
        }
        (r, rhs)
    }
}

pub fn stages_of(trace: &[EliminationStep]) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = Vec::new();
    let mut last = None;
    for s in trace {
        if last != Some(s.stage) {
            out.push(Vec::new());
            last = Some(s.stage);
        }
        out.last_mut().expect("pushed").push(s.index);
    }
    out
}

/// One elimination: keyframe and its separator (none for the root).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Job {
    pub index: usize,
    pub separator: Option<usize>,
}

/// Elimination order over keyframes `lo..=hi`, grouped into stages whose jobs
/// are independent.
pub fn schedule(lo: usize, hi: usize, mode: ElimMode) -> Vec<Vec<Job>> {
    let mut stages = Vec::new();
    if lo > hi {
        return stages;
    }
    match mode {
        ElimMode::Serial => {
            for i in lo..hi {
                stages.push(vec![Job {
                    index: i,
                    separator: Some(i + 1),
                }]);
            }
            stages.push(vec![Job {
                index: hi,
                separator: None,
            }]);
        }
        ElimMode::Parallel => {
            let (mut l, mut r) = (lo, hi);
            while r - l > 1 {
                stages.push(vec![
                    Job {
                        index: l,
                        separator: Some(l + 1),
                    },
                    Job {
                        index: r,
                        separator: Some(r - 1),
                    },
                ]);
                l += 1;
                r -= 1;
            }
            if l == r {
                stages.push(vec![Job {
                    index: l,
                    separator: None,
                }]);
            } else {
                stages.push(vec![Job {
                    index: l,
                    separator: Some(r),
                }]);
                stages.push(vec![Job {
                    index: r,
                    separator: None,
                }]);
            }
        }
    }
    stages
}

/// Stacks `A̅` for eliminating `index` toward `separator`. Rows: `τ`s, GPS,
/// binary factors. Also returns the structural row range of every column.
pub fn build_abar(
    index: usize,
    separator: Option<usize>,
    taus: &[&TauFactor],
    unary: Option<&WhitenedBlockRow>,
    binaries: &[&WhitenedBlockRow],
    d: usize,
) -> Result<(Mat, ColumnProfile)> {
    if let Some(s) = separator {
        if s + 1 != index && index + 1 != s {
            return Err(Error::ChainViolation(format!("separator {s} is not a neighbour of {index}")));
        }
    }
    for t in taus {
        if t.on_index != index || t.a_block.ncols() != d {
            return Err(Error::ChainViolation(format!(
                "tau on {} offered to keyframe {index}",
                t.on_index
            )));
        }
    }
    if let Some(u) = unary {
        if u.blocks.len() != 1 || u.blocks[0].0 != index {
            return Err(Error::ChainViolation(format!("unary factor does not sit on {index}")));
        }
    }
    for b in binaries {
        let ok = b.block(index).is_some()
            && b.blocks.len() == 2
            && b.blocks.iter().all(|(i, _)| *i == index || Some(*i) == separator);
        if !ok {
            let touched: Vec<usize> = b.blocks.iter().map(|(i, _)| *i).collect();
            return Err(Error::ChainViolation(format!(
                "factor on {touched:?} cannot be eliminated at {index} with separator {separator:?}"
            )));
        }
    }

    let tau_rows: usize = taus.iter().map(|t| t.rows()).sum();
    let unary_rows = unary.map_or(0, |u| u.rows());
    let bin_rows: usize = binaries.iter().map(|b| b.rows()).sum();
    let m = tau_rows + unary_rows + bin_rows;
    if m == 0 {
        return Err(Error::UnderConstrained { index });
    }
    let sep_cols = if separator.is_some() { d } else { 0 };
    let cols = d + sep_cols + 1;
    let rhs_col = cols - 1;
    let mut a = Mat::zeros(m, cols);
    let mut r0 = 0;
    for t in taus {
        a.set_block(r0, 0, &t.a_block);
        for (k, v) in t.rhs.iter().enumerate() {
            a[(r0 + k, rhs_col)] = *v;
        }
        r0 += t.rows();
    }
    let mut rows: Vec<&WhitenedBlockRow> = Vec::with_capacity(1 + binaries.len());
    rows.extend(unary);
    rows.extend(binaries.iter().copied());
    for w in rows {
        for (i, block) in &w.blocks {
            let c0 = if *i == index { 0 } else { d };
            a.set_block(r0, c0, block);
        }
        for (k, v) in w.residual.iter().enumerate() {
            a[(r0 + k, rhs_col)] = -v;
        }
        r0 += w.rows();
    }
    let mut profile = ColumnProfile::dense(m, cols);
    for c in d..(d + sep_cols) {
        profile.lo[c] = tau_rows + unary_rows;
    }
    Ok((a, profile))
}

struct StepOutput {
    conditional: ChainConditional,
    tau: Option<TauFactor>,
    step: EliminationStep,
}

fn eliminate_one(
    job: Job,
    stage: usize,
    taus: &[&TauFactor],
    unary: Option<&WhitenedBlockRow>,
    binaries: &[&WhitenedBlockRow],
    d: usize,
    policy: TauPolicy,
) -> Result<StepOutput> {
    let index = job.index;
    let (abar, profile) = build_abar(index, job.separator, taus, unary, binaries, d)?;
    let m = abar.nrows();
    let value_cols = abar.ncols() - 1;
    if m < d {
        return Err(Error::UnderConstrained { index });
    }
    let scale = (0..value_cols)
        .map(|c| abar.col(c).iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    let qr = partial_qr_profiled(&abar, d, &profile)?;
    for i in 0..d {
        let rii = qr.r_top[(i, i)];
        if !(rii.abs() > PIVOT_TOL * scale) {
            return Err(Error::UnderConstrained { index });
        }
    }
    let r_block = qr.r_top.block(0, d, 0, d);
    let t_block = job.separator.map(|_| qr.r_top.block(0, d, d, 2 * d));
    let dvec = qr.r_top.col(value_cols).to_vec();
    let tau = match job.separator {
        Some(s) if qr.tail.nrows() > 0 => {
            let mut tail = qr.tail;
            if policy == TauPolicy::Compact && tail.nrows() > d {
                tail = crate::blockla::partial_qr(&tail, d)?.r_top;
            }
            Some(TauFactor {
                on_index: s,
                from_index: index,
                a_block: tail.block(0, tail.nrows(), 0, d),
                rhs: tail.col(d).to_vec(),
            })
        }
        _ => None,
    };
    Ok(StepOutput {
        conditional: ChainConditional {
            index,
            r_block,
            t_block,
            d: dvec,
            parent: job.separator,
        },
        tau,
        step: EliminationStep {
            stage,
            index,
            separator: job.separator,
            rows: m,
            cols: value_cols,
            phase_log: qr.phase_log,
        },
    })
}

/// Eliminates the sub-chain `lo..=hi` of a linearization. Factors outside the
/// window are ignored; `tau_in` summarizes everything left of `lo`.
pub fn eliminate_window(
    lin: &LinearizedChain,
    lo: usize,
    hi: usize,
    tau_in: Option<&TauFactor>,
    mode: ElimMode,
    opts: ElimOptions,
) -> Result<ChainBayesNet> {
    if lo < lin.first || lo > hi || hi > lin.last() {
        return Err(Error::InvalidArgument(format!(
            "window {lo}..={hi} outside the linearized range {}..={}",
            lin.first,
            lin.last()
        )));
    }
    let d = lin.layout.dim();
    let mut pending: BTreeMap<usize, Vec<TauFactor>> = BTreeMap::new();
    if let Some(t) = tau_in {
        if t.on_index != lo {
            return Err(Error::ChainViolation(format!("incoming tau sits on {} not {lo}", t.on_index)));
        }
        pending.entry(lo).or_default().push(t.clone());
    }
    let mut conditionals: BTreeMap<usize, ChainConditional> = BTreeMap::new();
    let mut trace = Vec::with_capacity(hi - lo + 1);
    let mut taus = BTreeMap::new();
    let mut root = hi;

    for (stage_no, stage) in schedule(lo, hi, mode).into_iter().enumerate() {
        let mut inputs = Vec::with_capacity(stage.len());
        for job in &stage {
            let mut ts = pending.remove(&job.index).unwrap_or_default();
            ts.sort_by_key(|t| t.from_index);
            let bins: Vec<&WhitenedBlockRow> = match job.separator {
                Some(s) => lin.binary(job.index.min(s)).iter().collect(),
                None => Vec::new(),
            };
            inputs.push((*job, ts, lin.unary(job.index), bins));
        }
        let run = |(job, ts, unary, bins): &(Job, Vec<TauFactor>, Option<&WhitenedBlockRow>, Vec<&WhitenedBlockRow>)| {
            let refs: Vec<&TauFactor> = ts.iter().collect();
            eliminate_one(*job, stage_no + 1, &refs, *unary, bins, d, opts.tau)
        };
        let outputs: Vec<Result<StepOutput>> = if inputs.len() == 2 && opts.exec == Exec::Threaded {
            std::thread::scope(|s| {
                let right = s.spawn(|| run(&inputs[1]));
                let left = run(&inputs[0]);
                vec![left, right.join().expect("elimination lane panicked")]
            })
        } else {
            inputs.iter().map(run).collect()
        };
        for out in outputs {
            let out = out?;
            if let Some(t) = out.tau {
                pending.entry(t.on_index).or_default().push(t.clone());
                taus.insert((t.from_index, t.on_index), t);
            }
            if out.conditional.parent.is_none() {
                root = out.conditional.index;
            }
            conditionals.insert(out.conditional.index, out.conditional);
            trace.push(out.step);
        }
    }
    Ok(ChainBayesNet {
        conditionals: conditionals.into_values().collect(),
        root,
        mode,
        trace,
        taus,
    })
}

pub fn eliminate_linearized(lin: &LinearizedChain, mode: ElimMode, opts: ElimOptions) -> Result<ChainBayesNet> {
    eliminate_window(lin, lin.first, lin.last(), None, mode, opts)
}

pub fn eliminate(
    graph: &ChainFactorGraph,
    states: &[KeyframeState],
    mode: ElimMode,
    opts: ElimOptions,
) -> Result<ChainBayesNet> {
    graph.check()?;
    let lin = graph.linearize(states)?;
    eliminate_linearized(&lin, mode, opts)
}

pub fn eliminate_serial(graph: &ChainFactorGraph, states: &[KeyframeState]) -> Result<ChainBayesNet> {
    eliminate(graph, states, ElimMode::Serial, ElimOptions::default())
}

pub fn eliminate_parallel(graph: &ChainFactorGraph, states: &[KeyframeState]) -> Result<ChainBayesNet> {
    eliminate(graph, states, ElimMode::Parallel, ElimOptions::default())
}

fn solve_block(c: &ChainConditional, parent_delta: Option<&[f64]>) -> Result<Vec<f64>> {
    let mut rhs = c.d.clone();
    if let (Some(t), Some(p)) = (&c.t_block, parent_delta) {
        let tp = t.mul_vec(p);
        for (r, v) in rhs.iter_mut().zip(tp) {
            *r -= v;
        }
    }
    back_substitute(&c.r_block, &rhs).map_err(|e| match e {
        Error::Singular { .. } => Error::Singular { index: c.index },
        e => e,
    })
}

/// Back substitution around an arbitrary root of a contiguous chain of
/// conditionals. Returns the stacked increments in keyframe order.
pub fn solve_conditionals(conds: &[ChainConditional], root: usize, exec: Exec) -> Result<Vec<f64>> {
    let Some(first) = conds.first().map(|c| c.index) else {
        return Ok(Vec::new());
    };
    let last = first + conds.len() - 1;
    if root < first || root > last {
        return Err(Error::InvalidArgument(format!("root {root} outside {first}..={last}")));
    }
    for (k, c) in conds.iter().enumerate() {
        let i = first + k;
        let want = if i < root {
            Some(i + 1)
        } else if i > root {
            Some(i - 1)
        } else {
            None
        };
        if c.index != i || c.parent != want || c.t_block.is_some() != want.is_some() {
            return Err(Error::ChainViolation(format!("conditional {} does not point toward root {root}", c.index)));
        }
    }
    let at = |i: usize| &conds[i - first];
    let root_delta = solve_block(at(root), None)?;

    let left = || -> Result<Vec<Vec<f64>>> {
        let mut out: Vec<Vec<f64>> = Vec::with_capacity(root - first);
        let mut parent = root_delta.clone();
        for i in (first..root).rev() {
            let delta = solve_block(at(i), Some(&parent))?;
            parent = delta.clone();
            out.push(delta);
        }
        out.reverse();
        Ok(out)
    };
    let right = || -> Result<Vec<Vec<f64>>> {
        let mut out: Vec<Vec<f64>> = Vec::with_capacity(last - root);
        let mut parent = root_delta.clone();
        for i in (root + 1)..=last {
            let delta = solve_block(at(i), Some(&parent))?;
            parent = delta.clone();
            out.push(delta);
        }
        Ok(out)
    };
    let both_sides = root > first && root < last;
    let (l, r) = if both_sides && exec == Exec::Threaded {
        std::thread::scope(|s| {
            let rh = s.spawn(right);
            let l = left();
            (l, rh.join().expect("back-substitution lane panicked"))
        })
    } else {
        (left(), right())
    };
    let mut delta = Vec::with_capacity(conds.len() * root_delta.len());
    for b in l? {
        delta.extend(b);
    }
    delta.extend_from_slice(&root_delta);
    for b in r? {
        delta.extend(b);
    }
    Ok(delta)
}

pub fn back_substitute_serial(net: &ChainBayesNet) -> Result<Vec<f64>> {
    if net.mode != ElimMode::Serial {
        return Err(Error::InvalidArgument("net was not eliminated serially".into()));
    }
    solve_conditionals(&net.conditionals, net.root, Exec::Inline)
}

pub fn back_substitute_parallel(net: &ChainBayesNet, exec: Exec) -> Result<Vec<f64>> {
    if net.mode != ElimMode::Parallel {
        return Err(Error::InvalidArgument("net was not eliminated in parallel".into()));
    }
    solve_conditionals(&net.conditionals, net.root, exec)
}

pub fn solve_net(net: &ChainBayesNet, exec: Exec) -> Result<Vec<f64>> {
    solve_conditionals(&net.conditionals, net.root, exec)
}

pub fn fill_in_count(net: &ChainBayesNet) -> usize {
    net.conditionals.iter().filter(|c| c.t_block.is_some()).count()
}

/// `A̅` dimensions per step, derived from factor presence alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepDims {
    pub stage: usize,
    pub index: usize,
    pub separator: Option<usize>,
    pub rows: usize,
    pub cols: usize,
}

pub fn symbolic_trace(graph: &ChainFactorGraph, mode: ElimMode, policy: TauPolicy) -> Vec<StepDims> {
    let d = graph.layout.dim();
    let n = graph.n;
    let unary_rows = |j: usize| if graph.gps.contains_key(&j) { 2 } else { 0 };
    let binary_rows = |j: usize| {
        graph.between.get(&j).map_or(0, |_| graph.layout.between_dim())
            + graph.motion.get(&j).map_or(0, |_| graph.layout.motion_dim())
    };
    let mut pending: BTreeMap<usize, usize> = BTreeMap::new();
    let mut out = Vec::with_capacity(n);
    for (stage_no, stage) in schedule(1, n, mode).into_iter().enumerate() {
        let mut produced = Vec::new();
        for job in stage {
            let tau = pending.remove(&job.index).unwrap_or(0);
            let bin = job.separator.map_or(0, |s| binary_rows(job.index.min(s)));
            let rows = tau + unary_rows(job.index) + bin;
            let cols = if job.separator.is_some() { 2 * d } else { d };
            out.push(StepDims {
                stage: stage_no + 1,
                index: job.index,
                separator: job.separator,
                rows,
                cols,
            });
            if let Some(s) = job.separator {
                let rest = rows.saturating_sub(d);
                let kept = match policy {
                    TauPolicy::Raw => rest,
                    TauPolicy::Compact => rest.min(d),
                };
                if kept > 0 {
                    produced.push((s, kept));
                }
            }
        }
        for (s, k) in produced {
            *pending.entry(s).or_insert(0) += k;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blockla::normal_solve_oracle;
    use crate::factors::{BetweenFactor, Factor, GpsFactor, StateLayout};

    fn toy() -> (ChainFactorGraph, Vec<KeyframeState>) {
        (ChainFactorGraph::toy_example(), ChainFactorGraph::toy_truth())
    }

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        assert_eq!(a.len(), b.len());
        a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
    }

    fn perturbed_toy() -> (ChainFactorGraph, Vec<KeyframeState>) {
        let (g, _) = toy();
        let states = vec![
            KeyframeState::at(0.3, -0.2),
            KeyframeState::at(1.1, 0.4),
            KeyframeState::at(1.7, 0.1),
            KeyframeState::at(3.2, -0.3),
        ];
        (g, states)
    }

    #[test]
    fn schedules() {
        let jobs = |s: Vec<Vec<Job>>| -> Vec<Vec<usize>> {
            s.into_iter().map(|st| st.into_iter().map(|j| j.index).collect()).collect()
        };
        assert_eq!(jobs(schedule(1, 4, ElimMode::Parallel)), vec![vec![1, 4], vec![2], vec![3]]);
        assert_eq!(jobs(schedule(1, 4, ElimMode::Serial)), vec![vec![1], vec![2], vec![3], vec![4]]);
        assert_eq!(jobs(schedule(1, 5, ElimMode::Parallel)), vec![vec![1, 5], vec![2, 4], vec![3]]);
        assert_eq!(jobs(schedule(1, 1, ElimMode::Parallel)), vec![vec![1]]);
        assert_eq!(jobs(schedule(1, 2, ElimMode::Parallel)), vec![vec![1], vec![2]]);
        for n in 2..=32 {
            assert_eq!(schedule(1, n, ElimMode::Parallel).len(), (n + 2) / 2, "n={n}");
        }
    }

    #[test]
    fn toy_serial_matches_hand_values() {
        let (g, s) = perturbed_toy();
        let net = eliminate_serial(&g, &s).unwrap();
        assert_eq!(net.root, 4);
        assert_eq!(fill_in_count(&net), 3);
        let s2 = 2f64.sqrt();
        let c1 = net.conditional(1).unwrap();
        let t1 = c1.t_block.as_ref().unwrap();
        for i in 0..2 {
            assert!((c1.r_block[(i, i)] - s2).abs() < 1e-14);
            assert!((t1[(i, i)] + 1.0 / s2).abs() < 1e-14);
        }
        let c2 = net.conditional(2).unwrap();
        for i in 0..2 {
            assert!((c2.r_block[(i, i)] - 2.5f64.sqrt()).abs() < 1e-14);
        }
        assert_eq!(net.conditional(3).unwrap().parent, Some(4));
        assert_eq!(net.conditional(4).unwrap().parent, None);
    }

    #[test]
    fn toy_parallel_structure() {
        let (g, s) = perturbed_toy();
        let net = eliminate_parallel(&g, &s).unwrap();
        assert_eq!(net.stages(), vec![vec![1, 4], vec![2], vec![3]]);
        assert_eq!(net.root, 3);
        assert_eq!(fill_in_count(&net), 3);
        let parents: Vec<Option<usize>> = net.conditionals.iter().map(|c| c.parent).collect();
        assert_eq!(parents, vec![Some(2), Some(3), None, Some(3)]);
    }

    #[test]
    fn toy_truth_gives_zero_step() {
        let (g, s) = toy();
        let net = eliminate_serial(&g, &s).unwrap();
        let delta = back_substitute_serial(&net).unwrap();
        assert!(delta.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn modes_and_oracle_agree_on_toy() {
        let (g, s) = perturbed_toy();
        let ser = back_substitute_serial(&eliminate_serial(&g, &s).unwrap()).unwrap();
        let par = back_substitute_parallel(&eliminate_parallel(&g, &s).unwrap(), Exec::Threaded).unwrap();
        let (a, eps) = g.assemble(&s).unwrap();
        let neg: Vec<f64> = eps.iter().map(|e| -e).collect();
        let oracle = normal_solve_oracle(&a, &neg).unwrap();
        assert!(max_abs_diff(&ser, &par) < 1e-12);
        assert!(max_abs_diff(&ser, &oracle) < 1e-12);
    }

    #[test]
    fn hand_built_two_node_net() {
        let net = ChainBayesNet {
            conditionals: vec![
                ChainConditional {
                    index: 1,
                    r_block: Mat::identity(2),
                    t_block: Some(Mat::identity(2).neg()),
                    d: vec![1.0, 2.0],
                    parent: Some(2),
                },
                ChainConditional {
                    index: 2,
                    r_block: Mat::identity(2),
                    t_block: None,
                    d: vec![3.0, 4.0],
                    parent: None,
                },
            ],
            root: 2,
            mode: ElimMode::Serial,
            trace: Vec::new(),
            taus: BTreeMap::new(),
        };
        assert_eq!(back_substitute_serial(&net).unwrap(), vec![4.0, 6.0, 3.0, 4.0]);
        assert!(back_substitute_parallel(&net, Exec::Inline).is_err());
    }

    #[test]
    fn single_gps_is_root_only() {
        let mut g = ChainFactorGraph::new(StateLayout::LINEAR, 1);
        g.add(Factor::Gps(GpsFactor {
            index: 1,
            z: [1.0, 2.0],
            sigma: Mat::identity(2),
        }));
        let s = [KeyframeState::default()];
        let ser = eliminate_serial(&g, &s).unwrap();
        let par = eliminate_parallel(&g, &s).unwrap();
        assert_eq!(ser.conditionals, par.conditionals);
        assert_eq!(fill_in_count(&ser), 0);
        assert_eq!(ser.conditionals[0].r_block, Mat::identity(2));
        assert_eq!(back_substitute_serial(&ser).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn build_abar_rejects_non_neighbour() {
        let (g, s) = toy();
        let lin = g.linearize(&s).unwrap();
        let b2 = &lin.binary(2)[0];
        let err = build_abar(1, Some(2), &[], None, &[b2], 2).unwrap_err();
        assert!(matches!(err, Error::ChainViolation(_)));
        assert!(matches!(build_abar(1, Some(3), &[], None, &[], 2), Err(Error::ChainViolation(_))));
    }

    #[test]
    fn build_abar_toy_first_step() {
        let (g, s) = toy();
        let lin = g.linearize(&s).unwrap();
        let (a, profile) =
            build_abar(1, Some(2), &[], lin.unary(1), &[&lin.binary(1)[0]], 2).unwrap();
        let expect = Mat::from_rows(&[
            &[-1.0, 0.0, 0.0, 0.0, 0.0],
            &[0.0, -1.0, 0.0, 0.0, 0.0],
            &[1.0, 0.0, -1.0, 0.0, 0.0],
            &[0.0, 1.0, 0.0, -1.0, 0.0],
        ]);
        assert_eq!(a, expect);
        assert_eq!(profile.lo, vec![0, 0, 2, 2, 0]);
        let lone = build_abar(1, Some(2), &[], None, &[&lin.binary(1)[0]], 2).unwrap().0;
        assert_eq!(lone.nrows(), 2);
    }

    #[test]
    fn under_constrained_is_reported() {
        let mut g = ChainFactorGraph::new(StateLayout::LINEAR, 3);
        g.add(Factor::Gps(GpsFactor {
            index: 3,
            z: [0.0, 0.0],
            sigma: Mat::identity(2),
        }));
        for j in 1..3 {
            g.add(Factor::Between(BetweenFactor {
                index: j,
                z: vec![1.0, 0.0],
                sigma: Mat::identity(2),
            }));
        }
        let s = vec![KeyframeState::default(); 3];
        assert!(eliminate_serial(&g, &s).is_ok());
        // Heading never observed on a lone keyframe.
        let mut g1 = ChainFactorGraph::new(StateLayout::POSE, 1);
        g1.add(Factor::Gps(GpsFactor {
            index: 1,
            z: [0.0, 0.0],
            sigma: Mat::identity(2),
        }));
        let s1 = vec![KeyframeState::default()];
        assert_eq!(eliminate_serial(&g1, &s1).unwrap_err(), Error::UnderConstrained { index: 1 });
    }

    #[test]
    fn threaded_and_inline_are_bit_identical() {
        let (g, s) = perturbed_toy();
        let lin = g.linearize(&s).unwrap();
        let a = eliminate_linearized(
            &lin,
            ElimMode::Parallel,
            ElimOptions {
                exec: Exec::Inline,
                tau: TauPolicy::Raw,
            },
        )
        .unwrap();
        let b = eliminate_linearized(&lin, ElimMode::Parallel, ElimOptions::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(solve_net(&a, Exec::Inline).unwrap(), solve_net(&b, Exec::Threaded).unwrap());
    }

    #[test]
    fn symbolic_matches_numeric_on_toy() {
        let (g, s) = perturbed_toy();
        for mode in [ElimMode::Serial, ElimMode::Parallel] {
            for tau in [TauPolicy::Raw, TauPolicy::Compact] {
                let net = eliminate(&g, &s, mode, ElimOptions { exec: Exec::Inline, tau }).unwrap();
                let sym = symbolic_trace(&g, mode, tau);
                let num: Vec<(usize, usize, usize)> = net.trace.iter().map(|t| (t.index, t.rows, t.cols)).collect();
                let sy: Vec<(usize, usize, usize)> = sym.iter().map(|t| (t.index, t.rows, t.cols)).collect();
                assert_eq!(num, sy, "{mode} {tau:?}");
            }
        }
    }

    #[test]
    fn toy_serial_rows_grow_with_raw_tau() {
        let (g, s) = perturbed_toy();
        let net = eliminate_serial(&g, &s).unwrap();
        let rows: Vec<usize> = net.trace.iter().map(|t| t.rows).collect();
        assert_eq!(rows, vec![4, 6, 8, 8]);
        let par = eliminate_parallel(&g, &s).unwrap();
        let rows: Vec<usize> = par.trace.iter().map(|t| t.rows).collect();
        assert_eq!(rows, vec![4, 4, 6, 8]);
    }
}
