//! Analytic cycle model of a pipelined partial-QR block with one Evaluate
//! unit and `n_u` time-multiplexed Update units.
//!
//! Column `j` (1-based) of a partial QR on an `m × n` system touches
//! `m_j = m − j + 1` rows. Evaluate costs `e·m_j`, Update costs
//! `u·m_j·(n − j + 1)/n_u` (trailing columns including the rhs), and the
//! Evaluate of column `j+1` overlaps the Update of column `j`.

use std::fmt::Write as _;

use crate::eliminate::{symbolic_trace, ElimMode, StepDims, TauPolicy};
use crate::error::{Error, Result};
use crate::graph::ChainFactorGraph;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineConfig {
    pub n_u: usize,
    pub eval_cycles_per_row: f64,
    pub update_cycles_per_entry: f64,
    /// Two decomposition lanes in parallel mode.
    pub dual_lane: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            n_u: 1,
            eval_cycles_per_row: 1.0,
            update_cycles_per_entry: 1.0,
            dual_lane: true,
        }
    }
}

impl PipelineConfig {
    fn check(&self) -> Result<()> {
        if self.n_u == 0 || !(self.eval_cycles_per_row > 0.0) || !(self.update_cycles_per_entry > 0.0) {
            return Err(Error::InvalidArgument("pipeline costs and n_u must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QrCycles {
    pub total: f64,
    /// Sum of Update phase cycles, for utilization.
    pub update_busy: f64,
}

pub fn qr_cycles_detail(m: usize, n: usize, k: usize, cfg: &PipelineConfig) -> Result<QrCycles> {
    cfg.check()?;
    if k == 0 || k > m.min(n) {
        return Err(Error::InvalidArgument(format!("cannot eliminate {k} columns of a {m}x{n} system")));
    }
    let e = |j: usize| cfg.eval_cycles_per_row * (m - j + 1) as f64;
    let u = |j: usize| cfg.update_cycles_per_entry * ((m - j + 1) * (n - j + 1)) as f64 / cfg.n_u as f64;
    let mut total = e(1);
    for j in 1..k {
        total += u(j).max(e(j + 1));
    }
    total += u(k);
    Ok(QrCycles {
        total,
        update_busy: (1..=k).map(u).sum(),
    })
}

pub fn qr_cycles(m: usize, n: usize, k: usize, cfg: &PipelineConfig) -> Result<f64> {
    Ok(qr_cycles_detail(m, n, k, cfg)?.total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LaneCycles {
    pub index: usize,
    pub rows: usize,
    pub cols: usize,
    pub cycles: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepCycles {
    pub stage: usize,
    pub lanes: Vec<LaneCycles>,
    pub cycles: f64,
}

impl StepCycles {
    pub fn indices(&self) -> Vec<usize> {
        self.lanes.iter().map(|l| l.index).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CycleReport {
    pub mode: ElimMode,
    /// Decomposition plus back substitution.
    pub total_cycles: f64,
    pub qr_cycles: f64,
    pub backsub_cycles: f64,
    pub per_step: Vec<StepCycles>,
    pub utilization: f64,
    pub max_abar_rows: usize,
}

fn backsub_entries(d: usize, has_parent: bool) -> usize {
    d * (d + 1) / 2 + if has_parent { d * d } else { 0 }
}

/// Evaluates the model on the elimination schedule of `graph`.
pub fn elimination_cycles(
    graph: &ChainFactorGraph,
    mode: ElimMode,
    cfg: &PipelineConfig,
    policy: TauPolicy,
) -> Result<CycleReport> {
    cfg.check()?;
    graph.check()?;
    let d = graph.layout.dim();
    let trace = symbolic_trace(graph, mode, policy);
    let lanes = if mode == ElimMode::Parallel && cfg.dual_lane { 2 } else { 1 };

    let mut per_step: Vec<StepCycles> = Vec::new();
    let mut update_busy = 0.0;
    for dims in &trace {
        let StepDims { stage, index, rows, cols, .. } = *dims;
        let q = qr_cycles_detail(rows, cols, d, cfg)?;
        update_busy += q.update_busy;
        let lane = LaneCycles {
            index,
            rows,
            cols,
            cycles: q.total,
        };
        match per_step.last_mut() {
            Some(s) if s.stage == stage => s.lanes.push(lane),
            _ => per_step.push(StepCycles {
                stage,
                lanes: vec![lane],
                cycles: 0.0,
            }),
        }
    }
    for s in &mut per_step {
        s.cycles = if lanes == 2 {
            s.lanes.iter().map(|l| l.cycles).fold(0.0, f64::max)
        } else {
            s.lanes.iter().map(|l| l.cycles).sum()
        };
    }
    let qr_total: f64 = per_step.iter().map(|s| s.cycles).sum();

    let root = trace.iter().find(|t| t.separator.is_none()).map_or(graph.n, |t| t.index);
    let cost = |has_parent| cfg.update_cycles_per_entry * backsub_entries(d, has_parent) as f64;
    let left = (1..root).map(|_| cost(true)).sum::<f64>();
    let right = ((root + 1)..=graph.n).map(|_| cost(true)).sum::<f64>();
    let backsub = cost(false) + if lanes == 2 { left.max(right) } else { left + right };

    let total = qr_total + backsub;
    Ok(CycleReport {
        mode,
        total_cycles: total,
        qr_cycles: qr_total,
        backsub_cycles: backsub,
        per_step,
        utilization: if total > 0.0 { update_busy / (lanes as f64 * total) } else { 0.0 },
        max_abar_rows: trace.iter().map(|t| t.rows).max().unwrap_or(0),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub mode: ElimMode,
    pub n_u: usize,
    pub total_cycles: f64,
    pub max_abar_rows: usize,
    pub utilization: f64,
}

/// Both modes for every `n_u` in the grid.
pub fn sweep(
    grid: &[usize],
    graph: &ChainFactorGraph,
    base: &PipelineConfig,
    policy: TauPolicy,
) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty n_u grid".into()));
    }
    let mut out = Vec::with_capacity(2 * grid.len());
    for mode in [ElimMode::Serial, ElimMode::Parallel] {
        for &n_u in grid {
            let r = elimination_cycles(graph, mode, &PipelineConfig { n_u, ..*base }, policy)?;
            out.push(SweepRow {
                mode,
                n_u,
                total_cycles: r.total_cycles,
                max_abar_rows: r.max_abar_rows,
                utilization: r.utilization,
            });
        }
    }
    Ok(out)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("mode,n_u,total_cycles,max_abar_rows,utilization\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{:.6}", r.mode, r.n_u, r.total_cycles, r.max_abar_rows, r.utilization);
    }
    s
}
