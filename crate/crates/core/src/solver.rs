//! Gauss-Newton outer loop.

use std::fmt::Write as _;

use crate::eliminate::{eliminate_linearized, solve_net, ElimMode, ElimOptions};
use crate::error::{Error, Result};
use crate::factors::{wrap_angle, KeyframeState, StateLayout};
use crate::graph::ChainFactorGraph;

const MAX_HALVINGS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveConfig {
    pub mode: ElimMode,
    pub max_iterations: usize,
    /// Infinity norm of `Δ` below which the loop stops.
    pub delta_tol: f64,
    pub cost_decrease_required: bool,
    pub elim: ElimOptions,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self {
            mode: ElimMode::Serial,
            max_iterations: 50,
            delta_tol: 1e-8,
            cost_decrease_required: true,
            elim: ElimOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    /// Accepted steps.
    pub iterations: usize,
    pub final_cost: f64,
    /// Initial cost followed by the cost after each accepted step.
    pub cost_history: Vec<f64>,
    pub converged: bool,
    /// `‖Δ‖∞` of every computed step, including the final tiny one.
    pub delta_norm_history: Vec<f64>,
}

impl SolveReport {
    /// One line per computed step: `iteration cost delta_inf`.
    pub fn to_text(&self) -> String {
        let mut s = String::from("# iteration cost delta_inf\n");
        for (i, dn) in self.delta_norm_history.iter().enumerate() {
            let cost = self.cost_history.get(i).copied().unwrap_or(self.final_cost);
            let _ = writeln!(s, "{} {:.17e} {:.17e}", i + 1, cost, dn);
        }
        let _ = writeln!(
            s,
            "# iterations={} final_cost={:.17e} converged={}",
            self.iterations, self.final_cost, self.converged
        );
        s
    }
}

/// `X + Δ` with headings wrapped into (−π, π].
pub fn retract(layout: StateLayout, states: &[KeyframeState], delta: &[f64]) -> Result<Vec<KeyframeState>> {
    let d = layout.dim();
    if delta.len() != d * states.len() {
        return Err(Error::InvalidArgument(format!(
            "increment of length {} for {} keyframes of dimension {d}",
            delta.len(),
            states.len()
        )));
    }
    states
        .iter()
        .zip(delta.chunks(d))
        .map(|(s, dx)| {
            let v: Vec<f64> = s.to_vec(layout).iter().zip(dx).map(|(a, b)| a + b).collect();
            let mut out = KeyframeState::from_slice(layout, &v)?;
            if layout.has_heading() {
                out.theta = wrap_angle(out.theta);
            }
            Ok(out)
        })
        .collect()
}

pub fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// One linearize-eliminate-solve pass at `states`.
pub fn gauss_newton_step(graph: &ChainFactorGraph, states: &[KeyframeState], cfg: &SolveConfig) -> Result<Vec<f64>> {
    let lin = graph.linearize(states)?;
    let net = eliminate_linearized(&lin, cfg.mode, cfg.elim)?;
    solve_net(&net, cfg.elim.exec)
}

pub fn gauss_newton(
    graph: &ChainFactorGraph,
    x0: &[KeyframeState],
    cfg: &SolveConfig,
) -> Result<(Vec<KeyframeState>, SolveReport)> {
    if cfg.max_iterations == 0 || !(cfg.delta_tol > 0.0) {
        return Err(Error::InvalidArgument("max_iterations ≥ 1 and delta_tol > 0 required".into()));
    }
    if graph.n > 0 && graph.gps.is_empty() {
        // Nothing anchors the chain; elimination would end on a singular root.
        return Err(Error::UnderConstrained { index: graph.n });
    }
    graph.check()?;
    if x0.len() != graph.n {
        return Err(Error::InvalidArgument(format!("{} initial states for {} keyframes", x0.len(), graph.n)));
    }
    let layout = graph.layout;
    let mut x: Vec<KeyframeState> = x0.iter().map(|s| s.restricted(layout)).collect();
    let mut cost = graph.cost(&x)?;
    if !cost.is_finite() {
        return Err(Error::Divergence(cost));
    }
    let mut report = SolveReport {
        iterations: 0,
        final_cost: cost,
        cost_history: vec![cost],
        converged: false,
        delta_norm_history: Vec::new(),
    };
    let wrap = |iteration: usize| move |e: Error| Error::AtIteration {
        iteration,
        source: Box::new(e),
    };

    for it in 1..=cfg.max_iterations {
        let delta = gauss_newton_step(graph, &x, cfg).map_err(wrap(it))?;
        let dn = inf_norm(&delta);
        if !dn.is_finite() {
            return Err(wrap(it)(Error::Divergence(dn)));
        }
        report.delta_norm_history.push(dn);
        if dn < cfg.delta_tol {
            report.converged = true;
            break;
        }
        let mut alpha = 1.0;
        let mut accepted = None;
        let mut full_cost = f64::NAN;
        for h in 0..=MAX_HALVINGS {
            let step: Vec<f64> = delta.iter().map(|v| v * alpha).collect();
            let cand = retract(layout, &x, &step)?;
            let c = graph.cost(&cand).map_err(wrap(it))?;
            if h == 0 {
                full_cost = c;
            }
            if !cfg.cost_decrease_required || c <= cost {
                if !c.is_finite() {
                    return Err(wrap(it)(Error::Divergence(c)));
                }
                accepted = Some((cand, c));
                break;
            }
            alpha *= 0.5;
        }
        match accepted {
            Some((cand, c)) => {
                x = cand;
                cost = c;
                report.iterations += 1;
                report.cost_history.push(c);
            }
            None => {
                if !full_cost.is_finite() && !cost.is_finite() {
                    return Err(wrap(it)(Error::Divergence(full_cost)));
                }
                // No decrease along Δ: at the optimum up to rounding, or stuck.
                report.converged = full_cost - cost <= 1e-10 * (1.0 + cost);
                break;
            }
        }
    }
    report.final_cost = cost;
    Ok((x, report))
}
