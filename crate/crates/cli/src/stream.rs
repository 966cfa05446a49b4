//! Feeds a measurement file through the incremental smoother one keyframe at
//! a time.

use chainfg::io::{MeasurementSet, Record};
use chainfg::solver::inf_norm;
use chainfg::{
    gauss_newton, ChainBayesTree, ChainFactorGraph, Error, Factor, GpsFactor, KeyframeState, Result, SolveConfig,
    StateLayout,
};

pub struct StreamOutcome {
    pub states: Vec<KeyframeState>,
    /// `(keyframe, cost of the current estimate)` after every keyframe.
    pub cost_log: Vec<(usize, f64)>,
    pub converged: bool,
}

/// Records must arrive ordered by the newest keyframe they touch.
pub fn check_order(set: &MeasurementSet) -> Result<()> {
    let mut last = 0;
    for r in &set.records {
        let k = r.key();
        if k < last {
            return Err(Error::Parse {
                line: r.line,
                reason: format!("out of order: keyframe {k} after keyframe {last}"),
            });
        }
        last = k;
    }
    Ok(())
}

/// Odometry prediction of keyframe `j+1` from `j`.
fn predict_next(layout: StateLayout, prev: KeyframeState, binaries: &[Factor]) -> KeyframeState {
    let mut next = prev;
    if let Some(Factor::Between(b)) = binaries.iter().find(|f| matches!(f, Factor::Between(_))) {
        if layout.has_heading() {
            let (s, c) = prev.theta.sin_cos();
            next.x = prev.x + c * b.z[0] - s * b.z[1];
            next.y = prev.y + s * b.z[0] + c * b.z[1];
            next.theta = chainfg::factors::wrap_angle(prev.theta + b.z[2]);
        } else {
            next.x = prev.x + b.z[0];
            next.y = prev.y + b.z[1];
        }
    }
    if let Some(Factor::Motion(m)) = binaries.iter().find(|f| matches!(f, Factor::Motion(_))) {
        if !binaries.iter().any(|f| matches!(f, Factor::Between(_))) {
            next.x = prev.x + prev.vx * m.dt + m.z[0];
            next.y = prev.y + prev.vy * m.dt + m.z[1];
        }
        next.vx = prev.vx + m.z[2];
        next.vy = prev.vy + m.z[3];
        if layout.has_bias() {
            next.bias = prev.bias + m.z[4];
        }
    }
    next
}

fn split(group: &[&Record], k: usize) -> (Option<GpsFactor>, Vec<Factor>) {
    let mut gps = None;
    let mut binaries = Vec::new();
    for r in group {
        match &r.factor {
            Factor::Gps(g) if g.index == k => gps = Some(g.clone()),
            f => binaries.push(f.clone()),
        }
    }
    (gps, binaries)
}

pub fn smooth(set: &MeasurementSet, cfg: &SolveConfig) -> Result<StreamOutcome> {
    check_order(set)?;
    let layout = set.layout;
    let mut pending = ChainFactorGraph::new(layout, 0);
    let mut tree: Option<ChainBayesTree> = None;
    let mut cost_log = Vec::new();
    let mut last_err = None;

    let mut start = 0;
    while start < set.records.len() {
        let k = set.records[start].key();
        let mut end = start;
        while end < set.records.len() && set.records[end].key() == k {
            end += 1;
        }
        let group: Vec<&Record> = set.records[start..end].iter().collect();
        start = end;

        match tree.as_mut() {
            Some(t) if k == t.n() + 1 => {
                let (gps, binaries) = split(&group, k);
                let prev = *t.estimate()?.last().expect("nonempty tree");
                let x_init = predict_next(layout, prev, &binaries);
                t.update(gps, binaries, x_init)?;
            }
            Some(t) => {
                return Err(Error::Parse {
                    line: group[0].line,
                    reason: format!("keyframe {k} does not follow keyframe {}", t.n()),
                });
            }
            None => {
                pending.n = k;
                for r in &group {
                    pending.add(r.factor.clone());
                }
                if pending.check().is_err() {
                    continue;
                }
                // Wait until the prefix pins down every keyframe.
                match gauss_newton(&pending, &pending.dead_reckon(), cfg) {
                    Ok((x, _)) => tree = Some(ChainBayesTree::init(pending.clone(), x)?),
                    Err(e) => {
                        last_err = Some(e);
                        continue;
                    }
                }
            }
        }
        let t = tree.as_ref().expect("initialized above");
        let est = t.estimate()?;
        cost_log.push((k, t.graph.cost(&est)?));
    }

    let Some(mut t) = tree else {
        pending.check()?;
        return Err(last_err.unwrap_or(Error::UnderConstrained { index: pending.n }));
    };
    let mut converged = false;
    for _ in 0..cfg.max_iterations {
        if inf_norm(&t.solve()?) < cfg.delta_tol {
            converged = true;
            break;
        }
        t = t.relinearize(t.estimate()?)?;
    }
    Ok(StreamOutcome {
        states: t.estimate()?,
        cost_log,
        converged,
    })
}
