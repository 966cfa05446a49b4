//! Relative pose error over consecutive keyframes, translation only.

use crate::error::{Error, Result};
use crate::factors::{KeyframeState, StateLayout};

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub layout: StateLayout,
    pub indices: Vec<usize>,
    pub states: Vec<KeyframeState>,
}

impl Trajectory {
    /// Indices `1..=n`.
    pub fn new(layout: StateLayout, states: Vec<KeyframeState>) -> Self {
        Self {
            layout,
            indices: (1..=states.len()).collect(),
            states,
        }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn check(&self) -> Result<()> {
        if self.indices.len() != self.states.len() {
            return Err(Error::InvalidArgument("index and state counts differ".into()));
        }
        if self.indices.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument("indices are not strictly increasing".into()));
        }
        if let Some(k) = self.states.iter().position(|s| !s.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite state at keyframe {}", self.indices[k])));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RpeStats {
    pub rmse: f64,
    pub max_error: f64,
    pub pairs: usize,
}

/// Per-pair errors. With headings, both relative translations are expressed
/// in the frame of the earlier ground-truth keyframe.
pub fn rpe_errors(estimate: &Trajectory, truth: &Trajectory) -> Result<Vec<f64>> {
    estimate.check()?;
    truth.check()?;
    if estimate.len() != truth.len() {
        return Err(Error::InvalidArgument(format!(
            "estimate has {} keyframes, truth has {}",
            estimate.len(),
            truth.len()
        )));
    }
    if estimate.indices != truth.indices {
        return Err(Error::InvalidArgument("keyframe indices differ".into()));
    }
    if truth.len() < 2 {
        return Err(Error::InvalidArgument("at least two keyframes are needed".into()));
    }
    let heading = truth.layout.has_heading();
    Ok(estimate
        .states
        .windows(2)
        .zip(truth.states.windows(2))
        .map(|(e, t)| {
            let ex = (e[1].x - e[0].x) - (t[1].x - t[0].x);
            let ey = (e[1].y - e[0].y) - (t[1].y - t[0].y);
            let (ex, ey) = if heading {
                let (s, c) = t[0].theta.sin_cos();
                (c * ex + s * ey, -s * ex + c * ey)
            } else {
                (ex, ey)
            };
            ex.hypot(ey)
        })
        .collect())
}

pub fn rpe(estimate: &Trajectory, truth: &Trajectory) -> Result<RpeStats> {
    let e = rpe_errors(estimate, truth)?;
    let sq: f64 = e.iter().map(|v| v * v).sum();
    Ok(RpeStats {
        rmse: (sq / e.len() as f64).sqrt(),
        max_error: e.iter().copied().fold(0.0, f64::max),
        pairs: e.len(),
    })
}
