//! Measurement models, analytic Jacobians and whitening for the three factor
//! kinds of the chain: GPS (unary), between (LiDAR odometry) and motion
//! (inertial increments).
//!
//! Residuals are `r = z − h(x)`. Jacobian blocks are `∂r/∂x`, so a linearized
//! factor contributes `ε + AΔ` and the least-squares step minimizes
//! `‖AΔ + ε‖`.

use std::f64::consts::PI;
use std::fmt;

use crate::blockla::Mat;
use crate::error::{Error, Result};

/// Per-keyframe unknown: planar position, optional heading, optional velocity
/// and optional scalar accelerometer bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StateLayout {
    pub pose_dim: usize,
    pub vel_dim: usize,
    pub bias_dim: usize,
}

impl StateLayout {
    pub const LINEAR: StateLayout = StateLayout {
        pose_dim: 2,
        vel_dim: 0,
        bias_dim: 0,
    };
    pub const POSE: StateLayout = StateLayout {
        pose_dim: 3,
        vel_dim: 0,
        bias_dim: 0,
    };
    pub const FULL: StateLayout = StateLayout {
        pose_dim: 3,
        vel_dim: 2,
        bias_dim: 1,
    };

    pub fn new(pose_dim: usize, vel_dim: usize, bias_dim: usize) -> Result<Self> {
        if pose_dim != 2 && pose_dim != 3 {
            return Err(Error::Layout(format!("pose_dim must be 2 or 3, got {pose_dim}")));
        }
        if vel_dim != 0 && vel_dim != 2 {
            return Err(Error::Layout(format!("vel_dim must be 0 or 2, got {vel_dim}")));
        }
        if bias_dim > 1 {
            return Err(Error::Layout(format!("bias_dim must be 0 or 1, got {bias_dim}")));
        }
        // The bias is only observed through motion factors.
        if bias_dim == 1 && vel_dim == 0 {
            return Err(Error::Layout("a bias needs a velocity to be observable".into()));
        }
        Ok(Self {
            pose_dim,
            vel_dim,
            bias_dim,
        })
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.pose_dim + self.vel_dim + self.bias_dim
    }

    #[inline]
    pub fn has_heading(&self) -> bool {
        self.pose_dim == 3
    }

    #[inline]
    pub fn has_velocity(&self) -> bool {
        self.vel_dim == 2
    }

    #[inline]
    pub fn has_bias(&self) -> bool {
        self.bias_dim == 1
    }

    /// Column of the heading, velocity and bias components.
    pub fn theta_col(&self) -> Option<usize> {
        self.has_heading().then_some(2)
    }

    pub fn vel_col(&self) -> Option<usize> {
        self.has_velocity().then_some(self.pose_dim)
    }

    pub fn bias_col(&self) -> Option<usize> {
        self.has_bias().then_some(self.pose_dim + self.vel_dim)
    }

    /// One-byte code used by the binary stream format.
    pub fn code(&self) -> u8 {
        (self.pose_dim == 3) as u8 | ((self.vel_dim == 2) as u8) << 1 | ((self.bias_dim == 1) as u8) << 2
    }

    pub fn from_code(code: u8) -> Result<Self> {
        if code > 7 {
            return Err(Error::Layout(format!("unknown layout code {code}")));
        }
        Self::new(
            if code & 1 != 0 { 3 } else { 2 },
            if code & 2 != 0 { 2 } else { 0 },
            if code & 4 != 0 { 1 } else { 0 },
        )
    }

    /// Accepts `linear`, `pose`, `full` or three integers `p v b`.
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "linear" => Ok(Self::LINEAR),
            "pose" => Ok(Self::POSE),
            "full" => Ok(Self::FULL),
            other => {
                let parts: Vec<&str> = other.split_whitespace().collect();
                if parts.len() != 3 {
                    return Err(Error::Layout(format!("unknown layout {other:?}")));
                }
                let nums = parts
                    .iter()
                    .map(|p| p.parse::<usize>().map_err(|_| Error::Layout(format!("bad layout field {p:?}"))))
                    .collect::<Result<Vec<_>>>()?;
                Self::new(nums[0], nums[1], nums[2])
            }
        }
    }

    pub fn between_dim(&self) -> usize {
        self.pose_dim
    }

    pub fn motion_dim(&self) -> usize {
        4 + self.bias_dim
    }
}

impl fmt::Display for StateLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Self::LINEAR => write!(f, "linear"),
            Self::POSE => write!(f, "pose"),
            Self::FULL => write!(f, "full"),
            l => write!(f, "{} {} {}", l.pose_dim, l.vel_dim, l.bias_dim),
        }
    }
}

/// Components a layout does not carry are kept at zero.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct KeyframeState {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub vx: f64,
    pub vy: f64,
    pub bias: f64,
}

impl KeyframeState {
    pub fn at(x: f64, y: f64) -> Self {
        Self {
            x,
            y,
            ..Default::default()
        }
    }

    pub fn pose(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta,
            ..Default::default()
        }
    }

    pub fn to_vec(&self, layout: StateLayout) -> Vec<f64> {
        let mut v = vec![self.x, self.y];
        if layout.has_heading() {
            v.push(self.theta);
        }
        if layout.has_velocity() {
            v.extend([self.vx, self.vy]);
        }
        if layout.has_bias() {
            v.push(self.bias);
        }
        v
    }

    pub fn from_slice(layout: StateLayout, v: &[f64]) -> Result<Self> {
        if v.len() != layout.dim() {
            return Err(Error::Layout(format!(
                "state vector of length {} for layout of dimension {}",
                v.len(),
                layout.dim()
            )));
        }
        let mut s = Self::at(v[0], v[1]);
        if let Some(c) = layout.theta_col() {
            s.theta = v[c];
        }
        if let Some(c) = layout.vel_col() {
            s.vx = v[c];
            s.vy = v[c + 1];
        }
        if let Some(c) = layout.bias_col() {
            s.bias = v[c];
        }
        Ok(s)
    }

    /// Zeroes what the layout does not carry.
    pub fn restricted(&self, layout: StateLayout) -> Self {
        Self::from_slice(layout, &self.to_vec(layout)).expect("same layout")
    }

    pub fn is_finite(&self) -> bool {
        [self.x, self.y, self.theta, self.vx, self.vy, self.bias]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Wraps an angle into (−π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let r = (a + PI).rem_euclid(2.0 * PI) - PI;
    if r <= -PI {
        r + 2.0 * PI
    } else {
        r
    }
}

/// Lower Cholesky factor of an SPD matrix.
pub fn cholesky_lower(sigma: &Mat) -> Result<Mat> {
    let n = sigma.nrows();
    if sigma.ncols() != n || n == 0 {
        return Err(Error::Covariance(format!("{}x{} is not square", sigma.nrows(), sigma.ncols())));
    }
    if !sigma.is_finite() {
        return Err(Error::Covariance("non-finite entry".into()));
    }
    let scale = sigma.max_abs();
    for i in 0..n {
        for j in 0..i {
            if (sigma[(i, j)] - sigma[(j, i)]).abs() > 1e-12 * scale {
                return Err(Error::Covariance(format!("asymmetric at ({i},{j})")));
            }
        }
    }
    let mut l = Mat::zeros(n, n);
    for j in 0..n {
        let mut d = sigma[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d.is_nan() || d <= 0.0 {
            return Err(Error::Covariance(format!("non-positive pivot {d:e} at {j}")));
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in (j + 1)..n {
            let mut s = sigma[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    Ok(l)
}

/// `L⁻¹` for `Σ = L Lᵀ`. Lower triangular, so `‖L⁻¹r‖² = rᵀΣ⁻¹r`.
pub fn whitening_root(sigma: &Mat) -> Result<Mat> {
    let l = cholesky_lower(sigma)?;
    let n = l.nrows();
    let mut w = Mat::zeros(n, n);
    for c in 0..n {
        w[(c, c)] = 1.0 / l[(c, c)];
        for r in (c + 1)..n {
            let mut s = 0.0;
            for k in c..r {
                s += l[(r, k)] * w[(k, c)];
            }
            w[(r, c)] = -s / l[(r, r)];
        }
    }
    Ok(w)
}

/// Builds a symmetric matrix from its upper triangle listed row by row.
pub fn sym_from_upper(dim: usize, upper: &[f64]) -> Result<Mat> {
    if upper.len() != dim * (dim + 1) / 2 {
        return Err(Error::Covariance(format!(
            "{} upper-triangle entries for a {dim}x{dim} matrix",
            upper.len()
        )));
    }
    let mut m = Mat::zeros(dim, dim);
    let mut it = upper.iter();
    for r in 0..dim {
        for c in r..dim {
            let v = *it.next().expect("length checked");
            m[(r, c)] = v;
            m[(c, r)] = v;
        }
    }
    Ok(m)
}

pub fn upper_of(m: &Mat) -> Vec<f64> {
    let mut out = Vec::new();
    for r in 0..m.nrows() {
        for c in r..m.ncols() {
            out.push(m[(r, c)]);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct GpsFactor {
    pub index: usize,
    pub z: [f64; 2],
    pub sigma: Mat,
}

/// Relative pose of `j+1` seen from `j`: `(dx, dy, dθ)`, or `(dx, dy)` in the
/// world frame when the layout has no heading.
#[derive(Debug, Clone, PartialEq)]
pub struct BetweenFactor {
    pub index: usize,
    pub z: Vec<f64>,
    pub sigma: Mat,
}

/// Integrated increments between `j` and `j+1`: `(dp, dv[, db])`.
///
/// `h = (p' − p − v·dt + ½b·dt²·eₓ, v' − v + b·dt·eₓ, b' − b)`, with the bias
/// acting along the body-independent x axis.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionFactor {
    pub index: usize,
    pub dt: f64,
    pub z: Vec<f64>,
    pub sigma: Mat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FactorKind {
    Gps,
    Between,
    Motion,
}

impl FactorKind {
    pub fn tag(self) -> u8 {
        match self {
            FactorKind::Gps => 1,
            FactorKind::Between => 2,
            FactorKind::Motion => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Factor {
    Gps(GpsFactor),
    Between(BetweenFactor),
    Motion(MotionFactor),
}

/// Whitened residual and per-variable Jacobian blocks of one factor.
#[derive(Debug, Clone, PartialEq)]
pub struct WhitenedBlockRow {
    pub kind: FactorKind,
    pub residual: Vec<f64>,
    pub blocks: Vec<(usize, Mat)>,
}

impl WhitenedBlockRow {
    pub fn rows(&self) -> usize {
        self.residual.len()
    }

    pub fn block(&self, index: usize) -> Option<&Mat> {
        self.blocks.iter().find(|(i, _)| *i == index).map(|(_, m)| m)
    }
}

/// Un-whitened residual and Jacobian blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRow {
    pub residual: Vec<f64>,
    pub blocks: Vec<(usize, Mat)>,
}

fn state(states: &[KeyframeState], index: usize) -> Result<&KeyframeState> {
    if index == 0 || index > states.len() {
        return Err(Error::Index {
            index,
            n: states.len(),
        });
    }
    Ok(&states[index - 1])
}

impl Factor {
    pub fn kind(&self) -> FactorKind {
        match self {
            Factor::Gps(_) => FactorKind::Gps,
            Factor::Between(_) => FactorKind::Between,
            Factor::Motion(_) => FactorKind::Motion,
        }
    }

    pub fn index(&self) -> usize {
        match self {
            Factor::Gps(f) => f.index,
            Factor::Between(f) => f.index,
            Factor::Motion(f) => f.index,
        }
    }

    pub fn keyframes(&self) -> Vec<usize> {
        match self {
            Factor::Gps(f) => vec![f.index],
            Factor::Between(f) => vec![f.index, f.index + 1],
            Factor::Motion(f) => vec![f.index, f.index + 1],
        }
    }

    pub fn sigma(&self) -> &Mat {
        match self {
            Factor::Gps(f) => &f.sigma,
            Factor::Between(f) => &f.sigma,
            Factor::Motion(f) => &f.sigma,
        }
    }

    pub fn dim(&self, layout: StateLayout) -> usize {
        match self {
            Factor::Gps(_) => 2,
            Factor::Between(_) => layout.between_dim(),
            Factor::Motion(_) => layout.motion_dim(),
        }
    }

    /// Checks measurement and covariance sizes against the layout.
    pub fn check(&self, layout: StateLayout) -> Result<()> {
        let dim = self.dim(layout);
        match self {
            Factor::Gps(f) => {
                if !f.z.iter().all(|v| v.is_finite()) {
                    return Err(Error::InvalidArgument(format!("GPS {} has a non-finite measurement", f.index)));
                }
            }
            Factor::Between(f) => {
                if f.z.len() != dim {
                    return Err(Error::Layout(format!(
                        "between {} has {} values, layout {layout} needs {dim}",
                        f.index,
                        f.z.len()
                    )));
                }
                if !f.z.iter().all(|v| v.is_finite()) {
                    return Err(Error::InvalidArgument(format!("between {} has a non-finite measurement", f.index)));
                }
            }
            Factor::Motion(f) => {
                if !layout.has_velocity() {
                    return Err(Error::Layout(format!("motion {} needs a layout with velocity", f.index)));
                }
                if f.z.len() != dim {
                    return Err(Error::Layout(format!(
                        "motion {} has {} values, layout {layout} needs {dim}",
                        f.index,
                        f.z.len()
                    )));
                }
                if !(f.dt > 0.0 && f.dt.is_finite()) {
                    return Err(Error::InvalidArgument(format!("motion {} has dt = {}", f.index, f.dt)));
                }
                if !f.z.iter().all(|v| v.is_finite()) {
                    return Err(Error::InvalidArgument(format!("motion {} has a non-finite measurement", f.index)));
                }
            }
        }
        let s = self.sigma();
        if s.nrows() != dim || s.ncols() != dim {
            return Err(Error::Covariance(format!(
                "{:?} {} covariance is {}x{}, expected {dim}x{dim}",
                self.kind(),
                self.index(),
                s.nrows(),
                s.ncols()
            )));
        }
        Ok(())
    }

    /// Predicted measurement `h(x)`.
    pub fn predict(&self, layout: StateLayout, states: &[KeyframeState]) -> Result<Vec<f64>> {
        self.check(layout)?;
        match self {
            Factor::Gps(f) => {
                let s = state(states, f.index)?;
                Ok(vec![s.x, s.y])
            }
            Factor::Between(f) => {
                let a = state(states, f.index)?;
                let b = state(states, f.index + 1)?;
                let (dx, dy) = (b.x - a.x, b.y - a.y);
                if layout.has_heading() {
                    let (s, c) = a.theta.sin_cos();
                    Ok(vec![c * dx + s * dy, -s * dx + c * dy, b.theta - a.theta])
                } else {
                    Ok(vec![dx, dy])
                }
            }
            Factor::Motion(f) => {
                let a = state(states, f.index)?;
                let b = state(states, f.index + 1)?;
                let dt = f.dt;
                let bias = if layout.has_bias() { a.bias } else { 0.0 };
                let mut h = vec![
                    b.x - a.x - a.vx * dt + 0.5 * bias * dt * dt,
                    b.y - a.y - a.vy * dt,
                    b.vx - a.vx + bias * dt,
                    b.vy - a.vy,
                ];
                if layout.has_bias() {
                    h.push(b.bias - a.bias);
                }
                Ok(h)
            }
        }
    }

    /// `z − h(x)`, heading component wrapped into (−π, π].
    pub fn residual(&self, layout: StateLayout, states: &[KeyframeState]) -> Result<Vec<f64>> {
        let h = self.predict(layout, states)?;
        let mut r: Vec<f64> = match self {
            Factor::Gps(f) => f.z.iter().zip(&h).map(|(z, h)| z - h).collect(),
            Factor::Between(f) => f.z.iter().zip(&h).map(|(z, h)| z - h).collect(),
            Factor::Motion(f) => f.z.iter().zip(&h).map(|(z, h)| z - h).collect(),
        };
        if let (Factor::Between(_), true) = (self, layout.has_heading()) {
            r[2] = wrap_angle(r[2]);
        }
        Ok(r)
    }

    /// Analytic `∂r/∂x` for each attached keyframe.
    pub fn jacobian(&self, layout: StateLayout, states: &[KeyframeState]) -> Result<Vec<(usize, Mat)>> {
        self.check(layout)?;
        let d = layout.dim();
        match self {
            Factor::Gps(f) => {
                state(states, f.index)?;
                let mut j = Mat::zeros(2, d);
                j[(0, 0)] = -1.0;
                j[(1, 1)] = -1.0;
                Ok(vec![(f.index, j)])
            }
            Factor::Between(f) => {
                let a = state(states, f.index)?;
                let b = state(states, f.index + 1)?;
                let rows = layout.between_dim();
                let mut ja = Mat::zeros(rows, d);
                let mut jb = Mat::zeros(rows, d);
                if layout.has_heading() {
                    let (s, c) = a.theta.sin_cos();
                    let (dx, dy) = (b.x - a.x, b.y - a.y);
                    ja[(0, 0)] = c;
                    ja[(0, 1)] = s;
                    ja[(1, 0)] = -s;
                    ja[(1, 1)] = c;
                    ja[(0, 2)] = s * dx - c * dy;
                    ja[(1, 2)] = c * dx + s * dy;
                    ja[(2, 2)] = 1.0;
                    for r in 0..2 {
                        for col in 0..2 {
                            jb[(r, col)] = -ja[(r, col)];
                        }
                    }
                    jb[(2, 2)] = -1.0;
                } else {
                    ja[(0, 0)] = 1.0;
                    ja[(1, 1)] = 1.0;
                    jb[(0, 0)] = -1.0;
                    jb[(1, 1)] = -1.0;
                }
                Ok(vec![(f.index, ja), (f.index + 1, jb)])
            }
            Factor::Motion(f) => {
                state(states, f.index)?;
                state(states, f.index + 1)?;
                let rows = layout.motion_dim();
                let vc = layout.vel_col().expect("checked");
                let dt = f.dt;
                let mut ja = Mat::zeros(rows, d);
                let mut jb = Mat::zeros(rows, d);
                for i in 0..2 {
                    ja[(i, i)] = 1.0;
                    ja[(i, vc + i)] = dt;
                    ja[(2 + i, vc + i)] = 1.0;
                    jb[(i, i)] = -1.0;
                    jb[(2 + i, vc + i)] = -1.0;
                }
                if let Some(bc) = layout.bias_col() {
                    ja[(0, bc)] = -0.5 * dt * dt;
                    ja[(2, bc)] = -dt;
                    ja[(4, bc)] = 1.0;
                    jb[(4, bc)] = -1.0;
                }
                Ok(vec![(f.index, ja), (f.index + 1, jb)])
            }
        }
    }

    pub fn raw(&self, layout: StateLayout, states: &[KeyframeState]) -> Result<RawRow> {
        Ok(RawRow {
            residual: self.residual(layout, states)?,
            blocks: self.jacobian(layout, states)?,
        })
    }

    pub fn whitening(&self) -> Result<Mat> {
        whitening_root(self.sigma())
    }

    pub fn linearize(&self, layout: StateLayout, states: &[KeyframeState]) -> Result<WhitenedBlockRow> {
        let raw = self.raw(layout, states)?;
        let w = self.whitening()?;
        Ok(whiten(self.kind(), &w, &raw))
    }

    /// Squared Mahalanobis norm of the residual.
    pub fn cost(&self, layout: StateLayout, states: &[KeyframeState]) -> Result<f64> {
        let r = self.residual(layout, states)?;
        let w = self.whitening()?;
        Ok(w.mul_vec(&r).iter().map(|e| e * e).sum())
    }
}

/// Applies a whitening root to a raw row. Storage decoding goes through the
/// same routine so that reconstructed blocks are bit-identical.
pub fn whiten(kind: FactorKind, w: &Mat, raw: &RawRow) -> WhitenedBlockRow {
    WhitenedBlockRow {
        kind,
        residual: w.mul_vec(&raw.residual),
        blocks: raw.blocks.iter().map(|(i, j)| (*i, w.mul(j))).collect(),
    }
}

pub fn total_cost<'a>(
    factors: impl IntoIterator<Item = &'a Factor>,
    layout: StateLayout,
    states: &[KeyframeState],
) -> Result<f64> {
    let mut c = 0.0;
    for f in factors {
        c += f.cost(layout, states)?;
    }
    Ok(c)
}

/// What a raw Jacobian entry is known to be before any state is seen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Zero,
    One,
    MinusOne,
    /// Depends on the linearization point or on the measurement.
    Free,
    /// Equal (or opposite, when `negate`) to another entry of the same factor.
    Mirror {
        block: usize,
        row: usize,
        col: usize,
        negate: bool,
    },
}

/// Structural template of a factor's raw Jacobian: one row-major grid per
/// attached keyframe.
pub fn jacobian_template(kind: FactorKind, layout: StateLayout) -> Vec<Vec<Slot>> {
    let d = layout.dim();
    match kind {
        FactorKind::Gps => {
            let mut g = vec![Slot::Zero; 2 * d];
            g[0] = Slot::MinusOne;
            g[d + 1] = Slot::MinusOne;
            vec![g]
        }
        FactorKind::Between => {
            let rows = layout.between_dim();
            let mut a = vec![Slot::Zero; rows * d];
            let mut b = vec![Slot::Zero; rows * d];
            if layout.has_heading() {
                for r in 0..2 {
                    for c in 0..3 {
                        a[r * d + c] = Slot::Free;
                    }
                    for c in 0..2 {
                        b[r * d + c] = Slot::Mirror {
                            block: 0,
                            row: r,
                            col: c,
                            negate: true,
                        };
                    }
                }
                a[2 * d + 2] = Slot::One;
                b[2 * d + 2] = Slot::MinusOne;
            } else {
                a[0] = Slot::One;
                a[d + 1] = Slot::One;
                b[0] = Slot::MinusOne;
                b[d + 1] = Slot::MinusOne;
            }
            vec![a, b]
        }
        FactorKind::Motion => {
            let rows = layout.motion_dim();
            let vc = layout.pose_dim;
            let mut a = vec![Slot::Zero; rows * d];
            let mut b = vec![Slot::Zero; rows * d];
            for i in 0..2 {
                a[i * d + i] = Slot::One;
                a[i * d + vc + i] = Slot::Free;
                a[(2 + i) * d + vc + i] = Slot::One;
                b[i * d + i] = Slot::MinusOne;
                b[(2 + i) * d + vc + i] = Slot::MinusOne;
            }
            if let Some(bc) = layout.bias_col() {
                a[bc] = Slot::Free;
                a[2 * d + bc] = Slot::Free;
                a[4 * d + bc] = Slot::One;
                b[4 * d + bc] = Slot::MinusOne;
            }
            vec![a, b]
        }
    }
}
