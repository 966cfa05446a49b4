//! Dense column-major matrix kernel.
//!
//! The centerpiece is [`partial_qr`]: Householder QR carried through the
//! first `k` columns of an augmented matrix `[A | b]`. The top `k` rows of the
//! result form a conditional, the trailing block forms the new separator
//! factor. `Q` is never materialized; the right-hand side rides along as the
//! last column.

use std::fmt;
use std::ops::{Index, IndexMut};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative cutoff below which a Householder column is treated as zero.
pub const PIVOT_TOL: f64 = 1e-12;

/// Dense matrix stored column-major.
#[derive(Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, v) in values.iter().enumerate() {
            m[(i, i)] = *v;
        }
        m
    }

    /// Builds a matrix from row slices. Panics on ragged input.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut m = Self::zeros(r, c);
        for (i, row) in rows.iter().enumerate() {
            assert_eq!(row.len(), c, "ragged row {i}");
            for (j, v) in row.iter().enumerate() {
                m[(i, j)] = *v;
            }
        }
        m
    }

    pub fn from_col_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::InvalidArgument(format!(
                "{} entries for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for c in 0..cols {
            for r in 0..rows {
                m[(r, c)] = f(r, c);
            }
        }
        m
    }

    #[inline]
    pub fn nrows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn ncols(&self) -> usize {
        self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0 || self.cols == 0
    }

    pub fn as_col_major(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn col(&self, c: usize) -> &[f64] {
        &self.data[c * self.rows..(c + 1) * self.rows]
    }

    #[inline]
    pub fn col_mut(&mut self, c: usize) -> &mut [f64] {
        &mut self.data[c * self.rows..(c + 1) * self.rows]
    }

    pub fn row(&self, r: usize) -> Vec<f64> {
        (0..self.cols).map(|c| self[(r, c)]).collect()
    }

    pub fn transpose(&self) -> Mat {
        Mat::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    /// Matrix product. Panics on inner-dimension mismatch.
    pub fn mul(&self, rhs: &Mat) -> Mat {
        assert_eq!(self.cols, rhs.rows, "inner dimension mismatch");
        let mut out = Mat::zeros(self.rows, rhs.cols);
        for j in 0..rhs.cols {
            for k in 0..self.cols {
                let b = rhs[(k, j)];
                if b == 0.0 {
                    continue;
                }
                let a = self.col(k);
                let o = out.col_mut(j);
                for i in 0..self.rows {
                    o[i] += a[i] * b;
                }
            }
        }
        out
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "vector length mismatch");
        let mut out = vec![0.0; self.rows];
        for (k, &b) in v.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(self.col(k)) {
                *o += a * b;
            }
        }
        out
    }

    /// `AᵀA`.
    pub fn gram(&self) -> Mat {
        let mut g = Mat::zeros(self.cols, self.cols);
        for i in 0..self.cols {
            for j in i..self.cols {
                let s: f64 = self.col(i).iter().zip(self.col(j)).map(|(a, b)| a * b).sum();
                g[(i, j)] = s;
                g[(j, i)] = s;
            }
        }
        g
    }

    pub fn scaled(&self, s: f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn neg(&self) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| -v).collect(),
        }
    }

    pub fn sub(&self, other: &Mat) -> Mat {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        }
    }

    /// Copy of rows `r0..r1` and columns `c0..c1`.
    pub fn block(&self, r0: usize, r1: usize, c0: usize, c1: usize) -> Mat {
        Mat::from_fn(r1 - r0, c1 - c0, |r, c| self[(r0 + r, c0 + c)])
    }

    pub fn set_block(&mut self, r0: usize, c0: usize, src: &Mat) {
        for c in 0..src.cols {
            for r in 0..src.rows {
                self[(r0 + r, c0 + c)] = src[(r, c)];
            }
        }
    }

    /// Stacks matrices with equal column counts.
    pub fn vstack(blocks: &[&Mat]) -> Result<Mat> {
        let cols = blocks.first().map_or(0, |b| b.cols);
        if blocks.iter().any(|b| b.cols != cols) {
            return Err(Error::InvalidArgument("vstack column mismatch".into()));
        }
        let rows = blocks.iter().map(|b| b.rows).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut r0 = 0;
        for b in blocks {
            out.set_block(r0, 0, b);
            r0 += b.rows;
        }
        Ok(out)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn is_upper_triangular(&self) -> bool {
        (0..self.cols).all(|c| ((c + 1)..self.rows).all(|r| self[(r, c)] == 0.0))
    }

    /// Row-major text dump: one line per row, `%.17g` entries separated by a space.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for r in 0..self.rows {
            let line: Vec<String> = (0..self.cols).map(|c| format_g(self[(r, c)], 17)).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }

    /// Inverse of [`Mat::dump`]. Blank lines are ignored.
    pub fn parse_dump(text: &str) -> Result<Mat> {
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row = line
                .split_whitespace()
                .map(|t| {
                    t.parse::<f64>().map_err(|e| Error::Parse {
                        line: i + 1,
                        reason: format!("{t:?}: {e}"),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            if let Some(first) = rows.first() {
                if first.len() != row.len() {
                    return Err(Error::Parse {
                        line: i + 1,
                        reason: "ragged row".into(),
                    });
                }
            }
            rows.push(row);
        }
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        Ok(Mat::from_rows(&refs))
    }

    pub(crate) fn to_nalgebra(&self) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.rows, self.cols, &self.data)
    }
}

impl Index<(usize, usize)> for Mat {
    type Output = f64;
    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[c * self.rows + r]
    }
}

impl IndexMut<(usize, usize)> for Mat {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[c * self.rows + r]
    }
}

impl fmt::Debug for Mat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Mat {}x{}", self.rows, self.cols)?;
        for r in 0..self.rows {
            let row: Vec<String> = (0..self.cols).map(|c| format!("{:>11.4e}", self[(r, c)])).collect();
            writeln!(f, "  [{}]", row.join(" "))?;
        }
        Ok(())
    }
}

/// C-style `%.<precision>g` formatting.
pub fn format_g(x: f64, precision: usize) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let p = precision.max(1);
    let sci = format!("{:.*e}", p - 1, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if exp < -4 || exp >= p as i32 {
        let mantissa = strip_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{mantissa}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (p as i32 - 1 - exp).max(0) as usize;
        strip_zeros(&format!("{x:.decimals$}")).to_string()
    }
}

fn strip_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Householder phase recorded by [`partial_qr`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Reflector construction from the pivot column.
    Evaluate,
    /// Application of the reflector to the trailing columns (rhs included).
    Update,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PhaseEntry {
    pub phase: Phase,
    /// 0-based pivot column.
    pub column: usize,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartialQrResult {
    /// `k × (n+1)` upper-trapezoidal rows, rhs in the last column.
    pub r_top: Mat,
    /// `(m−k) × (n−k+1)` remainder, rhs in the last column.
    pub tail: Mat,
    pub phase_log: Vec<PhaseEntry>,
}

/// Known block-sparsity of an augmented matrix: column `c` may only be
/// nonzero in rows `lo[c]..hi[c]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnProfile {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
}

impl ColumnProfile {
    pub fn dense(rows: usize, cols: usize) -> Self {
        Self {
            lo: vec![0; cols],
            hi: vec![rows; cols],
        }
    }

    fn check(&self, a: &Mat) -> Result<()> {
        if self.lo.len() != a.ncols() || self.hi.len() != a.ncols() {
            return Err(Error::InvalidArgument("profile length differs from column count".into()));
        }
        for c in 0..a.ncols() {
            if self.lo[c] > self.hi[c] || self.hi[c] > a.nrows() {
                return Err(Error::InvalidArgument(format!("bad profile for column {c}")));
            }
        }
        Ok(())
    }
}

/// Partial Householder QR of an augmented matrix `[A | b]` (`m × (n+1)`),
/// eliminating the first `k` columns.
pub fn partial_qr(a: &Mat, k: usize) -> Result<PartialQrResult> {
    partial_qr_profiled(a, k, &ColumnProfile::dense(a.nrows(), a.ncols()))
}

/// [`partial_qr`] with loop bounds tightened by a caller-supplied sparsity
/// profile. The result is identical to the dense call.
pub fn partial_qr_profiled(a: &Mat, k: usize, profile: &ColumnProfile) -> Result<PartialQrResult> {
    let m = a.nrows();
    let total = a.ncols();
    if total < 2 {
        return Err(Error::InvalidArgument("augmented matrix needs a value column and an rhs".into()));
    }
    let n = total - 1;
    if k == 0 || k > m.min(n) {
        return Err(Error::InvalidArgument(format!(
            "cannot eliminate {k} columns of a {m}x{n} system"
        )));
    }
    if !a.is_finite() {
        return Err(Error::InvalidArgument("non-finite entry".into()));
    }
    profile.check(a)?;

    let col_scale: Vec<f64> = (0..k)
        .map(|c| a.col(c).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let mut w = a.clone();
    let mut lo = profile.lo.clone();
    let mut hi = profile.hi.clone();
    let mut log = Vec::with_capacity(2 * k);
    let mut v = Vec::with_capacity(m);

    for j in 0..k {
        log.push(PhaseEntry {
            phase: Phase::Evaluate,
            column: j,
            rows: m - j,
            cols: 1,
        });
        let start = j;
        let end = hi[j].max(j + 1);
        let pivot = &w.col(j)[start..end];
        let x1 = pivot[0];
        let rest_sq: f64 = pivot[1..].iter().map(|x| x * x).sum();
        let sigma = (x1 * x1 + rest_sq).sqrt();

        log.push(PhaseEntry {
            phase: Phase::Update,
            column: j,
            rows: m - j,
            cols: total - j - 1,
        });

        if sigma == 0.0 || sigma < PIVOT_TOL * col_scale[j] {
            // Reflector degenerates to the identity.
            for r in (j + 1)..m {
                w[(r, j)] = 0.0;
            }
            if w[(j, j)] < 0.0 {
                for c in j..total {
                    w[(j, c)] = -w[(j, c)];
                }
            }
            continue;
        }

        // v = x − σe₁, first entry computed without cancellation.
        let v1 = if x1 <= 0.0 { x1 - sigma } else { -rest_sq / (x1 + sigma) };
        v.clear();
        v.push(v1);
        v.extend_from_slice(&pivot[1..]);
        let vtv = v1 * v1 + rest_sq;
        let beta = 2.0 / vtv;

        for c in (j + 1)..total {
            if hi[c] <= start || lo[c] >= end {
                continue;
            }
            let r0 = lo[c].max(start);
            let r1 = hi[c].min(end);
            let col = w.col(c);
            let mut dot = 0.0;
            for r in r0..r1 {
                dot += v[r - start] * col[r];
            }
            if dot == 0.0 {
                continue;
            }
            let f = beta * dot;
            let col = w.col_mut(c);
            for r in start..end {
                col[r] -= f * v[r - start];
            }
            lo[c] = lo[c].min(start);
            hi[c] = hi[c].max(end);
        }

        w[(j, j)] = sigma;
        for r in (j + 1)..m {
            w[(r, j)] = 0.0;
        }
    }

    let r_top = w.block(0, k, 0, total);
    let tail = w.block(k, m, k, total);
    Ok(PartialQrResult {
        r_top,
        tail,
        phase_log: log,
    })
}

/// Solves `R Δ = d` for upper-triangular `R`.
///
/// A zero diagonal entry yields [`Error::Singular`] with its 0-based row.
pub fn back_substitute(r: &Mat, d: &[f64]) -> Result<Vec<f64>> {
    let n = r.nrows();
    if r.ncols() != n || d.len() != n {
        return Err(Error::InvalidArgument(format!(
            "back substitution on {}x{} with rhs of length {}",
            r.nrows(),
            r.ncols(),
            d.len()
        )));
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let diag = r[(i, i)];
        if diag == 0.0 || !diag.is_finite() {
            return Err(Error::Singular { index: i });
        }
        let mut s = d[i];
        for j in (i + 1)..n {
            s -= r[(i, j)] * x[j];
        }
        x[i] = s / diag;
    }
    Ok(x)
}

/// Least-squares solve through the normal equations `AᵀA Δ = Aᵀb` with a
/// dense Cholesky factorization. Kept independent of [`partial_qr`] so it
/// can serve as a cross-check.
pub fn normal_solve_oracle(a: &Mat, b: &[f64]) -> Result<Vec<f64>> {
    if b.len() != a.nrows() {
        return Err(Error::InvalidArgument("rhs length differs from row count".into()));
    }
    let an = a.to_nalgebra();
    let bn = DVector::from_column_slice(b);
    let normal = an.transpose() * &an;
    let rhs = an.transpose() * bn;
    let chol = normal.clone().cholesky().ok_or(Error::SingularNormal)?;
    let scale = normal.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if chol.l_dirty().diagonal().iter().any(|l| l * l <= PIVOT_TOL * scale) {
        return Err(Error::SingularNormal);
    }
    let x = chol.solve(&rhs);
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularNormal);
    }
    Ok(x.iter().copied().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_mat(rng: &mut impl Rng, rows: usize, cols: usize) -> Mat {
        Mat::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn stacked(res: &PartialQrResult, rows: usize, cols: usize) -> Mat {
        let k = res.r_top.nrows();
        let mut s = Mat::zeros(rows, cols);
        s.set_block(0, 0, &res.r_top);
        s.set_block(k, k, &res.tail);
        s
    }

    fn rel_diff(a: &Mat, b: &Mat) -> f64 {
        a.sub(b).frobenius_norm() / b.frobenius_norm().max(f64::MIN_POSITIVE)
    }

    #[test]
    fn upper_triangular_input_is_unchanged() {
        let a = Mat::from_rows(&[&[1.0, 0.0, 5.0], &[0.0, 1.0, 7.0]]);
        let res = partial_qr(&a, 2).unwrap();
        assert_eq!(res.r_top, a);
        assert_eq!(res.tail.nrows(), 0);
        assert_eq!(res.tail.ncols(), 1);
    }

    #[test]
    fn negative_diagonal_is_flipped() {
        let a = Mat::from_rows(&[&[-2.0, 1.0, 3.0], &[0.0, 4.0, 1.0]]);
        let res = partial_qr(&a, 2).unwrap();
        assert_eq!(res.r_top.row(0), vec![2.0, -1.0, -3.0]);
        assert_eq!(res.r_top.row(1), vec![0.0, 4.0, 1.0]);
    }

    #[test]
    fn gram_preserved_on_3x3() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_mat(&mut rng, 3, 3);
        let res = partial_qr(&a, 1).unwrap();
        let s = stacked(&res, 3, 3);
        // Both Gram matrices formed explicitly.
        assert!(rel_diff(&s.gram(), &a.gram()) < 1e-10);
    }

    #[test]
    fn toy_first_elimination() {
        // Whitened g1 and b1 of the four-keyframe linear toy chain.
        let a = Mat::from_rows(&[
            &[-1.0, 0.0, 0.0, 0.0, 0.0],
            &[0.0, -1.0, 0.0, 0.0, 0.0],
            &[1.0, 0.0, -1.0, 0.0, 0.0],
            &[0.0, 1.0, 0.0, -1.0, 0.0],
        ]);
        let res = partial_qr(&a, 2).unwrap();
        let s2 = 2f64.sqrt();
        // Gram of the x1 columns is 2I, cross term is -I.
        for i in 0..2 {
            assert!((res.r_top[(i, i)] - s2).abs() < 1e-15);
            assert!((res.r_top[(i, 2 + i)] + 1.0 / s2).abs() < 1e-15);
        }
        assert_eq!(res.tail.nrows(), 2);
        assert_eq!(res.tail.ncols(), 3);
        let tail_gram = res.tail.gram();
        assert!((tail_gram[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((tail_gram[(1, 1)] - 0.5).abs() < 1e-15);
        assert!(tail_gram[(0, 1)].abs() < 1e-15);
    }

    #[test]
    fn zero_column_gives_identity_reflector() {
        let a = Mat::from_rows(&[&[0.0, 1.0, 2.0], &[0.0, 3.0, 4.0]]);
        let res = partial_qr(&a, 1).unwrap();
        assert_eq!(res.r_top.row(0), vec![0.0, 1.0, 2.0]);
        assert_eq!(res.tail.row(0), vec![3.0, 4.0]);
    }

    #[test]
    fn rejects_bad_k() {
        let a = Mat::zeros(2, 3);
        assert!(matches!(partial_qr(&a, 0), Err(Error::InvalidArgument(_))));
        assert!(matches!(partial_qr(&a, 3), Err(Error::InvalidArgument(_))));
        let b = Mat::zeros(1, 3);
        assert!(matches!(partial_qr(&b, 2), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn phase_log_alternates() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random_mat(&mut rng, 7, 5);
        let res = partial_qr(&a, 3).unwrap();
        assert_eq!(res.phase_log.len(), 6);
        for (j, pair) in res.phase_log.chunks(2).enumerate() {
            assert_eq!(pair[0].phase, Phase::Evaluate);
            assert_eq!(pair[1].phase, Phase::Update);
            assert_eq!(pair[0].column, j);
            assert_eq!(pair[0].rows, 7 - j);
            assert_eq!(pair[1].cols, 5 - j - 1);
        }
    }

    #[test]
    fn profile_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        // Columns 2..4 only live in the bottom three rows.
        let mut a = random_mat(&mut rng, 8, 5);
        for c in 2..4 {
            for r in 0..5 {
                a[(r, c)] = 0.0;
            }
        }
        let profile = ColumnProfile {
            lo: vec![0, 0, 5, 5, 0],
            hi: vec![8, 8, 8, 8, 8],
        };
        let dense = partial_qr(&a, 2).unwrap();
        let sparse = partial_qr_profiled(&a, 2, &profile).unwrap();
        assert_eq!(dense, sparse);
    }

    #[test]
    fn back_substitute_examples() {
        let x = back_substitute(&Mat::identity(3), &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(x, vec![1.0, 2.0, 3.0]);
        let r = Mat::from_rows(&[&[2.0, 1.0], &[0.0, 4.0]]);
        assert_eq!(back_substitute(&r, &[4.0, 8.0]).unwrap(), vec![1.0, 2.0]);
        let singular = Mat::from_rows(&[&[1.0, 1.0], &[0.0, 0.0]]);
        assert_eq!(back_substitute(&singular, &[1.0, 1.0]), Err(Error::Singular { index: 1 }));
    }

    #[test]
    fn back_substitute_random_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut r = random_mat(&mut rng, 8, 8);
        for c in 0..8 {
            for row in (c + 1)..8 {
                r[(row, c)] = 0.0;
            }
            r[(c, c)] = 2.0 + rng.random_range(0.0..1.0);
        }
        let d: Vec<f64> = (0..8).map(|_| rng.random_range(-5.0..5.0)).collect();
        let x = back_substitute(&r, &d).unwrap();
        let rx = r.mul_vec(&x);
        let dmax = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let err = rx.iter().zip(&d).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(err <= 1e-9 * (1.0 + dmax));
    }

    #[test]
    fn oracle_examples() {
        let x = normal_solve_oracle(&Mat::identity(3), &[4.0, -1.0, 2.5]).unwrap();
        for (a, b) in x.iter().zip([4.0, -1.0, 2.5]) {
            assert!((a - b).abs() < 1e-14);
        }
        let a = Mat::from_rows(&[&[1.0], &[1.0]]);
        let x = normal_solve_oracle(&a, &[0.0, 2.0]).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-14);
        let singular = Mat::from_rows(&[&[1.0, 1.0], &[1.0, 1.0]]);
        assert_eq!(normal_solve_oracle(&singular, &[1.0, 2.0]), Err(Error::SingularNormal));
    }

    fn full_qr_solve(a: &Mat, b: &[f64]) -> Vec<f64> {
        let n = a.ncols();
        let mut aug = Mat::zeros(a.nrows(), n + 1);
        aug.set_block(0, 0, a);
        for (r, v) in b.iter().enumerate() {
            aug[(r, n)] = *v;
        }
        let res = partial_qr(&aug, n).unwrap();
        let r = res.r_top.block(0, n, 0, n);
        let d: Vec<f64> = res.r_top.col(n).to_vec();
        back_substitute(&r, &d).unwrap()
    }

    #[test]
    fn full_elimination_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for &(m, n) in &[(12, 6), (30, 10), (64, 32), (5, 5)] {
            let a = random_mat(&mut rng, m, n);
            let b: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
            let x = full_qr_solve(&a, &b);
            let y = normal_solve_oracle(&a, &b).unwrap();
            let diff = x.iter().zip(&y).fold(0.0f64, |m, (p, q)| m.max((p - q).abs()));
            assert!(diff < 1e-8, "{m}x{n}: {diff}");
        }
    }

    #[test]
    fn format_g_matches_c() {
        assert_eq!(format_g(0.1, 17), "0.10000000000000001");
        assert_eq!(format_g(1.0, 17), "1");
        assert_eq!(format_g(-2.5, 17), "-2.5");
        assert_eq!(format_g(1e-5, 17), "1.0000000000000001e-05");
        assert_eq!(format_g(1e20, 17), "1e+20");
        assert_eq!(format_g(123456.0, 6), "123456");
        assert_eq!(format_g(1234567.0, 6), "1.23457e+06");
        assert_eq!(format_g(0.000123456789, 6), "0.000123457");
        assert_eq!(format_g(0.0, 6), "0");
    }

    #[test]
    fn dump_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_mat(&mut rng, 4, 3);
        let back = Mat::parse_dump(&a.dump()).unwrap();
        assert_eq!(back, a);
    }

    proptest! {
        #[test]
        fn gram_preservation(seed in any::<u64>(), m in 1usize..12, n in 1usize..8, kf in 0.0f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_mat(&mut rng, m, n + 1);
            let kmax = m.min(n);
            let k = 1 + ((kmax - 1) as f64 * kf) as usize;
            let res = partial_qr(&a, k).unwrap();
            prop_assert!(res.r_top.block(0, k, 0, k).is_upper_triangular());
            prop_assert_eq!(res.phase_log.len(), 2 * k);
            let s = stacked(&res, m, n + 1);
            prop_assert!(rel_diff(&s.gram(), &a.gram()) < 1e-10);
            for i in 0..k {
                prop_assert!(res.r_top[(i, i)] >= 0.0);
            }
        }
    }
}
