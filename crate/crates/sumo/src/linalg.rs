//! Dense kernels: SVD, polar factors, Newton-Schulz, low-rank projectors,
//! spectral summaries and FLOP formulas.
//!
//! Everything here is a pure function of its inputs (plus an explicit seed
//! for the randomized projector).

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;

/// Power-iteration budget for the spectral-norm estimate used by Newton-Schulz.
pub const POWER_ITERATION_STEPS: usize = 30;
pub const POWER_ITERATION_TOL: f64 = 1e-10;

pub const MUON_QUINTIC_COEFFS: (f64, f64, f64) = (3.4445, -4.7750, 2.0315);

pub fn check_finite(m: &Matrix, what: &'static str) -> Result<()> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

/// Builds a matrix from row-major entries, rejecting wrong lengths and non-finite values.
pub fn from_row_major(rows: usize, cols: usize, data: &[f64]) -> Result<Matrix> {
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidArgument(format!(
            "matrix dimensions must be positive, got {rows}x{cols}"
        )));
    }
    if data.len() != rows * cols {
        return Err(Error::InvalidArgument(format!(
            "{rows}x{cols} matrix needs {} entries, got {}",
            rows * cols,
            data.len()
        )));
    }
    let m = Matrix::from_row_slice(rows, cols, data);
    check_finite(&m, "matrix entries")?;
    Ok(m)
}

pub fn to_row_major(m: &Matrix) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

/// Thin SVD with singular values sorted non-increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdFactors {
    /// m×k, orthonormal columns.
    pub u: Matrix,
    pub singular_values: Vec<f64>,
    /// n×k, orthonormal columns.
    pub v: Matrix,
}

impl SvdFactors {
    pub fn reconstruct(&self) -> Matrix {
        let k = self.singular_values.len();
        let mut us = self.u.clone();
        for j in 0..k {
            us.column_mut(j).scale_mut(self.singular_values[j]);
        }
        us * self.v.transpose()
    }
}

pub fn svd(a: &Matrix) -> Result<SvdFactors> {
    check_finite(a, "svd input")?;
    let (m, n) = a.shape();
    let k = m.min(n);
    let dec = a.clone().svd(true, true);
    let u_raw = dec.u.expect("svd computed with u");
    let vt_raw = dec.v_t.expect("svd computed with v_t");
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&i, &j| dec.singular_values[j].total_cmp(&dec.singular_values[i]));
    let mut u = Matrix::zeros(m, k);
    let mut v = Matrix::zeros(n, k);
    let mut s = Vec::with_capacity(k);
    for (dst, &src) in order.iter().enumerate() {
        u.set_column(dst, &u_raw.column(src));
        v.set_column(dst, &vt_raw.row(src).transpose());
        s.push(dec.singular_values[src].max(0.0));
    }
    Ok(SvdFactors {
        u,
        singular_values: s,
        v,
    })
}

/// Nearest matrix with orthonormal rows (or columns, if tall): U·Vᵀ.
pub fn orthogonalize_svd(m: &Matrix) -> Result<Matrix> {
    if m.norm() == 0.0 {
        return Err(Error::Degenerate("cannot orthogonalize a zero matrix".into()));
    }
    let f = svd(m)?;
    Ok(&f.u * f.v.transpose())
}

/// ‖OOᵀ − I‖_F for wide or square inputs, ‖OᵀO − I‖_F for tall ones.
pub fn orthogonality_defect(o: &Matrix) -> f64 {
    let (r, c) = o.shape();
    if r <= c {
        (o * o.transpose() - Matrix::identity(r, r)).norm()
    } else {
        (o.transpose() * o - Matrix::identity(c, c)).norm()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NewtonSchulzKind {
    /// X ← 1.5X − 0.5XXᵀX from X₀ = M/‖M‖₂.
    Classic,
    /// Quintic polynomial with Muon's coefficients from X₀ = M/‖M‖_F.
    MuonQuintic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NewtonSchulzVariant {
    pub kind: NewtonSchulzKind,
    pub iterations: usize,
}

impl NewtonSchulzVariant {
    pub fn classic(iterations: usize) -> Self {
        Self {
            kind: NewtonSchulzKind::Classic,
            iterations,
        }
    }

    pub fn muon_quintic(iterations: usize) -> Self {
        Self {
            kind: NewtonSchulzKind::MuonQuintic,
            iterations,
        }
    }
}

impl Default for NewtonSchulzVariant {
    fn default() -> Self {
        Self::classic(5)
    }
}

fn smaller_gram(m: &Matrix) -> Matrix {
    if m.nrows() <= m.ncols() {
        m * m.transpose()
    } else {
        m.transpose() * m
    }
}

/// Spectral norm via power iteration on the smaller Gram matrix.
///
/// The start vector is fixed so the estimate is a deterministic function of `m`.
pub fn spectral_norm_estimate(m: &Matrix) -> f64 {
    let gram = smaller_gram(m);
    let d = gram.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0f_5ca1e);
    let mut x = nalgebra::DVector::<f64>::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let nx = x.norm();
    if nx == 0.0 {
        return 0.0;
    }
    x /= nx;
    let mut lambda = 0.0;
    for _ in 0..POWER_ITERATION_STEPS {
        let y = &gram * &x;
        let next = x.dot(&y);
        let ny = y.norm();
        if ny == 0.0 {
            return 0.0;
        }
        x = y / ny;
        let done = (next - lambda).abs() <= POWER_ITERATION_TOL * next.abs();
        lambda = next;
        if done {
            break;
        }
    }
    lambda.max(0.0).sqrt()
}

pub fn newton_schulz_orthogonalize(m: &Matrix, variant: NewtonSchulzVariant) -> Result<Matrix> {
    check_finite(m, "newton-schulz input")?;
    if variant.iterations == 0 {
        return Err(Error::InvalidArgument("newton-schulz needs at least one iteration".into()));
    }
    let fro = m.norm();
    if fro == 0.0 {
        return Err(Error::Degenerate("cannot orthogonalize a zero matrix".into()));
    }
    let wide = m.nrows() <= m.ncols();
    match variant.kind {
        NewtonSchulzKind::Classic => {
            let mut x = m / spectral_norm_estimate(m).max(f64::MIN_POSITIVE);
            for _ in 0..variant.iterations {
                let cubic = if wide {
                    (&x * x.transpose()) * &x
                } else {
                    &x * (x.transpose() * &x)
                };
                x = 1.5 * &x - 0.5 * cubic;
            }
            Ok(x)
        }
        NewtonSchulzKind::MuonQuintic => {
            let (a, b, c) = MUON_QUINTIC_COEFFS;
            let mut x = m / fro;
            for _ in 0..variant.iterations {
                x = if wide {
                    let g = &x * x.transpose();
                    let poly = b * &g + c * (&g * &g);
                    a * &x + poly * &x
                } else {
                    let g = x.transpose() * &x;
                    let poly = b * &g + c * (&g * &g);
                    a * &x + &x * poly
                };
            }
            Ok(x)
        }
    }
}

/// √r·(1 − 1/κ)^(2^i), evaluated literally.
pub fn newton_schulz_error_bound(kappa: f64, r: usize, iterations: usize) -> Result<f64> {
    if !(kappa >= 1.0) {
        return Err(Error::InvalidArgument(format!("kappa must be >= 1, got {kappa}")));
    }
    if kappa.is_infinite() {
        return Ok(f64::INFINITY);
    }
    let base = 1.0 - 1.0 / kappa;
    let exponent = 2f64.powi(iterations.min(1023) as i32);
    Ok((r as f64).sqrt() * base.powf(exponent))
}

/// Leading `r` left singular vectors of `g`.
pub fn truncated_svd_projector(g: &Matrix, r: usize) -> Result<Matrix> {
    let k = g.nrows().min(g.ncols());
    if r == 0 || r > k {
        return Err(Error::InvalidArgument(format!(
            "rank {r} outside 1..={k} for a {}x{} matrix",
            g.nrows(),
            g.ncols()
        )));
    }
    let f = svd(g)?;
    Ok(f.u.columns(0, r).into_owned())
}

pub fn gaussian_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Randomized range finder with power iterations (Halko, Martinsson and Tropp).
pub fn randomized_svd_projector(
    g: &Matrix,
    r: usize,
    oversampling: usize,
    power_iterations: usize,
    seed: u64,
) -> Result<Matrix> {
    check_finite(g, "projector input")?;
    let k = g.nrows().min(g.ncols());
    let l = r + oversampling;
    if r == 0 || l > k {
        return Err(Error::InvalidArgument(format!(
            "rank {r} + oversampling {oversampling} exceeds {k} for a {}x{} matrix",
            g.nrows(),
            g.ncols()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let omega = gaussian_matrix(g.ncols(), l, &mut rng);
    let mut q = (g * omega).qr().q();
    for _ in 0..power_iterations {
        let z = (g.transpose() * &q).qr().q();
        q = (g * z).qr().q();
    }
    let b = q.transpose() * g;
    let f = svd(&b)?;
    Ok(q * f.u.columns(0, r))
}

/// Condition number of a·aᵀ, or +∞ when that Gram matrix is numerically singular.
pub fn condition_number_gram(a: &Matrix) -> Result<f64> {
    if a.norm() == 0.0 {
        return Err(Error::Degenerate("condition number of a zero matrix".into()));
    }
    let (m, n) = a.shape();
    if m > n {
        return Ok(f64::INFINITY);
    }
    let s = svd(a)?.singular_values;
    let s_max = s[0];
    let s_min = s[m - 1];
    if s_min <= (m.max(n) as f64) * f64::EPSILON * s_max {
        return Ok(f64::INFINITY);
    }
    Ok((s_max / s_min).powi(2))
}

/// ‖m − P₁m‖²_F / ‖m‖²_F, where P₁m is the best rank-one approximation.
pub fn rank_one_relative_error(m: &Matrix) -> Result<f64> {
    if m.norm() == 0.0 {
        return Err(Error::Degenerate("rank-one error of a zero matrix".into()));
    }
    let s = svd(m)?.singular_values;
    let total: f64 = s.iter().map(|x| x * x).sum();
    let tail: f64 = s[1..].iter().map(|x| x * x).sum();
    Ok((tail / total).clamp(0.0, 1.0))
}

/// 4nm² + 8m³ + mn² + m²n.
pub fn flops_svd_pseudoinverse(n: u64, m: u64) -> u128 {
    let (n, m) = (n as u128, m as u128);
    4 * n * m * m + 8 * m * m * m + m * n * n + m * m * n
}

/// The decomposition-only part of [`flops_svd_pseudoinverse`]: 4nm² + 8m³.
pub fn flops_svd_decomposition(n: u64, m: u64) -> u128 {
    let (n, m) = (n as u128, m as u128);
    4 * n * m * m + 8 * m * m * m
}

/// nm² + m²n + iterations·(4m³ + 2m²).
pub fn flops_newton_schulz(n: u64, m: u64, iterations: u64) -> u128 {
    let (n, m, i) = (n as u128, m as u128, iterations as u128);
    n * m * m + m * m * n + i * (4 * m * m * m + 2 * m * m)
}

/// `n` values from `start` to `end` inclusive, evenly spaced in log scale.
pub fn logspace(start: f64, end: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![start];
    }
    let (a, b) = (start.ln(), end.ln());
    (0..n)
        .map(|i| {
            if i == 0 {
                start
            } else if i == n - 1 {
                end
            } else {
                (a + (b - a) * i as f64 / (n - 1) as f64).exp()
            }
        })
        .collect()
}

/// `rows × cols` matrix with orthonormal columns (`rows ≥ cols`), Haar-distributed.
pub fn random_orthonormal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    assert!(rows >= cols, "need rows >= cols");
    let qr = gaussian_matrix(rows, cols, rng).qr();
    let mut q = qr.q();
    let rdiag = qr.r().diagonal();
    for j in 0..cols {
        if rdiag[j] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// U·diag(s)·Vᵀ with random orthonormal U (rows×k) and V (cols×k), k = s.len().
pub fn matrix_with_singular_values<R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    s: &[f64],
    rng: &mut R,
) -> Matrix {
    let k = s.len();
    assert!(k <= rows.min(cols), "too many singular values for shape");
    let mut u = random_orthonormal(rows, k, rng);
    let v = random_orthonormal(cols, k, rng);
    for (j, &sj) in s.iter().enumerate() {
        u.column_mut(j).scale_mut(sj);
    }
    u * v.transpose()
}
