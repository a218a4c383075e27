//! Deterministic numeric kernels shared by every other module: softmax,
//! cross-entropy logit gradients, nonnegative least squares and seeded
//! Gaussian sampling. Everything here is pure 64-bit float arithmetic.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Name of the generator backing [`SeededRng`].
pub const RNG_ALGORITHM: &str = "chacha8";

/// Iteration cap for the nonnegative least-squares solver.
pub const NNLS_MAX_ITERATIONS: usize = 10_000;

/// Residual below which the NNLS solver exits early.
pub const NNLS_RESIDUAL_EPS: f64 = 1e-10;

/// Dense row-major matrix of finite `f64` entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Size(format!(
                "matrix data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("matrix entries must be finite".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n_cols) {
            return Err(Error::Size("ragged rows in matrix constructor".into()));
        }
        Self::new(n_rows, n_cols, rows.into_iter().flatten().collect())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.cols + col] = value;
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn row_mut(&mut self, row: usize) -> &mut [f64] {
        &mut self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// `self * x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::Size(format!(
                "matvec: vector length {} vs {} columns",
                x.len(),
                self.cols
            )));
        }
        Ok((0..self.rows)
            .map(|r| dot(self.row(r), x))
            .collect())
    }

    /// `self^T * y`.
    pub fn transpose_matvec(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.rows {
            return Err(Error::Size(format!(
                "transpose_matvec: vector length {} vs {} rows",
                y.len(),
                self.rows
            )));
        }
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            let row = self.row(r);
            let yr = y[r];
            for (o, v) in out.iter_mut().zip(row) {
                *o += yr * v;
            }
        }
        Ok(out)
    }

    /// `self += scale * u v^T`.
    pub fn add_outer(&mut self, u: &[f64], v: &[f64], scale: f64) {
        debug_assert_eq!(u.len(), self.rows);
        debug_assert_eq!(v.len(), self.cols);
        for (r, &ur) in u.iter().enumerate() {
            let row = self.row_mut(r);
            for (entry, &vc) in row.iter_mut().zip(v) {
                *entry += scale * ur * vc;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.data {
            *v *= factor;
        }
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|r| self.row(r).iter().sum()).collect()
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Deterministic RNG: the same seed yields the same sample sequence on every
/// platform. Concurrent workers should each own a [`SeededRng::split`] child.
#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn algorithm(&self) -> &'static str {
        RNG_ALGORITHM
    }

    /// Derive an independent child generator. Children with distinct labels
    /// produce independent streams; the parent's state is untouched.
    pub fn split(&self, label: u64) -> SeededRng {
        SeededRng::new(splitmix64(self.seed ^ label.wrapping_mul(0x9e37_79b9_7f4a_7c15)))
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Overflow-safe softmax; output sums to 1 within 1e-12.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::Size("softmax of empty vector".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("softmax input must be finite".into()));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Gradient of cross-entropy loss with respect to the logits: `probs - e_label`.
pub fn ce_logit_gradient(probs: &[f64], label: usize) -> Result<Vec<f64>> {
    if label >= probs.len() {
        return Err(Error::Index {
            index: label,
            len: probs.len(),
        });
    }
    let mut grad = probs.to_vec();
    grad[label] -= 1.0;
    Ok(grad)
}

/// Solution of a nonnegative least-squares problem.
#[derive(Clone, Debug)]
pub struct NnlsSolution {
    pub x: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
}

/// Lawson-Hanson active-set solver for `min ||Ax - b||` subject to `x >= 0`.
///
/// The systems solved here are tiny (at most class-count unknowns), so the
/// passive-set normal equations are formed directly and solved by Gaussian
/// elimination with partial pivoting.
pub fn solve_nonneg_least_squares(a: &Matrix, b: &[f64]) -> Result<NnlsSolution> {
    if a.rows() != b.len() {
        return Err(Error::Size(format!(
            "nnls: matrix has {} rows but rhs has length {}",
            a.rows(),
            b.len()
        )));
    }
    let n = a.cols();
    let mut x = vec![0.0; n];
    let mut passive = vec![false; n];
    let tol = 1e-12 * (1.0 + a.frobenius_sq().sqrt());

    let residual_of = |x: &[f64]| -> f64 {
        let ax = a.matvec(x).expect("dimensions checked");
        let diff: Vec<f64> = ax.iter().zip(b).map(|(p, q)| p - q).collect();
        l2_norm(&diff)
    };

    let mut iterations = 0;
    loop {
        iterations += 1;
        if iterations > NNLS_MAX_ITERATIONS {
            let residual = residual_of(&x);
            return Err(Error::NnlsNoConvergence {
                iterations: NNLS_MAX_ITERATIONS,
                residual,
                best: x,
            });
        }

        // Dual vector w = A^T (b - Ax); the most positive free component enters.
        let ax = a.matvec(&x)?;
        let resid: Vec<f64> = b.iter().zip(&ax).map(|(q, p)| q - p).collect();
        if l2_norm(&resid) <= NNLS_RESIDUAL_EPS {
            return Ok(NnlsSolution {
                residual: residual_of(&x),
                x,
                iterations,
            });
        }
        let w = a.transpose_matvec(&resid)?;
        let entering = (0..n)
            .filter(|&j| !passive[j] && w[j] > tol)
            .max_by(|&i, &j| w[i].partial_cmp(&w[j]).expect("finite dual"));
        let Some(j) = entering else {
            return Ok(NnlsSolution {
                residual: residual_of(&x),
                x,
                iterations,
            });
        };
        passive[j] = true;

        // Inner loop: solve on the passive set, backtracking while any
        // passive coordinate would go negative.
        loop {
            iterations += 1;
            if iterations > NNLS_MAX_ITERATIONS {
                let residual = residual_of(&x);
                return Err(Error::NnlsNoConvergence {
                    iterations: NNLS_MAX_ITERATIONS,
                    residual,
                    best: x,
                });
            }
            let support: Vec<usize> = (0..n).filter(|&k| passive[k]).collect();
            let z = solve_normal_equations(a, b, &support)?;
            if z.iter().all(|&v| v > 0.0) {
                for (idx, &k) in support.iter().enumerate() {
                    x[k] = z[idx];
                }
                for (k, xv) in x.iter_mut().enumerate() {
                    if !passive[k] {
                        *xv = 0.0;
                    }
                }
                break;
            }
            let mut alpha = f64::INFINITY;
            for (idx, &k) in support.iter().enumerate() {
                if z[idx] <= 0.0 {
                    let step = x[k] / (x[k] - z[idx]);
                    if step < alpha {
                        alpha = step;
                    }
                }
            }
            for (idx, &k) in support.iter().enumerate() {
                x[k] += alpha * (z[idx] - x[k]);
            }
            for &k in &support {
                if x[k] <= tol {
                    x[k] = 0.0;
                    passive[k] = false;
                }
            }
        }
    }
}

/// Least squares restricted to `support` via normal equations.
fn solve_normal_equations(a: &Matrix, b: &[f64], support: &[usize]) -> Result<Vec<f64>> {
    let m = support.len();
    let mut gram = vec![0.0; m * m];
    let mut rhs = vec![0.0; m];
    for r in 0..a.rows() {
        let row = a.row(r);
        for (i, &ci) in support.iter().enumerate() {
            rhs[i] += row[ci] * b[r];
            for (j, &cj) in support.iter().enumerate() {
                gram[i * m + j] += row[ci] * row[cj];
            }
        }
    }
    gaussian_solve(&mut gram, &mut rhs, m)
}

/// In-place Gaussian elimination with partial pivoting.
fn gaussian_solve(a: &mut [f64], b: &mut [f64], n: usize) -> Result<Vec<f64>> {
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| {
                a[i * n + col]
                    .abs()
                    .partial_cmp(&a[j * n + col].abs())
                    .expect("finite pivot")
            })
            .expect("nonempty pivot range");
        if a[pivot * n + col].abs() < 1e-14 {
            return Err(Error::Numeric("singular system in least squares".into()));
        }
        if pivot != col {
            for k in 0..n {
                a.swap(col * n + k, pivot * n + k);
            }
            b.swap(col, pivot);
        }
        for row in (col + 1)..n {
            let factor = a[row * n + col] / a[col * n + col];
            if factor == 0.0 {
                continue;
            }
            for k in col..n {
                a[row * n + k] -= factor * a[col * n + k];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for col in (0..n).rev() {
        let mut sum = b[col];
        for k in (col + 1)..n {
            sum -= a[col * n + k] * x[k];
        }
        x[col] = sum / a[col * n + col];
    }
    Ok(x)
}

/// `count` i.i.d. draws from N(0, sigma^2); `sigma = 0` yields zeros without
/// consuming randomness.
pub fn sample_gaussian(rng: &mut SeededRng, count: usize, sigma: f64) -> Result<Vec<f64>> {
    if sigma < 0.0 || !sigma.is_finite() {
        return Err(Error::Domain(format!("negative noise sigma {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(vec![0.0; count]);
    }
    let normal = Normal::new(0.0, sigma).expect("validated sigma");
    Ok((0..count).map(|_| normal.sample(rng)).collect())
}
