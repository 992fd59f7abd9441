//! Circulant embedding and Fourier factorization of Toeplitz matrices.
//!
//! A Toeplitz matrix of size `n` is given by its `2n - 1` diagonal values
//! `b = [b_{-(n-1)}, ..., b_0, ..., b_{n-1}]`, with `B[i][j] = b_{j-i}`.
//!
//! Convention: with `w = exp(i pi / n)`, the circulant embedding `C` has
//! eigenvalues `D[m] = sum_r c_r w^(m r)` where `c` is its first row, and
//! `C = Q diag(D) Q*` with the unitary `Q[k][m] = w^(k m) / sqrt(2n)`. The
//! stored `G[j][m] = w^((j + 1) m) / sqrt(2n)` uses the shifted exponent; the
//! extra factor `w^m` is a per-column phase that cancels in `G D G*`, so
//! `B = G diag(D) G*`. [`ToeplitzFactorization::paper_scaled`] moves the
//! normalization to `1 / 2n` inside `G` and compensates with `2n D`.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const RECONSTRUCTION_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct ToeplitzFactorization {
    pub n: usize,
    /// `b_{-(n-1)} ..= b_{n-1}`.
    pub b: Vec<f64>,
    /// `[n x 2n]`, row-major.
    pub g: Vec<Complex64>,
    /// Diagonal of `D`, length `2n`.
    pub d: Vec<Complex64>,
}

fn size_of(b: &[f64]) -> Result<usize> {
    if b.is_empty() || b.len() % 2 == 0 {
        return Err(Error::invalid(format!(
            "a Toeplitz matrix needs an odd, positive number of diagonal values, got {}",
            b.len()
        )));
    }
    Ok(b.len().div_ceil(2))
}

/// `b_k` for `-(n-1) <= k <= n-1`, with `b_{-n} = b_n = b_0`.
fn diag(b: &[f64], n: usize, k: i64) -> f64 {
    let k = if k.unsigned_abs() as usize == n { 0 } else { k };
    b[(k + n as i64 - 1) as usize]
}

pub fn toeplitz(b: &[f64]) -> Result<Tensor> {
    let n = size_of(b)?;
    let mut data = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            data.push(diag(b, n, j as i64 - i as i64));
        }
    }
    Tensor::matrix(n, n, data)
}

/// The `2n x 2n` circulant whose top-left `n x n` block is `toeplitz(b)`.
pub fn embed_circulant(b: &[f64]) -> Result<Tensor> {
    let n = size_of(b)?;
    let m = 2 * n as i64;
    let mut data = Vec::with_capacity((m * m) as usize);
    for j in 0..m {
        for k in 0..m {
            let delta = k - j;
            let v = if (-(n as i64)..=n as i64).contains(&delta) {
                diag(b, n, delta)
            } else if delta > n as i64 {
                diag(b, n, delta - m)
            } else {
                diag(b, n, delta + m)
            };
            data.push(v);
        }
    }
    Tensor::matrix(2 * n, 2 * n, data)
}

fn omega(n: usize, power: usize) -> Complex64 {
    let angle = std::f64::consts::PI * (power % (2 * n)) as f64 / n as f64;
    Complex64::from_polar(1.0, angle)
}

/// Factorizes `toeplitz(b)` as `G diag(D) G*` and checks the reconstruction.
pub fn factorize_toeplitz(b: &[f64]) -> Result<ToeplitzFactorization> {
    let n = size_of(b)?;
    let c = embed_circulant(b)?;
    let first = c.row(0);
    let m = 2 * n;
    let d: Vec<Complex64> = (0..m)
        .map(|k| (0..m).map(|r| first[r] * omega(n, k * r)).sum())
        .collect();
    let norm = 1.0 / (m as f64).sqrt();
    let mut g = Vec::with_capacity(n * m);
    for j in 0..n {
        for k in 0..m {
            g.push(omega(n, (j + 1) * k) * norm);
        }
    }
    let f = ToeplitzFactorization {
        n,
        b: b.to_vec(),
        g,
        d,
    };
    f.verify()?;
    Ok(f)
}

impl ToeplitzFactorization {
    /// `G diag(D) G*`, `[n x n]` row-major.
    pub fn reconstruct(&self) -> Vec<Complex64> {
        let (n, m) = (self.n, 2 * self.n);
        let mut out = vec![Complex64::new(0.0, 0.0); n * n];
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = (0..m)
                    .map(|k| self.g[i * m + k] * self.d[k] * self.g[j * m + k].conj())
                    .sum();
            }
        }
        out
    }

    /// `max |B - G D G*|` over all entries.
    pub fn reconstruction_error(&self) -> f64 {
        let n = self.n;
        self.reconstruct()
            .iter()
            .enumerate()
            .map(|(idx, z)| (z - diag(&self.b, n, (idx % n) as i64 - (idx / n) as i64)).norm())
            .fold(0.0, f64::max)
    }

    pub fn verify(&self) -> Result<()> {
        let error = self.reconstruction_error();
        if error.is_nan() || error > RECONSTRUCTION_TOLERANCE {
            return Err(Error::Reconstruction {
                error,
                tolerance: RECONSTRUCTION_TOLERANCE,
            });
        }
        Ok(())
    }

    /// `(G / sqrt(2n), 2n D)`: entries `G[j][k] = w^((j + 1) k) / 2n`.
    pub fn paper_scaled(&self) -> (Vec<Complex64>, Vec<Complex64>) {
        let m = (2 * self.n) as f64;
        let g = self.g.iter().map(|z| z / m.sqrt()).collect();
        let d = self.d.iter().map(|z| z * m).collect();
        (g, d)
    }
}

/// Eigenvalues of a real square matrix from a dense Schur decomposition.
pub fn dense_eigenvalues(m: &Tensor) -> Result<Vec<Complex64>> {
    let (rows, cols) = m.dims2();
    if rows != cols {
        return Err(Error::Shape {
            op: "dense_eigenvalues",
            left: vec![rows, cols],
            right: vec![cols, rows],
        });
    }
    let dense = DMatrix::from_row_slice(rows, cols, m.data());
    Ok(dense.complex_eigenvalues().iter().copied().collect())
}

/// Largest distance when each value in `a` is paired greedily with its
/// nearest unused value in `b`. Infinite if the lengths differ.
pub fn max_matched_distance(a: &[Complex64], b: &[Complex64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    let mut used = vec![false; b.len()];
    let mut worst: f64 = 0.0;
    for x in a {
        let (best, dist) = b
            .iter()
            .enumerate()
            .filter(|(i, _)| !used[*i])
            .map(|(i, y)| (i, (x - y).norm()))
            .fold((usize::MAX, f64::INFINITY), |acc, c| if c.1 < acc.1 { c } else { acc });
        used[best] = true;
        worst = worst.max(dist);
    }
    worst
}
