//! Rank of the untied absolute correlation and distances to the Toeplitz
//! subspace.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{self, Model};
use crate::tensor::{Tape, Tensor};

/// Singular values below this fraction of the largest count as zero.
pub const RANK_THRESHOLD: f64 = 1e-8;

pub fn singular_values(m: &Tensor) -> Vec<f64> {
    let (rows, cols) = m.dims2();
    let mut s: Vec<f64> = DMatrix::from_row_slice(rows, cols, m.data())
        .singular_values()
        .iter()
        .copied()
        .collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

pub fn numerical_rank(m: &Tensor) -> usize {
    let s = singular_values(m);
    let max = s.first().copied().unwrap_or(0.0);
    if max == 0.0 {
        return 0;
    }
    s.iter().filter(|&&v| v >= RANK_THRESHOLD * max).count()
}

fn diagonals(n: usize) -> impl Iterator<Item = Vec<(usize, usize)>> {
    (-(n as i64 - 1)..n as i64).map(move |k| {
        (0..n)
            .filter_map(|i| {
                let j = i as i64 + k;
                (0..n as i64).contains(&j).then_some((i, j as usize))
            })
            .collect()
    })
}

/// Closest Toeplitz matrix in Frobenius norm: every diagonal replaced by its
/// mean. The mean is accumulated as offsets from the first entry, so a
/// diagonal that is already constant is reproduced exactly.
pub fn toeplitz_projection(m: &Tensor) -> Tensor {
    let n = m.rows();
    let mut out = m.clone();
    for diag in diagonals(n) {
        let first = m.at(diag[0].0, diag[0].1);
        let mean = first + diag.iter().map(|&(i, j)| m.at(i, j) - first).sum::<f64>() / diag.len() as f64;
        for &(i, j) in &diag {
            out.data_mut()[i * n + j] = mean;
        }
    }
    out
}

/// Frobenius distance from a square matrix to the Toeplitz subspace.
pub fn toeplitz_distance(m: &Tensor) -> f64 {
    let p = toeplitz_projection(m);
    m.data()
        .iter()
        .zip(p.data())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// `max |m[i][j] - m[i+1][j+1]|`.
pub fn diagonal_deviation(m: &Tensor) -> f64 {
    let n = m.rows();
    let mut worst: f64 = 0.0;
    for i in 1..n {
        for j in 1..n {
            worst = worst.max((m.at(i, j) - m.at(i - 1, j - 1)).abs());
        }
    }
    worst
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HeadSubspace {
    pub head: usize,
    pub absolute_rank: usize,
    pub rank_bound: usize,
    pub absolute_toeplitz_distance: f64,
    pub bias_toeplitz_distance: Option<f64>,
    pub bias_diagonal_deviation: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SubspaceReport {
    pub variant: String,
    pub n: usize,
    pub heads: Vec<HeadSubspace>,
}

impl SubspaceReport {
    pub fn ranks_within_bound(&self) -> bool {
        self.heads.iter().all(|h| h.absolute_rank <= h.rank_bound)
    }
}

pub fn subspace_diagnostics(model: &Model, n: usize) -> Result<SubspaceReport> {
    let cfg = &model.config;
    let unsupported = || Error::UnsupportedVariant {
        variant: cfg.variant.to_string(),
        operation: "subspace diagnostics",
    };
    if !cfg.variant.is_untied() || !cfg.positional {
        return Err(unsupported());
    }
    let mut tape = Tape::new();
    let vars = model.params.bind(&mut tape, false);
    let state = model::positional_state(&mut tape, cfg, &vars, n)?;
    let absolute = state.absolute.ok_or_else(unsupported)?;
    let rank_bound = cfg.head_dim();
    let heads = absolute
        .iter()
        .enumerate()
        .map(|(h, &a)| {
            let a = tape.value(a);
            let bias = state.bias.as_ref().map(|b| tape.value(b[h]));
            HeadSubspace {
                head: h,
                absolute_rank: numerical_rank(a),
                rank_bound,
                absolute_toeplitz_distance: toeplitz_distance(a),
                bias_toeplitz_distance: bias.map(toeplitz_distance),
                bias_diagonal_deviation: bias.map(diagonal_deviation),
            }
        })
        .collect();
    Ok(SubspaceReport {
        variant: cfg.variant.to_string(),
        n,
        heads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::EncodingVariant;
    use crate::ModelConfig;
    use proptest::prelude::*;
    use rand::Rng;

    fn model(variant: EncodingVariant, seed: u64) -> Model {
        let mut m = Model::new(ModelConfig {
            d: 16,
            heads: 4,
            layers: 1,
            d_ff: 32,
            n_max: 12,
            vocab_size: 10,
            variant,
            seed,
            ..ModelConfig::default()
        })
        .unwrap();
        if let Some(b) = m.params.get_mut("pos.rel_bias") {
            let mut r = crate::rng::stream(&[seed]);
            b.data_mut().iter_mut().for_each(|v| *v = r.random_range(-1.0..1.0));
        }
        m
    }

    #[test]
    fn ranks_and_distances() {
        for seed in 0..3 {
            let r = subspace_diagnostics(&model(EncodingVariant::TupeR, seed), 12).unwrap();
            assert!(r.ranks_within_bound());
            for h in &r.heads {
                assert_eq!(h.absolute_rank, 4);
                assert_eq!(h.bias_diagonal_deviation, Some(0.0));
                assert_eq!(h.bias_toeplitz_distance, Some(0.0));
                assert!(h.absolute_toeplitz_distance > 1e-6);
            }
        }
        let r = subspace_diagnostics(&model(EncodingVariant::TupeA, 0), 8).unwrap();
        assert!(r.heads.iter().all(|h| h.bias_toeplitz_distance.is_none()));
    }

    #[test]
    fn rank_of_known_products() {
        assert_eq!(numerical_rank(&Tensor::zeros(&[3, 3])), 0);
        assert_eq!(numerical_rank(&Tensor::identity(5)), 5);
        let u = Tensor::matrix(4, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(numerical_rank(&u.matmul(&u.transpose()).unwrap()), 1);
    }

    /// Distance from a 3x3 matrix to the Toeplitz subspace, written out by
    /// hand: only the main diagonal and the two length-2 diagonals vary.
    #[test]
    fn distance_hand_case() {
        let m = Tensor::matrix(3, 3, vec![1.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 3.0]).unwrap();
        assert!((toeplitz_distance(&m) - 2f64.sqrt()).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn projection_is_toeplitz_and_orthogonal(seed in any::<u64>(), n in 1usize..8) {
            let mut r = crate::rng::stream(&[seed]);
            let m = Tensor::matrix(n, n, (0..n * n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
            let p = toeplitz_projection(&m);
            prop_assert!(diagonal_deviation(&p) < 1e-12);
            let residual: Vec<f64> = m.data().iter().zip(p.data()).map(|(a, b)| a - b).collect();
            let inner: f64 = residual.iter().zip(p.data()).map(|(a, b)| a * b).sum();
            prop_assert!(inner.abs() < 1e-10);
        }
    }
}
