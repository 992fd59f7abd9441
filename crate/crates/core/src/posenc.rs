//! Positional parameters and content-free positional correlations.
//!
//! Position indices are 0-based: index 0 is the `[CLS]` position.
//!
//! Everything here is computed from positional parameters and the sequence
//! length alone; token identities never enter. Per head `h` with width
//! `d_h = d / H`, the untied absolute correlation is
//!
//! ```text
//! V[h] = (P' U_Q[h]) (P' U_K[h])^T / sqrt(2 d_h),   P' = LayerNorm(P[0..n])
//! ```
//!
//! optionally plus a clipped relative bias `b[h][clip(j - i)]`, and then
//! optionally the `[CLS]` reset of row 0 and column 0.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadLayout {
    pub d: usize,
    pub heads: usize,
}

impl HeadLayout {
    pub fn new(d: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d == 0 || d % heads != 0 {
            return Err(Error::invalid(format!("hidden size {d} is not divisible by {heads} heads")));
        }
        Ok(HeadLayout { d, heads })
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    /// `1 / sqrt(terms * d_h)`.
    pub fn scale(&self, terms: usize) -> f64 {
        1.0 / ((terms * self.head_dim()) as f64).sqrt()
    }
}

/// `min(max(delta, -t), t)`.
pub fn clip_distance(delta: i64, t: usize) -> i64 {
    delta.clamp(-(t as i64), t as i64)
}

/// Column of the relative table used for query `i` and key `j`.
pub fn relative_index(i: usize, j: usize, t: usize) -> usize {
    (clip_distance(j as i64 - i as i64, t) + t as i64) as usize
}

/// Learned position table `P: [n_max x d]`, shared by every head and layer.
#[derive(Clone, Copy, Debug)]
pub struct AbsolutePositionTable {
    pub table: Var,
    /// Layer-norm gain and bias applied to each `p_i` before use.
    pub norm: Option<(Var, Var)>,
}

impl AbsolutePositionTable {
    pub fn n_max(&self, tape: &Tape) -> usize {
        tape.value(self.table).rows()
    }

    /// The first `n` rows, layer-normalized when a norm is attached.
    pub fn positions(&self, tape: &mut Tape, n: usize) -> Result<Var> {
        let n_max = self.n_max(tape);
        if n == 0 {
            return Err(Error::invalid("sequence length must be positive"));
        }
        if n > n_max {
            return Err(Error::SequenceTooLong { n, n_max });
        }
        let rows = tape.slice_rows(self.table, 0, n)?;
        match self.norm {
            Some((gain, bias)) => tape.layer_norm(rows, gain, bias, LAYER_NORM_EPS),
            None => Ok(rows),
        }
    }
}

/// Positional query/key projections `U_Q, U_K: [d x d]`; head `h` owns the
/// column block `h * d_h .. (h + 1) * d_h`. Shared by every layer.
#[derive(Clone, Copy, Debug)]
pub struct PositionalProjection {
    pub u_q: Var,
    pub u_k: Var,
    pub layout: HeadLayout,
}

/// Per-head scalar bias over clipped distances, `b: [H x (2t + 1)]`.
#[derive(Clone, Copy, Debug)]
pub struct RelativeBiasTable {
    pub bias: Var,
    pub clip: usize,
}

/// The vectors `p_theta1` and `p_theta2` from which each head derives its
/// reset scalars.
#[derive(Clone, Copy, Debug)]
pub struct ResetParams {
    pub theta1: Var,
    pub theta2: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct CorrelationKind {
    pub absolute: bool,
    pub relative: bool,
    pub reset: bool,
}

/// Content-free score contributions, one `[n x n]` matrix per head.
#[derive(Clone, Debug)]
pub struct PositionalCorrelation {
    pub heads: Vec<Var>,
    pub n: usize,
    pub kind: CorrelationKind,
}

/// `(P' U_Q, P' U_K)`, both `[n x d]`.
pub fn project_positions(
    tape: &mut Tape,
    table: &AbsolutePositionTable,
    proj: &PositionalProjection,
    n: usize,
) -> Result<(Var, Var)> {
    let p = table.positions(tape, n)?;
    let pq = tape.matmul(p, proj.u_q)?;
    let pk = tape.matmul(p, proj.u_k)?;
    Ok((pq, pk))
}

pub fn compute_untied_correlation(
    tape: &mut Tape,
    table: &AbsolutePositionTable,
    proj: &PositionalProjection,
    n: usize,
) -> Result<PositionalCorrelation> {
    let (pq, pk) = project_positions(tape, table, proj, n)?;
    let layout = proj.layout;
    let dh = layout.head_dim();
    let mut heads = Vec::with_capacity(layout.heads);
    for h in 0..layout.heads {
        let q = tape.slice_cols(pq, h * dh, dh)?;
        let k = tape.slice_cols(pk, h * dh, dh)?;
        let raw = tape.matmul_nt(q, k)?;
        heads.push(tape.scale(raw, layout.scale(2)));
    }
    Ok(PositionalCorrelation {
        heads,
        n,
        kind: CorrelationKind {
            absolute: true,
            ..Default::default()
        },
    })
}

/// Adds `b[h][clip(j - i) + t]` to every entry of head `h`.
pub fn add_relative_bias(
    tape: &mut Tape,
    v: &PositionalCorrelation,
    bias: &RelativeBiasTable,
) -> Result<PositionalCorrelation> {
    let heads = relative_bias_matrices(tape, bias, v.heads.len(), v.n)?;
    let summed = v
        .heads
        .iter()
        .zip(&heads)
        .map(|(&a, &b)| tape.add(a, b))
        .collect::<Result<Vec<_>>>()?;
    Ok(PositionalCorrelation {
        heads: summed,
        n: v.n,
        kind: CorrelationKind {
            relative: true,
            ..v.kind
        },
    })
}

/// The Toeplitz matrices `B[h][i][j] = b[h][clip(j - i) + t]`.
pub fn relative_bias_matrices(
    tape: &mut Tape,
    bias: &RelativeBiasTable,
    heads: usize,
    n: usize,
) -> Result<Vec<Var>> {
    let (rows, width) = tape.value(bias.bias).dims2();
    if rows != heads || width != 2 * bias.clip + 1 {
        return Err(Error::Shape {
            op: "relative bias table",
            left: vec![rows, width],
            right: vec![heads, 2 * bias.clip + 1],
        });
    }
    (0..heads)
        .map(|h| {
            let row = tape.slice_rows(bias.bias, h, 1)?;
            tape.relative_lookup(row, n, bias.clip)
        })
        .collect()
}

/// `(theta1, theta2)` for one head, each a `[1 x 1]` value:
/// `theta = (p_theta U_Q[h]) (p_theta U_K[h])^T / sqrt(2 d_h)`.
pub fn compute_theta(
    tape: &mut Tape,
    reset: &ResetParams,
    proj: &PositionalProjection,
    head: usize,
) -> Result<(Var, Var)> {
    let layout = proj.layout;
    if head >= layout.heads {
        return Err(Error::invalid(format!("head {head} out of range for {} heads", layout.heads)));
    }
    let dh = layout.head_dim();
    let mut one = |p: Var| -> Result<Var> {
        let q = tape.matmul(p, proj.u_q)?;
        let k = tape.matmul(p, proj.u_k)?;
        let q = tape.slice_cols(q, head * dh, dh)?;
        let k = tape.slice_cols(k, head * dh, dh)?;
        let dot = tape.matmul_nt(q, k)?;
        Ok(tape.scale(dot, layout.scale(2)))
    };
    Ok((one(reset.theta1)?, one(reset.theta2)?))
}

/// Thetas for every head, sharing the two projections of each `p_theta`.
pub fn compute_thetas(
    tape: &mut Tape,
    reset: &ResetParams,
    proj: &PositionalProjection,
) -> Result<Vec<(Var, Var)>> {
    let layout = proj.layout;
    let dh = layout.head_dim();
    let q1 = tape.matmul(reset.theta1, proj.u_q)?;
    let k1 = tape.matmul(reset.theta1, proj.u_k)?;
    let q2 = tape.matmul(reset.theta2, proj.u_q)?;
    let k2 = tape.matmul(reset.theta2, proj.u_k)?;
    let mut out = Vec::with_capacity(layout.heads);
    for h in 0..layout.heads {
        let mut theta = |q: Var, k: Var| -> Result<Var> {
            let q = tape.slice_cols(q, h * dh, dh)?;
            let k = tape.slice_cols(k, h * dh, dh)?;
            let dot = tape.matmul_nt(q, k)?;
            Ok(tape.scale(dot, layout.scale(2)))
        };
        out.push((theta(q1, k1)?, theta(q2, k2)?));
    }
    Ok(out)
}

/// Row 0 of each head becomes `theta1`, the rest of column 0 `theta2`.
pub fn reset_cls(
    tape: &mut Tape,
    v: &PositionalCorrelation,
    thetas: &[(Var, Var)],
) -> Result<PositionalCorrelation> {
    if v.n == 0 {
        return Err(Error::invalid("reset of an empty correlation"));
    }
    if thetas.len() != v.heads.len() {
        return Err(Error::invalid(format!(
            "{} theta pairs for {} heads",
            thetas.len(),
            v.heads.len()
        )));
    }
    let heads = v
        .heads
        .iter()
        .zip(thetas)
        .map(|(&m, &(t1, t2))| tape.reset_cls(m, t1, t2))
        .collect::<Result<Vec<_>>>()?;
    Ok(PositionalCorrelation {
        heads,
        n: v.n,
        kind: CorrelationKind {
            reset: true,
            ..v.kind
        },
    })
}
