//! Word/position expansion of first-layer attention scores.
//!
//! For the absolute-input baseline the layer input is `x_i = w_i + p_i` with
//! `p_i = LN(P[i])`, so per head
//!
//! ```text
//! (x_i W_Q)(x_j W_K)^T = (w_i W_Q)(w_j W_K)^T + (w_i W_Q)(p_j W_K)^T
//!                      + (p_i W_Q)(w_j W_K)^T + (p_i W_Q)(p_j W_K)^T
//! ```
//!
//! The four-term variant uses `U_Q, U_K` for the position sides instead.
//! Terms here are computed with plain tensor products, apart from the
//! encoder forward pass used for the full scores they are compared with.

use serde::Serialize;

use crate::attention::EncodingVariant;
use crate::error::{Error, Result};
use crate::model::{self, Model};
use crate::posenc::LAYER_NORM_EPS;
use crate::tensor::{Tape, Tensor};

pub const TERM_NAMES: [&str; 4] = ["ww", "wp", "pw", "pp"];

/// The four `[n x n]` terms of one head for one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadTerms {
    pub terms: [Tensor; 4],
}

impl HeadTerms {
    pub fn sum(&self) -> Tensor {
        let mut out = self.terms[0].clone();
        for t in &self.terms[1..] {
            for (o, v) in out.data_mut().iter_mut().zip(t.data()) {
                *o += v;
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TermStats {
    pub mean: f64,
    pub std: f64,
    /// Mean over rows of the variance within each row.
    pub row_variance: f64,
    /// Standard deviation of the row means.
    pub uniformity: f64,
}

impl TermStats {
    pub fn of(m: &Tensor) -> Self {
        let (rows, cols) = m.dims2();
        let all = m.data();
        let mean = all.iter().sum::<f64>() / all.len() as f64;
        let std = (all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / all.len() as f64).sqrt();
        let mut row_means = Vec::with_capacity(rows);
        let mut row_variance = 0.0;
        for r in 0..rows {
            let row = m.row(r);
            let mu = row.iter().sum::<f64>() / cols as f64;
            row_variance += row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / cols as f64;
            row_means.push(mu);
        }
        let mm = row_means.iter().sum::<f64>() / rows as f64;
        let uniformity = (row_means.iter().map(|v| (v - mm).powi(2)).sum::<f64>() / rows as f64).sqrt();
        TermStats {
            mean,
            std,
            row_variance: row_variance / rows as f64,
            uniformity,
        }
    }
}

/// Terms and full scores averaged over batch items and heads.
#[derive(Clone, Debug)]
pub struct CorrelationReport {
    pub n: usize,
    pub items: usize,
    /// `ww, wp, pw, pp`.
    pub terms: [Tensor; 4],
    /// Averaged first-layer scores from the encoder forward pass.
    pub full: Tensor,
    pub stats: [TermStats; 4],
    /// Largest per-item, per-head `|sum of terms - scores|`.
    pub max_item_error: f64,
    /// `max |sum of averaged terms - averaged scores|`.
    pub mean_error: f64,
}

#[derive(Serialize)]
struct ReportJson<'a> {
    variant: String,
    n: usize,
    items: usize,
    terms: Vec<(&'static str, &'a TermStats)>,
    max_item_error: f64,
    mean_error: f64,
}

impl CorrelationReport {
    pub fn to_json(&self, variant: EncodingVariant) -> serde_json::Value {
        let report = ReportJson {
            variant: variant.to_string(),
            n: self.n,
            items: self.items,
            terms: TERM_NAMES.iter().copied().zip(&self.stats).collect(),
            max_item_error: self.max_item_error,
            mean_error: self.mean_error,
        };
        serde_json::to_value(report).expect("report serializes")
    }
}

fn supports(model: &Model) -> Result<()> {
    let v = model.config.variant;
    if !matches!(v, EncodingVariant::AbsBaseline | EncodingVariant::BertAd) || !model.config.positional {
        return Err(Error::UnsupportedVariant {
            variant: v.to_string(),
            operation: "decompose_terms",
        });
    }
    Ok(())
}

fn layer_norm_rows(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (rows, d) = x.dims2();
    let mut out = Vec::with_capacity(rows * d);
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let s = (var + LAYER_NORM_EPS).sqrt();
        out.extend((0..d).map(|c| (row[c] - mean) / s * gain.data()[c] + bias.data()[c]));
    }
    Tensor::matrix(rows, d, out)
}

fn cols(m: &Tensor, start: usize, width: usize) -> Result<Tensor> {
    let rows = m.rows();
    let data = (0..rows).flat_map(|r| m.row(r)[start..start + width].to_vec()).collect();
    Tensor::matrix(rows, width, data)
}

fn scaled_nt(a: &Tensor, b: &Tensor, scale: f64) -> Result<Tensor> {
    Ok(a.matmul(&b.transpose())?.map(|v| v * scale))
}

/// Per-head terms of one sequence.
pub fn item_terms(model: &Model, tokens: &[usize]) -> Result<Vec<HeadTerms>> {
    supports(model)?;
    let cfg = &model.config;
    model::check_batch(cfg, &[tokens.to_vec()])?;
    let p = &model.params;
    let n = tokens.len();
    let word = p.require("embed.word")?;
    let d = cfg.d;
    let w = Tensor::matrix(n, d, tokens.iter().flat_map(|&t| word.row(t).to_vec()).collect())?;
    let table = p.require("pos.table")?;
    let raw = Tensor::matrix(n, d, table.data()[..n * d].to_vec())?;
    let pos = layer_norm_rows(&raw, p.require("pos.ln.gain")?, p.require("pos.ln.bias")?)?;

    let layout = cfg.layout()?;
    let (wq, wk) = (p.require("layer0.attn.w_q")?, p.require("layer0.attn.w_k")?);
    let (pq_w, pk_w, scale) = match cfg.variant {
        EncodingVariant::BertAd => (p.require("pos.u_q")?, p.require("pos.u_k")?, layout.scale(4)),
        _ => (wq, wk, layout.scale(1)),
    };
    let (q_w, k_w) = (w.matmul(wq)?, w.matmul(wk)?);
    let (q_p, k_p) = (pos.matmul(pq_w)?, pos.matmul(pk_w)?);
    let dh = layout.head_dim();
    (0..layout.heads)
        .map(|h| {
            let s = |m: &Tensor| cols(m, h * dh, dh);
            let (qw, kw, qp, kp) = (s(&q_w)?, s(&k_w)?, s(&q_p)?, s(&k_p)?);
            Ok(HeadTerms {
                terms: [
                    scaled_nt(&qw, &kw, scale)?,
                    scaled_nt(&qw, &kp, scale)?,
                    scaled_nt(&qp, &kw, scale)?,
                    scaled_nt(&qp, &kp, scale)?,
                ],
            })
        })
        .collect()
}

/// First-layer scores from the encoder, one `[B*n x n]` matrix per head.
pub fn encoder_scores(model: &Model, batch: &[Vec<usize>]) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let vars = model.params.bind(&mut tape, false);
    let map = model::first_layer_scores(&mut tape, &model.config, &vars, batch)?;
    Ok(map.scores.iter().map(|&v| tape.value(v).clone()).collect())
}

pub fn decompose_terms(model: &Model, batch: &[Vec<usize>]) -> Result<CorrelationReport> {
    supports(model)?;
    let n = model::check_batch(&model.config, batch)?;
    let full_scores = encoder_scores(model, batch)?;
    let heads = full_scores.len();
    let count = (batch.len() * heads) as f64;
    let mut terms: [Tensor; 4] = std::array::from_fn(|_| Tensor::zeros(&[n, n]));
    let mut full = Tensor::zeros(&[n, n]);
    let mut max_item_error: f64 = 0.0;
    for (b, seq) in batch.iter().enumerate() {
        for (h, ht) in item_terms(model, seq)?.iter().enumerate() {
            let block = &full_scores[h].data()[b * n * n..(b + 1) * n * n];
            for (s, f) in ht.sum().data().iter().zip(block) {
                max_item_error = max_item_error.max((s - f).abs());
            }
            for (acc, t) in terms.iter_mut().zip(&ht.terms) {
                for (a, v) in acc.data_mut().iter_mut().zip(t.data()) {
                    *a += v / count;
                }
            }
            for (a, v) in full.data_mut().iter_mut().zip(block) {
                *a += v / count;
            }
        }
    }
    let summed = HeadTerms { terms: terms.clone() }.sum();
    let mean_error = summed.max_abs_diff(&full);
    let stats = std::array::from_fn(|i| TermStats::of(&terms[i]));
    Ok(CorrelationReport {
        n,
        items: batch.len(),
        terms,
        full,
        stats,
        max_item_error,
        mean_error,
    })
}
