//! Score assembly for every encoding variant and multi-head attention.
//!
//! Scale factors use the per-head width `d_h`: `1/sqrt(d_h)` for a single
//! content term, `1/sqrt(2 d_h)` when content and an untied positional term
//! are summed, `1/sqrt(4 d_h)` for the four-term expansion.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::posenc::{
    self, AbsolutePositionTable, HeadLayout, PositionalCorrelation, PositionalProjection,
    RelativeBiasTable, ResetParams,
};
use crate::tensor::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EncodingVariant {
    #[serde(rename = "abs")]
    AbsBaseline,
    #[serde(rename = "shaw")]
    ShawRel,
    #[serde(rename = "t5")]
    T5Rel,
    #[serde(rename = "untied-abs")]
    UntiedAbs,
    #[serde(rename = "untied-rel")]
    UntiedRel,
    #[serde(rename = "tupe-a")]
    TupeA,
    #[serde(rename = "tupe-r")]
    TupeR,
    #[serde(rename = "tupe-a-tie-cls")]
    TupeATieCls,
    #[serde(rename = "bert-ad")]
    BertAd,
}

impl EncodingVariant {
    pub const ALL: [EncodingVariant; 9] = [
        EncodingVariant::AbsBaseline,
        EncodingVariant::ShawRel,
        EncodingVariant::T5Rel,
        EncodingVariant::UntiedAbs,
        EncodingVariant::UntiedRel,
        EncodingVariant::TupeA,
        EncodingVariant::TupeR,
        EncodingVariant::TupeATieCls,
        EncodingVariant::BertAd,
    ];

    pub fn name(self) -> &'static str {
        use EncodingVariant::*;
        match self {
            AbsBaseline => "abs",
            ShawRel => "shaw",
            T5Rel => "t5",
            UntiedAbs => "untied-abs",
            UntiedRel => "untied-rel",
            TupeA => "tupe-a",
            TupeR => "tupe-r",
            TupeATieCls => "tupe-a-tie-cls",
            BertAd => "bert-ad",
        }
    }

    /// `LN(p_i)` is added to the word embedding at the input.
    pub fn adds_input_position(self) -> bool {
        use EncodingVariant::*;
        matches!(self, AbsBaseline | ShawRel | T5Rel)
    }

    /// Positions enter through a separately projected correlation added to
    /// the content scores.
    pub fn is_untied(self) -> bool {
        use EncodingVariant::*;
        matches!(self, UntiedAbs | UntiedRel | TupeA | TupeR | TupeATieCls)
    }

    /// Uses the per-head scalar bias `b[clip(j - i)]`.
    pub fn has_scalar_bias(self) -> bool {
        use EncodingVariant::*;
        matches!(self, T5Rel | UntiedRel | TupeR)
    }

    pub fn has_reset(self) -> bool {
        matches!(self, EncodingVariant::TupeA | EncodingVariant::TupeR)
    }

    /// Owns the positional projections `U_Q, U_K`.
    pub fn has_positional_projection(self) -> bool {
        self.is_untied() || self == EncodingVariant::BertAd
    }
}

impl fmt::Display for EncodingVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EncodingVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('_', "-");
        let alias = match key.as_str() {
            "abs-baseline" => "abs",
            "shaw-rel" => "shaw",
            "t5-rel" => "t5",
            other => other,
        };
        EncodingVariant::ALL
            .into_iter()
            .find(|v| v.name() == alias)
            .ok_or_else(|| {
                let names: Vec<_> = EncodingVariant::ALL.iter().map(|v| v.name()).collect();
                Error::invalid(format!("unknown variant {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

/// Named additive components of a score matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Term {
    WordWord,
    WordPos,
    PosWord,
    PosPos,
    RelKey,
    RelBias,
    ResetApplied,
}

impl Term {
    pub fn name(self) -> &'static str {
        match self {
            Term::WordWord => "word-word",
            Term::WordPos => "word-pos",
            Term::PosWord => "pos-word",
            Term::PosPos => "pos-pos",
            Term::RelKey => "rel-key",
            Term::RelBias => "rel-bias",
            Term::ResetApplied => "reset-applied",
        }
    }
}

/// Pre-softmax scores of one sequence, one `[n x n]` matrix per head, and the
/// additive terms that produced them.
#[derive(Clone, Debug)]
pub struct ScoreMap {
    pub scores: Vec<Var>,
    pub components: Vec<(Term, Vec<Var>)>,
}

impl ScoreMap {
    pub fn component(&self, term: Term) -> Option<&[Var]> {
        self.components
            .iter()
            .find(|(t, _)| *t == term)
            .map(|(_, v)| v.as_slice())
    }
}

/// Per-layer attention weights. `rel_key` is the key-side relative table
/// `a: [(2t + 1) x d_h]`, present only for the Shaw variant.
#[derive(Clone, Copy, Debug)]
pub struct LayerAttention {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub rel_key: Option<Var>,
    pub layout: HeadLayout,
}

/// Positional parameters available to a forward pass.
#[derive(Clone, Copy, Debug, Default)]
pub struct PositionalSources {
    pub table: Option<AbsolutePositionTable>,
    pub proj: Option<PositionalProjection>,
    pub bias: Option<RelativeBiasTable>,
    pub reset: Option<ResetParams>,
}

/// Content-free score terms for a sequence length, in the form a variant
/// consumes them.
#[derive(Clone, Debug, Default)]
pub struct PositionalState {
    pub n: usize,
    /// `LN(P[0..n])`, added to the input by the absolute-input variants.
    pub input_rows: Option<Var>,
    /// Untied absolute correlation per head, before bias and reset.
    pub absolute: Option<Vec<Var>>,
    /// Toeplitz scalar-bias matrix per head.
    pub bias: Option<Vec<Var>>,
    /// What untied variants add to the scores.
    pub untied_final: Option<Vec<Var>>,
    pub reset: bool,
    /// `(P'U_Q, P'U_K)` and the cached pos-pos term for the four-term variant.
    pub projected: Option<(Var, Var, Vec<Var>)>,
}

impl PositionalState {
    pub fn empty(n: usize) -> Self {
        PositionalState {
            n,
            ..Default::default()
        }
    }

    /// Builds every positional term the variant needs from `sources`.
    /// Missing sources leave the corresponding terms out.
    pub fn build(
        tape: &mut Tape,
        variant: EncodingVariant,
        sources: &PositionalSources,
        layout: HeadLayout,
        n: usize,
    ) -> Result<Self> {
        let mut state = PositionalState::empty(n);
        if variant.adds_input_position() {
            if let Some(table) = &sources.table {
                state.input_rows = Some(table.positions(tape, n)?);
            }
        }
        if variant.has_scalar_bias() {
            if let Some(bias) = &sources.bias {
                state.bias = Some(posenc::relative_bias_matrices(tape, bias, layout.heads, n)?);
            }
        }
        if variant.is_untied() {
            if let (Some(table), Some(proj)) = (&sources.table, &sources.proj) {
                let corr = posenc::compute_untied_correlation(tape, table, proj, n)?;
                state.absolute = Some(corr.heads.clone());
                let mut full = corr;
                if let Some(bias) = &state.bias {
                    let heads = full
                        .heads
                        .iter()
                        .zip(bias)
                        .map(|(&a, &b)| tape.add(a, b))
                        .collect::<Result<Vec<_>>>()?;
                    full.heads = heads;
                    full.kind.relative = true;
                }
                if variant.has_reset() {
                    if let Some(reset) = &sources.reset {
                        let thetas = posenc::compute_thetas(tape, reset, proj)?;
                        full = posenc::reset_cls(tape, &full, &thetas)?;
                        state.reset = true;
                    }
                }
                state.untied_final = Some(full.heads);
            }
        }
        if variant == EncodingVariant::BertAd {
            if let (Some(table), Some(proj)) = (&sources.table, &sources.proj) {
                let (pq, pk) = posenc::project_positions(tape, table, proj, n)?;
                let dh = layout.head_dim();
                let mut pos_pos = Vec::with_capacity(layout.heads);
                for h in 0..layout.heads {
                    let q = tape.slice_cols(pq, h * dh, dh)?;
                    let k = tape.slice_cols(pk, h * dh, dh)?;
                    let raw = tape.matmul_nt(q, k)?;
                    pos_pos.push(tape.scale(raw, layout.scale(4)));
                }
                state.projected = Some((pq, pk, pos_pos));
            }
        }
        Ok(state)
    }

    /// Wraps an already computed correlation as the untied term.
    pub fn from_correlation(v: &PositionalCorrelation) -> Self {
        PositionalState {
            n: v.n,
            untied_final: Some(v.heads.clone()),
            reset: v.kind.reset,
            ..Default::default()
        }
    }
}

/// Sums the terms; `[n x n]` positional terms are tiled over a stacked batch.
fn sum_terms(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = if tape.shape(acc) == tape.shape(t) { tape.add(acc, t)? } else { tape.add_tiled(acc, t)? };
    }
    Ok(acc)
}

/// Scores from projected queries and keys (`q = x W_Q`, `k = x W_K`).
/// `q` and `k` hold one sequence as `[n x d]`, or `B` equal-length sequences
/// stacked as `[B*n x d]`; each head's scores are then `B` stacked `n x n`
/// blocks, and content-free terms stay `[n x n]`.
pub fn assemble_scores(
    tape: &mut Tape,
    variant: EncodingVariant,
    q: Var,
    k: Var,
    rel_key: Option<(Var, usize)>,
    layout: HeadLayout,
    pos: &PositionalState,
) -> Result<ScoreMap> {
    let rows = tape.value(q).rows();
    let n = pos.n;
    if n == 0 || rows % n != 0 || tape.value(k).rows() != rows {
        return Err(Error::Shape {
            op: "positional state length",
            left: vec![rows],
            right: vec![pos.n],
        });
    }
    let batch = rows / n;
    let dh = layout.head_dim();
    let untied = variant.is_untied();
    let content_scale = if variant == EncodingVariant::BertAd {
        layout.scale(4)
    } else if untied {
        layout.scale(2)
    } else {
        layout.scale(1)
    };

    let mut scores = Vec::with_capacity(layout.heads);
    let mut parts: Vec<(Term, Vec<Var>)> = Vec::new();
    let record = |parts: &mut Vec<(Term, Vec<Var>)>, term: Term, v: Var| match parts.iter_mut().find(|(t, _)| *t == term) {
        Some((_, list)) => list.push(v),
        None => parts.push((term, vec![v])),
    };

    for h in 0..layout.heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let raw = if batch == 1 { tape.matmul_nt(qh, kh)? } else { tape.matmul_nt_grouped(qh, kh, batch)? };
        let ww = tape.scale(raw, content_scale);
        let mut terms = vec![(Term::WordWord, ww)];

        if let Some((a, clip)) = rel_key {
            let per_query = tape.matmul_nt(qh, a)?;
            let lookup = tape.relative_lookup(per_query, n, clip)?;
            terms.push((Term::RelKey, tape.scale(lookup, layout.scale(1))));
        }
        if untied {
            if let Some(fin) = &pos.untied_final {
                if pos.reset {
                    terms.push((Term::ResetApplied, fin[h]));
                } else if let (Some(abs), Some(bias)) = (&pos.absolute, &pos.bias) {
                    terms.push((Term::PosPos, abs[h]));
                    terms.push((Term::RelBias, bias[h]));
                } else {
                    terms.push((Term::PosPos, fin[h]));
                }
            }
        } else if let Some(bias) = &pos.bias {
            terms.push((Term::RelBias, bias[h]));
        }
        if let Some((pq, pk, pos_pos)) = &pos.projected {
            let pqh = tape.slice_cols(*pq, h * dh, dh)?;
            let pkh = tape.slice_cols(*pk, h * dh, dh)?;
            let wp = tape.matmul_nt(qh, pkh)?;
            let pw = if batch == 1 {
                tape.matmul_nt(pqh, kh)?
            } else {
                let tiled = tape.concat_rows(&vec![pqh; batch])?;
                tape.matmul_nt_grouped(tiled, kh, batch)?
            };
            terms.push((Term::WordPos, tape.scale(wp, layout.scale(4))));
            terms.push((Term::PosWord, tape.scale(pw, layout.scale(4))));
            terms.push((Term::PosPos, pos_pos[h]));
        }

        let vars: Vec<Var> = terms.iter().map(|&(_, v)| v).collect();
        scores.push(sum_terms(tape, &vars)?);
        for (term, v) in terms {
            record(&mut parts, term, v);
        }
    }
    Ok(ScoreMap {
        scores,
        components: parts,
    })
}

fn project_qk(tape: &mut Tape, x: Var, layer: &LayerAttention) -> Result<(Var, Var)> {
    Ok((tape.matmul(x, layer.w_q)?, tape.matmul(x, layer.w_k)?))
}

/// `(1/sqrt(d_h)) (x W_Q)(x W_K)^T` per head; `x` already holds `w + p`.
pub fn scores_abs_baseline(tape: &mut Tape, x: Var, layer: &LayerAttention) -> Result<ScoreMap> {
    let (q, k) = project_qk(tape, x, layer)?;
    let n = tape.value(x).rows();
    assemble_scores(tape, EncodingVariant::AbsBaseline, q, k, None, layer.layout, &PositionalState::empty(n))
}

/// Adds the key-side relative term `(x_i W_Q)(a_{clip(j-i)})^T / sqrt(d_h)`.
pub fn scores_shaw(tape: &mut Tape, x: Var, layer: &LayerAttention, clip: usize) -> Result<ScoreMap> {
    let a = layer
        .rel_key
        .ok_or_else(|| Error::invalid("Shaw scores need a relative key table"))?;
    let (q, k) = project_qk(tape, x, layer)?;
    let n = tape.value(x).rows();
    assemble_scores(tape, EncodingVariant::ShawRel, q, k, Some((a, clip)), layer.layout, &PositionalState::empty(n))
}

/// Content scores plus the unscaled scalar bias `b[h][clip(j - i)]`.
pub fn scores_t5(tape: &mut Tape, x: Var, layer: &LayerAttention, bias: &RelativeBiasTable) -> Result<ScoreMap> {
    let (q, k) = project_qk(tape, x, layer)?;
    let n = tape.value(x).rows();
    let mut pos = PositionalState::empty(n);
    pos.bias = Some(posenc::relative_bias_matrices(tape, bias, layer.layout.heads, n)?);
    assemble_scores(tape, EncodingVariant::T5Rel, q, k, None, layer.layout, &pos)
}

/// The four-term expansion with separate word and position projections,
/// each term scaled by `1/sqrt(4 d_h)`. `x` excludes positions.
pub fn scores_bert_ad(
    tape: &mut Tape,
    x: Var,
    table: &AbsolutePositionTable,
    proj: &PositionalProjection,
    layer: &LayerAttention,
) -> Result<ScoreMap> {
    let n = tape.value(x).rows();
    let sources = PositionalSources {
        table: Some(*table),
        proj: Some(*proj),
        ..Default::default()
    };
    let pos = PositionalState::build(tape, EncodingVariant::BertAd, &sources, layer.layout, n)?;
    let (q, k) = project_qk(tape, x, layer)?;
    assemble_scores(tape, EncodingVariant::BertAd, q, k, None, layer.layout, &pos)
}

/// `(1/sqrt(2 d_h)) (x W_Q)(x W_K)^T + V_final` per head. `x` excludes
/// positions; `v_final` already carries any bias and reset.
pub fn scores_tupe(
    tape: &mut Tape,
    x: Var,
    layer: &LayerAttention,
    v_final: &PositionalCorrelation,
) -> Result<ScoreMap> {
    let n = tape.value(x).rows();
    if n != v_final.n {
        return Err(Error::Shape {
            op: "scores_tupe",
            left: tape.shape(x).to_vec(),
            right: vec![v_final.n, v_final.n],
        });
    }
    if v_final.heads.len() != layer.layout.heads {
        return Err(Error::invalid(format!(
            "positional correlation has {} heads, layer has {}",
            v_final.heads.len(),
            layer.layout.heads
        )));
    }
    let (q, k) = project_qk(tape, x, layer)?;
    let pos = PositionalState::from_correlation(v_final);
    assemble_scores(tape, EncodingVariant::TupeA, q, k, None, layer.layout, &pos)
}

/// Dropout applied to attention probabilities: rate and stream key prefix.
#[derive(Clone, Debug)]
pub struct AttentionDropout {
    pub p: f64,
    pub key: Vec<u64>,
}

/// Key-padding mask for `softmax_rows`: entry `(i, j)` is masked when `j`
/// is padding.
/// `true` masks a key. `pad` covers one sequence.
pub fn key_padding_mask(pad: &[bool]) -> Result<Option<Vec<bool>>> {
    if pad.iter().all(|&p| p) {
        return Err(Error::FullyPadded);
    }
    if !pad.iter().any(|&p| p) {
        return Ok(None);
    }
    let n = pad.len();
    Ok(Some((0..n * n).map(|e| pad[e % n]).collect()))
}

/// Masks for `pad.len() / n` stacked sequences of length `n`.
fn stacked_padding_mask(pad: &[bool], n: usize) -> Result<Option<Vec<bool>>> {
    if n == 0 || pad.len() % n != 0 {
        return Err(Error::invalid("padding mask does not match the scores"));
    }
    let masks = pad.chunks(n).map(key_padding_mask).collect::<Result<Vec<_>>>()?;
    if masks.iter().all(Option::is_none) {
        return Ok(None);
    }
    Ok(Some(
        masks
            .into_iter()
            .flat_map(|m| m.unwrap_or_else(|| vec![false; n * n]))
            .collect(),
    ))
}

/// Softmax over each head's scores, dropout, and the weighted sum of the
/// value rows `v = x W_V`. Handles stacked batches like [`assemble_scores`];
/// `pad` then covers every stacked position. Returns the heads concatenated,
/// before the output projection.
pub fn mix_heads(
    tape: &mut Tape,
    scores: &ScoreMap,
    v: Var,
    layout: HeadLayout,
    pad: &[bool],
    dropout: Option<&AttentionDropout>,
) -> Result<Var> {
    let first = *scores.scores.first().ok_or_else(|| Error::invalid("no heads"))?;
    let n = tape.value(first).cols();
    let mask = stacked_padding_mask(pad, n)?;
    let batch = pad.len() / n;
    let dh = layout.head_dim();
    let mut heads = Vec::with_capacity(layout.heads);
    for (h, &s) in scores.scores.iter().enumerate() {
        let mut probs = tape.softmax_rows(s, mask.as_deref())?;
        if let Some(d) = dropout {
            let mut key = d.key.clone();
            key.push(h as u64);
            probs = tape.dropout(probs, d.p, &key)?;
        }
        let vh = tape.slice_cols(v, h * dh, dh)?;
        heads.push(if batch == 1 { tape.matmul(probs, vh)? } else { tape.matmul_grouped(probs, vh, batch)? });
    }
    tape.concat_cols(&heads)
}

/// `Concat(head_1, ..., head_H) W_O` for one sequence.
pub fn attend(
    tape: &mut Tape,
    scores: &ScoreMap,
    x: Var,
    layer: &LayerAttention,
    pad: &[bool],
    dropout: Option<&AttentionDropout>,
) -> Result<Var> {
    let n = tape.value(x).rows();
    if pad.len() != n {
        return Err(Error::Shape {
            op: "attend pad mask",
            left: vec![n],
            right: vec![pad.len()],
        });
    }
    let v = tape.matmul(x, layer.w_v)?;
    let mixed = mix_heads(tape, scores, v, layer.layout, pad, dropout)?;
    tape.matmul(mixed, layer.w_o)
}
