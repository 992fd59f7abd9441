//! Post-LN encoder: embeddings, attention blocks with a GELU feed-forward
//! layer, a masked-LM head tied to the word embeddings and a `[CLS]` head.
//!
//! A batch is a list of equal-length id sequences. Dense layers run on the
//! stacked `[B*n x d]` activations; attention runs per sequence.

use crate::attention::{self, AttentionDropout, LayerAttention, PositionalSources, PositionalState, ScoreMap};
use crate::error::{Error, Result};
use crate::posenc::{AbsolutePositionTable, PositionalProjection, RelativeBiasTable, ResetParams, LAYER_NORM_EPS};
use crate::rng::domain;
use crate::tensor::{Tape, Var};

use super::config::ModelConfig;
use super::params::Bound;
use super::vocab::{CLS, PAD};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardMode {
    /// Enables dropout.
    pub train: bool,
    /// Training step; part of every dropout stream key.
    pub step: u64,
    /// Rebuild the positional terms in every layer instead of reusing the
    /// ones computed before the first layer.
    pub recompute_positional: bool,
}

impl ForwardMode {
    pub fn eval() -> Self {
        ForwardMode {
            train: false,
            step: 0,
            recompute_positional: false,
        }
    }

    pub fn train(step: u64) -> Self {
        ForwardMode {
            train: true,
            step,
            recompute_positional: false,
        }
    }
}

/// Final hidden states `[B*n x d]`.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub hidden: Var,
    pub batch: usize,
    pub n: usize,
}

/// Checks a batch and returns its common length.
pub fn check_batch(cfg: &ModelConfig, tokens: &[Vec<usize>]) -> Result<usize> {
    let n = tokens.first().ok_or_else(|| Error::invalid("empty batch"))?.len();
    if n == 0 {
        return Err(Error::invalid("empty sequence"));
    }
    if n > cfg.n_max {
        return Err(Error::SequenceTooLong { n, n_max: cfg.n_max });
    }
    for seq in tokens {
        if seq.len() != n {
            return Err(Error::invalid(format!(
                "batch mixes sequence lengths {n} and {}",
                seq.len()
            )));
        }
        if let Some(&id) = seq.iter().find(|&&id| id >= cfg.vocab_size) {
            return Err(Error::TokenOutOfRange { id, vocab: cfg.vocab_size });
        }
    }
    Ok(n)
}

pub fn positional_sources(cfg: &ModelConfig, vars: &Bound) -> Result<PositionalSources> {
    if !cfg.positional {
        return Ok(PositionalSources::default());
    }
    let layout = cfg.layout()?;
    let table = AbsolutePositionTable {
        table: vars.get("pos.table")?,
        norm: Some((vars.get("pos.ln.gain")?, vars.get("pos.ln.bias")?)),
    };
    let proj = match (vars.optional("pos.u_q"), vars.optional("pos.u_k")) {
        (Some(u_q), Some(u_k)) => Some(PositionalProjection { u_q, u_k, layout }),
        _ => None,
    };
    let bias = vars
        .optional("pos.rel_bias")
        .map(|bias| RelativeBiasTable { bias, clip: cfg.clip });
    let reset = match (vars.optional("pos.theta1"), vars.optional("pos.theta2")) {
        (Some(theta1), Some(theta2)) => Some(ResetParams { theta1, theta2 }),
        _ => None,
    };
    Ok(PositionalSources {
        table: Some(table),
        proj,
        bias,
        reset,
    })
}

pub fn positional_state(tape: &mut Tape, cfg: &ModelConfig, vars: &Bound, n: usize) -> Result<PositionalState> {
    let sources = positional_sources(cfg, vars)?;
    PositionalState::build(tape, cfg.variant, &sources, cfg.layout()?, n)
}

fn dropout_key(cfg: &ModelConfig, mode: ForwardMode, site: &[u64]) -> Vec<u64> {
    let mut key = vec![domain::DROPOUT, cfg.seed, mode.step];
    key.extend_from_slice(site);
    key
}

fn maybe_dropout(tape: &mut Tape, cfg: &ModelConfig, mode: ForwardMode, a: Var, site: &[u64]) -> Result<Var> {
    if mode.train && cfg.dropout > 0.0 {
        tape.dropout(a, cfg.dropout, &dropout_key(cfg, mode, site))
    } else {
        Ok(a)
    }
}

/// Word embeddings, plus `LN(p_i)` for the absolute-input variants, then
/// embedding dropout.
pub fn embed(
    tape: &mut Tape,
    cfg: &ModelConfig,
    vars: &Bound,
    tokens: &[Vec<usize>],
    pos: &PositionalState,
    mode: ForwardMode,
) -> Result<Var> {
    let n = check_batch(cfg, tokens)?;
    let ids: Vec<usize> = tokens.iter().flatten().copied().collect();
    let mut x = tape.gather_rows(vars.get("embed.word")?, &ids)?;
    if let Some(rows) = pos.input_rows {
        if tape.value(rows).rows() != n {
            return Err(Error::invalid("positional rows do not match the sequence length"));
        }
        let tiled = if tokens.len() == 1 { rows } else { tape.concat_rows(&vec![rows; tokens.len()])? };
        x = tape.add(x, tiled)?;
    }
    maybe_dropout(tape, cfg, mode, x, &[0])
}

fn layer_attention(cfg: &ModelConfig, vars: &Bound, l: usize) -> Result<LayerAttention> {
    let p = |s: &str| format!("layer{l}.{s}");
    Ok(LayerAttention {
        w_q: vars.get(&p("attn.w_q"))?,
        w_k: vars.get(&p("attn.w_k"))?,
        w_v: vars.get(&p("attn.w_v"))?,
        w_o: vars.get(&p("attn.w_o"))?,
        rel_key: vars.optional(&p("attn.rel_key")),
        layout: cfg.layout()?,
    })
}

#[allow(clippy::too_many_arguments)]
fn block(
    tape: &mut Tape,
    cfg: &ModelConfig,
    vars: &Bound,
    l: usize,
    x: Var,
    tokens: &[Vec<usize>],
    pos: &PositionalState,
    mode: ForwardMode,
    keep: Option<&[usize]>,
) -> Result<Var> {
    let layer = layer_attention(cfg, vars, l)?;
    let q = tape.matmul(x, layer.w_q)?;
    let k = tape.matmul(x, layer.w_k)?;
    let v = tape.matmul(x, layer.w_v)?;
    let site = l as u64 + 1;
    let rel_key = layer.rel_key.map(|a| (a, cfg.clip));
    let scores = attention::assemble_scores(tape, cfg.variant, q, k, rel_key, layer.layout, pos)?;
    let pad: Vec<bool> = tokens.iter().flatten().map(|&t| t == PAD).collect();
    let drop = (mode.train && cfg.dropout > 0.0).then(|| AttentionDropout {
        p: cfg.dropout,
        key: dropout_key(cfg, mode, &[site, 1]),
    });
    let mut mixed = attention::mix_heads(tape, &scores, v, layer.layout, &pad, drop.as_ref())?;
    let mut x = x;
    if let Some(rows) = keep {
        mixed = tape.gather_rows(mixed, rows)?;
        x = tape.gather_rows(x, rows)?;
    }
    let attn = tape.matmul(mixed, layer.w_o)?;
    let attn = maybe_dropout(tape, cfg, mode, attn, &[site, 2])?;
    let p = |s: &str| format!("layer{l}.{s}");
    let res = tape.add(x, attn)?;
    let h = tape.layer_norm(res, vars.get(&p("ln1.gain"))?, vars.get(&p("ln1.bias"))?, LAYER_NORM_EPS)?;
    let f = tape.matmul(h, vars.get(&p("ffn.w1"))?)?;
    let f = tape.add_row(f, vars.get(&p("ffn.b1"))?)?;
    let f = tape.gelu(f);
    let f = tape.matmul(f, vars.get(&p("ffn.w2"))?)?;
    let f = tape.add_row(f, vars.get(&p("ffn.b2"))?)?;
    let f = maybe_dropout(tape, cfg, mode, f, &[site, 3])?;
    let res = tape.add(h, f)?;
    tape.layer_norm(res, vars.get(&p("ln2.gain"))?, vars.get(&p("ln2.bias"))?, LAYER_NORM_EPS)
}

pub fn encode(tape: &mut Tape, cfg: &ModelConfig, vars: &Bound, tokens: &[Vec<usize>], mode: ForwardMode) -> Result<Encoded> {
    encode_rows(tape, cfg, vars, tokens, mode, None)
}

/// Like [`encode`], but everything after the last layer's attention mixing
/// runs only on the stacked rows in `keep`, and `hidden` holds just those
/// rows in order.
pub fn encode_rows(
    tape: &mut Tape,
    cfg: &ModelConfig,
    vars: &Bound,
    tokens: &[Vec<usize>],
    mode: ForwardMode,
    keep: Option<&[usize]>,
) -> Result<Encoded> {
    let n = check_batch(cfg, tokens)?;
    let pos = positional_state(tape, cfg, vars, n)?;
    let mut x = embed(tape, cfg, vars, tokens, &pos, mode)?;
    for l in 0..cfg.layers {
        let rows = if l + 1 == cfg.layers { keep } else { None };
        x = if mode.recompute_positional && l > 0 {
            let fresh = positional_state(tape, cfg, vars, n)?;
            block(tape, cfg, vars, l, x, tokens, &fresh, mode, rows)?
        } else {
            block(tape, cfg, vars, l, x, tokens, &pos, mode, rows)?
        };
    }
    Ok(Encoded {
        hidden: x,
        batch: tokens.len(),
        n,
    })
}

/// Pre-softmax scores of the first layer in eval mode, heads stacked as
/// `[B*n x n]`, with their additive components.
pub fn first_layer_scores(tape: &mut Tape, cfg: &ModelConfig, vars: &Bound, tokens: &[Vec<usize>]) -> Result<ScoreMap> {
    let n = check_batch(cfg, tokens)?;
    let pos = positional_state(tape, cfg, vars, n)?;
    let x = embed(tape, cfg, vars, tokens, &pos, ForwardMode::eval())?;
    let layer = layer_attention(cfg, vars, 0)?;
    let q = tape.matmul(x, layer.w_q)?;
    let k = tape.matmul(x, layer.w_k)?;
    let rel_key = layer.rel_key.map(|a| (a, cfg.clip));
    attention::assemble_scores(tape, cfg.variant, q, k, rel_key, layer.layout, &pos)
}

/// Vocabulary logits for the given rows of the stacked hidden states.
pub fn mlm_logits_at(tape: &mut Tape, vars: &Bound, hidden: Var, rows: &[usize]) -> Result<Var> {
    let selected = tape.gather_rows(hidden, rows)?;
    let logits = tape.matmul_nt(selected, vars.get("embed.word")?)?;
    tape.add_row(logits, vars.get("mlm.bias")?)
}

/// Logits `[B*n x vocab]` for every position.
pub fn forward_mlm(tape: &mut Tape, cfg: &ModelConfig, vars: &Bound, tokens: &[Vec<usize>], mode: ForwardMode) -> Result<Var> {
    let enc = encode(tape, cfg, vars, tokens, mode)?;
    let rows: Vec<usize> = (0..enc.batch * enc.n).collect();
    mlm_logits_at(tape, vars, enc.hidden, &rows)
}

/// Masked-LM loss over labelled positions.
#[derive(Clone, Debug)]
pub struct MlmOutput {
    pub loss: Var,
    /// Logits of the labelled positions, in batch order.
    pub logits: Var,
    pub targets: Vec<usize>,
}

/// Mean cross-entropy over positions whose label is `Some`. With no labels
/// the loss is a constant zero.
pub fn mlm_loss(
    tape: &mut Tape,
    cfg: &ModelConfig,
    vars: &Bound,
    tokens: &[Vec<usize>],
    labels: &[Vec<Option<usize>>],
    mode: ForwardMode,
) -> Result<MlmOutput> {
    if labels.len() != tokens.len() || labels.iter().zip(tokens).any(|(l, t)| l.len() != t.len()) {
        return Err(Error::invalid("labels do not match the token batch"));
    }
    let n = check_batch(cfg, tokens)?;
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (b, seq) in labels.iter().enumerate() {
        for (i, label) in seq.iter().enumerate() {
            if let Some(t) = *label {
                rows.push(b * n + i);
                targets.push(t);
            }
        }
    }
    if rows.is_empty() {
        let enc = encode_rows(tape, cfg, vars, tokens, mode, Some(&[0]))?;
        let logits = mlm_logits_at(tape, vars, enc.hidden, &[0])?;
        let loss = tape.cross_entropy(logits, &[None], 1.0)?;
        return Ok(MlmOutput { loss, logits, targets });
    }
    let enc = encode_rows(tape, cfg, vars, tokens, mode, Some(&rows))?;
    let all: Vec<usize> = (0..rows.len()).collect();
    let logits = mlm_logits_at(tape, vars, enc.hidden, &all)?;
    let wrapped: Vec<Option<usize>> = targets.iter().map(|&t| Some(t)).collect();
    let loss = tape.cross_entropy(logits, &wrapped, targets.len() as f64)?;
    Ok(MlmOutput { loss, logits, targets })
}

/// Class logits `[B x classes]` from each sequence's position-0 output.
pub fn forward_cls(tape: &mut Tape, cfg: &ModelConfig, vars: &Bound, tokens: &[Vec<usize>], mode: ForwardMode) -> Result<Var> {
    if tokens.iter().any(|s| s.first() != Some(&CLS)) {
        return Err(Error::MissingCls);
    }
    if cfg.num_classes == 0 {
        return Err(Error::invalid("model has no classification head"));
    }
    let enc = encode(tape, cfg, vars, tokens, mode)?;
    let rows: Vec<usize> = (0..enc.batch).map(|b| b * enc.n).collect();
    let first = tape.gather_rows(enc.hidden, &rows)?;
    let logits = tape.matmul(first, vars.get("cls.weight")?)?;
    tape.add_row(logits, vars.get("cls.bias")?)
}

