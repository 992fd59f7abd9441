//! Masked-LM and classification training on synthetic corpora.

mod data;
mod masking;
mod optim;

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::vocab::PAD;
use crate::model::{forward_cls, mlm_loss, param_specs, ForwardMode, Model, ModelConfig};
use crate::rng::{self, domain};
use crate::tensor::{Tape, Tensor};

pub use data::{
    gen_parity_task, gen_position_task, mask_rate, no_position_bayes, parity_label, Corpus, NoPositionBayes,
    ParityTask, PositionTask, Probe, PARITY_DESIGNATED,
};
pub use masking::{is_eligible, mask_sequence, Corruption, Masked, MaskingConfig};
pub use optim::{adam_step, lr_at, AdamState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub adam_eps: f64,
    pub adam_betas: (f64, f64),
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub mask_prob: f64,
    /// Mask, random-token and keep fractions of the selected positions.
    pub split: (f64, f64, f64),
    pub seed: u64,
    /// Metric rows are written every `log_every` steps and at the last step.
    pub log_every: usize,
    /// 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 32,
            peak_lr: 1e-3,
            warmup_steps: 100,
            adam_eps: 1e-6,
            adam_betas: (0.9, 0.999),
            weight_decay: 0.01,
            clip_norm: 1.0,
            mask_prob: 0.15,
            split: (0.8, 0.1, 0.1),
            seed: 0,
            log_every: 100,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps > 0 && self.warmup_steps >= self.steps {
            return Err(Error::invalid(format!(
                "warmup_steps ({}) must be below steps ({})",
                self.warmup_steps, self.steps
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return Err(Error::invalid(format!("mask_prob {} not in [0, 1]", self.mask_prob)));
        }
        let (a, b, c) = self.split;
        if [a, b, c].iter().any(|x| *x < 0.0) || (a + b + c - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("split {:?} must be non-negative and sum to 1", self.split)));
        }
        let (b1, b2) = self.adam_betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(Error::invalid("adam betas must lie in [0, 1)"));
        }
        if !(self.peak_lr >= 0.0 && self.adam_eps > 0.0 && self.weight_decay >= 0.0 && self.clip_norm >= 0.0) {
            return Err(Error::invalid("learning rate, eps, weight decay and clip norm must be non-negative"));
        }
        Ok(())
    }

    pub fn masking(&self) -> MaskingConfig {
        MaskingConfig {
            prob: self.mask_prob,
            split: self.split,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Mlm,
    Cls,
}

/// Encoded training examples.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub sequences: Vec<Vec<usize>>,
    pub classes: Option<Vec<usize>>,
}

impl Dataset {
    pub fn from_corpus(corpus: &Corpus, vocab: &crate::model::Vocab) -> Self {
        Dataset {
            sequences: corpus.encode(vocab),
            classes: corpus.labels.clone(),
        }
    }
}

/// One padded training batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub tokens: Vec<Vec<usize>>,
    /// Original ids at corrupted positions; empty for classification.
    pub labels: Vec<Vec<Option<usize>>>,
    pub classes: Option<Vec<usize>>,
}

impl Batch {
    pub fn pad_mask(&self) -> Vec<Vec<bool>> {
        self.tokens.iter().map(|s| s.iter().map(|&t| t == PAD).collect()).collect()
    }
}

fn pad_to(seq: &[usize], n: usize) -> Vec<usize> {
    let mut out = seq.to_vec();
    out.resize(n, PAD);
    out
}

/// Draws `batch_size` examples for `step` and masks them for MLM.
pub fn make_batch(data: &Dataset, cfg: &TrainConfig, objective: Objective, vocab_size: usize, step: usize) -> Batch {
    let mut pick = rng::stream(&[domain::SHUFFLE, cfg.seed, step as u64]);
    let idx: Vec<usize> = (0..cfg.batch_size)
        .map(|_| pick.random_range(0..data.sequences.len()))
        .collect();
    let n = idx.iter().map(|&i| data.sequences[i].len()).max().unwrap_or(0);
    let raw: Vec<Vec<usize>> = idx.iter().map(|&i| pad_to(&data.sequences[i], n)).collect();
    match objective {
        Objective::Cls => Batch {
            tokens: raw,
            labels: Vec::new(),
            classes: data.classes.as_ref().map(|c| idx.iter().map(|&i| c[i]).collect()),
        },
        Objective::Mlm => {
            let masking = cfg.masking();
            let (tokens, labels) = raw
                .iter()
                .enumerate()
                .map(|(b, seq)| {
                    let mut r = rng::stream(&[domain::MASKING, cfg.seed, step as u64, b as u64]);
                    let m = mask_sequence(seq, &masking, vocab_size, &mut r);
                    (m.tokens, m.labels)
                })
                .unzip();
            Batch {
                tokens,
                labels,
                classes: None,
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    /// Masked-token accuracy (MLM) or class accuracy (CLS) on the batch.
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricLog {
    pub rows: Vec<LogRow>,
}

impl MetricLog {
    pub const HEADER: &'static str = "step,loss,lr,accuracy";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::HEADER);
        for r in &self.rows {
            let _ = writeln!(out, "{},{:.17e},{:.17e},{:.17e}", r.step, r.loss, r.lr, r.accuracy);
        }
        out
    }
}

/// Where training writes `metrics.csv` and checkpoints.
#[derive(Clone, Debug)]
pub struct OutputDir {
    pub dir: PathBuf,
}

impl OutputDir {
    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }

    pub fn checkpoint(&self, step: usize) -> PathBuf {
        self.dir.join(format!("checkpoint_{step:06}.tupe"))
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.dir.join("final.tupe")
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: MetricLog,
    pub steps: usize,
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

fn row_hits(logits: &Tensor, targets: &[usize]) -> usize {
    targets
        .iter()
        .enumerate()
        .filter(|(i, &t)| argmax(logits.row(*i)) == t)
        .count()
}

/// Loss, gradients by parameter name, and (hits, count) for one batch.
fn batch_gradients(
    model: &Model,
    batch: &Batch,
    objective: Objective,
    step: usize,
) -> Result<(f64, IndexMap<String, Tensor>, usize, usize)> {
    let mut tape = Tape::new();
    let vars = model.params.bind(&mut tape, true);
    let mode = ForwardMode::train(step as u64);
    let (loss, hits, count) = match objective {
        Objective::Mlm => {
            let out = mlm_loss(&mut tape, &model.config, &vars, &batch.tokens, &batch.labels, mode)?;
            let hits = row_hits(tape.value(out.logits), &out.targets);
            (out.loss, hits, out.targets.len())
        }
        Objective::Cls => {
            let classes = batch
                .classes
                .as_ref()
                .ok_or_else(|| Error::invalid("classification training needs class labels"))?;
            let logits = forward_cls(&mut tape, &model.config, &vars, &batch.tokens, mode)?;
            let wrapped: Vec<Option<usize>> = classes.iter().map(|&c| Some(c)).collect();
            let loss = tape.cross_entropy(logits, &wrapped, classes.len() as f64)?;
            let hits = row_hits(tape.value(logits), classes);
            (loss, hits, classes.len())
        }
    };
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Diverged { step, loss: value });
    }
    let grads = tape.backward(loss)?;
    let named = vars
        .iter()
        .filter_map(|(k, &v)| grads.get(v).map(|g| (k.clone(), g)))
        .collect();
    Ok((value, named, hits, count))
}

/// Trains `model_cfg` from its seeded initialization. Steps are numbered
/// from 1 and step `s` uses `lr_at(s)`.
pub fn train_loop(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    data: &Dataset,
    objective: Objective,
    out: Option<&OutputDir>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut model = Model::new(model_cfg.clone())?;
    if data.sequences.is_empty() {
        return Err(Error::invalid("training corpus is empty"));
    }
    if objective == Objective::Cls && data.classes.is_none() {
        return Err(Error::invalid("classification training needs a labelled corpus"));
    }
    if let Some(o) = out {
        std::fs::create_dir_all(&o.dir).map_err(|e| Error::file(&o.dir, e))?;
    }
    let decaying: HashSet<String> = param_specs(model_cfg)
        .into_iter()
        .filter(|s| s.kind.decays())
        .map(|s| s.name)
        .collect();
    let mut state = AdamState::new(&model.params, |n| decaying.contains(n));
    let mut log = MetricLog::default();

    for step in 1..=cfg.steps {
        let batch = make_batch(data, cfg, objective, model_cfg.vocab_size, step);
        let (loss, grads, hits, count) = batch_gradients(&model, &batch, objective, step)?;
        let lr = lr_at(step, cfg);
        adam_step(&mut model.params, &grads, &mut state, cfg, lr)?;
        if (cfg.log_every > 0 && step % cfg.log_every == 0) || step == cfg.steps {
            log.rows.push(LogRow {
                step,
                loss,
                lr,
                accuracy: if count == 0 { 0.0 } else { hits as f64 / count as f64 },
            });
        }
        if let Some(o) = out {
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
                model.save(&o.checkpoint(step), step as u64)?;
            }
        }
    }
    if let Some(o) = out {
        model.save(&o.final_checkpoint(), cfg.steps as u64)?;
        let path = o.metrics();
        std::fs::write(&path, log.to_csv()).map_err(|e| Error::file(&path, e))?;
    }
    Ok(TrainOutcome {
        model,
        log,
        steps: cfg.steps,
    })
}

/// Worker count for evaluation, from `TUPE_THREADS` (default 1).
pub fn thread_count() -> usize {
    std::env::var("TUPE_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or(1)
}

const EVAL_CHUNK: usize = 64;

fn chunked<T: Send>(len: usize, f: impl Fn(std::ops::Range<usize>) -> Result<T> + Sync) -> Result<Vec<T>> {
    use rayon::prelude::*;
    let ranges: Vec<_> = (0..len).step_by(EVAL_CHUNK).map(|s| s..(s + EVAL_CHUNK).min(len)).collect();
    let threads = thread_count();
    if threads == 1 {
        return ranges.into_iter().map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::invalid(e.to_string()))?;
    pool.install(|| ranges.into_par_iter().map(&f).collect())
}

/// Fraction of labelled probe positions whose argmax prediction is correct.
/// Sequences are grouped by length.
pub fn evaluate_mlm(model: &Model, probe: &Probe) -> Result<f64> {
    let mut by_len: IndexMap<usize, Vec<usize>> = IndexMap::new();
    for (i, s) in probe.tokens.iter().enumerate() {
        by_len.entry(s.len()).or_default().push(i);
    }
    let mut hits = 0;
    let mut total = 0;
    for idx in by_len.values() {
        let parts = chunked(idx.len(), |r| {
            let tokens: Vec<Vec<usize>> = idx[r.clone()].iter().map(|&i| probe.tokens[i].clone()).collect();
            let logits = model.mlm_logits(&tokens, ForwardMode::eval())?;
            let n = tokens[0].len();
            let mut h = 0;
            let mut t = 0;
            for (b, &i) in idx[r].iter().enumerate() {
                for (pos, label) in probe.labels[i].iter().enumerate() {
                    if let Some(want) = label {
                        t += 1;
                        h += usize::from(argmax(logits.row(b * n + pos)) == *want);
                    }
                }
            }
            Ok((h, t))
        })?;
        for (h, t) in parts {
            hits += h;
            total += t;
        }
    }
    Ok(if total == 0 { 0.0 } else { hits as f64 / total as f64 })
}

/// Class accuracy of the `[CLS]` head.
pub fn evaluate_cls(model: &Model, data: &Dataset) -> Result<f64> {
    let classes = data
        .classes
        .as_ref()
        .ok_or_else(|| Error::invalid("classification evaluation needs class labels"))?;
    let n = data.sequences.iter().map(Vec::len).max().unwrap_or(0);
    let parts = chunked(data.sequences.len(), |r| {
        let tokens: Vec<Vec<usize>> = data.sequences[r.clone()].iter().map(|s| pad_to(s, n)).collect();
        let logits = model.cls_logits(&tokens, ForwardMode::eval())?;
        Ok(row_hits(&logits, &classes[r]))
    })?;
    let hits: usize = parts.into_iter().sum();
    Ok(if classes.is_empty() { 0.0 } else { hits as f64 / classes.len() as f64 })
}

/// Path-carrying variant of [`OutputDir`] construction.
pub fn output_dir(dir: &Path) -> OutputDir {
    OutputDir { dir: dir.to_path_buf() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::EncodingVariant;

    fn tiny(variant: EncodingVariant) -> ModelConfig {
        ModelConfig {
            d: 16,
            heads: 2,
            layers: 1,
            d_ff: 32,
            n_max: 12,
            vocab_size: 30,
            clip: 4,
            variant,
            ..ModelConfig::default()
        }
    }

    fn position_data(n: usize) -> (Dataset, usize) {
        let task = PositionTask::default();
        let vocab = task.vocab().unwrap();
        let corpus = task.generate(200, n, 1).unwrap();
        (Dataset::from_corpus(&corpus, &vocab), vocab.len())
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            warmup_steps: 10,
            steps: 10,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            split: (0.8, 0.1, 0.2),
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn masking_statistics() {
        let line: Vec<usize> = std::iter::once(crate::model::vocab::CLS).chain((0..100).map(|i| 4 + i % 26)).collect();
        let cfg = TrainConfig::default().masking();
        let (mut selected, mut eligible) = (0usize, 0usize);
        let mut kinds = [0usize; 3];
        for s in 0..1000u64 {
            let m = mask_sequence(&line, &cfg, 30, &mut rng::stream(&[s]));
            assert_eq!(m.tokens[0], crate::model::vocab::CLS);
            eligible += 100;
            for c in m.corruption.iter().flatten() {
                selected += 1;
                kinds[*c as usize] += 1;
            }
        }
        let rate = selected as f64 / eligible as f64;
        assert!((rate - 0.15).abs() < 0.01, "{rate}");
        let frac = |k: usize| kinds[k] as f64 / selected as f64;
        assert!((frac(0) - 0.8).abs() < 0.02 && (frac(1) - 0.1).abs() < 0.02 && (frac(2) - 0.1).abs() < 0.02);
    }

    #[test]
    fn zero_steps_returns_the_initial_model() {
        let (data, _) = position_data(8);
        let cfg = TrainConfig {
            steps: 0,
            warmup_steps: 0,
            ..TrainConfig::default()
        };
        let out = train_loop(&tiny(EncodingVariant::TupeA), &cfg, &data, Objective::Mlm, None).unwrap();
        assert!(out.log.rows.is_empty());
        assert_eq!(out.model, Model::new(tiny(EncodingVariant::TupeA)).unwrap());
    }

    #[test]
    fn first_step_loss_is_near_uniform() {
        let (data, v) = position_data(10);
        let cfg = TrainConfig {
            steps: 1,
            warmup_steps: 0,
            log_every: 1,
            ..TrainConfig::default()
        };
        let mc = ModelConfig { vocab_size: v, ..tiny(EncodingVariant::TupeR) };
        let out = train_loop(&mc, &cfg, &data, Objective::Mlm, None).unwrap();
        let loss = out.log.rows[0].loss;
        let uniform = (v as f64).ln();
        assert!((loss - uniform).abs() < 0.1 * uniform, "{loss} vs {uniform}");
    }

    #[test]
    fn runs_are_reproducible_and_files_are_written() {
        let (data, v) = position_data(10);
        let cfg = TrainConfig {
            steps: 6,
            warmup_steps: 2,
            batch_size: 4,
            log_every: 2,
            checkpoint_every: 3,
            ..TrainConfig::default()
        };
        let mc = ModelConfig { vocab_size: v, ..tiny(EncodingVariant::ShawRel) };
        let dir = tempfile::tempdir().unwrap();
        let out = output_dir(dir.path());
        let a = train_loop(&mc, &cfg, &data, Objective::Mlm, Some(&out)).unwrap();
        let b = train_loop(&mc, &cfg, &data, Objective::Mlm, None).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.model, b.model);
        assert_eq!(a.log.rows.iter().map(|r| r.step).collect::<Vec<_>>(), vec![2, 4, 6]);
        let csv = std::fs::read_to_string(out.metrics()).unwrap();
        assert!(csv.starts_with(MetricLog::HEADER));
        assert_eq!(csv.lines().count(), 4);
        assert!(out.checkpoint(3).exists() && out.checkpoint(6).exists());
        let (saved, step) = Model::load(&out.final_checkpoint()).unwrap();
        assert_eq!(step, 6);
        assert_eq!(saved, a.model);
    }

    #[test]
    fn classification_training_runs() {
        let task = ParityTask::default();
        let vocab = task.vocab().unwrap();
        let corpus = task.generate(64, 8, 2).unwrap();
        let data = Dataset::from_corpus(&corpus, &vocab);
        let cfg = TrainConfig {
            steps: 3,
            warmup_steps: 1,
            batch_size: 8,
            log_every: 1,
            ..TrainConfig::default()
        };
        let mc = ModelConfig { vocab_size: vocab.len(), ..tiny(EncodingVariant::TupeATieCls) };
        let out = train_loop(&mc, &cfg, &data, Objective::Cls, None).unwrap();
        assert_eq!(out.log.rows.len(), 3);
        let acc = evaluate_cls(&out.model, &data).unwrap();
        assert!((0.0..=1.0).contains(&acc));
        let unlabeled = Dataset { classes: None, ..data };
        assert!(train_loop(&mc, &cfg, &unlabeled, Objective::Cls, None).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let (data, v) = position_data(10);
        let cfg = TrainConfig {
            steps: 2,
            warmup_steps: 1,
            ..TrainConfig::default()
        };
        let mut mc = ModelConfig { vocab_size: v, ..tiny(EncodingVariant::AbsBaseline) };
        mc.init_std = 1e200;
        let err = train_loop(&mc, &cfg, &data, Objective::Mlm, None).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. } | Error::NonFinite(_)), "{err}");
    }

    #[test]
    fn batches_pad_and_never_corrupt_specials() {
        let data = Dataset {
            sequences: vec![vec![1, 4, 5], vec![1, 4, 5, 6, 7]],
            classes: None,
        };
        let cfg = TrainConfig {
            batch_size: 16,
            mask_prob: 1.0,
            ..TrainConfig::default()
        };
        let b = make_batch(&data, &cfg, Objective::Mlm, 10, 1);
        for (toks, (labels, pad)) in b.tokens.iter().zip(b.labels.iter().zip(b.pad_mask())) {
            assert_eq!(toks.len(), 5);
            assert_eq!(toks[0], crate::model::vocab::CLS);
            assert!(labels[0].is_none());
            for i in 0..5 {
                if pad[i] {
                    assert!(labels[i].is_none());
                }
            }
        }
        assert_eq!(b, make_batch(&data, &cfg, Objective::Mlm, 10, 1));
    }
}
