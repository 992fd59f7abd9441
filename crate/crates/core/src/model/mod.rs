//! BERT-style encoder with a selectable positional-encoding variant.

pub mod checkpoint;
mod config;
mod encoder;
mod params;
pub mod vocab;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use checkpoint::{CheckpointError, DType, RawCheckpoint, StoredTensor};
pub use config::ModelConfig;
pub use encoder::{
    check_batch, embed, encode, encode_rows, first_layer_scores, forward_cls, forward_mlm, mlm_logits_at, mlm_loss, positional_sources,
    positional_state, Encoded, ForwardMode, MlmOutput,
};
pub use params::{param_specs, Bound, Census, Init, ParamKind, ParamSpec, Params};
pub use vocab::Vocab;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{self, domain};
use crate::tensor::{grad_check_with_fault, Fault, GradCheckReport, Tape, Tensor};

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    step: u64,
}

/// A configuration with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Params,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let params = Params::init(&config)?;
        Ok(Model { config, params })
    }

    fn run<F>(&self, tokens: &[Vec<usize>], mode: ForwardMode, f: F) -> Result<Tensor>
    where
        F: FnOnce(&mut Tape, &ModelConfig, &Bound, &[Vec<usize>], ForwardMode) -> Result<crate::tensor::Var>,
    {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        let out = f(&mut tape, &self.config, &vars, tokens, mode)?;
        Ok(tape.value(out).clone())
    }

    /// Final hidden states `[B*n x d]`.
    pub fn hidden(&self, tokens: &[Vec<usize>], mode: ForwardMode) -> Result<Tensor> {
        self.run(tokens, mode, |t, c, v, x, m| Ok(encode(t, c, v, x, m)?.hidden))
    }

    /// Masked-LM logits `[B*n x vocab]`.
    pub fn mlm_logits(&self, tokens: &[Vec<usize>], mode: ForwardMode) -> Result<Tensor> {
        self.run(tokens, mode, forward_mlm)
    }

    pub fn cls_logits(&self, tokens: &[Vec<usize>], mode: ForwardMode) -> Result<Tensor> {
        self.run(tokens, mode, forward_cls)
    }

    pub fn to_bytes(&self, step: u64) -> Result<Vec<u8>> {
        let header = serde_json::to_string(&Header {
            config: self.config.clone(),
            step,
        })
        .map_err(|e| Error::invalid(format!("cannot serialize config: {e}")))?;
        let tensors = self
            .params
            .iter()
            .map(|(name, t)| StoredTensor {
                name: name.clone(),
                dtype: self.params.dtype(name),
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
            .collect();
        Ok(checkpoint::encode(&RawCheckpoint { header, tensors }))
    }

    /// Parses a checkpoint, checking every tensor against the stored
    /// configuration. Returns the model and its training step.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, u64)> {
        let raw = checkpoint::decode(bytes)?;
        let header: Header = serde_json::from_str(&raw.header)
            .map_err(|e| CheckpointError::Malformed(format!("config block: {e}")))?;
        header.config.validate()?;
        let specs = param_specs(&header.config);
        let mut params = Params::default();
        for t in raw.tensors {
            let spec = specs
                .iter()
                .find(|s| s.name == t.name)
                .ok_or_else(|| CheckpointError::UnknownTensor(t.name.clone()))?;
            if spec.shape != t.shape {
                return Err(CheckpointError::ShapeMismatch {
                    name: t.name,
                    expected: spec.shape.clone(),
                    found: t.shape,
                }
                .into());
            }
            if params.get(&t.name).is_some() {
                return Err(CheckpointError::Malformed(format!("duplicate tensor {}", t.name)).into());
            }
            params.insert(t.name.clone(), Tensor::new(t.shape, t.data)?);
            if t.dtype != DType::F64 {
                params.set_dtype(&t.name, t.dtype);
            }
        }
        // Keep specification order regardless of file order.
        let mut ordered = Params::default();
        for s in &specs {
            let t = params
                .get(&s.name)
                .ok_or_else(|| CheckpointError::MissingTensor(s.name.clone()))?;
            ordered.insert(s.name.clone(), t.clone());
            if params.dtype(&s.name) != DType::F64 {
                ordered.set_dtype(&s.name, params.dtype(&s.name));
            }
        }
        Ok((
            Model {
                config: header.config,
                params: ordered,
            },
            header.step,
        ))
    }

    pub fn save(&self, path: &Path, step: u64) -> Result<()> {
        let bytes = self.to_bytes(step)?;
        std::fs::write(path, bytes).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: &Path) -> Result<(Self, u64)> {
        let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
        Model::from_bytes(&bytes)
    }
}

/// Central-difference step used by [`mlm_grad_check`].
pub const GRAD_CHECK_STEP: f64 = 1e-5;

/// Checks the masked-LM gradients of every parameter on one sequence of
/// length `n` (`[CLS]` plus random regular tokens, one of them masked, every
/// non-`[CLS]` position labelled). Dropout follows `cfg` at step 1.
pub fn mlm_grad_check(cfg: &ModelConfig, n: usize, fault: Option<Fault>) -> Result<GradCheckReport> {
    if n < 2 || cfg.vocab_size <= vocab::FIRST_REGULAR {
        return Err(Error::invalid("gradient check needs n >= 2 and at least one regular token"));
    }
    let model = Model::new(cfg.clone())?;
    let mut r = rng::stream(&[domain::SAMPLE, cfg.seed]);
    let original: Vec<usize> = (1..n).map(|_| r.random_range(vocab::FIRST_REGULAR..cfg.vocab_size)).collect();
    let mut tokens = vec![vocab::CLS];
    tokens.extend(&original);
    tokens[1] = vocab::MASK;
    let mut labels = vec![None];
    labels.extend(original.iter().map(|&t| Some(t)));
    let (tokens, labels) = (vec![tokens], vec![labels]);
    let names: Vec<String> = model.params.names().cloned().collect();
    let values: Vec<(String, Tensor)> = model.params.iter().map(|(k, t)| (k.clone(), t.clone())).collect();
    grad_check_with_fault(
        |tape, vars| {
            let bound = Bound::from_pairs(names.iter().cloned().zip(vars.iter().copied()));
            Ok(mlm_loss(tape, cfg, &bound, &tokens, &labels, ForwardMode::train(1))?.loss)
        },
        &values,
        GRAD_CHECK_STEP,
        fault,
    )
}
