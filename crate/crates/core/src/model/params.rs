use indexmap::IndexMap;
use rand::Rng;
use rand_distr::Normal;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Tape, Tensor, Var};

use super::checkpoint::DType;
use super::config::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Norm,
    RelBias,
}

impl ParamKind {
    /// Decoupled weight decay applies to weights only.
    pub fn decays(self) -> bool {
        self == ParamKind::Weight
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Normal,
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub init: Init,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn spec(name: impl Into<String>, shape: &[usize], kind: ParamKind, init: Init) -> ParamSpec {
    ParamSpec {
        name: name.into(),
        shape: shape.to_vec(),
        kind,
        init,
    }
}

/// Every trainable tensor of a configuration, in a fixed order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    use Init::*;
    use ParamKind::*;
    let (d, v, h, t) = (cfg.d, cfg.vocab_size, cfg.heads, cfg.clip);
    let dh = cfg.head_dim();
    let variant = cfg.variant;
    let mut out = vec![spec("embed.word", &[v, d], Weight, Normal)];
    if cfg.positional {
        out.push(spec("pos.table", &[cfg.n_max, d], Weight, Normal));
        out.push(spec("pos.ln.gain", &[d], Norm, Ones));
        out.push(spec("pos.ln.bias", &[d], Norm, Zeros));
        if variant.has_positional_projection() {
            out.push(spec("pos.u_q", &[d, d], Weight, Normal));
            out.push(spec("pos.u_k", &[d, d], Weight, Normal));
        }
        if variant.has_scalar_bias() {
            out.push(spec("pos.rel_bias", &[h, 2 * t + 1], RelBias, Zeros));
        }
        if variant.has_reset() {
            out.push(spec("pos.theta1", &[d], Weight, Normal));
            out.push(spec("pos.theta2", &[d], Weight, Normal));
        }
    }
    for l in 0..cfg.layers {
        let p = |s: &str| format!("layer{l}.{s}");
        for w in ["attn.w_q", "attn.w_k", "attn.w_v", "attn.w_o"] {
            out.push(spec(p(w), &[d, d], Weight, Normal));
        }
        if cfg.positional && variant == crate::attention::EncodingVariant::ShawRel {
            out.push(spec(p("attn.rel_key"), &[2 * t + 1, dh], Weight, Normal));
        }
        out.push(spec(p("ln1.gain"), &[d], Norm, Ones));
        out.push(spec(p("ln1.bias"), &[d], Norm, Zeros));
        out.push(spec(p("ffn.w1"), &[d, cfg.d_ff], Weight, Normal));
        out.push(spec(p("ffn.b1"), &[cfg.d_ff], Bias, Zeros));
        out.push(spec(p("ffn.w2"), &[cfg.d_ff, d], Weight, Normal));
        out.push(spec(p("ffn.b2"), &[d], Bias, Zeros));
        out.push(spec(p("ln2.gain"), &[d], Norm, Ones));
        out.push(spec(p("ln2.bias"), &[d], Norm, Zeros));
    }
    out.push(spec("mlm.bias", &[v], Bias, Zeros));
    if cfg.num_classes > 0 {
        out.push(spec("cls.weight", &[d, cfg.num_classes], Weight, Normal));
        out.push(spec("cls.bias", &[cfg.num_classes], Bias, Zeros));
    }
    out
}

/// Parameter counts by tensor name, without allocating anything.
#[derive(Clone, Debug, PartialEq)]
pub struct Census {
    pub by_name: IndexMap<String, usize>,
}

impl Census {
    pub fn of(cfg: &ModelConfig) -> Self {
        Census {
            by_name: param_specs(cfg).into_iter().map(|s| (s.name.clone(), s.len())).collect(),
        }
    }

    pub fn total(&self) -> usize {
        self.by_name.values().sum()
    }

    /// Sum over tensors whose name starts with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> usize {
        self.by_name
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v)
            .sum()
    }

    /// The positional query and key projections over all heads.
    pub fn positional_projections(&self) -> usize {
        self.with_prefix("pos.u_q") + self.with_prefix("pos.u_k")
    }
}

fn name_tag(name: &str) -> u64 {
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Named parameter tensors in specification order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Params {
    tensors: IndexMap<String, Tensor>,
    dtypes: IndexMap<String, DType>,
}

impl Params {
    /// Each tensor draws from its own stream keyed by the seed and its name.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let normal = Normal::new(0.0, cfg.init_std).map_err(|e| Error::invalid(e.to_string()))?;
        let mut params = Params::default();
        for s in param_specs(cfg) {
            let t = match s.init {
                Init::Zeros => Tensor::zeros(&s.shape),
                Init::Ones => Tensor::filled(&s.shape, 1.0),
                Init::Normal => {
                    let mut r = rng::stream(&[rng::domain::INIT, cfg.seed, name_tag(&s.name)]);
                    Tensor::new(s.shape.clone(), (0..s.len()).map(|_| r.sample(normal)).collect())?
                }
            };
            params.insert(s.name, t);
        }
        Ok(params)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn entries(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Storage type used when the tensor is written to a checkpoint.
    pub fn dtype(&self, name: &str) -> DType {
        self.dtypes.get(name).copied().unwrap_or(DType::F64)
    }

    pub fn set_dtype(&mut self, name: &str, dtype: DType) {
        self.dtypes.insert(name.to_string(), dtype);
    }

    /// Largest absolute entry difference over all shared tensors; infinite
    /// when the name sets or shapes differ.
    pub fn max_abs_diff(&self, other: &Params) -> f64 {
        if self.len() != other.len() {
            return f64::INFINITY;
        }
        self.iter()
            .map(|(k, a)| match other.get(k) {
                Some(b) if a.shape() == b.shape() => a.max_abs_diff(b),
                _ => f64::INFINITY,
            })
            .fold(0.0, f64::max)
    }

    /// Records every tensor on `tape`, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|(k, t)| {
                    let v = if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
                    (k.clone(), v)
                })
                .collect(),
        }
    }
}

/// Parameter handles on a tape.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Bound {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))
    }

    pub fn optional(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::EncodingVariant;

    #[test]
    fn full_scale_projection_census() {
        let cfg = ModelConfig {
            d: 768,
            heads: 12,
            layers: 12,
            d_ff: 3072,
            n_max: 512,
            vocab_size: 32768,
            clip: 128,
            variant: EncodingVariant::TupeA,
            ..ModelConfig::default()
        };
        let census = Census::of(&cfg);
        assert_eq!(census.positional_projections(), 2 * 768 * 768);
        assert_eq!(census.positional_projections(), 1_179_648);
        assert_eq!(census.with_prefix("pos.theta"), 2 * 768);
        assert_eq!(census.with_prefix("pos.ln."), 2 * 768);
    }

    #[test]
    fn variants_own_the_expected_positional_tensors() {
        for v in EncodingVariant::ALL {
            let cfg = ModelConfig { variant: v, ..ModelConfig::default() };
            let census = Census::of(&cfg);
            let has = |n: &str| census.by_name.contains_key(n);
            assert!(has("pos.table"));
            assert_eq!(has("pos.u_q"), v.has_positional_projection(), "{v}");
            assert_eq!(has("pos.rel_bias"), v.has_scalar_bias(), "{v}");
            assert_eq!(has("pos.theta1"), v.has_reset(), "{v}");
            assert_eq!(has("layer0.attn.rel_key"), v == EncodingVariant::ShawRel, "{v}");
            let off = Census::of(&ModelConfig { positional: false, ..cfg });
            assert!(off.by_name.keys().all(|k| !k.starts_with("pos.") && !k.ends_with("rel_key")));
        }
    }

    #[test]
    fn init_is_seeded_and_follows_the_spec() {
        let cfg = ModelConfig::default();
        let a = Params::init(&cfg).unwrap();
        let b = Params::init(&cfg).unwrap();
        assert_eq!(a, b);
        let c = Params::init(&ModelConfig { seed: 1, ..cfg.clone() }).unwrap();
        assert!(a.max_abs_diff(&c) > 0.0);
        assert_eq!(a.get("pos.ln.gain").unwrap().data(), &[1.0; 64]);
        assert_eq!(a.get("mlm.bias").unwrap().max_abs(), 0.0);
        let w = a.get("embed.word").unwrap().data();
        let std = (w.iter().map(|x| x * x).sum::<f64>() / w.len() as f64).sqrt();
        assert!((std - 0.02).abs() < 0.002, "{std}");
    }
}
