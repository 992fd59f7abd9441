use serde::{Deserialize, Serialize};

use crate::attention::EncodingVariant;
use crate::error::{Error, Result};
use crate::posenc::HeadLayout;

use super::vocab::FIRST_REGULAR;

fn yes() -> bool {
    true
}

fn two() -> usize {
    2
}

fn default_init_std() -> f64 {
    0.02
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub d_ff: usize,
    pub n_max: usize,
    pub vocab_size: usize,
    /// Relative distances are clipped to `[-clip, clip]`.
    pub clip: usize,
    pub variant: EncodingVariant,
    pub dropout: f64,
    pub seed: u64,
    /// `false` removes every positional parameter and term.
    #[serde(default = "yes")]
    pub positional: bool,
    /// Size of the `[CLS]` classification head; 0 omits it.
    #[serde(default = "two")]
    pub num_classes: usize,
    /// Standard deviation of normally initialized weights.
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 64,
            heads: 4,
            layers: 2,
            d_ff: 256,
            n_max: 32,
            vocab_size: 40,
            clip: 8,
            variant: EncodingVariant::TupeA,
            dropout: 0.1,
            seed: 0,
            positional: true,
            num_classes: 2,
            init_std: default_init_std(),
        }
    }
}

impl ModelConfig {
    pub fn layout(&self) -> Result<HeadLayout> {
        HeadLayout::new(self.d, self.heads)
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        self.layout()?;
        if self.n_max < 2 {
            return Err(Error::invalid(format!("n_max must be at least 2, got {}", self.n_max)));
        }
        if self.vocab_size < FIRST_REGULAR {
            return Err(Error::invalid(format!(
                "vocab_size {} cannot hold the {FIRST_REGULAR} reserved tokens",
                self.vocab_size
            )));
        }
        if self.clip == 0 {
            return Err(Error::invalid("clip must be at least 1"));
        }
        if self.d_ff == 0 {
            return Err(Error::invalid("d_ff must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return Err(Error::invalid(format!("init_std {} must be positive", self.init_std)));
        }
        Ok(())
    }
}
