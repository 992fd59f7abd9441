//! Flat `key = value` run configuration. Later sources override earlier
//! ones: defaults, then the config file, then command-line flags.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use tupe_core::train::{Objective, TrainConfig};
use tupe_core::{EncodingVariant, ModelConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Position,
    Parity,
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "position" => Ok(Task::Position),
            "parity" => Ok(Task::Parity),
            _ => Err(format!("unknown task {s:?}; expected position or parity")),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Position => "position",
            Task::Parity => "parity",
        })
    }
}

/// Every key accepted in a config file or as a `--key` flag, with help text.
pub const KEYS: &[(&str, &str)] = &[
    ("variant", "positional-encoding variant"),
    ("d", "hidden size"),
    ("heads", "attention heads"),
    ("layers", "encoder layers"),
    ("d_ff", "feed-forward inner size"),
    ("n_max", "maximum sequence length, [CLS] included"),
    ("clip", "relative distance clip range"),
    ("dropout", "dropout probability"),
    ("positional", "false disables every positional term"),
    ("init_std", "standard deviation of initial weights"),
    ("num_classes", "classes of the [CLS] head"),
    ("steps", "optimizer steps"),
    ("batch_size", "sequences per step"),
    ("peak_lr", "learning rate after warmup"),
    ("warmup_steps", "linear warmup steps"),
    ("adam_eps", "Adam epsilon"),
    ("adam_beta1", "Adam first-moment decay"),
    ("adam_beta2", "Adam second-moment decay"),
    ("weight_decay", "decoupled weight decay"),
    ("clip_norm", "global gradient-norm clip, 0 disables"),
    ("mask_prob", "fraction of eligible tokens selected for prediction"),
    ("split_mask", "selected fraction replaced by [MASK]"),
    ("split_random", "selected fraction replaced by a random token"),
    ("split_keep", "selected fraction left unchanged"),
    ("seed", "global seed"),
    ("log_every", "metric row interval"),
    ("checkpoint_every", "checkpoint interval, 0 writes only the final one"),
    ("objective", "mlm or cls"),
    ("task", "synthetic task used when no corpus is given: position or parity"),
    ("lines", "lines generated for the synthetic task"),
    ("n", "sequence length of generated lines, [CLS] included"),
    ("corpus", "corpus file"),
    ("vocab", "vocabulary file"),
    ("out_dir", "output directory"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub objective: Objective,
    pub task: Task,
    pub lines: usize,
    pub n: usize,
    pub corpus: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            objective: Objective::Mlm,
            task: Task::Position,
            lines: 10_000,
            n: 32,
            corpus: None,
            vocab: None,
            out_dir: PathBuf::from("run"),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, String>
where
    T::Err: fmt::Display,
{
    value.parse().map_err(|e| format!("{key} = {value:?}: {e}"))
}

fn path_or_none(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn show(path: &Option<PathBuf>) -> String {
    path.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let (m, t) = (&mut self.model, &mut self.train);
        match key {
            "variant" => m.variant = parse::<EncodingVariant>(key, value)?,
            "d" => m.d = parse(key, value)?,
            "heads" => m.heads = parse(key, value)?,
            "layers" => m.layers = parse(key, value)?,
            "d_ff" => m.d_ff = parse(key, value)?,
            "n_max" => m.n_max = parse(key, value)?,
            "clip" => m.clip = parse(key, value)?,
            "dropout" => m.dropout = parse(key, value)?,
            "positional" => m.positional = parse(key, value)?,
            "init_std" => m.init_std = parse(key, value)?,
            "num_classes" => m.num_classes = parse(key, value)?,
            "steps" => t.steps = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "peak_lr" => t.peak_lr = parse(key, value)?,
            "warmup_steps" => t.warmup_steps = parse(key, value)?,
            "adam_eps" => t.adam_eps = parse(key, value)?,
            "adam_beta1" => t.adam_betas.0 = parse(key, value)?,
            "adam_beta2" => t.adam_betas.1 = parse(key, value)?,
            "weight_decay" => t.weight_decay = parse(key, value)?,
            "clip_norm" => t.clip_norm = parse(key, value)?,
            "mask_prob" => t.mask_prob = parse(key, value)?,
            "split_mask" => t.split.0 = parse(key, value)?,
            "split_random" => t.split.1 = parse(key, value)?,
            "split_keep" => t.split.2 = parse(key, value)?,
            "seed" => {
                t.seed = parse(key, value)?;
                m.seed = t.seed;
            }
            "log_every" => t.log_every = parse(key, value)?,
            "checkpoint_every" => t.checkpoint_every = parse(key, value)?,
            "objective" => {
                self.objective = match value {
                    "mlm" => Objective::Mlm,
                    "cls" => Objective::Cls,
                    _ => return Err(format!("objective = {value:?}: expected mlm or cls")),
                }
            }
            "task" => self.task = parse(key, value)?,
            "lines" => self.lines = parse(key, value)?,
            "n" => self.n = parse(key, value)?,
            "corpus" => self.corpus = path_or_none(value),
            "vocab" => self.vocab = path_or_none(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            _ => return Err(format!("unknown config key {key:?}")),
        }
        Ok(())
    }

    /// Every key with its effective value, in [`KEYS`] order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let (m, t) = (&self.model, &self.train);
        let objective = match self.objective {
            Objective::Mlm => "mlm",
            Objective::Cls => "cls",
        };
        let values = [
            m.variant.to_string(),
            m.d.to_string(),
            m.heads.to_string(),
            m.layers.to_string(),
            m.d_ff.to_string(),
            m.n_max.to_string(),
            m.clip.to_string(),
            m.dropout.to_string(),
            m.positional.to_string(),
            m.init_std.to_string(),
            m.num_classes.to_string(),
            t.steps.to_string(),
            t.batch_size.to_string(),
            t.peak_lr.to_string(),
            t.warmup_steps.to_string(),
            t.adam_eps.to_string(),
            t.adam_betas.0.to_string(),
            t.adam_betas.1.to_string(),
            t.weight_decay.to_string(),
            t.clip_norm.to_string(),
            t.mask_prob.to_string(),
            t.split.0.to_string(),
            t.split.1.to_string(),
            t.split.2.to_string(),
            t.seed.to_string(),
            t.log_every.to_string(),
            t.checkpoint_every.to_string(),
            objective.to_string(),
            self.task.to_string(),
            self.lines.to_string(),
            self.n.to_string(),
            show(&self.corpus),
            show(&self.vocab),
            self.out_dir.display().to_string(),
        ];
        KEYS.iter().map(|(k, _)| *k).zip(values).collect()
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Applies the `key = value` lines of `text`. Blank lines and lines
    /// starting with `#` are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<(), String> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected key = value", i + 1))?;
            self.set(key.trim(), value.trim()).map_err(|e| format!("line {}: {e}", i + 1))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        self.apply_text(&text).map_err(|e| format!("{}: {e}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolved_text_reproduces_the_config() {
        let mut a = RunConfig::default();
        a.apply_text("variant = tupe-r\nsteps = 7\n# comment\n\nsplit_keep = 0.25\ncorpus = c.txt\nseed = 9").unwrap();
        let mut b = RunConfig::default();
        b.apply_text(&a.to_text()).unwrap();
        assert_eq!(a, b);
        assert_eq!(b.model.seed, 9);
        assert_eq!(a.entries().len(), KEYS.len());
    }

    #[test]
    fn bad_lines_are_reported() {
        let mut c = RunConfig::default();
        assert!(c.apply_text("steps 3").unwrap_err().contains("line 1"));
        assert!(c.apply_text("bogus = 1").unwrap_err().contains("bogus"));
        assert!(c.apply_text("d = -4").is_err());
        assert!(c.apply_text("variant = nope").is_err());
    }
}
