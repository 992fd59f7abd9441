use rand::Rng;

use crate::model::vocab::{CLS, FIRST_REGULAR, MASK, PAD, UNK};

/// How a selected position was corrupted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Corruption {
    Mask,
    Random,
    Keep,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskingConfig {
    pub prob: f64,
    /// Fractions of selected positions replaced by `[MASK]`, by a random
    /// token, and left unchanged.
    pub split: (f64, f64, f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Masked {
    pub tokens: Vec<usize>,
    /// The original id at every selected position.
    pub labels: Vec<Option<usize>>,
    pub corruption: Vec<Option<Corruption>>,
}

/// `[CLS]`, `[PAD]` and `[MASK]` are never selected.
pub fn is_eligible(id: usize) -> bool {
    !matches!(id, CLS | PAD | MASK)
}

/// Selects each eligible position with probability `cfg.prob`, then
/// corrupts it according to `cfg.split`.
///
/// Per eligible position, one uniform `f64` decides selection; a selected
/// position draws a second one for the corruption kind and, for a random
/// replacement, a uniform id from the regular tokens.
pub fn mask_sequence(tokens: &[usize], cfg: &MaskingConfig, vocab_size: usize, rng: &mut impl Rng) -> Masked {
    let mut out = Masked {
        tokens: tokens.to_vec(),
        labels: vec![None; tokens.len()],
        corruption: vec![None; tokens.len()],
    };
    let (mask_frac, random_frac, _) = cfg.split;
    for (i, &id) in tokens.iter().enumerate() {
        if !is_eligible(id) {
            continue;
        }
        if rng.random::<f64>() >= cfg.prob {
            continue;
        }
        let r = rng.random::<f64>();
        let kind = if r < mask_frac {
            out.tokens[i] = MASK;
            Corruption::Mask
        } else if r < mask_frac + random_frac {
            out.tokens[i] = if vocab_size > FIRST_REGULAR {
                rng.random_range(FIRST_REGULAR..vocab_size)
            } else {
                UNK
            };
            Corruption::Random
        } else {
            Corruption::Keep
        };
        out.labels[i] = Some(id);
        out.corruption[i] = Some(kind);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    const BERT: MaskingConfig = MaskingConfig {
        prob: 0.15,
        split: (0.8, 0.1, 0.1),
    };

    #[test]
    fn probability_extremes() {
        let line = vec![CLS, 4, 5, 6, 7, PAD];
        let none = mask_sequence(&line, &MaskingConfig { prob: 0.0, ..BERT }, 10, &mut rng::stream(&[1]));
        assert_eq!(none.tokens, line);
        assert!(none.labels.iter().all(Option::is_none));

        let all = MaskingConfig {
            prob: 1.0,
            split: (1.0, 0.0, 0.0),
        };
        let out = mask_sequence(&line, &all, 10, &mut rng::stream(&[1]));
        assert_eq!(out.tokens, vec![CLS, MASK, MASK, MASK, MASK, PAD]);
        assert_eq!(out.labels, vec![None, Some(4), Some(5), Some(6), Some(7), None]);
    }

    /// Written independently of `mask_sequence`, consuming the same stream
    /// in the same order.
    fn reference(tokens: &[usize], seed: u64) -> (Vec<usize>, Vec<i64>) {
        let mut r = rng::stream(&[seed]);
        let mut toks = tokens.to_vec();
        let mut labels = vec![-1i64; tokens.len()];
        for i in 0..tokens.len() {
            if tokens[i] < 3 {
                continue;
            }
            let u: f64 = r.random();
            if u < 0.15 {
                labels[i] = tokens[i] as i64;
                let c: f64 = r.random();
                if c < 0.8 {
                    toks[i] = 2;
                } else if c < 0.9 {
                    toks[i] = r.random_range(4..12);
                }
            }
        }
        (toks, labels)
    }

    #[test]
    fn seed_42_matches_reference_sampler() {
        let line = vec![CLS, 4, 5, 6, 7, 8, 9, 10, 11, 4];
        let got = mask_sequence(&line, &BERT, 12, &mut rng::stream(&[42]));
        let (toks, labels) = reference(&line, 42);
        assert_eq!(got.tokens, toks);
        let got_labels: Vec<i64> = got.labels.iter().map(|l| l.map_or(-1, |v| v as i64)).collect();
        assert_eq!(got_labels, labels);
        for seed in 0..200 {
            let got = mask_sequence(&line, &BERT, 12, &mut rng::stream(&[seed]));
            assert_eq!(got.tokens, reference(&line, seed).0);
        }
    }
}
