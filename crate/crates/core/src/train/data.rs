//! Synthetic corpora and plain-text corpus files.
//!
//! A corpus line holds characters only; encoding prepends `[CLS]`, so a line
//! of `n - 1` characters becomes a sequence of length `n`.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::model::vocab::{FIRST_REGULAR, MASK};
use crate::model::Vocab;
use crate::rng::{self, domain};

use super::masking::{mask_sequence, MaskingConfig};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub lines: Vec<String>,
    /// Class labels for classification corpora.
    pub labels: Option<Vec<usize>>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }

    /// One line per example; labelled corpora use `label<TAB>text`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (i, line) in self.lines.iter().enumerate() {
            if let Some(labels) = &self.labels {
                out.push_str(&labels[i].to_string());
                out.push('\t');
            }
            out.push_str(line);
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str, labelled: bool) -> Result<Self> {
        let mut lines = Vec::new();
        let mut labels = Vec::new();
        for (no, raw) in text.lines().enumerate() {
            if labelled {
                let (label, line) = raw
                    .split_once('\t')
                    .ok_or_else(|| Error::invalid(format!("line {}: expected label<TAB>text", no + 1)))?;
                labels.push(
                    label
                        .trim()
                        .parse()
                        .map_err(|_| Error::invalid(format!("line {}: bad label {label:?}", no + 1)))?,
                );
                lines.push(line.to_string());
            } else {
                lines.push(raw.to_string());
            }
        }
        Ok(Corpus {
            lines,
            labels: labelled.then_some(labels),
        })
    }

    pub fn load(path: &Path, labelled: bool) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Corpus::parse(&text, labelled)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::file(path, e))
    }

    pub fn encode(&self, vocab: &Vocab) -> Vec<Vec<usize>> {
        self.lines.iter().map(|l| vocab.encode_line(l)).collect()
    }
}

fn letters(count: usize) -> Result<Vec<char>> {
    if !(2..=26).contains(&count) {
        return Err(Error::invalid(format!("alphabet size {count} not in 2..=26")));
    }
    Ok(('a'..='z').take(count).collect())
}

/// Lines whose character at index `c` is letter `c mod alphabet`, each
/// character independently replaced by a uniform letter with probability
/// `noise`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PositionTask {
    pub alphabet: usize,
    pub noise: f64,
}

impl Default for PositionTask {
    fn default() -> Self {
        PositionTask {
            alphabet: 26,
            noise: 0.02,
        }
    }
}

impl PositionTask {
    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::from_chars(letters(self.alphabet)?)
    }

    /// The noise-free line for sequence length `n`.
    pub fn clean_line(&self, n: usize) -> Result<String> {
        let abc = letters(self.alphabet)?;
        Ok((0..n.saturating_sub(1)).map(|c| abc[c % self.alphabet]).collect())
    }

    pub fn generate(&self, num_lines: usize, n: usize, seed: u64) -> Result<Corpus> {
        if n < 2 {
            return Err(Error::invalid("position task needs n >= 2"));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::invalid(format!("noise {} not in [0, 1]", self.noise)));
        }
        let abc = letters(self.alphabet)?;
        let clean: Vec<char> = self.clean_line(n)?.chars().collect();
        let lines = (0..num_lines)
            .map(|l| {
                let mut r = rng::stream(&[domain::DATA, seed, l as u64]);
                clean
                    .iter()
                    .map(|&ch| {
                        if r.random::<f64>() < self.noise {
                            abc[r.random_range(0..self.alphabet)]
                        } else {
                            ch
                        }
                    })
                    .collect()
            })
            .collect();
        Ok(Corpus { lines, labels: None })
    }
}

pub fn gen_position_task(num_lines: usize, n: usize, seed: u64) -> Result<Corpus> {
    PositionTask::default().generate(num_lines, n, seed)
}

/// Random lines over a small alphabet, labelled with the parity of the
/// number of occurrences of the designated letter `'a'`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParityTask {
    pub alphabet: usize,
}

impl Default for ParityTask {
    fn default() -> Self {
        ParityTask { alphabet: 8 }
    }
}

pub const PARITY_DESIGNATED: char = 'a';

pub fn parity_label(line: &str) -> usize {
    line.chars().filter(|&c| c == PARITY_DESIGNATED).count() % 2
}

impl ParityTask {
    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::from_chars(letters(self.alphabet)?)
    }

    /// Exactly `num_lines / 2` lines of label 0; a line drawn with the wrong
    /// parity has one position toggled into or out of the designated letter.
    pub fn generate(&self, num_lines: usize, n: usize, seed: u64) -> Result<Corpus> {
        if n < 2 {
            return Err(Error::invalid("parity task needs n >= 2"));
        }
        let abc = letters(self.alphabet)?;
        let mut targets: Vec<usize> = (0..num_lines).map(|i| usize::from(i >= num_lines / 2)).collect();
        targets.shuffle(&mut rng::stream(&[domain::SHUFFLE, seed]));
        let len = n - 1;
        let mut lines = Vec::with_capacity(num_lines);
        for (l, &target) in targets.iter().enumerate() {
            let mut r = rng::stream(&[domain::DATA, seed, l as u64]);
            let mut chars: Vec<char> = (0..len).map(|_| abc[r.random_range(0..self.alphabet)]).collect();
            let line: String = chars.iter().collect();
            if parity_label(&line) != target {
                let at = r.random_range(0..len);
                chars[at] = if chars[at] == PARITY_DESIGNATED {
                    abc[r.random_range(1..self.alphabet)]
                } else {
                    PARITY_DESIGNATED
                };
            }
            lines.push(chars.into_iter().collect());
        }
        Ok(Corpus {
            lines,
            labels: Some(targets),
        })
    }
}

pub fn gen_parity_task(num_lines: usize, n: usize, seed: u64) -> Result<Corpus> {
    ParityTask::default().generate(num_lines, n, seed)
}

/// A fixed evaluation set of masked sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub tokens: Vec<Vec<usize>>,
    pub labels: Vec<Vec<Option<usize>>>,
}

impl Probe {
    /// Masks every line with `[MASK]` only, redrawing a line until at least
    /// one position is selected.
    pub fn build(lines: &[Vec<usize>], mask_prob: f64, vocab_size: usize, seed: u64) -> Self {
        let cfg = MaskingConfig {
            prob: mask_prob,
            split: (1.0, 0.0, 0.0),
        };
        let mut tokens = Vec::with_capacity(lines.len());
        let mut labels = Vec::with_capacity(lines.len());
        for (i, line) in lines.iter().enumerate() {
            let mut r = rng::stream(&[domain::EVAL, seed, i as u64]);
            let mut m = mask_sequence(line, &cfg, vocab_size, &mut r);
            let mut tries = 0;
            while m.labels.iter().all(Option::is_none) && tries < 100 && mask_prob > 0.0 {
                m = mask_sequence(line, &cfg, vocab_size, &mut r);
                tries += 1;
            }
            tokens.push(m.tokens);
            labels.push(m.labels);
        }
        Probe { tokens, labels }
    }

    pub fn masked_count(&self) -> usize {
        self.labels.iter().flatten().filter(|l| l.is_some()).count()
    }
}

/// Accuracy ceilings for a model that cannot see positions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoPositionBayes {
    /// All `[MASK]` positions of a line look alike, so the best a
    /// permutation-equivariant model can do is predict the most frequent
    /// token of the masked-out multiset, which it can infer from the
    /// visible tokens when the clean line is known.
    pub bag: f64,
    /// Predicting the single most frequent token of the training marginal.
    pub marginal: f64,
}

/// Bayes accuracies on a probe built from clean position-task lines.
pub fn no_position_bayes(probe: &Probe, task: &PositionTask) -> NoPositionBayes {
    let mut total = 0usize;
    let mut bag = 0usize;
    for labels in &probe.labels {
        let mut counts = vec![0usize; FIRST_REGULAR + task.alphabet];
        let mut k = 0;
        for l in labels.iter().flatten() {
            if *l < counts.len() {
                counts[*l] += 1;
            }
            k += 1;
        }
        total += k;
        bag += counts.iter().copied().max().unwrap_or(0);
    }

    // Training marginal: each clean position contributes (1 - noise) to its
    // letter and noise / alphabet to every letter.
    let len = probe.tokens.first().map_or(0, |t| t.len().saturating_sub(1));
    let mut marginal = vec![0.0; task.alphabet];
    for c in 0..len {
        marginal[c % task.alphabet] += 1.0 - task.noise;
        for m in marginal.iter_mut() {
            *m += task.noise / task.alphabet as f64;
        }
    }
    let best = marginal
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
        .map_or(0, |(i, _)| i)
        + FIRST_REGULAR;
    let hits = probe.labels.iter().flatten().filter(|l| **l == Some(best)).count();

    let frac = |x: usize| if total == 0 { 0.0 } else { x as f64 / total as f64 };
    NoPositionBayes {
        bag: frac(bag),
        marginal: frac(hits),
    }
}

/// Fraction of probe masks whose position holds `[MASK]`; a sanity figure
/// for reports.
pub fn mask_rate(probe: &Probe) -> f64 {
    let masks = probe.tokens.iter().flatten().filter(|&&t| t == MASK).count();
    let total: usize = probe.tokens.iter().map(|t| t.len().saturating_sub(1)).sum();
    if total == 0 {
        0.0
    } else {
        masks as f64 / total as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::vocab::CLS;

    #[test]
    fn position_lines_follow_the_alphabet() {
        let corpus = gen_position_task(1000, 32, 3).unwrap();
        let task = PositionTask::default();
        let clean: Vec<char> = task.clean_line(32).unwrap().chars().collect();
        assert_eq!(clean.len(), 31);
        assert_eq!(clean[0], 'a');
        assert_eq!(clean[26], 'a');
        let mut agree = 0;
        let mut total = 0;
        for line in &corpus.lines {
            for (c, ch) in line.chars().enumerate() {
                agree += usize::from(ch == clean[c]);
                total += 1;
            }
        }
        // Noise 0.02 with a 1/26 chance of redrawing the same letter.
        assert!(agree as f64 / total as f64 > 0.9);
        assert_eq!(corpus, gen_position_task(1000, 32, 3).unwrap());
        assert_ne!(corpus, gen_position_task(1000, 32, 4).unwrap());
    }

    #[test]
    fn parity_examples() {
        assert_eq!(parity_label("bcd"), 0);
        assert_eq!(parity_label("aaaa"), 0);
        assert_eq!(parity_label("aba"), 0);
        assert_eq!(parity_label("ab"), 1);
        let corpus = gen_parity_task(10_000, 16, 9).unwrap();
        let labels = corpus.labels.as_ref().unwrap();
        let ones = labels.iter().filter(|&&l| l == 1).count();
        assert!((ones as f64 / 10_000.0 - 0.5).abs() <= 0.01);
        for (line, &label) in corpus.lines.iter().zip(labels) {
            assert_eq!(parity_label(line), label);
            assert_eq!(line.chars().count(), 15);
        }
    }

    #[test]
    fn corpus_text_round_trips() {
        let corpus = gen_parity_task(20, 6, 1).unwrap();
        assert_eq!(Corpus::parse(&corpus.to_text(), true).unwrap(), corpus);
        let plain = gen_position_task(5, 6, 1).unwrap();
        assert_eq!(Corpus::parse(&plain.to_text(), false).unwrap(), plain);
        assert!(Corpus::parse("nolabel\n", true).is_err());
        assert!(gen_position_task(0, 6, 1).unwrap().is_empty());
    }

    #[test]
    fn bayes_oracles_on_a_hand_case() {
        let task = PositionTask {
            alphabet: 2,
            noise: 0.0,
        };
        // Clean line "abab": tokens 4 5 4 5.
        let probe = Probe {
            tokens: vec![vec![CLS, MASK, MASK, MASK, 5]],
            labels: vec![vec![None, Some(4), Some(5), Some(4), None]],
        };
        let bayes = no_position_bayes(&probe, &task);
        assert!((bayes.bag - 2.0 / 3.0).abs() < 1e-15);
        // Both letters are equally frequent; the tie goes to the first.
        assert!((bayes.marginal - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn marginal_oracle_matches_counting() {
        let task = PositionTask::default();
        let vocab = task.vocab().unwrap();
        let clean = Corpus {
            lines: vec![task.clean_line(32).unwrap(); 500],
            labels: None,
        };
        let probe = Probe::build(&clean.encode(&vocab), 0.15, vocab.len(), 1);
        let bayes = no_position_bayes(&probe, &task);
        // Letters a..e appear twice in a 31-character line, the rest once.
        let mut hits = 0;
        let mut total = 0;
        for labels in &probe.labels {
            for l in labels.iter().flatten() {
                total += 1;
                hits += usize::from(*l == FIRST_REGULAR);
            }
        }
        assert_eq!(bayes.marginal, hits as f64 / total as f64);
        assert!((bayes.marginal - 2.0 / 31.0).abs() < 0.02);
        assert!(bayes.bag > bayes.marginal);
    }
}
