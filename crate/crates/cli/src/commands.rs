use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::ArgMatches;
use num_complex::Complex64;
use rand::Rng;
use serde_json::json;

use tupe_core::analysis;
use tupe_core::model::vocab::{CLS, FIRST_REGULAR, PAD};
use tupe_core::model::{self, Vocab};
use tupe_core::rng::{self, domain};
use tupe_core::tensor::Fault;
use tupe_core::train::{self, Corpus, Dataset, Objective, ParityTask, PositionTask, Probe};
use tupe_core::{EncodingVariant, Error, Model, ModelConfig};

use crate::config::{RunConfig, Task, KEYS};

/// Exit 1 for usage and configuration problems, 2 for runtime failures.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Runtime(m) => m,
        }
    }
}

fn usage(e: impl ToString) -> Failure {
    Failure::Usage(e.to_string())
}

fn runtime(e: impl ToString) -> Failure {
    Failure::Runtime(e.to_string())
}

/// Missing or unreadable inputs are usage errors; everything else at run
/// time is a runtime error.
fn classify(e: Error) -> Failure {
    match e {
        Error::File { .. } | Error::Checkpoint(_) | Error::Invalid(_) | Error::UnsupportedVariant { .. } => usage(e),
        _ => runtime(e),
    }
}

fn opt<T: FromStr>(m: &ArgMatches, name: &str) -> Result<Option<T>, Failure>
where
    T::Err: std::fmt::Display,
{
    m.get_one::<String>(name)
        .map(|v| v.parse::<T>().map_err(|e| usage(format!("--{name} {v:?}: {e}"))))
        .transpose()
}

fn req<T: FromStr>(m: &ArgMatches, name: &str) -> Result<T, Failure>
where
    T::Err: std::fmt::Display,
{
    opt(m, name)?.ok_or_else(|| usage(format!("--{name} is required")))
}

fn seed(m: &ArgMatches) -> Result<u64, Failure> {
    Ok(opt(m, "seed")?.unwrap_or(0))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), Failure> {
    fs::write(path, bytes).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), Failure> {
    write(path, serde_json::to_string_pretty(value).map_err(runtime)? + "\n")
}

fn require_file(path: &Path, what: &str) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{what} {} does not exist", path.display())))
    }
}

pub fn resolve_config(m: &ArgMatches) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::default();
    if let Some(path) = m.get_one::<String>("config") {
        cfg.apply_file(Path::new(path)).map_err(usage)?;
    }
    for (key, _) in KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v).map_err(usage)?;
        }
    }
    Ok(cfg)
}

fn task_data(task: Task, lines: usize, n: usize, seed: u64) -> Result<(Corpus, Vocab), Failure> {
    let out = match task {
        Task::Position => {
            let t = PositionTask::default();
            (t.generate(lines, n, seed), t.vocab())
        }
        Task::Parity => {
            let t = ParityTask::default();
            (t.generate(lines, n, seed), t.vocab())
        }
    };
    Ok((out.0.map_err(usage)?, out.1.map_err(usage)?))
}

pub fn train(m: &ArgMatches) -> Result<(), Failure> {
    let mut cfg = resolve_config(m)?;
    let labelled = cfg.objective == Objective::Cls;
    let (corpus, vocab) = match &cfg.corpus {
        Some(path) => {
            require_file(path, "corpus")?;
            let vocab_path = cfg.vocab.as_ref().ok_or_else(|| usage("a corpus needs --vocab"))?;
            require_file(vocab_path, "vocabulary")?;
            (Corpus::load(path, labelled).map_err(usage)?, Vocab::load(vocab_path).map_err(usage)?)
        }
        None => task_data(cfg.task, cfg.lines, cfg.n, cfg.train.seed)?,
    };
    cfg.model.vocab_size = vocab.len();
    cfg.model.validate().map_err(usage)?;
    cfg.train.validate().map_err(usage)?;
    let data = Dataset::from_corpus(&corpus, &vocab);
    if let Some(long) = data.sequences.iter().map(Vec::len).find(|&l| l > cfg.model.n_max) {
        return Err(usage(format!("corpus has a sequence of length {long} above n_max = {}", cfg.model.n_max)));
    }

    create_dir(&cfg.out_dir)?;
    write(&cfg.out_dir.join("config.resolved"), cfg.to_text())?;
    vocab.save(&cfg.out_dir.join("vocab.txt")).map_err(runtime)?;
    let out = train::output_dir(&cfg.out_dir);
    let outcome = train::train_loop(&cfg.model, &cfg.train, &data, cfg.objective, Some(&out)).map_err(|e| match e {
        Error::Invalid(_) => usage(e),
        _ => runtime(e),
    })?;
    if let Some(last) = outcome.log.rows.last() {
        println!(
            "step {} loss {:.6} accuracy {:.4} -> {}",
            last.step,
            last.loss,
            last.accuracy,
            out.final_checkpoint().display()
        );
    }
    Ok(())
}

fn gradcheck_config(variant: EncodingVariant, n: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        d: 8,
        heads: 2,
        layers: 2,
        d_ff: 16,
        n_max: n,
        vocab_size: 10,
        clip: 2,
        variant,
        dropout: 0.1,
        seed,
        positional: true,
        num_classes: 2,
        init_std: 0.3,
    }
}

pub const GRADCHECK_TOLERANCE: f64 = 1e-5;

pub fn gradcheck(m: &ArgMatches) -> Result<(), Failure> {
    let variants = match opt::<String>(m, "variant")? {
        Some(v) => vec![v.parse::<EncodingVariant>().map_err(usage)?],
        None => EncodingVariant::ALL.to_vec(),
    };
    let n: usize = req(m, "n")?;
    let seed = seed(m)?;
    let fault = m.get_flag("inject-fault").then_some(Fault::SoftmaxBackward);
    println!("{:<16} {:>12}  worst parameter", "variant", "max rel err");
    let mut failures = Vec::new();
    for v in variants {
        let report = model::mlm_grad_check(&gradcheck_config(v, n, seed), n, fault).map_err(classify)?;
        let worst = report.worst().map(|p| p.name.clone()).unwrap_or_default();
        let err = report.max_rel_err();
        println!("{:<16} {:>12.3e}  {}", v.name(), err, worst);
        if !(err < GRADCHECK_TOLERANCE) {
            failures.push(format!("{v}: {worst} ({err:.3e})"));
        }
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(runtime(format!("gradient check failed for {}", failures.join(", "))))
    }
}

pub const EIGEN_TOLERANCE: f64 = 1e-8;

pub fn verify_toeplitz(m: &ArgMatches) -> Result<(), Failure> {
    let sizes: Vec<usize> = m
        .get_one::<String>("n")
        .expect("has a default")
        .split(',')
        .map(|s| s.trim().parse::<usize>().map_err(|e| usage(format!("--n {s:?}: {e}"))))
        .collect::<Result<_, _>>()?;
    if sizes.contains(&0) {
        return Err(usage("--n must be at least 1"));
    }
    let seeds: u64 = req(m, "seeds")?;
    let base = seed(m)?;
    let corrupt = m.get_flag("corrupt-g");
    println!("{:>4} {:>16} {:>16}", "n", "max recon err", "max eig dist");
    let mut ok = true;
    for &n in &sizes {
        let (mut recon, mut eig): (f64, f64) = (0.0, 0.0);
        for s in 0..seeds {
            let mut r = rng::stream(&[domain::SAMPLE, base, n as u64, s]);
            let b: Vec<f64> = (0..2 * n - 1).map(|_| r.random_range(-1.0..1.0)).collect();
            let mut f = match analysis::factorize_toeplitz(&b) {
                Ok(f) => f,
                Err(Error::Reconstruction { error, .. }) => {
                    recon = recon.max(error);
                    continue;
                }
                Err(e) => return Err(runtime(e)),
            };
            if corrupt {
                f.g[0] *= Complex64::new(1.0, 1e-3);
            }
            recon = recon.max(f.reconstruction_error());
            let dense = analysis::dense_eigenvalues(&analysis::embed_circulant(&b).map_err(runtime)?).map_err(runtime)?;
            eig = eig.max(analysis::max_matched_distance(&f.d, &dense));
        }
        println!("{n:>4} {recon:>16.3e} {eig:>16.3e}");
        ok &= recon <= analysis::RECONSTRUCTION_TOLERANCE && eig <= EIGEN_TOLERANCE;
    }
    if ok {
        Ok(())
    } else {
        Err(runtime("Toeplitz factorization check failed"))
    }
}

fn load_model(path: &Path) -> Result<Model, Failure> {
    require_file(path, "checkpoint")?;
    Ok(Model::load(path).map_err(usage)?.0)
}

fn random_batch(cfg: &ModelConfig, items: usize, n: usize, seed: u64) -> Result<Vec<Vec<usize>>, Failure> {
    if cfg.vocab_size <= FIRST_REGULAR {
        return Err(usage("checkpoint vocabulary has no regular tokens"));
    }
    let mut r = rng::stream(&[domain::SAMPLE, seed]);
    Ok((0..items)
        .map(|_| {
            std::iter::once(CLS)
                .chain((1..n).map(|_| r.random_range(FIRST_REGULAR..cfg.vocab_size)))
                .collect()
        })
        .collect())
}

fn corpus_batch(m: &ArgMatches, cfg: &ModelConfig, items: usize) -> Result<Option<Vec<Vec<usize>>>, Failure> {
    let Some(path) = m.get_one::<String>("corpus").map(PathBuf::from) else {
        return Ok(None);
    };
    require_file(&path, "corpus")?;
    let vocab_path = m
        .get_one::<String>("vocab")
        .map(PathBuf::from)
        .ok_or_else(|| usage("--corpus needs --vocab"))?;
    require_file(&vocab_path, "vocabulary")?;
    let vocab = Vocab::load(&vocab_path).map_err(usage)?;
    if vocab.len() != cfg.vocab_size {
        return Err(usage(format!(
            "vocabulary has {} tokens, checkpoint expects {}",
            vocab.len(),
            cfg.vocab_size
        )));
    }
    let mut seqs = Corpus::load(&path, false).map_err(usage)?.encode(&vocab);
    seqs.truncate(items);
    let n = seqs.iter().map(Vec::len).max().ok_or_else(|| usage("corpus is empty"))?;
    if n > cfg.n_max {
        return Err(usage(format!("corpus line of length {n} exceeds n_max = {}", cfg.n_max)));
    }
    for s in &mut seqs {
        s.resize(n, PAD);
    }
    Ok(Some(seqs))
}

pub fn analyze(m: &ArgMatches) -> Result<(), Failure> {
    let model = load_model(Path::new(m.get_one::<String>("ckpt").expect("required")))?;
    let out = PathBuf::from(m.get_one::<String>("out").expect("required"));
    let cfg = &model.config;
    let n: usize = opt(m, "n")?.unwrap_or(cfg.n_max);
    if n == 0 || n > cfg.n_max {
        return Err(usage(format!("--n must lie in 1..={}", cfg.n_max)));
    }
    let mode = m.get_one::<String>("mode").expect("required").as_str();
    let report = match mode {
        "decompose" => {
            if !matches!(cfg.variant, EncodingVariant::AbsBaseline | EncodingVariant::BertAd) || !cfg.positional {
                return Err(usage(format!(
                    "decompose needs an abs or bert-ad checkpoint with positions, got {}",
                    cfg.variant
                )));
            }
            let items: usize = req(m, "batch")?;
            let batch = match corpus_batch(m, cfg, items)? {
                Some(b) => b,
                None => random_batch(cfg, items, n, seed(m)?)?,
            };
            let r = analysis::decompose_terms(&model, &batch).map_err(classify)?;
            create_dir(&out)?;
            for (name, t) in analysis::TERM_NAMES.iter().zip(&r.terms) {
                write(&out.join(format!("decomposition_{name}.csv")), analysis::to_csv(t))?;
            }
            r.to_json(cfg.variant)
        }
        "heatmaps" => {
            let files = analysis::export_positional_heatmaps(&model, n, &out).map_err(classify)?;
            let heads = analysis::positional_heatmaps(&model, n).map_err(classify)?;
            let ranges: Vec<_> = heads
                .iter()
                .map(|h| {
                    let lo = h.data().iter().copied().fold(f64::INFINITY, f64::min);
                    let hi = h.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    json!({ "min": lo, "max": hi })
                })
                .collect();
            let names: Vec<String> = files
                .iter()
                .filter_map(|p| p.file_name().map(|f| f.to_string_lossy().into_owned()))
                .collect();
            json!({ "variant": cfg.variant.name(), "n": n, "files": names, "heads": ranges })
        }
        "subspace" => {
            let r = analysis::subspace_diagnostics(&model, n).map_err(classify)?;
            create_dir(&out)?;
            serde_json::to_value(&r).map_err(runtime)?
        }
        _ => unreachable!("restricted by the parser"),
    };
    create_dir(&out)?;
    write_json(&out.join("report.json"), &report)?;
    println!("{}", serde_json::to_string(&report).map_err(runtime)?);
    Ok(())
}

pub fn gendata(m: &ArgMatches) -> Result<(), Failure> {
    let task: Task = req(m, "task")?;
    let lines: usize = req(m, "lines")?;
    let n: usize = req(m, "n")?;
    let out = PathBuf::from(m.get_one::<String>("out").expect("required"));
    let (corpus, vocab) = task_data(task, lines, n, seed(m)?)?;
    create_dir(&out)?;
    corpus.save(&out.join("corpus.txt")).map_err(runtime)?;
    vocab.save(&out.join("vocab.txt")).map_err(runtime)?;
    println!("{} lines -> {}", corpus.len(), out.display());
    Ok(())
}

pub fn eval(m: &ArgMatches) -> Result<(), Failure> {
    let model = load_model(Path::new(m.get_one::<String>("ckpt").expect("required")))?;
    let path = PathBuf::from(m.get_one::<String>("corpus").expect("required"));
    let vocab_path = PathBuf::from(m.get_one::<String>("vocab").expect("required"));
    require_file(&path, "corpus")?;
    require_file(&vocab_path, "vocabulary")?;
    let vocab = Vocab::load(&vocab_path).map_err(usage)?;
    if vocab.len() != model.config.vocab_size {
        return Err(usage(format!(
            "vocabulary has {} tokens, checkpoint expects {}",
            vocab.len(),
            model.config.vocab_size
        )));
    }
    let objective = m.get_one::<String>("objective").expect("has a default").as_str();
    let corpus = Corpus::load(&path, objective == "cls").map_err(usage)?;
    let data = Dataset::from_corpus(&corpus, &vocab);
    let report = if objective == "cls" {
        let acc = train::evaluate_cls(&model, &data).map_err(classify)?;
        json!({ "objective": "cls", "sequences": data.sequences.len(), "accuracy": acc })
    } else {
        let mask_prob: f64 = req(m, "mask-prob")?;
        let probe = Probe::build(&data.sequences, mask_prob, vocab.len(), seed(m)?);
        let acc = train::evaluate_mlm(&model, &probe).map_err(classify)?;
        json!({
            "objective": "mlm",
            "sequences": data.sequences.len(),
            "masked": probe.masked_count(),
            "accuracy": acc,
        })
    };
    println!("{}", serde_json::to_string(&report).map_err(runtime)?);
    Ok(())
}
