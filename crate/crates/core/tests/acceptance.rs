//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::Rng;
use rand_distr::StandardNormal;

use tupe_core::analysis::{
    decompose_terms, dense_eigenvalues, embed_circulant, factorize_toeplitz, max_matched_distance,
    subspace_diagnostics,
};
use tupe_core::attention::{scores_abs_baseline, scores_tupe, LayerAttention};
use tupe_core::model::vocab::{CLS, FIRST_REGULAR};
use tupe_core::model::{mlm_grad_check, Census, ForwardMode};
use tupe_core::posenc::{compute_untied_correlation, AbsolutePositionTable, HeadLayout, PositionalProjection};
use tupe_core::rng;
use tupe_core::train::{
    evaluate_mlm, mask_sequence, no_position_bayes, train_loop, Corpus, Corruption, Dataset, MaskingConfig,
    Objective, PositionTask, Probe, TrainConfig,
};
use tupe_core::{EncodingVariant, Model, ModelConfig, Result, Tape, Tensor};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { pass, detail })
}

fn within(elapsed: Duration, limit_secs: f64) -> bool {
    elapsed.as_secs_f64() < limit_secs
}

fn random_tensor(shape: &[usize], r: &mut impl Rng) -> Tensor {
    let len = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..len).map(|_| r.sample(StandardNormal)).collect()).unwrap()
}

fn random_tokens(vocab: usize, n: usize, r: &mut impl Rng) -> Vec<usize> {
    std::iter::once(CLS)
        .chain((1..n).map(|_| r.random_range(FIRST_REGULAR..vocab)))
        .collect()
}

fn decomposition_identity() -> Result<Outcome> {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..50 {
        let cfg = ModelConfig {
            d: 16,
            heads: 2,
            layers: 1,
            d_ff: 64,
            n_max: 8,
            vocab_size: 20,
            variant: EncodingVariant::AbsBaseline,
            seed,
            init_std: 0.5,
            ..ModelConfig::default()
        };
        let model = Model::new(cfg)?;
        let mut r = rng::stream(&[rng::domain::SAMPLE, seed]);
        let batch: Vec<Vec<usize>> = (0..4).map(|_| random_tokens(20, 8, &mut r)).collect();
        worst = worst.max(decompose_terms(&model, &batch)?.max_item_error);
    }
    let t = start.elapsed();
    outcome(worst <= 1e-10 && within(t, 10.0), format!("max |terms - scores| = {worst:.2e}, {t:.2?}"))
}

fn gradient_fidelity() -> Result<Outcome> {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut worst_at = String::new();
    let mut seen = BTreeSet::new();
    let mut complete = true;
    for variant in EncodingVariant::ALL {
        let cfg = ModelConfig {
            d: 8,
            heads: 2,
            layers: 2,
            d_ff: 16,
            n_max: 8,
            vocab_size: 10,
            clip: 2,
            variant,
            dropout: 0.1,
            init_std: 0.3,
            ..ModelConfig::default()
        };
        let report = mlm_grad_check(&cfg, 5, None)?;
        let names: BTreeSet<&str> = report.params.iter().filter(|p| p.checked > 0).map(|p| p.name.as_str()).collect();
        complete &= Census::of(&cfg).by_name.keys().all(|k| names.contains(k.as_str()));
        seen.extend(names.into_iter().map(str::to_owned));
        if report.max_rel_err() > worst {
            worst = report.max_rel_err();
            worst_at = format!("{variant}/{}", report.worst().map_or("", |p| p.name.as_str()));
        }
    }
    let groups = ["pos.table", "pos.u_q", "pos.u_k", "pos.rel_bias", "pos.theta1", "pos.theta2"];
    let covered = groups.iter().all(|g| seen.contains(*g));
    let t = start.elapsed();
    outcome(
        worst <= 1e-5 && complete && covered && within(t, 120.0),
        format!("max rel err {worst:.2e} ({worst_at}), every parameter checked: {}, {t:.2?}", complete && covered),
    )
}

fn toeplitz_factorization() -> Result<Outcome> {
    let start = Instant::now();
    let (mut recon, mut eig): (f64, f64) = (0.0, 0.0);
    for n in [1usize, 2, 3, 4, 8, 16] {
        for s in 0..100u64 {
            let mut r = rng::stream(&[rng::domain::SAMPLE, 3, n as u64, s]);
            let b: Vec<f64> = (0..2 * n - 1).map(|_| r.random_range(-1.0..1.0)).collect();
            let f = factorize_toeplitz(&b)?;
            recon = recon.max(f.reconstruction_error());
            let dense = dense_eigenvalues(&embed_circulant(&b)?)?;
            eig = eig.max(max_matched_distance(&f.d, &dense));
        }
    }
    let t = start.elapsed();
    outcome(
        recon <= 1e-9 && eig <= 1e-8 && within(t, 30.0),
        format!("reconstruction {recon:.2e}, eigenvalues {eig:.2e}, {t:.2?}"),
    )
}

fn reset_contract() -> Result<Outcome> {
    let start = Instant::now();
    let mut ok = true;
    let mut r = rng::stream(&[rng::domain::SAMPLE, 4]);
    for n in 1..=16 {
        let input = random_tensor(&[n, n], &mut r);
        let (t1, t2): (f64, f64) = (r.sample(StandardNormal), r.sample(StandardNormal));
        let mut tape = Tape::new();
        let v = tape.constant(input.clone());
        let a = tape.constant(Tensor::from_rows(&[vec![t1]])?);
        let b = tape.constant(Tensor::from_rows(&[vec![t2]])?);
        let once = tape.reset_cls(v, a, b)?;
        let twice = tape.reset_cls(once, a, b)?;
        let out = tape.value(once);
        ok &= out.row(0).iter().all(|&x| x == t1);
        ok &= (1..n).all(|i| out.at(i, 0) == t2);
        ok &= (1..n).all(|i| (1..n).all(|j| out.at(i, j).to_bits() == input.at(i, j).to_bits()));
        ok &= tape.value(twice) == out;
    }
    let t = start.elapsed();
    outcome(ok && within(t, 1.0), format!("n = 1..=16, {t:.2?}"))
}

fn parameter_census() -> Result<Outcome> {
    let cfg = ModelConfig {
        d: 768,
        heads: 12,
        layers: 12,
        d_ff: 3072,
        n_max: 512,
        vocab_size: 30522,
        variant: EncodingVariant::TupeA,
        ..ModelConfig::default()
    };
    let census = Census::of(&cfg);
    let total = census.positional_projections();
    let d_h = cfg.d / cfg.heads;
    let per_head: usize = (0..cfg.heads).map(|_| 2 * cfg.d * d_h).sum();
    outcome(
        total == 1_179_648 && total == 2 * cfg.d * cfg.d && per_head == total,
        format!("U_Q + U_K = {total}, {} heads x 2 x 768 x {d_h} = {per_head}", cfg.heads),
    )
}

fn caching_equivalence() -> Result<Outcome> {
    let start = Instant::now();
    let mut identical = true;
    for seed in 0..20u64 {
        let variant = [EncodingVariant::TupeA, EncodingVariant::TupeR][seed as usize % 2];
        let cfg = ModelConfig {
            d: 16,
            heads: 4,
            layers: 4,
            d_ff: 32,
            n_max: 12,
            vocab_size: 20,
            variant,
            seed,
            init_std: 0.3,
            ..ModelConfig::default()
        };
        let model = Model::new(cfg)?;
        let mut r = rng::stream(&[rng::domain::SAMPLE, seed]);
        let batch: Vec<Vec<usize>> = (0..3).map(|_| random_tokens(20, 12, &mut r)).collect();
        let cached = model.hidden(&batch, ForwardMode::eval())?;
        let recomputed = model.hidden(
            &batch,
            ForwardMode {
                recompute_positional: true,
                ..ForwardMode::eval()
            },
        )?;
        identical &= cached.data().iter().zip(recomputed.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    }
    outcome(identical, format!("20 seeds, L = 4, {:.2?}", start.elapsed()))
}

/// Largest difference between the hidden states of `perm(tokens)` and the
/// permuted hidden states of `tokens`.
fn permutation_gap(model: &Model, tokens: &[usize], perm: &[usize]) -> Result<f64> {
    let permuted: Vec<usize> = perm.iter().map(|&i| tokens[i]).collect();
    let a = model.hidden(&[tokens.to_vec()], ForwardMode::eval())?;
    let b = model.hidden(&[permuted], ForwardMode::eval())?;
    let mut gap: f64 = 0.0;
    for (row, &src) in perm.iter().enumerate() {
        for (x, y) in b.row(row).iter().zip(a.row(src)) {
            gap = gap.max((x - y).abs());
        }
    }
    Ok(gap)
}

fn permutation_equivariance(trained: &Model) -> Result<Outcome> {
    let n = 32;
    let mut r = rng::stream(&[rng::domain::SAMPLE, 7]);
    let mut perm: Vec<usize> = (1..n).collect();
    for i in (1..perm.len()).rev() {
        perm.swap(i, r.random_range(0..=i));
    }
    perm.insert(0, 0);

    let vocab = trained.config.vocab_size;
    let tokens = random_tokens(vocab, n, &mut r);
    let plain = Model::new(ModelConfig {
        positional: false,
        init_std: 0.3,
        ..trained.config.clone()
    })?;
    let without = permutation_gap(&plain, &tokens, &perm)?;

    let task = PositionTask::default();
    let line = task.vocab()?.encode_line(&task.clean_line(n)?);
    let with = permutation_gap(trained, &line, &perm)?;
    outcome(
        without <= 1e-12 && with > 1e-3,
        format!("no positions {without:.2e}, trained TUPE-A {with:.3}"),
    )
}

fn subspace() -> Result<Outcome> {
    let start = Instant::now();
    let cfg = ModelConfig {
        d: 16,
        heads: 4,
        layers: 1,
        d_ff: 32,
        n_max: 12,
        vocab_size: 20,
        clip: 4,
        variant: EncodingVariant::TupeR,
        init_std: 0.5,
        ..ModelConfig::default()
    };
    let mut model = Model::new(cfg)?;
    let mut r = rng::stream(&[rng::domain::SAMPLE, 8]);
    let bias = model.params.get_mut("pos.rel_bias").expect("TUPE-R has a relative bias");
    bias.data_mut().iter_mut().for_each(|x| *x = r.random_range(-1.0..1.0));
    let report = subspace_diagnostics(&model, 12)?;
    let exact = report
        .heads
        .iter()
        .all(|h| h.bias_toeplitz_distance == Some(0.0) && h.bias_diagonal_deviation == Some(0.0));
    let far = report.heads.iter().map(|h| h.absolute_toeplitz_distance).fold(f64::INFINITY, f64::min);
    let ranks: Vec<usize> = report.heads.iter().map(|h| h.absolute_rank).collect();
    let t = start.elapsed();
    outcome(
        report.ranks_within_bound() && exact && far > 0.0 && within(t, 5.0),
        format!("ranks {ranks:?} <= {}, bias exactly Toeplitz: {exact}, min absolute distance {far:.3}, {t:.2?}", 16 / 4),
    )
}

struct LearningRun {
    model: Model,
    accuracy: f64,
}

fn learning_run(variant: EncodingVariant, positional: bool, seed: u64, probe: &Probe) -> Result<LearningRun> {
    let task = PositionTask::default();
    let vocab = task.vocab()?;
    let corpus = task.generate(10_000, 32, seed)?;
    let model_cfg = ModelConfig {
        d: 64,
        heads: 4,
        layers: 2,
        d_ff: 256,
        n_max: 32,
        vocab_size: vocab.len(),
        variant,
        positional,
        seed,
        ..ModelConfig::default()
    };
    let train_cfg = TrainConfig {
        steps: 2000,
        batch_size: 32,
        warmup_steps: 100,
        seed,
        ..TrainConfig::default()
    };
    let out = train_loop(&model_cfg, &train_cfg, &Dataset::from_corpus(&corpus, &vocab), Objective::Mlm, None)?;
    let accuracy = evaluate_mlm(&out.model, probe)?;
    Ok(LearningRun {
        model: out.model,
        accuracy,
    })
}

fn desk_scale_learning() -> Result<(Outcome, Model)> {
    let start = Instant::now();
    let task = PositionTask::default();
    let vocab = task.vocab()?;
    let clean = Corpus {
        lines: vec![task.clean_line(32)?; 500],
        labels: None,
    };
    let probe = Probe::build(&clean.encode(&vocab), 0.15, vocab.len(), 99);
    let bayes = no_position_bayes(&probe, &task);

    let mut a = Vec::new();
    let mut first = None;
    for seed in 0..3 {
        let run = learning_run(EncodingVariant::TupeA, true, seed, &probe)?;
        a.push(run.accuracy);
        first.get_or_insert(run.model);
    }
    let mut rel = Vec::new();
    for seed in 0..3 {
        rel.push(learning_run(EncodingVariant::TupeR, true, seed, &probe)?.accuracy);
    }
    let ablation = learning_run(EncodingVariant::TupeA, false, 0, &probe)?.accuracy;

    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mean_a, mean_r) = (mean(&a), mean(&rel));
    let learns = a.iter().all(|&x| x > 0.95);
    let blind = (ablation - bayes.bag).abs() <= 0.05;
    let matches = mean_r >= mean_a - 0.01;
    let t = start.elapsed();
    let detail = format!(
        "TUPE-A {a:.4?}, TUPE-R {rel:.4?}, ablation {ablation:.4} vs Bayes {:.4} (marginal {:.4}), {t:.1?}",
        bayes.bag, bayes.marginal
    );
    let model = first.expect("three runs");
    Ok((
        Outcome {
            pass: learns && blind && matches && within(t, 600.0),
            detail,
        },
        model,
    ))
}

fn scale_preservation() -> Result<Outcome> {
    let (d, heads, n, samples) = (32, 4, 3, 10_000);
    let layout = HeadLayout::new(d, heads)?;
    let mut r = rng::stream(&[rng::domain::SAMPLE, 10]);
    let (mut abs_m2, mut tupe_m2) = (0.0, 0.0);
    for _ in 0..samples {
        let mut tape = Tape::new();
        let mut draw = |tape: &mut Tape, shape: &[usize]| tape.constant(random_tensor(shape, &mut r));
        let x = draw(&mut tape, &[n, d]);
        let w = draw(&mut tape, &[n, d]);
        let p = draw(&mut tape, &[n, d]);
        let layer = LayerAttention {
            w_q: draw(&mut tape, &[d, d]),
            w_k: draw(&mut tape, &[d, d]),
            w_v: draw(&mut tape, &[d, d]),
            w_o: draw(&mut tape, &[d, d]),
            rel_key: None,
            layout,
        };
        let proj = PositionalProjection {
            u_q: draw(&mut tape, &[d, d]),
            u_k: draw(&mut tape, &[d, d]),
            layout,
        };
        let abs = scores_abs_baseline(&mut tape, x, &layer)?;
        let table = AbsolutePositionTable { table: p, norm: None };
        let corr = compute_untied_correlation(&mut tape, &table, &proj, n)?;
        let tupe = scores_tupe(&mut tape, w, &layer, &corr)?;
        abs_m2 += tape.value(abs.scores[0]).at(1, 2).powi(2);
        tupe_m2 += tape.value(tupe.scores[0]).at(1, 2).powi(2);
    }
    let ratio = tupe_m2 / abs_m2;
    outcome(
        (ratio - 1.0).abs() <= 0.25,
        format!("second-moment ratio TUPE/ABS = {ratio:.3} over {samples} samples"),
    )
}

fn masking_statistics() -> Result<Outcome> {
    let start = Instant::now();
    let cfg = MaskingConfig {
        prob: 0.15,
        split: (0.8, 0.1, 0.1),
    };
    let vocab = 30;
    let mut r = rng::stream(&[rng::domain::MASKING, 11]);
    let line: Vec<usize> = (0..100).map(|i| FIRST_REGULAR + i % (vocab - FIRST_REGULAR)).collect();
    let (mut eligible, mut counts) = (0usize, [0usize; 3]);
    while eligible < 100_000 {
        let m = mask_sequence(&line, &cfg, vocab, &mut r);
        eligible += line.len();
        for c in m.corruption.iter().flatten() {
            counts[match c {
                Corruption::Mask => 0,
                Corruption::Random => 1,
                Corruption::Keep => 2,
            }] += 1;
        }
    }
    let selected: usize = counts.iter().sum();
    let rate = selected as f64 / eligible as f64;
    let split: Vec<f64> = counts.iter().map(|&c| c as f64 / selected as f64).collect();
    let ok = (rate - 0.15).abs() <= 0.01
        && split.iter().zip([0.8, 0.1, 0.1]).all(|(s, want)| (s - want).abs() <= 0.02);
    let relative = (rate - 0.15).abs() / 0.15;
    let t = start.elapsed();
    outcome(
        ok && within(t, 5.0),
        format!(
            "rate {rate:.4} ({:.1}% relative), split {:.4}/{:.4}/{:.4} over {eligible} tokens, {t:.2?}",
            100.0 * relative,
            split[0],
            split[1],
            split[2]
        ),
    )
}

fn report(index: usize, name: &str, result: Result<Outcome>) -> bool {
    let (pass, detail) = match result {
        Ok(o) => (o.pass, o.detail),
        Err(e) => (false, format!("error: {e}")),
    };
    println!("{} {index:>2} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    pass
}

fn main() -> ExitCode {
    let mut passed = vec![
        report(1, "decomposition identity", decomposition_identity()),
        report(2, "gradient fidelity", gradient_fidelity()),
        report(3, "Toeplitz factorization", toeplitz_factorization()),
        report(4, "reset contract", reset_contract()),
        report(5, "parameter census", parameter_census()),
        report(6, "caching equivalence", caching_equivalence()),
    ];

    let (learning, trained) = match desk_scale_learning() {
        Ok((o, m)) => (Ok(o), Some(m)),
        Err(e) => (Err(e), None),
    };
    let permutation = match &trained {
        Some(m) => permutation_equivariance(m),
        None => outcome(false, "no trained model".to_string()),
    };
    passed.push(report(7, "permutation equivariance", permutation));
    passed.push(report(8, "subspace diagnostics", subspace()));
    passed.push(report(9, "desk-scale learning", learning));
    passed.push(report(10, "scale preservation", scale_preservation()));
    passed.push(report(11, "masking statistics", masking_statistics()));

    let failed = passed.iter().filter(|p| !**p).count();
    println!("{} of {} criteria passed", passed.len() - failed, passed.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
