use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tupe_core::analysis::{self, parse_csv};
use tupe_core::model::Vocab;
use tupe_core::train::Corpus;
use tupe_core::Model;

fn tupe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tupe")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL: &[&str] = &[
    "--d", "16", "--heads", "2", "--layers", "1", "--d-ff", "32", "--n-max", "12", "--n", "12", "--lines", "64",
    "--steps", "12", "--warmup-steps", "2", "--batch-size", "8", "--log-every", "4",
];

fn train_small(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--out-dir", p(dir)];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    tupe(&args)
}

#[test]
fn gendata_is_reproducible_and_balanced() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let out = tupe(&["gendata", "--task", "parity", "--lines", "1000", "--n", "9", "--seed", "4", "--out", p(d)]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    let text = fs::read(a.join("corpus.txt")).unwrap();
    assert_eq!(text, fs::read(b.join("corpus.txt")).unwrap());
    let corpus = Corpus::load(&a.join("corpus.txt"), true).unwrap();
    let ones = corpus.labels.as_ref().unwrap().iter().filter(|&&l| l == 1).count();
    assert!((ones as f64 / 1000.0 - 0.5).abs() <= 0.01);

    let empty = dir.path().join("empty");
    let out = tupe(&["gendata", "--lines", "0", "--out", p(&empty)]);
    assert_eq!(code(&out), 0);
    assert!(Corpus::load(&empty.join("corpus.txt"), false).unwrap().is_empty());
    assert_eq!(Vocab::load(&empty.join("vocab.txt")).unwrap().len(), 30);
}

#[test]
fn training_is_deterministic_and_resolved_config_replays() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    for d in [&a, &b] {
        let out = train_small(d, &["--seed", "3", "--variant", "tupe-r"]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    let metrics = fs::read(a.join("metrics.csv")).unwrap();
    assert_eq!(metrics, fs::read(b.join("metrics.csv")).unwrap());
    assert!(a.join("final.tupe").is_file());

    let out = tupe(&["train", "--config", p(&a.join("config.resolved")), "--out-dir", p(&c)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(metrics, fs::read(c.join("metrics.csv")).unwrap());

    let other = dir.path().join("d");
    assert_eq!(code(&train_small(&other, &["--seed", "4", "--variant", "tupe-r"])), 0);
    assert_ne!(metrics, fs::read(other.join("metrics.csv")).unwrap());
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "steps = 3\nvariant = t5\nd = 16\nheads = 2\nlayers = 1\nd_ff = 16\nlines = 16\nn = 8\nn_max = 8\nwarmup_steps = 1\n").unwrap();
    let out_dir = dir.path().join("o");
    let out = tupe(&["train", "--config", p(&cfg), "--steps", "4", "--out-dir", p(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let resolved = fs::read_to_string(out_dir.join("config.resolved")).unwrap();
    assert!(resolved.contains("steps = 4\n") && resolved.contains("variant = t5\n"), "{resolved}");
}

#[test]
fn usage_errors_exit_with_one() {
    let out = tupe(&["train", "--corpus", "/no/such/corpus.txt", "--vocab", "/no/such/vocab.txt"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("/no/such/corpus.txt"));
    assert_eq!(code(&tupe(&["train", "--no-such-flag"])), 1);
    assert_eq!(code(&tupe(&["train", "--variant", "nope"])), 1);
    assert_eq!(code(&tupe(&[])), 1);

    let help = tupe(&["train", "--help"]);
    assert_eq!(code(&help), 0);
    for flag in ["--config", "--variant", "--d-ff", "--peak-lr", "--split-keep", "--seed", "--out-dir"] {
        assert!(stdout(&help).contains(flag), "{flag}");
    }
}

#[test]
fn divergence_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_small(dir.path(), &["--init-std", "1e200"]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stderr(&out).contains("diverged"));
}

#[test]
fn gradcheck_covers_every_variant_and_catches_a_fault() {
    let out = tupe(&["gradcheck"]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    for v in tupe_core::EncodingVariant::ALL {
        assert!(stdout(&out).lines().any(|l| l.starts_with(&format!("{} ", v.name()))), "{v}");
    }
    let one = tupe(&["gradcheck", "--variant", "tupe-r"]);
    assert_eq!(code(&one), 0);
    assert_eq!(stdout(&one).lines().count(), 2);

    let bad = tupe(&["gradcheck", "--variant", "tupe-a", "--inject-fault"]);
    assert_eq!(code(&bad), 2);
    assert!(stderr(&bad).contains("layer"), "{}", stderr(&bad));
}

#[test]
fn toeplitz_verification() {
    assert_eq!(code(&tupe(&["verify-toeplitz", "--n", "8", "--seeds", "100"])), 0);
    assert_eq!(code(&tupe(&["verify-toeplitz", "--n", "1"])), 0);
    assert_eq!(code(&tupe(&["verify-toeplitz", "--n", "4", "--seeds", "2", "--corrupt-g"])), 2);
    assert_eq!(code(&tupe(&["verify-toeplitz", "--n", "0"])), 1);
}

#[test]
fn analysis_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let tupe_run = dir.path().join("tupe");
    assert_eq!(code(&train_small(&tupe_run, &["--variant", "tupe-a"])), 0);
    let ckpt = tupe_run.join("final.tupe");

    let hm = dir.path().join("hm");
    let out = tupe(&["analyze", "--ckpt", p(&ckpt), "--mode", "heatmaps", "--out", p(&hm), "--n", "10"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for h in 0..2 {
        let m = parse_csv(&fs::read_to_string(hm.join(format!("head_{h}.csv"))).unwrap()).unwrap();
        assert_eq!(m.shape(), &[10, 10]);
        assert!(hm.join(format!("head_{h}.pgm")).is_file());
    }
    assert!(hm.join("report.json").is_file());

    let refused = tupe(&["analyze", "--ckpt", p(&ckpt), "--mode", "decompose", "--out", p(&dir.path().join("x"))]);
    assert_eq!(code(&refused), 1);

    let ss = dir.path().join("ss");
    let out = tupe(&["analyze", "--ckpt", p(&ckpt), "--mode", "subspace", "--out", p(&ss)]);
    assert_eq!(code(&out), 0);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(ss.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["heads"].as_array().unwrap().len(), 2);

    let abs_run = dir.path().join("abs");
    assert_eq!(code(&train_small(&abs_run, &["--variant", "abs"])), 0);
    let data = dir.path().join("data");
    assert_eq!(code(&tupe(&["gendata", "--lines", "6", "--n", "12", "--seed", "9", "--out", p(&data)])), 0);
    let dc = dir.path().join("dc");
    let out = tupe(&[
        "analyze", "--ckpt", p(&abs_run.join("final.tupe")), "--mode", "decompose", "--out", p(&dc),
        "--corpus", p(&data.join("corpus.txt")), "--vocab", p(&data.join("vocab.txt")),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let mut sum = parse_csv(&fs::read_to_string(dc.join("decomposition_ww.csv")).unwrap()).unwrap();
    for name in ["wp", "pw", "pp"] {
        let t = parse_csv(&fs::read_to_string(dc.join(format!("decomposition_{name}.csv"))).unwrap()).unwrap();
        sum.data_mut().iter_mut().zip(t.data()).for_each(|(s, v)| *s += v);
    }
    let model = Model::load(&abs_run.join("final.tupe")).unwrap().0;
    let vocab = Vocab::load(&data.join("vocab.txt")).unwrap();
    let batch = Corpus::load(&data.join("corpus.txt"), false).unwrap().encode(&vocab);
    let scores = analysis::encoder_scores(&model, &batch).unwrap();
    let n = 12;
    let count = (batch.len() * scores.len()) as f64;
    for i in 0..n * n {
        let mean: f64 = scores.iter().flat_map(|s| (0..batch.len()).map(move |b| s.data()[b * n * n + i])).sum::<f64>() / count;
        assert!((sum.data()[i] - mean).abs() < 1e-7 * mean.abs().max(1.0));
    }
}

#[test]
fn eval_reports_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    assert_eq!(code(&train_small(&run, &[])), 0);
    let data = dir.path().join("data");
    assert_eq!(code(&tupe(&["gendata", "--lines", "20", "--n", "12", "--out", p(&data)])), 0);
    let (ckpt, corpus, vocab) = (run.join("final.tupe"), data.join("corpus.txt"), data.join("vocab.txt"));
    let args = ["eval", "--ckpt", p(&ckpt), "--corpus", p(&corpus), "--vocab", p(&vocab), "--seed", "2"];
    let a = tupe(&args);
    assert_eq!(code(&a), 0, "{}", stderr(&a));
    let v: serde_json::Value = serde_json::from_str(&stdout(&a)).unwrap();
    assert!((0.0..=1.0).contains(&v["accuracy"].as_f64().unwrap()));
    assert_eq!(stdout(&a), stdout(&tupe(&args)));
}
