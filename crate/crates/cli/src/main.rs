mod commands;
mod config;

use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};

use commands::Failure;

fn seed_arg() -> Arg {
    Arg::new("seed").long("seed").value_name("SEED").help("global seed")
}

fn config_args(cmd: Command) -> Command {
    config::KEYS.iter().fold(cmd, |cmd, (key, help)| {
        if *key == "seed" {
            return cmd.arg(seed_arg());
        }
        cmd.arg(
            Arg::new(*key)
                .long(key.replace('_', "-"))
                .value_name("VALUE")
                .help(*help),
        )
    })
}

fn cli() -> Command {
    let config_file = Arg::new("config").long("config").value_name("FILE").help("flat key = value config file");
    Command::new("tupe")
        .about("Transformer laboratory for untied positional encoding")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(config_args(
            Command::new("train")
                .about("Train an encoder and write metrics, checkpoints and config.resolved")
                .arg(config_file.clone()),
        ))
        .subcommand(
            Command::new("gradcheck")
                .about("Compare analytic and finite-difference gradients of the masked-LM loss")
                .arg(Arg::new("variant").long("variant").value_name("VARIANT").help("check one variant instead of all"))
                .arg(Arg::new("n").long("n").value_name("N").default_value("5").help("sequence length, [CLS] included"))
                .arg(seed_arg())
                .arg(
                    Arg::new("inject-fault")
                        .long("inject-fault")
                        .action(ArgAction::SetTrue)
                        .hide(true),
                ),
        )
        .subcommand(
            Command::new("verify-toeplitz")
                .about("Check the Fourier factorization of random Toeplitz matrices")
                .arg(
                    Arg::new("n")
                        .long("n")
                        .value_name("N[,N...]")
                        .default_value("1,2,3,4,8,16")
                        .help("matrix sizes"),
                )
                .arg(Arg::new("seeds").long("seeds").value_name("COUNT").default_value("100").help("random matrices per size"))
                .arg(seed_arg())
                .arg(Arg::new("corrupt-g").long("corrupt-g").action(ArgAction::SetTrue).hide(true)),
        )
        .subcommand(
            Command::new("analyze")
                .about("Score decomposition, positional heatmaps or subspace diagnostics of a checkpoint")
                .arg(Arg::new("ckpt").long("ckpt").value_name("FILE").required(true).help("checkpoint"))
                .arg(
                    Arg::new("mode")
                        .long("mode")
                        .required(true)
                        .value_parser(["decompose", "heatmaps", "subspace"])
                        .help("analysis to run"),
                )
                .arg(Arg::new("out").long("out").value_name("DIR").required(true).help("output directory"))
                .arg(Arg::new("n").long("n").value_name("N").help("sequence length (default: the checkpoint's n_max)"))
                .arg(Arg::new("batch").long("batch").value_name("COUNT").default_value("16").help("sequences averaged by decompose"))
                .arg(Arg::new("corpus").long("corpus").value_name("FILE").help("corpus for decompose (default: random tokens)"))
                .arg(Arg::new("vocab").long("vocab").value_name("FILE").help("vocabulary of --corpus"))
                .arg(seed_arg()),
        )
        .subcommand(
            Command::new("gendata")
                .about("Write a synthetic corpus and its vocabulary")
                .arg(
                    Arg::new("task")
                        .long("task")
                        .value_parser(["position", "parity"])
                        .default_value("position")
                        .help("synthetic task"),
                )
                .arg(Arg::new("lines").long("lines").value_name("COUNT").default_value("10000").help("lines to generate"))
                .arg(Arg::new("n").long("n").value_name("N").default_value("32").help("sequence length, [CLS] included"))
                .arg(seed_arg())
                .arg(Arg::new("out").long("out").value_name("DIR").required(true).help("output directory")),
        )
        .subcommand(
            Command::new("eval")
                .about("Masked-token or class accuracy of a checkpoint on a corpus")
                .arg(Arg::new("ckpt").long("ckpt").value_name("FILE").required(true).help("checkpoint"))
                .arg(Arg::new("corpus").long("corpus").value_name("FILE").required(true).help("corpus file"))
                .arg(Arg::new("vocab").long("vocab").value_name("FILE").required(true).help("vocabulary file"))
                .arg(
                    Arg::new("objective")
                        .long("objective")
                        .value_parser(["mlm", "cls"])
                        .default_value("mlm")
                        .help("what to score"),
                )
                .arg(
                    Arg::new("mask-prob")
                        .long("mask-prob")
                        .value_name("P")
                        .default_value("0.15")
                        .help("fraction of tokens masked for mlm"),
                )
                .arg(seed_arg()),
        )
}

fn dispatch(matches: &ArgMatches) -> Result<(), Failure> {
    match matches.subcommand() {
        Some(("train", m)) => commands::train(m),
        Some(("gradcheck", m)) => commands::gradcheck(m),
        Some(("verify-toeplitz", m)) => commands::verify_toeplitz(m),
        Some(("analyze", m)) => commands::analyze(m),
        Some(("gendata", m)) => commands::gendata(m),
        Some(("eval", m)) => commands::eval(m),
        _ => unreachable!("a subcommand is required"),
    }
}

fn main() -> ExitCode {
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(&matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
