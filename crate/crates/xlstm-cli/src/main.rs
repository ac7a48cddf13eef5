use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use xlstm::blocks::{ModelParams, StackConfig};
use xlstm::checkpoint::{load_model, save_model};
use xlstm::config::RunConfig;
use xlstm::equiv::{parallel_recurrent_suite, stabilization_suite};
use xlstm::gradcheck::model_gradcheck;
use xlstm::tensor::Rng;
use xlstm::train::{evaluate, metrics_csv, train};

/// Exit codes: 0 ok, 1 check failure, 2 usage or config error.
#[derive(Parser)]
#[command(name = "xlstm", about = "xLSTM training and verification CLI")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model from a TOML run config; writes metrics CSV and a
    /// checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for metrics.csv and model.ckpt.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the held-out task from a run config.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint path; when omitted, a freshly initialized (untrained)
        /// model is evaluated.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Finite-difference gradient check; without --config, runs the built-in
    /// sLSTM-only, mLSTM-only, and mixed 2-block suites.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-4)]
        threshold: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Stabilized/naive and parallel/recurrent equivalence trials.
    Equivcheck {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 64)]
        max_t: usize,
        #[arg(long, default_value_t = 32)]
        max_d: usize,
        #[arg(long, default_value_t = 1e-8)]
        threshold: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Train { config, seed, out } => cmd_train(&config, seed, &out),
        Cmd::Eval {
            config,
            checkpoint,
            seed,
        } => cmd_eval(&config, checkpoint.as_deref(), seed),
        Cmd::Gradcheck {
            config,
            threshold,
            seed,
        } => cmd_gradcheck(config.as_deref(), threshold, seed),
        Cmd::Equivcheck {
            trials,
            max_t,
            max_d,
            threshold,
            seed,
        } => cmd_equivcheck(trials, max_t, max_d, threshold, seed),
    };
    match result {
        Ok(true) => ExitCode::from(0),
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn cmd_train(config: &std::path::Path, seed: Option<u64>, out: &std::path::Path) -> anyhow::Result<bool> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    std::fs::create_dir_all(out)?;
    let mut model = ModelParams::init(&cfg.model, &mut Rng::new(cfg.train.seed))?;
    let records = train(&mut model, &cfg.task, cfg.eval_task(), &cfg.train)?;
    let metrics_path = out.join("metrics.csv");
    std::fs::write(&metrics_path, metrics_csv(&cfg.to_toml(), &records))?;
    let ckpt_path = out.join("model.ckpt");
    save_model(&ckpt_path, &model)?;
    if let Some(last) = records.last() {
        println!(
            "trained {} steps: train_loss {} eval_loss {}",
            last.step, last.train_loss, last.eval.loss
        );
    }
    println!("metrics: {}", metrics_path.display());
    println!("checkpoint: {}", ckpt_path.display());
    Ok(true)
}

fn cmd_eval(
    config: &std::path::Path,
    checkpoint: Option<&std::path::Path>,
    seed: Option<u64>,
) -> anyhow::Result<bool> {
    let cfg = RunConfig::load(config)?;
    let model = match checkpoint {
        Some(path) => load_model(path)?,
        None => ModelParams::init(&cfg.model, &mut Rng::new(cfg.train.seed))?,
    };
    let seed = seed.unwrap_or(cfg.train.seed.wrapping_add(0x9e3779b97f4a7c15));
    let summary = evaluate(&model, cfg.eval_task(), cfg.train.eval_samples, seed)?;
    print!("eval_loss {}", summary.loss);
    if let Some(acc) = summary.raw_accuracy {
        print!(" accuracy {acc}");
    }
    if let Some(s) = summary.scaled {
        print!(" scaled_accuracy {s}");
    }
    println!();
    Ok(true)
}

/// The built-in gradcheck suite mirrors the acceptance shapes: d=16, T=8,
/// vocab 11, two blocks.
fn builtin_gradcheck_models() -> Vec<(&'static str, StackConfig)> {
    let base = |ratio| StackConfig {
        num_blocks: 2,
        ratio,
        slstm_positions: None,
        embedding_dim: 16,
        vocab_size: 11,
        real_input_dim: None,
        tie_weights: false,
        slstm_conv: true,
    };
    vec![
        ("slstm-only", base((0, 1))),
        ("mlstm-only", base((1, 0))),
        ("mixed-1:1", base((1, 1))),
    ]
}

fn cmd_gradcheck(
    config: Option<&std::path::Path>,
    threshold: f64,
    seed: u64,
) -> anyhow::Result<bool> {
    let models = match config {
        Some(path) => vec![("config".to_string(), RunConfig::load(path)?.model)],
        None => builtin_gradcheck_models()
            .into_iter()
            .map(|(n, c)| (n.to_string(), c))
            .collect(),
    };
    let mut all_pass = true;
    for (name, model_cfg) in models {
        let report = model_gradcheck(&model_cfg, 8, seed)?;
        for g in &report.groups {
            println!("{name} {}: {:.3e}", g.name, g.max_rel_err);
        }
        let ok = report.passes(threshold);
        println!(
            "{name}: worst {:.3e} threshold {threshold:.1e} -> {}",
            report.worst(),
            if ok { "pass" } else { "FAIL" }
        );
        all_pass &= ok;
    }
    Ok(all_pass)
}

fn cmd_equivcheck(
    trials: usize,
    max_t: usize,
    max_d: usize,
    threshold: f64,
    seed: u64,
) -> anyhow::Result<bool> {
    if trials == 0 {
        anyhow::bail!("equivcheck: --trials must be positive");
    }
    let stab = stabilization_suite(trials, max_t, max_d, seed)?;
    println!(
        "stabilization: {} trials, worst {:.3e} at seed {}",
        stab.trials, stab.worst, stab.worst_seed
    );
    let par = parallel_recurrent_suite(trials, max_t, max_d, seed + trials as u64)?;
    println!(
        "parallel-recurrent: {} trials, worst {:.3e} at seed {}",
        par.trials, par.worst, par.worst_seed
    );
    let ok = stab.passes(threshold) && par.passes(threshold);
    println!(
        "threshold {threshold:.1e} -> {}",
        if ok { "pass" } else { "FAIL" }
    );
    Ok(ok)
}
