use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use evctx_core::downstream::MetricsReport;
use evctx_core::gradcheck::run_suite;
use evctx_core::runtime::pipeline::format_ablation_table;
use evctx_core::runtime::{AblationAxis, RunConfig, Session};
use evctx_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "evctx", version, about = "Event contextualization pretraining and probes")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Output directory for data, checkpoints, config and metrics.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Config file of `key = value` lines applied on top of the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value = "desk-scale")]
    preset: String,
    /// Global seed; every stage seed is derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override one key, e.g. `--set mask.steps=500`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Log progress to stderr (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic training and held-out feature files.
    GenerateData,
    /// Contrastive pretraining of the clip backbone.
    PretrainBackbone,
    /// Mask-prediction pretraining of the contextualizer on a saved backbone.
    PretrainTxe,
    /// Train verb and relation probes on frozen features.
    Probe,
    /// Evaluate saved probes and masked retrieval on held-out data.
    Eval,
    /// Finite-difference gradient checks of every op and the composed model.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long, default_value_t = 1e-3)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Sweep one pretraining axis and print a comparison table.
    Ablate {
        #[arg(long, value_parser = ["mask-size", "stride", "loss", "sampler"])]
        axis: String,
    },
}

fn resolve_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::preset(&c.preset)?;
    if let Some(path) = &c.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        cfg.apply_text(&text)?;
    }
    if let Some(seed) = c.seed {
        cfg.set("run.seed", &seed.to_string())?;
    }
    for kv in &c.overrides {
        cfg.apply_override(kv)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_report(r: &MetricsReport) {
    let values: Vec<String> = r.values.iter().map(|(k, v)| format!("{k}={v:.6}")).collect();
    println!("{:<32} n={:<6} {}", r.task, r.n_samples, values.join(" "));
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli.common)?;
    if let Command::Gradcheck { seeds, step, tol } = cli.command {
        let mut failed = 0usize;
        let mut worst = 0.0f64;
        let mut total = 0usize;
        for seed in 0..seeds {
            for e in run_suite(seed, step, tol)? {
                total += 1;
                worst = worst.max(e.report.rel_error);
                if !e.report.passed {
                    failed += 1;
                    println!("FAIL {} seed {} rel_error {:.3e}", e.name, e.seed, e.report.rel_error);
                }
            }
        }
        println!("gradcheck: {total} checks over {seeds} seeds, worst rel_error {worst:.3e}, {failed} failed");
        if failed > 0 {
            return Err(Error::InvalidArgument(format!("{failed} gradient checks failed")));
        }
        return Ok(());
    }
    let session = Session::open(cfg, &cli.common.out)?;
    match cli.command {
        Command::GenerateData => {
            let (train, eval) = session.generate_data()?;
            println!(
                "wrote {} ({} events) and {} ({} events)",
                session.out.train_data().display(),
                train.n_events(),
                session.out.eval_data().display(),
                eval.n_events()
            );
        }
        Command::PretrainBackbone => {
            session.pretrain_backbone()?;
            println!("wrote {}", session.out.backbone().display());
        }
        Command::PretrainTxe => {
            session.pretrain_txe()?;
            println!("wrote {}", session.out.txe().display());
        }
        Command::Probe => session.probe()?.iter().for_each(print_report),
        Command::Eval => session.eval()?.iter().for_each(print_report),
        Command::Ablate { axis } => {
            let axis = AblationAxis::parse(&axis)?;
            let rows = session.ablate(axis)?;
            print!("{}", format_ablation_table(axis, &rows));
        }
        Command::Gradcheck { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let level = match cli.common.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: code={} {e}", e.code());
            ExitCode::FAILURE
        }
    }
}
