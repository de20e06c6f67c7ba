use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use corinfomax::cli::{self, RunConfig};
use corinfomax::Error;

#[derive(Parser)]
#[command(name = "corinfomax", version, about = "Correlative information maximization pretraining")]
struct Args {
    /// Flat `key = value` config file.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Override a config value, e.g. `--set alpha=100`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured blobs dataset as a table.
    GenData,
    /// Pretrain and save a checkpoint plus per-epoch metrics.
    Pretrain,
    /// Linear probe on the saved checkpoint.
    Probe,
    /// Compare analytic and finite-difference loss gradients.
    Gradcheck,
    /// Eigenvalues of the tracked projector covariances.
    Spectrum,
    /// Share of a training step spent in Cholesky, log-determinant and solves.
    BenchLogdet,
    /// Print the effective configuration.
    DumpConfig,
}

fn run(command: &Command, cfg: &RunConfig) -> Result<bool, Error> {
    match command {
        Command::GenData => println!("wrote {}", cli::cmd_gen_data(cfg)?.display()),
        Command::Pretrain => print!("{}", cli::cmd_pretrain(cfg)?.render()),
        Command::Probe => {
            let r = cli::cmd_probe(cfg)?;
            println!(
                "run_id={} probe_accuracy={:.4} min_eig={:.4e} effective_rank={:.3}",
                cfg.run_id, r.accuracy, r.min_eig, r.effective_rank
            );
        }
        Command::Gradcheck => {
            let r = cli::cmd_gradcheck(cfg)?;
            print!("{}", r.render());
            return Ok(r.passed);
        }
        Command::Spectrum => {
            let s = cli::cmd_spectrum(cfg)?;
            print!("{}", s.render());
            println!(
                "min_eig={:.4e} max_eig={:.4e} effective_rank={:.3} ldmi_tracked={:.4}",
                s.r1.min, s.r1.max, s.r1.effective_rank, s.ldmi_tracked
            );
        }
        Command::BenchLogdet => print!("{}", cli::render_bench(&cli::cmd_bench_logdet(cfg)?)),
        Command::DumpConfig => print!("{}", cli::dump_config(cfg)),
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    let outcome = cli::parse_config(args.config.as_deref(), &args.set).and_then(|cfg| run(&args.command, &cfg));
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        // gradient check ran but exceeded the tolerance
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(cli::exit_code(&e) as u8)
        }
    }
}
