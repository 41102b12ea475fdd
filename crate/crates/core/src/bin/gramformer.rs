use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gramformer::cli;
use gramformer::error::Error;

#[derive(Parser)]
#[command(name = "gramformer", version, about = "Graph-modulated transformer for crowd density estimation on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene dataset
    Gen {
        /// Scene spec file (key = value); desk defaults when omitted
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Output dataset directory
        #[arg(long)]
        out: PathBuf,
        /// Number of scenes
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model and write checkpoints + metrics
    Train {
        /// Run config file; defaults when omitted
        #[arg(long)]
        config: Option<PathBuf>,
        /// Training dataset directory
        #[arg(long)]
        data: PathBuf,
        /// Held-out dataset for the metrics log (defaults to --data)
        #[arg(long)]
        eval_data: Option<PathBuf>,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Config the checkpoint was trained with; defaults when omitted
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write the JSON report here
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Train and evaluate several variants across seeds
    Compare {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        eval_data: PathBuf,
        /// Comma-separated list: gramformer,vanilla,graphormer
        #[arg(long, default_value = "gramformer,vanilla,graphormer")]
        variants: String,
        /// Seeds per variant (base seed comes from the config)
        #[arg(long, default_value_t = 1)]
        seeds: usize,
        /// Drop the attention-graph modulation (gramformer only)
        #[arg(long)]
        no_ewr: bool,
        /// Drop the centrality encoding (gramformer only)
        #[arg(long)]
        no_centrality: bool,
        /// Override the edge regularization weight
        #[arg(long)]
        lambda: Option<f64>,
        /// Also write per-seed metrics as CSV
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check analytic gradients against finite differences on a tiny model
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Test hook: corrupt one gradient so the check must fail
        #[arg(long, hide = true)]
        corrupt_backward: bool,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        _ => 1,
    }
}

fn run(command: Command) -> gramformer::Result<u8> {
    match command {
        Command::Gen { spec, out, n, seed } => {
            let spec = cli::load_scene_spec(spec.as_ref())?;
            let summary = cli::cmd_gen(&spec, &out, n, seed)?;
            println!(
                "generated {} scenes into {} (total count {}, mean count {:.2})",
                summary.scenes,
                out.display(),
                summary.total_count,
                summary.mean_count
            );
            Ok(0)
        }
        Command::Train { config, data, eval_data, out } => {
            let mut cfg = cli::load_run_config(config.as_ref())?;
            cfg.data = data.display().to_string();
            if let Some(ed) = &eval_data {
                cfg.eval_data = ed.display().to_string();
            }
            cfg.out = out.display().to_string();
            let outcome = cli::cmd_train(&cfg, &data, eval_data.as_deref(), &out)?;
            match (outcome.final_loss, outcome.best_mae) {
                (Some(loss), Some(mae)) => {
                    println!("trained {} iterations: final loss {loss:.6}, best eval mae {mae:.4}", cfg.iters)
                }
                _ => println!("trained 0 iterations: initial checkpoint written"),
            }
            println!("wrote {}", out.join("final.ckpt").display());
            Ok(0)
        }
        Command::Eval { checkpoint, data, config, json } => {
            let cfg = cli::load_run_config(config.as_ref())?;
            let report = cli::cmd_eval(&cfg, &checkpoint, &data)?;
            print!("{}", report.render_text());
            println!("{}", report.to_json());
            if let Some(path) = json {
                std::fs::write(&path, report.to_json()).map_err(Error::Io)?;
            }
            Ok(0)
        }
        Command::Compare { config, data, eval_data, variants, seeds, no_ewr, no_centrality, lambda, out } => {
            let mut cfg = cli::load_run_config(config.as_ref())?;
            if no_ewr {
                cfg.use_ewr = false;
            }
            if no_centrality {
                cfg.use_centrality = false;
            }
            if let Some(l) = lambda {
                cfg.lambda = l;
            }
            let variants = cli::parse_variants(&variants)?;
            let rows = cli::cmd_compare(&cfg, &data, &eval_data, &variants, seeds)?;
            print!("{}", cli::render_compare_table(&rows));
            if let Some(path) = out {
                std::fs::write(&path, cli::compare_csv(&rows)).map_err(Error::Io)?;
            }
            Ok(0)
        }
        Command::Gradcheck { config, seed, corrupt_backward } => {
            let cfg = cli::load_run_config(config.as_ref())?;
            let report = cli::cmd_gradcheck(&cfg, seed, corrupt_backward)?;
            print!("{}", report.render());
            if report.passed() {
                let worst = report.worst().map(|e| e.max_rel_err).unwrap_or(0.0);
                println!("gradient check passed: worst rel err {worst:.3e} (tol {:.1e})", report.tol);
                Ok(0)
            } else {
                println!("gradient check FAILED (tol {:.1e})", report.tol);
                Ok(1)
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
