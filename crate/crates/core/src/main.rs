use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use vldac::config::TrainConfig;
use vldac::expcli::{self, ExpError, ExperimentManifest};

#[derive(Parser)]
#[command(name = "vldac", version, about = "Token-level PPO with a step-level critic on miniature environments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train every seed of a config under $VLDAC_OUTPUT_ROOT/<run.name>/.
    Train {
        config: PathBuf,
        /// Continue seeds that already have a checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Greedy evaluation of a checkpoint.
    Eval {
        checkpoint: PathBuf,
        /// Environment kind (hallway_nav, rooms_nav, card_points, tiny_shop).
        env: String,
        #[arg(long, default_value_t = 50)]
        episodes: usize,
    },
    /// Run every cell and seed of a manifest, then write summary.tsv.
    Sweep { manifest: PathBuf },
    /// Per-group (env_steps, mean_sr, std_sr) tables.
    PlotData {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        #[arg(long, default_value_t = 1)]
        window: usize,
        /// Output directory; defaults to $VLDAC_OUTPUT_ROOT/plot_data.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Final-SR difference, pooled std and last-quartile flag of A versus B.
    Compare { group_a: PathBuf, group_b: PathBuf },
    /// Finite-difference check of every loss.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable")
}

fn run(cli: Cli) -> Result<bool, ExpError> {
    let root = expcli::output_root();
    match cli.cmd {
        Cmd::Train { config, resume } => {
            let cfg = TrainConfig::load(&config)?;
            for (seed, sr) in expcli::run_train(&cfg, &root, resume)? {
                match sr {
                    Some(v) => println!("seed {seed}: final SR {v:.4}"),
                    None => println!("seed {seed}: no eval points"),
                }
            }
        }
        Cmd::Eval {
            checkpoint,
            env,
            episodes,
        } => {
            let r = expcli::run_eval(&checkpoint, &env, episodes)?;
            println!(
                "{{\"episodes\":{episodes},\"success_rate\":{},\"mean_return\":{},\"mean_length\":{}}}",
                r.success_rate, r.mean_return, r.mean_length
            );
        }
        Cmd::Sweep { manifest } => {
            let m = ExperimentManifest::load(&manifest)?;
            let report = expcli::run_sweep(&m, &root)?;
            print!("{}", expcli::summary_table(&report.summary));
            let failed: Vec<_> = report.runs.iter().filter(|r| r.outcome.is_err()).collect();
            for r in &failed {
                eprintln!("{} seed {} failed: {}", r.label, r.seed, r.outcome.as_ref().unwrap_err());
            }
            return Ok(failed.is_empty());
        }
        Cmd::PlotData { dirs, window, out } => {
            let out = out.unwrap_or_else(|| root.join("plot_data"));
            for p in expcli::emit_plot_data(&dirs, window, &out)? {
                println!("{}", p.display());
            }
        }
        Cmd::Compare { group_a, group_b } => {
            println!("{}", json(&expcli::compare_dirs(&group_a, &group_b)?));
        }
        Cmd::Gradcheck { instances, seed } => {
            let checks = expcli::gradcheck_suite(instances, seed)?;
            let mut ok = true;
            for c in &checks {
                ok &= c.passed();
                println!(
                    "{:<16} {} instances {:>6} entries  max rel err {:.3e}  {}",
                    c.name,
                    c.instances,
                    c.entries,
                    c.max_rel_error,
                    if c.passed() { "ok" } else { "FAIL" }
                );
            }
            return Ok(ok);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
