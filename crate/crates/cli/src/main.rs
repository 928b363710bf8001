use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use scarcegrad::ad::primitive_suite;
use scarcegrad::data::{export_dataset, gen_cheaters, gen_synthetic1, CheatersOptions, Synthetic1Options};
use scarcegrad::inner::inner_model_suite;
use scarcegrad::lab::artifacts::{read_profile, PROFILE_HEADER, SIGNAL_HEADER};
use scarcegrad::lab::{bucket_summary, emit_reports, run_on, ExperimentConfig, PRESETS};
use scarcegrad::{Error, Result};

/// Relative error allowed by `grad-check`.
const GRAD_CHECK_TOLERANCE: f64 = 1e-5;

#[derive(Parser)]
#[command(name = "scarcegrad", version, about = "Bilevel graph learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment from a TOML file or a built-in preset name.
    Run {
        config: String,
        #[arg(long)]
        seed: Option<u64>,
        /// Artifact directory; defaults to the config's `out_dir`, else `runs/<name>`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        tau_out: Option<usize>,
        #[arg(long)]
        tau_in: Option<usize>,
        /// Skip the SVG reports.
        #[arg(long)]
        no_report: bool,
    },
    /// Print the per-distance summary of a hypergradient snapshot.
    Profile {
        dir: PathBuf,
        #[arg(long)]
        iteration: usize,
    },
    /// Render SVG charts and bucket CSVs for an artifact directory.
    Report { dir: PathBuf },
    /// Generate a synthetic dataset and export it.
    GenDataset {
        /// `synthetic1` or `cheaters`.
        name: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Node count for synthetic1.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Finite-difference check of every tape primitive and both inner models.
    GradCheck {
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-6)]
        step: f64,
    },
    /// List the built-in presets, or print one as TOML.
    Presets { name: Option<String> },
}

fn load_config(spec: &str) -> Result<ExperimentConfig> {
    let path = Path::new(spec);
    if path.exists() {
        ExperimentConfig::load(path)
    } else {
        ExperimentConfig::preset(spec)
    }
}

fn cmd_run(
    config: &str,
    seed: Option<u64>,
    out: Option<PathBuf>,
    tau_out: Option<usize>,
    tau_in: Option<usize>,
    no_report: bool,
) -> Result<()> {
    let cfg = load_config(config)?.with_overrides(seed, tau_out, tau_in);
    cfg.validate()?;
    let out = out.or_else(|| cfg.out_dir.clone()).unwrap_or_else(|| Path::new("runs").join(&cfg.name));
    let ds = cfg.dataset.build()?;
    eprintln!("{}: dataset {} with {} nodes, writing to {}", cfg.name, ds.name, ds.n(), out.display());
    let start = Instant::now();
    let artifacts = run_on(&cfg, &ds, &out, &mut |r| {
        eprintln!(
            "iter {:>4}  f_out {:.6e}  outer {:.4}  val {:.4}  test {:.4}  [{:.1}s]",
            r.iteration,
            r.f_out,
            r.outer_metric,
            r.val_metric,
            r.test_metric,
            start.elapsed().as_secs_f64()
        )
    })?;
    if !no_report {
        emit_reports(&out)?;
    }
    let best = &artifacts.result.history[artifacts.result.best_iteration];
    println!(
        "best iteration {}: val {:.4} test {:.4}; config hash {}",
        best.iteration, best.val_metric, best.test_metric, artifacts.config_hash
    );
    Ok(())
}

fn cmd_profile(dir: &Path, iteration: usize) -> Result<()> {
    for (prefix, header, label) in
        [("profile_iter", PROFILE_HEADER, "|hypergradient|"), ("g2g_signal_iter", SIGNAL_HEADER, "|weight change|")]
    {
        let path = dir.join(format!("{prefix}{iteration}.csv"));
        if label != "|hypergradient|" && !path.exists() {
            continue;
        }
        let rows = read_profile(&path, header)?;
        println!("{label} at iteration {iteration} ({} edges)", rows.len());
        println!("{:>8} {:>8} {:>8} {:>14}", "distance", "edges", "nonzero", "max");
        for b in bucket_summary(&rows) {
            let d = b.distance.map_or_else(|| "inf".to_string(), |d| d.to_string());
            println!("{d:>8} {:>8} {:>8} {:>14.6e}", b.count, b.nonzero, b.max_magnitude);
        }
    }
    Ok(())
}

fn cmd_gen(name: &str, seed: u64, out: &Path, n: Option<usize>) -> Result<()> {
    let ds = match name {
        "synthetic1" => gen_synthetic1(seed, &n.map_or_else(Synthetic1Options::default, Synthetic1Options::scaled))?,
        "cheaters" => gen_cheaters(seed, &CheatersOptions::default())?,
        other => return Err(Error::Config(vec![format!("unknown dataset `{other}`; known: synthetic1, cheaters")])),
    };
    export_dataset(&ds, out)?;
    println!("{} nodes, {} observed edges -> {}", ds.n(), ds.a_obs.support().num_edges(), out.display());
    Ok(())
}

/// Returns whether every check is within tolerance.
fn cmd_grad_check(instances: usize, seed: u64, step: f64) -> Result<bool> {
    let start = Instant::now();
    let mut ok = true;
    let mut line = |name: &str, err: f64| {
        let pass = err <= GRAD_CHECK_TOLERANCE;
        ok &= pass;
        println!("{:<20} {:>12.3e}  {}", name, err, if pass { "ok" } else { "FAIL" });
    };
    for r in primitive_suite(seed, instances, step)? {
        line(r.primitive.name(), r.max_rel_error);
    }
    for r in inner_model_suite(seed, instances, step)? {
        line(r.model, r.max_rel_error);
    }
    println!("{instances} instances each, tolerance {GRAD_CHECK_TOLERANCE:e}, {:.1}s", start.elapsed().as_secs_f64());
    Ok(ok)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Divergence { .. } => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    scarcegrad::parallel::init_thread_pool();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run { config, seed, out, tau_out, tau_in, no_report } => {
            cmd_run(&config, seed, out, tau_out, tau_in, no_report).map(|_| true)
        }
        Command::Profile { dir, iteration } => cmd_profile(&dir, iteration).map(|_| true),
        Command::Report { dir } => emit_reports(&dir).map(|files| {
            for f in files {
                println!("{}", f.display());
            }
            true
        }),
        Command::GenDataset { name, seed, out, n } => cmd_gen(&name, seed, &out, n).map(|_| true),
        Command::GradCheck { instances, seed, step } => cmd_grad_check(instances, seed, step),
        Command::Presets { name } => match name {
            None => {
                PRESETS.iter().for_each(|p| println!("{p}"));
                Ok(true)
            }
            Some(n) => ExperimentConfig::preset(&n).and_then(|c| c.to_toml_string()).map(|t| {
                print!("{t}");
                true
            }),
        },
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
