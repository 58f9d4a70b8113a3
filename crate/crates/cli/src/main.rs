use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use daf_core::config::ExperimentConfig;
use daf_core::experiment::{fuse_checkpoints, run_experiment, write_fused};
use daf_core::verify::{run_suite, VerifyOptions};
use daf_core::{checkpoint, report, Error};

const OUTPUT_ROOT_ENV: &str = "DAF_OUTPUT_ROOT";

/// Continual-learning experiments with fused task adapters.
#[derive(Debug, Parser)]
#[command(name = "daf", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run every strategy in a config and write reports and checkpoints.
    Run {
        config: PathBuf,
        /// Override the global seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; defaults to the config's `output.dir`, then
        /// `$DAF_OUTPUT_ROOT/<config stem>`.
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[arg(long, env = OUTPUT_ROOT_ENV, default_value = "runs", hide_env_values = true)]
        output_root: PathBuf,
    },
    /// Run the property and oracle suite.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true, value_parser = parse_range)]
        inject_clip_range: Option<(f64, f64)>,
    },
    /// Fuse adapter checkpoints without retraining.
    FuseOffline {
        #[arg(long)]
        theta_p: PathBuf,
        #[arg(long)]
        theta_prev: PathBuf,
        #[arg(long)]
        theta_t: PathBuf,
        #[arg(long)]
        stats: PathBuf,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long, default_value = "fused.ckpt")]
        out: PathBuf,
    },
    /// Summarise the runs in a directory.
    Report {
        dir: PathBuf,
        /// Also write the comparison table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn parse_range(s: &str) -> Result<(f64, f64), String> {
    let (lo, hi) = s.split_once(',').ok_or("expected LO,HI")?;
    let p = |v: &str| v.trim().parse::<f64>().map_err(|e| e.to_string());
    Ok((p(lo)?, p(hi)?))
}

/// 0 ok, 1 verification failure, 2 usage or input error, 3 numeric failure.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Verification(_) => 1,
        Error::Numeric { .. } | Error::Evaluation(_) => 3,
        _ => 2,
    }
}

fn output_dir(config: &Path, cfg: &ExperimentConfig, flag: Option<PathBuf>, root: &Path) -> PathBuf {
    if let Some(dir) = flag {
        return dir;
    }
    if let Some(dir) = &cfg.output.dir {
        return config.parent().unwrap_or(Path::new(".")).join(dir);
    }
    let stem = config.file_stem().map(|s| s.to_os_string()).unwrap_or_else(|| "experiment".into());
    root.join(stem)
}

fn verify(opts: &VerifyOptions) -> Result<(), Error> {
    let report = run_suite(opts);
    print!("{}", report.render());
    if report.passed() {
        return Ok(());
    }
    let failed: Vec<String> = report
        .failures()
        .map(|c| format!("{} (residual {:.3e} > {:.1e})", c.name, c.residual, c.tolerance))
        .collect();
    Err(Error::Verification(failed.join(", ")))
}

fn run(config: &Path, seed: Option<u64>, flag: Option<PathBuf>, root: &Path) -> Result<(), Error> {
    let text = std::fs::read_to_string(config)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", config.display())))?;
    let mut cfg = ExperimentConfig::parse(&text).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", config.display())),
        other => other,
    })?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if cfg.verify.enabled {
        verify(&VerifyOptions {
            seed: cfg.verify.seed,
            clip_override: None,
        })?;
    }
    let dir = output_dir(config, &cfg, flag, root);
    for a in run_experiment(&cfg, &dir)? {
        let stability = a.metrics.stability.map(|s| format!("{s:.4}")).unwrap_or_else(|| "-".into());
        println!(
            "{}: avg_acc {:.4}  final_acc {:.4}  stability {stability}  plasticity {:.4}",
            a.name, a.metrics.avg_acc, a.metrics.final_acc, a.metrics.plasticity
        );
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            seed,
            output_dir,
            output_root,
        } => run(&config, seed, output_dir, &output_root),
        Command::Verify {
            seed,
            inject_clip_range,
        } => verify(&VerifyOptions {
            seed,
            clip_override: inject_clip_range,
        }),
        Command::FuseOffline {
            theta_p,
            theta_prev,
            theta_t,
            stats,
            alpha,
            gamma,
            out,
        } => (|| {
            let load = |p: &PathBuf| checkpoint::load(p);
            let fused = fuse_checkpoints(
                &load(&theta_p)?,
                &load(&theta_prev)?,
                &load(&theta_t)?,
                &load(&stats)?,
                alpha,
                gamma,
            )?;
            let beta = write_fused(&out, &fused)?;
            let b = &fused.beta;
            println!(
                "beta min {:.6} mean {:.6} max {:.6} clipped {}/{} of {}",
                b.min, b.mean, b.max, b.clipped_low, b.clipped_high, b.count
            );
            println!("{}", out.display());
            println!("{}", beta.display());
            Ok(())
        })(),
        Command::Report { dir, csv } => (|| {
            let rows = report::summarize(&report::load_runs(&dir)?)?;
            print!("{}", report::render_table(&rows));
            if let Some(path) = csv {
                checkpoint::write_atomic(&path, report::comparison_csv(&rows).as_bytes())?;
            }
            Ok(())
        })(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
