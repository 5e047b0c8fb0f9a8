//! Experiment runner CLI.
//!
//! Exit codes: 0 success, 1 runtime failure (partial metrics are flushed),
//! 2 invalid configuration or arguments. Set `FEDSOPHIA_LOG=info` for
//! per-round progress lines.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::Rng;

use fedsophia::error::Error;
use fedsophia::experiment::{
    run_sweep, write_resolved_config_json, write_summary_json, write_sweep_csv,
    write_trajectory_csv, ExperimentConfig, MetricsWriter,
};
use fedsophia::linalg::{DenseMatrix, ParamVector};
use fedsophia::models::BinaryLogistic;
use fedsophia::optimizers::{gnb_estimate, quadratic_demo, QuadraticMethod};
use fedsophia::seeding::{stream, Purpose};

#[derive(Parser)]
#[command(name = "fedsophia", version, about = "Federated learning simulation workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment from a TOML config file.
    Run {
        /// Experiment config path.
        #[arg(long)]
        config: PathBuf,
        /// Override the master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default: config's output_dir, else ".").
        #[arg(long)]
        out: Option<PathBuf>,
        /// Cap on parallel device workers (0 = one per core).
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Run a learning-rate / local-iteration grid over a base config.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Learning rates, comma separated (e.g. 0.01,0.003,0.0005).
        #[arg(long, value_delimiter = ',')]
        eta: Vec<f64>,
        /// Local iteration counts, comma separated (e.g. 1,5,10).
        #[arg(long = "local-iters", value_delimiter = ',')]
        local_iters: Vec<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Print and save iterates of gradient vs curvature-scaled descent on
    /// the two-parameter demonstration quadratic.
    QuadraticDemo {
        #[arg(long, value_enum)]
        method: QuadraticMethod,
        /// Step size (default 0.1 for gradient, 1.0 otherwise).
        #[arg(long)]
        eta: Option<f64>,
        #[arg(long, default_value_t = 100)]
        max_steps: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Monte-Carlo check of the curvature estimator against the exact
    /// Gauss-Newton diagonal on a tiny linear-softmax model.
    GnbCheck {
        #[arg(long, default_value_t = 10_000)]
        draws: usize,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Maximum tolerated per-coordinate relative error.
        #[arg(long, default_value_t = 0.05)]
        tolerance: f64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("FEDSOPHIA_LOG")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            seed,
            out,
            workers,
        } => cmd_run(&config, seed, out, workers),
        Command::Sweep {
            config,
            eta,
            local_iters,
            seed,
            out,
            workers,
        } => cmd_sweep(&config, &eta, &local_iters, seed, out, workers),
        Command::QuadraticDemo {
            method,
            eta,
            max_steps,
            out,
        } => cmd_quadratic_demo(method, eta, max_steps, out),
        Command::GnbCheck {
            draws,
            batch_size,
            seed,
            tolerance,
        } => cmd_gnb_check(draws, batch_size, seed, tolerance),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Format(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn load_and_resolve(
    config: &PathBuf,
    seed: Option<u64>,
    out: Option<PathBuf>,
    workers: Option<usize>,
) -> Result<(ExperimentConfig, PathBuf), Error> {
    let cfg = ExperimentConfig::load(config)?.resolved(seed, out, workers);
    cfg.validate()?;
    let out_dir = cfg
        .experiment
        .output_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&out_dir)?;
    Ok((cfg, out_dir))
}

fn cmd_run(
    config: &PathBuf,
    seed: Option<u64>,
    out: Option<PathBuf>,
    workers: Option<usize>,
) -> Result<ExitCode, Error> {
    let (cfg, out_dir) = load_and_resolve(config, seed, out, workers)?;
    write_resolved_config_json(&out_dir.join("resolved-config.json"), &cfg)?;

    let mut metrics = MetricsWriter::create(&out_dir.join("metrics.csv"))?;
    let outcome = fedsophia::run_experiment_with(&cfg, |record| metrics.write(record))?;
    write_summary_json(&out_dir.join("summary.json"), &cfg, &outcome)?;

    println!(
        "{}: {} rounds, final accuracy {:.4}, outputs in {}",
        cfg.experiment.algorithm,
        cfg.experiment.rounds,
        outcome.final_accuracy(),
        out_dir.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_sweep(
    config: &PathBuf,
    etas: &[f64],
    local_iters: &[usize],
    seed: Option<u64>,
    out: Option<PathBuf>,
    workers: Option<usize>,
) -> Result<ExitCode, Error> {
    if etas.is_empty() || local_iters.is_empty() {
        return Err(Error::Config(
            "sweep needs --eta and --local-iters value lists".into(),
        ));
    }
    let (cfg, out_dir) = load_and_resolve(config, seed, out, workers)?;
    write_resolved_config_json(&out_dir.join("resolved-config.json"), &cfg)?;
    let cells = run_sweep(&cfg, etas, local_iters)?;
    write_sweep_csv(&out_dir.join("sweep.csv"), &cells)?;

    println!("eta\tlocal_iters\tfinal_accuracy\tstatus");
    for cell in &cells {
        println!(
            "{}\t{}\t{}\t{}",
            cell.eta,
            cell.local_iters,
            cell.final_accuracy
                .map_or(String::from("-"), |a| format!("{a:.4}")),
            cell.status
        );
    }
    let failed = cells.iter().filter(|c| c.status != "ok").count();
    if failed > 0 {
        eprintln!("{failed} sweep cell(s) failed");
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_quadratic_demo(
    method: QuadraticMethod,
    eta: Option<f64>,
    max_steps: usize,
    out: Option<PathBuf>,
) -> Result<ExitCode, Error> {
    let eta = eta.unwrap_or(match method {
        QuadraticMethod::Gradient => 0.1,
        _ => 1.0,
    });
    if !(eta > 0.0) {
        return Err(Error::Config("eta must be > 0".into()));
    }
    let trajectory = quadratic_demo([1.0, 1.0], method, eta, max_steps);

    println!("step\ttheta1\ttheta2\tf");
    for p in &trajectory {
        println!("{}\t{:.6}\t{:.6}\t{:.6e}", p.step, p.theta[0], p.theta[1], p.value);
    }

    let out_dir = out.unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&out_dir)?;
    write_trajectory_csv(&out_dir.join("trajectory.csv"), &trajectory)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_gnb_check(
    draws: usize,
    batch_size: usize,
    seed: u64,
    tolerance: f64,
) -> Result<ExitCode, Error> {
    if draws == 0 || batch_size == 0 {
        return Err(Error::Config("draws and batch-size must be >= 1".into()));
    }
    let model = BinaryLogistic::new(2)?;
    let theta = ParamVector::from_vec(vec![0.5, -0.3, 0.1]);

    let mut data_rng = stream(seed, Purpose::DataGen, 0);
    let rows: Vec<Vec<f64>> = (0..batch_size)
        .map(|_| (0..2).map(|_| data_rng.gen_range(-1.5..1.5)).collect())
        .collect();
    let features = DenseMatrix::from_rows(&rows)?;
    let batch = fedsophia::models::Batch::new(features.clone(), vec![0; batch_size])?;

    let exact = model.gauss_newton_diagonal(&theta, &features)?;
    let mut rng = stream(seed, Purpose::DeviceGnb, 0);
    let mut mean = ParamVector::zeros(3);
    for _ in 0..draws {
        let est = gnb_estimate(&model, &theta, &batch, &mut rng)?;
        mean = mean.add(&est)?;
    }
    mean = mean.scale(1.0 / draws as f64);

    println!("coordinate\tmonte_carlo\texact_gauss_newton\trel_error");
    let mut worst = 0.0f64;
    for j in 0..3 {
        let rel = (mean[j] - exact[j]).abs() / exact[j].abs().max(1e-300);
        worst = worst.max(rel);
        println!("{j}\t{:.6e}\t{:.6e}\t{:.4}", mean[j], exact[j], rel);
    }
    println!("max relative error {worst:.4} over {draws} draws (tolerance {tolerance})");
    if worst <= tolerance {
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::from(1))
    }
}
