use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dpvger::checkpoint::Checkpoint;
use dpvger::harness::{self, ExperimentConfig};
use dpvger::nn::RngState;
use dpvger::privacy::{calibrate_sigma, default_orders, epsilon_for};
use dpvger::Error;

/// Differentially private variational generative replay experiments.
#[derive(Parser)]
#[command(name = "dpvger", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one continual-learning experiment and write its artifacts.
    Run {
        /// Flat `key = value` config file; defaults are used for missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config's `method`.
        #[arg(long)]
        method: Option<String>,
        /// Overrides the config's `seed`.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print ε for a subsampled Gaussian mechanism, or calibrate σ for a target ε.
    Accountant {
        #[arg(long)]
        q: f64,
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        steps: u64,
        #[arg(long)]
        delta: f64,
        #[arg(long = "target-eps", conflicts_with = "sigma")]
        target_eps: Option<f64>,
    },
    /// Write images generated by a GAN checkpoint as PGM files.
    Sample {
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a checkpoint's header.
    Inspect { checkpoint: PathBuf },
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Lib(Error::Idx { .. } | Error::Io { .. }) => 2,
            Failure::Lib(Error::InfeasibleBudget { .. }) => 3,
            Failure::Lib(Error::Config(_) | Error::InvalidArgument(_)) => 1,
            Failure::Lib(_) => 2,
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Usage(m) => m.clone(),
            Failure::Lib(e) => e.to_string(),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.exit_code())
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Run {
            config,
            method,
            seed,
            out,
        } => run(config.as_deref(), method, seed, &out),
        Command::Accountant {
            q,
            sigma,
            steps,
            delta,
            target_eps,
        } => accountant(q, sigma, steps, delta, target_eps),
        Command::Sample {
            checkpoint,
            n,
            seed,
            out,
        } => sample(&checkpoint, n, seed, &out),
        Command::Inspect { checkpoint } => {
            println!("{}", Checkpoint::load(&checkpoint)?);
            Ok(())
        }
    }
}

fn run(config: Option<&Path>, method: Option<String>, seed: Option<u64>, out: &Path) -> Result<(), Failure> {
    let text = match config {
        Some(p) => fs::read_to_string(p).map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", p.display())))?,
        None => String::new(),
    };
    let mut overrides = Vec::new();
    if let Some(m) = method {
        overrides.push(("method", m));
    }
    if let Some(s) = seed {
        overrides.push(("seed", s.to_string()));
    }
    let cfg = ExperimentConfig::parse_with_overrides(&text, &overrides)?;
    let output = harness::run(&cfg, Some(out))?;
    for line in &output.log {
        eprintln!("{line}");
    }
    println!("method = {}", cfg.method.label());
    println!("seed = {}", cfg.seed);
    for i in 0..output.matrix.num_tasks() {
        println!("after task {i}: mean accuracy {:.4}", output.matrix.row_mean(i).unwrap_or(0.0));
    }
    if let Some(eps) = output.report.max_epsilon() {
        println!("max per-class epsilon = {eps:.4}");
    }
    println!("artifacts in {}", out.display());
    Ok(())
}

fn accountant(q: f64, sigma: Option<f64>, steps: u64, delta: f64, target: Option<f64>) -> Result<(), Failure> {
    match (sigma, target) {
        (Some(s), None) => {
            let (eps, order) = epsilon_for(q, s, steps, delta, &default_orders())?;
            println!("epsilon = {eps}");
            println!("argmin_alpha = {order}");
        }
        (None, Some(t)) => {
            let s = calibrate_sigma(t, delta, q, steps)?;
            let (eps, _) = epsilon_for(q, s, steps, delta, &default_orders())?;
            println!("sigma = {s}");
            println!("epsilon = {eps}");
        }
        _ => return Err(Failure::Usage("give exactly one of --sigma or --target-eps".into())),
    }
    Ok(())
}

fn sample(path: &Path, n: usize, seed: u64, out: &Path) -> Result<(), Failure> {
    let Checkpoint::Gan(pair) = Checkpoint::load(path)? else {
        return Err(Failure::Usage(format!("{} is not a GAN checkpoint", path.display())));
    };
    let width = pair.generator.output_width();
    let side = (width as f64).sqrt().round() as usize;
    if side * side != width {
        return Err(Failure::Usage(format!("generator output {width} is not a square image")));
    }
    fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    let images = pair.generate(n, &mut RngState::new(seed))?;
    for (i, row) in images.iter_rows().enumerate() {
        let path = out.join(format!("class{}_{i:04}.pgm", pair.class_label));
        let mut bytes = format!("P5\n{side} {side}\n255\n").into_bytes();
        bytes.extend(row.iter().map(|v| (v * 255.0).round() as u8));
        fs::File::create(&path)
            .and_then(|mut f| f.write_all(&bytes))
            .map_err(|e| Error::Io { path, source: e })?;
    }
    println!("wrote {n} images to {}", out.display());
    Ok(())
}
