use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use factorized_fl::config::{load_config, ExperimentConfig};
use factorized_fl::engine::{cost_formula, steady_payload, Inventory, Strategy};
use factorized_fl::factorized::param_count;
use factorized_fl::nn::presets;
use factorized_fl::runner;

#[derive(Parser)]
#[command(name = "ffl", version, about = "Federated-learning simulator with factorized kernels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides `global_seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides `output_dir` and OUTPUT_DIR).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for client training.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment.
    Run(Common),
    /// Run the scenario x strategy grid from the `[suite]` section.
    Suite(Common),
    /// Update divergence between paired trainings.
    ProbeDivergence(Common),
    /// u/v divergence of a factorized network.
    ProbeUv(Common),
    /// Check a config and print its normalized form.
    Validate {
        #[arg(long)]
        config: PathBuf,
        /// Also write `config.normalized.toml` here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Communication cost of a ResNet-9 run.
    Cost {
        #[arg(long, default_value = "factorized_fl")]
        strategy: String,
        #[arg(long, default_value_t = 20)]
        clients: u64,
        #[arg(long, default_value_t = 50)]
        rounds: u64,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        /// Keep the classifier local (FedAvg/FedProx).
        #[arg(long)]
        local_classifier: bool,
    },
}

struct Loaded {
    cfg: ExperimentConfig,
    out: PathBuf,
}

fn load(c: &Common) -> Result<Loaded> {
    let mut cfg = load_config(&c.config).with_context(|| format!("invalid config {}", c.config.display()))?;
    if let Some(seed) = c.seed {
        cfg.global_seed = seed;
    }
    let out = c
        .out
        .clone()
        .or_else(|| std::env::var_os("OUTPUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
    cfg.output_dir = out.display().to_string();
    if let Some(n) = c.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    Ok(Loaded { cfg, out })
}

fn run(c: &Common) -> Result<()> {
    let Loaded { cfg, out } = load(c)?;
    let start = Instant::now();
    let o = runner::run_experiment(&cfg, &out)?;
    eprintln!(
        "{} / {}: final test acc {:.4}, best-val test acc {:.4}, {} bytes, {:.1}s -> {}",
        cfg.scenario.name(),
        cfg.strategy.strategy.name(),
        o.final_test_accuracy(),
        o.best_val_test_accuracy(),
        o.ledger.cumulative_bytes,
        start.elapsed().as_secs_f64(),
        out.display()
    );
    if let Some(s) = o.sparsity() {
        eprintln!("nonzero mu entries: {} of {}", s.nonzero_count, s.total_count);
    }
    Ok(())
}

fn suite(c: &Common) -> Result<bool> {
    let Loaded { cfg, out } = load(c)?;
    let report = runner::run_suite(&cfg, &out)?;
    print!("{}", report.summary_csv());
    for cell in report.cells.iter().filter(|c| c.error.is_some()) {
        eprintln!(
            "cell {}/{} failed: {}",
            cell.scenario.name(),
            cell.strategy.name(),
            cell.error.as_deref().unwrap_or_default()
        );
    }
    Ok(report.failures() == 0)
}

fn probe(c: &Common, uv: bool) -> Result<()> {
    let Loaded { cfg, out } = load(c)?;
    if uv {
        for (u, v) in runner::run_uv_probe(&cfg, cfg.global_seed, Some(&out))? {
            println!(
                "{}: final u {:.4}, final v {:.4}",
                u.label_b,
                u.last().unwrap_or(0.0),
                v.last().unwrap_or(0.0)
            );
        }
    } else {
        for t in runner::run_divergence_probe(&cfg, cfg.global_seed, Some(&out))? {
            println!("{}: final {:.4}", t.label_b, t.last().unwrap_or(0.0));
        }
    }
    Ok(())
}

fn validate(config: &Path, out: Option<&Path>) -> Result<()> {
    let cfg = load_config(config).with_context(|| format!("invalid config {}", config.display()))?;
    let text = cfg.to_toml();
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.normalized.toml"), &text)?;
    }
    print!("{text}");
    Ok(())
}

fn cost(strategy: &str, clients: u64, rounds: u64, classes: usize, local_classifier: bool) -> Result<()> {
    let Some(s) = Strategy::parse(strategy) else {
        bail!("unknown strategy {strategy:?}");
    };
    let layers = presets::resnet9(classes);
    let inv = Inventory::of(&layers);
    let p = steady_payload(&inv, s, !local_classifier);
    let bytes = cost_formula(p.s2c, p.c2s, clients, rounds);
    let fedavg = cost_formula(inv.plain, inv.plain, clients, rounds);
    println!("strategy,clients,rounds,p_s2c,p_c2s,bytes,gb,ratio_to_fedavg");
    println!(
        "{},{clients},{rounds},{},{},{bytes},{:.4},{:.6}",
        s.name(),
        p.s2c,
        p.c2s,
        bytes as f64 / 1e9,
        bytes as f64 / fedavg as f64
    );
    eprintln!(
        "resnet9 parameters: plain {}, factorized {}",
        param_count(&layers, false),
        param_count(&layers, true)
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(c) => run(c).map(|_| true),
        Command::Suite(c) => suite(c),
        Command::ProbeDivergence(c) => probe(c, false).map(|_| true),
        Command::ProbeUv(c) => probe(c, true).map(|_| true),
        Command::Validate { config, out } => validate(config, out.as_deref()).map(|_| true),
        Command::Cost {
            strategy,
            clients,
            rounds,
            classes,
            local_classifier,
        } => cost(strategy, *clients, *rounds, *classes, *local_classifier).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
