//! Command-line experiment runner.
//!
//! One invocation runs a single `(protocol, n, duration, seed)` experiment
//! or a seed sweep and emits the report as CSV (stdout or `--out`), with an
//! optional JSON dump carrying the raw latency samples.

use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::Parser;

use becp_sim::harness::{self, ProtocolKind, SimConfig};

#[derive(Parser, Debug)]
#[command(
    name = "becp-sim",
    about = "Deterministic consensus-protocol simulator (BECP, Avalanche, Paxos, Raft, PBFT)",
    after_help = "Config file: flat key=value lines (same keys as the flags); \
                  CLI flags override file values."
)]
struct Cli {
    /// Protocol to simulate: becp, avalanche, paxos, raft or pbft.
    #[arg(long)]
    protocol: Option<String>,

    /// Number of nodes [default: 500].
    #[arg(long)]
    nodes: Option<u32>,

    /// Simulated duration in seconds [default: 600].
    #[arg(long)]
    duration: Option<f64>,

    /// Run seed [default: 1].
    #[arg(long)]
    seed: Option<u64>,

    /// Inclusive seed range for a sweep, e.g. `1..5` or `1-5`; overrides
    /// --seed.
    #[arg(long)]
    seeds: Option<String>,

    /// Write the CSV report here instead of stdout.
    #[arg(long)]
    out: Option<std::path::PathBuf>,

    /// Also write a JSON report (summary plus raw latency samples).
    #[arg(long)]
    json: Option<std::path::PathBuf>,

    /// Flat key=value config file applied before the flags.
    #[arg(long)]
    config: Option<std::path::PathBuf>,

    /// Gossip cycle time in seconds.
    #[arg(long)]
    cycle: Option<f64>,

    /// Initial activation stagger D1 in seconds.
    #[arg(long)]
    d1: Option<f64>,

    /// Block generation interval T_block in seconds.
    #[arg(long)]
    t_block: Option<f64>,

    /// Block generation probability P_block.
    #[arg(long)]
    p_block: Option<f64>,

    /// Estimation error threshold epsilon_1.
    #[arg(long)]
    epsilon1: Option<f64>,

    /// Consecutive stable cycles threshold psi.
    #[arg(long)]
    psi: Option<u32>,

    /// Peer cache capacity N_cache.
    #[arg(long)]
    n_cache: Option<usize>,

    /// Avalanche sample size K.
    #[arg(long)]
    k: Option<usize>,

    /// Avalanche quorum fraction alpha.
    #[arg(long)]
    alpha: Option<f64>,

    /// Avalanche safe early commitment threshold beta_1.
    #[arg(long)]
    beta1: Option<u32>,

    /// Avalanche consecutive counter threshold beta_2.
    #[arg(long)]
    beta2: Option<u32>,

    /// Raft election timeout lower bound in seconds.
    #[arg(long)]
    timeout_min: Option<f64>,

    /// Raft election timeout upper bound in seconds.
    #[arg(long)]
    timeout_max: Option<f64>,

    /// Network latency lower bound in seconds (inclusive).
    #[arg(long)]
    latency_min: Option<f64>,

    /// Network latency upper bound in seconds (exclusive).
    #[arg(long)]
    latency_max: Option<f64>,

    /// Run the BECP aggregation-mass monitor during the simulation.
    #[arg(long, default_value_t = false)]
    verify_invariants: bool,
}

fn parse_seed_range(text: &str) -> Result<Vec<u64>> {
    let normalized = text.replace("..", "-");
    let (lo, hi) = normalized
        .split_once('-')
        .with_context(|| format!("--seeds expects a range like 1..5, got {text:?}"))?;
    let lo: u64 = lo.trim().parse().context("seed range start")?;
    let hi: u64 = hi.trim().parse().context("seed range end")?;
    anyhow::ensure!(lo <= hi, "empty seed range {text:?}");
    Ok((lo..=hi).collect())
}

fn build_config(cli: &Cli) -> Result<SimConfig> {
    let mut cfg = SimConfig::new(ProtocolKind::Becp, 500, 600.0, 1);
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?;
        cfg.apply_file(&text)?;
    }
    // Flags override the file.
    if let Some(p) = &cli.protocol {
        cfg.protocol = p.parse()?;
    } else if cli.config.is_none() {
        anyhow::bail!("--protocol is required (or provide it via --config)");
    }
    macro_rules! set_if {
        ($flag:expr, $field:ident) => {
            if let Some(v) = $flag {
                cfg.$field = v;
            }
        };
    }
    set_if!(cli.nodes, n);
    set_if!(cli.duration, duration_s);
    set_if!(cli.seed, seed);
    set_if!(cli.cycle, cycle_s);
    set_if!(cli.d1, d1_s);
    set_if!(cli.t_block, t_block_s);
    set_if!(cli.p_block, p_block);
    set_if!(cli.epsilon1, epsilon1);
    set_if!(cli.psi, psi);
    set_if!(cli.n_cache, n_cache);
    set_if!(cli.k, k);
    set_if!(cli.alpha, alpha);
    set_if!(cli.beta1, beta1);
    set_if!(cli.beta2, beta2);
    set_if!(cli.timeout_min, timeout_min_s);
    set_if!(cli.timeout_max, timeout_max_s);
    set_if!(cli.latency_min, latency_min_s);
    set_if!(cli.latency_max, latency_max_s);
    cfg.verify_invariants = cli.verify_invariants;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = build_config(cli)?;
    for warning in cfg.validate()? {
        eprintln!("warning: {warning}");
    }
    let reports = match &cli.seeds {
        Some(range) => harness::run_sweep(&cfg, &parse_seed_range(range)?)?,
        None => vec![harness::run_experiment(&cfg)?],
    };
    for report in &reports {
        if !report.invariant_violations.is_empty() {
            eprintln!(
                "warning: seed {}: {} invariant violations, first: {}",
                report.seed,
                report.invariant_violations.len(),
                report.invariant_violations[0]
            );
        }
    }
    let csv = harness::emit_csv(&reports);
    match &cli.out {
        Some(path) => std::fs::write(path, &csv)
            .with_context(|| format!("writing {}", path.display()))?,
        None => print!("{csv}"),
    }
    if let Some(path) = &cli.json {
        let json = if reports.len() == 1 {
            harness::emit_json(&reports[0])
        } else {
            serde_json::to_string_pretty(&reports).expect("reports serialize")
        };
        std::fs::write(path, json).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
