//! Experiment harness: configuration, metric collection, seed sweeps and
//! report emission.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{AvalancheParams, AvalancheSim, PaxosParams, PaxosSim, PbftParams, PbftSim, RaftParams, RaftSim};
use crate::becp::{BecpParams, BecpSim};
use crate::block::BlockRef;
use crate::engine::{Confirmation, Engine, LatencyModel, RunStats};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProtocolKind {
    Becp,
    Avalanche,
    Paxos,
    Raft,
    Pbft,
}

impl ProtocolKind {
    pub const ALL: [ProtocolKind; 5] = [
        ProtocolKind::Becp,
        ProtocolKind::Avalanche,
        ProtocolKind::Paxos,
        ProtocolKind::Raft,
        ProtocolKind::Pbft,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ProtocolKind::Becp => "becp",
            ProtocolKind::Avalanche => "avalanche",
            ProtocolKind::Paxos => "paxos",
            ProtocolKind::Raft => "raft",
            ProtocolKind::Pbft => "pbft",
        }
    }
}

impl fmt::Display for ProtocolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ProtocolKind {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, ConfigError> {
        match s.to_ascii_lowercase().as_str() {
            "becp" => Ok(ProtocolKind::Becp),
            "avalanche" => Ok(ProtocolKind::Avalanche),
            "paxos" => Ok(ProtocolKind::Paxos),
            "raft" => Ok(ProtocolKind::Raft),
            "pbft" => Ok(ProtocolKind::Pbft),
            other => Err(ConfigError::UnknownProtocol(other.to_string())),
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown protocol {0:?} (expected becp, avalanche, paxos, raft or pbft)")]
    UnknownProtocol(String),
    #[error("invalid {field}: {reason}")]
    InvalidValue { field: &'static str, reason: String },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("line {line}: expected key=value")]
    Malformed { line: usize },
    #[error("cannot parse value for {key}: {value:?}")]
    BadValue { key: String, value: String },
}

/// One experiment: protocol, scale, duration, seed, and every protocol
/// parameter with its standard default.
#[derive(Debug, Clone, Serialize)]
pub struct SimConfig {
    pub protocol: ProtocolKind,
    pub n: u32,
    pub duration_s: f64,
    pub seed: u64,
    pub cycle_s: f64,
    pub d1_s: f64,
    pub t_block_s: f64,
    pub p_block: f64,
    pub epsilon1: f64,
    pub psi: u32,
    pub n_cache: usize,
    pub k: usize,
    pub alpha: f64,
    pub beta1: u32,
    pub beta2: u32,
    pub timeout_min_s: f64,
    pub timeout_max_s: f64,
    pub latency_min_s: f64,
    pub latency_max_s: f64,
    /// Run the aggregation-mass monitor (BECP only; slows the run).
    #[serde(skip)]
    pub verify_invariants: bool,
}

impl SimConfig {
    pub fn new(protocol: ProtocolKind, n: u32, duration_s: f64, seed: u64) -> Self {
        SimConfig {
            protocol,
            n,
            duration_s,
            seed,
            cycle_s: 0.7,
            d1_s: 0.1,
            t_block_s: 10.0,
            p_block: 0.05,
            epsilon1: 0.01,
            psi: 3,
            n_cache: 50,
            k: 10,
            alpha: 0.8,
            beta1: 50,
            beta2: 150,
            timeout_min_s: 1.0,
            timeout_max_s: 1.2,
            latency_min_s: 0.01,
            latency_max_s: 0.3,
            verify_invariants: false,
        }
    }

    /// Reject invalid parameters; return one warning per parameter that
    /// the chosen protocol ignores but was changed from its default.
    pub fn validate(&self) -> Result<Vec<String>, ConfigError> {
        fn positive(field: &'static str, v: f64) -> Result<(), ConfigError> {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(ConfigError::InvalidValue {
                    field,
                    reason: format!("{v} must be positive"),
                })
            }
        }
        if self.n == 0 {
            return Err(ConfigError::InvalidValue {
                field: "n",
                reason: "need at least one node".into(),
            });
        }
        if self.duration_s < 0.0 || !self.duration_s.is_finite() {
            return Err(ConfigError::InvalidValue {
                field: "duration_s",
                reason: format!("{} must be nonnegative", self.duration_s),
            });
        }
        positive("cycle_s", self.cycle_s)?;
        positive("t_block_s", self.t_block_s)?;
        if !(0.0..=1.0).contains(&self.p_block) {
            return Err(ConfigError::InvalidValue {
                field: "p_block",
                reason: format!("{} must be a probability", self.p_block),
            });
        }
        positive("epsilon1", self.epsilon1)?;
        if self.psi == 0 {
            return Err(ConfigError::InvalidValue {
                field: "psi",
                reason: "must be at least 1".into(),
            });
        }
        if self.protocol == ProtocolKind::Becp && self.n_cache == 0 && self.n > 1 {
            return Err(ConfigError::InvalidValue {
                field: "n_cache",
                reason: "a cache capacity of 0 isolates every node".into(),
            });
        }
        if self.k == 0 {
            return Err(ConfigError::InvalidValue {
                field: "k",
                reason: "sample size must be at least 1".into(),
            });
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(ConfigError::InvalidValue {
                field: "alpha",
                reason: format!("{} must be a fraction", self.alpha),
            });
        }
        if self.beta1 == 0 || self.beta2 < self.beta1 {
            return Err(ConfigError::InvalidValue {
                field: "beta2",
                reason: "need 0 < beta1 <= beta2".into(),
            });
        }
        if !(self.timeout_min_s > 0.0 && self.timeout_max_s > self.timeout_min_s) {
            return Err(ConfigError::InvalidValue {
                field: "timeout_range",
                reason: format!("[{}, {}] is not a range", self.timeout_min_s, self.timeout_max_s),
            });
        }
        if !(self.latency_min_s >= 0.0 && self.latency_max_s > self.latency_min_s) {
            return Err(ConfigError::InvalidValue {
                field: "latency_range",
                reason: format!("[{}, {}) is not a range", self.latency_min_s, self.latency_max_s),
            });
        }
        if self.d1_s < 0.0 {
            return Err(ConfigError::InvalidValue {
                field: "d1_s",
                reason: "must be nonnegative".into(),
            });
        }

        let defaults = SimConfig::new(self.protocol, self.n, self.duration_s, self.seed);
        let mut warnings = Vec::new();
        let mut warn = |used: bool, field: &str, differs: bool| {
            if !used && differs {
                warnings.push(format!(
                    "{} ignores {field}; the value has no effect",
                    self.protocol
                ));
            }
        };
        use ProtocolKind::*;
        let p = self.protocol;
        warn(
            matches!(p, Becp | Avalanche | Raft),
            "cycle_s",
            self.cycle_s != defaults.cycle_s,
        );
        warn(
            matches!(p, Becp | Avalanche),
            "d1_s",
            self.d1_s != defaults.d1_s,
        );
        warn(
            matches!(p, Becp | Avalanche),
            "p_block",
            self.p_block != defaults.p_block,
        );
        warn(matches!(p, Becp), "epsilon1", self.epsilon1 != defaults.epsilon1);
        warn(matches!(p, Becp), "psi", self.psi != defaults.psi);
        warn(matches!(p, Becp), "n_cache", self.n_cache != defaults.n_cache);
        warn(matches!(p, Avalanche), "k", self.k != defaults.k);
        warn(matches!(p, Avalanche), "alpha", self.alpha != defaults.alpha);
        warn(matches!(p, Avalanche), "beta1", self.beta1 != defaults.beta1);
        warn(matches!(p, Avalanche), "beta2", self.beta2 != defaults.beta2);
        warn(
            matches!(p, Raft),
            "timeout range",
            self.timeout_min_s != defaults.timeout_min_s
                || self.timeout_max_s != defaults.timeout_max_s,
        );
        Ok(warnings)
    }

    /// Apply one `key=value` assignment (config file or CLI override).
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
            value.parse().map_err(|_| ConfigError::BadValue {
                key: key.to_string(),
                value: value.to_string(),
            })
        }
        match key {
            "protocol" => self.protocol = value.parse()?,
            "n" | "nodes" => self.n = parse(key, value)?,
            "duration_s" | "duration" => self.duration_s = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "cycle_s" => self.cycle_s = parse(key, value)?,
            "d1_s" => self.d1_s = parse(key, value)?,
            "t_block_s" => self.t_block_s = parse(key, value)?,
            "p_block" => self.p_block = parse(key, value)?,
            "epsilon1" => self.epsilon1 = parse(key, value)?,
            "psi" => self.psi = parse(key, value)?,
            "n_cache" => self.n_cache = parse(key, value)?,
            "k" => self.k = parse(key, value)?,
            "alpha" => self.alpha = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "timeout_min_s" => self.timeout_min_s = parse(key, value)?,
            "timeout_max_s" => self.timeout_max_s = parse(key, value)?,
            "latency_min_s" => self.latency_min_s = parse(key, value)?,
            "latency_max_s" => self.latency_max_s = parse(key, value)?,
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Parse a flat `key = value` config file (`#` comments allowed) on
    /// top of this configuration.
    pub fn apply_file(&mut self, text: &str) -> Result<(), ConfigError> {
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or(ConfigError::Malformed { line: idx + 1 })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    fn becp_params(&self) -> BecpParams {
        BecpParams {
            cycle_s: self.cycle_s,
            d1_s: self.d1_s,
            t_block_s: self.t_block_s,
            p_block: self.p_block,
            epsilon1: self.epsilon1,
            psi: self.psi,
            n_cache: self.n_cache,
        }
    }

    fn latency(&self) -> LatencyModel {
        LatencyModel::new(self.latency_min_s, self.latency_max_s)
    }
}

/// Everything measured in one run. The serialized form carries the summary
/// fields plus the raw latency samples and per-node chain digests; the raw
/// confirmation records stay in memory for invariant checking.
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentReport {
    pub protocol: ProtocolKind,
    pub n: u32,
    pub seed: u64,
    pub duration_s: f64,
    pub confirmed_items: u64,
    pub messages_sent: u64,
    pub avg_latency_s: f64,
    pub latency_samples: Vec<f64>,
    pub chain_digests: Vec<String>,
    #[serde(skip)]
    pub confirmations: Vec<Confirmation>,
    #[serde(skip)]
    pub invariant_violations: Vec<String>,
    #[serde(skip)]
    pub invariant_checks: u64,
}

/// Number of blocks confirmed network-wide: a block counts once when first
/// confirmed anywhere.
pub fn throughput(report: &ExperimentReport) -> u64 {
    report.confirmed_items
}

/// Total number of messages sent by nodes during the run.
pub fn overhead(report: &ExperimentReport) -> u64 {
    report.messages_sent
}

/// Mean over all `(node, block)` commit events of commit time minus the
/// block's creation time.
pub fn avg_latency(report: &ExperimentReport) -> f64 {
    report.avg_latency_s
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf29ce484222325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// The confirmed chain of one node, in height order.
pub fn node_chain(report: &ExperimentReport, node: u32) -> Vec<Confirmation> {
    let mut chain: Vec<Confirmation> = report
        .confirmations
        .iter()
        .filter(|c| c.node == node)
        .copied()
        .collect();
    chain.sort_by_key(|c| c.block);
    chain
}

fn build_report(
    cfg: &SimConfig,
    stats: RunStats,
    violations: Vec<String>,
    checks: u64,
) -> ExperimentReport {
    let mut distinct: std::collections::BTreeSet<BlockRef> = std::collections::BTreeSet::new();
    let mut latency_samples = Vec::with_capacity(stats.confirmations.len());
    for c in &stats.confirmations {
        distinct.insert(c.block);
        latency_samples.push(c.confirmed_at - c.created_at);
    }
    let avg = if latency_samples.is_empty() {
        0.0
    } else {
        latency_samples.iter().sum::<f64>() / latency_samples.len() as f64
    };
    let mut digests = Vec::with_capacity(cfg.n as usize);
    let mut per_node: Vec<Vec<BlockRef>> = vec![Vec::new(); cfg.n as usize];
    for c in &stats.confirmations {
        per_node[c.node as usize].push(c.block);
    }
    for refs in &mut per_node {
        refs.sort_unstable();
        let mut bytes = Vec::with_capacity(refs.len() * 12);
        for r in refs.iter() {
            bytes.extend_from_slice(&r.id.to_le_bytes());
            bytes.extend_from_slice(&r.o.to_le_bytes());
        }
        digests.push(format!("{:016x}", fnv1a(&bytes)));
    }
    ExperimentReport {
        protocol: cfg.protocol,
        n: cfg.n,
        seed: cfg.seed,
        duration_s: cfg.duration_s,
        confirmed_items: distinct.len() as u64,
        messages_sent: stats.messages_sent,
        avg_latency_s: avg,
        latency_samples,
        chain_digests: digests,
        confirmations: stats.confirmations,
        invariant_violations: violations,
        invariant_checks: checks,
    }
}

/// One full deterministic run.
pub fn run_experiment(cfg: &SimConfig) -> Result<ExperimentReport, ConfigError> {
    cfg.validate()?;
    if cfg.duration_s <= 0.0 {
        return Ok(build_report(
            cfg,
            RunStats {
                messages_sent: 0,
                messages_delivered: 0,
                dropped_at_end: 0,
                confirmations: Vec::new(),
                end_time: 0.0,
            },
            Vec::new(),
            0,
        ));
    }
    let latency = cfg.latency();
    let report = match cfg.protocol {
        ProtocolKind::Becp => {
            let mut sim = BecpSim::new(cfg.n, cfg.becp_params(), cfg.verify_invariants);
            let engine = Engine::new(cfg.n, cfg.seed, cfg.duration_s, latency);
            let stats = engine.run(&mut sim);
            let violations = std::mem::take(&mut sim.monitor.violations);
            let checks = sim.monitor.checks_run;
            build_report(cfg, stats, violations, checks)
        }
        ProtocolKind::Avalanche => {
            let mut sim = AvalancheSim::new(
                cfg.n,
                AvalancheParams {
                    cycle_s: cfg.cycle_s,
                    d1_s: cfg.d1_s,
                    t_block_s: cfg.t_block_s,
                    p_block: cfg.p_block,
                    k: cfg.k,
                    alpha: cfg.alpha,
                    beta1: cfg.beta1,
                    beta2: cfg.beta2,
                },
            );
            let engine = Engine::new(cfg.n, cfg.seed, cfg.duration_s, latency);
            let stats = engine.run(&mut sim);
            build_report(cfg, stats, Vec::new(), 0)
        }
        ProtocolKind::Paxos => {
            let mut sim = PaxosSim::new(
                cfg.n,
                PaxosParams {
                    t_block_s: cfg.t_block_s,
                },
            );
            let engine = Engine::new(cfg.n, cfg.seed, cfg.duration_s, latency);
            let stats = engine.run(&mut sim);
            build_report(cfg, stats, Vec::new(), 0)
        }
        ProtocolKind::Raft => {
            let mut sim = RaftSim::new(
                cfg.n,
                RaftParams {
                    cycle_s: cfg.cycle_s,
                    t_block_s: cfg.t_block_s,
                    timeout_min_s: cfg.timeout_min_s,
                    timeout_max_s: cfg.timeout_max_s,
                    latency_max_s: cfg.latency_max_s,
                },
            );
            let engine = Engine::new(cfg.n, cfg.seed, cfg.duration_s, latency);
            let stats = engine.run(&mut sim);
            build_report(cfg, stats, Vec::new(), 0)
        }
        ProtocolKind::Pbft => {
            let mut sim = PbftSim::new(
                cfg.n,
                PbftParams {
                    t_block_s: cfg.t_block_s,
                },
            );
            let engine = Engine::new(cfg.n, cfg.seed, cfg.duration_s, latency);
            let stats = engine.run(&mut sim);
            build_report(cfg, stats, Vec::new(), 0)
        }
    };
    Ok(report)
}

/// Run one configuration across several seeds, concurrently; reports come
/// back in seed order.
pub fn run_sweep(cfg: &SimConfig, seeds: &[u64]) -> Result<Vec<ExperimentReport>, ConfigError> {
    cfg.validate()?;
    let reports = std::thread::scope(|scope| {
        let handles: Vec<_> = seeds
            .iter()
            .map(|&seed| {
                let mut run_cfg = cfg.clone();
                run_cfg.seed = seed;
                scope.spawn(move || run_experiment(&run_cfg))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("run thread panicked"))
            .collect::<Result<Vec<_>, _>>()
    })?;
    Ok(reports)
}

pub const CSV_HEADER: &str = "protocol,n,seed,duration_s,confirmed_items,messages_sent,avg_latency_s";

pub fn csv_row(report: &ExperimentReport) -> String {
    format!(
        "{},{},{},{},{},{},{:.6}",
        report.protocol,
        report.n,
        report.seed,
        report.duration_s,
        report.confirmed_items,
        report.messages_sent,
        report.avg_latency_s
    )
}

/// CSV with the exact column order
/// `protocol,n,seed,duration_s,confirmed_items,messages_sent,avg_latency_s`,
/// one row per run. An empty report list yields a header-only file.
pub fn emit_csv(reports: &[ExperimentReport]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&csv_row(r));
        out.push('\n');
    }
    out
}

/// Summary fields recovered from one CSV row.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvSummary {
    pub protocol: String,
    pub n: u32,
    pub seed: u64,
    pub duration_s: f64,
    pub confirmed_items: u64,
    pub messages_sent: u64,
    pub avg_latency_s: f64,
}

/// Inverse of [`emit_csv`] for the summary fields.
pub fn parse_csv(text: &str) -> Result<Vec<CsvSummary>, ConfigError> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        _ => {
            return Err(ConfigError::Malformed { line: 1 });
        }
    }
    let mut rows = Vec::new();
    for (idx, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(ConfigError::Malformed { line: idx + 2 });
        }
        let bad = |key: &str, value: &str| ConfigError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
        };
        rows.push(CsvSummary {
            protocol: fields[0].to_string(),
            n: fields[1].parse().map_err(|_| bad("n", fields[1]))?,
            seed: fields[2].parse().map_err(|_| bad("seed", fields[2]))?,
            duration_s: fields[3].parse().map_err(|_| bad("duration_s", fields[3]))?,
            confirmed_items: fields[4]
                .parse()
                .map_err(|_| bad("confirmed_items", fields[4]))?,
            messages_sent: fields[5]
                .parse()
                .map_err(|_| bad("messages_sent", fields[5]))?,
            avg_latency_s: fields[6]
                .parse()
                .map_err(|_| bad("avg_latency_s", fields[6]))?,
        });
    }
    Ok(rows)
}

pub fn emit_json(report: &ExperimentReport) -> String {
    serde_json::to_string_pretty(report).expect("report serializes")
}

/// Post-run safety verification shared by every protocol:
///
/// * at most one confirmed block per height network-wide;
/// * each node's confirmed chain is gap-free from height 1 and each block's
///   parent is the confirmed block one height below (prefix consistency
///   across nodes follows);
/// * no recorded invariant violations (BECP aggregation mass).
pub fn verify_safety(report: &ExperimentReport) -> Result<(), Vec<String>> {
    let mut problems = Vec::new();
    let mut by_height: std::collections::BTreeMap<u64, BlockRef> = std::collections::BTreeMap::new();
    for c in &report.confirmations {
        match by_height.get(&c.block.id) {
            Some(existing) if *existing != c.block => {
                problems.push(format!(
                    "height {} confirmed as ({},{}) and ({},{})",
                    c.block.id, existing.id, existing.o, c.block.id, c.block.o
                ));
            }
            _ => {
                by_height.insert(c.block.id, c.block);
            }
        }
    }
    for node in 0..report.n {
        let chain = node_chain(report, node);
        for (idx, c) in chain.iter().enumerate() {
            let expected_id = idx as u64 + 1;
            if c.block.id != expected_id {
                problems.push(format!(
                    "node {node}: confirmed chain has a gap at height {expected_id}"
                ));
                break;
            }
            let expected_parent = if idx == 0 {
                crate::block::GENESIS
            } else {
                chain[idx - 1].block
            };
            if c.parent != Some(expected_parent) {
                problems.push(format!(
                    "node {node}: block at height {} does not extend the confirmed block below it",
                    c.block.id
                ));
            }
        }
    }
    problems.extend(report.invariant_violations.iter().cloned());
    if problems.is_empty() {
        Ok(())
    } else {
        Err(problems)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(protocol: ProtocolKind) -> SimConfig {
        SimConfig::new(protocol, 8, 40.0, 1)
    }

    #[test]
    fn zero_duration_is_an_empty_report() {
        let cfg = SimConfig::new(ProtocolKind::Becp, 10, 0.0, 1);
        let report = run_experiment(&cfg).unwrap();
        assert_eq!(report.confirmed_items, 0);
        assert_eq!(report.messages_sent, 0);
        assert_eq!(report.avg_latency_s, 0.0);
    }

    #[test]
    fn identical_seed_gives_identical_reports() {
        for protocol in ProtocolKind::ALL {
            let cfg = small(protocol);
            let a = run_experiment(&cfg).unwrap();
            let b = run_experiment(&cfg).unwrap();
            assert_eq!(emit_csv(&[a.clone()]), emit_csv(&[b.clone()]), "{protocol}");
            assert_eq!(a.latency_samples, b.latency_samples, "{protocol}");
            assert_eq!(a.chain_digests, b.chain_digests, "{protocol}");
        }
    }

    #[test]
    fn sweep_mean_matches_individual_runs() {
        let cfg = small(ProtocolKind::Paxos);
        let seeds = [1, 2, 3, 4, 5];
        let sweep = run_sweep(&cfg, &seeds).unwrap();
        assert_eq!(sweep.len(), 5);
        let mut sum = 0u64;
        for (i, &seed) in seeds.iter().enumerate() {
            assert_eq!(sweep[i].seed, seed, "rows in seed order");
            let mut single = cfg.clone();
            single.seed = seed;
            let alone = run_experiment(&single).unwrap();
            assert_eq!(alone.confirmed_items, sweep[i].confirmed_items);
            sum += alone.confirmed_items;
        }
        let sweep_mean: f64 =
            sweep.iter().map(|r| r.confirmed_items as f64).sum::<f64>() / seeds.len() as f64;
        assert!((sweep_mean - sum as f64 / 5.0).abs() < 1e-12);
    }

    #[test]
    fn csv_round_trip_recovers_summaries() {
        let cfg = small(ProtocolKind::Pbft);
        let reports = run_sweep(&cfg, &[1, 2]).unwrap();
        let text = emit_csv(&reports);
        let parsed = parse_csv(&text).unwrap();
        assert_eq!(parsed.len(), 2);
        for (row, report) in parsed.iter().zip(&reports) {
            assert_eq!(row.protocol, report.protocol.name());
            assert_eq!(row.n, report.n);
            assert_eq!(row.seed, report.seed);
            assert_eq!(row.confirmed_items, report.confirmed_items);
            assert_eq!(row.messages_sent, report.messages_sent);
            assert!((row.avg_latency_s - report.avg_latency_s).abs() < 1e-6);
        }
    }

    #[test]
    fn empty_report_list_is_header_only() {
        assert_eq!(emit_csv(&[]), format!("{CSV_HEADER}\n"));
    }

    #[test]
    fn config_file_and_overrides() {
        let mut cfg = SimConfig::new(ProtocolKind::Becp, 1, 1.0, 0);
        cfg.apply_file(
            "# experiment\nprotocol = paxos\nnodes = 12\nduration_s = 99  # short\nseed = 7\n",
        )
        .unwrap();
        assert_eq!(cfg.protocol, ProtocolKind::Paxos);
        assert_eq!(cfg.n, 12);
        assert_eq!(cfg.duration_s, 99.0);
        assert_eq!(cfg.seed, 7);
        assert!(matches!(
            cfg.set("nonsense", "1"),
            Err(ConfigError::UnknownKey(_))
        ));
        assert!(matches!(
            cfg.apply_file("just words"),
            Err(ConfigError::Malformed { line: 1 })
        ));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = small(ProtocolKind::Becp);
        cfg.n = 0;
        assert!(cfg.validate().is_err());

        let mut cfg = small(ProtocolKind::Becp);
        cfg.n_cache = 0;
        assert!(cfg.validate().is_err());

        let mut cfg = small(ProtocolKind::Raft);
        cfg.timeout_max_s = cfg.timeout_min_s;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn irrelevant_fields_warn() {
        let mut cfg = small(ProtocolKind::Paxos);
        cfg.beta2 = 99999;
        cfg.beta1 = 5;
        let warnings = cfg.validate().unwrap();
        assert!(!warnings.is_empty());
        // Relevant for avalanche: no warning there.
        let mut cfg = small(ProtocolKind::Avalanche);
        cfg.beta2 = 200;
        assert!(cfg.validate().unwrap().is_empty());
    }

    #[test]
    fn safety_holds_on_small_runs() {
        for protocol in ProtocolKind::ALL {
            let mut cfg = small(protocol);
            cfg.verify_invariants = true;
            let report = run_experiment(&cfg).unwrap();
            if let Err(problems) = verify_safety(&report) {
                panic!("{protocol}: {problems:?}");
            }
        }
    }
}
