//! Command-line driver for the carbyne engine.
//!
//! The subcommands cover the full experiment loop: `dimension` sizes a
//! filter for a capacity target, `generate` writes a synthetic trace,
//! `replay` runs a trace or a generated workload against a pool in
//! lockstep with the exact reference and writes metrics CSVs, `stress`
//! bundles named congestion scenarios, and `bench` times filter
//! operations against an exact-map baseline.
//!
//! Output files are written to a temporary sibling and renamed into
//! place, so a failed run leaves no partial artifacts. All randomness in
//! a run flows from `--seed`; when the flag is absent (and no config
//! file supplies one) a seed is drawn and echoed on stderr so the run
//! can be repeated.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use carbyne::{
    bench_ops, derive_m, generate, memory_bytes, optimal_k, read_trace, replay, write_hourly_csv,
    write_summary_csv, write_trace, BenchRow, CongestionConfig, FilterSpec, IndexTable,
    MetricsReport, PoolConfig, ReplayConfig, TxStrategy, WorkloadConfig, BENCH_MIN_ITERATIONS,
    DEFAULT_CHAIN_CAPACITY, DEFAULT_INPUTS_RESET_INTERVAL_S, DEFAULT_LINK_EXPIRY_S,
    DEFAULT_RBF_THRESHOLD, DEFAULT_ROTATION_INTERVAL_S,
};
use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use rand::Rng;

/// Capacity assumed when no `--k` override is given; matches the sizing
/// the filter-size table names (600KB, 1MB, 4MB) were derived for.
const DEFAULT_CAPACITY_N: u64 = 200_000;

#[derive(Parser)]
#[command(
    name = "carbyne",
    version,
    about = "Counting-bloom-filter transaction pool: dimensioning, synthetic workloads, \
             lockstep replay, stress scenarios, and micro-benchmarks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Derive filter dimensions from a capacity target.
    Dimension(DimensionArgs),
    /// Generate a synthetic workload trace (NDJSON).
    Generate(GenerateArgs),
    /// Replay a trace or workload against a pool and write metrics CSVs.
    Replay(ReplayArgs),
    /// Run a congestion scenario end to end (generate + replay).
    Stress(StressArgs),
    /// Time filter operations against an exact-map baseline.
    Bench(BenchArgs),
}

#[derive(Args)]
#[command(group = ArgGroup::new("target").required(true))]
struct DimensionArgs {
    /// Expected number of live entries.
    #[arg(long)]
    n: u64,
    /// Target false-positive probability; picks the bucket count.
    #[arg(long, group = "target")]
    p: Option<f64>,
    /// Explicit bucket count.
    #[arg(long, group = "target")]
    m: Option<u64>,
    /// Counter width in bits per bucket (2, 4, or 8).
    #[arg(long, default_value_t = 2)]
    bucket_bits: u8,
}

#[derive(Args)]
struct GenerateArgs {
    /// Workload configuration file (JSON).
    #[arg(long, value_name = "FILE")]
    config: PathBuf,
    /// Output trace path.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Seed override; wins over the config file's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
#[command(group = ArgGroup::new("source").required(true))]
struct ReplayArgs {
    /// Input trace file (NDJSON).
    #[arg(long, group = "source", value_name = "FILE")]
    trace: Option<PathBuf>,
    /// Workload configuration; events are generated and replayed in one pass.
    #[arg(long, group = "source", value_name = "FILE")]
    workload: Option<PathBuf>,
    #[command(flatten)]
    pool: PoolArgs,
    /// Directory receiving hourly.csv and summary.csv.
    #[arg(long, default_value = ".", value_name = "DIR")]
    out_dir: PathBuf,
    /// Master seed for filter hashing and workload generation.
    #[arg(long)]
    seed: Option<u64>,
}

/// Pool shape shared by `replay` and `stress`. Both filters (txid and
/// inputs) take the same size and hash count.
#[derive(Args)]
struct PoolArgs {
    /// Filter size in decimal units (600KB, 1MB, 4MB); default 1MB.
    #[arg(long, group = "size", value_name = "SIZE")]
    filter_size: Option<String>,
    /// Explicit bucket count for both filters.
    #[arg(long, group = "size")]
    m: Option<u64>,
    /// Hash count; defaults to the optimum for 200,000 live entries.
    #[arg(long)]
    k: Option<u32>,
    /// Counter width in bits per bucket (2, 4, or 8).
    #[arg(long, default_value_t = 2)]
    bucket_bits: u8,
    /// Forgetting strategy for the txid filter.
    #[arg(long, value_enum, default_value_t = Strategy::Rotating)]
    strategy: Strategy,
    /// Rotation interval in seconds (rotating strategy).
    #[arg(long, default_value_t = DEFAULT_ROTATION_INTERVAL_S)]
    rotation_interval: u64,
    /// Live inserts per link before a new one spawns (chain strategy).
    #[arg(long, default_value_t = DEFAULT_CHAIN_CAPACITY)]
    chain_capacity: u64,
    /// Link age limit in seconds (chain strategy).
    #[arg(long, default_value_t = DEFAULT_LINK_EXPIRY_S)]
    link_expiry: u64,
    /// Seconds between wipes of the spent-inputs filter.
    #[arg(long, default_value_t = DEFAULT_INPUTS_RESET_INTERVAL_S)]
    inputs_reset_interval: u64,
    /// Spent-input count at which an entry is dropped as a double spend.
    #[arg(long, default_value_t = DEFAULT_RBF_THRESHOLD)]
    rbf_threshold: u8,
    /// JSON file pinning bucket indices for selected hex-encoded keys.
    #[arg(long, value_name = "FILE")]
    index_table: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Strategy {
    Rotating,
    Chain,
}

#[derive(Args)]
struct StressArgs {
    /// Named scenario; conflicts with the custom pool and workload flags.
    #[arg(
        long,
        value_enum,
        conflicts_with_all = [
            "duration", "tx_rate", "congestion_start", "target_backlog",
            "filter_size", "m", "k", "bucket_bits", "strategy", "rotation_interval",
            "chain_capacity", "link_expiry", "inputs_reset_interval", "rbf_threshold",
            "index_table",
        ]
    )]
    preset: Option<Preset>,
    #[command(flatten)]
    pool: PoolArgs,
    /// Scenario length in seconds.
    #[arg(long, default_value_t = 216_000)]
    duration: u64,
    /// Mean transaction arrivals per second.
    #[arg(long, default_value_t = 3.73)]
    tx_rate: f64,
    /// Second at which confirmations halt and the backlog starts growing.
    #[arg(long, default_value_t = 7_200)]
    congestion_start: u64,
    /// Backlog size that ends the halt and releases deferred confirmations.
    #[arg(long, default_value_t = 600_000)]
    target_backlog: u64,
    /// Directory receiving hourly.csv and summary.csv.
    #[arg(long, default_value = ".", value_name = "DIR")]
    out_dir: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

/// Named scenarios pairing a pool shape with a workload.
#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// One synthetic day at the default arrival rate through a rotating
    /// 600 KB filter with k = 8.
    #[value(name = "table1-600kb")]
    Table1_600kb,
    /// Six-hour congestion spike absorbed by a rotating filter sized
    /// three times the steady-state fit (3 MB), rotating every 6 h.
    #[value(name = "stress-preemptive-3x")]
    Preemptive3x,
    /// Congestion spike handled by a chain of 600 KB links spawned on
    /// demand, scaled to desk size (capacity 2,000; backlog 6,000).
    #[value(name = "stress-dynamic")]
    Dynamic,
}

#[derive(Args)]
struct BenchArgs {
    /// Hash counts to measure, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "14")]
    k: Vec<u32>,
    /// Preload scales to measure, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "10000,1000000")]
    n: Vec<u64>,
    /// Timed operations per measurement batch.
    #[arg(long, default_value_t = BENCH_MIN_ITERATIONS)]
    iterations: u64,
    /// Output CSV path; stdout when absent.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

fn main() {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Dimension(args) => cmd_dimension(args),
        Command::Generate(args) => cmd_generate(args),
        Command::Replay(args) => cmd_replay(args),
        Command::Stress(args) => cmd_stress(args),
        Command::Bench(args) => cmd_bench(args),
    };
    if let Err(err) = result {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn cmd_dimension(args: &DimensionArgs) -> Result<()> {
    check_bucket_bits(args.bucket_bits)?;
    let m = match (args.p, args.m) {
        (Some(p), None) => derive_m(args.n, p)?,
        (None, Some(m)) => m,
        _ => unreachable!("clap enforces exactly one of --p/--m"),
    };
    let k = optimal_k(m, args.n)?;
    let bytes = memory_bytes(m, args.bucket_bits);
    println!("m={m} k={k} memory_bytes={bytes}");
    Ok(())
}

fn cmd_generate(args: &GenerateArgs) -> Result<()> {
    let (mut config, file_seed) = load_workload(&args.config)?;
    config.seed = resolve_seed(args.seed, file_seed);
    let events = generate(&config)?;
    let written = write_trace(events, &args.out)?;
    println!("wrote {written} events to {}", args.out.display());
    Ok(())
}

fn cmd_replay(args: &ReplayArgs) -> Result<()> {
    let report = match (&args.trace, &args.workload) {
        (Some(path), None) => {
            let seed = resolve_seed(args.seed, None);
            let config = ReplayConfig::new(args.pool.pool_config(seed)?);
            let events = read_trace(path)?;
            replay(events, &config)?
        }
        (None, Some(path)) => {
            let (mut workload, file_seed) = load_workload(path)?;
            let seed = resolve_seed(args.seed, file_seed);
            workload.seed = seed;
            let config = ReplayConfig::new(args.pool.pool_config(seed)?);
            replay(generate(&workload)?, &config)?
        }
        _ => unreachable!("clap enforces exactly one of --trace/--workload"),
    };
    write_reports(&report, &args.out_dir)?;
    print_summary(&report);
    Ok(())
}

fn cmd_stress(args: &StressArgs) -> Result<()> {
    let seed = resolve_seed(args.seed, None);
    let (pool, workload) = match args.preset {
        Some(p) => preset(p, seed),
        None => {
            let workload = WorkloadConfig {
                seed,
                duration_s: args.duration,
                tx_rate_per_s: args.tx_rate,
                congestion: Some(CongestionConfig {
                    start_s: args.congestion_start,
                    target_backlog: args.target_backlog,
                }),
                ..WorkloadConfig::default()
            };
            (args.pool.pool_config(seed)?, workload)
        }
    };
    let report = replay(generate(&workload)?, &ReplayConfig::new(pool))?;
    write_reports(&report, &args.out_dir)?;
    print_summary(&report);
    Ok(())
}

fn preset(which: Preset, seed: u64) -> (PoolConfig, WorkloadConfig) {
    let day = WorkloadConfig {
        seed,
        duration_s: 86_400,
        ..WorkloadConfig::default()
    };
    match which {
        Preset::Table1_600kb => (PoolConfig::rotating(2_400_000, 8).with_seed(seed), day),
        Preset::Preemptive3x => {
            let mut pool = PoolConfig::rotating(12_000_000, 42).with_seed(seed);
            pool.tx_strategy = TxStrategy::Rotating { interval_s: 21_600 };
            let workload = WorkloadConfig {
                congestion: Some(CongestionConfig {
                    start_s: 21_600,
                    target_backlog: 100_000,
                }),
                ..day
            };
            (pool, workload)
        }
        Preset::Dynamic => {
            let mut pool = PoolConfig::chain(2_400_000, 8).with_seed(seed);
            pool.tx_strategy = TxStrategy::Chain {
                capacity_n: 2_000,
                link_expiry_s: 21_600,
            };
            let workload = WorkloadConfig {
                duration_s: 43_200,
                tx_rate_per_s: 2.0,
                mean_confirm_delay_s: 600.0,
                conflict_rate: 0.0,
                congestion: Some(CongestionConfig {
                    start_s: 7_200,
                    target_backlog: 6_000,
                }),
                ..day
            };
            (pool, workload)
        }
    }
}

fn cmd_bench(args: &BenchArgs) -> Result<()> {
    if args.k.is_empty() || args.n.is_empty() {
        bail!("--k and --n need at least one value each");
    }
    let seed = resolve_seed(args.seed, None);
    let mut cbf_params = Vec::new();
    for &k in &args.k {
        for &n in &args.n {
            cbf_params.push((k, n));
        }
    }
    let rows = bench_ops(&cbf_params, &args.n, args.iterations, seed)?;
    let csv = render_bench_csv(&rows);
    match &args.out {
        Some(path) => {
            write_atomic(path, csv.as_bytes())?;
            println!("wrote {}", path.display());
        }
        None => print!("{csv}"),
    }
    report_flatness(&rows);
    Ok(())
}

impl PoolArgs {
    /// Bucket count from `--m`, `--filter-size`, or the 1MB default.
    fn resolve_m(&self) -> Result<u64> {
        if let Some(m) = self.m {
            return Ok(m);
        }
        let size = self.filter_size.as_deref().unwrap_or("1MB");
        let bytes = parse_size(size)?;
        Ok(bytes * 8 / self.bucket_bits as u64)
    }

    fn pool_config(&self, seed: u64) -> Result<PoolConfig> {
        check_bucket_bits(self.bucket_bits)?;
        let m = self.resolve_m()?;
        let k = match self.k {
            Some(k) => k,
            None => optimal_k(m, DEFAULT_CAPACITY_N)?,
        };
        let spec = FilterSpec {
            m,
            k,
            bucket_bits: self.bucket_bits,
            reseed_on_clear: true,
        };
        let mut config = PoolConfig::rotating(m, k).with_seed(seed);
        config.tx_filter = spec;
        config.inputs_filter = spec;
        config.tx_strategy = match self.strategy {
            Strategy::Rotating => TxStrategy::Rotating {
                interval_s: self.rotation_interval,
            },
            Strategy::Chain => TxStrategy::Chain {
                capacity_n: self.chain_capacity,
                link_expiry_s: self.link_expiry,
            },
        };
        config.inputs_reset_interval_s = self.inputs_reset_interval;
        config.rbf_threshold = self.rbf_threshold;
        if let Some(path) = &self.index_table {
            config.index_table = Some(Arc::new(load_index_table(path)?));
        }
        Ok(config)
    }
}

fn check_bucket_bits(bits: u8) -> Result<()> {
    if ![2, 4, 8].contains(&bits) {
        bail!("--bucket-bits must be 2, 4, or 8 (got {bits})");
    }
    Ok(())
}

/// Decimal size with an optional B/KB/MB/GB suffix; bare digits are bytes.
fn parse_size(s: &str) -> Result<u64> {
    let upper = s.trim().to_ascii_uppercase();
    let (digits, unit) = if let Some(p) = upper.strip_suffix("GB") {
        (p, 1_000_000_000)
    } else if let Some(p) = upper.strip_suffix("MB") {
        (p, 1_000_000)
    } else if let Some(p) = upper.strip_suffix("KB") {
        (p, 1_000)
    } else if let Some(p) = upper.strip_suffix('B') {
        (p, 1)
    } else {
        (upper.as_str(), 1)
    };
    let count: u64 = digits
        .trim()
        .parse()
        .with_context(|| format!("bad size {s:?}; expected forms like 600KB or 1MB"))?;
    if count == 0 {
        bail!("size must be positive (got {s:?})");
    }
    Ok(count * unit)
}

/// Seed precedence: explicit flag, then a config file's seed, then a
/// fresh draw echoed on stderr.
fn resolve_seed(flag: Option<u64>, file_seed: Option<u64>) -> u64 {
    if let Some(seed) = flag {
        return seed;
    }
    if let Some(seed) = file_seed {
        return seed;
    }
    let seed = rand::rng().random::<u64>();
    eprintln!("seed={seed}");
    seed
}

/// Loads a workload config and reports whether the file itself carried a
/// seed key, so an absent key can fall through to a drawn seed.
fn load_workload(path: &Path) -> Result<(WorkloadConfig, Option<u64>)> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read workload config {}", path.display()))?;
    let config: WorkloadConfig = serde_json::from_str(&text)
        .with_context(|| format!("invalid workload config {}", path.display()))?;
    let has_seed = serde_json::from_str::<serde_json::Value>(&text)
        .ok()
        .map(|v| v.get("seed").is_some())
        .unwrap_or(false);
    let file_seed = has_seed.then_some(config.seed);
    Ok((config, file_seed))
}

/// Index-table file: JSON object mapping hex-encoded key bytes to the
/// bucket indices the filters must use for that key.
fn load_index_table(path: &Path) -> Result<IndexTable> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read index table {}", path.display()))?;
    let raw: BTreeMap<String, Vec<u64>> = serde_json::from_str(&text)
        .with_context(|| format!("invalid index table {}", path.display()))?;
    let mut table = IndexTable::new();
    for (hex_key, indices) in raw {
        let key = hex::decode(&hex_key)
            .with_context(|| format!("index table key {hex_key:?} is not hex"))?;
        table.insert(key, indices);
    }
    Ok(table)
}

fn write_reports(report: &MetricsReport, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)
        .with_context(|| format!("cannot create output directory {}", out_dir.display()))?;
    let hourly = out_dir.join("hourly.csv");
    let summary = out_dir.join("summary.csv");
    write_hourly_csv(report, &hourly)?;
    write_summary_csv(report, &summary)?;
    println!("wrote {} and {}", hourly.display(), summary.display());
    Ok(())
}

fn print_summary(report: &MetricsReport) {
    let mut line = format!(
        "events={} fpr={:.9} discarded_rate={:.9} reprocessed_rate={:.9} mem_bytes={}",
        report.events,
        report.rates.fpr,
        report.rates.discarded_rate,
        report.rates.reprocessed_rate,
        report.mem_bytes
    );
    if let Some(links) = report.peak_links {
        line.push_str(&format!(" peak_links={links}"));
    }
    if report.rates.zero_query_warning {
        line.push_str(" zero_query_warning=true");
    }
    println!("{line}");
}

fn render_bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("structure,op,k,n,ns_per_op\n");
    for row in rows {
        out.push_str(&format!(
            "{},{},{},{},{:.3}\n",
            row.structure, row.op, row.k, row.n, row.ns_per_op
        ));
    }
    out
}

/// For every (structure, op, k) series measured at two or more scales,
/// prints the max/min latency ratio on stderr; flat series stay near 1.
fn report_flatness(rows: &[BenchRow]) {
    let mut series: BTreeMap<(&str, &str, u32), Vec<f64>> = BTreeMap::new();
    for row in rows {
        series
            .entry((row.structure, row.op, row.k))
            .or_default()
            .push(row.ns_per_op);
    }
    for ((structure, op, k), samples) in series {
        if samples.len() < 2 {
            continue;
        }
        let min = samples.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = samples.iter().cloned().fold(0.0_f64, f64::max);
        if min > 0.0 {
            eprintln!("flatness {structure}/{op} k={k}: max/min={:.3}", max / min);
        }
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)
        .with_context(|| format!("cannot create temporary file in {}", dir.display()))?;
    tmp.write_all(bytes)?;
    tmp.persist(path)
        .map_err(|e| e.error)
        .with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}
