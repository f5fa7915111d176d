//! Operator front-end for the fingerprinting pipeline: train models,
//! compile them to rule files, simulate the data plane over traces,
//! score detections, and generate or mix synthetic traffic.
//!
//! Exit codes: 0 success, 1 stage failure (message names the stage),
//! 2 usage problems (bad flags, unreadable inputs; message names the flag).

use std::collections::BTreeMap;
use std::net::Ipv4Addr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use deviceradar::compiler;
use deviceradar::embedding::TrainingConfig;
use deviceradar::harness::{self, BurstSpec, DeviceSpec, EvalReport, MixConfig, MixMode};
use deviceradar::keypackets::ExtractionConfig;
use deviceradar::model::{DeviceFingerprintModel, TrainParams};
use deviceradar::sim::{self, hot::TimeoutConvention, SimConfig};
use deviceradar::trace::{self, Cidr, DirectionalPacketSize, Trace};

#[derive(Parser)]
#[command(
    name = "deviceradar",
    about = "IoT device fingerprinting with a switch-style data plane",
    version
)]
struct Cli {
    /// Optional key=value config file; command-line flags win on conflict.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a per-device model from a device trace and background traffic.
    Train(TrainArgs),
    /// Compile a trained model into match-action rule tables.
    Compile(CompileArgs),
    /// Execute compiled rule tables over a trace, emitting detections.
    Simulate(SimulateArgs),
    /// Score detections against a labelled trace.
    Evaluate(EvaluateArgs),
    /// Produce synthetic traces.
    #[command(subcommand)]
    Generate(GenerateCmd),
    /// Replay traces through an emulated NAT or VPN middlebox.
    Mix(MixArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Trace of the target device (CSV, or pcap with --lan-prefix). When the
    /// file carries ground-truth labels for the device id — a post-middlebox
    /// capture, say — only those packets are used.
    #[arg(long, value_name = "FILE")]
    device_trace: PathBuf,
    /// Background traffic without the device (CSV, or pcap with --lan-prefix).
    #[arg(long, value_name = "FILE")]
    background: PathBuf,
    /// Where to write the model JSON.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Device identifier stored in the model [default: device-trace file stem].
    #[arg(long)]
    device_id: Option<String>,
    /// Detection window length in microseconds [default: 1000000].
    #[arg(long)]
    tw_us: Option<u64>,
    /// Key packets to select (feature dimensions) [default: 16].
    #[arg(long)]
    n_keys: Option<usize>,
    /// Similarity floor; matrix entries below it become 0 [default: 0.4].
    #[arg(long)]
    lambda: Option<f64>,
    /// Burst gap in microseconds for key-packet extraction and embedding
    /// context boundaries [default: 1000000].
    #[arg(long)]
    tb_us: Option<u64>,
    /// Periodicity ceiling: a destination qualifies when the coefficient of
    /// variation of its burst intervals is below this [default: 0.2].
    #[arg(long)]
    eta: Option<f64>,
    /// Minimum occurrences for a size to enter the matrix vocabulary [default: 10].
    #[arg(long)]
    min_freq: Option<u64>,
    /// Decision-tree leaf cap [default: 500].
    #[arg(long)]
    max_leaves: Option<usize>,
    /// Embedding training epochs [default: 20].
    #[arg(long)]
    epochs: Option<usize>,
    /// Seed for embedding init/negative sampling and the dataset split [default: 1].
    #[arg(long)]
    seed: Option<u64>,
    /// LAN CIDR prefix for pcap inputs; repeatable.
    #[arg(long, value_name = "CIDR")]
    lan_prefix: Vec<Cidr>,
}

#[derive(Args)]
struct CompileArgs {
    /// Trained model JSON.
    #[arg(long, value_name = "FILE")]
    model: PathBuf,
    /// Where to write the rule file.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    /// Compiled rule file; repeat for multiple devices.
    #[arg(long, value_name = "FILE", required = true)]
    rules: Vec<PathBuf>,
    /// Trace to replay (CSV, or pcap with --lan-prefix).
    #[arg(long, value_name = "FILE")]
    trace: PathBuf,
    /// Where to write the detections CSV.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Worker threads across device pipelines [default: 1].
    #[arg(long)]
    jobs: Option<usize>,
    /// Re-derive every window's register sums independently and fail on
    /// any mismatch (slow; for debugging).
    #[arg(long)]
    debug_checks: bool,
    /// Let the timeout-triggering packet join the window it closes instead
    /// of the one it opens (sensitivity experiments).
    #[arg(long)]
    trigger_closes: bool,
    /// LAN CIDR prefix for pcap inputs; repeatable.
    #[arg(long, value_name = "CIDR")]
    lan_prefix: Vec<Cidr>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Detections CSV from `simulate`.
    #[arg(long, value_name = "FILE")]
    detections: PathBuf,
    /// Ground-truth labelled trace the detections were produced from.
    #[arg(long, value_name = "FILE")]
    trace: PathBuf,
    /// Window length the detections were produced with, microseconds
    /// [default: 1000000].
    #[arg(long)]
    tw_us: Option<u64>,
    /// Score only this device [default: every device in the detections].
    #[arg(long)]
    device_id: Option<String>,
    /// Optional CSV report output.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum GenerateCmd {
    /// Synthesize a periodic-burst device trace.
    Device(GenerateDeviceArgs),
    /// Synthesize Poisson background traffic.
    Background(GenerateBackgroundArgs),
}

#[derive(Args)]
struct GenerateDeviceArgs {
    /// Label stamped on every packet.
    #[arg(long)]
    device_id: String,
    /// Directional sizes of one burst, comma-separated values in [20,3000]
    /// (outbound = size, inbound = size + 1500), e.g. 543,1643,431,1899.
    #[arg(long, value_delimiter = ',', required = true)]
    sizes: Vec<u16>,
    /// Burst period in microseconds.
    #[arg(long)]
    period_us: u64,
    /// Burst start jitter as a fraction of the period, in [0,1) [default: 0.01].
    #[arg(long)]
    jitter: Option<f64>,
    /// Trace length in microseconds.
    #[arg(long)]
    duration_us: u64,
    /// Device LAN address [default: 10.0.0.2].
    #[arg(long)]
    lan_ip: Option<Ipv4Addr>,
    /// Cloud service address [default: 52.80.1.1].
    #[arg(long)]
    service_ip: Option<Ipv4Addr>,
    /// Cloud service port [default: 443].
    #[arg(long)]
    service_port: Option<u16>,
    #[arg(long)]
    seed: Option<u64>,
    /// Where to write the trace CSV.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Args)]
struct GenerateBackgroundArgs {
    /// Mean packet rate, packets per second.
    #[arg(long)]
    rate_pps: f64,
    /// Number of LAN hosts to spread traffic over [default: 32].
    #[arg(long)]
    hosts: Option<u32>,
    /// Trace length in microseconds.
    #[arg(long)]
    duration_us: u64,
    #[arg(long)]
    seed: Option<u64>,
    /// Where to write the trace CSV.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Args)]
struct MixArgs {
    /// Labelled device trace; repeat for multiple devices.
    #[arg(long, value_name = "FILE")]
    iot: Vec<PathBuf>,
    /// Background trace.
    #[arg(long, value_name = "FILE")]
    background: PathBuf,
    /// Middlebox flavor.
    #[arg(long, value_parser = ["nat", "vpn"])]
    mode: String,
    /// External address for NAT mode [default: 203.0.113.1].
    #[arg(long)]
    nat_ip: Option<Ipv4Addr>,
    /// Size overhead for VPN mode, bytes [default: 49].
    #[arg(long)]
    vpn_overhead: Option<u16>,
    /// Seed for the NAT port-translation counter [default: 1].
    #[arg(long)]
    seed: Option<u64>,
    /// Where to write the mixed trace CSV.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

/// Failures split by who must fix them: `Usage` is the operator's command
/// line (exit 2), `Stage` is a pipeline stage failing on valid inputs
/// (exit 1).
enum CliError {
    Usage(String),
    Stage(anyhow::Error),
}

type CliResult<T> = Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

trait StageExt<T> {
    /// Attach the failing stage's name and convert into a stage error.
    fn stage(self, name: &str) -> CliResult<T>;
}

impl<T, E: std::error::Error + Send + Sync + 'static> StageExt<T> for Result<T, E> {
    fn stage(self, name: &str) -> CliResult<T> {
        self.map_err(|e| CliError::Stage(anyhow::Error::new(e).context(format!("stage {name}"))))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match FileConfig::load(cli.config.as_deref()) {
        Ok(cfg) => cfg,
        Err(e) => return fail(e),
    };
    let result = match cli.command {
        Command::Train(args) => cmd_train(args, &cfg),
        Command::Compile(args) => cmd_compile(args),
        Command::Simulate(args) => cmd_simulate(args, &cfg),
        Command::Evaluate(args) => cmd_evaluate(args, &cfg),
        Command::Generate(GenerateCmd::Device(args)) => cmd_generate_device(args, &cfg),
        Command::Generate(GenerateCmd::Background(args)) => cmd_generate_background(args, &cfg),
        Command::Mix(args) => cmd_mix(args, &cfg),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e),
    }
}

fn fail(e: CliError) -> ExitCode {
    match e {
        CliError::Usage(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        CliError::Stage(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}

/// key=value settings from `--config`. Lookups parse on demand so each
/// subcommand only validates the keys it understands.
struct FileConfig {
    values: BTreeMap<String, String>,
}

impl FileConfig {
    fn load(path: Option<&Path>) -> CliResult<FileConfig> {
        let mut values = BTreeMap::new();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).map_err(|e| {
                usage(format!("--config: cannot read {}: {e}", path.display()))
            })?;
            for (i, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| {
                    usage(format!(
                        "--config: {} line {}: expected key=value, got {line:?}",
                        path.display(),
                        i + 1
                    ))
                })?;
                values.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        Ok(FileConfig { values })
    }

    /// Flag value if given, else config-file value, else the default.
    fn resolve<T: FromStr + Copy>(&self, flag: Option<T>, key: &str, default: T) -> CliResult<T>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.values.get(key) {
            Some(raw) => raw
                .parse()
                .map_err(|e| usage(format!("--config: key {key}: bad value {raw:?}: {e}"))),
            None => Ok(default),
        }
    }
}

/// Read a trace, dispatching on extension: .pcap/.pcapng need LAN
/// prefixes, anything else parses as the canonical CSV.
fn read_trace(path: &Path, flag: &str, lan_prefixes: &[Cidr]) -> CliResult<Trace> {
    let is_pcap = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("pcap"));
    if !path.exists() {
        return Err(usage(format!("{flag}: no such file: {}", path.display())));
    }
    if is_pcap {
        if lan_prefixes.is_empty() {
            return Err(usage(format!(
                "{flag}: pcap input needs at least one --lan-prefix"
            )));
        }
        let import = trace::parse_pcap(path, lan_prefixes).stage("trace import")?;
        if import.skipped_non_ipv4 > 0 || import.skipped_bad_len > 0 {
            eprintln!(
                "note: {}: skipped {} non-IPv4 and {} bad-length packets",
                path.display(),
                import.skipped_non_ipv4,
                import.skipped_bad_len
            );
        }
        Ok(import.trace)
    } else {
        Ok(trace::parse_csv(path).stage("trace import")?.trace)
    }
}

fn write_trace(trace: &Trace, path: &Path) -> CliResult<()> {
    trace::write_csv(trace, path).stage("trace write")
}

fn cmd_train(args: TrainArgs, cfg: &FileConfig) -> CliResult<()> {
    let defaults = TrainParams::default();
    let tb_us = cfg.resolve(args.tb_us, "tb-us", defaults.extraction.burst_gap_us)?;
    let seed = cfg.resolve(args.seed, "seed", defaults.embedding.rng_seed)?;
    let params = TrainParams {
        t_w_us: cfg.resolve(args.tw_us, "tw-us", defaults.t_w_us)?,
        n_keys: cfg.resolve(args.n_keys, "n-keys", defaults.n_keys)?,
        lambda: cfg.resolve(args.lambda, "lambda", defaults.lambda)?,
        min_freq: cfg.resolve(args.min_freq, "min-freq", defaults.min_freq)?,
        max_leaves: cfg.resolve(args.max_leaves, "max-leaves", defaults.max_leaves)?,
        split_seed: seed,
        embedding: TrainingConfig {
            epochs: cfg.resolve(args.epochs, "epochs", defaults.embedding.epochs)?,
            rng_seed: seed,
            burst_gap_us: tb_us,
            ..defaults.embedding
        },
        extraction: ExtractionConfig {
            burst_gap_us: tb_us,
            cv_threshold: cfg.resolve(args.eta, "eta", defaults.extraction.cv_threshold)?,
            ..defaults.extraction
        },
    };

    let device_id = match &args.device_id {
        Some(id) => id.clone(),
        None => args
            .device_trace
            .file_stem()
            .and_then(|s| s.to_str())
            .map(str::to_string)
            .ok_or_else(|| usage("--device-id: required when --device-trace has no file stem"))?,
    };
    let device = {
        let full = read_trace(&args.device_trace, "--device-trace", &args.lan_prefix)?;
        let labelled = deviceradar::harness::extract_device_trace(&full, &device_id);
        if labelled.is_empty() {
            full
        } else {
            eprintln!(
                "device trace: kept {} of {} packets labelled {device_id}",
                labelled.len(),
                full.len()
            );
            labelled
        }
    };
    // Training merges the two traces, so the background must not repeat the
    // device's packets when both come from the same labelled capture.
    let background = {
        let full = read_trace(&args.background, "--background", &args.lan_prefix)?;
        let kept: Vec<_> = full
            .records
            .iter()
            .filter(|r| r.device_label.as_deref() != Some(device_id.as_str()))
            .cloned()
            .collect();
        if kept.len() < full.len() {
            eprintln!(
                "background: dropped {} packets labelled {device_id}",
                full.len() - kept.len()
            );
        }
        Trace { records: kept, ..full }
    };

    let (model, summary) =
        deviceradar::model::train_device_model(&device_id, &device, &background, &params)
            .stage("model training")?;
    model.save(&args.out).stage("model write")?;

    println!("model written to {}", args.out.display());
    println!("device_id:      {device_id}");
    println!("vocabulary:     {} directional sizes", summary.vocab_size);
    println!(
        "key packets:    {}{}",
        summary.key_count,
        if summary.shortfall {
            format!(" (shortfall: {} requested)", params.n_keys)
        } else {
            String::new()
        }
    );
    println!("tree leaves:    {} float / {} quantized", summary.float_leaves, summary.quant_leaves);
    let (tr, va, te) = summary.windows;
    println!("windows:        {tr} train / {va} val / {te} test");
    println!("train:          {}", summary.train_report);
    println!("val:            {}", summary.val_report);
    Ok(())
}

fn cmd_compile(args: CompileArgs) -> CliResult<()> {
    if !args.model.exists() {
        return Err(usage(format!("--model: no such file: {}", args.model.display())));
    }
    let model = DeviceFingerprintModel::load(&args.model).stage("model load")?;
    let set = compiler::compile(&model).stage("rule compilation")?;
    compiler::write_rules_file(&set, &args.out).stage("rule write")?;
    println!("rules written to {}", args.out.display());
    println!("direction table: {} rules", set.direction_rules.len());
    println!("prob table:      {} rules (+1 default)", set.prob_rows.len());
    println!("inference table: {} rules", set.inference_rules.len());
    Ok(())
}

fn cmd_simulate(args: SimulateArgs, cfg: &FileConfig) -> CliResult<()> {
    let mut sets = Vec::with_capacity(args.rules.len());
    for path in &args.rules {
        if !path.exists() {
            return Err(usage(format!("--rules: no such file: {}", path.display())));
        }
        sets.push(compiler::read_rules_file(path).stage("rule load")?);
    }
    let trace = read_trace(&args.trace, "--trace", &args.lan_prefix)?;
    let sim_cfg = SimConfig {
        jobs: cfg.resolve(args.jobs, "jobs", 1)?,
        convention: if args.trigger_closes {
            TimeoutConvention::TriggerCloses
        } else {
            TimeoutConvention::TriggerOpens
        },
        debug_window_checks: args.debug_checks,
    };
    let out = sim::run_trace(&trace, &sets, &sim_cfg).stage("simulation")?;
    sim::write_detections_csv(&out.merged_detections(), &args.out)
        .stage("detections write")?;
    println!("detections written to {}", args.out.display());
    println!("{}", out.stats);
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs, cfg: &FileConfig) -> CliResult<()> {
    if !args.detections.exists() {
        return Err(usage(format!("--detections: no such file: {}", args.detections.display())));
    }
    let t_w_us = cfg.resolve(args.tw_us, "tw-us", 1_000_000)?;
    let detections = sim::read_detections_csv(&args.detections).stage("detections load")?;
    let trace = read_trace(&args.trace, "--trace", &[])?;

    let devices: Vec<String> = match &args.device_id {
        Some(id) => vec![id.clone()],
        None => {
            let mut ids: Vec<String> = detections.iter().map(|d| d.device_id.clone()).collect();
            ids.sort();
            ids.dedup();
            ids
        }
    };
    if devices.is_empty() {
        return Err(CliError::Stage(anyhow::anyhow!(
            "stage evaluation: no detections to score; pass --device-id to force a device"
        )));
    }

    let mut rows = Vec::new();
    for device_id in &devices {
        if harness::extract_device_trace(&trace, device_id).is_empty() {
            return Err(CliError::Stage(anyhow::anyhow!(
                "stage evaluation: trace {} carries no packets labelled {device_id}",
                args.trace.display()
            )));
        }
        let truth =
            harness::ground_truth_windows(&trace, device_id, t_w_us).stage("ground truth")?;
        let report = harness::evaluate(device_id, &detections, &truth).stage("evaluation")?;
        println!("{report}");
        rows.push(report.csv_row());
    }
    if let Some(out) = &args.out {
        let mut text = String::from(EvalReport::CSV_HEADER);
        text.push('\n');
        for row in rows {
            text.push_str(&row);
            text.push('\n');
        }
        std::fs::write(out, text)
            .with_context(|| format!("stage report write: {}", out.display()))
            .map_err(CliError::Stage)?;
        println!("report written to {}", out.display());
    }
    Ok(())
}

fn cmd_generate_device(args: GenerateDeviceArgs, cfg: &FileConfig) -> CliResult<()> {
    let mut sizes = Vec::with_capacity(args.sizes.len());
    for raw in &args.sizes {
        sizes.push(
            DirectionalPacketSize::from_value(*raw)
                .map_err(|e| usage(format!("--sizes: {e}")))?,
        );
    }
    let spec = DeviceSpec {
        device_id: args.device_id.clone(),
        lan_ip: cfg.resolve(args.lan_ip, "lan-ip", Ipv4Addr::new(10, 0, 0, 2))?,
        lan_port: 40_000,
        bursts: vec![BurstSpec {
            sizes,
            period_us: args.period_us,
            jitter: cfg.resolve(args.jitter, "jitter", 0.01)?,
            service_ip: cfg.resolve(args.service_ip, "service-ip", Ipv4Addr::new(52, 80, 1, 1))?,
            service_port: cfg.resolve(args.service_port, "service-port", 443)?,
            proto: deviceradar::trace::L4Proto::Tcp,
        }],
    };
    let seed = cfg.resolve(args.seed, "seed", 1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trace = harness::generate_synthetic_device(&spec, args.duration_us, &mut rng)
        .stage("device generation")?;
    write_trace(&trace, &args.out)?;
    println!("{} packets written to {}", trace.len(), args.out.display());
    Ok(())
}

fn cmd_generate_background(args: GenerateBackgroundArgs, cfg: &FileConfig) -> CliResult<()> {
    let seed = cfg.resolve(args.seed, "seed", 1)?;
    let hosts = cfg.resolve(args.hosts, "hosts", 32)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trace = harness::generate_synthetic_background(
        args.rate_pps,
        &harness::default_size_bands(),
        hosts,
        args.duration_us,
        &mut rng,
    )
    .stage("background generation")?;
    write_trace(&trace, &args.out)?;
    println!("{} packets written to {}", trace.len(), args.out.display());
    Ok(())
}

fn cmd_mix(args: MixArgs, cfg: &FileConfig) -> CliResult<()> {
    let mut iot = Vec::with_capacity(args.iot.len());
    for path in &args.iot {
        iot.push(read_trace(path, "--iot", &[])?);
    }
    let background = read_trace(&args.background, "--background", &[])?;
    let defaults = MixConfig::default();
    let mix_cfg = MixConfig {
        mode: match args.mode.as_str() {
            "nat" => MixMode::Nat,
            "vpn" => MixMode::Vpn,
            other => return Err(usage(format!("--mode: unknown mode {other:?}"))),
        },
        nat_ip: cfg.resolve(args.nat_ip, "nat-ip", defaults.nat_ip)?,
        vpn_overhead_bytes: cfg.resolve(args.vpn_overhead, "vpn-overhead", defaults.vpn_overhead_bytes)?,
        rng_seed: cfg.resolve(args.seed, "seed", defaults.rng_seed)?,
        ..defaults
    };
    let mixed = harness::mix_traces(&iot, &background, &mix_cfg).stage("mixing")?;
    write_trace(&mixed, &args.out)?;
    println!("{} packets written to {}", mixed.len(), args.out.display());
    Ok(())
}
