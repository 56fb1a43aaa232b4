//! `edgepark`: run the gateway simulator, edge agent and cloud hub as
//! separate processes, or drive all three in-process with the harness.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::{Arc, Mutex};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use edgepark::agent::{AgentConfig, BackoffPolicy, ClockMode};
use edgepark::clock::{system_now_ms, Clock, WarpedClock};
use edgepark::gateway::{generate_trace, Fault, FaultPlan, Gateway, GatewayConfig, SensorModel, DEFAULT_BAY_COUNT};
use edgepark::harness::scenario::parse_timestamp;
use edgepark::harness::{self, ReplayOptions, ReportFormat, ScenarioConfig};
use edgepark::hub::HubStore;
use edgepark::model::EpochMs;
use edgepark::wire::{decode_line, encode_line, WireMessage};
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "edgepark", version, about = "Edge aggregation of parking-bay occupancy")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Serve a simulated sensor gateway.
    Gateway(GatewayArgs),
    /// Run the edge agent against a gateway and a hub.
    Agent(AgentArgs),
    /// Serve the cloud hub store.
    Hub(HubArgs),
    /// Query a running hub.
    Query(QueryArgs),
    /// Run a scenario end to end under a virtual clock.
    RunSim {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rebuild roll-up CSVs from an agent event log.
    Replay {
        #[arg(long)]
        log: PathBuf,
        #[arg(long, default_value_t = 86_400)]
        window_sec: u64,
        #[arg(long)]
        out: PathBuf,
        /// First window start (epoch ms, YYYY-MM-DD or RFC 3339).
        #[arg(long)]
        from: Option<String>,
        /// Last window end.
        #[arg(long)]
        to: Option<String>,
        /// Lot id for output names when the log has no events.
        #[arg(long)]
        lot_id: Option<String>,
    },
    /// Check a run directory against the oracle.
    Verify {
        #[arg(long)]
        run: PathBuf,
    },
    /// Print raw-forwarding versus aggregated upload bytes for a run.
    TrafficReport {
        #[arg(long)]
        run: PathBuf,
    },
    /// Write per-day and per-bay tables for a run.
    ExportReport {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value = "markdown")]
        format: ReportFormat,
        /// Output directory; defaults to `<run>/report`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct GatewayArgs {
    #[arg(long, default_value = "127.0.0.1:7400")]
    listen: SocketAddr,
    #[arg(long, default_value_t = DEFAULT_BAY_COUNT)]
    bays: u32,
    #[arg(long, default_value = "lot-1")]
    lot_id: String,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 45.0)]
    mean_occupied_min: f64,
    #[arg(long, default_value_t = 99.0)]
    mean_free_min: f64,
    /// Length of the generated trace in seconds.
    #[arg(long, default_value_t = 7 * 86_400)]
    duration: u64,
    #[arg(long, default_value_t = 1.0)]
    time_warp: f64,
    /// `drop:<atSec>:<durationSec>`, `duplicate:<everyN>` or `delay:<ms>`; repeatable.
    #[arg(long)]
    inject: Vec<Fault>,
    /// Simulated start time; defaults to now.
    #[arg(long)]
    start: Option<String>,
}

#[derive(Args)]
struct AgentArgs {
    #[arg(long, env = "EDGEPARK_GATEWAY", default_value = "127.0.0.1:7400")]
    gateway: String,
    #[arg(long, env = "EDGEPARK_CLOUD", default_value = "127.0.0.1:7500")]
    cloud: String,
    #[arg(long, env = "EDGEPARK_POLL_INTERVAL_SEC", default_value_t = 60)]
    poll_interval_sec: u64,
    #[arg(long, env = "EDGEPARK_ROLLUP_PERIOD_SEC", default_value_t = 86_400)]
    rollup_period_sec: u64,
    #[arg(long, env = "EDGEPARK_LOG", default_value = "agent-state/events.log")]
    log: PathBuf,
    #[arg(long, env = "EDGEPARK_CSV_DIR", default_value = "csv")]
    csv_dir: PathBuf,
    #[arg(long, env = "EDGEPARK_CLOCK", default_value = "real")]
    clock: ClockMode,
    #[arg(long, env = "EDGEPARK_TIME_WARP", default_value_t = 1.0)]
    time_warp: f64,
    /// Start of the virtual clock; defaults to now.
    #[arg(long, env = "EDGEPARK_START")]
    start: Option<String>,
    #[arg(long, env = "EDGEPARK_ACK_TIMEOUT_MS", default_value_t = 10_000)]
    ack_timeout_ms: i64,
}

#[derive(Args)]
struct HubArgs {
    #[arg(long, default_value = "127.0.0.1:7500")]
    listen: SocketAddr,
    #[arg(long, default_value = "hub-store")]
    store_dir: PathBuf,
}

#[derive(Args)]
struct QueryArgs {
    #[arg(long, default_value = "127.0.0.1:7500")]
    hub: String,
    #[arg(long)]
    lot_id: String,
    #[command(subcommand)]
    what: QueryKind,
}

#[derive(Subcommand)]
enum QueryKind {
    /// Records of the window starting at `start`.
    Daily { start: String },
    /// Seven-day report from `start`.
    Weekly { start: String },
}

/// A failed command and the exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

fn config_error(error: impl Into<anyhow::Error>) -> Failure {
    Failure { code: 2, error: error.into() }
}

fn crash(error: impl Into<anyhow::Error>) -> Failure {
    Failure { code: 3, error: error.into() }
}

type Outcome = Result<ExitCode, Failure>;

fn timestamp(s: &str) -> Result<EpochMs, Failure> {
    parse_timestamp(s).map_err(config_error)
}

fn runtime() -> Result<tokio::runtime::Runtime, Failure> {
    tokio::runtime::Builder::new_multi_thread().enable_all().build().context("starting async runtime").map_err(crash)
}

async fn ctrl_c() {
    if tokio::signal::ctrl_c().await.is_err() {
        std::future::pending::<()>().await;
    }
}

fn gateway(args: GatewayArgs) -> Outcome {
    let model =
        SensorModel { mean_occupied_min: args.mean_occupied_min, mean_free_min: args.mean_free_min, seed: args.seed };
    let mut config = GatewayConfig::new(args.lot_id, args.bays, model);
    config.listen_address = args.listen.to_string();
    config.time_warp = args.time_warp;
    config.faults = FaultPlan { faults: args.inject };
    if !(args.time_warp.is_finite() && args.time_warp > 0.0) {
        return Err(config_error(anyhow!("--time-warp must be positive")));
    }
    let duration = i64::try_from(args.duration).map_err(config_error)? * 1000;
    let trace = generate_trace(&config, duration).map_err(config_error)?;
    let start = args.start.as_deref().map(timestamp).transpose()?.unwrap_or_else(system_now_ms);
    let clock: Arc<dyn Clock> = Arc::new(WarpedClock::new(start, args.time_warp));
    eprintln!("gateway: {} bays, {} trace events, listening on {}", trace.bay_count, trace.change_count(), args.listen);
    runtime()?.block_on(async {
        let listener = tokio::net::TcpListener::bind(args.listen).await.map_err(config_error)?;
        tokio::select! {
            r = edgepark::net::serve_gateway(listener, Gateway::new(config, trace), clock, start) => r.map_err(crash)?,
            () = ctrl_c() => {}
        }
        Ok(ExitCode::SUCCESS)
    })
}

fn agent(args: AgentArgs) -> Outcome {
    let mut config = AgentConfig::new(args.log, args.csv_dir);
    config.gateway_address = args.gateway;
    config.cloud_address = args.cloud;
    config.poll_interval_sec = args.poll_interval_sec;
    config.rollup_period_sec = args.rollup_period_sec;
    config.clock_mode = args.clock;
    config.time_warp = args.time_warp;
    config.ack_timeout_ms = args.ack_timeout_ms;
    config.reconnect_backoff = BackoffPolicy::default();
    config.validate().map_err(config_error)?;
    let clock: Arc<dyn Clock> = match args.clock {
        ClockMode::Real if args.time_warp != 1.0 || args.start.is_some() => {
            return Err(config_error(anyhow!("--time-warp and --start need --clock virtual")));
        }
        ClockMode::Real => Arc::new(WarpedClock::wall()),
        ClockMode::Virtual => {
            let start = args.start.as_deref().map(timestamp).transpose()?.unwrap_or_else(system_now_ms);
            Arc::new(WarpedClock::new(start, args.time_warp))
        }
    };
    let summary = runtime()?
        .block_on(edgepark::net::run_agent(config, clock, ctrl_c()))
        .context("edge agent stopped")
        .map_err(crash)?;
    eprintln!(
        "agent stopped: {} sessions, {} updates, {} pings, {} uploads pending",
        summary.stats.sessions, summary.stats.updates, summary.stats.pings_sent, summary.pending_uploads
    );
    Ok(ExitCode::SUCCESS)
}

fn hub(args: HubArgs) -> Outcome {
    let store = HubStore::open(&args.store_dir).context("opening hub store").map_err(config_error)?;
    eprintln!("hub: {} stored windows in {}, listening on {}", store.len(), args.store_dir.display(), args.listen);
    let store = Arc::new(Mutex::new(store));
    let clock: Arc<dyn Clock> = Arc::new(WarpedClock::wall());
    runtime()?.block_on(async {
        let listener = tokio::net::TcpListener::bind(args.listen).await.map_err(config_error)?;
        tokio::select! {
            r = edgepark::net::serve_hub(listener, store, clock) => r.map_err(crash)?,
            () = ctrl_c() => {}
        }
        Ok(ExitCode::SUCCESS)
    })
}

fn query(args: QueryArgs) -> Outcome {
    let request = match args.what {
        QueryKind::Daily { start } => WireMessage::QueryDaily { lot_id: args.lot_id, window_start: timestamp(&start)? },
        QueryKind::Weekly { start } => WireMessage::QueryWeekly { lot_id: args.lot_id, week_start: timestamp(&start)? },
    };
    let reply = runtime()?.block_on(async {
        let mut stream = tokio::net::TcpStream::connect(&args.hub).await?;
        stream.write_all(encode_line(&request).as_bytes()).await?;
        let mut line = String::new();
        BufReader::new(stream).read_line(&mut line).await?;
        anyhow::Ok(line)
    });
    let line = reply.with_context(|| format!("querying hub at {}", args.hub)).map_err(crash)?;
    let msg = decode_line(&line).map_err(crash)?;
    println!("{}", line.trim_end());
    Ok(if matches!(msg, WireMessage::NotFound) { ExitCode::from(1) } else { ExitCode::SUCCESS })
}

fn run_sim(scenario: PathBuf, out: PathBuf) -> Outcome {
    let scenario = ScenarioConfig::load(&scenario).map_err(config_error)?;
    let outcome = harness::run_sim(scenario, &out).map_err(|e| match e {
        harness::HarnessError::Scenario(_) | harness::HarnessError::Invalid(_) => config_error(e),
        other => crash(other),
    })?;
    let summary = std::fs::read_to_string(outcome.paths.summary()).map_err(crash)?;
    print!("{summary}");
    if outcome.pending_uploads > 0 {
        eprintln!("warning: {} uploads still pending at the end of the run", outcome.pending_uploads);
    }
    println!("\nrun directory: {}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn replay(
    log: PathBuf,
    window_sec: u64,
    out: PathBuf,
    from: Option<String>,
    to: Option<String>,
    lot_id: Option<String>,
) -> Outcome {
    if window_sec == 0 {
        return Err(config_error(anyhow!("--window-sec must be positive")));
    }
    let opts = ReplayOptions {
        window_ms: i64::try_from(window_sec).map_err(config_error)? * 1000,
        epoch: None,
        from: from.as_deref().map(timestamp).transpose()?,
        to: to.as_deref().map(timestamp).transpose()?,
        lot_id,
    };
    let outcome =
        harness::replay_log(&log, &opts).with_context(|| format!("reading {}", log.display())).map_err(crash)?;
    let files = harness::write_replay(&outcome, &out).map_err(crash)?;
    println!("replayed {} log entries into {} CSV files in {}", outcome.entries, files.len(), out.display());
    if outcome.skipped > 0 {
        println!("skipped {} unreadable or torn lines", outcome.skipped);
    }
    Ok(ExitCode::SUCCESS)
}

fn verify(run: PathBuf) -> Outcome {
    let report = harness::verify(&run).map_err(crash)?;
    println!("{report}");
    Ok(if report.passed() { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn traffic_report(run: PathBuf) -> Outcome {
    let ledger = harness::traffic_report(&run).map_err(crash)?;
    println!("update events:       {}", ledger.event_count);
    println!("raw forwarding:      {} bytes", ledger.raw_forward_bytes);
    println!("aggregated uploads:  {} bytes ({} envelopes)", ledger.aggregated_bytes, ledger.envelope_count);
    match ledger.reduction_ratio {
        Some(r) => println!("aggregated / raw:    {r:.4}"),
        None => println!("aggregated / raw:    undefined (no update events)"),
    }
    Ok(ExitCode::SUCCESS)
}

fn export_report(run: PathBuf, format: ReportFormat, out: Option<PathBuf>) -> Outcome {
    let paths = harness::RunPaths::new(&run);
    if !paths.hub_dir().is_dir() {
        return Err(config_error(anyhow!("{} has no hub store", run.display())));
    }
    let out = out.unwrap_or_else(|| run.join("report"));
    for file in harness::export_report(&paths.hub_dir(), format, &out).map_err(crash)? {
        println!("{}", file.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let default_level = match cli.command {
        Command::Gateway(_) | Command::Agent(_) | Command::Hub(_) => "info",
        _ => "warn",
    };
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(default_level)))
        .with_writer(std::io::stderr)
        .init();

    let outcome = match cli.command {
        Command::Gateway(args) => gateway(args),
        Command::Agent(args) => agent(args),
        Command::Hub(args) => hub(args),
        Command::Query(args) => query(args),
        Command::RunSim { scenario, out } => run_sim(scenario, out),
        Command::Replay { log, window_sec, out, from, to, lot_id } => replay(log, window_sec, out, from, to, lot_id),
        Command::Verify { run } => verify(run),
        Command::TrafficReport { run } => traffic_report(run),
        Command::ExportReport { run, format, out } => export_report(run, format, out),
    };
    match outcome {
        Ok(code) => code,
        Err(Failure { code, error }) => {
            eprintln!("error: {error:#}");
            ExitCode::from(code)
        }
    }
}
