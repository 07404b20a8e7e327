//! Subcommand implementations.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use adaptex::config::{validate_config, BanditConfig};
use adaptex::par::Execution;
use adaptex::pipeline::{self, BatchLog, FlushPolicy};
use adaptex::sampler::SamplerSettings;
use adaptex::simulator::{self, output, Environment, Grid, PipelineParams, SimError, Simulation, Storage, SweepRow};
use adaptex::store::StoreError;
use anyhow::{anyhow, Context};
use serde::de::DeserializeOwned;
use sha2::{Digest, Sha256};

use crate::service::{recorded_flush_policy, record_flush_policy, DataDir, Service, ServiceOptions};

/// Exit code 1 for bad input, 2 for everything else.
#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "{m}"),
            CliError::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::InvalidConfig(v) => {
                CliError::Validation(v.0.iter().map(|v| format!("violation: {v}")).collect::<Vec<_>>().join("\n"))
            }
            StoreError::UnknownBandit(_) | StoreError::ImmutableFieldChanged(_) | StoreError::AlreadyFrozen(_) => {
                CliError::Validation(e.to_string())
            }
            other => CliError::Runtime(other.into()),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Store(s) => s.into(),
            SimError::InvalidEnvironment(_)
            | SimError::UnknownGridParam(_)
            | SimError::BadGridValue { .. }
            | SimError::UnknownControlArm(_) => CliError::Validation(e.to_string()),
            other => CliError::Runtime(other.into()),
        }
    }
}

pub type CliResult = Result<(), CliError>;

fn read_json<T: DeserializeOwned>(path: &Path, what: &str) -> Result<T, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Validation(format!("reading {what} {}: {e}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::Validation(format!("parsing {what} {}: {e}", path.display())))
}

fn read_config(path: &Path) -> Result<BanditConfig, CliError> {
    let config: BanditConfig = read_json(path, "config")?;
    validate_config(&config).map_err(|v| StoreError::InvalidConfig(v))?;
    Ok(config)
}

fn sha256_hex(path: &Path) -> anyhow::Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

fn print_checksums(files: &[PathBuf]) -> anyhow::Result<()> {
    for f in files {
        println!("{}  {}", sha256_hex(f)?, f.display());
    }
    Ok(())
}

fn print_json(v: &impl serde::Serialize) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

pub fn create_bandit(data: &DataDir, config_path: &Path) -> CliResult {
    let config = read_config(config_path)?;
    let store = data.open_store(true)?;
    let out = store.put_config(config.clone())?;
    print_json(&serde_json::json!({
        "bandit_id": config.bandit_id,
        "created": out.created,
        "config_version": out.config_version,
        "params_version": out.params_version,
    }))?;
    Ok(())
}

pub fn freeze(data: &DataDir, bandit_id: &str) -> CliResult {
    let store = data.open_store(true)?;
    let (config_version, already_frozen) = match store.freeze(bandit_id) {
        Ok(v) => (v, false),
        Err(StoreError::AlreadyFrozen(_)) => (store.snapshot(bandit_id)?.config_version, true),
        Err(e) => return Err(e.into()),
    };
    print_json(&serde_json::json!({
        "bandit_id": bandit_id,
        "config_version": config_version,
        "already_frozen": already_frozen,
    }))?;
    Ok(())
}

pub struct SimulateArgs {
    pub config: PathBuf,
    pub env: PathBuf,
    pub horizon: u64,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub pipeline: Option<PathBuf>,
    pub plots: bool,
    pub latency: bool,
}

fn pipeline_params(path: &Option<PathBuf>) -> Result<PipelineParams, CliError> {
    match path {
        Some(p) => read_json(p, "pipeline params"),
        None => Ok(PipelineParams::default()),
    }
}

pub fn simulate(data: &DataDir, args: &SimulateArgs) -> CliResult {
    let config = read_config(&args.config)?;
    let env: Environment = read_json(&args.env, "environment")?;
    let params = pipeline_params(&args.pipeline)?;
    let id = config.bandit_id.clone();
    let mut sim = Simulation::new(config, env, args.seed, params.clone(), Storage::Dir(data.root.clone()))?;
    record_flush_policy(&data.logs(), &id, params.flush)?;
    sim.run(args.horizon)?;
    let out = sim.finish()?;
    let dir = args.out.clone().unwrap_or_else(|| data.reports());
    let files = output::write_run(&dir, &format!("{id}-seed{}", args.seed), &out, args.plots, args.latency)?;
    let r = &out.report;
    println!(
        "{id}: horizon {} final regret {:.3} mean reward {:.4} best-arm fraction {:.3} batches {}",
        r.horizon, r.final_regret, r.mean_reward, r.best_arm_fraction, r.counters.batches
    );
    print_checksums(&files)?;
    Ok(())
}

pub struct SweepArgs {
    pub config: PathBuf,
    pub env: PathBuf,
    pub grid: PathBuf,
    pub seeds: u64,
    pub horizon: u64,
    pub out: Option<PathBuf>,
    pub pipeline: Option<PathBuf>,
    pub sequential: bool,
}

pub fn sweep(data: &DataDir, args: &SweepArgs) -> CliResult {
    let config = read_config(&args.config)?;
    let env: Environment = read_json(&args.env, "environment")?;
    let grid: Grid = read_json(&args.grid, "grid")?;
    let params = pipeline_params(&args.pipeline)?;
    let seeds: Vec<u64> = (0..args.seeds).collect();
    let exec = if args.sequential { Execution::Sequential } else { Execution::Parallel.available() };
    let rows: Vec<SweepRow> = simulator::sweep(&config, &env, &grid, &seeds, args.horizon, &params, exec)?;
    let dir = args.out.clone().unwrap_or_else(|| data.reports());
    fs::create_dir_all(&dir)?;
    let stem = format!("{}-sweep", config.bandit_id);
    let csv = dir.join(format!("{stem}.csv"));
    fs::write(&csv, output::sweep_csv(&rows))?;
    let rows_json = dir.join(format!("{stem}.json"));
    fs::write(&rows_json, serde_json::to_vec_pretty(&rows).context("serializing sweep rows")?)?;
    let svg = dir.join(format!("{stem}.regret.svg"));
    fs::write(&svg, output::regret_svg(&rows.iter().map(|r| &r.report).collect::<Vec<_>>()))?;
    println!("{}: {} runs", config.bandit_id, rows.len());
    print_checksums(&[csv, rows_json, svg])?;
    Ok(())
}

pub fn inspect(data: &DataDir, bandit_id: &str) -> CliResult {
    let store = data.open_store(false)?;
    let snap = store.snapshot(bandit_id)?;
    let logs = data.logs();
    let (imps, rews) = pipeline::read_event_logs(&logs, bandit_id)?;
    let batches = BatchLog::read(&logs, bandit_id)?;
    let flush = recorded_flush_policy(&logs, bandit_id)?.unwrap_or_default();
    let (_, join) = pipeline::replay(&snap.config, flush, imps.clone(), rews.clone(), false);
    print_json(&serde_json::json!({
        "config": &*snap.config,
        "config_version": snap.config_version,
        "params_version": snap.params.version,
        "train_seq": snap.params.train_seq,
        "updated_at": snap.params.updated_at,
        "counters": {
            "impressions_logged": imps.len(),
            "rewards_logged": rews.len(),
            "batches_logged": batches.len(),
            "join": join,
            "pending": join.impressions - join.examples() - join.dropped,
        },
    }))?;
    Ok(())
}

pub fn replay(data: &DataDir, bandit_id: &str, flush: Option<FlushPolicy>, open: bool) -> CliResult {
    let store = data.open_store(false)?;
    let config = store.get_config(bandit_id)?;
    let logs = data.logs();
    let policy = match flush {
        Some(p) => p,
        None => recorded_flush_policy(&logs, bandit_id)?.unwrap_or_default(),
    };
    let report = pipeline::replay_dir(&config, policy, &logs, !open)?;
    println!("batches identical: {}", report.identical);
    println!("recorded {} derived {}", report.recorded, report.derived);
    let c = report.counters;
    println!(
        "impressions {} matched {} defaulted {} dropped {} late_rewards {}",
        c.impressions, c.matched, c.defaulted, c.dropped, c.late_rewards
    );
    if let Some(seq) = report.first_mismatch {
        println!("first mismatch at batch {seq}");
    }
    if report.identical {
        Ok(())
    } else {
        Err(CliError::Runtime(anyhow!("replayed batches differ from the batch log")))
    }
}

pub struct ServeArgs {
    pub host: String,
    pub port: u16,
    pub settings: SamplerSettings,
    pub flush: FlushPolicy,
    pub pump_every: Duration,
    pub seed: Option<u64>,
    pub fsync: bool,
}

pub fn serve(data: &DataDir, args: ServeArgs) -> CliResult {
    // request ids derive from the seed, so a fresh one per process keeps them
    // unique across restarts on the same logs
    let seed = args.seed.unwrap_or_else(|| {
        let t = std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).unwrap_or_default();
        t.as_nanos() as u64 ^ u64::from(std::process::id())
    });
    let service = Service::open(
        data.clone(),
        ServiceOptions {
            sampler: args.settings,
            flush: args.flush,
            seed,
            fsync: args.fsync,
        },
    )?;
    let stop = Arc::new(AtomicBool::new(false));
    let workers = service.spawn_background(args.pump_every, stop.clone());
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    let addr = format!("{}:{}", args.host, args.port);
    let served = runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(&addr).await.with_context(|| format!("binding {addr}"))?;
        log::info!("listening on {}", listener.local_addr()?);
        axum::serve(listener, crate::http::router(service.clone()))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        anyhow::Ok(())
    });
    stop.store(true, Ordering::SeqCst);
    for w in workers {
        let _ = w.join();
    }
    served?;
    Ok(())
}
