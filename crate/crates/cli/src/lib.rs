//! Operator CLI and HTTP decision service.

pub mod commands;
pub mod http;
pub mod service;

use std::path::PathBuf;
use std::time::Duration;

use adaptex::pipeline::FlushPolicy;
use adaptex::sampler::SamplerSettings;
use clap::{Args, Parser, Subcommand};

use commands::{CliResult, ServeArgs, SimulateArgs, SweepArgs};
use service::DataDir;

#[derive(Debug, Parser)]
#[command(name = "adaptex", version, about = "Self-service bandit platform")]
pub struct Cli {
    /// Data directory holding store/, logs/ and reports/.
    #[arg(long, global = true, default_value = "data", env = "ADAPTEX_DATA_DIR")]
    pub data_dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct FlushArgs {
    /// Examples per training batch.
    #[arg(long, default_value_t = FlushPolicy::default().max_examples)]
    pub max_examples: usize,
    /// Milliseconds of event time a partial batch may wait.
    #[arg(long, default_value_t = FlushPolicy::default().max_wait)]
    pub max_wait_ms: u64,
}

impl FlushArgs {
    fn policy(&self) -> FlushPolicy {
        FlushPolicy {
            max_examples: self.max_examples,
            max_wait: self.max_wait_ms,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the sampler, pipeline and trainer behind the HTTP API.
    Serve {
        /// Address to bind.
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Port to listen on.
        #[arg(long, env = "SAMPLER_PORT", default_value_t = 8080)]
        port: u16,
        /// Seconds between parameter snapshot refreshes.
        #[arg(long, env = "SAMPLER_REFRESH_SECS", default_value_t = 10)]
        refresh_secs: u64,
        /// Session stickiness in seconds.
        #[arg(long, env = "SAMPLER_TTL_SECS", default_value_t = 1800)]
        ttl_secs: u64,
        /// Sessions held in the consistency cache.
        #[arg(long, env = "SAMPLER_CACHE_CAP", default_value_t = 100_000)]
        cache_cap: usize,
        /// Concurrent sample requests before shedding load.
        #[arg(long, default_value_t = 1024)]
        max_in_flight: usize,
        /// Milliseconds between pipeline pumps.
        #[arg(long, default_value_t = 1000)]
        pump_ms: u64,
        #[command(flatten)]
        flush: FlushArgs,
        /// Sampler seed; defaults to one derived from the time and pid.
        #[arg(long)]
        seed: Option<u64>,
        /// fsync every store and event-log append.
        #[arg(long, default_value_t = false)]
        fsync: bool,
    },
    /// Create or update a bandit from a JSON config file.
    CreateBandit {
        /// Bandit config JSON file.
        #[arg(long)]
        config: PathBuf,
    },
    /// Switch a bandit to exploit-only serving.
    Freeze {
        /// Bandit to act on.
        #[arg(long)]
        bandit_id: String,
    },
    /// Run a closed-loop simulation through the full pipeline.
    Simulate {
        /// Bandit config JSON file.
        #[arg(long)]
        config: PathBuf,
        /// Environment JSON file.
        #[arg(long)]
        env: PathBuf,
        /// Number of decisions; one simulated second each.
        #[arg(long)]
        horizon: u64,
        /// Seed for the sampler and the environment.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Report directory [default: <data-dir>/reports]
        #[arg(long)]
        out: Option<PathBuf>,
        /// Pipeline params JSON file (flush policy, refresh period, ...).
        #[arg(long)]
        pipeline: Option<PathBuf>,
        /// Skip the SVG plots.
        #[arg(long, default_value_t = false)]
        no_plots: bool,
        /// Also write the wall-clock decision latency histogram.
        #[arg(long, default_value_t = false)]
        latency: bool,
    },
    /// Run a parameter grid over seeds 0..N and write a CSV table.
    Sweep {
        /// Grid JSON file: parameter name to list of values.
        #[arg(long)]
        grid: PathBuf,
        /// Seeds per grid point, 0..N.
        #[arg(long)]
        seeds: u64,
        /// Base bandit config JSON file.
        #[arg(long)]
        config: PathBuf,
        /// Environment JSON file.
        #[arg(long)]
        env: PathBuf,
        /// Decisions per run.
        #[arg(long)]
        horizon: u64,
        /// Report directory [default: <data-dir>/reports]
        #[arg(long)]
        out: Option<PathBuf>,
        /// Pipeline params JSON file.
        #[arg(long)]
        pipeline: Option<PathBuf>,
        /// Run grid points one after another instead of in parallel.
        #[arg(long, default_value_t = false)]
        sequential: bool,
    },
    /// Print a bandit's config, parameter version and log counters.
    Inspect {
        /// Bandit to act on.
        #[arg(long)]
        bandit_id: String,
    },
    /// Re-derive batches from the event logs and compare with the batch log.
    Replay {
        /// Bandit to act on.
        #[arg(long)]
        bandit_id: String,
        /// Override the recorded flush policy's batch size.
        #[arg(long)]
        max_examples: Option<usize>,
        /// Override the recorded flush policy's wait.
        #[arg(long)]
        max_wait_ms: Option<u64>,
        /// Treat the logs as still open: do not flush pending impressions.
        #[arg(long, default_value_t = false)]
        open: bool,
    },
}

pub fn run(cli: Cli) -> CliResult {
    let data = DataDir::new(&cli.data_dir);
    match cli.command {
        Command::Serve {
            host,
            port,
            refresh_secs,
            ttl_secs,
            cache_cap,
            max_in_flight,
            pump_ms,
            flush,
            seed,
            fsync,
        } => commands::serve(
            &data,
            ServeArgs {
                host,
                port,
                settings: SamplerSettings {
                    refresh_period: Duration::from_secs(refresh_secs),
                    ttl: Duration::from_secs(ttl_secs),
                    cache_capacity: cache_cap,
                    max_in_flight,
                },
                flush: flush.policy(),
                pump_every: Duration::from_millis(pump_ms),
                seed,
                fsync,
            },
        ),
        Command::CreateBandit { config } => commands::create_bandit(&data, &config),
        Command::Freeze { bandit_id } => commands::freeze(&data, &bandit_id),
        Command::Simulate {
            config,
            env,
            horizon,
            seed,
            out,
            pipeline,
            no_plots,
            latency,
        } => commands::simulate(
            &data,
            &SimulateArgs {
                config,
                env,
                horizon,
                seed,
                out,
                pipeline,
                plots: !no_plots,
                latency,
            },
        ),
        Command::Sweep {
            grid,
            seeds,
            config,
            env,
            horizon,
            out,
            pipeline,
            sequential,
        } => commands::sweep(
            &data,
            &SweepArgs {
                config,
                env,
                grid,
                seeds,
                horizon,
                out,
                pipeline,
                sequential,
            },
        ),
        Command::Inspect { bandit_id } => commands::inspect(&data, &bandit_id),
        Command::Replay {
            bandit_id,
            max_examples,
            max_wait_ms,
            open,
        } => {
            let flush = match (max_examples, max_wait_ms) {
                (None, None) => None,
                (e, w) => {
                    let d = FlushPolicy::default();
                    Some(FlushPolicy {
                        max_examples: e.unwrap_or(d.max_examples),
                        max_wait: w.unwrap_or(d.max_wait),
                    })
                }
            };
            commands::replay(&data, &bandit_id, flush, open)
        }
    }
}
