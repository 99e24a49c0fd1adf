use std::io::Write;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use autoeval_core::metrics::{compare_tables, read_rate_table, ReportConfig, ReportStore};
use autoeval_core::model::{builtin_tasks, JobId, TaskSpec};
use autoeval_core::sim::{
    spawn_builtin_classifier_server, spawn_builtin_policy_server, SceneGeometry, SyntheticPolicySpec,
    IDENTITY_CONFUSION,
};
use autoeval_service::api::{self, JobView, Submitted, SubmitBody, DEFAULT_TRIALS};
use autoeval_service::{Runtime, ServiceConfig};
use clap::{Parser, Subcommand};

const DEFAULT_SERVER: &str = "http://127.0.0.1:8080";

#[derive(Parser)]
#[command(name = "autoeval", version, about = "Autonomous robot policy evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the evaluation service.
    Serve {
        #[arg(long)]
        config: PathBuf,
        /// Override `api.bind_address`.
        #[arg(long)]
        bind: Option<SocketAddr>,
    },
    /// Check a service config and exit.
    CheckConfig {
        #[arg(long)]
        config: PathBuf,
    },
    /// Serve a builtin synthetic policy for one task.
    Simcell {
        #[arg(long)]
        task: String,
        #[arg(long, default_value_t = 0)]
        port: u16,
        #[arg(long, default_value_t = 0.5)]
        success_prob: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Steps a succeeding episode needs; defaults to half the budget.
        #[arg(long)]
        steps: Option<u32>,
        /// Also serve a perfect classifier for the task on this port.
        #[arg(long)]
        classifier_port: Option<u16>,
    },
    /// Queue an evaluation job.
    Submit {
        #[arg(long)]
        task: String,
        #[arg(long)]
        policy: String,
        #[arg(long, default_value_t = DEFAULT_TRIALS)]
        trials: u32,
        #[arg(long, default_value = DEFAULT_SERVER)]
        server: String,
        #[arg(long)]
        submitter: Option<String>,
        /// Poll until the job finishes and print it.
        #[arg(long)]
        wait: bool,
    },
    /// Offline metrics.
    Metrics {
        #[command(subcommand)]
        command: MetricsCommand,
    },
    /// Inspect reports.
    Report {
        #[command(subcommand)]
        command: ReportCommand,
    },
}

#[derive(Subcommand)]
enum MetricsCommand {
    /// Pearson and MMRV between two success-rate tables (CSV: task column,
    /// then one column per policy).
    Consistency {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        cand: PathBuf,
    },
}

#[derive(Subcommand)]
enum ReportCommand {
    Show {
        job_id: String,
        #[arg(long, conflicts_with = "reports")]
        server: Option<String>,
        /// Read from a report directory instead of a server.
        #[arg(long)]
        reports: Option<PathBuf>,
    },
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(String),
}

impl<E: std::fmt::Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let rt = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    };
    match rt.block_on(run(cli.command)) {
        Ok(code) => code,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(path: &std::path::Path) -> Result<ServiceConfig, Failure> {
    ServiceConfig::load(path).map_err(|e| Failure::Usage(format!("config {}: {e}", path.display())))
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<(), Failure> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn builtin_task(name: &str) -> Result<TaskSpec, Failure> {
    let tasks = builtin_tasks();
    let known: Vec<_> = tasks.iter().map(|t| t.task_id.to_string()).collect();
    tasks
        .into_iter()
        .find(|t| t.task_id.as_str() == name)
        .ok_or_else(|| Failure::Usage(format!("unknown task {name:?}; known: {}", known.join(", "))))
}

async fn shutdown_signal() {
    let _ = tokio::signal::ctrl_c().await;
}

async fn run(command: Command) -> Result<ExitCode, Failure> {
    match command {
        Command::Serve { config, bind } => {
            let mut config = load_config(&config)?;
            if let Some(bind) = bind {
                config.api.bind_address = bind;
            }
            let listener = tokio::net::TcpListener::bind(config.api.bind_address).await?;
            let runtime = Runtime::start(config).await?;
            println!("listening on http://{}", listener.local_addr()?);
            std::io::stdout().flush()?;
            axum::serve(listener, api::router(runtime.clone())).with_graceful_shutdown(shutdown_signal()).await?;
            runtime.shutdown();
            Ok(ExitCode::SUCCESS)
        }
        Command::CheckConfig { config } => {
            load_config(&config)?;
            println!("ok");
            Ok(ExitCode::SUCCESS)
        }
        Command::Simcell { task, port, success_prob, seed, steps, classifier_port } => {
            let spec = builtin_task(&task)?;
            let geometry = SceneGeometry::default();
            let policy = SyntheticPolicySpec::new(success_prob, steps.unwrap_or(spec.max_steps / 2)).with_seed(seed);
            policy.validate(&spec).map_err(|e| Failure::Usage(e.to_string()))?;
            let server =
                spawn_builtin_policy_server(policy, spec.clone(), geometry.clone(), ([127, 0, 0, 1], port).into()).await?;
            println!("policy {}", server.endpoint.base_url);
            let _classifier = match classifier_port {
                Some(p) => {
                    let c = spawn_builtin_classifier_server(IDENTITY_CONFUSION, spec, geometry, seed, ([127, 0, 0, 1], p).into())
                        .await?;
                    println!("classifier {}", c.endpoint.base_url);
                    Some(c)
                }
                None => None,
            };
            std::io::stdout().flush()?;
            shutdown_signal().await;
            Ok(ExitCode::SUCCESS)
        }
        Command::Submit { task, policy, trials, server, submitter, wait } => {
            let http = reqwest::Client::new();
            let server = server.trim_end_matches('/');
            let body = SubmitBody { task_id: task.as_str().into(), policy_url: policy, num_trials: Some(trials), submitter };
            let resp = http.post(format!("{server}/api/jobs")).json(&body).send().await?;
            if !resp.status().is_success() {
                let status = resp.status();
                return Err(Failure::Runtime(format!("{status}: {}", resp.text().await.unwrap_or_default())));
            }
            let submitted: Submitted = resp.json().await?;
            if !wait {
                println!("{}", submitted.job_id);
                return Ok(ExitCode::SUCCESS);
            }
            loop {
                let job: JobView =
                    http.get(format!("{server}/api/jobs/{}", submitted.job_id)).send().await?.error_for_status()?.json().await?;
                if job.job.status.is_terminal() {
                    let ok = job.job.status == autoeval_core::model::JobStatus::Completed;
                    let mut job = job;
                    job.job.episodes.clear();
                    print_json(&job)?;
                    return Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE });
                }
                tokio::time::sleep(Duration::from_millis(500)).await;
            }
        }
        Command::Metrics { command: MetricsCommand::Consistency { reference, cand } } => {
            let reference = read_rate_table(&reference)?;
            let cand = read_rate_table(&cand)?;
            print_json(&compare_tables(&reference, &cand)?)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Report { command: ReportCommand::Show { job_id, server, reports } } => {
            let report = match reports {
                Some(dir) => {
                    let store = ReportStore::new(dir, ReportConfig::default())?;
                    serde_json::to_value(store.report(&JobId::from(job_id.as_str()))?)?
                }
                None => {
                    let server = server.unwrap_or_else(|| DEFAULT_SERVER.into());
                    let url = format!("{}/api/reports/{job_id}", server.trim_end_matches('/'));
                    reqwest::get(url).await?.error_for_status()?.json::<serde_json::Value>().await?
                }
            };
            print_json(&report)?;
            Ok(ExitCode::SUCCESS)
        }
    }
}
