//! `cloudsched`: run the scheduler daemon, talk to it, or simulate.
//!
//! Exit codes: 0 ok, 1 usage, 2 configuration, 3 runtime. The first line of
//! every error on stderr is `error: <kind>: <message>` on one line.

mod daemon;
mod ipc;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use cloudsched::config::{load_general, DEFAULT_SOCKET};
use cloudsched::sim::{run_scenario_with, trace_jsonl, RunOptions, Scenario};

use ipc::{Request, Response, ShutdownMode};

#[derive(Parser)]
#[command(name = "cloudsched", version, about = "Boots VMs on IaaS clouds to match a batch job queue")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Start the scheduler daemon in the foreground.
    Run {
        #[arg(short = 'c', long = "config")]
        config: PathBuf,
        #[arg(short = 'r', long = "resources")]
        resources: PathBuf,
    },
    /// Submit a job description file to a running daemon.
    Submit {
        #[arg(short = 'f', long = "file")]
        file: PathBuf,
        #[arg(short = 'u', long = "user")]
        user: String,
        /// Simulated run time of each job.
        #[arg(short = 'd', long = "duration", default_value_t = 3600)]
        duration_s: u64,
        #[command(flatten)]
        socket: SocketArg,
    },
    /// Print VM and user tables.
    Status {
        /// Read a snapshot file instead of asking the daemon.
        #[arg(long)]
        snapshot: Option<PathBuf>,
        #[command(flatten)]
        socket: SocketArg,
    },
    /// Stop the daemon.
    Shutdown {
        /// Save state and leave VMs running.
        #[arg(long, conflicts_with = "kill_all", required_unless_present = "kill_all")]
        persist: bool,
        /// Shut every VM down first.
        #[arg(long)]
        kill_all: bool,
        #[command(flatten)]
        socket: SocketArg,
    },
    /// Re-read the cloud resource file.
    Reload {
        #[command(flatten)]
        socket: SocketArg,
    },
    /// Run a scenario on the virtual clock and write metrics.
    Simulate {
        #[arg(short = 's', long = "scenario")]
        scenario: PathBuf,
        #[arg(short = 'o', long = "out")]
        out: PathBuf,
        /// Check invariants every cycle (slower).
        #[arg(long)]
        check: bool,
    },
}

#[derive(Args)]
struct SocketArg {
    #[arg(long, default_value = DEFAULT_SOCKET)]
    socket: PathBuf,
}

struct Failure {
    code: u8,
    kind: &'static str,
    message: String,
}

impl Failure {
    fn config(message: impl ToString) -> Self {
        Failure { code: 2, kind: "config", message: message.to_string() }
    }
    fn runtime(kind: &'static str, message: impl ToString) -> Self {
        Failure { code: 3, kind, message: message.to_string() }
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn call(socket: &Path, request: Request) -> Result<Response, Failure> {
    match ipc::call(socket, &request) {
        Ok(Response::Error { kind, message }) => {
            let code = if kind == "config" { 2 } else { 3 };
            Err(Failure { code, kind: "daemon", message: format!("{kind}: {message}") })
        }
        Ok(r) => Ok(r),
        Err(e) => Err(Failure::runtime("connect", format!("{}: {e}", socket.display()))),
    }
}

fn simulate(scenario: &Path, out: &Path, check: bool) -> Result<(), Failure> {
    let scn = Scenario::from_file(scenario).map_err(Failure::config)?;
    let started = Instant::now();
    let result = run_scenario_with(&scn, &RunOptions { check, ..Default::default() })
        .map_err(|e| Failure::runtime("simulate", e))?;
    let wall = started.elapsed();
    std::fs::create_dir_all(out).map_err(|e| Failure::runtime("io", format!("{}: {e}", out.display())))?;
    let write = |name: &str, text: String| {
        let p = out.join(name);
        std::fs::write(&p, text).map_err(|e| Failure::runtime("io", format!("{}: {e}", p.display())))
    };
    let metrics = serde_json::to_string_pretty(&result.metrics).expect("metrics serialize");
    write("metrics.json", metrics + "\n")?;
    write("trace.jsonl", trace_jsonl(&result.trace))?;
    write("vm_counts.csv", result.metrics.vm_counts_csv())?;
    let m = &result.metrics;
    println!(
        "{} of {} jobs completed, makespan {:.2}h, {:.1} core-hours, {} boots, {} kills, {} cycles, {:.2}s wall",
        m.jobs_completed,
        m.jobs_submitted,
        m.makespan_hours(),
        m.core_hours,
        m.boots,
        m.kills,
        m.cycles,
        wall.as_secs_f64()
    );
    if !result.violations.is_empty() {
        return Err(Failure::runtime(
            "invariant",
            format!("{} violations, first: {}", result.violations.len(), result.violations[0]),
        ));
    }
    Ok(())
}

fn execute(command: Command) -> Result<(), Failure> {
    match command {
        Command::Run { config, resources } => {
            let general = load_general(&config).map_err(Failure::config)?;
            let socket = general.socket.clone();
            let d = daemon::Daemon::start(general, &resources).map_err(|e| match e {
                daemon::DaemonError::Config(_) => Failure::config(e),
                _ => Failure::runtime("persist", e),
            })?;
            daemon::serve(d, &socket).map_err(|e| Failure::runtime("daemon", e))
        }
        Command::Submit { file, user, duration_s, socket } => {
            let submit = std::fs::read_to_string(&file).map_err(|e| Failure {
                code: 1,
                kind: "usage",
                message: format!("{}: {e}", file.display()),
            })?;
            if let Response::Submitted { job_ids } = call(&socket.socket, Request::Submit { user, submit, duration_s })?
            {
                match (job_ids.first(), job_ids.last()) {
                    (Some(a), Some(b)) if a != b => println!("submitted {} jobs: {a}-{b}", job_ids.len()),
                    (Some(a), _) => println!("submitted job {a}"),
                    _ => println!("submitted 0 jobs"),
                }
            }
            Ok(())
        }
        Command::Status { snapshot: Some(path), .. } => {
            let state = cloudsched::persist::load(&path).map_err(|e| Failure::runtime("snapshot", e))?;
            print!("{}", cloudsched::status::render(&state, state.now));
            Ok(())
        }
        Command::Status { snapshot: None, socket } => {
            if let Response::Status { text } = call(&socket.socket, Request::Status)? {
                print!("{text}");
            }
            Ok(())
        }
        Command::Shutdown { persist, kill_all: _, socket } => {
            let mode = if persist { ShutdownMode::Persist } else { ShutdownMode::KillAll };
            if let Response::ShutDown { shutdowns, failures, snapshot } =
                call(&socket.socket, Request::Shutdown { mode })?
            {
                println!("shut down {} VMs", shutdowns.len());
                if let Some(p) = snapshot {
                    println!("state saved to {p}");
                }
                if !failures.is_empty() {
                    return Err(Failure::runtime(
                        "shutdown",
                        format!("{} VMs failed: {}", failures.len(), failures.join("; ")),
                    ));
                }
            }
            Ok(())
        }
        Command::Reload { socket } => {
            if let Response::Reloaded { clusters } = call(&socket.socket, Request::Reload)? {
                println!("reloaded {clusters} clusters");
            }
            Ok(())
        }
        Command::Simulate { scenario, out, check } => simulate(&scenario, &out, check),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let rendered = e.render().to_string();
            let first = rendered.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error: usage: {}", one_line(first));
            for line in rendered.lines().skip(1) {
                eprintln!("{line}");
            }
            return ExitCode::from(1);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}: {}", f.kind, one_line(&f.message));
            ExitCode::from(f.code)
        }
    }
}
