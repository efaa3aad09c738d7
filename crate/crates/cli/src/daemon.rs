//! The long-running scheduler process behind `cloudsched run`.
//!
//! One thread owns the scheduler, the embedded job queue and the simulated
//! clouds. It alternates between answering socket requests and running
//! whichever of the poller, scheduler and cleanup loops are due, so every
//! request and every loop sees the state between two whole steps.

use std::io::{BufRead, BufReader, ErrorKind, Write};
use std::os::unix::net::{UnixListener, UnixStream};
use std::path::{Path, PathBuf};
use std::time::Duration;

use cloudsched::backend::{CloudEvent, SimCloud};
use cloudsched::config::{load_clouds, ConfigError, GeneralConfig};
use cloudsched::model::{Clock, JobId, Millis, SECOND};
use cloudsched::persist::{self, PersistError};
use cloudsched::queue::JobQueue;
use cloudsched::scheduler::{CycleReport, Scheduler, ShutdownMode as Mode};
use cloudsched::submit::{descriptor_to_jobs, parse_submit};
use serde::{Deserialize, Serialize};

use crate::ipc::{Request, Response, ShutdownMode};

#[derive(Debug)]
pub enum DaemonError {
    Config(ConfigError),
    Persist(PersistError),
    Io(String),
}

impl std::fmt::Display for DaemonError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DaemonError::Config(e) => write!(f, "{e}"),
            DaemonError::Persist(e) => write!(f, "{e}"),
            DaemonError::Io(e) => f.write_str(e),
        }
    }
}

/// What lives outside the scheduler: the queue and the clouds. Persisted
/// next to the snapshot so a restarted daemon finds its jobs and VMs.
#[derive(Serialize, Deserialize)]
struct World {
    queue: JobQueue,
    cloud: SimCloud,
    next_job_id: u64,
}

fn world_path(snapshot: &Path) -> PathBuf {
    let mut p = snapshot.as_os_str().to_owned();
    p.push(".world");
    PathBuf::from(p)
}

pub struct Daemon {
    general: GeneralConfig,
    clouds_path: PathBuf,
    scheduler: Scheduler,
    queue: JobQueue,
    cloud: SimCloud,
    clock: Clock,
    next_job_id: u64,
    cloud_steps: u64,
    last_poll: Millis,
    last_schedule: Millis,
    last_cleanup: Millis,
    last_work: Millis,
}

impl Daemon {
    pub fn start(general: GeneralConfig, clouds_path: &Path) -> Result<Daemon, DaemonError> {
        let clouds = load_clouds(clouds_path).map_err(DaemonError::Config)?;
        let clusters: Vec<_> = clouds.iter().map(|c| c.cluster.clone()).collect();
        let config_err = |reason: String| {
            DaemonError::Config(ConfigError { file: clouds_path.display().to_string(), line: 0, field: None, reason })
        };

        let restored = match &general.persist_path {
            Some(p) if p.exists() => Some(persist::load(p).map_err(DaemonError::Persist)?),
            _ => None,
        };
        let mut scheduler = match restored {
            Some(mut state) => {
                log::info!("restored scheduler state at cycle {}", state.cycle);
                state.resources.reload(clusters).map_err(config_err)?;
                Scheduler::from_state(general.scheduler.clone(), state).map_err(|e| config_err(e.to_string()))?
            }
            None => Scheduler::new(general.scheduler.clone(), clusters).map_err(|e| config_err(e.to_string()))?,
        };

        let world = match &general.persist_path {
            Some(p) if world_path(p).exists() => {
                let text = std::fs::read_to_string(world_path(p)).map_err(|e| DaemonError::Io(e.to_string()))?;
                let mut w: World = serde_json::from_str(&text).map_err(|e| DaemonError::Io(e.to_string()))?;
                w.queue.reindex();
                Some(w)
            }
            _ => None,
        };
        let (queue, mut cloud, next_job_id) = match world {
            Some(w) => (w.queue, w.cloud, w.next_job_id),
            None => (JobQueue::new(), SimCloud::new(), 1),
        };
        for c in &clouds {
            if cloud.cluster(&c.cluster.name).is_none() {
                cloud.add_cluster(&c.cluster.name, c.sim.clone());
            }
        }
        scheduler.state.queue_cursor = scheduler.state.queue_cursor.min(queue.cursor() + 1);

        let mut clock = Clock::real();
        let now = clock.now();
        Ok(Daemon {
            general,
            clouds_path: clouds_path.to_path_buf(),
            scheduler,
            queue,
            cloud,
            clock,
            next_job_id,
            cloud_steps: 0,
            last_poll: 0,
            last_schedule: 0,
            last_cleanup: 0,
            last_work: now,
        })
    }

    fn log_report(report: &CycleReport) {
        if report.boots.is_empty() && report.shutdowns.is_empty() && report.errors.is_empty() {
            return;
        }
        log::info!(
            "cycle {}: {} boots, {} boot failures, {} shutdowns, {} requeued",
            report.cycle,
            report.boots.len(),
            report.boot_failures.len(),
            report.shutdowns.len(),
            report.requeued.len()
        );
        for e in &report.errors {
            log::warn!("{e}");
        }
    }

    /// Runs whatever is due at the current wall time.
    pub fn tick(&mut self) {
        let now = self.clock.now();
        let cfg = self.scheduler.config.clone();
        if now >= self.last_poll + cfg.poll_interval {
            // One cloud step per poll, so fault rates mean the same as in a simulation cycle.
            for ev in self.cloud.advance(now, self.cloud_steps) {
                match ev {
                    CloudEvent::Advertise { vm_name, vmtype, .. } => self.queue.advertise(&vm_name, &vmtype, now),
                    CloudEvent::Fault { vm_name, .. } => {
                        self.queue.vm_died(&vm_name);
                    }
                }
            }
            self.cloud_steps += 1;
            self.scheduler.poll_jobs(&self.queue, now);
            self.last_poll = now;
        }
        if now >= self.last_schedule + cfg.schedule_interval {
            let r = self.scheduler.schedule(&mut self.cloud, &mut self.queue, now);
            Self::log_report(&r);
            self.last_schedule = now;
        }
        if now >= self.last_cleanup + cfg.cleanup_interval {
            let r = self.scheduler.clean_up(&mut self.cloud, &mut self.queue, now);
            Self::log_report(&r);
            self.last_cleanup = now;
            self.scheduler.state.cycle += 1;
            self.scheduler.state.now = now;
        }
        self.queue.dispatch_cycle(now);
        let dt = now.saturating_sub(self.last_work);
        if dt > 0 {
            self.queue.advance_work(self.last_work, dt);
            self.last_work = now;
        }
    }

    fn persist(&self) -> Result<Option<String>, String> {
        let Some(path) = &self.general.persist_path else {
            return Err("no [persistence] path configured".into());
        };
        persist::save(&self.scheduler.state, path).map_err(|e| e.to_string())?;
        let world = World { queue: self.queue.clone(), cloud: self.cloud.clone(), next_job_id: self.next_job_id };
        let text = serde_json::to_string(&world).map_err(|e| e.to_string())?;
        persist::write_atomic(&world_path(path), &text).map_err(|e| e.to_string())?;
        Ok(Some(path.display().to_string()))
    }

    /// Answers one request. The flag is true when the daemon should exit.
    pub fn handle(&mut self, request: Request) -> (Response, bool) {
        let now = self.clock.now();
        let error = |kind: &str, message: String| Response::Error { kind: kind.into(), message };
        match request {
            Request::Submit { user, submit, duration_s } => {
                let parsed = parse_submit(&submit).and_then(|d| descriptor_to_jobs(&d, &user, self.next_job_id));
                let jobs = match parsed {
                    Ok(jobs) => jobs,
                    Err(e) => return (error("submit", e.to_string()), false),
                };
                let durations = vec![duration_s.max(1) * SECOND; jobs.len()];
                match self.queue.submit(jobs, &durations, now) {
                    Ok(ids) => {
                        self.next_job_id += ids.len() as u64;
                        (Response::Submitted { job_ids: ids.iter().map(|JobId(i)| *i).collect() }, false)
                    }
                    Err(e) => (error("queue", e.to_string()), false),
                }
            }
            Request::Status => {
                self.scheduler.poll_jobs(&self.queue, now);
                (Response::Status { text: cloudsched::status::render(&self.scheduler.state, now) }, false)
            }
            Request::Reload => match load_clouds(&self.clouds_path) {
                Ok(clouds) => {
                    let clusters: Vec<_> = clouds.iter().map(|c| c.cluster.clone()).collect();
                    if let Err(e) = self.scheduler.state.resources.reload(clusters) {
                        return (error("config", e), false);
                    }
                    for c in &clouds {
                        if self.cloud.cluster(&c.cluster.name).is_none() {
                            self.cloud.add_cluster(&c.cluster.name, c.sim.clone());
                        }
                    }
                    (Response::Reloaded { clusters: clouds.len() }, false)
                }
                Err(e) => (error("config", e.to_string()), false),
            },
            Request::Shutdown { mode } => {
                let mode = match mode {
                    ShutdownMode::Persist => Mode::Persist,
                    ShutdownMode::KillAll => Mode::KillAll,
                };
                let (report, _) = self.scheduler.shutdown(mode, &mut self.cloud, &mut self.queue, now);
                let snapshot = if mode == Mode::Persist {
                    match self.persist() {
                        Ok(p) => p,
                        Err(e) => return (error("persist", e), false),
                    }
                } else {
                    None
                };
                let shutdowns = report.shutdowns.iter().filter(|s| s.error.is_none()).map(|s| s.vm.clone()).collect();
                let failures = report
                    .shutdowns
                    .iter()
                    .filter_map(|s| s.error.as_ref().map(|e| format!("{}: {e}", s.vm)))
                    .collect();
                (Response::ShutDown { shutdowns, failures, snapshot }, true)
            }
        }
    }
}

fn answer(daemon: &mut Daemon, stream: UnixStream) -> std::io::Result<bool> {
    stream.set_nonblocking(false)?;
    stream.set_read_timeout(Some(Duration::from_secs(5)))?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    let (response, stop) = match serde_json::from_str::<Request>(&line) {
        Ok(req) => daemon.handle(req),
        Err(e) => (Response::Error { kind: "protocol".into(), message: e.to_string() }, false),
    };
    let mut out = serde_json::to_string(&response)?;
    out.push('\n');
    (&stream).write_all(out.as_bytes())?;
    Ok(stop)
}

/// Serves requests on `socket` until a shutdown request arrives.
pub fn serve(mut daemon: Daemon, socket: &Path) -> Result<(), DaemonError> {
    if socket.exists() {
        if UnixStream::connect(socket).is_ok() {
            return Err(DaemonError::Io(format!("another daemon is listening on {}", socket.display())));
        }
        let _ = std::fs::remove_file(socket);
    }
    let listener = UnixListener::bind(socket).map_err(|e| DaemonError::Io(format!("{}: {e}", socket.display())))?;
    listener.set_nonblocking(true).map_err(|e| DaemonError::Io(e.to_string()))?;
    log::info!("listening on {}", socket.display());
    let result = loop {
        match listener.accept() {
            Ok((stream, _)) => match answer(&mut daemon, stream) {
                Ok(true) => break Ok(()),
                Ok(false) => {}
                Err(e) => log::warn!("request failed: {e}"),
            },
            Err(e) if e.kind() == ErrorKind::WouldBlock => {
                daemon.tick();
                std::thread::sleep(Duration::from_millis(100));
            }
            Err(e) => break Err(DaemonError::Io(e.to_string())),
        }
    };
    let _ = std::fs::remove_file(socket);
    result
}
