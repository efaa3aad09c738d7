//! Scenario files: clusters, arrival script, fault script.
//!
//! A scenario is TOML. Times are seconds of virtual time. See the README
//! for the grammar; the bundled `scenarios/` directory has examples.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use crate::backend::{BootLatency, SimCloudConfig, VmSelector};
use crate::model::{CloudType, Cluster, CpuArch, Millis, Network, SECOND};
use crate::scheduler::{RebalanceMode, SchedulerConfig};
use crate::submit::{descriptor_to_jobs, parse_submit, SubmitDescriptor, SubmitError};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {reason}")]
    Io { path: String, reason: String },
    #[error("malformed scenario: {0}")]
    Syntax(String),
    #[error("arrival {index}: {source}")]
    Submit { index: usize, source: SubmitError },
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimCluster {
    pub cluster: Cluster,
    pub sim: SimCloudConfig,
}

/// `count` submissions of `descriptor` by `user` at time `at`. Each
/// submission yields the descriptor's Queue count of jobs.
#[derive(Debug, Clone, PartialEq)]
pub struct Arrival {
    pub at: Millis,
    pub user: String,
    pub descriptor: SubmitDescriptor,
    pub duration: Millis,
    pub count: u32,
}

impl Arrival {
    pub fn jobs(&self) -> u64 {
        self.count as u64 * self.descriptor.queue_count as u64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FaultEvent {
    pub at: Millis,
    pub cluster: String,
    pub vm: VmSelector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub seed: u64,
    pub horizon: Millis,
    pub cycle_period: Millis,
    pub scheduler: SchedulerConfig,
    pub clusters: Vec<SimCluster>,
    pub arrivals: Vec<Arrival>,
    pub faults: Vec<FaultEvent>,
}

impl Scenario {
    /// Empty scenario with the default 60 s cycle and a one-year horizon.
    pub fn new(seed: u64) -> Self {
        Scenario {
            seed,
            horizon: 365 * 24 * 3600 * SECOND,
            cycle_period: 60 * SECOND,
            scheduler: SchedulerConfig::default(),
            clusters: Vec::new(),
            arrivals: Vec::new(),
            faults: Vec::new(),
        }
    }

    pub fn total_jobs(&self) -> u64 {
        self.arrivals.iter().map(Arrival::jobs).sum()
    }

    pub fn total_slots(&self) -> u32 {
        self.clusters.iter().map(|c| c.cluster.vm_slots).sum()
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let invalid = |m: String| Err(ScenarioError::Invalid(m));
        if self.horizon == 0 {
            return invalid("horizon must be > 0".into());
        }
        if self.cycle_period == 0 {
            return invalid("cycle period must be > 0".into());
        }
        self.scheduler.validate().map_err(ScenarioError::Invalid)?;
        let mut names = BTreeSet::new();
        for c in &self.clusters {
            if !names.insert(c.cluster.name.as_str()) {
                return invalid(format!("duplicate cluster {}", c.cluster.name));
            }
            c.sim.validate().map_err(|e| ScenarioError::Invalid(format!("cluster {}: {e}", c.cluster.name)))?;
        }
        if self.arrivals.windows(2).any(|w| w[0].at > w[1].at) {
            return invalid("arrivals are not sorted by time".into());
        }
        for (index, a) in self.arrivals.iter().enumerate() {
            descriptor_to_jobs(&a.descriptor, &a.user, 0).map_err(|source| ScenarioError::Submit { index, source })?;
            if a.duration == 0 {
                return invalid(format!("arrival {index}: duration must be > 0"));
            }
        }
        for f in &self.faults {
            if !names.contains(f.cluster.as_str()) {
                return invalid(format!("fault names unknown cluster {}", f.cluster));
            }
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Scenario, ScenarioError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ScenarioError::Io { path: path.display().to_string(), reason: e.to_string() })?;
        Scenario::parse(&text, path.parent())
    }

    /// Parses scenario text; `submit_file` paths resolve against `base`.
    pub fn parse(text: &str, base: Option<&Path>) -> Result<Scenario, ScenarioError> {
        let file: FileScenario = toml::from_str(text).map_err(|e| ScenarioError::Syntax(e.to_string()))?;
        file.resolve(base.unwrap_or(Path::new(".")))
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FileScenario {
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_horizon")]
    horizon_s: u64,
    #[serde(default = "default_period")]
    cycle_period_s: u64,
    rebalance_mode: Option<String>,
    #[serde(default)]
    scheduler: FileScheduler,
    #[serde(default)]
    cluster: Vec<FileCluster>,
    #[serde(default)]
    arrival: Vec<FileArrival>,
    #[serde(default)]
    fault: Vec<FileFault>,
}

fn default_horizon() -> u64 {
    365 * 24 * 3600
}

fn default_period() -> u64 {
    60
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileScheduler {
    error_threshold: Option<u32>,
    boot_timeout_s: Option<u64>,
    drain_timeout_s: Option<u64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FileCluster {
    name: String,
    host: Option<String>,
    #[serde(default = "default_cloud_type")]
    cloud_type: String,
    memory: u64,
    cpu_archs: Vec<String>,
    networks: Vec<String>,
    vm_slots: u32,
    cpu_cores: u32,
    storage: u64,
    #[serde(default)]
    sim: FileSim,
}

fn default_cloud_type() -> String {
    "simulated".into()
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileSim {
    boot_latency_s: Option<Latency>,
    #[serde(default)]
    fault_rate: f64,
    #[serde(default)]
    boot_failure_rate: f64,
    seed: Option<u64>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Latency {
    Fixed(u64),
    Range([u64; 2]),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FileArrival {
    #[serde(default)]
    at_s: u64,
    user: String,
    #[serde(default = "one")]
    count: u32,
    duration_s: u64,
    submit_file: Option<PathBuf>,
    submit: Option<String>,
}

fn one() -> u32 {
    1
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FileFault {
    at_s: u64,
    cluster: String,
    #[serde(default = "oldest")]
    vm: String,
}

fn oldest() -> String {
    "oldest".into()
}

fn parse_set<T: std::str::FromStr + Ord>(
    items: &[String],
    what: &str,
    cluster: &str,
) -> Result<BTreeSet<T>, ScenarioError> {
    items
        .iter()
        .map(|s| s.parse::<T>().map_err(|_| ScenarioError::Invalid(format!("cluster {cluster}: bad {what} {s:?}"))))
        .collect()
}

impl FileScenario {
    fn resolve(self, base: &Path) -> Result<Scenario, ScenarioError> {
        let mut scheduler = SchedulerConfig::default();
        if let Some(m) = &self.rebalance_mode {
            scheduler.rebalance_mode = m.parse::<RebalanceMode>().map_err(ScenarioError::Invalid)?;
        }
        if let Some(t) = self.scheduler.error_threshold {
            scheduler.error_threshold = t;
        }
        if let Some(t) = self.scheduler.boot_timeout_s {
            scheduler.boot_timeout = t * SECOND;
        }
        scheduler.drain_timeout = self.scheduler.drain_timeout_s.map(|t| t * SECOND);

        let mut clusters = Vec::new();
        for (i, c) in self.cluster.into_iter().enumerate() {
            let cloud_type = c
                .cloud_type
                .parse::<CloudType>()
                .map_err(|e| ScenarioError::Invalid(format!("cluster {}: {e}", c.name)))?;
            let cluster = Cluster {
                host: c.host.unwrap_or_else(|| format!("{}.sim", c.name.to_ascii_lowercase())),
                cloud_type,
                memory: c.memory,
                cpu_archs: parse_set::<CpuArch>(&c.cpu_archs, "cpu arch", &c.name)?,
                networks: parse_set::<Network>(&c.networks, "network", &c.name)?,
                vm_slots: c.vm_slots,
                cpu_cores: c.cpu_cores,
                storage: c.storage,
                vms: Vec::new(),
                name: c.name,
            };
            let sim = SimCloudConfig {
                boot_latency: match c.sim.boot_latency_s {
                    None => BootLatency::Fixed(0),
                    Some(Latency::Fixed(s)) => BootLatency::Fixed(s * SECOND),
                    Some(Latency::Range([lo, hi])) => BootLatency::Uniform(lo * SECOND, hi * SECOND),
                },
                fault_rate: c.sim.fault_rate,
                boot_failure_rate: c.sim.boot_failure_rate,
                rng_seed: c.sim.seed.unwrap_or_else(|| derive_seed(self.seed, i as u64)),
            };
            clusters.push(SimCluster { cluster, sim });
        }

        let mut arrivals = Vec::new();
        for (index, a) in self.arrival.into_iter().enumerate() {
            let text = match (a.submit_file, a.submit) {
                (Some(p), None) => {
                    let path = base.join(p);
                    std::fs::read_to_string(&path)
                        .map_err(|e| ScenarioError::Io { path: path.display().to_string(), reason: e.to_string() })?
                }
                (None, Some(text)) => text,
                _ => {
                    return Err(ScenarioError::Invalid(format!(
                        "arrival {index}: give exactly one of submit_file and submit"
                    )))
                }
            };
            let descriptor = parse_submit(&text).map_err(|source| ScenarioError::Submit { index, source })?;
            arrivals.push(Arrival {
                at: a.at_s * SECOND,
                user: a.user,
                descriptor,
                duration: a.duration_s * SECOND,
                count: a.count,
            });
        }
        arrivals.sort_by_key(|a| a.at);

        let mut faults: Vec<FaultEvent> = self
            .fault
            .into_iter()
            .map(|f| FaultEvent {
                at: f.at_s * SECOND,
                cluster: f.cluster,
                vm: match f.vm.as_str() {
                    "oldest" => VmSelector::Oldest,
                    "newest" => VmSelector::Newest,
                    name => VmSelector::Named(name.to_string()),
                },
            })
            .collect();
        faults.sort_by_key(|f| f.at);

        let s = Scenario {
            seed: self.seed,
            horizon: self.horizon_s * SECOND,
            cycle_period: self.cycle_period_s * SECOND,
            scheduler,
            clusters,
            arrivals,
            faults,
        };
        s.validate()?;
        Ok(s)
    }
}

/// Per-cluster simulator seed from the scenario seed.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut x = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}
