//! The cloud boundary and the simulated cloud behind it.
//!
//! [`CloudBackend`] is what the scheduler calls to boot, shut down and poll
//! VMs. [`SimCloud`] implements it for any number of simulated clusters with
//! configurable boot latency, boot failures and spontaneous faults. All
//! randomness is keyed by (seed, VM, cycle) so a run replays exactly.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Cluster, CpuArch, Job, Millis, Network, VmState};

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum BackendError {
    #[error("boot rejected: {0}")]
    BootRejected(String),
    #[error("unknown vm {0}")]
    UnknownVm(String),
    #[error("unknown cluster {0}")]
    UnknownCluster(String),
    /// The cloud answered with an error but the VM may still be fine.
    #[error("transient cloud error: {0}")]
    Transient(String),
}

/// What to boot: mirrors the VM fields of the job that asked for it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VmSpec {
    pub vmtype: String,
    pub image: String,
    pub network: Network,
    pub cpuarch: CpuArch,
    pub memory: u64,
    pub cpucores: u32,
    pub storage: u64,
    pub owner: String,
}

impl VmSpec {
    /// Spec for booting `job`'s VM on `cluster`, picking the image locator
    /// that cluster's cloud type understands.
    pub fn for_job(job: &Job, cluster: &Cluster) -> Option<VmSpec> {
        let image = cluster.cloud_type.image_locator(job)?;
        Some(VmSpec {
            vmtype: job.vmtype.clone(),
            image: image.to_string(),
            network: job.vm_network,
            cpuarch: job.vm_cpu_arch,
            memory: job.vm_mem,
            cpucores: job.vm_cpu_cores,
            storage: job.vm_storage,
            owner: job.user.clone(),
        })
    }

    /// This request expressed as a job, so placement can reuse the matcher.
    pub fn as_job(&self) -> Job {
        use crate::model::{JobId, QueueState, SchedState};
        Job {
            global_job_id: JobId(0),
            user: self.owner.clone(),
            priority: 1,
            vmtype: self.vmtype.clone(),
            vm_network: self.network,
            vm_cpu_arch: self.cpuarch,
            vm_name: String::new(),
            vm_loc: self.image.clone(),
            vm_ami: self.image.clone(),
            vm_mem: self.memory,
            vm_cpu_cores: self.cpucores,
            vm_storage: self.storage,
            sched_state: SchedState::New,
            queue_state: QueueState::Queued,
        }
    }
}

/// Operations a cloud must offer. Calls are addressed by cluster name so
/// one backend value can front several clouds.
pub trait CloudBackend: Send {
    /// Requests a VM; returns the cloud's identifier for it.
    fn boot(&mut self, cluster: &Cluster, name: &str, spec: &VmSpec, now: Millis) -> Result<String, BackendError>;
    fn shutdown(&mut self, cluster: &str, vm_id: &str, now: Millis) -> Result<(), BackendError>;
    fn poll(&mut self, cluster: &str, vm_id: &str, now: Millis) -> Result<VmState, BackendError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BootLatency {
    Fixed(Millis),
    /// Inclusive range.
    Uniform(Millis, Millis),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimCloudConfig {
    pub boot_latency: BootLatency,
    /// Probability per VM per cycle of a spontaneous fault.
    pub fault_rate: f64,
    /// Probability that a boot request is rejected outright.
    pub boot_failure_rate: f64,
    pub rng_seed: u64,
}

impl Default for SimCloudConfig {
    fn default() -> Self {
        SimCloudConfig { boot_latency: BootLatency::Fixed(0), fault_rate: 0.0, boot_failure_rate: 0.0, rng_seed: 0 }
    }
}

impl SimCloudConfig {
    pub fn validate(&self) -> Result<(), String> {
        for (name, p) in [("fault_rate", self.fault_rate), ("boot_failure_rate", self.boot_failure_rate)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("{name} must be within [0, 1], got {p}"));
            }
        }
        if let BootLatency::Uniform(lo, hi) = self.boot_latency {
            if lo > hi {
                return Err(format!("boot latency range {lo}..{hi} is empty"));
            }
        }
        Ok(())
    }
}

fn mix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Deterministic generator for one (seed, key, index) triple.
fn keyed_rng(seed: u64, key: &str, index: u64, salt: u64) -> ChaCha8Rng {
    let mut h = mix(seed ^ salt.rotate_left(17));
    for b in key.bytes() {
        h = mix(h ^ b as u64);
    }
    ChaCha8Rng::seed_from_u64(mix(h ^ index))
}

const SALT_FAULT: u64 = 1;
const SALT_LATENCY: u64 = 2;
const SALT_BOOT_FAIL: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimVm {
    pub name: String,
    pub id: String,
    pub vmtype: String,
    pub state: VmState,
    pub ready_at: Millis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimCluster {
    pub config: SimCloudConfig,
    pub vms: BTreeMap<String, SimVm>,
    pub boots: u64,
}

/// Something the simulated cloud did on its own between scheduler calls.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum CloudEvent {
    /// Boot finished; the VM's worker daemon registers with the job queue.
    Advertise {
        cluster: String,
        vm_name: String,
        vm_id: String,
        vmtype: String,
        at: Millis,
    },
    Fault {
        cluster: String,
        vm_name: String,
        vm_id: String,
        at: Millis,
    },
}

/// Which VM a scripted fault hits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum VmSelector {
    Oldest,
    Newest,
    Named(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SimCloud {
    clusters: BTreeMap<String, SimCluster>,
}

impl SimCloud {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_cluster(&mut self, name: &str, config: SimCloudConfig) {
        self.clusters.insert(name.to_string(), SimCluster { config, vms: BTreeMap::new(), boots: 0 });
    }

    pub fn cluster(&self, name: &str) -> Option<&SimCluster> {
        self.clusters.get(name)
    }

    pub fn vm_count(&self) -> usize {
        self.clusters.values().map(|c| c.vms.len()).sum()
    }

    /// Delivers everything due by `now`: first the random faults of
    /// `cycle`, then boot completions. A VM that faulted while starting
    /// never advertises.
    pub fn advance(&mut self, now: Millis, cycle: u64) -> Vec<CloudEvent> {
        let mut events = Vec::new();
        for (cname, cluster) in &mut self.clusters {
            let cfg = &cluster.config;
            for vm in cluster.vms.values_mut() {
                if vm.state == VmState::Error || cfg.fault_rate <= 0.0 {
                    continue;
                }
                let draw: f64 = keyed_rng(cfg.rng_seed, &vm.id, cycle, SALT_FAULT).random();
                if draw < cfg.fault_rate {
                    vm.state = VmState::Error;
                    events.push(CloudEvent::Fault {
                        cluster: cname.clone(),
                        vm_name: vm.name.clone(),
                        vm_id: vm.id.clone(),
                        at: now,
                    });
                }
            }
            for vm in cluster.vms.values_mut() {
                if vm.state == VmState::Starting && vm.ready_at <= now {
                    vm.state = VmState::Running;
                    events.push(CloudEvent::Advertise {
                        cluster: cname.clone(),
                        vm_name: vm.name.clone(),
                        vm_id: vm.id.clone(),
                        vmtype: vm.vmtype.clone(),
                        at: vm.ready_at,
                    });
                }
            }
        }
        events
    }

    /// Scripted fault. Returns the event when a live VM matched.
    pub fn inject_fault(&mut self, cluster: &str, selector: &VmSelector, now: Millis) -> Option<CloudEvent> {
        let c = self.clusters.get_mut(cluster)?;
        let mut live = c.vms.values_mut().filter(|vm| vm.state != VmState::Error);
        let vm = match selector {
            VmSelector::Oldest => live.next(),
            VmSelector::Newest => live.last(),
            VmSelector::Named(name) => live.find(|vm| &vm.name == name),
        }?;
        vm.state = VmState::Error;
        Some(CloudEvent::Fault {
            cluster: cluster.to_string(),
            vm_name: vm.name.clone(),
            vm_id: vm.id.clone(),
            at: now,
        })
    }
}

impl CloudBackend for SimCloud {
    fn boot(&mut self, cluster: &Cluster, name: &str, spec: &VmSpec, now: Millis) -> Result<String, BackendError> {
        let c =
            self.clusters.get_mut(&cluster.name).ok_or_else(|| BackendError::UnknownCluster(cluster.name.clone()))?;
        if c.vms.len() as u64 >= cluster.vm_slots as u64 {
            return Err(BackendError::BootRejected(format!("{} has no free slot", cluster.name)));
        }
        c.boots += 1;
        let n = c.boots;
        let cfg = &c.config;
        if cfg.boot_failure_rate > 0.0 {
            let draw: f64 = keyed_rng(cfg.rng_seed, &cluster.name, n, SALT_BOOT_FAIL).random();
            if draw < cfg.boot_failure_rate {
                return Err(BackendError::BootRejected(format!("{} refused boot request {n}", cluster.name)));
            }
        }
        let latency = match cfg.boot_latency {
            BootLatency::Fixed(l) => l,
            BootLatency::Uniform(lo, hi) => {
                keyed_rng(cfg.rng_seed, &cluster.name, n, SALT_LATENCY).random_range(lo..=hi)
            }
        };
        let id = format!("{}-{:06}", cluster.name, n);
        c.vms.insert(
            id.clone(),
            SimVm {
                name: name.to_string(),
                id: id.clone(),
                vmtype: spec.vmtype.clone(),
                state: VmState::Starting,
                ready_at: now + latency,
            },
        );
        Ok(id)
    }

    fn shutdown(&mut self, cluster: &str, vm_id: &str, _now: Millis) -> Result<(), BackendError> {
        let c = self.clusters.get_mut(cluster).ok_or_else(|| BackendError::UnknownCluster(cluster.to_string()))?;
        c.vms.remove(vm_id).map(|_| ()).ok_or_else(|| BackendError::UnknownVm(vm_id.to_string()))
    }

    fn poll(&mut self, cluster: &str, vm_id: &str, _now: Millis) -> Result<VmState, BackendError> {
        let c = self.clusters.get(cluster).ok_or_else(|| BackendError::UnknownCluster(cluster.to_string()))?;
        c.vms.get(vm_id).map(|vm| vm.state).ok_or_else(|| BackendError::UnknownVm(vm_id.to_string()))
    }
}
