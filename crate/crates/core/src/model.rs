//! Resource and job management types shared by every other module.
//!
//! `ResourcePool`, `Cluster` and `VmRecord` describe the clouds and the VMs
//! running on them; `JobPool` and `Job` describe the scheduler's view of the
//! batch queue. Timestamps are integer milliseconds since the epoch of the
//! [`Clock`] in use (virtual clocks start at zero).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Milliseconds on the scheduler clock.
pub type Millis = u64;

pub const SECOND: Millis = 1_000;
pub const MINUTE: Millis = 60 * SECOND;
pub const HOUR: Millis = 60 * MINUTE;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("illegal transition: {event:?} from {state:?}")]
    IllegalTransition { state: VmState, event: VmEvent },
    #[error("unknown {kind} value `{value}`")]
    BadValue { kind: &'static str, value: String },
    #[error("clock error: {0}")]
    Clock(String),
}

/// Identifier of a job in the batch queue.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct JobId(pub u64);

impl fmt::Display for JobId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

macro_rules! string_enum {
    ($(#[$meta:meta])* $name:ident, $kind:literal, { $($variant:ident => $text:literal $(| $alias:literal)*),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        pub enum $name {
            $(#[serde(rename = $text)] $variant),+
        }

        impl $name {
            pub fn as_str(&self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = ModelError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                let lower = s.trim().to_ascii_lowercase();
                match lower.as_str() {
                    $($text $(| $alias)* => Ok($name::$variant),)+
                    _ => Err(ModelError::BadValue { kind: $kind, value: s.to_string() }),
                }
            }
        }
    };
}

string_enum!(
    /// CPU architecture of a VM or offered by a cluster.
    CpuArch, "cpu architecture", {
        X86 => "x86" | "i386" | "i686",
        X86_64 => "x86_64" | "amd64",
    }
);

string_enum!(
    /// Network attachment of a VM.
    Network, "network", {
        Private => "private",
        Public => "public",
    }
);

string_enum!(
    /// IaaS software a cluster runs. Only the simulated backend ships; the
    /// type still decides which image locator a job must provide.
    CloudType, "cloud type", {
        Simulated => "simulated" | "sim",
        Nimbus => "nimbus",
        Ec2Like => "ec2-like" | "ec2",
    }
);

string_enum!(
    VmState, "vm state", {
        Starting => "starting",
        Running => "running",
        Error => "error",
    }
);

string_enum!(
    /// Scheduler-side state of a job: whether resources have been arranged.
    SchedState, "scheduling state", {
        New => "new",
        Scheduled => "scheduled",
    }
);

string_enum!(
    /// The batch queue's view of a job.
    QueueState, "queue state", {
        Queued => "queued",
        Held => "held",
        Dispatched => "dispatched",
        Completed => "completed",
        Removed => "removed",
    }
);

impl QueueState {
    /// Completed and removed jobs are no longer tracked by the job pool.
    pub fn is_terminal(&self) -> bool {
        matches!(self, QueueState::Completed | QueueState::Removed)
    }
}

impl CloudType {
    /// The image locator a job must supply to boot on this kind of cloud.
    pub fn image_locator<'a>(&self, job: &'a Job) -> Option<&'a str> {
        let pick = |s: &'a str| (!s.is_empty()).then_some(s);
        match self {
            CloudType::Ec2Like => pick(&job.vm_ami),
            CloudType::Nimbus => pick(&job.vm_loc),
            CloudType::Simulated => pick(&job.vm_loc).or_else(|| pick(&job.vm_ami)),
        }
    }
}

/// Events that drive the VM state machine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VmEvent {
    BootComplete,
    Fault,
    PollUpdate,
}

/// One VM instance on a cluster.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VmRecord {
    pub name: String,
    pub id: String,
    pub vmtype: String,
    pub vmstate: VmState,
    pub hostname: String,
    pub clusteraddr: String,
    pub network: Network,
    pub cpuarch: CpuArch,
    pub image: String,
    pub memory: u64,
    pub cpucores: u32,
    pub storage: u64,
    pub errorcount: u32,
    pub lastpoll: Millis,
    pub last_state_change: Millis,
    /// User whose demand caused this VM to boot.
    pub owner: String,
}

impl VmRecord {
    /// Applies a state-machine event at time `now`.
    ///
    /// Legal moves are Starting→Running (BootComplete), Starting/Running→Error
    /// (Fault). PollUpdate only refreshes `lastpoll`. Nothing leaves Error.
    pub fn transition(&self, event: VmEvent, now: Millis) -> Result<VmRecord, ModelError> {
        let now = now.max(self.lastpoll);
        let mut next = self.clone();
        match (self.vmstate, event) {
            (_, VmEvent::PollUpdate) => {
                next.lastpoll = now;
            }
            (VmState::Starting, VmEvent::BootComplete) => {
                next.vmstate = VmState::Running;
                next.hostname = format!("{}.{}", self.name, self.clusteraddr);
                next.last_state_change = now;
                next.lastpoll = now;
            }
            (VmState::Starting | VmState::Running, VmEvent::Fault) => {
                next.vmstate = VmState::Error;
                next.errorcount += 1;
                next.last_state_change = now;
                next.lastpoll = now;
            }
            (state, event) => return Err(ModelError::IllegalTransition { state, event }),
        }
        Ok(next)
    }

    /// Counts an error response from the cloud that did not change state.
    pub fn note_error_response(&mut self, now: Millis) {
        self.errorcount += 1;
        self.lastpoll = self.lastpoll.max(now);
    }
}

/// Free-function form of [`VmRecord::transition`].
pub fn transition_vm(vm: &VmRecord, event: VmEvent, now: Millis) -> Result<VmRecord, ModelError> {
    vm.transition(event, now)
}

/// Static description of one cloud plus the VMs it currently runs.
///
/// `memory`, `cpu_cores` and `storage` are per-VM maxima; only `vm_slots`
/// is consumed as VMs boot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cluster {
    pub name: String,
    pub host: String,
    pub cloud_type: CloudType,
    /// Megabytes available to a single VM.
    pub memory: u64,
    pub cpu_archs: BTreeSet<CpuArch>,
    pub networks: BTreeSet<Network>,
    pub vm_slots: u32,
    pub cpu_cores: u32,
    /// Scratch gigabytes available to a single VM.
    pub storage: u64,
    pub vms: Vec<VmRecord>,
}

impl Cluster {
    pub fn free_slots(&self) -> u32 {
        self.vm_slots.saturating_sub(self.vms.len() as u32)
    }

    pub fn vm(&self, name: &str) -> Option<&VmRecord> {
        self.vms.iter().find(|vm| vm.name == name)
    }

    /// Same static description, no VMs.
    pub fn without_vms(&self) -> Cluster {
        Cluster { vms: Vec::new(), ..self.clone() }
    }
}

/// Every cloud the scheduler may use, in configuration order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourcePool {
    pub clusters: Vec<Cluster>,
}

impl ResourcePool {
    pub fn new(clusters: Vec<Cluster>) -> Result<Self, String> {
        let mut seen = BTreeSet::new();
        for c in &clusters {
            if !seen.insert(c.name.as_str()) {
                return Err(format!("duplicate cluster name `{}`", c.name));
            }
        }
        Ok(ResourcePool { clusters })
    }

    pub fn cluster(&self, name: &str) -> Option<&Cluster> {
        self.clusters.iter().find(|c| c.name == name)
    }

    pub fn cluster_mut(&mut self, name: &str) -> Option<&mut Cluster> {
        self.clusters.iter_mut().find(|c| c.name == name)
    }

    pub fn total_slots(&self) -> u32 {
        self.clusters.iter().map(|c| c.vm_slots).sum()
    }

    pub fn vm_count(&self) -> usize {
        self.clusters.iter().map(|c| c.vms.len()).sum()
    }

    pub fn vms(&self) -> impl Iterator<Item = (&Cluster, &VmRecord)> {
        self.clusters.iter().flat_map(|c| c.vms.iter().map(move |vm| (c, vm)))
    }

    /// Cluster name and record of the VM called `name`.
    pub fn find_vm(&self, name: &str) -> Option<(&Cluster, &VmRecord)> {
        self.vms().find(|(_, vm)| vm.name == name)
    }

    pub fn find_vm_mut(&mut self, name: &str) -> Option<&mut VmRecord> {
        self.clusters.iter_mut().flat_map(|c| c.vms.iter_mut()).find(|vm| vm.name == name)
    }

    pub fn remove_vm(&mut self, name: &str) -> Option<(String, VmRecord)> {
        for c in &mut self.clusters {
            if let Some(pos) = c.vms.iter().position(|vm| vm.name == name) {
                return Some((c.name.clone(), c.vms.remove(pos)));
            }
        }
        None
    }

    /// Replaces the static cluster descriptions while keeping live VMs.
    ///
    /// New clusters are appended in the order given. A cluster missing from
    /// `updated` is dropped when empty; otherwise it is kept with zero slots
    /// so its VMs run out without replacements.
    pub fn reload(&mut self, updated: Vec<Cluster>) -> Result<(), String> {
        let fresh = ResourcePool::new(updated)?;
        let mut old: BTreeMap<String, Cluster> = self.clusters.drain(..).map(|c| (c.name.clone(), c)).collect();
        let mut clusters = Vec::with_capacity(fresh.clusters.len());
        for mut c in fresh.clusters {
            if let Some(prev) = old.remove(&c.name) {
                c.vms = prev.vms;
                for vm in &mut c.vms {
                    vm.clusteraddr = c.host.clone();
                }
            }
            clusters.push(c);
        }
        for (_, mut retired) in old {
            if !retired.vms.is_empty() {
                retired.vm_slots = 0;
                clusters.push(retired);
            }
        }
        self.clusters = clusters;
        Ok(())
    }
}

/// One unit of work and the VM it needs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Job {
    pub global_job_id: JobId,
    pub user: String,
    pub priority: i32,
    pub vmtype: String,
    pub vm_network: Network,
    pub vm_cpu_arch: CpuArch,
    pub vm_name: String,
    pub vm_loc: String,
    pub vm_ami: String,
    /// Megabytes.
    pub vm_mem: u64,
    pub vm_cpu_cores: u32,
    /// Gigabytes.
    pub vm_storage: u64,
    pub sched_state: SchedState,
    pub queue_state: QueueState,
}

/// A job as tracked by the job pool.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub job: Job,
    pub submit_time: Millis,
    /// VM booted for this job, or the VM it is dispatched to.
    pub vm: Option<String>,
    /// When the scheduler first saw the job running on `vm`.
    pub running_since: Option<Millis>,
}

/// What the job pool needs to know about one queue entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueView {
    pub job: Job,
    pub state: QueueState,
    pub dispatched_to: Option<String>,
    pub submit_time: Millis,
}

/// The scheduler's mirror of the batch queue, split by scheduling state.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobPool {
    pub new_list: BTreeMap<JobId, PoolEntry>,
    pub scheduled_list: BTreeMap<JobId, PoolEntry>,
}

impl JobPool {
    pub fn len(&self) -> usize {
        self.new_list.len() + self.scheduled_list.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, id: JobId) -> Option<&PoolEntry> {
        self.new_list.get(&id).or_else(|| self.scheduled_list.get(&id))
    }

    pub fn get_mut(&mut self, id: JobId) -> Option<&mut PoolEntry> {
        match self.new_list.get_mut(&id) {
            Some(e) => Some(e),
            None => self.scheduled_list.get_mut(&id),
        }
    }

    pub fn entries(&self) -> impl Iterator<Item = &PoolEntry> {
        self.new_list.values().chain(self.scheduled_list.values())
    }

    /// Folds one queue observation, made at `now`, into the pool.
    ///
    /// Terminal jobs leave the pool, dispatched jobs become Scheduled on the
    /// VM running them, and queued or held jobs keep whatever scheduling
    /// state they had (new ones start as New).
    pub fn observe(&mut self, view: &QueueView, now: Millis) {
        self.observe_with(
            view.job.global_job_id,
            view.state,
            view.dispatched_to.as_deref(),
            view.submit_time,
            now,
            || view.job.clone(),
        );
    }

    /// [`JobPool::observe`] without materialising the job unless the pool
    /// has never seen it.
    pub fn observe_with(
        &mut self,
        id: JobId,
        state: QueueState,
        dispatched_to: Option<&str>,
        submit_time: Millis,
        now: Millis,
        job: impl FnOnce() -> Job,
    ) {
        if state.is_terminal() {
            self.new_list.remove(&id);
            self.scheduled_list.remove(&id);
            return;
        }
        if state == QueueState::Dispatched {
            let mut entry = self
                .new_list
                .remove(&id)
                .or_else(|| self.scheduled_list.remove(&id))
                .unwrap_or_else(|| PoolEntry { job: job(), submit_time, vm: None, running_since: None });
            entry.job.sched_state = SchedState::Scheduled;
            entry.job.queue_state = QueueState::Dispatched;
            if entry.running_since.is_none() || entry.vm.as_deref() != dispatched_to {
                entry.running_since = Some(now);
            }
            entry.vm = dispatched_to.map(str::to_string);
            self.scheduled_list.insert(id, entry);
            return;
        }
        if let Some(entry) = self.get_mut(id) {
            entry.job.queue_state = state;
            entry.running_since = None;
        } else {
            let mut job = job();
            job.sched_state = SchedState::New;
            job.queue_state = state;
            self.new_list.insert(id, PoolEntry { job, submit_time, vm: None, running_since: None });
        }
    }

    /// Maps a full queue snapshot into the pool: every live job is observed
    /// and jobs the queue no longer reports are dropped.
    pub fn sync(&mut self, snapshot: &[QueueView], now: Millis) {
        let live: BTreeSet<JobId> =
            snapshot.iter().filter(|v| !v.state.is_terminal()).map(|v| v.job.global_job_id).collect();
        self.new_list.retain(|id, _| live.contains(id));
        self.scheduled_list.retain(|id, _| live.contains(id));
        for view in snapshot {
            self.observe(view, now);
        }
    }

    /// New → Scheduled, linking the job to the VM booted for it.
    pub fn mark_scheduled(&mut self, id: JobId, vm: &str) -> bool {
        match self.new_list.remove(&id) {
            Some(mut entry) => {
                entry.job.sched_state = SchedState::Scheduled;
                entry.vm = Some(vm.to_string());
                self.scheduled_list.insert(id, entry);
                true
            }
            None => false,
        }
    }

    /// Scheduled → New, dropping the VM link.
    pub fn mark_new(&mut self, id: JobId) -> bool {
        match self.scheduled_list.remove(&id) {
            Some(mut entry) => {
                entry.job.sched_state = SchedState::New;
                entry.vm = None;
                entry.running_since = None;
                if entry.job.queue_state == QueueState::Dispatched {
                    entry.job.queue_state = QueueState::Queued;
                }
                self.new_list.insert(id, entry);
                true
            }
            None => false,
        }
    }

    /// Partition invariant: no id in both lists and list membership agrees
    /// with each job's `sched_state`.
    pub fn check_partition(&self) -> Result<(), String> {
        for (id, e) in &self.new_list {
            if self.scheduled_list.contains_key(id) {
                return Err(format!("job {id} in both lists"));
            }
            if e.job.sched_state != SchedState::New || e.job.global_job_id != *id {
                return Err(format!("job {id} misfiled in new_list"));
            }
        }
        for (id, e) in &self.scheduled_list {
            if e.job.sched_state != SchedState::Scheduled || e.job.global_job_id != *id {
                return Err(format!("job {id} misfiled in scheduled_list"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClockMode {
    Real,
    Virtual,
}

/// Monotone time source. Virtual clocks only move through [`Clock::advance`].
#[derive(Debug, Clone)]
pub struct Clock {
    mode: ClockMode,
    now: Millis,
    origin: Option<(Instant, Millis)>,
}

impl Clock {
    pub fn virtual_at(start: Millis) -> Self {
        Clock { mode: ClockMode::Virtual, now: start, origin: None }
    }

    /// Real clock reading wall time as milliseconds since the Unix epoch.
    pub fn real() -> Self {
        let base = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as Millis).unwrap_or(0);
        Clock { mode: ClockMode::Real, now: base, origin: Some((Instant::now(), base)) }
    }

    pub fn mode(&self) -> ClockMode {
        self.mode
    }

    pub fn now(&mut self) -> Millis {
        if let Some((instant, base)) = self.origin {
            let t = base + instant.elapsed().as_millis() as Millis;
            self.now = self.now.max(t);
        }
        self.now
    }

    pub fn advance(&mut self, dt: Millis) -> Result<Millis, ModelError> {
        match self.mode {
            ClockMode::Virtual => {
                self.now += dt;
                Ok(self.now)
            }
            ClockMode::Real => Err(ModelError::Clock("a real clock cannot be advanced".into())),
        }
    }
}
