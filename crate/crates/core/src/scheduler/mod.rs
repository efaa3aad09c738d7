//! The control loops: JobPoller, Scheduler and CleanUp.
//!
//! [`Scheduler::run_cycle`] runs all three in order against a queue and a
//! cloud backend. Each phase computes an [`ActionPlan`] from the current
//! [`SchedulerState`] and then applies it, re-validating every action
//! against the state as it stands at that moment.

pub mod fairshare;
pub mod plan;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, CloudBackend};
use crate::matcher::fits;
use crate::model::{
    Cluster, JobId, JobPool, Millis, QueueState, QueueView, ResourcePool, VmEvent, VmRecord, VmState, MINUTE, SECOND,
};
use crate::queue::{JobQueue, QueueError};

pub use fairshare::{fair_share_targets, UserDemand};
pub use plan::{ActionPlan, Allocation, BootOrder, BootReason, ShutdownReason};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RebalanceMode {
    /// Retire over-allocated VMs as their jobs finish.
    Graceful,
    /// Shut over-allocated VMs down at once and requeue their jobs.
    Kill,
}

impl FromStr for RebalanceMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "graceful" => Ok(RebalanceMode::Graceful),
            "kill" => Ok(RebalanceMode::Kill),
            other => Err(format!("unknown rebalance mode {other:?} (expected graceful or kill)")),
        }
    }
}

impl fmt::Display for RebalanceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RebalanceMode::Graceful => "graceful",
            RebalanceMode::Kill => "kill",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SchedulerConfig {
    pub rebalance_mode: RebalanceMode,
    pub poll_interval: Millis,
    pub schedule_interval: Millis,
    pub cleanup_interval: Millis,
    /// A VM whose errorcount reaches this is shut down.
    pub error_threshold: u32,
    /// A VM still Starting after this long is treated as faulted.
    pub boot_timeout: Millis,
    /// Draining VMs still busy after this long are killed. `None` waits forever.
    pub drain_timeout: Option<Millis>,
    pub persist_on_shutdown: bool,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            rebalance_mode: RebalanceMode::Graceful,
            poll_interval: 10 * SECOND,
            schedule_interval: 30 * SECOND,
            cleanup_interval: 30 * SECOND,
            error_threshold: 1,
            boot_timeout: 30 * MINUTE,
            drain_timeout: None,
            persist_on_shutdown: false,
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("poll_interval", self.poll_interval),
            ("schedule_interval", self.schedule_interval),
            ("cleanup_interval", self.cleanup_interval),
            ("boot_timeout", self.boot_timeout),
        ] {
            if v == 0 {
                return Err(format!("{name} must be > 0"));
            }
        }
        if self.error_threshold == 0 {
            return Err("error_threshold must be >= 1".into());
        }
        if self.drain_timeout == Some(0) {
            return Err("drain_timeout must be > 0".into());
        }
        Ok(())
    }
}

/// Everything the scheduler knows. This is what gets persisted.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchedulerState {
    /// Time of the latest cycle.
    pub now: Millis,
    pub cycle: u64,
    pub resources: ResourcePool,
    pub jobs: JobPool,
    /// vm name → when it was marked for graceful shutdown
    pub draining: BTreeMap<String, Millis>,
    /// jobs held to protect a drain → reason
    pub holds: BTreeMap<JobId, String>,
    /// Sequence number of the next VM name; names sort by age.
    pub next_vm_seq: u64,
    /// Journal position of the queue up to which the pool is current.
    pub queue_cursor: u64,
}

impl SchedulerState {
    pub fn new(resources: ResourcePool) -> Self {
        SchedulerState { resources, next_vm_seq: 1, ..Default::default() }
    }

    pub fn allocation(&self) -> Allocation {
        Allocation::of(self)
    }

    /// Internal consistency: pool partition, VM names unique, drain marks
    /// and holds refer to things that exist, no cluster over its slots.
    pub fn check(&self) -> Result<(), String> {
        self.jobs.check_partition()?;
        let mut seen = std::collections::BTreeSet::new();
        for c in &self.resources.clusters {
            if c.vms.len() as u64 > c.vm_slots as u64 && c.vm_slots > 0 {
                return Err(format!("cluster {} holds {} VMs for {} slots", c.name, c.vms.len(), c.vm_slots));
            }
            for vm in &c.vms {
                if !seen.insert(vm.name.as_str()) {
                    return Err(format!("VM {} appears twice", vm.name));
                }
            }
        }
        for name in self.draining.keys() {
            if !seen.contains(name.as_str()) {
                return Err(format!("draining mark on missing VM {name}"));
            }
        }
        Ok(())
    }
}

/// Pure form of the JobPoller: the pool after observing a full snapshot.
pub fn job_poller(pool: &JobPool, snapshot: &[QueueView], now: Millis) -> JobPool {
    let mut next = pool.clone();
    next.sync(snapshot, now);
    next
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BootRecord {
    pub vm: String,
    pub id: String,
    pub cluster: String,
    pub owner: String,
    pub vmtype: String,
    pub job: Option<JobId>,
    pub reason: BootReason,
    /// VMs on the cluster after this boot, and its slot cap.
    pub occupancy_after: u32,
    pub slots: u32,
    /// Whether `fits()` held for the booting job on the cluster before boot.
    pub fitted: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BootFailure {
    pub cluster: String,
    pub owner: String,
    pub job: Option<JobId>,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShutdownRecord {
    pub vm: String,
    pub cluster: String,
    pub owner: String,
    pub vmtype: String,
    pub reason: ShutdownReason,
    /// The queue had a job dispatched to the VM when shutdown was called.
    pub busy: bool,
    /// Backend error, if the call failed. The VM is kept unless the cloud
    /// no longer knows it.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transition {
    pub vm: String,
    pub from: VmState,
    pub to: VmState,
}

/// What one phase or cycle did.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CycleReport {
    pub cycle: u64,
    pub now: Millis,
    pub transitions: Vec<Transition>,
    /// VMs the cloud no longer knows about.
    pub vanished: Vec<String>,
    pub boots: Vec<BootRecord>,
    pub boot_failures: Vec<BootFailure>,
    pub shutdowns: Vec<ShutdownRecord>,
    /// Jobs sent back to Queued because their VM went away.
    pub requeued: Vec<JobId>,
    pub drains: Vec<String>,
    pub undrains: Vec<String>,
    pub holds: Vec<JobId>,
    pub releases: Vec<JobId>,
    pub flipped_to_new: Vec<JobId>,
    pub targets: BTreeMap<String, u32>,
    pub errors: Vec<String>,
}

impl CycleReport {
    fn absorb(&mut self, other: CycleReport) {
        self.transitions.extend(other.transitions);
        self.vanished.extend(other.vanished);
        self.boots.extend(other.boots);
        self.boot_failures.extend(other.boot_failures);
        self.shutdowns.extend(other.shutdowns);
        self.requeued.extend(other.requeued);
        self.drains.extend(other.drains);
        self.undrains.extend(other.undrains);
        self.holds.extend(other.holds);
        self.releases.extend(other.releases);
        self.flipped_to_new.extend(other.flipped_to_new);
        if !other.targets.is_empty() {
            self.targets = other.targets;
        }
        self.errors.extend(other.errors);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShutdownMode {
    KillAll,
    Persist,
}

#[derive(Debug, Error)]
pub enum SchedulerError {
    #[error("invalid scheduler config: {0}")]
    Config(String),
    #[error("invalid resource pool: {0}")]
    Resources(String),
    #[error(transparent)]
    Persist(#[from] crate::persist::PersistError),
}

pub struct Scheduler {
    pub config: SchedulerConfig,
    pub state: SchedulerState,
}

impl Scheduler {
    pub fn new(config: SchedulerConfig, clusters: Vec<Cluster>) -> Result<Self, SchedulerError> {
        config.validate().map_err(SchedulerError::Config)?;
        let resources = ResourcePool::new(clusters).map_err(SchedulerError::Resources)?;
        Ok(Scheduler { config, state: SchedulerState::new(resources) })
    }

    pub fn from_state(config: SchedulerConfig, state: SchedulerState) -> Result<Self, SchedulerError> {
        config.validate().map_err(SchedulerError::Config)?;
        Ok(Scheduler { config, state })
    }

    /// JobPoller: brings the pool up to date with the queue, following the
    /// queue's journal when the cursor is valid and resyncing otherwise.
    pub fn poll_jobs(&mut self, queue: &JobQueue, now: Millis) {
        let pool = &mut self.state.jobs;
        match queue.changes_since(self.state.queue_cursor) {
            Some(changes) => {
                for ch in changes {
                    let Some(entry) = queue.entry(ch.id) else {
                        continue;
                    };
                    pool.observe_with(ch.id, ch.state, ch.dispatched_to.as_deref(), entry.submit_time, now, || {
                        entry.job.clone()
                    });
                }
            }
            None => {
                log::info!("queue journal cursor {} is stale; resyncing", self.state.queue_cursor);
                pool.sync(&queue.queue_snapshot(), now);
            }
        }
        self.state.queue_cursor = queue.cursor();
        let jobs = &self.state.jobs;
        self.state.holds.retain(|id, _| jobs.get(*id).is_some_and(|e| e.job.queue_state == QueueState::Held));
    }

    /// Polls every VM and folds the answers into the VM state machine.
    pub fn monitor_vms(&mut self, backend: &mut dyn CloudBackend, queue: &mut JobQueue, now: Millis) -> CycleReport {
        let mut report = CycleReport::default();
        let vms: Vec<(String, String, String)> =
            self.state.resources.vms().map(|(c, vm)| (c.name.clone(), vm.name.clone(), vm.id.clone())).collect();
        for (cluster, name, id) in vms {
            let polled = backend.poll(&cluster, &id, now);
            let Some(vm) = self.state.resources.find_vm_mut(&name) else {
                continue;
            };
            let before = vm.vmstate;
            let event = match polled {
                Ok(VmState::Running) if before == VmState::Starting => VmEvent::BootComplete,
                Ok(VmState::Error) if before != VmState::Error => VmEvent::Fault,
                Ok(VmState::Starting)
                    if before == VmState::Starting
                        && now.saturating_sub(vm.last_state_change) >= self.config.boot_timeout =>
                {
                    log::warn!("{name} still starting after {} ms; treating as faulted", now - vm.last_state_change);
                    VmEvent::Fault
                }
                Ok(_) => VmEvent::PollUpdate,
                Err(BackendError::UnknownVm(_)) => {
                    self.state.resources.remove_vm(&name);
                    self.state.draining.remove(&name);
                    report.requeued.extend(queue.vm_died(&name));
                    report.vanished.push(name);
                    continue;
                }
                Err(e) => {
                    vm.note_error_response(now);
                    report.errors.push(format!("poll {name}: {e}"));
                    continue;
                }
            };
            match vm.transition(event, now) {
                Ok(next) => {
                    *vm = next;
                    if vm.vmstate != before {
                        report.transitions.push(Transition { vm: name.clone(), from: before, to: vm.vmstate });
                    }
                }
                Err(e) => report.errors.push(format!("{name}: {e}")),
            }
            if event == VmEvent::Fault {
                report.requeued.extend(queue.vm_died(&name));
            }
        }
        report
    }

    /// Applies a plan. Actions that no longer make sense against the current
    /// state are skipped rather than forced.
    pub fn apply_plan(
        &mut self,
        plan: &ActionPlan,
        backend: &mut dyn CloudBackend,
        queue: &mut JobQueue,
        now: Millis,
    ) -> CycleReport {
        let mut report = CycleReport { targets: plan.targets.clone(), ..Default::default() };

        for (vm, reason) in &plan.kills {
            self.shut_down(vm, *reason, backend, queue, now, &mut report);
        }
        for (vm, reason) in &plan.retire {
            if queue.job_on(vm).is_some() {
                continue;
            }
            if *reason == ShutdownReason::Drained && !self.state.draining.contains_key(vm) {
                continue;
            }
            self.shut_down(vm, *reason, backend, queue, now, &mut report);
        }
        for vm in &plan.undrain {
            if self.state.draining.remove(vm).is_some() {
                report.undrains.push(vm.clone());
            }
        }
        for vm in &plan.graceful_shutdowns {
            if self.state.resources.find_vm(vm).is_some() && !self.state.draining.contains_key(vm) {
                self.state.draining.insert(vm.clone(), now);
                report.drains.push(vm.clone());
            }
        }
        for id in &plan.holds {
            match queue.hold(*id, "rebalance") {
                Ok(()) => {
                    self.state.holds.insert(*id, "rebalance".into());
                    if let Some(e) = self.state.jobs.get_mut(*id) {
                        e.job.queue_state = QueueState::Held;
                    }
                    report.holds.push(*id);
                }
                Err(QueueError::WrongState { .. } | QueueError::UnknownJob(_)) => {}
                Err(e) => report.errors.push(format!("hold {id}: {e}")),
            }
        }
        for order in &plan.boots {
            self.boot(order, backend, now, &mut report);
        }
        for id in &plan.releases {
            match queue.release(*id) {
                Ok(()) => {
                    if let Some(e) = self.state.jobs.get_mut(*id) {
                        e.job.queue_state = QueueState::Queued;
                    }
                    report.releases.push(*id);
                }
                Err(QueueError::WrongState { .. } | QueueError::UnknownJob(_)) => {}
                Err(e) => report.errors.push(format!("release {id}: {e}")),
            }
            self.state.holds.remove(id);
        }
        for id in &plan.flips {
            let linked = self.state.jobs.get(*id).and_then(|e| e.vm.clone());
            let gone = linked.as_deref().is_none_or(|vm| self.state.resources.find_vm(vm).is_none());
            if gone && self.state.jobs.mark_new(*id) {
                report.flipped_to_new.push(*id);
            }
        }
        report
    }

    fn shut_down(
        &mut self,
        name: &str,
        reason: ShutdownReason,
        backend: &mut dyn CloudBackend,
        queue: &mut JobQueue,
        now: Millis,
        report: &mut CycleReport,
    ) {
        let Some((cluster, vm)) = self.state.resources.find_vm(name) else {
            return;
        };
        let cluster = cluster.name.clone();
        let (id, owner, vmtype) = (vm.id.clone(), vm.owner.clone(), vm.vmtype.clone());
        let busy = queue.job_on(name).is_some();
        let result = backend.shutdown(&cluster, &id, now);
        let error = match &result {
            Ok(()) => None,
            Err(e) => Some(e.to_string()),
        };
        match result {
            Ok(()) | Err(BackendError::UnknownVm(_)) => {
                self.state.resources.remove_vm(name);
                self.state.draining.remove(name);
                report.requeued.extend(queue.vm_died(name));
                let linked: Vec<JobId> = self
                    .state
                    .jobs
                    .entries()
                    .filter(|e| e.vm.as_deref() == Some(name))
                    .map(|e| e.job.global_job_id)
                    .collect();
                for id in linked {
                    if self.state.jobs.mark_new(id) {
                        report.flipped_to_new.push(id);
                    }
                }
            }
            Err(_) => {
                if let Some(vm) = self.state.resources.find_vm_mut(name) {
                    vm.note_error_response(now);
                }
            }
        }
        report.shutdowns.push(ShutdownRecord { vm: name.to_string(), cluster, owner, vmtype, reason, busy, error });
    }

    fn boot(&mut self, order: &BootOrder, backend: &mut dyn CloudBackend, now: Millis, report: &mut CycleReport) {
        let fail = |report: &mut CycleReport, error: String| {
            report.boot_failures.push(BootFailure {
                cluster: order.cluster.clone(),
                owner: order.spec.owner.clone(),
                job: order.job,
                error,
            })
        };
        if let Some(id) = order.job {
            if !self.state.jobs.new_list.contains_key(&id) {
                return;
            }
        }
        let Some(cluster) = self.state.resources.cluster(&order.cluster) else {
            fail(report, format!("unknown cluster {}", order.cluster));
            return;
        };
        let fitted = fits(&order.spec.as_job(), cluster);
        if !fitted {
            fail(report, format!("{} no longer fits the VM", cluster.name));
            return;
        }
        let name = format!("vm-{:06}", self.state.next_vm_seq);
        match backend.boot(cluster, &name, &order.spec, now) {
            Ok(id) => {
                self.state.next_vm_seq += 1;
                let spec = &order.spec;
                let record = VmRecord {
                    name: name.clone(),
                    id: id.clone(),
                    vmtype: spec.vmtype.clone(),
                    vmstate: VmState::Starting,
                    hostname: String::new(),
                    clusteraddr: cluster.host.clone(),
                    network: spec.network,
                    cpuarch: spec.cpuarch,
                    image: spec.image.clone(),
                    memory: spec.memory,
                    cpucores: spec.cpucores,
                    storage: spec.storage,
                    errorcount: 0,
                    lastpoll: now,
                    last_state_change: now,
                    owner: spec.owner.clone(),
                };
                let c = self.state.resources.cluster_mut(&order.cluster).expect("cluster checked above");
                c.vms.push(record);
                let (occupancy_after, slots) = (c.vms.len() as u32, c.vm_slots);
                if let Some(job) = order.job {
                    self.state.jobs.mark_scheduled(job, &name);
                }
                report.boots.push(BootRecord {
                    vm: name,
                    id,
                    cluster: order.cluster.clone(),
                    owner: spec.owner.clone(),
                    vmtype: spec.vmtype.clone(),
                    job: order.job,
                    reason: order.reason,
                    occupancy_after,
                    slots,
                    fitted,
                });
            }
            Err(e) => fail(report, e.to_string()),
        }
    }

    /// Scheduler thread: reconcile VM states, replace errored VMs, then
    /// rebalance toward fair share.
    pub fn schedule(&mut self, backend: &mut dyn CloudBackend, queue: &mut JobQueue, now: Millis) -> CycleReport {
        let mut report = self.monitor_vms(backend, queue, now);
        let sweep = plan::error_sweep(&self.state, &self.config);
        if !sweep.is_empty() {
            report.absorb(self.apply_plan(&sweep, backend, queue, now));
        }
        let balance = plan::plan(&self.state, &self.config);
        report.absorb(self.apply_plan(&balance, backend, queue, now));
        report
    }

    /// CleanUp thread.
    pub fn clean_up(&mut self, backend: &mut dyn CloudBackend, queue: &mut JobQueue, now: Millis) -> CycleReport {
        let p = plan::cleanup(&self.state, &self.config, now);
        let mut report = self.apply_plan(&p, backend, queue, now);
        report.targets.clear();
        report
    }

    /// One serialized pass of all three loops.
    pub fn run_cycle(&mut self, now: Millis, queue: &mut JobQueue, backend: &mut dyn CloudBackend) -> CycleReport {
        self.state.now = self.state.now.max(now);
        let mut report = CycleReport { cycle: self.state.cycle, now, ..Default::default() };
        self.poll_jobs(queue, now);
        report.absorb(self.schedule(backend, queue, now));
        report.absorb(self.clean_up(backend, queue, now));
        self.state.cycle += 1;
        report
    }

    /// Stops managing. KillAll shuts every VM down; Persist leaves them
    /// running and returns the snapshot document for the caller to store.
    pub fn shutdown(
        &mut self,
        mode: ShutdownMode,
        backend: &mut dyn CloudBackend,
        queue: &mut JobQueue,
        now: Millis,
    ) -> (CycleReport, Option<String>) {
        let mut report = CycleReport { cycle: self.state.cycle, now, ..Default::default() };
        match mode {
            ShutdownMode::KillAll => {
                let names: Vec<String> = self.state.resources.vms().map(|(_, vm)| vm.name.clone()).collect();
                for name in names {
                    self.shut_down(&name, ShutdownReason::KillAll, backend, queue, now, &mut report);
                }
                let orphaned: Vec<JobId> = self.state.jobs.scheduled_list.keys().copied().collect();
                for id in orphaned {
                    if self.state.jobs.mark_new(id) {
                        report.flipped_to_new.push(id);
                    }
                }
                (report, None)
            }
            ShutdownMode::Persist => (report, Some(crate::persist::snapshot(&self.state))),
        }
    }
}
