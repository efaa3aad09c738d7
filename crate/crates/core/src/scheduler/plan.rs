//! Pure planning: every decision the scheduler makes is first computed as
//! an [`ActionPlan`] from a consistent view of [`SchedulerState`], then
//! applied against the queue and the clouds.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::fairshare::{fair_share_targets, UserDemand};
use super::{RebalanceMode, SchedulerConfig, SchedulerState};
use crate::backend::VmSpec;
use crate::matcher::shape_fits;
use crate::model::{CpuArch, Job, JobId, Millis, Network, PoolEntry, QueueState, SchedState, VmState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BootReason {
    /// A New job's owner is below its fair share.
    Demand,
    /// Stands in for a VM shut down because of an error.
    Replacement,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BootOrder {
    pub cluster: String,
    pub spec: VmSpec,
    /// The New job this VM is booted for; it becomes Scheduled on success.
    pub job: Option<JobId>,
    pub reason: BootReason,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ShutdownReason {
    /// VM in Error state or past the error threshold.
    Error,
    /// Killed outright to rebalance fair share.
    Rebalance,
    /// Draining VM that finished its job.
    Drained,
    /// Idle VM whose type no outstanding job needs.
    Unneeded,
    /// Draining VM that did not go idle within the drain timeout.
    DrainTimeout,
    /// Operator shutdown of every managed VM.
    KillAll,
}

/// Decisions of one planning pass.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionPlan {
    pub boots: Vec<BootOrder>,
    /// VMs to retire once their current job completes (marked draining).
    pub graceful_shutdowns: Vec<String>,
    /// Draining marks to lift.
    pub undrain: Vec<String>,
    /// VMs to shut down now, whatever they are running.
    pub kills: Vec<(String, ShutdownReason)>,
    /// Idle VMs to shut down now.
    pub retire: Vec<(String, ShutdownReason)>,
    pub holds: Vec<JobId>,
    pub releases: Vec<JobId>,
    /// Scheduled jobs whose VM is gone; they go back to New.
    pub flips: Vec<JobId>,
    /// Fair-share targets the plan was computed against.
    pub targets: BTreeMap<String, u32>,
}

impl ActionPlan {
    pub fn is_empty(&self) -> bool {
        self.boots.is_empty()
            && self.graceful_shutdowns.is_empty()
            && self.undrain.is_empty()
            && self.kills.is_empty()
            && self.retire.is_empty()
            && self.holds.is_empty()
            && self.releases.is_empty()
            && self.flips.is_empty()
    }
}

/// Per-user view of who owns which VMs and what is still demanded.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Allocation {
    /// user → VM names owned
    pub owned: BTreeMap<String, Vec<String>>,
    /// user → vmtype → outstanding jobs
    pub demand: BTreeMap<String, BTreeMap<String, u32>>,
}

impl Allocation {
    pub fn of(state: &SchedulerState) -> Allocation {
        let mut alloc = Allocation::default();
        for (_, vm) in state.resources.vms() {
            alloc.owned.entry(vm.owner.clone()).or_default().push(vm.name.clone());
        }
        for e in state.jobs.entries() {
            *alloc.demand.entry(e.job.user.clone()).or_default().entry(e.job.vmtype.clone()).or_default() += 1;
        }
        alloc
    }

    /// VMs owned by `user`.
    pub fn count(&self, user: &str) -> usize {
        self.owned.get(user).map_or(0, Vec::len)
    }
}

/// VMs currently running a job, by the job pool's mirror of the queue.
pub(crate) fn busy_vms(state: &SchedulerState) -> BTreeMap<&str, Millis> {
    state
        .jobs
        .scheduled_list
        .values()
        .filter(|e| e.job.queue_state == QueueState::Dispatched)
        .filter_map(|e| e.vm.as_deref().map(|vm| (vm, e.running_since.unwrap_or(0))))
        .collect()
}

fn outstanding_by_type(state: &SchedulerState) -> BTreeMap<&str, u32> {
    let mut out = BTreeMap::new();
    for e in state.jobs.entries() {
        *out.entry(e.job.vmtype.as_str()).or_default() += 1;
    }
    out
}

type ShapeKey<'a> = (CpuArch, Network, u64, u64, u32, &'a str, &'a str);

fn shape_key(job: &Job) -> ShapeKey<'_> {
    (job.vm_cpu_arch, job.vm_network, job.vm_mem, job.vm_storage, job.vm_cpu_cores, &job.vm_loc, &job.vm_ami)
}

/// Fair-share demand: outstanding jobs whose VM shape some cluster accepts.
pub fn user_demands(state: &SchedulerState) -> Vec<UserDemand> {
    let clusters = &state.resources.clusters;
    let mut by_user: BTreeMap<&str, UserDemand> = BTreeMap::new();
    let mut shape_cache: BTreeMap<ShapeKey, bool> = BTreeMap::new();
    for e in state.jobs.entries() {
        let job = &e.job;
        let satisfiable =
            *shape_cache.entry(shape_key(job)).or_insert_with(|| clusters.iter().any(|c| shape_fits(job, c)));
        if !satisfiable {
            continue;
        }
        let d = by_user.entry(job.user.as_str()).or_insert_with(|| UserDemand {
            user: job.user.clone(),
            demand: 0,
            earliest: e.submit_time,
        });
        d.demand += 1;
        d.earliest = d.earliest.min(e.submit_time);
    }
    by_user.into_values().collect()
}

/// Kill (and where needed replace) every VM in Error or past the error
/// threshold.
pub fn error_sweep(state: &SchedulerState, config: &SchedulerConfig) -> ActionPlan {
    let mut plan = ActionPlan::default();
    let mut occupancy: Vec<u32> = state.resources.clusters.iter().map(|c| c.vms.len() as u32).collect();
    let failed: Vec<(usize, &crate::model::VmRecord)> = state
        .resources
        .clusters
        .iter()
        .enumerate()
        .flat_map(|(i, c)| c.vms.iter().map(move |vm| (i, vm)))
        .filter(|(_, vm)| vm.vmstate == VmState::Error || vm.errorcount >= config.error_threshold)
        .collect();
    if failed.is_empty() {
        return plan;
    }
    for (i, vm) in &failed {
        plan.kills.push((vm.name.clone(), ShutdownReason::Error));
        occupancy[*i] -= 1;
    }

    let failed_names: BTreeSet<&str> = failed.iter().map(|(_, vm)| vm.name.as_str()).collect();
    let outstanding = outstanding_by_type(state);
    let mut healthy: BTreeMap<&str, u32> = BTreeMap::new();
    for (_, vm) in state.resources.vms() {
        if !failed_names.contains(vm.name.as_str()) && !state.draining.contains_key(&vm.name) {
            *healthy.entry(vm.vmtype.as_str()).or_default() += 1;
        }
    }

    for (_, vm) in &failed {
        let need = outstanding.get(vm.vmtype.as_str()).copied().unwrap_or(0);
        let have = healthy.entry(vm.vmtype.as_str()).or_default();
        if need <= *have {
            continue;
        }
        // Shape the replacement after a job that needs it, the owner's first.
        let mut wanting: Vec<&PoolEntry> = state.jobs.entries().filter(|e| e.job.vmtype == vm.vmtype).collect();
        wanting.sort_by_key(|e| (e.job.user != vm.owner, e.submit_time, e.job.global_job_id));
        let placed = wanting.iter().find_map(|e| {
            state.resources.clusters.iter().enumerate().find_map(|(ci, c)| {
                (occupancy[ci] < c.vm_slots && shape_fits(&e.job, c))
                    .then(|| VmSpec::for_job(&e.job, c).map(|spec| (ci, spec)))
                    .flatten()
            })
        });
        if let Some((ci, mut spec)) = placed {
            spec.owner = vm.owner.clone();
            occupancy[ci] += 1;
            *have += 1;
            plan.boots.push(BootOrder {
                cluster: state.resources.clusters[ci].name.clone(),
                spec,
                job: None,
                reason: BootReason::Replacement,
            });
        }
    }
    plan
}

struct VmView<'a> {
    name: &'a str,
    cluster: usize,
    owner: &'a str,
    vmtype: &'a str,
    busy_since: Option<Millis>,
}

/// Fair-share pass: boot for under-allocated users, drain or kill for
/// over-allocated ones, and hold or release the jobs guarding a drain.
pub fn plan(state: &SchedulerState, config: &SchedulerConfig) -> ActionPlan {
    let mut plan = ActionPlan::default();
    let clusters = &state.resources.clusters;
    let demands = user_demands(state);
    let targets = fair_share_targets(&demands, state.resources.total_slots());
    let busy = busy_vms(state);
    let mut occupancy: Vec<u32> = clusters.iter().map(|c| c.vms.len() as u32).collect();

    let mut by_owner: BTreeMap<&str, Vec<VmView>> = BTreeMap::new();
    for (ci, c) in clusters.iter().enumerate() {
        for vm in &c.vms {
            if vm.vmstate == VmState::Error {
                continue;
            }
            by_owner.entry(vm.owner.as_str()).or_default().push(VmView {
                name: &vm.name,
                cluster: ci,
                owner: &vm.owner,
                vmtype: &vm.vmtype,
                busy_since: busy.get(vm.name.as_str()).copied(),
            });
        }
    }

    let mut draining: BTreeSet<&str> = state.draining.keys().map(String::as_str).collect();
    let mut active_count: BTreeMap<&str, u32> = BTreeMap::new();

    for (owner, vms) in &by_owner {
        let target = targets.get(*owner).copied().unwrap_or(0);
        let (mut drained, mut active): (Vec<&VmView>, Vec<&VmView>) =
            vms.iter().partition(|v| draining.contains(v.name));
        let mut count = active.len() as u32;

        if count > target {
            let excess = (count - target) as usize;
            // Idle first; among busy VMs kill the youngest, drain the one
            // whose job started most recently.
            active.sort_by(|a, b| match config.rebalance_mode {
                RebalanceMode::Kill => (a.busy_since.is_some(), std::cmp::Reverse(a.name))
                    .cmp(&(b.busy_since.is_some(), std::cmp::Reverse(b.name))),
                RebalanceMode::Graceful => {
                    (a.busy_since.is_some(), std::cmp::Reverse(a.busy_since), std::cmp::Reverse(a.name)).cmp(&(
                        b.busy_since.is_some(),
                        std::cmp::Reverse(b.busy_since),
                        std::cmp::Reverse(b.name),
                    ))
                }
            });
            for v in active.drain(..excess) {
                match config.rebalance_mode {
                    RebalanceMode::Kill => {
                        plan.kills.push((v.name.to_string(), ShutdownReason::Rebalance));
                        occupancy[v.cluster] -= 1;
                    }
                    RebalanceMode::Graceful => {
                        plan.graceful_shutdowns.push(v.name.to_string());
                        draining.insert(v.name);
                        drained.push(v);
                    }
                }
            }
            count = target;
        } else if count < target && !drained.is_empty() {
            // Lift drain marks before booting anything new, busy VMs first.
            drained.sort_by_key(|v| (v.busy_since.is_none(), v.name));
            let k = ((target - count) as usize).min(drained.len());
            for v in drained.drain(..k) {
                plan.undrain.push(v.name.to_string());
                draining.remove(v.name);
                active.push(v);
                count += 1;
            }
        }

        if config.rebalance_mode == RebalanceMode::Graceful {
            // The next VM to finish its job is the one to retire: move drain
            // marks from busy VMs onto idle ones.
            let mut busy_drained: Vec<&VmView> = drained.iter().copied().filter(|v| v.busy_since.is_some()).collect();
            let mut idle_active: Vec<&VmView> = active.iter().copied().filter(|v| v.busy_since.is_none()).collect();
            busy_drained.sort_by_key(|v| v.name);
            idle_active.sort_by_key(|v| v.name);
            for (d, a) in busy_drained.into_iter().zip(idle_active) {
                if plan.graceful_shutdowns.iter().any(|n| n == d.name) {
                    plan.graceful_shutdowns.retain(|n| n != d.name);
                } else {
                    plan.undrain.push(d.name.to_string());
                }
                draining.remove(d.name);
                plan.graceful_shutdowns.push(a.name.to_string());
                draining.insert(a.name);
            }
        }
        active_count.insert(owner, count);
    }

    // Boots for users below target, earliest submitter first.
    let mut new_jobs: BTreeMap<&str, Vec<&PoolEntry>> = BTreeMap::new();
    for e in state.jobs.new_list.values() {
        if e.job.queue_state == QueueState::Queued {
            new_jobs.entry(e.job.user.as_str()).or_default().push(e);
        }
    }
    let mut order: Vec<&UserDemand> = demands.iter().collect();
    order.sort_by(|a, b| (a.earliest, &a.user).cmp(&(b.earliest, &b.user)));
    for d in order {
        let target = targets.get(&d.user).copied().unwrap_or(0);
        let have = active_count.get(d.user.as_str()).copied().unwrap_or(0);
        if have >= target {
            continue;
        }
        let mut need = target - have;
        let Some(jobs) = new_jobs.get_mut(d.user.as_str()) else {
            continue;
        };
        jobs.sort_by_key(|e| (e.submit_time, e.job.global_job_id));
        for e in jobs.iter() {
            if need == 0 {
                break;
            }
            let slot = clusters.iter().enumerate().find(|(ci, c)| occupancy[*ci] < c.vm_slots && shape_fits(&e.job, c));
            if let Some((ci, c)) = slot {
                if let Some(spec) = VmSpec::for_job(&e.job, c) {
                    occupancy[ci] += 1;
                    need -= 1;
                    plan.boots.push(BootOrder {
                        cluster: c.name.clone(),
                        spec,
                        job: Some(e.job.global_job_id),
                        reason: BootReason::Demand,
                    });
                }
            }
        }
    }

    // Holds guard draining VMs against their owner's pending jobs.
    let guarded: BTreeSet<(&str, &str)> =
        by_owner.values().flatten().filter(|v| draining.contains(v.name)).map(|v| (v.owner, v.vmtype)).collect();
    if config.rebalance_mode == RebalanceMode::Graceful {
        for e in state.jobs.entries() {
            let key = (e.job.user.as_str(), e.job.vmtype.as_str());
            if e.job.queue_state == QueueState::Queued
                && guarded.contains(&key)
                && !state.holds.contains_key(&e.job.global_job_id)
            {
                plan.holds.push(e.job.global_job_id);
            }
        }
    }
    for id in state.holds.keys() {
        let still_guarded = config.rebalance_mode == RebalanceMode::Graceful
            && state.jobs.get(*id).is_some_and(|e| guarded.contains(&(e.job.user.as_str(), e.job.vmtype.as_str())));
        if !still_guarded {
            plan.releases.push(*id);
        }
    }
    plan.holds.sort();

    plan.targets = targets;
    plan
}

/// Retire VMs that are no longer required and repair jobs whose VM is gone.
pub fn cleanup(state: &SchedulerState, config: &SchedulerConfig, now: Millis) -> ActionPlan {
    let mut plan = ActionPlan::default();
    let busy = busy_vms(state);
    let outstanding = outstanding_by_type(state);
    for (_, vm) in state.resources.vms() {
        if vm.vmstate == VmState::Error {
            continue;
        }
        let idle = !busy.contains_key(vm.name.as_str());
        match state.draining.get(&vm.name) {
            Some(_) if idle => plan.retire.push((vm.name.clone(), ShutdownReason::Drained)),
            Some(&since) => {
                if config.drain_timeout.is_some_and(|t| now.saturating_sub(since) >= t) {
                    plan.kills.push((vm.name.clone(), ShutdownReason::DrainTimeout));
                }
            }
            None if idle && outstanding.get(vm.vmtype.as_str()).copied().unwrap_or(0) == 0 => {
                plan.retire.push((vm.name.clone(), ShutdownReason::Unneeded));
            }
            None => {}
        }
    }
    for (id, e) in &state.jobs.scheduled_list {
        debug_assert_eq!(e.job.sched_state, SchedState::Scheduled);
        let vm_alive = e.vm.as_deref().is_some_and(|name| state.resources.find_vm(name).is_some());
        if !vm_alive {
            plan.flips.push(*id);
        }
    }
    plan
}
