//! Shared fixtures for the integration suites: scenario builders, a random
//! scenario generator, trace oracles, the fair-share oracles and the parser
//! fuzzer.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};

use cloudsched::backend::{BootLatency, SimCloudConfig, VmSelector};
use cloudsched::matcher;
use cloudsched::model::{CloudType, Cluster, CpuArch, JobId, Millis, Network, QueueState, SchedState, MINUTE, SECOND};
use cloudsched::scheduler::{fair_share_targets, RebalanceMode, ShutdownReason, UserDemand};
use cloudsched::sim::{Arrival, FaultEvent, Metrics, Scenario, SimCluster, Simulation, StepOutcome, TraceEvent};
use cloudsched::submit::{descriptor_to_jobs, parse_submit, SubmitDescriptor, SubmitError};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

pub const PERIOD: Millis = 60 * SECOND;

pub const APPENDIX_SAMPLE: &str = "Regular Condor Attributes
Universe                = vanilla
Executable              = script.sh
Arguments               = one two three
Log                     = script.log
Output                  = script.out
Error                   = script.error
should_transfer_files   = YES
when_to_transfer_output = ON_EXIT
#
# Cloud Scheduler Attributes
Requirements =
+VMType                 = \"vm-name\"
+VMLoc                  = \"http://repository.tld/your.vm.img.gz\"
+VMAMI                  = \"ami-dfasfds\"
+VMCPUArch              = \"x86\"
+VMCPUCores             = \"1\"
+VMNetwork              = \"private\"
+VMMem                  = \"512\"
+VMStorage              = \"20\"
Queue
";

// ---------------------------------------------------------------- builders

pub fn cluster(name: &str, slots: u32) -> Cluster {
    Cluster {
        name: name.into(),
        host: format!("{name}.example"),
        cloud_type: CloudType::Simulated,
        memory: 4096,
        cpu_archs: [CpuArch::X86, CpuArch::X86_64].into(),
        networks: [Network::Private, Network::Public].into(),
        vm_slots: slots,
        cpu_cores: 4,
        storage: 100,
        vms: vec![],
    }
}

pub fn sim(cluster: Cluster, latency: Millis, seed: u64) -> SimCluster {
    SimCluster {
        cluster,
        sim: SimCloudConfig { boot_latency: BootLatency::Fixed(latency), rng_seed: seed, ..Default::default() },
    }
}

pub fn descriptor(vmtype: &str, count: u32) -> SubmitDescriptor {
    parse_submit(&format!(
        "+VMType = \"{vmtype}\"\n+VMLoc = \"http://img/{vmtype}.img\"\n+VMMem = \"512\"\nQueue {count}"
    ))
    .unwrap()
}

pub fn arrival(at: Millis, user: &str, vmtype: &str, count: u32, duration: Millis) -> Arrival {
    Arrival { at, user: user.into(), descriptor: descriptor(vmtype, count), duration, count: 1 }
}

pub fn scenario_path(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

// ---------------------------------------------------------------- generator

#[derive(Debug, Clone, Copy)]
pub struct GenSpec {
    pub mode: RebalanceMode,
    /// Spontaneous fault rate is drawn from [0, max_fault_rate].
    pub max_fault_rate: f64,
    pub scripted_faults: bool,
    pub boot_failures: bool,
    /// Job durations are drawn from [30 s, max_duration].
    pub max_duration: Millis,
}

impl GenSpec {
    pub fn clean(mode: RebalanceMode) -> Self {
        GenSpec { mode, max_fault_rate: 0.0, scripted_faults: false, boot_failures: false, max_duration: 40 * MINUTE }
    }
}

fn pick_subset<T: Copy + Ord>(rng: &mut ChaCha8Rng, all: &[T]) -> BTreeSet<T> {
    loop {
        let s: BTreeSet<T> = all.iter().copied().filter(|_| rng.random_bool(0.6)).collect();
        if !s.is_empty() {
            return s;
        }
    }
}

/// A random but runnable scenario: every job fits at least one cluster.
pub fn random_scenario(seed: u64, spec: GenSpec) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = Scenario::new(seed);
    s.horizon = 30 * 24 * 3600 * SECOND;
    s.scheduler.rebalance_mode = spec.mode;

    let fault_rate = if spec.max_fault_rate > 0.0 { rng.random_range(0.0..=spec.max_fault_rate) } else { 0.0 };
    for c in 0..rng.random_range(1..=3) {
        let cluster = Cluster {
            name: format!("c{c}"),
            host: format!("c{c}.example"),
            cloud_type: CloudType::Simulated,
            memory: *[1024u64, 2048, 4096].choose(&mut rng).unwrap(),
            cpu_archs: pick_subset(&mut rng, &[CpuArch::X86, CpuArch::X86_64]),
            networks: pick_subset(&mut rng, &[Network::Private, Network::Public]),
            vm_slots: rng.random_range(1..=8),
            cpu_cores: *[1u32, 2, 4].choose(&mut rng).unwrap(),
            storage: *[10u64, 50, 100].choose(&mut rng).unwrap(),
            vms: vec![],
        };
        let lo = rng.random_range(0..=120) * SECOND;
        let boot_latency =
            if rng.random_bool(0.5) { BootLatency::Fixed(lo) } else { BootLatency::Uniform(lo, lo + 60 * SECOND) };
        let sim = SimCloudConfig {
            boot_latency,
            fault_rate,
            boot_failure_rate: if spec.boot_failures { rng.random_range(0.0..=0.05) } else { 0.0 },
            rng_seed: rng.random(),
        };
        s.clusters.push(SimCluster { cluster, sim });
    }

    let users = rng.random_range(1..=4);
    let shared_type = rng.random_bool(0.2);
    for u in 0..users {
        let user = format!("user{u}");
        let vmtype = if shared_type { "shared".to_string() } else { format!("type{u}") };
        let template = s.clusters.choose(&mut rng).unwrap().cluster.clone();
        let arch = *template.cpu_archs.iter().collect::<Vec<_>>().choose(&mut rng).unwrap();
        let net = *template.networks.iter().collect::<Vec<_>>().choose(&mut rng).unwrap();
        let mem = rng.random_range(1..=template.memory / 256) * 256;
        let cores = rng.random_range(1..=template.cpu_cores);
        let storage = rng.random_range(0..=template.storage);
        for _ in 0..rng.random_range(1..=3) {
            let count = rng.random_range(1..=12);
            let text = format!(
                "+VMType = \"{vmtype}\"\n+VMLoc = \"http://img/{vmtype}.img\"\n+VMAMI = \"ami-{u}\"\n\
                 +VMCPUArch = \"{arch}\"\n+VMNetwork = \"{net}\"\n+VMMem = \"{mem}\"\n\
                 +VMCPUCores = \"{cores}\"\n+VMStorage = \"{storage}\"\nQueue {count}\n"
            );
            s.arrivals.push(Arrival {
                at: rng.random_range(0..=40) * PERIOD,
                user: user.clone(),
                descriptor: parse_submit(&text).unwrap(),
                duration: rng.random_range(30 * SECOND..=spec.max_duration),
                count: 1,
            });
        }
    }
    s.arrivals.sort_by_key(|a| a.at);

    if spec.scripted_faults {
        for _ in 0..rng.random_range(0..=4) {
            let c = s.clusters.choose(&mut rng).unwrap().cluster.name.clone();
            let vm = if rng.random_bool(0.5) { VmSelector::Oldest } else { VmSelector::Newest };
            s.faults.push(FaultEvent { at: rng.random_range(1..=60) * PERIOD, cluster: c, vm });
        }
        s.faults.sort_by_key(|f| f.at);
    }
    s.validate().expect("generated scenario is valid");
    s
}

/// The same scenario with every fault source switched off.
pub fn without_faults(s: &Scenario) -> Scenario {
    let mut s = s.clone();
    s.faults.clear();
    for c in &mut s.clusters {
        c.sim.fault_rate = 0.0;
        c.sim.boot_failure_rate = 0.0;
    }
    s
}

// ---------------------------------------------------------------- running

pub struct Observed {
    pub metrics: Metrics,
    pub trace: Vec<TraceEvent>,
    pub violations: Vec<String>,
    /// Slot and fits() violations, also included in `violations`.
    pub capacity: Vec<String>,
    pub boots_checked: u64,
}

/// Steps a scenario to the end with invariant checking on, calling `each`
/// after every step.
pub fn run_checked(s: &Scenario, mut each: impl FnMut(&Simulation, &StepOutcome, &mut Vec<String>)) -> Observed {
    let mut sim = Simulation::new(s).unwrap();
    sim.check = true;
    let mut violations = Vec::new();
    let mut capacity_violations = Vec::new();
    let mut boots_checked = 0;
    while !sim.finished() {
        let out = sim.step();
        boots_checked += out.report.boots.len() as u64;
        violations.extend(out.violations.iter().cloned());
        let cap = capacity(&sim, &out);
        violations.extend(cap.iter().cloned());
        capacity_violations.extend(cap);
        violations.extend(conservation(&sim));
        each(&sim, &out, &mut violations);
    }
    Observed { metrics: sim.metrics, trace: sim.trace, violations, capacity: capacity_violations, boots_checked }
}

/// Slot counts on both sides of the backend, and every VM booted this step
/// checked field by field against the cluster that runs it.
pub fn capacity(sim: &Simulation, out: &StepOutcome) -> Vec<String> {
    let k = out.cycle;
    let mut v = Vec::new();
    for c in &sim.resources().clusters {
        if c.vms.len() > c.vm_slots as usize {
            v.push(format!("cycle {k}: {} holds {} VMs in {} slots", c.name, c.vms.len(), c.vm_slots));
        }
        let running = sim.cloud.cluster(&c.name).map_or(0, |sc| sc.vms.len());
        if running > c.vm_slots as usize {
            v.push(format!("cycle {k}: cloud {} runs {running} VMs in {} slots", c.name, c.vm_slots));
        }
    }
    for b in &out.report.boots {
        let Some(c) = sim.resources().cluster(&b.cluster) else {
            v.push(format!("cycle {k}: boot on unknown cluster {}", b.cluster));
            continue;
        };
        // A VM can fault and be swept within the step it booted in.
        let Some(vm) = c.vm(&b.vm) else { continue };
        let fits = vm.memory <= c.memory
            && c.cpu_archs.contains(&vm.cpuarch)
            && c.networks.contains(&vm.network)
            && vm.cpucores <= c.cpu_cores
            && vm.storage <= c.storage;
        if !fits || b.occupancy_after > c.vm_slots {
            v.push(format!("cycle {k}: {} on {} does not fit: {vm:?}", b.vm, c.name));
        }
    }
    v
}

/// Work conservation recomputed from the queue entries: finished work plus
/// work still owed plus progress of running jobs equals submitted work.
pub fn conservation(sim: &Simulation) -> Option<String> {
    let (mut submitted, mut done, mut owed, mut running) = (0u64, 0u64, 0u64, 0u64);
    for e in sim.queue.entries() {
        submitted += e.duration;
        match e.queue_state {
            QueueState::Completed => done += e.duration,
            QueueState::Removed => {}
            QueueState::Dispatched => {
                owed += e.remaining_work;
                running += e.duration - e.remaining_work;
            }
            _ => {
                if e.remaining_work != e.duration {
                    return Some(format!("cycle {}: job {} waits with partial work", sim.cycle(), e.job.global_job_id));
                }
                owed += e.remaining_work
            }
        }
    }
    (done + owed + running != submitted).then(|| {
        format!("cycle {}: {done} done + {owed} owed + {running} running != {submitted} submitted", sim.cycle())
    })
}

/// Shutdowns issued while the trace shows a job running on the VM. A VM is
/// busy from a Dispatch to it until that job's Complete or Requeue.
pub fn busy_shutdowns(trace: &[TraceEvent]) -> Vec<String> {
    let mut on: BTreeMap<String, JobId> = BTreeMap::new();
    let mut where_: BTreeMap<JobId, String> = BTreeMap::new();
    let mut out = Vec::new();
    for ev in trace {
        match ev {
            TraceEvent::Dispatch { job, vm, .. } => {
                on.insert(vm.clone(), *job);
                where_.insert(*job, vm.clone());
            }
            TraceEvent::Complete { job, .. } | TraceEvent::Requeue { job, .. } => {
                if let Some(vm) = where_.remove(job) {
                    on.remove(&vm);
                }
            }
            TraceEvent::Shutdown { cycle, vm, reason, busy } => {
                if let Some(job) = on.get(vm) {
                    out.push(format!("cycle {cycle}: {reason:?} shutdown of {vm} while job {job} runs there"));
                } else if *busy {
                    out.push(format!("cycle {cycle}: {vm} reported busy at shutdown"));
                }
            }
            _ => {}
        }
    }
    out
}

/// Every held job is released later and nothing is held at the end.
pub fn unreleased_holds(trace: &[TraceEvent]) -> Vec<String> {
    let mut held: BTreeSet<JobId> = BTreeSet::new();
    for ev in trace {
        match ev {
            TraceEvent::Hold { job, .. } => {
                held.insert(*job);
            }
            TraceEvent::Release { job, .. } => {
                held.remove(job);
            }
            _ => {}
        }
    }
    held.into_iter().map(|j| format!("job {j} never released")).collect()
}

/// Every completion lands exactly one full duration after the job's last
/// dispatch, so a requeued job reran from scratch.
pub fn partial_completions(trace: &[TraceEvent], durations: &BTreeMap<JobId, Millis>) -> Vec<String> {
    let mut started: BTreeMap<JobId, Millis> = BTreeMap::new();
    let mut out = Vec::new();
    for ev in trace {
        match ev {
            TraceEvent::Dispatch { cycle, job, .. } => {
                started.insert(*job, cycle * PERIOD);
            }
            TraceEvent::Complete { job, at, .. } => {
                let Some(d) = durations.get(job) else { continue };
                match started.get(job) {
                    Some(t) if t + d == *at => {}
                    other => out.push(format!("job {job} completed at {at} after dispatch at {other:?}")),
                }
            }
            _ => {}
        }
    }
    out
}

/// Job durations by id; the harness numbers jobs from 1 in arrival order.
pub fn scenario_durations(s: &Scenario) -> BTreeMap<JobId, Millis> {
    let mut out = BTreeMap::new();
    let mut next = 1;
    for a in &s.arrivals {
        for _ in 0..a.jobs() {
            out.insert(JobId(next), a.duration);
            next += 1;
        }
    }
    out
}

pub fn incomplete(m: &Metrics) -> Option<String> {
    (m.jobs_completed != m.jobs_submitted)
        .then(|| format!("{} of {} jobs completed", m.jobs_completed, m.jobs_submitted))
}

/// Per-step error-recovery checks: each faulted VM is shut down by the end of
/// the next cycle, no job stays Scheduled to it, and a replacement boots by
/// the end of the next cycle whenever demand for that type is left unmet
/// with room to place it.
#[derive(Default)]
pub struct RecoveryWatch {
    /// vm → cycle it faulted in
    pending: BTreeMap<String, u64>,
    /// (cycle of error shutdown, vmtype)
    replace: Vec<(u64, String)>,
    /// vmtype → last cycle it was booted
    booted: BTreeMap<String, u64>,
    pub faults_seen: u64,
    pub error_shutdowns: u64,
}

impl RecoveryWatch {
    pub fn step(&mut self, sim: &Simulation, out: &StepOutcome, v: &mut Vec<String>) {
        let k = out.cycle;
        for b in &out.report.boots {
            self.booted.insert(b.vmtype.clone(), k);
        }
        for vm in &out.faulted {
            self.faults_seen += 1;
            self.pending.insert(vm.clone(), k);
        }
        for s in &out.report.shutdowns {
            if s.reason == ShutdownReason::Error {
                self.error_shutdowns += 1;
                self.pending.remove(&s.vm);
                self.replace.push((k, s.vmtype.clone()));
            }
        }
        let state = &sim.scheduler.state;
        for (vm, at) in &self.pending {
            if k > *at {
                v.push(format!("cycle {k}: errored VM {vm} from cycle {at} still not shut down"));
            }
        }
        self.pending.retain(|_, at| k <= *at);
        for e in state.jobs.entries() {
            if let Some(vm) = &e.vm {
                if state.resources.find_vm(vm).is_none() {
                    v.push(format!("cycle {k}: job {} still tied to vanished VM {vm}", e.job.global_job_id));
                }
            }
        }

        let demand = unmet_demand(sim);
        let mut keep = Vec::new();
        for (at, vmtype) in self.replace.drain(..) {
            if self.booted.get(&vmtype).is_some_and(|&b| b >= at) {
                continue;
            }
            if k < at + 1 {
                keep.push((at, vmtype));
            } else if demand.contains(&vmtype) {
                v.push(format!("cycle {k}: no replacement for {vmtype} VM lost in cycle {at} despite unmet demand"));
            }
        }
        self.replace = keep;
    }
}

/// VM types with a queued, unscheduled job whose owner is below fair share
/// and which some cluster has room for right now.
fn unmet_demand(sim: &Simulation) -> BTreeSet<String> {
    let state = &sim.scheduler.state;
    let mut per_user: BTreeMap<&str, UserDemand> = BTreeMap::new();
    for e in state.jobs.entries() {
        if state.resources.clusters.iter().any(|c| matcher::shape_fits(&e.job, c)) {
            let d = per_user.entry(&e.job.user).or_insert_with(|| UserDemand {
                user: e.job.user.clone(),
                demand: 0,
                earliest: Millis::MAX,
            });
            d.demand += 1;
            d.earliest = d.earliest.min(e.submit_time);
        }
    }
    let demands: Vec<UserDemand> = per_user.into_values().collect();
    let targets = fair_share_targets(&demands, state.resources.total_slots());
    let mut owned: BTreeMap<&str, u32> = BTreeMap::new();
    for (_, vm) in state.resources.vms() {
        *owned.entry(&vm.owner).or_default() += 1;
    }
    state
        .jobs
        .entries()
        .filter(|e| e.job.sched_state == SchedState::New && e.job.queue_state == QueueState::Queued)
        .filter(|e| {
            owned.get(e.job.user.as_str()).copied().unwrap_or(0) < targets.get(&e.job.user).copied().unwrap_or(0)
        })
        .filter(|e| state.resources.clusters.iter().any(|c| matcher::fits(&e.job, c)))
        .map(|e| e.job.vmtype.clone())
        .collect()
}

// ---------------------------------------------------------------- fair share

/// Enumerates every allocation with `x[i] <= demand[i]` and the largest
/// feasible total, and keeps the leximin-best one; among equals, the one
/// that is lexicographically largest in earliest-first order. `demands` is
/// in earliest-first order.
pub fn enumerate_oracle(demands: &[u32], capacity: u32) -> Vec<u32> {
    let total = capacity.min(demands.iter().sum());
    let mut best: Option<(Vec<u32>, Vec<u32>)> = None;
    let mut x = vec![0u32; demands.len()];
    fn walk(i: usize, left: u32, d: &[u32], x: &mut Vec<u32>, best: &mut Option<(Vec<u32>, Vec<u32>)>) {
        if i == d.len() {
            if left == 0 {
                let mut sorted = x.clone();
                sorted.sort_unstable();
                let better = match best {
                    None => true,
                    Some((bs, bx)) => (&sorted, &*x) > (bs, bx),
                };
                if better {
                    *best = Some((sorted, x.clone()));
                }
            }
            return;
        }
        for v in 0..=d[i].min(left) {
            x[i] = v;
            walk(i + 1, left - v, d, x, best);
        }
        x[i] = 0;
    }
    walk(0, total, demands, &mut x, &mut best);
    best.unwrap().1
}

/// Scans water levels: everyone gets `min(demand, L)` for the highest `L`
/// that fits, then leftover slots go one each to the earliest users still
/// below demand.
pub fn level_oracle(demands: &[u32], capacity: u32) -> Vec<u32> {
    let level = (0..=capacity).rev().find(|&l| demands.iter().map(|&d| d.min(l)).sum::<u32>() <= capacity).unwrap();
    let mut x: Vec<u32> = demands.iter().map(|&d| d.min(level)).collect();
    let mut left = capacity - x.iter().sum::<u32>();
    for (xi, &d) in x.iter_mut().zip(demands) {
        if left > 0 && *xi < d {
            *xi += 1;
            left -= 1;
        }
    }
    x
}

/// Runs `fair_share_targets` on `demands`, given in earliest-first order;
/// user names run against that order unless `tied`, where all submit times
/// are equal and the names carry the order.
pub fn targets_in_order(demands: &[u32], capacity: u32, tied: bool, names: &[String]) -> Vec<u32> {
    let n = demands.len();
    let users: Vec<UserDemand> = demands
        .iter()
        .enumerate()
        .map(|(i, &d)| {
            if tied {
                UserDemand { user: names[i].clone(), demand: d, earliest: 7 }
            } else {
                UserDemand { user: names[n - 1 - i].clone(), demand: d, earliest: 1000 * i as Millis }
            }
        })
        .collect();
    let t = fair_share_targets(&users, capacity);
    users.iter().map(|u| t.get(&u.user).copied().unwrap_or(0)).collect()
}

/// Exhaustive comparison over up to `max_users` users, capacities and
/// demands up to `max`. Returns the number of inputs checked.
pub fn fair_share_exhaustive(max_users: usize, max: u32, enumerate_upto: usize) -> Result<u64, String> {
    let names: Vec<String> = (0..max_users).map(|i| format!("u{i}")).collect();
    let mut checked = 0u64;
    for n in 0..=max_users {
        let mut d = vec![0u32; n];
        loop {
            for cap in 0..=max {
                let level = level_oracle(&d, cap);
                if n <= enumerate_upto {
                    let full = enumerate_oracle(&d, cap);
                    if full != level {
                        return Err(format!("oracles disagree on demands {d:?} capacity {cap}: {full:?} vs {level:?}"));
                    }
                    let tied = targets_in_order(&d, cap, true, &names);
                    if tied != full {
                        return Err(format!("tied demands {d:?} capacity {cap}: got {tied:?}, oracle {full:?}"));
                    }
                }
                let got = targets_in_order(&d, cap, false, &names);
                if got != level {
                    return Err(format!("demands {d:?} capacity {cap}: got {got:?}, oracle {level:?}"));
                }
                checked += 1;
            }
            // odometer
            let mut i = 0;
            while i < n && d[i] == max {
                d[i] = 0;
                i += 1;
            }
            if i == n {
                break;
            }
            d[i] += 1;
        }
    }
    Ok(checked)
}

// ---------------------------------------------------------------- parser

fn check_error(name: &str, got: &SubmitError, want: &Value) -> Result<(), String> {
    let kind = want["kind"].as_str().unwrap();
    let line = want.get("line").and_then(Value::as_u64).map(|l| l as usize);
    let key = want.get("key").and_then(Value::as_str);
    let ok = match got {
        SubmitError::Syntax { line: l, .. } => kind == "syntax" && Some(*l) == line,
        SubmitError::DuplicateKey { line: l, key: k } => {
            kind == "duplicate_key" && Some(*l) == line && Some(k.as_str()) == key
        }
        SubmitError::MissingAttribute(k) => kind == "missing_attribute" && Some(k.as_str()) == key,
        SubmitError::BadNumber(k) => kind == "bad_number" && Some(k.as_str()) == key,
        SubmitError::BadValue { .. } => kind == "bad_value",
    };
    if ok {
        Ok(())
    } else {
        Err(format!("{name}: got {got:?}, want {want}"))
    }
}

/// Checks the golden corpus; returns (valid, malformed) case counts.
pub fn check_corpus() -> Result<(usize, usize), String> {
    let text = include_str!("../data/submit_corpus.json");
    let cases: Vec<Value> = serde_json::from_str(text).unwrap();
    if cases.len() != 100 {
        return Err(format!("corpus has {} cases", cases.len()));
    }
    let (mut valid, mut malformed) = (0, 0);
    for case in &cases {
        let name = case["name"].as_str().unwrap();
        let input = case["text"].as_str().unwrap();
        let expect = &case["expect"];
        match (parse_submit(input), expect.get("error")) {
            (Err(e), Some(want)) => {
                check_error(name, &e, want)?;
                malformed += 1;
            }
            (Ok(d), None) => {
                if serde_json::to_value(&d).unwrap() != expect["descriptor"] {
                    return Err(format!("{name}: got {d:?}, want {}", expect["descriptor"]));
                }
                valid += 1;
                let jobs_expect = &case["jobs"];
                match (descriptor_to_jobs(&d, "corpus", 100), jobs_expect.get("error")) {
                    (Err(e), Some(want)) => check_error(name, &e, want)?,
                    (Ok(jobs), None) => {
                        if jobs.len() as u64 != jobs_expect["count"].as_u64().unwrap() {
                            return Err(format!("{name}: {} jobs", jobs.len()));
                        }
                        for (i, j) in jobs.iter().enumerate() {
                            if j.global_job_id.0 != 100 + i as u64 {
                                return Err(format!("{name}: job {i} has id {}", j.global_job_id));
                            }
                            let got = serde_json::to_value(j).unwrap();
                            for field in [
                                "vmtype",
                                "vm_loc",
                                "vm_ami",
                                "vm_cpu_arch",
                                "vm_cpu_cores",
                                "vm_mem",
                                "vm_storage",
                                "vm_network",
                                "priority",
                            ] {
                                if got[field] != jobs_expect[field] {
                                    return Err(format!("{name}: {field} {} != {}", got[field], jobs_expect[field]));
                                }
                            }
                        }
                    }
                    (got, want) => return Err(format!("{name}: jobs {got:?}, want {want:?}")),
                }
            }
            (got, _) => return Err(format!("{name}: got {got:?}, want {expect}")),
        }
    }
    Ok((valid, malformed))
}

// ---------------------------------------------------------------- fuzzing

#[derive(Debug, Default)]
pub struct FuzzReport {
    pub iterations: u64,
    pub parsed: u64,
    pub rejected: u64,
    pub crashes: Vec<String>,
}

const ALPHABET: &[&str] = &[
    "=",
    "+",
    "\"",
    "\n",
    "#",
    " ",
    "\t",
    "Queue",
    "queue ",
    "VMType",
    "+VMMem",
    "VMCPUCores",
    "0",
    "1",
    "9",
    "-",
    "é",
    "\u{0}",
    "\r\n",
    "99999999999999999999",
    "x86_64",
    "=\"",
    "+VMLoc = \"",
    "Q",
];

fn fuzz_input(rng: &mut ChaCha8Rng) -> String {
    match rng.random_range(0..4) {
        0 => {
            let len = rng.random_range(0..200);
            let bytes: Vec<u8> = (0..len).map(|_| rng.random()).collect();
            String::from_utf8_lossy(&bytes).into_owned()
        }
        1 => (0..rng.random_range(0..40)).map(|_| *ALPHABET.choose(rng).unwrap()).collect(),
        _ => {
            let mut chars: Vec<char> = APPENDIX_SAMPLE.chars().collect();
            for _ in 0..rng.random_range(1..8) {
                let at = rng.random_range(0..=chars.len());
                match rng.random_range(0..3) {
                    0 if at < chars.len() => {
                        chars.remove(at);
                    }
                    1 if at < chars.len() => {
                        let end = (at + rng.random_range(1..30)).min(chars.len());
                        chars.drain(at..end);
                    }
                    _ => {
                        let piece = ALPHABET.choose(rng).unwrap();
                        for (k, c) in piece.chars().enumerate() {
                            chars.insert(at + k, c);
                        }
                    }
                }
            }
            chars.into_iter().collect()
        }
    }
}

/// Feeds `n` random inputs to the parser. A crash is a panic, or a parsed
/// descriptor that does not survive rendering and reparsing.
pub fn fuzz_parser(n: u64, seed: u64) -> FuzzReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = FuzzReport::default();
    let hook = std::panic::take_hook();
    std::panic::set_hook(Box::new(|_| {}));
    for _ in 0..n {
        let input = fuzz_input(&mut rng);
        report.iterations += 1;
        let outcome = catch_unwind(AssertUnwindSafe(|| match parse_submit(&input) {
            Ok(d) => {
                if d.queue_count <= 1000 {
                    let _ = descriptor_to_jobs(&d, "fuzz", 0);
                }
                match parse_submit(&d.to_text()) {
                    Ok(again) if again == d => Ok(true),
                    other => Err(format!("round trip of {input:?} gave {other:?}")),
                }
            }
            Err(_) => Ok(false),
        }));
        match outcome {
            Ok(Ok(true)) => report.parsed += 1,
            Ok(Ok(false)) => report.rejected += 1,
            Ok(Err(e)) => report.crashes.push(e),
            Err(_) => report.crashes.push(format!("panic on {input:?}")),
        }
    }
    std::panic::set_hook(hook);
    report
}
