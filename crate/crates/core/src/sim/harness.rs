//! Wires queue, scheduler and simulated clouds to a virtual clock.
//!
//! Each step at time `now = k × cycle_period`:
//!
//! 1. submit arrivals due by `now`;
//! 2. apply scripted faults due by `now`;
//! 3. deliver the clouds' own events (random faults, boot completions);
//! 4. run one scheduler cycle;
//! 5. let the queue dispatch to idle workers;
//! 6. run dispatched jobs for one cycle period.

use crate::backend::{CloudEvent, SimCloud};
use crate::model::{JobId, Millis, ResourcePool};
use crate::persist::{self, PersistError};
use crate::queue::JobQueue;
use crate::scheduler::{CycleReport, Scheduler, SchedulerError};
use crate::submit::descriptor_to_jobs;

use super::metrics::{count_shutdown, CycleSample, Metrics, Trace, TraceEvent};
use super::scenario::{Scenario, ScenarioError};

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Persist the scheduler and restore it into a fresh process image
    /// before this cycle.
    pub restart_at: Option<u64>,
    /// Check capacity and work-conservation invariants every cycle.
    pub check: bool,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub metrics: Metrics,
    pub trace: Trace,
    /// Invariant violations, when checking was on.
    pub violations: Vec<String>,
}

/// What one step did, for callers that drive the simulation themselves.
#[derive(Debug, Clone, Default)]
pub struct StepOutcome {
    pub cycle: u64,
    pub now: Millis,
    pub report: CycleReport,
    /// VMs that faulted this step, before the scheduler ran.
    pub faulted: Vec<String>,
    pub dispatched: Vec<(JobId, String)>,
    pub completed: Vec<JobId>,
    pub violations: Vec<String>,
}

pub struct Simulation {
    scenario: Scenario,
    pub scheduler: Scheduler,
    pub queue: JobQueue,
    pub cloud: SimCloud,
    cycle: u64,
    next_arrival: usize,
    next_fault: usize,
    next_job_id: u64,
    pub metrics: Metrics,
    pub trace: Trace,
    pub check: bool,
}

impl Simulation {
    pub fn new(scenario: &Scenario) -> Result<Simulation, ScenarioError> {
        scenario.validate()?;
        let clusters = scenario.clusters.iter().map(|c| c.cluster.clone()).collect();
        let scheduler =
            Scheduler::new(scenario.scheduler.clone(), clusters).map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        let mut cloud = SimCloud::new();
        for c in &scenario.clusters {
            cloud.add_cluster(&c.cluster.name, c.sim.clone());
        }
        Ok(Simulation {
            scenario: scenario.clone(),
            scheduler,
            queue: JobQueue::new(),
            cloud,
            cycle: 0,
            next_arrival: 0,
            next_fault: 0,
            next_job_id: 1,
            metrics: Metrics::default(),
            trace: Vec::new(),
            check: false,
        })
    }

    pub fn cycle(&self) -> u64 {
        self.cycle
    }

    pub fn now(&self) -> Millis {
        self.cycle * self.scenario.cycle_period
    }

    pub fn resources(&self) -> &ResourcePool {
        &self.scheduler.state.resources
    }

    /// All arrivals submitted, no live jobs, no VMs.
    pub fn quiescent(&self) -> bool {
        self.next_arrival == self.scenario.arrivals.len()
            && self.queue.live_jobs() == 0
            && self.scheduler.state.resources.vm_count() == 0
    }

    pub fn finished(&self) -> bool {
        self.quiescent() || self.now() >= self.scenario.horizon
    }

    fn vm_lost(&mut self, vm: &str, cluster: &str, scripted: bool) -> Vec<String> {
        let cycle = self.cycle;
        self.trace.push(TraceEvent::Fault { cycle, vm: vm.to_string(), cluster: cluster.to_string(), scripted });
        self.metrics.faults += 1;
        for job in self.queue.vm_died(vm) {
            self.trace.push(TraceEvent::Requeue { cycle, job });
            self.metrics.requeues += 1;
        }
        vec![vm.to_string()]
    }

    pub fn step(&mut self) -> StepOutcome {
        let now = self.now();
        let cycle = self.cycle;
        let mut out = StepOutcome { cycle, now, ..Default::default() };

        while let Some(a) = self.scenario.arrivals.get(self.next_arrival).filter(|a| a.at <= now) {
            let a = a.clone();
            self.next_arrival += 1;
            for _ in 0..a.count {
                let first = self.next_job_id;
                let jobs = descriptor_to_jobs(&a.descriptor, &a.user, first).expect("validated with the scenario");
                let n = jobs.len() as u64;
                let durations = vec![a.duration; jobs.len()];
                self.queue.submit(jobs, &durations, now).expect("job ids are fresh");
                self.next_job_id += n;
                self.metrics.jobs_submitted += n;
                self.trace.push(TraceEvent::Submitted {
                    cycle,
                    at: now,
                    user: a.user.clone(),
                    first: JobId(first),
                    count: n,
                });
            }
        }

        while let Some(f) = self.scenario.faults.get(self.next_fault).filter(|f| f.at <= now) {
            let f = f.clone();
            self.next_fault += 1;
            if let Some(CloudEvent::Fault { cluster, vm_name, .. }) = self.cloud.inject_fault(&f.cluster, &f.vm, now) {
                out.faulted.extend(self.vm_lost(&vm_name, &cluster, true));
            }
        }

        for ev in self.cloud.advance(now, cycle) {
            match ev {
                CloudEvent::Fault { cluster, vm_name, .. } => {
                    out.faulted.extend(self.vm_lost(&vm_name, &cluster, false))
                }
                CloudEvent::Advertise { vm_name, vmtype, at, .. } => {
                    self.queue.advertise(&vm_name, &vmtype, now);
                    self.trace.push(TraceEvent::Advertise { cycle, vm: vm_name, at });
                }
            }
        }

        let report = self.scheduler.run_cycle(now, &mut self.queue, &mut self.cloud);
        self.record(&report);

        out.dispatched = self.queue.dispatch_cycle(now);
        for (job, vm) in &out.dispatched {
            self.trace.push(TraceEvent::Dispatch { cycle, job: *job, vm: vm.clone() });
        }

        out.completed = self.queue.advance_work(now, self.scenario.cycle_period);
        for &job in &out.completed {
            let e = self.queue.entry(job).expect("completed job is in the queue");
            let at = e.completed_at.expect("completed job has a completion time");
            self.metrics.jobs_completed += 1;
            self.metrics.makespan = self.metrics.makespan.max(at);
            self.metrics.core_ms += e.job.vm_cpu_cores as u64 * e.duration;
            self.trace.push(TraceEvent::Complete { cycle, job, at });
        }

        let state = &self.scheduler.state;
        let alloc = state.allocation();
        self.metrics.samples.push(CycleSample {
            cycle,
            at: now,
            owned: alloc.owned.iter().map(|(u, vms)| (u.clone(), vms.len() as u32)).collect(),
            targets: report.targets.clone(),
            jobs_completed: self.metrics.jobs_completed,
        });

        if self.check {
            out.violations = self.violations(&report);
        }
        out.report = report;
        self.cycle += 1;
        self.metrics.cycles = self.cycle;
        self.metrics.end = self.now();
        self.metrics.wasted_ms = self.queue.work().wasted;
        self.metrics.core_hours = self.metrics.core_ms as f64 / crate::model::HOUR as f64;
        out
    }

    fn record(&mut self, r: &CycleReport) {
        let cycle = r.cycle;
        let m = &mut self.metrics;
        let t = &mut self.trace;
        for s in &r.shutdowns {
            if s.error.is_none() {
                count_shutdown(m, s.reason);
            }
            t.push(TraceEvent::Shutdown { cycle, vm: s.vm.clone(), reason: s.reason, busy: s.busy });
        }
        for &job in &r.requeued {
            m.requeues += 1;
            t.push(TraceEvent::Requeue { cycle, job });
        }
        for vm in &r.drains {
            t.push(TraceEvent::Drain { cycle, vm: vm.clone() });
        }
        for vm in &r.undrains {
            t.push(TraceEvent::Undrain { cycle, vm: vm.clone() });
        }
        for &job in &r.holds {
            m.holds += 1;
            t.push(TraceEvent::Hold { cycle, job });
        }
        for b in &r.boots {
            m.boots += 1;
            t.push(TraceEvent::Boot {
                cycle,
                vm: b.vm.clone(),
                cluster: b.cluster.clone(),
                owner: b.owner.clone(),
                job: b.job,
            });
        }
        for f in &r.boot_failures {
            m.boot_failures += 1;
            t.push(TraceEvent::BootFailed {
                cycle,
                cluster: f.cluster.clone(),
                owner: f.owner.clone(),
                error: f.error.clone(),
            });
        }
        for &job in &r.releases {
            m.releases += 1;
            t.push(TraceEvent::Release { cycle, job });
        }
        for &job in &r.flipped_to_new {
            t.push(TraceEvent::FlipToNew { cycle, job });
        }
    }

    /// Capacity, boot-precondition and work-conservation checks.
    pub fn violations(&self, report: &CycleReport) -> Vec<String> {
        let mut v = Vec::new();
        for c in &self.scheduler.state.resources.clusters {
            if c.vms.len() as u64 > c.vm_slots as u64 {
                v.push(format!(
                    "cycle {}: cluster {} has {} VMs for {} slots",
                    report.cycle,
                    c.name,
                    c.vms.len(),
                    c.vm_slots
                ));
            }
            if let Some(sc) = self.cloud.cluster(&c.name) {
                if sc.vms.len() as u64 > c.vm_slots as u64 {
                    v.push(format!(
                        "cycle {}: cloud {} runs {} VMs for {} slots",
                        report.cycle,
                        c.name,
                        sc.vms.len(),
                        c.vm_slots
                    ));
                }
            }
        }
        for b in &report.boots {
            if !b.fitted || b.occupancy_after > b.slots {
                v.push(format!("cycle {}: boot of {} on {} violated fits()", report.cycle, b.vm, b.cluster));
            }
        }
        if let Err(e) = self.queue.work().check() {
            v.push(format!("cycle {}: work not conserved: {e}", report.cycle));
        }
        if let Err(e) = self.scheduler.state.check() {
            v.push(format!("cycle {}: scheduler state: {e}", report.cycle));
        }
        v
    }

    /// Persists the scheduler, drops it, and restores it from the document,
    /// the way a restarted process would. The queue and clouds live outside
    /// the scheduler and carry on.
    pub fn restart_scheduler(&mut self) -> Result<(), PersistError> {
        let doc = persist::snapshot(&self.scheduler.state);
        let config = self.scheduler.config.clone();
        let state = persist::restore(&doc)?;
        self.scheduler = Scheduler::from_state(config, state).map_err(|e| match e {
            SchedulerError::Persist(p) => p,
            other => PersistError::CorruptSnapshot { line: 0, column: 0, reason: other.to_string() },
        })?;
        Ok(())
    }

    pub fn into_result(self, violations: Vec<String>) -> RunResult {
        RunResult { metrics: self.metrics, trace: self.trace, violations }
    }
}

pub fn run_scenario(scenario: &Scenario) -> Result<RunResult, ScenarioError> {
    run_scenario_with(scenario, &RunOptions::default())
}

pub fn run_scenario_with(scenario: &Scenario, options: &RunOptions) -> Result<RunResult, ScenarioError> {
    let mut sim = Simulation::new(scenario)?;
    sim.check = options.check;
    let mut violations = Vec::new();
    while !sim.finished() {
        if options.restart_at == Some(sim.cycle()) {
            sim.restart_scheduler().map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        }
        violations.extend(sim.step().violations);
    }
    Ok(sim.into_result(violations))
}
