//! Embedded stand-in for the batch job scheduler's central manager.
//!
//! Holds the queue, accepts worker advertisements from booted VMs,
//! dispatches queued jobs to idle workers of the same VMType, and requeues
//! the job of a worker that dies. Jobs are simulated: each entry carries the
//! virtual work left, which [`JobQueue::advance_work`] counts down.
//!
//! Every state change is appended to a journal so the scheduler's job
//! poller can follow the queue incrementally.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Job, JobId, Millis, QueueState, QueueView};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum QueueError {
    #[error("duplicate job id {0}")]
    DuplicateJobId(JobId),
    #[error("job {0} is not in the queue")]
    UnknownJob(JobId),
    #[error("job {id} is {state}, expected {expected}")]
    WrongState { id: JobId, state: QueueState, expected: QueueState },
    #[error("{jobs} jobs but {durations} durations")]
    Misaligned { jobs: usize, durations: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueEntry {
    pub job: Job,
    pub queue_state: QueueState,
    pub dispatched_to: Option<String>,
    pub remaining_work: Millis,
    pub duration: Millis,
    pub submit_time: Millis,
    pub dispatched_at: Option<Millis>,
    pub completed_at: Option<Millis>,
    pub hold_reason: Option<String>,
}

impl QueueEntry {
    fn view(&self) -> QueueView {
        QueueView {
            job: self.job.clone(),
            state: self.queue_state,
            dispatched_to: self.dispatched_to.clone(),
            submit_time: self.submit_time,
        }
    }
}

/// A VM's advertisement of itself as an execution slot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkerAd {
    pub vm_name: String,
    pub vmtype: String,
    pub busy: bool,
    pub registered_at: Millis,
}

/// One journal record: the state a job moved to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueChange {
    pub seq: u64,
    pub id: JobId,
    pub state: QueueState,
    pub dispatched_to: Option<String>,
}

/// Dispatch order key: priority descending, then submit time, then id.
type OrderKey = (Reverse<i32>, Millis, JobId);

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct JobQueue {
    entries: BTreeMap<JobId, QueueEntry>,
    workers: BTreeMap<String, WorkerAd>,
    #[serde(skip)]
    queued: BTreeMap<String, BTreeSet<OrderKey>>,
    /// vm name → job dispatched there
    running: BTreeMap<String, JobId>,
    journal: Vec<QueueChange>,
    submitted_work: Millis,
    completed_work: Millis,
    wasted_work: Millis,
    executed_work: Millis,
}

/// Work accounting, all in milliseconds of single-job run time.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkLedger {
    pub submitted: Millis,
    pub completed: Millis,
    /// Σ remaining work over live entries.
    pub outstanding: Millis,
    /// Progress of currently dispatched entries.
    pub in_progress: Millis,
    /// Progress thrown away when a worker died under a job.
    pub wasted: Millis,
    /// Every millisecond of work a worker has performed.
    pub executed: Millis,
}

impl WorkLedger {
    pub fn check(&self) -> Result<(), String> {
        if self.completed + self.outstanding + self.in_progress != self.submitted {
            return Err(format!(
                "completed {} + outstanding {} + in progress {} != submitted {}",
                self.completed, self.outstanding, self.in_progress, self.submitted
            ));
        }
        if self.completed + self.in_progress + self.wasted != self.executed {
            return Err(format!(
                "completed {} + in progress {} + wasted {} != executed {}",
                self.completed, self.in_progress, self.wasted, self.executed
            ));
        }
        Ok(())
    }
}

impl JobQueue {
    pub fn new() -> Self {
        Self::default()
    }

    /// Rebuilds the dispatch index after deserialization.
    pub fn reindex(&mut self) {
        self.queued.clear();
        let keys: Vec<_> = self
            .entries
            .values()
            .filter(|e| e.queue_state == QueueState::Queued)
            .map(|e| (e.job.vmtype.clone(), Self::key(e)))
            .collect();
        for (vmtype, key) in keys {
            self.queued.entry(vmtype).or_default().insert(key);
        }
    }

    fn key(e: &QueueEntry) -> OrderKey {
        (Reverse(e.job.priority), e.submit_time, e.job.global_job_id)
    }

    fn index_insert(&mut self, id: JobId) {
        let e = &self.entries[&id];
        let key = Self::key(e);
        self.queued.entry(e.job.vmtype.clone()).or_default().insert(key);
    }

    fn index_remove(&mut self, id: JobId) {
        let e = &self.entries[&id];
        let key = Self::key(e);
        if let Some(set) = self.queued.get_mut(&e.job.vmtype) {
            set.remove(&key);
            if set.is_empty() {
                self.queued.remove(&e.job.vmtype);
            }
        }
    }

    fn set_state(&mut self, id: JobId, state: QueueState, dispatched_to: Option<String>) {
        let entry = self.entries.get_mut(&id).expect("entry exists");
        entry.queue_state = state;
        entry.job.queue_state = state;
        entry.dispatched_to = dispatched_to.clone();
        let seq = self.journal.len() as u64 + 1;
        self.journal.push(QueueChange { seq, id, state, dispatched_to });
    }

    /// Appends jobs as Queued. All-or-nothing on duplicate ids.
    pub fn submit(&mut self, jobs: Vec<Job>, durations: &[Millis], now: Millis) -> Result<Vec<JobId>, QueueError> {
        if jobs.len() != durations.len() {
            return Err(QueueError::Misaligned { jobs: jobs.len(), durations: durations.len() });
        }
        let mut fresh = BTreeSet::new();
        for job in &jobs {
            let id = job.global_job_id;
            if self.entries.contains_key(&id) || !fresh.insert(id) {
                return Err(QueueError::DuplicateJobId(id));
            }
        }
        let mut ids = Vec::with_capacity(jobs.len());
        for (mut job, &duration) in jobs.into_iter().zip(durations) {
            let id = job.global_job_id;
            job.queue_state = QueueState::Queued;
            self.entries.insert(
                id,
                QueueEntry {
                    job,
                    queue_state: QueueState::Queued,
                    dispatched_to: None,
                    remaining_work: duration,
                    duration,
                    submit_time: now,
                    dispatched_at: None,
                    completed_at: None,
                    hold_reason: None,
                },
            );
            self.submitted_work += duration;
            self.set_state(id, QueueState::Queued, None);
            self.index_insert(id);
            ids.push(id);
        }
        Ok(ids)
    }

    /// Registers or refreshes a worker. Idempotent.
    pub fn advertise(&mut self, vm_name: &str, vmtype: &str, now: Millis) {
        let busy = self.running.contains_key(vm_name);
        self.workers.entry(vm_name.to_string()).and_modify(|ad| ad.registered_at = now).or_insert_with(|| WorkerAd {
            vm_name: vm_name.to_string(),
            vmtype: vmtype.to_string(),
            busy,
            registered_at: now,
        });
    }

    pub fn workers(&self) -> impl Iterator<Item = &WorkerAd> {
        self.workers.values()
    }

    pub fn is_advertised(&self, vm_name: &str) -> bool {
        self.workers.contains_key(vm_name)
    }

    /// The job currently dispatched to `vm_name`, if any.
    pub fn job_on(&self, vm_name: &str) -> Option<JobId> {
        self.running.get(vm_name).copied()
    }

    /// Gives every idle worker (in name order) the best queued job of its
    /// VMType. Held jobs are never considered.
    pub fn dispatch_cycle(&mut self, now: Millis) -> Vec<(JobId, String)> {
        let idle: Vec<(String, String)> =
            self.workers.values().filter(|ad| !ad.busy).map(|ad| (ad.vm_name.clone(), ad.vmtype.clone())).collect();
        let mut out = Vec::new();
        for (vm, vmtype) in idle {
            let Some(set) = self.queued.get_mut(&vmtype) else {
                continue;
            };
            let Some(key) = set.pop_first() else { continue };
            if set.is_empty() {
                self.queued.remove(&vmtype);
            }
            let id = key.2;
            self.set_state(id, QueueState::Dispatched, Some(vm.clone()));
            self.entries.get_mut(&id).expect("entry").dispatched_at = Some(now);
            self.running.insert(vm.clone(), id);
            self.workers.get_mut(&vm).expect("worker").busy = true;
            out.push((id, vm));
        }
        out
    }

    fn expect_state(&self, id: JobId, expected: QueueState) -> Result<(), QueueError> {
        let entry = self.entries.get(&id).ok_or(QueueError::UnknownJob(id))?;
        if entry.queue_state != expected {
            return Err(QueueError::WrongState { id, state: entry.queue_state, expected });
        }
        Ok(())
    }

    pub fn hold(&mut self, id: JobId, reason: &str) -> Result<(), QueueError> {
        self.expect_state(id, QueueState::Queued)?;
        self.index_remove(id);
        self.set_state(id, QueueState::Held, None);
        self.entries.get_mut(&id).expect("entry").hold_reason = Some(reason.to_string());
        Ok(())
    }

    pub fn release(&mut self, id: JobId) -> Result<(), QueueError> {
        self.expect_state(id, QueueState::Held)?;
        self.set_state(id, QueueState::Queued, None);
        self.entries.get_mut(&id).expect("entry").hold_reason = None;
        self.index_insert(id);
        Ok(())
    }

    /// Removes a pending job from the queue.
    pub fn remove(&mut self, id: JobId) -> Result<(), QueueError> {
        let state = self.entries.get(&id).ok_or(QueueError::UnknownJob(id))?.queue_state;
        match state {
            QueueState::Queued => self.index_remove(id),
            QueueState::Held => {}
            other => return Err(QueueError::WrongState { id, state: other, expected: QueueState::Queued }),
        }
        let entry = &self.entries[&id];
        self.submitted_work -= entry.remaining_work;
        self.set_state(id, QueueState::Removed, None);
        Ok(())
    }

    /// Forgets a worker. A job dispatched there goes back to Queued with its
    /// full duration; the partial progress is counted as wasted.
    pub fn vm_died(&mut self, vm_name: &str) -> Vec<JobId> {
        self.workers.remove(vm_name);
        let Some(id) = self.running.remove(vm_name) else {
            return Vec::new();
        };
        let entry = self.entries.get_mut(&id).expect("entry");
        self.wasted_work += entry.duration - entry.remaining_work;
        entry.remaining_work = entry.duration;
        entry.dispatched_at = None;
        self.set_state(id, QueueState::Queued, None);
        self.index_insert(id);
        vec![id]
    }

    /// Runs every dispatched job for `dt`. Jobs that finish are Completed at
    /// `now + remaining` and their worker becomes idle.
    pub fn advance_work(&mut self, now: Millis, dt: Millis) -> Vec<JobId> {
        let mut done = Vec::new();
        let running: Vec<(String, JobId)> = self.running.iter().map(|(v, j)| (v.clone(), *j)).collect();
        for (vm, id) in running {
            let entry = self.entries.get_mut(&id).expect("entry");
            let step = dt.min(entry.remaining_work);
            entry.remaining_work -= step;
            self.executed_work += step;
            if entry.remaining_work == 0 {
                entry.completed_at = Some(now + step);
                self.completed_work += entry.duration;
                self.running.remove(&vm);
                if let Some(ad) = self.workers.get_mut(&vm) {
                    ad.busy = false;
                }
                self.set_state(id, QueueState::Completed, None);
                done.push(id);
            }
        }
        done
    }

    pub fn entry(&self, id: JobId) -> Option<&QueueEntry> {
        self.entries.get(&id)
    }

    pub fn entries(&self) -> impl Iterator<Item = &QueueEntry> {
        self.entries.values()
    }

    /// Consistent read-only view of every entry.
    pub fn queue_snapshot(&self) -> Vec<QueueView> {
        self.entries.values().map(QueueEntry::view).collect()
    }

    /// Journal position after the latest change.
    pub fn cursor(&self) -> u64 {
        self.journal.len() as u64
    }

    /// Changes after `cursor`, or `None` when the cursor is not from this
    /// queue's journal.
    pub fn changes_since(&self, cursor: u64) -> Option<&[QueueChange]> {
        self.journal.get(cursor as usize..)
    }

    /// View of one entry as the job poller needs it.
    pub fn view(&self, id: JobId) -> Option<QueueView> {
        self.entries.get(&id).map(QueueEntry::view)
    }

    pub fn work(&self) -> WorkLedger {
        let mut ledger = WorkLedger {
            submitted: self.submitted_work,
            completed: self.completed_work,
            wasted: self.wasted_work,
            executed: self.executed_work,
            ..WorkLedger::default()
        };
        for e in self.entries.values() {
            if e.queue_state.is_terminal() {
                continue;
            }
            ledger.outstanding += e.remaining_work;
            if e.queue_state == QueueState::Dispatched {
                ledger.in_progress += e.duration - e.remaining_work;
            }
        }
        ledger
    }

    /// Live (not completed, not removed) jobs.
    pub fn live_jobs(&self) -> usize {
        self.entries.values().filter(|e| !e.queue_state.is_terminal()).count()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
