//! Run metrics, the event trace and run comparison.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::model::{JobId, Millis, HOUR};
use crate::scheduler::ShutdownReason;

/// Per-cycle sample of who owns how many VMs and what they are owed.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CycleSample {
    pub cycle: u64,
    pub at: Millis,
    pub owned: BTreeMap<String, u32>,
    pub targets: BTreeMap<String, u32>,
    pub jobs_completed: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub jobs_submitted: u64,
    pub jobs_completed: u64,
    /// Virtual time of the last completion.
    pub makespan: Millis,
    /// Σ cpucores × runtime over completed jobs.
    pub core_ms: u64,
    pub core_hours: f64,
    pub boots: u64,
    pub boot_failures: u64,
    /// Rebalance and drain-timeout shutdowns.
    pub kills: u64,
    /// Draining VMs retired after their job finished.
    pub graceful_shutdowns: u64,
    /// Idle VMs retired for lack of demand.
    pub retirements: u64,
    pub error_shutdowns: u64,
    pub faults: u64,
    pub requeues: u64,
    pub holds: u64,
    pub releases: u64,
    pub wasted_ms: Millis,
    pub cycles: u64,
    /// Virtual time at which the run stopped.
    pub end: Millis,
    pub samples: Vec<CycleSample>,
}

impl Metrics {
    pub fn makespan_hours(&self) -> f64 {
        self.makespan as f64 / HOUR as f64
    }

    /// `cycle,time_s,user,owned,target` rows for plotting.
    pub fn vm_counts_csv(&self) -> String {
        let mut out = String::from("cycle,time_s,user,owned,target\n");
        for s in &self.samples {
            let users: std::collections::BTreeSet<&String> = s.owned.keys().chain(s.targets.keys()).collect();
            for u in users {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{}",
                    s.cycle,
                    s.at / 1000,
                    u,
                    s.owned.get(u).copied().unwrap_or(0),
                    s.targets.get(u).copied().unwrap_or(0)
                );
            }
        }
        out
    }
}

/// One thing that happened during a run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TraceEvent {
    Submitted { cycle: u64, at: Millis, user: String, first: JobId, count: u64 },
    Fault { cycle: u64, vm: String, cluster: String, scripted: bool },
    Advertise { cycle: u64, vm: String, at: Millis },
    Boot { cycle: u64, vm: String, cluster: String, owner: String, job: Option<JobId> },
    BootFailed { cycle: u64, cluster: String, owner: String, error: String },
    Shutdown { cycle: u64, vm: String, reason: ShutdownReason, busy: bool },
    Drain { cycle: u64, vm: String },
    Undrain { cycle: u64, vm: String },
    Hold { cycle: u64, job: JobId },
    Release { cycle: u64, job: JobId },
    Requeue { cycle: u64, job: JobId },
    FlipToNew { cycle: u64, job: JobId },
    Dispatch { cycle: u64, job: JobId, vm: String },
    Complete { cycle: u64, job: JobId, at: Millis },
}

pub type Trace = Vec<TraceEvent>;

pub fn trace_jsonl(trace: &[TraceEvent]) -> String {
    let mut out = String::new();
    for ev in trace {
        out.push_str(&serde_json::to_string(ev).expect("trace serializes"));
        out.push('\n');
    }
    out
}

/// Where two runs first differ.
#[derive(Debug, Clone, PartialEq)]
pub enum Divergence {
    /// Index of the first differing event; `None` on a side that ended.
    Trace { index: usize, left: Option<TraceEvent>, right: Option<TraceEvent> },
    /// Traces agree but the metrics do not; names the first differing field.
    Metrics { field: String },
}

/// `None` when the runs are identical.
pub fn compare_runs(a: (&Metrics, &[TraceEvent]), b: (&Metrics, &[TraceEvent])) -> Option<Divergence> {
    let (ma, ta) = a;
    let (mb, tb) = b;
    let n = ta.len().max(tb.len());
    for i in 0..n {
        let (l, r) = (ta.get(i), tb.get(i));
        if l != r {
            return Some(Divergence::Trace { index: i, left: l.cloned(), right: r.cloned() });
        }
    }
    if ma != mb {
        let ja = serde_json::to_value(ma).expect("metrics serialize");
        let jb = serde_json::to_value(mb).expect("metrics serialize");
        let field = ja
            .as_object()
            .and_then(|oa| oa.iter().find(|(k, v)| jb.get(k.as_str()) != Some(v)).map(|(k, _)| k.clone()))
            .unwrap_or_default();
        return Some(Divergence::Metrics { field });
    }
    None
}

pub(crate) fn count_shutdown(m: &mut Metrics, reason: ShutdownReason) {
    match reason {
        ShutdownReason::Rebalance | ShutdownReason::DrainTimeout => m.kills += 1,
        ShutdownReason::Drained => m.graceful_shutdowns += 1,
        ShutdownReason::Unneeded | ShutdownReason::KillAll => m.retirements += 1,
        ShutdownReason::Error => m.error_shutdowns += 1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(job: u64) -> TraceEvent {
        TraceEvent::Complete { cycle: job, job: JobId(job), at: job * 10 }
    }

    #[test]
    fn identical_runs_compare_equal() {
        let m = Metrics::default();
        let t = vec![ev(1), ev(2)];
        assert_eq!(compare_runs((&m, &t), (&m, &t)), None);
    }

    #[test]
    fn first_divergence_is_located() {
        let m = Metrics::default();
        let a = vec![ev(1), ev(2), ev(3)];
        let b = vec![ev(1), ev(5)];
        match compare_runs((&m, &a), (&m, &b)) {
            Some(Divergence::Trace { index, left, right }) => {
                assert_eq!(index, 1);
                assert_eq!(left, Some(ev(2)));
                assert_eq!(right, Some(ev(5)));
            }
            other => panic!("{other:?}"),
        }
        let short = vec![ev(1)];
        assert!(matches!(compare_runs((&m, &a), (&m, &short)), Some(Divergence::Trace { index: 1, right: None, .. })));
    }

    #[test]
    fn metric_difference_names_field() {
        let a = Metrics::default();
        let b = Metrics { boots: 1, ..Metrics::default() };
        assert_eq!(compare_runs((&a, &[]), (&b, &[])), Some(Divergence::Metrics { field: "boots".into() }));
    }

    #[test]
    fn csv_has_header_and_rows() {
        let m = Metrics {
            samples: vec![CycleSample {
                cycle: 0,
                at: 60_000,
                owned: [("a".to_string(), 2)].into(),
                targets: [("a".to_string(), 3)].into(),
                jobs_completed: 0,
            }],
            ..Metrics::default()
        };
        assert_eq!(m.vm_counts_csv(), "cycle,time_s,user,owned,target\n0,60,a,2,3\n");
    }
}
