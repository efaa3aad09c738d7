//! Operator status tables, rendered the same way from a live scheduler or a
//! snapshot file.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::model::{Millis, QueueState, SECOND};
use crate::scheduler::plan::user_demands;
use crate::scheduler::{fair_share_targets, SchedulerState};

#[derive(Default)]
struct UserRow {
    queued: u32,
    held: u32,
    running: u32,
    owned: u32,
    draining: u32,
}

fn age(now: Millis, since: Millis) -> String {
    let s = now.saturating_sub(since) / SECOND;
    format!("{}h{:02}m{:02}s", s / 3600, s / 60 % 60, s % 60)
}

/// Two tables: every VM by cluster (configuration order, then name), and a
/// per-user summary sorted by user.
pub fn render(state: &SchedulerState, now: Millis) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "cycle {}  clock {} ms", state.cycle, state.now);
    let _ = writeln!(out);
    let _ = writeln!(
        out,
        "{:<12} {:<12} {:<16} {:<9} {:<12} {:>11} SLOTS",
        "CLUSTER", "VM", "VMTYPE", "STATE", "OWNER", "AGE"
    );
    for c in &state.resources.clusters {
        let _ = writeln!(
            out,
            "{:<12} {:<12} {:<16} {:<9} {:<12} {:>11} {}/{}",
            c.name,
            "-",
            "-",
            "-",
            "-",
            "-",
            c.vms.len(),
            c.vm_slots
        );
        let mut vms: Vec<_> = c.vms.iter().collect();
        vms.sort_by(|a, b| a.name.cmp(&b.name));
        for vm in vms {
            let state_label =
                if state.draining.contains_key(&vm.name) { format!("{}*", vm.vmstate) } else { vm.vmstate.to_string() };
            let _ = writeln!(
                out,
                "{:<12} {:<12} {:<16} {:<9} {:<12} {:>11}",
                "",
                vm.name,
                vm.vmtype,
                state_label,
                vm.owner,
                age(now, vm.last_state_change)
            );
        }
    }

    let mut users: BTreeMap<&str, UserRow> = BTreeMap::new();
    for e in state.jobs.entries() {
        let row = users.entry(e.job.user.as_str()).or_default();
        match e.job.queue_state {
            QueueState::Queued => row.queued += 1,
            QueueState::Held => row.held += 1,
            QueueState::Dispatched => row.running += 1,
            _ => {}
        }
    }
    for (_, vm) in state.resources.vms() {
        let row = users.entry(vm.owner.as_str()).or_default();
        row.owned += 1;
        if state.draining.contains_key(&vm.name) {
            row.draining += 1;
        }
    }
    let targets = fair_share_targets(&user_demands(state), state.resources.total_slots());
    let _ = writeln!(out);
    let _ = writeln!(
        out,
        "{:<12} {:>7} {:>5} {:>8} {:>6} {:>9} {:>7}",
        "USER", "QUEUED", "HELD", "RUNNING", "OWNED", "DRAINING", "TARGET"
    );
    for (user, row) in &users {
        let _ = writeln!(
            out,
            "{:<12} {:>7} {:>5} {:>8} {:>6} {:>9} {:>7}",
            user,
            row.queued,
            row.held,
            row.running,
            row.owned,
            row.draining,
            targets.get(*user).copied().unwrap_or(0)
        );
    }
    out
}
