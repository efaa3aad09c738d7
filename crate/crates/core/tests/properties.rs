mod common;

use std::collections::BTreeMap;

use cloudsched::model::{CpuArch, Network, VmEvent, VmRecord, VmState};
use cloudsched::persist;
use cloudsched::scheduler::{fair_share_targets, RebalanceMode, UserDemand};
use cloudsched::sim::{run_scenario, Simulation};
use cloudsched::submit::{descriptor_to_jobs, parse_submit, SubmitDescriptor, VM_KEYS};
use common::GenSpec;
use proptest::prelude::*;

fn value() -> impl Strategy<Value = String> {
    "[a-zA-Z0-9][a-zA-Z0-9./:_-]{0,20}"
}

fn descriptor() -> impl Strategy<Value = SubmitDescriptor> {
    let standard = prop::collection::btree_map(
        prop::sample::select(vec!["Universe", "Executable", "Arguments", "Log", "Output", "Priority", "notify_user"]),
        value(),
        0..5,
    );
    let vm = prop::collection::btree_map(prop::sample::select(VM_KEYS.to_vec()), value(), 0..8);
    (standard, vm, 1u32..500).prop_map(|(s, v, queue_count)| SubmitDescriptor {
        standard_attrs: s.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        vm_attrs: v.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        queue_count,
    })
}

fn vm() -> VmRecord {
    VmRecord {
        name: "vm-000001".into(),
        id: "c0-000001".into(),
        vmtype: "t".into(),
        vmstate: VmState::Starting,
        hostname: String::new(),
        clusteraddr: "c0.example".into(),
        network: Network::Private,
        cpuarch: CpuArch::X86,
        image: "img".into(),
        memory: 512,
        cpucores: 1,
        storage: 10,
        errorcount: 0,
        lastpoll: 0,
        last_state_change: 0,
        owner: "u".into(),
    }
}

fn event() -> impl Strategy<Value = VmEvent> {
    prop_oneof![Just(VmEvent::BootComplete), Just(VmEvent::Fault), Just(VmEvent::PollUpdate)]
}

proptest! {
    #[test]
    fn submit_text_round_trips(d in descriptor()) {
        prop_assert_eq!(parse_submit(&d.to_text()).unwrap(), d);
    }

    #[test]
    fn one_job_per_queued_instance(count in 1u32..2000, seed in 1u64..1_000_000) {
        let d = common::descriptor("t", count);
        let jobs = descriptor_to_jobs(&d, "u", seed).unwrap();
        prop_assert_eq!(jobs.len(), count as usize);
        for (i, j) in jobs.iter().enumerate() {
            prop_assert_eq!(j.global_job_id.0, seed + i as u64);
        }
    }

    #[test]
    fn vm_state_machine_is_forward_only(events in prop::collection::vec((event(), 0u64..10_000), 0..30)) {
        let mut cur = vm();
        for (ev, now) in events {
            match cur.transition(ev, now) {
                Ok(next) => {
                    let legal = cur.vmstate == next.vmstate || matches!(
                        (cur.vmstate, next.vmstate),
                        (VmState::Starting, VmState::Running) | (VmState::Starting | VmState::Running, VmState::Error)
                    );
                    prop_assert!(legal, "{:?} -> {:?}", cur.vmstate, next.vmstate);
                    prop_assert!(next.errorcount >= cur.errorcount);
                    prop_assert!(next.lastpoll >= cur.lastpoll);
                    cur = next;
                }
                Err(_) => prop_assert!(
                    ev != VmEvent::PollUpdate
                        && !(cur.vmstate == VmState::Starting && ev == VmEvent::BootComplete)
                        && !(cur.vmstate != VmState::Error && ev == VmEvent::Fault)
                ),
            }
        }
    }

    #[test]
    fn fair_share_is_max_min(demands in prop::collection::vec((0u32..40, 0u64..5), 0..8), capacity in 0u32..60) {
        let users: Vec<UserDemand> = demands
            .iter()
            .enumerate()
            .map(|(i, &(demand, earliest))| UserDemand { user: format!("u{i}"), demand, earliest })
            .collect();
        let t = fair_share_targets(&users, capacity);
        let total: u32 = t.values().sum();
        let wanted: u32 = users.iter().map(|u| u.demand).sum();
        prop_assert_eq!(total, wanted.min(capacity));
        let got = |u: &UserDemand| t.get(&u.user).copied().unwrap_or(0);
        for a in &users {
            prop_assert!(got(a) <= a.demand);
            for b in &users {
                // Nobody still wanting more sits two or more below anyone else.
                prop_assert!(got(a) == a.demand || got(a) + 1 >= got(b), "{:?}", t);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn random_runs_conserve_work_and_capacity(seed in any::<u64>(), kill in any::<bool>()) {
        let mode = if kill { RebalanceMode::Kill } else { RebalanceMode::Graceful };
        let s = common::random_scenario(seed, GenSpec { max_fault_rate: 0.03, scripted_faults: true, ..GenSpec::clean(mode) });
        let o = common::run_checked(&s, |_, _, _| {});
        prop_assert!(o.violations.is_empty(), "{:?}", &o.violations[..o.violations.len().min(3)]);
        prop_assert_eq!(o.metrics.jobs_completed, o.metrics.jobs_submitted);
    }

    #[test]
    fn snapshots_restore_to_the_same_state(seed in any::<u64>(), stop in 1u64..60) {
        let s = common::random_scenario(seed, GenSpec::clean(RebalanceMode::Graceful));
        let mut sim = Simulation::new(&s).unwrap();
        while !sim.finished() && sim.cycle() < stop {
            sim.step();
        }
        let state = &sim.scheduler.state;
        prop_assert_eq!(&persist::restore(&persist::snapshot(state)).unwrap(), state);
    }

    #[test]
    fn runs_are_deterministic(seed in any::<u64>()) {
        let s = common::random_scenario(seed, GenSpec { max_fault_rate: 0.05, ..GenSpec::clean(RebalanceMode::Kill) });
        let a = run_scenario(&s).unwrap();
        let b = run_scenario(&s).unwrap();
        prop_assert_eq!(a.metrics, b.metrics);
        prop_assert_eq!(a.trace, b.trace);
    }
}

#[test]
fn remainder_goes_to_the_earliest_submitter_not_the_first_name() {
    let users = vec![
        UserDemand { user: "zed".into(), demand: 10, earliest: 0 },
        UserDemand { user: "amy".into(), demand: 10, earliest: 1 },
    ];
    let expected: BTreeMap<String, u32> = [("zed".to_string(), 3), ("amy".to_string(), 2)].into();
    assert_eq!(fair_share_targets(&users, 5), expected);
}
