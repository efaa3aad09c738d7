//! Even distribution of VM slots among users with jobs in the queue.

use std::collections::BTreeMap;

use crate::model::Millis;

/// A user's claim on the VM pool.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserDemand {
    pub user: String,
    /// Outstanding jobs; a user never gets more VMs than this.
    pub demand: u32,
    /// Submit time of the user's oldest outstanding job.
    pub earliest: Millis,
}

/// Water-fills `capacity` slots over the users.
///
/// Every round splits what is left evenly among users still below their
/// demand; users capped by demand hand their unused share to the next round.
/// When fewer slots than users remain, they go one each to the users with
/// the earliest outstanding submit time.
pub fn fair_share_targets(users: &[UserDemand], capacity: u32) -> BTreeMap<String, u32> {
    let mut order: Vec<&UserDemand> = users.iter().collect();
    order.sort_by(|a, b| (a.earliest, &a.user).cmp(&(b.earliest, &b.user)));

    let mut targets: Vec<u32> = vec![0; order.len()];
    let mut left = capacity;
    loop {
        let active: Vec<usize> = (0..order.len()).filter(|&i| targets[i] < order[i].demand).collect();
        if active.is_empty() || left == 0 {
            break;
        }
        let share = left / active.len() as u32;
        if share == 0 {
            for &i in active.iter().take(left as usize) {
                targets[i] += 1;
            }
            break;
        }
        for &i in &active {
            let grant = share.min(order[i].demand - targets[i]);
            targets[i] += grant;
            left -= grant;
        }
    }
    order.iter().zip(targets).map(|(u, t)| (u.user.clone(), t)).collect()
}
