//! Cloud scheduler: boots, balances and retires user-customized VMs across
//! several IaaS clouds in response to a batch job queue.
//!
//! The crate is organised the way the control plane is:
//!
//! * [`model`]: clusters, VMs, jobs, pools and the clock.
//! * [`submit`]: Condor-style submit description files with VM attributes.
//! * [`queue`]: an embedded stand-in for the batch job scheduler.
//! * [`matcher`]: which clusters can host a job's VM.
//! * [`scheduler`]: the JobPoller / Scheduler / CleanUp loops and fair share.
//! * [`backend`]: the cloud boundary and the simulated cloud.
//! * [`persist`]: snapshot and restore of scheduler state.
//! * [`config`]: general and cloud resource configuration files.
//! * [`sim`]: deterministic scenario runner, metrics and traces.
//! * [`status`]: operator status tables.

pub mod backend;
pub mod config;
pub mod matcher;
pub mod model;
pub mod persist;
pub mod queue;
pub mod scheduler;
pub mod sim;
pub mod status;
pub mod submit;

pub use model::{Clock, Cluster, Job, JobId, JobPool, Millis, ResourcePool, VmRecord};
