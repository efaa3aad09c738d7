//! Condor-style submit description files carrying the cloud VM attributes.
//!
//! ```text
//! Universe   = vanilla
//! Executable = script.sh
//! +VMType    = "vm-name"
//! +VMLoc     = "http://repository.tld/your.vm.img.gz"
//! +VMMem     = "512"
//! Queue
//! ```
//!
//! Keys are matched case-insensitively. Plus-prefixed VM attributes keep
//! their value with the surrounding double quotes removed; `Requirements`
//! is kept verbatim but never evaluated, matching is by `VMType` alone.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{CpuArch, Job, JobId, Network, QueueState, SchedState};

/// Standard keys with their canonical spelling.
const STANDARD_KEYS: &[&str] = &[
    "Universe",
    "Executable",
    "Arguments",
    "Log",
    "Output",
    "Error",
    "should_transfer_files",
    "when_to_transfer_output",
    "Requirements",
    "Priority",
];

/// Plus-prefixed VM attributes, canonical spelling without the `+`.
pub const VM_KEYS: &[&str] =
    &["VMType", "VMLoc", "VMAMI", "VMCPUArch", "VMCPUCores", "VMStorage", "VMMem", "VMNetwork"];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SubmitError {
    #[error("line {line}: {reason}")]
    Syntax { line: usize, reason: String },
    #[error("line {line}: duplicate key {key}")]
    DuplicateKey { line: usize, key: String },
    #[error("missing attribute {0}")]
    MissingAttribute(String),
    #[error("bad number for {0}")]
    BadNumber(String),
    #[error("bad value `{value}` for {key}")]
    BadValue { key: String, value: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SubmitDescriptor {
    pub standard_attrs: BTreeMap<String, String>,
    pub vm_attrs: BTreeMap<String, String>,
    pub queue_count: u32,
}

fn canonical_standard(key: &str) -> String {
    STANDARD_KEYS
        .iter()
        .find(|k| k.eq_ignore_ascii_case(key))
        .map(|k| k.to_string())
        .unwrap_or_else(|| key.to_ascii_lowercase())
}

fn canonical_vm(key: &str) -> Option<&'static str> {
    VM_KEYS.iter().copied().find(|k| k.eq_ignore_ascii_case(key))
}

/// `Some(count)` when the line is a `Queue [n]` statement.
fn queue_statement(line: &str, lineno: usize) -> Option<Result<u32, SubmitError>> {
    let mut words = line.split_whitespace();
    let first = words.next()?;
    if !first.eq_ignore_ascii_case("queue") || line.contains('=') {
        return None;
    }
    let rest: Vec<&str> = words.collect();
    let result = match rest.as_slice() {
        [] => Ok(1),
        [n] => match n.parse::<u32>() {
            Ok(0) | Err(_) => Err(SubmitError::Syntax { line: lineno, reason: format!("bad Queue count `{n}`") }),
            Ok(count) => Ok(count),
        },
        _ => Err(SubmitError::Syntax { line: lineno, reason: "Queue takes at most one count".into() }),
    };
    Some(result)
}

fn strip_quotes(value: &str) -> Option<&str> {
    if value.len() >= 2 && value.starts_with('"') && value.ends_with('"') {
        Some(&value[1..value.len() - 1])
    } else {
        None
    }
}

/// Parses a submit description. Total over all inputs: every string yields
/// a descriptor or a positioned error.
pub fn parse_submit(text: &str) -> Result<SubmitDescriptor, SubmitError> {
    let mut desc = SubmitDescriptor::default();
    let mut seen_assignment = false;
    let mut queue: Option<u32> = None;
    let mut last_line = 0;

    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        last_line = lineno;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if queue.is_some() {
            return Err(SubmitError::Syntax { line: lineno, reason: "statement after Queue".into() });
        }
        if let Some(count) = queue_statement(line, lineno) {
            queue = Some(count?);
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            if !seen_assignment {
                // Free-text title above the first attribute, as in the
                // published sample script.
                log::debug!("line {lineno}: ignoring preamble `{line}`");
                continue;
            }
            return Err(SubmitError::Syntax { line: lineno, reason: "expected `key = value` or Queue".into() });
        };
        let key = key.trim();
        let value = value.trim();
        if key.is_empty() || key.contains(char::is_whitespace) || key == "+" {
            return Err(SubmitError::Syntax { line: lineno, reason: format!("bad key `{key}`") });
        }
        seen_assignment = true;

        match key.strip_prefix('+').and_then(canonical_vm) {
            Some(vm_key) => {
                if desc.vm_attrs.contains_key(vm_key) {
                    return Err(SubmitError::DuplicateKey { line: lineno, key: vm_key.to_string() });
                }
                let value = match strip_quotes(value) {
                    Some(inner) => inner,
                    None => {
                        log::warn!("line {lineno}: value of +{vm_key} is not quoted");
                        value
                    }
                };
                desc.vm_attrs.insert(vm_key.to_string(), value.to_string());
            }
            None => {
                desc.standard_attrs.insert(canonical_standard(key), value.to_string());
            }
        }
    }

    match queue {
        Some(count) => {
            desc.queue_count = count;
            Ok(desc)
        }
        None => Err(SubmitError::Syntax { line: last_line + 1, reason: "missing Queue statement".into() }),
    }
}

impl SubmitDescriptor {
    /// Renders the descriptor back to submit-file text.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.standard_attrs {
            let _ = writeln!(out, "{k} = {v}");
        }
        for (k, v) in &self.vm_attrs {
            let _ = writeln!(out, "+{k} = \"{v}\"");
        }
        if self.queue_count == 1 {
            out.push_str("Queue\n");
        } else {
            let _ = writeln!(out, "Queue {}", self.queue_count);
        }
        out
    }

    fn vm(&self, key: &str) -> Option<&str> {
        self.vm_attrs.get(key).map(String::as_str).filter(|v| !v.is_empty())
    }

    fn number<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T, SubmitError> {
        match self.vm(key) {
            None => Ok(default),
            Some(v) => v.trim().parse::<T>().map_err(|_| SubmitError::BadNumber(key.to_string())),
        }
    }
}

/// Expands a descriptor into `queue_count` jobs with ids `id_seed..`.
///
/// Defaults: `VMCPUArch` x86, `VMCPUCores` 1, priority 1, `VMNetwork`
/// private, `VMMem` and `VMStorage` 0.
pub fn descriptor_to_jobs(d: &SubmitDescriptor, user: &str, id_seed: u64) -> Result<Vec<Job>, SubmitError> {
    let vmtype = d.vm("VMType").ok_or_else(|| SubmitError::MissingAttribute("VMType".into()))?;
    let vm_loc = d.vm("VMLoc").unwrap_or_default();
    let vm_ami = d.vm("VMAMI").unwrap_or_default();
    if vm_loc.is_empty() && vm_ami.is_empty() {
        return Err(SubmitError::MissingAttribute("image".into()));
    }
    let vm_cpu_arch = match d.vm("VMCPUArch") {
        None => CpuArch::X86,
        Some(v) => v.parse().map_err(|_| SubmitError::BadValue { key: "VMCPUArch".into(), value: v.into() })?,
    };
    let vm_network = match d.vm("VMNetwork") {
        None => Network::Private,
        Some(v) => v.parse().map_err(|_| SubmitError::BadValue { key: "VMNetwork".into(), value: v.into() })?,
    };
    let vm_cpu_cores: u32 = d.number("VMCPUCores", 1)?;
    if vm_cpu_cores == 0 {
        return Err(SubmitError::BadNumber("VMCPUCores".into()));
    }
    let vm_mem: u64 = d.number("VMMem", 0)?;
    let vm_storage: u64 = d.number("VMStorage", 0)?;
    let priority = match d.standard_attrs.get("Priority").map(|v| v.trim()).filter(|v| !v.is_empty()) {
        None => 1,
        Some(v) => v.parse::<i32>().map_err(|_| SubmitError::BadNumber("Priority".into()))?,
    };
    let vm_name = match d.standard_attrs.get("+vmname") {
        Some(name) => strip_quotes(name).unwrap_or(name).to_string(),
        None if !vm_loc.is_empty() => vm_loc.rsplit('/').next().unwrap_or(vm_loc).to_string(),
        None => vm_ami.to_string(),
    };

    Ok((0..d.queue_count as u64)
        .map(|i| Job {
            global_job_id: JobId(id_seed + i),
            user: user.to_string(),
            priority,
            vmtype: vmtype.to_string(),
            vm_network,
            vm_cpu_arch,
            vm_name: vm_name.clone(),
            vm_loc: vm_loc.to_string(),
            vm_ami: vm_ami.to_string(),
            vm_mem,
            vm_cpu_cores,
            vm_storage,
            sched_state: SchedState::New,
            queue_state: QueueState::Queued,
        })
        .collect())
}
