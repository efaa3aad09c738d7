//! General and cloud resource configuration files.
//!
//! Both are INI style: `[section]` headers, `key = value` lines, `#` or `;`
//! comments. Durations are whole numbers with an optional unit suffix
//! (`ms`, `s`, `m`, `h`); a bare number means seconds.
//!
//! The general file has `[scheduler]`, `[persistence]` and `[daemon]`
//! sections. The cloud file has one section per cluster, named after it.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::backend::{BootLatency, SimCloudConfig};
use crate::model::{CloudType, Cluster, CpuArch, Millis, Network, HOUR, MINUTE, SECOND};
use crate::scheduler::{RebalanceMode, SchedulerConfig};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{file}:{line}: {}{reason}", field.as_ref().map(|f| format!("{f}: ")).unwrap_or_default())]
pub struct ConfigError {
    pub file: String,
    /// 0 when the error is not tied to a line (missing file or section).
    pub line: usize,
    pub field: Option<String>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IniEntry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IniSection {
    pub name: String,
    pub line: usize,
    pub entries: Vec<IniEntry>,
}

impl IniSection {
    pub fn get(&self, key: &str) -> Option<&IniEntry> {
        self.entries.iter().find(|e| e.key.eq_ignore_ascii_case(key))
    }
}

/// Parses INI text. Keys before the first section header are an error, as
/// are duplicate sections and duplicate keys within a section.
pub fn parse_ini(text: &str, file: &str) -> Result<Vec<IniSection>, ConfigError> {
    let err = |line: usize, field: Option<&str>, reason: String| ConfigError {
        file: file.to_string(),
        line,
        field: field.map(str::to_string),
        reason,
    };
    let mut sections: Vec<IniSection> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let s = raw.trim();
        if s.is_empty() || s.starts_with('#') || s.starts_with(';') {
            continue;
        }
        if let Some(rest) = s.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .map(str::trim)
                .filter(|n| !n.is_empty())
                .ok_or_else(|| err(line, None, format!("malformed section header {s:?}")))?;
            if sections.iter().any(|sec| sec.name == name) {
                return Err(err(line, None, format!("duplicate section [{name}]")));
            }
            sections.push(IniSection { name: name.to_string(), line, entries: Vec::new() });
            continue;
        }
        let (key, value) =
            s.split_once('=').ok_or_else(|| err(line, None, format!("expected key = value, got {s:?}")))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(err(line, None, "empty key".into()));
        }
        let section =
            sections.last_mut().ok_or_else(|| err(line, Some(key), "assignment before any [section]".into()))?;
        if section.get(key).is_some() {
            return Err(err(line, Some(key), format!("duplicate key in [{}]", section.name)));
        }
        section.entries.push(IniEntry { key: key.to_string(), value: value.trim().to_string(), line });
    }
    Ok(sections)
}

pub fn parse_duration(s: &str) -> Result<Millis, String> {
    let s = s.trim();
    let split = s.find(|c: char| !c.is_ascii_digit()).unwrap_or(s.len());
    let (num, unit) = s.split_at(split);
    let n: Millis = num.parse().map_err(|_| format!("bad duration {s:?}"))?;
    let scale = match unit.trim() {
        "" | "s" => SECOND,
        "ms" => 1,
        "m" => MINUTE,
        "h" => HOUR,
        other => return Err(format!("bad duration unit {other:?}")),
    };
    n.checked_mul(scale).ok_or_else(|| format!("duration {s:?} overflows"))
}

struct Reader<'a> {
    file: &'a str,
    section: &'a IniSection,
}

impl<'a> Reader<'a> {
    fn fail(&self, e: &IniEntry, reason: String) -> ConfigError {
        ConfigError { file: self.file.to_string(), line: e.line, field: Some(e.key.clone()), reason }
    }

    fn missing(&self, key: &str) -> ConfigError {
        ConfigError {
            file: self.file.to_string(),
            line: self.section.line,
            field: Some(key.to_string()),
            reason: format!("missing in [{}]", self.section.name),
        }
    }

    fn raw(&self, key: &str) -> Option<&'a IniEntry> {
        self.section.get(key)
    }

    fn required(&self, key: &str) -> Result<&'a IniEntry, ConfigError> {
        self.raw(key).ok_or_else(|| self.missing(key))
    }

    fn parse<T>(&self, key: &str, f: impl Fn(&str) -> Result<T, String>) -> Result<Option<T>, ConfigError> {
        match self.raw(key) {
            Some(e) => f(&e.value).map(Some).map_err(|r| self.fail(e, r)),
            None => Ok(None),
        }
    }

    fn require<T>(&self, key: &str, f: impl Fn(&str) -> Result<T, String>) -> Result<T, ConfigError> {
        let e = self.required(key)?;
        f(&e.value).map_err(|r| self.fail(e, r))
    }

    fn reject_unknown(&self, known: &[&str]) -> Result<(), ConfigError> {
        for e in &self.section.entries {
            if !known.iter().any(|k| k.eq_ignore_ascii_case(&e.key)) {
                return Err(self.fail(e, format!("unknown key in [{}]", self.section.name)));
            }
        }
        Ok(())
    }
}

fn unsigned<T: std::str::FromStr>(s: &str) -> Result<T, String> {
    s.parse().map_err(|_| format!("expected a non-negative integer, got {s:?}"))
}

fn probability(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(p) if (0.0..=1.0).contains(&p) => Ok(p),
        _ => Err(format!("expected a probability in [0, 1], got {s:?}")),
    }
}

fn boolean(s: &str) -> Result<bool, String> {
    match s.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(format!("expected true or false, got {s:?}")),
    }
}

fn list<T: std::str::FromStr + Ord>(s: &str) -> Result<std::collections::BTreeSet<T>, String>
where
    T::Err: std::fmt::Display,
{
    let set = s
        .split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(|x| x.parse::<T>().map_err(|e| e.to_string()))
        .collect::<Result<std::collections::BTreeSet<T>, String>>()?;
    if set.is_empty() {
        return Err("empty list".into());
    }
    Ok(set)
}

fn latency(s: &str) -> Result<BootLatency, String> {
    match s.split_once('-') {
        Some((lo, hi)) => Ok(BootLatency::Uniform(parse_duration(lo)?, parse_duration(hi)?)),
        None => Ok(BootLatency::Fixed(parse_duration(s)?)),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneralConfig {
    pub scheduler: SchedulerConfig,
    pub persist_path: Option<PathBuf>,
    pub socket: PathBuf,
}

pub const DEFAULT_SOCKET: &str = "/tmp/cloudsched.sock";

pub fn parse_general(text: &str, file: &str) -> Result<GeneralConfig, ConfigError> {
    let sections = parse_ini(text, file)?;
    let mut cfg = GeneralConfig {
        scheduler: SchedulerConfig::default(),
        persist_path: None,
        socket: PathBuf::from(DEFAULT_SOCKET),
    };
    for section in &sections {
        let r = Reader { file, section };
        match section.name.as_str() {
            "scheduler" => {
                r.reject_unknown(&[
                    "rebalance_mode",
                    "poll_interval",
                    "schedule_interval",
                    "cleanup_interval",
                    "error_threshold",
                    "boot_timeout",
                    "drain_timeout",
                    "persist_on_shutdown",
                ])?;
                let s = &mut cfg.scheduler;
                if let Some(m) = r.parse("rebalance_mode", |v| v.parse::<RebalanceMode>())? {
                    s.rebalance_mode = m;
                }
                let positive = |v: &str| match parse_duration(v)? {
                    0 => Err("must be > 0".to_string()),
                    d => Ok(d),
                };
                if let Some(d) = r.parse("poll_interval", positive)? {
                    s.poll_interval = d;
                }
                if let Some(d) = r.parse("schedule_interval", positive)? {
                    s.schedule_interval = d;
                }
                if let Some(d) = r.parse("cleanup_interval", positive)? {
                    s.cleanup_interval = d;
                }
                if let Some(d) = r.parse("boot_timeout", positive)? {
                    s.boot_timeout = d;
                }
                if let Some(d) = r.parse("drain_timeout", |v| {
                    if v.eq_ignore_ascii_case("none") {
                        Ok(None)
                    } else {
                        positive(v).map(Some)
                    }
                })? {
                    s.drain_timeout = d;
                }
                if let Some(n) = r.parse("error_threshold", |v| match unsigned::<u32>(v)? {
                    0 => Err("must be >= 1".to_string()),
                    n => Ok(n),
                })? {
                    s.error_threshold = n;
                }
                if let Some(b) = r.parse("persist_on_shutdown", boolean)? {
                    s.persist_on_shutdown = b;
                }
            }
            "persistence" => {
                r.reject_unknown(&["path"])?;
                cfg.persist_path = r.parse("path", |v| Ok(PathBuf::from(v)))?;
            }
            "daemon" => {
                r.reject_unknown(&["socket"])?;
                if let Some(p) = r.parse("socket", |v| Ok(PathBuf::from(v)))? {
                    cfg.socket = p;
                }
            }
            other => {
                return Err(ConfigError {
                    file: file.to_string(),
                    line: section.line,
                    field: None,
                    reason: format!("unknown section [{other}]"),
                })
            }
        }
    }
    if cfg.scheduler.persist_on_shutdown && cfg.persist_path.is_none() {
        return Err(ConfigError {
            file: file.to_string(),
            line: 0,
            field: Some("path".into()),
            reason: "persist_on_shutdown needs [persistence] path".into(),
        });
    }
    Ok(cfg)
}

/// A cluster from the cloud file, with the simulator settings that back it.
#[derive(Debug, Clone, PartialEq)]
pub struct CloudSpec {
    pub cluster: Cluster,
    pub sim: SimCloudConfig,
}

const CLOUD_KEYS: &[&str] = &[
    "host",
    "cloud_type",
    "memory",
    "cpu_archs",
    "networks",
    "vm_slots",
    "cpu_cores",
    "storage",
    "boot_latency",
    "fault_rate",
    "boot_failure_rate",
    "rng_seed",
];

pub fn parse_clouds(text: &str, file: &str) -> Result<Vec<CloudSpec>, ConfigError> {
    let sections = parse_ini(text, file)?;
    let mut out = Vec::with_capacity(sections.len());
    for section in &sections {
        let r = Reader { file, section };
        r.reject_unknown(CLOUD_KEYS)?;
        let cluster = Cluster {
            name: section.name.clone(),
            host: r.require("host", |v| Ok(v.to_string()))?,
            cloud_type: r.require("cloud_type", |v| v.parse::<CloudType>().map_err(|e| e.to_string()))?,
            memory: r.require("memory", unsigned)?,
            cpu_archs: r.require("cpu_archs", list::<CpuArch>)?,
            networks: r.require("networks", list::<Network>)?,
            vm_slots: r.require("vm_slots", unsigned)?,
            cpu_cores: r.require("cpu_cores", unsigned)?,
            storage: r.require("storage", unsigned)?,
            vms: Vec::new(),
        };
        let mut sim = SimCloudConfig::default();
        if let Some(l) = r.parse("boot_latency", latency)? {
            sim.boot_latency = l;
        }
        if let Some(p) = r.parse("fault_rate", probability)? {
            sim.fault_rate = p;
        }
        if let Some(p) = r.parse("boot_failure_rate", probability)? {
            sim.boot_failure_rate = p;
        }
        if let Some(s) = r.parse("rng_seed", unsigned)? {
            sim.rng_seed = s;
        }
        if let Err(reason) = sim.validate() {
            return Err(ConfigError {
                file: file.to_string(),
                line: section.line,
                field: Some("boot_latency".into()),
                reason,
            });
        }
        out.push(CloudSpec { cluster, sim });
    }
    Ok(out)
}

fn read(path: &Path) -> Result<String, ConfigError> {
    std::fs::read_to_string(path).map_err(|e| ConfigError {
        file: path.display().to_string(),
        line: 0,
        field: None,
        reason: e.to_string(),
    })
}

pub fn load_general(path: &Path) -> Result<GeneralConfig, ConfigError> {
    parse_general(&read(path)?, &path.display().to_string())
}

pub fn load_clouds(path: &Path) -> Result<Vec<CloudSpec>, ConfigError> {
    parse_clouds(&read(path)?, &path.display().to_string())
}
