//! Run configuration: one TOML document, validated before anything runs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::engine::{EngineConfig, FaultPolicy};
use crate::error::{Error, Result};
use crate::harness::{ExperimentMode, WorkloadSpec};
use crate::model::{FamilyConfig, ModelSpec};
use crate::pool::{DeviceSpec, ModelPool, PoolConfig};
use crate::scheduler::SchedulerConfig;
use crate::trace::{TraceLevel, SCHEMA_VERSION};

fn schema_version() -> u32 {
    SCHEMA_VERSION
}

/// Scales one model's latencies by `factor` from `at_time` on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Perturbation {
    pub at_time: f64,
    pub model_id: String,
    pub factor: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProfilerSettings {
    /// Lognormal sigma of multiplicative timing noise.
    pub measurement_noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportSettings {
    /// Seconds from arrival to completion that count as meeting the SLO.
    pub slo_threshold: f64,
    /// Re-run the workload target-only to compute the acceleration factor.
    pub tmo_baseline: bool,
}

impl Default for ReportSettings {
    fn default() -> Self {
        Self {
            slo_threshold: 5.0,
            tmo_baseline: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    pub pool: PoolConfig,
    #[serde(default)]
    pub scheduler: SchedulerConfig,
    #[serde(default)]
    pub engine: EngineConfig,
    #[serde(default)]
    pub workload: WorkloadSpec,
    #[serde(default)]
    pub mode: ExperimentMode,
    #[serde(default)]
    pub faults: FaultPolicy,
    #[serde(default)]
    pub perturbations: Vec<Perturbation>,
    #[serde(default)]
    pub profiler: ProfilerSettings,
    #[serde(default)]
    pub report: ReportSettings,
    #[serde(default)]
    pub trace: TraceLevel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

/// Parses a `KEY=VALUE` override. The value is read as a TOML value when
/// possible and as a bare string otherwise.
pub fn parse_override(arg: &str) -> Result<(String, toml::Value)> {
    let (key, raw) = arg
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{arg}` is not KEY=VALUE")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("override `{arg}` has an empty key segment")));
    }
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}

/// Sets `path` (dot separated; numeric segments index arrays) in `root`,
/// creating intermediate tables.
pub fn apply_override(root: &mut toml::Table, path: &str, value: toml::Value) -> Result<()> {
    let segments: Vec<&str> = path.split('.').collect();
    let (last, parents) = segments.split_last().expect("nonempty path");
    let mut cur: &mut toml::Value = {
        let first = parents.first().copied().unwrap_or(last);
        if parents.is_empty() {
            root.insert(first.to_string(), value);
            return Ok(());
        }
        root.entry(first.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
    };
    let bad = |seg: &str| Error::Config(format!("override `{path}`: cannot descend into `{seg}`"));
    for seg in &parents[1..] {
        cur = match cur {
            toml::Value::Table(t) => t
                .entry(seg.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new())),
            toml::Value::Array(a) => {
                let i: usize = seg.parse().map_err(|_| bad(seg))?;
                a.get_mut(i).ok_or_else(|| bad(seg))?
            }
            _ => return Err(bad(seg)),
        };
    }
    match cur {
        toml::Value::Table(t) => {
            t.insert(last.to_string(), value);
        }
        toml::Value::Array(a) => {
            let i: usize = last.parse().map_err(|_| bad(last))?;
            *a.get_mut(i).ok_or_else(|| bad(last))? = value;
        }
        _ => return Err(bad(last)),
    }
    Ok(())
}

impl RunConfig {
    /// Parses TOML text, applies `overrides` in order and validates.
    pub fn from_toml_str(text: &str, overrides: &[(String, toml::Value)]) -> Result<Self> {
        let cfg: RunConfig = if overrides.is_empty() {
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?
        } else {
            let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
            for (k, v) in overrides {
                apply_override(&mut table, k, v.clone())?;
            }
            toml::Value::Table(table)
                .try_into()
                .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`; relative length-profile paths resolve against its
    /// directory.
    pub fn load(path: &Path, overrides: &[(String, toml::Value)]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text, overrides)?;
        if let Some(dir) = path.parent() {
            cfg.workload.resolve_paths(dir);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let pool = ModelPool::new(&self.pool)?;
        self.scheduler.validate()?;
        self.engine.validate()?;
        self.workload.validate()?;
        self.faults.validate()?;
        self.mode.chain(&pool)?;
        for p in &self.perturbations {
            pool.spec(&p.model_id)?;
            if !(p.factor > 0.0 && p.at_time >= 0.0) {
                return Err(Error::Config("perturbations need factor > 0 and at_time >= 0".into()));
            }
        }
        if self.profiler.measurement_noise < 0.0 || self.report.slo_threshold <= 0.0 {
            return Err(Error::Config("measurement_noise must be >= 0 and slo_threshold > 0".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// A small complete configuration with every default spelled out.
    pub fn example() -> Self {
        let models = vec![
            ModelSpec::new("small", 0.002).with_eps(0.3).with_noise(0.5),
            ModelSpec::new("medium", 0.015).with_eps(0.1).with_noise(0.2),
            ModelSpec::new("target", 0.1),
        ];
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            pool: PoolConfig {
                family: FamilyConfig::new(32, 0, 0x5eed),
                devices: vec![DeviceSpec::new("gpu0", 4), DeviceSpec::cpu_fallback("cpu", 16, 8.0)],
                models,
                target_model_id: "target".into(),
            },
            scheduler: SchedulerConfig::default(),
            engine: EngineConfig::default(),
            workload: WorkloadSpec::default(),
            mode: ExperimentMode::default(),
            faults: FaultPolicy::default(),
            perturbations: Vec::new(),
            profiler: ProfilerSettings::default(),
            report: ReportSettings::default(),
            trace: TraceLevel::Off,
            out_dir: None,
        }
    }
}
