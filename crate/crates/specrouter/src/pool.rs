//! Model registry and device placement.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dist::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{FamilyConfig, ModelSpec, SimModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceSpec {
    pub device_id: String,
    pub capacity: u64,
    #[serde(default = "one")]
    pub speed_multiplier: f64,
    /// Used only when no regular device can host a model.
    #[serde(default)]
    pub fallback: bool,
}

fn one() -> f64 {
    1.0
}

impl DeviceSpec {
    pub fn new(id: impl Into<String>, capacity: u64) -> Self {
        Self {
            device_id: id.into(),
            capacity,
            speed_multiplier: 1.0,
            fallback: false,
        }
    }

    pub fn cpu_fallback(id: impl Into<String>, capacity: u64, speed_multiplier: f64) -> Self {
        Self {
            device_id: id.into(),
            capacity,
            speed_multiplier,
            fallback: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolConfig {
    pub family: FamilyConfig,
    pub devices: Vec<DeviceSpec>,
    pub models: Vec<ModelSpec>,
    pub target_model_id: String,
}

impl PoolConfig {
    pub fn model(&self, id: &str) -> Option<&ModelSpec> {
        self.models.iter().find(|m| m.model_id == id)
    }

    /// Fills in default capability ranks and checks pool invariants.
    pub fn resolved(&self) -> Result<PoolConfig> {
        let mut cfg = self.clone();
        cfg.family.vocabulary()?;
        if cfg.models.is_empty() {
            return Err(Error::InvalidPool("no models".into()));
        }
        for m in &cfg.models {
            m.validate()?;
        }
        let mut ids: Vec<&str> = cfg.models.iter().map(|m| m.model_id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidPool("duplicate model id".into()));
        }

        // Slower models are presumed more capable.
        let mut by_time: Vec<usize> = (0..cfg.models.len()).collect();
        by_time.sort_by(|&a, &b| {
            let (ma, mb) = (&cfg.models[a], &cfg.models[b]);
            ma.decode_time
                .total_cmp(&mb.decode_time)
                .then_with(|| ma.model_id.cmp(&mb.model_id))
        });
        for (rank, &i) in by_time.iter().enumerate() {
            cfg.models[i].capability_rank.get_or_insert(rank as i64);
        }
        let mut ranks: Vec<i64> = cfg.models.iter().map(|m| m.rank()).collect();
        ranks.sort_unstable();
        if ranks.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidPool("capability ranks must be distinct".into()));
        }

        let target = cfg.model(&cfg.target_model_id).ok_or_else(|| {
            Error::InvalidPool(format!("target `{}` is not a registered model", cfg.target_model_id))
        })?;
        if target.divergence_eps != 0.0 || target.temperature != 1.0 || target.logit_noise != 0.0 {
            return Err(Error::InvalidPool(
                "the target model must have divergence_eps 0, temperature 1 and no logit noise".into(),
            ));
        }
        if cfg.devices.is_empty() {
            return Err(Error::InvalidPool("no devices".into()));
        }
        for d in &cfg.devices {
            if !(d.speed_multiplier >= 1.0) {
                return Err(Error::InvalidPool(format!(
                    "device `{}` speed_multiplier must be at least 1",
                    d.device_id
                )));
            }
        }
        if !cfg.devices.iter().any(|d| d.capacity >= target.memory_units) {
            return Err(Error::InvalidPool("no device can hold the target model".into()));
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Placement {
    pub device: usize,
    pub device_id: String,
    /// Device speed multiplier times any injected latency factor.
    pub multiplier: f64,
    pub fallback: bool,
    /// Models unloaded to make room, oldest first.
    pub evicted: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct ModelHandle {
    pub model: Arc<SimModel>,
    pub placement: Placement,
}

#[derive(Debug)]
pub struct ModelPool {
    config: PoolConfig,
    vocab: Vocabulary,
    models: BTreeMap<String, Arc<SimModel>>,
    by_rank: Vec<String>,
    resident: BTreeMap<String, usize>,
    used: Vec<u64>,
    last_used: BTreeMap<String, u64>,
    tick: u64,
    latency_factor: BTreeMap<String, f64>,
}

impl ModelPool {
    pub fn new(config: &PoolConfig) -> Result<Self> {
        let config = config.resolved()?;
        let vocab = config.family.vocabulary()?;
        let mut models = BTreeMap::new();
        for spec in &config.models {
            let m = SimModel::new(spec.clone(), config.family.clone())?;
            models.insert(spec.model_id.clone(), Arc::new(m));
        }
        let mut by_rank: Vec<&ModelSpec> = config.models.iter().collect();
        by_rank.sort_by_key(|m| m.rank());
        let by_rank = by_rank.into_iter().map(|m| m.model_id.clone()).collect();
        let used = vec![0; config.devices.len()];
        Ok(Self {
            config,
            vocab,
            models,
            by_rank,
            resident: BTreeMap::new(),
            used,
            last_used: BTreeMap::new(),
            tick: 0,
            latency_factor: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &PoolConfig {
        &self.config
    }

    pub fn vocabulary(&self) -> Vocabulary {
        self.vocab
    }

    pub fn target_id(&self) -> &str {
        &self.config.target_model_id
    }

    /// Model ids in ascending capability order.
    pub fn models_by_capability(&self) -> &[String] {
        &self.by_rank
    }

    pub fn model(&self, id: &str) -> Result<&Arc<SimModel>> {
        self.models.get(id).ok_or_else(|| Error::UnknownModel(id.to_string()))
    }

    pub fn spec(&self, id: &str) -> Result<&ModelSpec> {
        Ok(self.model(id)?.spec())
    }

    pub fn devices(&self) -> &[DeviceSpec] {
        &self.config.devices
    }

    pub fn device_usage(&self) -> &[u64] {
        &self.used
    }

    pub fn resident_device(&self, id: &str) -> Option<usize> {
        self.resident.get(id).copied()
    }

    /// Scales every future latency of `id` by `factor` (1 restores nominal).
    pub fn set_latency_factor(&mut self, id: &str, factor: f64) -> Result<()> {
        self.model(id)?;
        self.latency_factor.insert(id.to_string(), factor);
        Ok(())
    }

    pub fn latency_factor(&self, id: &str) -> f64 {
        self.latency_factor.get(id).copied().unwrap_or(1.0)
    }

    fn placement(&self, id: &str, device: usize, evicted: Vec<String>) -> Placement {
        let d = &self.config.devices[device];
        Placement {
            device,
            device_id: d.device_id.clone(),
            multiplier: d.speed_multiplier * self.latency_factor(id),
            fallback: d.fallback,
            evicted,
        }
    }

    fn free(&self, device: usize) -> u64 {
        self.config.devices[device].capacity - self.used[device]
    }

    fn fitting_device(&self, mem: u64, fallback: bool) -> Option<usize> {
        let mut candidates: Vec<usize> = (0..self.config.devices.len())
            .filter(|&i| self.config.devices[i].fallback == fallback && self.free(i) >= mem)
            .collect();
        candidates.sort_by(|&a, &b| {
            self.config.devices[a]
                .speed_multiplier
                .total_cmp(&self.config.devices[b].speed_multiplier)
                .then(a.cmp(&b))
        });
        candidates.first().copied()
    }

    fn place(&mut self, id: &str, device: usize) {
        self.used[device] += self.models[id].spec().memory_units;
        self.resident.insert(id.to_string(), device);
    }

    pub fn unload(&mut self, id: &str) {
        if let Some(device) = self.resident.remove(id) {
            self.used[device] -= self.models[id].spec().memory_units;
        }
    }

    /// Makes `id` resident and returns its handle. Evicts least recently used
    /// non-target models when regular devices are full and falls back to a
    /// fallback device as a last resort.
    pub fn acquire_model(&mut self, id: &str) -> Result<ModelHandle> {
        let model = self.model(id)?.clone();
        self.tick += 1;
        self.last_used.insert(id.to_string(), self.tick);
        if let Some(&device) = self.resident.get(id) {
            return Ok(ModelHandle {
                model,
                placement: self.placement(id, device, Vec::new()),
            });
        }
        let mem = model.spec().memory_units;
        let mut evicted = Vec::new();
        let device = loop {
            if let Some(d) = self.fitting_device(mem, false) {
                break Some(d);
            }
            let victim = self
                .resident
                .iter()
                .filter(|(m, &d)| {
                    m.as_str() != self.config.target_model_id
                        && !self.config.devices[d].fallback
                        && self.config.devices[d].capacity >= mem
                })
                .min_by_key(|(m, _)| self.last_used.get(m.as_str()).copied().unwrap_or(0))
                .map(|(m, _)| m.clone());
            match victim {
                Some(v) => {
                    self.unload(&v);
                    evicted.push(v);
                }
                None => break self.fitting_device(mem, true),
            }
        };
        let Some(device) = device else {
            return Err(if id == self.config.target_model_id {
                Error::TargetUnplaceable(id.to_string())
            } else {
                Error::Unplaceable(id.to_string())
            });
        };
        self.place(id, device);
        Ok(ModelHandle {
            model,
            placement: self.placement(id, device, evicted),
        })
    }

    /// Moves `id` to a fallback device, as after an out-of-memory failure.
    pub fn demote(&mut self, id: &str) -> Result<Placement> {
        let mem = self.model(id)?.spec().memory_units;
        if let Some(&d) = self.resident.get(id) {
            if self.config.devices[d].fallback {
                return Ok(self.placement(id, d, Vec::new()));
            }
        }
        self.unload(id);
        match self.fitting_device(mem, true) {
            Some(d) => {
                self.place(id, d);
                Ok(self.placement(id, d, Vec::new()))
            }
            None if id == self.config.target_model_id => Err(Error::TargetUnplaceable(id.to_string())),
            None => Err(Error::Unplaceable(id.to_string())),
        }
    }
}
