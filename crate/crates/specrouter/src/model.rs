//! Simulated autoregressive models.
//!
//! Every model in a pool reads the same latent logit process: for a context
//! `c`, latent logits `z(c)` are a deterministic function of the family seed
//! and a hash of `c`. The designated target samples from `softmax(z)`. Other
//! models reshape it with a temperature, optional model-private logit noise,
//! and a mixture toward uniform:
//!
//! ```text
//! q(c) = (1 − ε) · softmax(z(c) / τ + σ · η_model(c)) + ε · uniform
//! ```
//!
//! With `σ = 0` and `τ = 1` the distance to the target is exactly
//! `ε · dtv(p, uniform)`, so acceptance rates are tuned by a single knob.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::dist::{ProbDist, TokenId, Vocabulary};
use crate::error::{Error, Result};
use crate::rng::{hash_bytes, mix64};

/// Parameters of the shared latent process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilyConfig {
    pub vocab_size: usize,
    #[serde(default)]
    pub eos_id: TokenId,
    #[serde(default = "default_generator_seed")]
    pub generator_seed: u64,
    /// Standard deviation of the latent logits; larger means peakier targets.
    #[serde(default = "default_logit_scale")]
    pub logit_scale: f64,
    /// Added to the end-of-sequence logit.
    #[serde(default = "default_eos_bias")]
    pub eos_logit_bias: f64,
    /// Only the last `k` tokens feed the context hash; `None` hashes all.
    #[serde(default)]
    pub markov_order: Option<usize>,
}

fn default_generator_seed() -> u64 {
    0x5eed
}
fn default_logit_scale() -> f64 {
    2.0
}
fn default_eos_bias() -> f64 {
    -6.0
}

impl FamilyConfig {
    pub fn new(vocab_size: usize, eos_id: TokenId, generator_seed: u64) -> Self {
        Self {
            vocab_size,
            eos_id,
            generator_seed,
            logit_scale: default_logit_scale(),
            eos_logit_bias: default_eos_bias(),
            markov_order: None,
        }
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::new(self.vocab_size, self.eos_id)
    }

    fn window<'a>(&self, context: &'a [TokenId]) -> &'a [TokenId] {
        match self.markov_order {
            Some(k) if context.len() > k => &context[context.len() - k..],
            _ => context,
        }
    }

    /// Latent logits for a context.
    pub fn latent_logits(&self, context: &[TokenId]) -> Vec<f64> {
        self.latent_from_hash(context_hash(self.window(context)))
    }

    fn latent_from_hash(&self, ctx_hash: u64) -> Vec<f64> {
        let key = mix64(self.generator_seed ^ ctx_hash);
        let mut z: Vec<f64> = (0..self.vocab_size)
            .map(|v| self.logit_scale * gaussian(key, v as u64))
            .collect();
        z[self.eos_id as usize] += self.eos_logit_bias;
        z
    }
}

fn incremental_hash(h: u64, token: TokenId) -> u64 {
    mix64(h.wrapping_mul(0x0000_0100_0000_01b3) ^ (u64::from(token) + 0x9e37))
}

/// Order-sensitive 64-bit hash of a token sequence.
pub fn context_hash(tokens: &[TokenId]) -> u64 {
    tokens.iter().fold(0x51_7cc1_b727_220a, |h, &t| incremental_hash(h, t))
}

fn unit_open(bits: u64) -> f64 {
    // (0, 1], never zero so the logarithm below stays finite
    ((bits >> 11) as f64 + 1.0) / (1u64 << 53) as f64
}

/// Standard normal draw indexed by `(key, index)` via Box-Muller.
fn gaussian(key: u64, index: u64) -> f64 {
    let a = mix64(key ^ index.wrapping_mul(0xA24B_AED4_963E_E407));
    let b = mix64(a ^ 0x2545_F491_4F6C_DD1D);
    let r = (-2.0 * unit_open(a).ln()).sqrt();
    r * (TAU * unit_open(b)).cos()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerifyCostMode {
    /// One parallel pass costs one decode step regardless of candidate length.
    #[default]
    Constant,
    /// A pass over `m` candidates costs `m` decode steps.
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Prefill,
    Decode,
    Verify,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub model_id: String,
    /// Higher is more capable. Defaults to descending decode time order.
    #[serde(default)]
    pub capability_rank: Option<i64>,
    /// Seconds per decode step.
    pub decode_time: f64,
    /// Defaults to `0.1 · decode_time`.
    #[serde(default)]
    pub prefill_time_per_token: Option<f64>,
    #[serde(default)]
    pub verify_cost_mode: VerifyCostMode,
    #[serde(default)]
    pub batch_scaling_coeff: f64,
    #[serde(default)]
    pub divergence_eps: f64,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    /// Scale of model-private logit noise. Unlike `divergence_eps` this moves
    /// the argmax, which greedy verification needs to see any rejections.
    #[serde(default)]
    pub logit_noise: f64,
    #[serde(default = "default_memory")]
    pub memory_units: u64,
}

fn default_temperature() -> f64 {
    1.0
}
fn default_memory() -> u64 {
    1
}

impl ModelSpec {
    pub fn new(model_id: impl Into<String>, decode_time: f64) -> Self {
        Self {
            model_id: model_id.into(),
            capability_rank: None,
            decode_time,
            prefill_time_per_token: None,
            verify_cost_mode: VerifyCostMode::Constant,
            batch_scaling_coeff: 0.0,
            divergence_eps: 0.0,
            temperature: 1.0,
            logit_noise: 0.0,
            memory_units: 1,
        }
    }

    pub fn with_eps(mut self, eps: f64) -> Self {
        self.divergence_eps = eps;
        self
    }

    pub fn with_rank(mut self, rank: i64) -> Self {
        self.capability_rank = Some(rank);
        self
    }

    pub fn with_noise(mut self, sigma: f64) -> Self {
        self.logit_noise = sigma;
        self
    }

    pub fn with_memory(mut self, units: u64) -> Self {
        self.memory_units = units;
        self
    }

    pub fn with_verify_mode(mut self, mode: VerifyCostMode) -> Self {
        self.verify_cost_mode = mode;
        self
    }

    pub fn rank(&self) -> i64 {
        self.capability_rank.unwrap_or(0)
    }

    pub fn prefill_time(&self) -> f64 {
        self.prefill_time_per_token
            .unwrap_or(0.1 * self.decode_time)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidPool(format!("model `{}`: {m}", self.model_id)));
        if !(self.decode_time > 0.0 && self.decode_time.is_finite()) {
            return bad("decode_time must be positive");
        }
        if self.prefill_time() < 0.0 {
            return bad("prefill_time_per_token must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.divergence_eps) {
            return bad("divergence_eps must lie in [0, 1]");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive");
        }
        if self.batch_scaling_coeff < 0.0 || self.logit_noise < 0.0 {
            return bad("batch_scaling_coeff and logit_noise must be non-negative");
        }
        if self.memory_units == 0 {
            return bad("memory_units must be positive");
        }
        Ok(())
    }

    fn batch_factor(&self, batch_size: usize) -> f64 {
        1.0 + self.batch_scaling_coeff * (batch_size.max(1) - 1) as f64
    }

    /// Simulated seconds for one operation.
    pub fn step_latency(
        &self,
        kind: StepKind,
        token_count: usize,
        batch_size: usize,
        multiplier: f64,
    ) -> f64 {
        let per_step = self.decode_time * self.batch_factor(batch_size) * multiplier;
        match kind {
            StepKind::Decode => token_count as f64 * per_step,
            StepKind::Prefill => token_count as f64 * self.prefill_time() * multiplier,
            StepKind::Verify => match self.verify_cost_mode {
                VerifyCostMode::Constant => per_step,
                VerifyCostMode::Linear => token_count as f64 * per_step,
            },
        }
    }
}

/// An immutable simulated model.
#[derive(Debug, Clone)]
pub struct SimModel {
    spec: ModelSpec,
    family: FamilyConfig,
    model_hash: u64,
}

impl SimModel {
    pub fn new(spec: ModelSpec, family: FamilyConfig) -> Result<Self> {
        spec.validate()?;
        family.vocabulary()?;
        let model_hash = hash_bytes(spec.model_id.as_bytes());
        Ok(Self {
            spec,
            family,
            model_hash,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn id(&self) -> &str {
        &self.spec.model_id
    }

    pub fn family(&self) -> &FamilyConfig {
        &self.family
    }

    fn is_exact_target(&self) -> bool {
        self.spec.divergence_eps == 0.0 && self.spec.temperature == 1.0 && self.spec.logit_noise == 0.0
    }

    fn dist_from_hash(&self, ctx_hash: u64) -> ProbDist {
        let z = self.family.latent_from_hash(ctx_hash);
        if self.is_exact_target() {
            return ProbDist::softmax(&z);
        }
        let key = mix64(self.family.generator_seed ^ ctx_hash ^ self.model_hash);
        let tau = self.spec.temperature;
        let sigma = self.spec.logit_noise;
        let logits: Vec<f64> = z
            .iter()
            .enumerate()
            .map(|(v, zv)| {
                let noise = if sigma > 0.0 { sigma * gaussian(key, v as u64) } else { 0.0 };
                zv / tau + noise
            })
            .collect();
        let base = ProbDist::softmax(&logits);
        let eps = self.spec.divergence_eps;
        let u = 1.0 / self.family.vocab_size as f64;
        let mixed = base.probs().iter().map(|p| (1.0 - eps) * p + eps * u).collect();
        ProbDist::from_weights(mixed).expect("mixture has positive mass")
    }

    /// Next-token distribution after `context`.
    pub fn next_dist(&self, context: &[TokenId]) -> ProbDist {
        self.dist_from_hash(context_hash(self.family.window(context)))
    }

    /// Distributions at every prefix of `context ++ candidate`, starting with
    /// `context` itself: `|candidate| + 1` entries.
    pub fn forward_pass(&self, context: &[TokenId], candidate: &[TokenId]) -> Vec<ProbDist> {
        match self.family.markov_order {
            None => {
                let mut h = context_hash(context);
                let mut out = Vec::with_capacity(candidate.len() + 1);
                out.push(self.dist_from_hash(h));
                for &t in candidate {
                    h = incremental_hash(h, t);
                    out.push(self.dist_from_hash(h));
                }
                out
            }
            Some(_) => {
                let mut full = context.to_vec();
                let mut out = Vec::with_capacity(candidate.len() + 1);
                out.push(self.next_dist(&full));
                for &t in candidate {
                    full.push(t);
                    out.push(self.next_dist(&full));
                }
                out
            }
        }
    }

    pub fn step_latency(&self, kind: StepKind, token_count: usize, batch_size: usize, multiplier: f64) -> f64 {
        self.spec.step_latency(kind, token_count, batch_size, multiplier)
    }
}
