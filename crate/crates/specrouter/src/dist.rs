//! Vocabulary, probability vectors and the sampling primitives built on them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SimRng;

pub type TokenId = u32;

/// Ordered token history.
pub type TokenSeq = Vec<TokenId>;

/// Input sums may drift this far from one before construction fails.
pub const INPUT_TOLERANCE: f64 = 1e-9;
/// Drift beyond this is renormalized away on construction.
pub const INTERNAL_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    size: usize,
    eos_id: TokenId,
}

impl Vocabulary {
    pub fn new(size: usize, eos_id: TokenId) -> Result<Self> {
        if size < 2 {
            return Err(Error::InvalidVocabulary(format!(
                "size must be at least 2, got {size}"
            )));
        }
        if size > 1 << 16 {
            return Err(Error::InvalidVocabulary(format!(
                "size {size} exceeds 65536"
            )));
        }
        if eos_id as usize >= size {
            return Err(Error::InvalidVocabulary(format!(
                "eos id {eos_id} outside 0..{size}"
            )));
        }
        Ok(Self { size, eos_id })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn eos_id(&self) -> TokenId {
        self.eos_id
    }

    pub fn check(&self, tokens: &[TokenId]) -> Result<()> {
        match tokens.iter().find(|&&t| t as usize >= self.size) {
            Some(&token) => Err(Error::TokenOutOfRange {
                token,
                size: self.size,
            }),
            None => Ok(()),
        }
    }
}

/// A normalized probability vector over a vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ProbDist {
    probs: Vec<f64>,
}

impl ProbDist {
    /// Validates `probs`: finite, non-negative, summing to one within
    /// [`INPUT_TOLERANCE`].
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidDistribution("empty vector".into()));
        }
        if let Some(p) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(Error::InvalidDistribution(format!(
                "entry {p} is negative or not finite"
            )));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > INPUT_TOLERANCE {
            return Err(Error::InvalidDistribution(format!(
                "entries sum to {sum}"
            )));
        }
        let mut dist = Self { probs };
        if (sum - 1.0).abs() > INTERNAL_TOLERANCE {
            dist.probs.iter_mut().for_each(|p| *p /= sum);
        }
        Ok(dist)
    }

    /// Normalizes arbitrary non-negative weights.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
            return Err(Error::InvalidDistribution(format!(
                "weight {w} is negative or not finite"
            )));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::InvalidDistribution("zero total mass".into()));
        }
        Ok(Self {
            probs: weights.into_iter().map(|w| w / total).collect(),
        })
    }

    pub fn uniform(size: usize) -> Self {
        Self {
            probs: vec![1.0 / size as f64; size],
        }
    }

    pub fn one_hot(size: usize, token: TokenId) -> Self {
        let mut probs = vec![0.0; size];
        probs[token as usize] = 1.0;
        Self { probs }
    }

    /// Numerically stable softmax of `logits`.
    pub fn softmax(logits: &[f64]) -> Self {
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        Self {
            probs: exps.into_iter().map(|e| e / total).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, token: TokenId) -> f64 {
        self.probs[token as usize]
    }

    /// Inverse-CDF draw.
    pub fn sample(&self, rng: &mut SimRng) -> TokenId {
        let u = rng.uniform();
        let mut cum = 0.0;
        for (i, p) in self.probs.iter().enumerate() {
            cum += p;
            if u < cum {
                return i as TokenId;
            }
        }
        // u landed in the rounding gap above the final cumulative sum
        self.probs
            .iter()
            .rposition(|p| *p > 0.0)
            .expect("distribution has positive mass") as TokenId
    }

    /// Index of the largest probability; ties go to the lowest id.
    pub fn argmax(&self) -> TokenId {
        let mut best = 0;
        for (i, p) in self.probs.iter().enumerate().skip(1) {
            if *p > self.probs[best] {
                best = i;
            }
        }
        best as TokenId
    }
}

impl TryFrom<Vec<f64>> for ProbDist {
    type Error = Error;

    fn try_from(probs: Vec<f64>) -> Result<Self> {
        Self::new(probs)
    }
}

impl From<ProbDist> for Vec<f64> {
    fn from(d: ProbDist) -> Self {
        d.probs
    }
}

fn same_len(p: &ProbDist, q: &ProbDist) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::Dimension {
            left: p.len(),
            right: q.len(),
        });
    }
    Ok(())
}

/// Total variation distance `½ Σ |p(v) − q(v)|`.
pub fn dtv(p: &ProbDist, q: &ProbDist) -> Result<f64> {
    same_len(p, q)?;
    let s: f64 = p
        .probs
        .iter()
        .zip(&q.probs)
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok((0.5 * s).clamp(0.0, 1.0))
}

/// Probability mass shared by `p` and `q`, `Σ min(p(v), q(v))`.
///
/// This is the per-token acceptance probability of a `q`-drafted token under
/// the `min(1, p/q)` rule.
pub fn overlap(p: &ProbDist, q: &ProbDist) -> Result<f64> {
    same_len(p, q)?;
    let s: f64 = p.probs.iter().zip(&q.probs).map(|(a, b)| a.min(*b)).sum();
    Ok(s.clamp(0.0, 1.0))
}

/// `normalize(max(p − q, 0))`, or `p` itself when the residual mass is
/// below 1e-12.
pub fn residual_dist(p: &ProbDist, q: &ProbDist) -> Result<ProbDist> {
    same_len(p, q)?;
    let residual: Vec<f64> = p
        .probs
        .iter()
        .zip(&q.probs)
        .map(|(a, b)| (a - b).max(0.0))
        .collect();
    let mass: f64 = residual.iter().sum();
    if mass < INTERNAL_TOLERANCE {
        return Ok(p.clone());
    }
    Ok(ProbDist {
        probs: residual.into_iter().map(|r| r / mass).collect(),
    })
}

pub fn sample(dist: &ProbDist, rng: &mut SimRng) -> TokenId {
    dist.sample(rng)
}

pub fn argmax_token(dist: &ProbDist) -> TokenId {
    dist.argmax()
}
