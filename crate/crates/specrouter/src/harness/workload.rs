use std::path::{Path, PathBuf};

use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::dist::{TokenSeq, Vocabulary};
use crate::error::{Error, Result};
use crate::rng::SimRng;

/// `input_len output_len` pairs, one per line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LengthProfile {
    pub pairs: Vec<(usize, usize)>,
}

impl LengthProfile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let parsed = match fields.as_slice() {
                [a, b] => a.parse::<usize>().ok().zip(b.parse::<usize>().ok()),
                _ => None,
            };
            match parsed {
                Some((a, b)) if a >= 1 && b >= 1 => pairs.push((a, b)),
                _ => {
                    return Err(Error::Workload(format!(
                        "line {}: expected two positive integers, got `{line}`",
                        i + 1
                    )))
                }
            }
        }
        if pairs.is_empty() {
            return Err(Error::Workload("length profile has no entries".into()));
        }
        Ok(Self { pairs })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Workload(format!("cannot read length profile {}: {e}", path.display())))?;
        Self::parse(&text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LengthDist {
    Fixed { n: usize },
    /// Inclusive range.
    Uniform { min: usize, max: usize },
    /// Column of a length-profile file: input lengths for the input
    /// distribution, output lengths for the output cap.
    Empirical { path: PathBuf },
}

impl LengthDist {
    fn validate(&self) -> Result<()> {
        match *self {
            LengthDist::Fixed { n: 0 } => Err(Error::Config("lengths must be at least 1".into())),
            LengthDist::Uniform { min, max } if min == 0 || min > max => {
                Err(Error::Config("uniform lengths need 1 <= min <= max".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorkloadSpec {
    /// Poisson arrival rate in requests per second.
    pub arrival_rate: f64,
    pub num_requests: usize,
    pub input_len: LengthDist,
    pub output_len: LengthDist,
    /// Sequences per request.
    pub batch_size: usize,
    /// Defaults to the run seed.
    pub seed: Option<u64>,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self {
            arrival_rate: 1.0,
            num_requests: 8,
            input_len: LengthDist::Fixed { n: 16 },
            output_len: LengthDist::Fixed { n: 64 },
            batch_size: 1,
            seed: None,
        }
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.arrival_rate > 0.0 && self.arrival_rate.is_finite()) {
            return Err(Error::Config("workload.arrival_rate must be positive".into()));
        }
        if self.num_requests == 0 || self.batch_size == 0 {
            return Err(Error::Config("workload.num_requests and workload.batch_size must be positive".into()));
        }
        self.input_len.validate()?;
        self.output_len.validate()
    }

    /// Resolves relative profile paths against `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        for d in [&mut self.input_len, &mut self.output_len] {
            if let LengthDist::Empirical { path } = d {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadRequest {
    pub request_id: u64,
    pub arrival: f64,
    pub prompts: Vec<TokenSeq>,
    pub max_new_tokens: usize,
}

struct Sampler {
    profile: Option<LengthProfile>,
}

fn sample_len(dist: &LengthDist, profile: Option<&LengthProfile>, pick: usize, column: usize, rng: &mut SimRng) -> usize {
    match *dist {
        LengthDist::Fixed { n } => n,
        LengthDist::Uniform { min, max } => rng.range_inclusive(min, max),
        LengthDist::Empirical { .. } => {
            let p = profile.expect("profile loaded");
            let (a, b) = p.pairs[pick];
            if column == 0 {
                a
            } else {
                b
            }
        }
    }
}

/// Arrival schedule and prompts for `spec`. Inter-arrival gaps are
/// exponential with rate `arrival_rate`; prompt tokens are uniform over the
/// vocabulary without EOS. Two empirical distributions over the same file
/// sample whole lines jointly.
pub fn generate_workload(spec: &WorkloadSpec, vocab: &Vocabulary, run_seed: u64) -> Result<Vec<WorkloadRequest>> {
    spec.validate()?;
    let load = |d: &LengthDist| -> Result<Option<(PathBuf, LengthProfile)>> {
        match d {
            LengthDist::Empirical { path } => Ok(Some((path.clone(), LengthProfile::load(path)?))),
            _ => Ok(None),
        }
    };
    let input_profile = load(&spec.input_len)?;
    let output_profile = load(&spec.output_len)?;
    let joint = matches!((&input_profile, &output_profile), (Some((a, _)), Some((b, _))) if a == b);
    let inp = Sampler {
        profile: input_profile.map(|p| p.1),
    };
    let out = Sampler {
        profile: output_profile.map(|p| p.1),
    };

    let mut rng = SimRng::new(spec.seed.unwrap_or(run_seed), "workload");
    let gaps = Exp::new(spec.arrival_rate).map_err(|e| Error::Config(e.to_string()))?;
    let non_eos: Vec<u32> = (0..vocab.size() as u32).filter(|&t| t != vocab.eos_id()).collect();
    let mut t = 0.0;
    let mut requests = Vec::with_capacity(spec.num_requests);
    for id in 0..spec.num_requests as u64 {
        t += gaps.sample(rng.inner_mut());
        let pick_in = inp.profile.as_ref().map_or(0, |p| rng.below(p.pairs.len()));
        let pick_out = match (&out.profile, joint) {
            (Some(_), true) => pick_in,
            (Some(p), false) => rng.below(p.pairs.len()),
            (None, _) => 0,
        };
        let input_len = sample_len(&spec.input_len, inp.profile.as_ref(), pick_in, 0, &mut rng);
        let max_new_tokens = sample_len(&spec.output_len, out.profile.as_ref(), pick_out, 1, &mut rng);
        let prompts = (0..spec.batch_size)
            .map(|_| (0..input_len).map(|_| non_eos[rng.below(non_eos.len())]).collect())
            .collect();
        requests.push(WorkloadRequest {
            request_id: id,
            arrival: t,
            prompts,
            max_new_tokens,
        });
    }
    Ok(requests)
}
