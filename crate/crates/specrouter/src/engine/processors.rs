use serde::{Deserialize, Serialize};

use crate::dist::{residual_dist, ProbDist, TokenId, TokenSeq};
use crate::error::{Error, Result};
use crate::model::SimModel;
use crate::rng::SimRng;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// Argmax everywhere; a candidate survives iff it equals the verifier's
    /// argmax.
    #[default]
    Greedy,
    /// Sampling with `min(1, p/q)` acceptance and residual resampling.
    Stochastic,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AcceptanceRule {
    #[default]
    Standard,
    /// Accepts every candidate. Only for mutation tests.
    AlwaysAccept,
}

impl AcceptanceRule {
    pub fn is_standard(&self) -> bool {
        *self == AcceptanceRule::Standard
    }
}

fn pick(dist: &ProbDist, mode: SamplingMode, rng: &mut SimRng) -> TokenId {
    match mode {
        SamplingMode::Greedy => dist.argmax(),
        SamplingMode::Stochastic => dist.sample(rng),
    }
}

/// `window` autoregressive proposals after `context`, with the drafter's
/// distribution at each step.
pub fn draft_row(
    model: &SimModel,
    context: &[TokenId],
    window: usize,
    mode: SamplingMode,
    rng: &mut SimRng,
) -> (TokenSeq, Vec<ProbDist>) {
    let mut ctx = context.to_vec();
    let mut tokens = Vec::with_capacity(window);
    let mut dists = Vec::with_capacity(window);
    for _ in 0..window {
        let d = model.next_dist(&ctx);
        let t = pick(&d, mode, rng);
        ctx.push(t);
        tokens.push(t);
        dists.push(d);
    }
    (tokens, dists)
}

/// One row's verification result at one level.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelRow {
    pub accepted: usize,
    pub emitted: TokenSeq,
    /// The verifier's distribution at every emitted position.
    pub emitted_dists: Vec<ProbDist>,
    /// `(proposal, verifier)` distributions at every candidate position.
    pub pairs: Vec<(ProbDist, ProbDist)>,
}

/// Verifies `candidate` (drawn from `proposals`) with `model` in one forward
/// pass. Emits the accepted prefix plus the replacement at the first
/// rejection, or plus a bonus token when everything was accepted and
/// `emit_bonus` is set. An empty candidate degenerates to one decode step.
#[allow(clippy::too_many_arguments)]
pub fn verify_row(
    model: &SimModel,
    context: &[TokenId],
    candidate: &[TokenId],
    proposals: &[ProbDist],
    mode: SamplingMode,
    rule: AcceptanceRule,
    emit_bonus: bool,
    rng: &mut SimRng,
) -> Result<LevelRow> {
    if candidate.len() != proposals.len() {
        return Err(Error::Dimension {
            left: candidate.len(),
            right: proposals.len(),
        });
    }
    let dists = model.forward_pass(context, candidate);
    let m = candidate.len();
    let mut emitted = Vec::with_capacity(m + 1);
    let mut pairs = Vec::with_capacity(m);
    for i in 0..m {
        pairs.push((proposals[i].clone(), dists[i].clone()));
    }
    for i in 0..m {
        let x = candidate[i];
        let p = &dists[i];
        let ok = match (rule, mode) {
            (AcceptanceRule::AlwaysAccept, _) => true,
            (AcceptanceRule::Standard, SamplingMode::Greedy) => x == p.argmax(),
            (AcceptanceRule::Standard, SamplingMode::Stochastic) => {
                let q = proposals[i].prob(x);
                let px = p.prob(x);
                let u = rng.uniform();
                if q == 0.0 {
                    px > 0.0
                } else {
                    u < px / q
                }
            }
        };
        if !ok {
            let replacement = match mode {
                SamplingMode::Greedy => p.argmax(),
                SamplingMode::Stochastic => residual_dist(p, &proposals[i])?.sample(rng),
            };
            emitted.push(replacement);
            return Ok(LevelRow {
                accepted: i,
                emitted,
                emitted_dists: dists[..=i].to_vec(),
                pairs,
            });
        }
        emitted.push(x);
    }
    let mut emitted_dists = dists;
    if emit_bonus {
        emitted.push(pick(&emitted_dists[m], mode, rng));
    } else {
        emitted_dists.truncate(m);
    }
    Ok(LevelRow {
        accepted: m,
        emitted,
        emitted_dists,
        pairs,
    })
}
