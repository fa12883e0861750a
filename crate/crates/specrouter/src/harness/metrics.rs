use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dist::TokenSeq;
use crate::engine::RequestContext;

/// Lifecycle of one request as seen by the metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub request_id: u64,
    pub arrival: f64,
    pub first_token_time: Option<f64>,
    pub completion_time: Option<f64>,
    /// Committed tokens per row.
    pub tokens: Vec<usize>,
    /// Chain label of every committed cycle.
    pub chains: Vec<String>,
    pub success: bool,
    pub fallback: bool,
    pub failed_cycles: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip)]
    pub outputs: Vec<TokenSeq>,
}

impl RequestRecord {
    /// Tokens of the longest row, the count used for time-per-token.
    pub fn token_count(&self) -> usize {
        self.tokens.iter().copied().max().unwrap_or(0)
    }

    pub fn total_tokens(&self) -> usize {
        self.tokens.iter().sum()
    }
}

impl From<&RequestContext> for RequestRecord {
    fn from(req: &RequestContext) -> Self {
        Self {
            request_id: req.request_id,
            arrival: req.arrival,
            first_token_time: req.first_token_time,
            completion_time: req.completion_time,
            tokens: req.committed.iter().map(Vec::len).collect(),
            chains: req.chain_history.clone(),
            success: req.failure.is_none() && req.completion_time.is_some(),
            fallback: req.fallback,
            failed_cycles: req.failed_cycles,
            error: req.failure.clone(),
            outputs: req.committed.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub p50: f64,
    pub p95: f64,
}

/// Nearest-rank percentile of sorted data, `p` in (0, 100].
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

pub fn summarize(values: &[f64]) -> Option<Summary> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some(Summary {
        mean: v.iter().sum::<f64>() / v.len() as f64,
        p50: percentile(&v, 50.0),
        p95: percentile(&v, 95.0),
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub requests: usize,
    pub completed: usize,
    pub failed: usize,
    pub makespan: f64,
    pub total_tokens: usize,
    pub goodput_tokens_per_s: f64,
    pub request_throughput: f64,
    pub ttft: Option<Summary>,
    pub tpot_mean: Option<f64>,
    /// Requests left out of the time-per-token mean for having one token.
    pub tpot_excluded: usize,
    pub tmo_tpot: Option<f64>,
    pub eaf: Option<f64>,
    pub slo_threshold: f64,
    pub slo_attainment: f64,
}

/// Aggregates request records. `tmo_tpot` is the baseline's mean
/// time-per-token for the acceleration factor.
pub fn compute_metrics(records: &[RequestRecord], tmo_tpot: Option<f64>, slo_threshold: f64) -> Metrics {
    let ok: Vec<&RequestRecord> = records.iter().filter(|r| r.success).collect();
    let start = records.iter().map(|r| r.arrival).fold(f64::INFINITY, f64::min);
    let end = ok
        .iter()
        .filter_map(|r| r.completion_time)
        .fold(f64::NEG_INFINITY, f64::max);
    let makespan = if ok.is_empty() { 0.0 } else { end - start };
    let total_tokens: usize = ok.iter().map(|r| r.total_tokens()).sum();

    let ttfts: Vec<f64> = ok
        .iter()
        .filter_map(|r| r.first_token_time.map(|t| t - r.arrival))
        .collect();
    let mut tpots = Vec::new();
    let mut excluded = 0;
    for r in &ok {
        let n = r.token_count();
        match (r.first_token_time, r.completion_time) {
            (Some(f), Some(c)) if n >= 2 => tpots.push((c - f) / (n - 1) as f64),
            _ => excluded += 1,
        }
    }
    let tpot_mean = (!tpots.is_empty()).then(|| tpots.iter().sum::<f64>() / tpots.len() as f64);
    let eaf = match (tmo_tpot, tpot_mean) {
        (Some(b), Some(s)) if s > 0.0 => Some(b / s),
        _ => None,
    };
    let within = records
        .iter()
        .filter(|r| r.success && r.completion_time.is_some_and(|c| c - r.arrival <= slo_threshold))
        .count();
    let rate = |x: f64| if makespan > 0.0 { x / makespan } else { 0.0 };
    Metrics {
        requests: records.len(),
        completed: ok.len(),
        failed: records.len() - ok.len(),
        makespan,
        total_tokens,
        goodput_tokens_per_s: rate(total_tokens as f64),
        request_throughput: rate(ok.len() as f64),
        ttft: summarize(&ttfts),
        tpot_mean,
        tpot_excluded: excluded,
        tmo_tpot,
        eaf,
        slo_threshold,
        slo_attainment: if records.is_empty() {
            0.0
        } else {
            within as f64 / records.len() as f64
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Divergence {
    pub request_id: u64,
    pub row: usize,
    pub position: usize,
}

/// Token-exact comparison of committed outputs; reports the first
/// differing `(request, row, position)`.
pub fn equivalence_check(a: &[RequestRecord], b: &[RequestRecord]) -> Result<(), Divergence> {
    let index: BTreeMap<u64, &RequestRecord> = b.iter().map(|r| (r.request_id, r)).collect();
    for ra in a {
        let Some(rb) = index.get(&ra.request_id) else {
            return Err(Divergence {
                request_id: ra.request_id,
                row: 0,
                position: 0,
            });
        };
        let rows = ra.outputs.len().max(rb.outputs.len());
        for row in 0..rows {
            let empty = Vec::new();
            let xa = ra.outputs.get(row).unwrap_or(&empty);
            let xb = rb.outputs.get(row).unwrap_or(&empty);
            if xa != xb {
                let position = xa.iter().zip(xb).take_while(|(x, y)| x == y).count();
                return Err(Divergence {
                    request_id: ra.request_id,
                    row,
                    position,
                });
            }
        }
    }
    if a.len() != b.len() {
        let missing = b.iter().find(|r| !a.iter().any(|x| x.request_id == r.request_id));
        return Err(Divergence {
            request_id: missing.map_or(0, |r| r.request_id),
            row: 0,
            position: 0,
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: u64, arrival: f64, first: f64, done: f64, tokens: usize) -> RequestRecord {
        RequestRecord {
            request_id: id,
            arrival,
            first_token_time: Some(first),
            completion_time: Some(done),
            tokens: vec![tokens],
            chains: Vec::new(),
            success: true,
            fallback: false,
            failed_cycles: 0,
            error: None,
            outputs: vec![vec![1; tokens]],
        }
    }

    #[test]
    fn single_request_tpot() {
        let m = compute_metrics(&[rec(0, 0.0, 1.0, 2.0, 11)], Some(0.25), 5.0);
        assert!((m.tpot_mean.unwrap() - 0.1).abs() < 1e-12);
        assert!((m.eaf.unwrap() - 2.5).abs() < 1e-12);
        assert_eq!(m.slo_attainment, 1.0);
        assert!((m.goodput_tokens_per_s - 5.5).abs() < 1e-12);
    }

    #[test]
    fn one_token_requests_excluded() {
        let m = compute_metrics(&[rec(0, 0.0, 1.0, 1.0, 1), rec(1, 0.0, 1.0, 2.0, 3)], None, 1.5);
        assert_eq!(m.tpot_excluded, 1);
        assert!((m.tpot_mean.unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(m.slo_attainment, 0.5);
        assert_eq!(m.eaf, None);
    }

    #[test]
    fn percentiles_nearest_rank() {
        let v: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(percentile(&v, 50.0), 10.0);
        assert_eq!(percentile(&v, 95.0), 19.0);
        assert_eq!(percentile(&v, 100.0), 20.0);
        assert_eq!(percentile(&[3.0], 95.0), 3.0);
    }

    #[test]
    fn equivalence_reports_first_divergence() {
        let a = vec![rec(0, 0.0, 1.0, 2.0, 4)];
        let mut b = a.clone();
        assert!(equivalence_check(&a, &b).is_ok());
        b[0].outputs[0][2] = 9;
        assert_eq!(
            equivalence_check(&a, &b),
            Err(Divergence {
                request_id: 0,
                row: 0,
                position: 2
            })
        );
    }
}
