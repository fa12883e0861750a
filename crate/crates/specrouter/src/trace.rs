//! JSON Lines event trace.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dist::TokenId;
use crate::error::Result;
use crate::scheduler::CandidateScore;
use crate::state::StateTraceRecord;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceLevel {
    #[default]
    Off,
    /// Prefill, decision, cycle, fault and completion events.
    Cycles,
    /// Additionally committed token ids and state operations.
    Full,
}

impl std::str::FromStr for TraceLevel {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "off" => Ok(TraceLevel::Off),
            "cycles" => Ok(TraceLevel::Cycles),
            "full" => Ok(TraceLevel::Full),
            other => Err(format!("unknown trace level `{other}` (expected off, cycles or full)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelTrace {
    pub model: String,
    /// Accepted candidates per row; inactive rows report 0.
    pub accepted: Vec<usize>,
    /// Tokens emitted per row.
    pub emitted: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TraceEvent {
    Header {
        schema_version: u32,
    },
    Prefill {
        time: f64,
        request_id: u64,
        models: Vec<String>,
        dropped: Vec<String>,
        latency: f64,
    },
    Decision {
        time: f64,
        request_id: u64,
        cycle: u64,
        chain: Vec<String>,
        window: usize,
        predicted: Option<f64>,
        candidates: Vec<CandidateScore>,
        explored: bool,
    },
    Cycle {
        time: f64,
        request_id: u64,
        cycle: u64,
        chain: Vec<String>,
        window: usize,
        levels: Vec<LevelTrace>,
        committed: Vec<usize>,
        latency: f64,
        fallback: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        tokens: Option<Vec<Vec<TokenId>>>,
    },
    Fault {
        time: f64,
        request_id: u64,
        cycle: u64,
        model: String,
        kind: String,
        consecutive: u32,
    },
    Fallback {
        time: f64,
        request_id: u64,
        cycle: u64,
    },
    Perturbation {
        time: f64,
        model: String,
        factor: f64,
    },
    RequestDone {
        time: f64,
        request_id: u64,
        success: bool,
        tokens: Vec<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        error: Option<String>,
    },
    State {
        request_id: u64,
        #[serde(flatten)]
        record: StateTraceRecord,
    },
}

/// Collects events at or below the configured verbosity.
#[derive(Debug, Clone, Default)]
pub struct TraceSink {
    level: TraceLevel,
    events: Vec<TraceEvent>,
}

impl TraceSink {
    pub fn new(level: TraceLevel) -> Self {
        Self {
            level,
            events: Vec::new(),
        }
    }

    pub fn level(&self) -> TraceLevel {
        self.level
    }

    pub fn enabled(&self) -> bool {
        self.level > TraceLevel::Off
    }

    pub fn full(&self) -> bool {
        self.level == TraceLevel::Full
    }

    pub fn push(&mut self, event: TraceEvent) {
        let needed = match event {
            TraceEvent::State { .. } => TraceLevel::Full,
            _ => TraceLevel::Cycles,
        };
        if self.level >= needed {
            self.events.push(event);
        }
    }

    pub fn events(&self) -> &[TraceEvent] {
        &self.events
    }

    pub fn into_events(self) -> Vec<TraceEvent> {
        self.events
    }
}

/// Writes a header line followed by one JSON object per event.
pub fn write_jsonl<W: Write>(mut out: W, events: &[TraceEvent]) -> Result<()> {
    let header = TraceEvent::Header {
        schema_version: SCHEMA_VERSION,
    };
    for e in std::iter::once(&header).chain(events) {
        serde_json::to_writer(&mut out, e).map_err(|e| crate::error::Error::Io(e.to_string()))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl(text: &str) -> Result<Vec<TraceEvent>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| crate::error::Error::Io(e.to_string())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn level_filtering() {
        let ev = TraceEvent::Fallback {
            time: 0.0,
            request_id: 1,
            cycle: 2,
        };
        let mut off = TraceSink::new(TraceLevel::Off);
        off.push(ev.clone());
        assert!(off.events().is_empty());
        let mut cycles = TraceSink::new(TraceLevel::Cycles);
        cycles.push(ev.clone());
        cycles.push(TraceEvent::State {
            request_id: 1,
            record: StateTraceRecord {
                cycle: 0,
                state_id: 0,
                op: "append".into(),
                logical_lens: vec![1],
                physical_len: 1,
            },
        });
        assert_eq!(cycles.events(), &[ev]);
    }

    #[test]
    fn jsonl_round_trip() {
        let events = vec![TraceEvent::Cycle {
            time: 0.25,
            request_id: 3,
            cycle: 1,
            chain: vec!["a".into(), "t".into()],
            window: 4,
            levels: vec![LevelTrace {
                model: "t".into(),
                accepted: vec![2],
                emitted: vec![3],
            }],
            committed: vec![3],
            latency: 0.1,
            fallback: false,
            tokens: None,
        }];
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &events).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("{\"event\":\"header\",\"schema_version\":1}"));
        let back = read_jsonl(&text).unwrap();
        assert_eq!(&back[1..], &events[..]);
    }
}
