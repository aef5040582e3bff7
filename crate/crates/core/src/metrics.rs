//! Run metrics, recomputed from a trace alone.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::trace::TraceRecord;

pub const OUTCOMES: [&str; 7] = [
    "corrected",
    "replaced",
    "repaired",
    "degraded",
    "undetected",
    "absorbed",
    "pending",
];

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub count: u64,
    pub mean: f64,
    pub max: u64,
}

impl LatencyStats {
    fn from_samples(samples: &[u64]) -> Self {
        if samples.is_empty() {
            return Self::default();
        }
        Self {
            count: samples.len() as u64,
            mean: samples.iter().sum::<u64>() as f64 / samples.len() as f64,
            max: samples.iter().copied().max().unwrap_or(0),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    /// The trace has no `run-end` record; figures cover what was recorded.
    pub partial: bool,
    pub end_time: u64,
    pub faults_injected: u64,
    pub injected_by_kind: BTreeMap<String, u64>,
    pub outcomes: BTreeMap<String, u64>,
    /// Injected faults equal the sum over outcomes.
    pub accounting_ok: bool,
    pub detection_latency: LatencyStats,
    pub recovery_latency: LatencyStats,
    pub availability: BTreeMap<String, f64>,
    /// Fraction of time each tile spent in checkpoint work.
    pub checkpoint_overhead: BTreeMap<String, f64>,
    pub checkpoints: u64,
    pub disagreements: u64,
    pub propagation_window_events: u64,
    pub escaped_outputs: u64,
    pub no_majority_windows: u64,
    pub supervisor_commands: u64,
    pub loss_of_mission: bool,
    pub loss_of_capability: Vec<String>,
}

fn u(v: &Value, key: &str) -> Option<u64> {
    v.get(key).and_then(Value::as_u64)
}

fn s<'a>(v: &'a Value, key: &str) -> Option<&'a str> {
    v.get(key).and_then(Value::as_str)
}

pub fn compute_metrics(records: &[TraceRecord]) -> MetricsSummary {
    let mut m = MetricsSummary {
        outcomes: OUTCOMES.iter().map(|o| (o.to_string(), 0)).collect(),
        ..Default::default()
    };
    let end = records
        .iter()
        .rev()
        .find(|r| r.kind == "run-end")
        .map(|r| r.at.ticks());
    m.partial = end.is_none();
    let end = end.unwrap_or_else(|| records.last().map_or(0, |r| r.at.ticks()));
    m.end_time = end;

    let mut threads: Vec<String> = Vec::new();
    let mut tiles: Vec<String> = Vec::new();
    let mut down_since: BTreeMap<String, u64> = BTreeMap::new();
    let mut down_total: BTreeMap<String, u64> = BTreeMap::new();
    let mut busy: BTreeMap<String, u64> = BTreeMap::new();
    let mut detection = Vec::new();
    let mut recovery = Vec::new();

    for r in records {
        let p = &r.payload;
        let at = r.at.ticks();
        match r.kind.as_str() {
            "run-start" => {
                let names = |key| -> Vec<String> {
                    p.get(key)
                        .and_then(Value::as_array)
                        .map(|a| a.iter().filter_map(|x| x.as_str().map(str::to_string)).collect())
                        .unwrap_or_default()
                };
                threads = names("threads");
                tiles = names("tiles");
            }
            "fault-injected" => {
                m.faults_injected += 1;
                if let Some(k) = s(p, "kind") {
                    *m.injected_by_kind.entry(k.to_string()).or_default() += 1;
                }
            }
            "fault-outcome" => {
                if let Some(o) = s(p, "outcome") {
                    *m.outcomes.entry(o.to_string()).or_default() += 1;
                }
                let injected = u(p, "injected_at");
                let detected = u(p, "detected_at");
                if let (Some(i), Some(d)) = (injected, detected) {
                    detection.push(d.saturating_sub(i));
                }
                if let (Some(d), Some(rec)) = (detected, u(p, "recovered_at")) {
                    recovery.push(rec.saturating_sub(d));
                }
            }
            "thread-down" => {
                if let Some(t) = s(p, "thread") {
                    down_since.entry(t.to_string()).or_insert(at);
                }
            }
            "thread-up" => {
                if let Some(t) = s(p, "thread") {
                    if let Some(since) = down_since.remove(t) {
                        *down_total.entry(t.to_string()).or_default() += at - since;
                    }
                }
            }
            "checkpoint-complete" => {
                m.checkpoints += 1;
                if let Some(members) = p.get("durations").and_then(Value::as_object) {
                    for (tile, d) in members {
                        *busy.entry(tile.clone()).or_default() += d.as_u64().unwrap_or(0);
                    }
                }
            }
            "verdict" => {
                if s(p, "verdict").is_some_and(|v| v != "all-agree") {
                    m.disagreements += 1;
                }
            }
            "output-divergence" => {
                m.propagation_window_events += u(p, "divergent").unwrap_or(0);
                m.escaped_outputs += u(p, "propagated").unwrap_or(0);
                if p.get("no_majority").and_then(Value::as_bool) == Some(true) {
                    m.no_majority_windows += 1;
                }
            }
            "command" => m.supervisor_commands += 1,
            "loss-of-mission" => m.loss_of_mission = true,
            "loss-of-capability" => {
                if let Some(tg) = s(p, "thread_group") {
                    m.loss_of_capability.push(tg.to_string());
                }
            }
            _ => {}
        }
    }
    for (t, since) in down_since {
        *down_total.entry(t).or_default() += end.saturating_sub(since);
    }
    let span = end.max(1) as f64;
    m.availability = threads
        .iter()
        .map(|t| {
            let down = down_total.get(t).copied().unwrap_or(0) as f64;
            (t.clone(), 1.0 - down / span)
        })
        .collect();
    m.checkpoint_overhead = tiles
        .iter()
        .map(|t| (t.clone(), busy.get(t).copied().unwrap_or(0) as f64 / span))
        .collect();
    m.detection_latency = LatencyStats::from_samples(&detection);
    m.recovery_latency = LatencyStats::from_samples(&recovery);
    m.accounting_ok = m.outcomes.values().sum::<u64>() == m.faults_injected;
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::SimTime;
    use serde_json::json;

    fn rec(at: u64, kind: &str, payload: Value) -> TraceRecord {
        TraceRecord {
            at: SimTime(at),
            actor: "sim".into(),
            kind: kind.into(),
            payload,
        }
    }

    #[test]
    fn availability_and_accounting() {
        let trace = vec![
            rec(0, "run-start", json!({"threads": ["Ta"], "tiles": ["C0"]})),
            rec(10, "fault-injected", json!({"fault_id": 0, "kind": "transient-state"})),
            rec(100, "thread-down", json!({"thread": "Ta"})),
            rec(150, "checkpoint-complete", json!({"durations": {"C0": 50}})),
            rec(200, "thread-up", json!({"thread": "Ta"})),
            rec(210, "fault-outcome", json!({"fault_id": 0, "outcome": "corrected", "injected_at": 10, "detected_at": 110, "recovered_at": 210})),
            rec(1000, "run-end", json!({})),
        ];
        let m = compute_metrics(&trace);
        assert!(!m.partial);
        assert!(m.accounting_ok);
        assert!((m.availability["Ta"] - 0.9).abs() < 1e-12);
        assert!((m.checkpoint_overhead["C0"] - 0.05).abs() < 1e-12);
        assert_eq!(m.detection_latency.max, 100);
        assert_eq!(m.recovery_latency.mean, 100.0);
        assert_eq!(m.outcomes["corrected"], 1);
    }

    #[test]
    fn truncated_trace_is_partial() {
        let trace = vec![
            rec(0, "run-start", json!({"threads": [], "tiles": []})),
            rec(5, "fault-injected", json!({"fault_id": 0, "kind": "sefi-tile"})),
        ];
        let m = compute_metrics(&trace);
        assert!(m.partial);
        assert!(!m.accounting_ok);
        assert_eq!(m.end_time, 5);
    }
}
