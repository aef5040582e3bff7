//! Parameter sweeps: every grid cell and seed is an isolated run, executed in
//! parallel and reported in grid-key order.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::Value;

use crate::scenario::{apply_overrides, select_paths, validate, Scenario};
use crate::system::{run, RunOptions};

#[derive(Debug, Clone, PartialEq)]
pub struct Axis {
    pub path: String,
    pub values: Vec<f64>,
}

/// Parse `path=v1,v2,...`.
pub fn parse_axis(s: &str) -> Result<Axis, String> {
    let (path, list) = s
        .split_once('=')
        .ok_or_else(|| format!("`{s}` is not path=v1,v2,..."))?;
    let values = list
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| format!("{path}: `{v}` is not a number"))
        })
        .collect::<Result<Vec<_>, _>>()?;
    if values.is_empty() {
        return Err(format!("{path}: no values"));
    }
    Ok(Axis {
        path: path.trim().to_string(),
        values,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub key: Vec<f64>,
    pub seed: u64,
    pub faults: u64,
    pub undetected: u64,
    pub pending: u64,
    pub accounting_ok: bool,
    pub min_availability: f64,
    pub max_overhead: f64,
    pub detection_latency_mean: f64,
    pub recovery_latency_mean: f64,
    pub checkpoints: u64,
    pub loss_of_mission: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepTable {
    pub axes: Vec<String>,
    pub rows: Vec<SweepRow>,
}

fn literal(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 9.0e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

/// Reject axes that do not address an existing numeric field.
fn check_axes(base: &Value, axes: &[Axis]) -> Result<(), String> {
    for a in axes {
        let mut probe = base.clone();
        let slots = select_paths(&mut probe, &a.path)?;
        if slots.is_empty() {
            return Err(format!("{}: selects nothing", a.path));
        }
        for s in slots {
            if !(s.is_number() || s.is_null()) {
                return Err(format!("{}: not a numeric field", a.path));
            }
        }
    }
    Ok(())
}

fn cells(axes: &[Axis]) -> Vec<Vec<f64>> {
    axes.iter().fold(vec![Vec::new()], |acc, a| {
        acc.iter()
            .flat_map(|prefix| {
                a.values.iter().map(move |v| {
                    let mut k = prefix.clone();
                    k.push(*v);
                    k
                })
            })
            .collect()
    })
}

pub fn sweep(base: &Scenario, axes: &[Axis], seeds: &[u64]) -> Result<SweepTable, String> {
    let value = serde_json::to_value(base).map_err(|e| e.to_string())?;
    check_axes(&value, axes)?;
    let jobs: Vec<(Vec<f64>, u64)> = cells(axes)
        .into_iter()
        .flat_map(|k| seeds.iter().map(move |s| (k.clone(), *s)))
        .collect();
    let mut rows = jobs
        .par_iter()
        .map(|(key, seed)| {
            let mut v = value.clone();
            let mut overrides: Vec<(String, String)> = axes
                .iter()
                .zip(key)
                .map(|(a, x)| (a.path.clone(), literal(*x)))
                .collect();
            overrides.push(("seed".into(), seed.to_string()));
            apply_overrides(&mut v, &overrides)?;
            let scenario: Scenario = serde_json::from_value(v).map_err(|e| e.to_string())?;
            let problems = validate(&scenario);
            if !problems.is_empty() {
                return Err(problems.join("; "));
            }
            let r = run(&scenario, &RunOptions::default()).map_err(|e| e.to_string())?;
            let m = r.metrics;
            Ok(SweepRow {
                key: key.clone(),
                seed: *seed,
                faults: m.faults_injected,
                undetected: m.outcomes.get("undetected").copied().unwrap_or(0),
                pending: m.outcomes.get("pending").copied().unwrap_or(0),
                accounting_ok: m.accounting_ok,
                min_availability: m.availability.values().copied().fold(1.0, f64::min),
                max_overhead: m.checkpoint_overhead.values().copied().fold(0.0, f64::max),
                detection_latency_mean: m.detection_latency.mean,
                recovery_latency_mean: m.recovery_latency.mean,
                checkpoints: m.checkpoints,
                loss_of_mission: m.loss_of_mission,
            })
        })
        .collect::<Result<Vec<_>, String>>()?;
    rows.sort_by(|a, b| a.key.partial_cmp(&b.key).unwrap_or(std::cmp::Ordering::Equal).then(a.seed.cmp(&b.seed)));
    Ok(SweepTable {
        axes: axes.iter().map(|a| a.path.clone()).collect(),
        rows,
    })
}

impl SweepTable {
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = self.axes.clone();
        header.extend(
            [
                "seed",
                "faults",
                "undetected",
                "pending",
                "accounting_ok",
                "min_availability",
                "max_overhead",
                "detection_latency_mean",
                "recovery_latency_mean",
                "checkpoints",
                "loss_of_mission",
            ]
            .map(String::from),
        );
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec: Vec<String> = r.key.iter().map(|x| literal(*x)).collect();
            rec.extend([
                r.seed.to_string(),
                r.faults.to_string(),
                r.undetected.to_string(),
                r.pending.to_string(),
                r.accounting_ok.to_string(),
                r.min_availability.to_string(),
                r.max_overhead.to_string(),
                r.detection_latency_mean.to_string(),
                r.recovery_latency_mean.to_string(),
                r.checkpoints.to_string(),
                r.loss_of_mission.to_string(),
            ]);
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_parsing() {
        let a = parse_axis("threads.*.period=1000,2000").unwrap();
        assert_eq!(a.values, vec![1000.0, 2000.0]);
        assert!(parse_axis("seed=abc").is_err());
        assert!(parse_axis("nothing").is_err());
    }

    #[test]
    fn grid_is_cartesian() {
        let axes = vec![
            Axis { path: "a".into(), values: vec![1.0, 2.0] },
            Axis { path: "b".into(), values: vec![3.0, 4.0, 5.0] },
        ];
        let c = cells(&axes);
        assert_eq!(c.len(), 6);
        assert_eq!(c[0], vec![1.0, 3.0]);
        assert_eq!(c[5], vec![2.0, 5.0]);
    }

    #[test]
    fn non_numeric_axis_rejected() {
        let v = serde_json::json!({"name": "x", "horizon": 5});
        let bad = Axis { path: "name".into(), values: vec![1.0] };
        assert!(check_axes(&v, &[bad]).is_err());
        let good = Axis { path: "horizon".into(), values: vec![1.0] };
        assert!(check_axes(&v, &[good]).is_ok());
    }
}
