//! JSON-lines trace of everything a run does.

use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::engine::SimTime;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceRecord {
    pub at: SimTime,
    pub actor: String,
    pub kind: String,
    pub payload: Value,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    records: Vec<TraceRecord>,
}

impl Trace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, at: SimTime, actor: impl Into<String>, kind: &str, payload: Value) {
        debug_assert!(self.records.last().is_none_or(|r| r.at <= at), "trace out of order");
        self.records.push(TraceRecord {
            at,
            actor: actor.into(),
            kind: kind.to_string(),
            payload,
        });
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<TraceRecord> {
        self.records
    }

    pub fn of_kind<'a>(&'a self, kind: &'a str) -> impl Iterator<Item = &'a TraceRecord> + 'a {
        self.records.iter().filter(move |r| r.kind == kind)
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("json is utf-8")
    }
}

impl From<Vec<TraceRecord>> for Trace {
    fn from(records: Vec<TraceRecord>) -> Self {
        Self { records }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TraceError {
    #[error("line {line}: {source}")]
    Record { line: usize, source: serde_json::Error },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<TraceRecord>, TraceError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|source| TraceError::Record { line: i + 1, source })?;
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn jsonl_round_trip() {
        let mut t = Trace::new();
        t.push(SimTime(0), "sim", "run-start", json!({"horizon": 10}));
        t.push(SimTime(4), "C2", "fault-injected", json!({"fault_id": 0, "kind": "transient-state"}));
        let text = t.to_jsonl();
        assert_eq!(text.lines().count(), 2);
        assert!(text.starts_with(r#"{"at":0,"actor":"sim","kind":"run-start","payload":{"horizon":10}}"#));
        let back = read_jsonl(text.as_bytes()).unwrap();
        assert_eq!(back, t.records());
    }

    #[test]
    fn bad_line_is_located() {
        let err = read_jsonl("{\"at\":0,\"actor\":\"a\",\"kind\":\"k\",\"payload\":null}\nnot json\n".as_bytes())
            .unwrap_err();
        assert!(err.to_string().starts_with("line 2"));
    }
}
