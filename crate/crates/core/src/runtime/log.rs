//! Per-query event log. Every metric is computed from these records.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::query::Strategy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalSource {
    Prompt,
    Prefetch,
    Sync,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Served {
    Prefetch,
    Reuse,
    Sync,
    Nothing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    QueryStart {
        trace_id: u64,
        n_tokens: usize,
        mode: String,
    },
    TokenEmitted {
        #[serde(skip_serializing_if = "Option::is_none", default)]
        p_hat: Option<f64>,
    },
    Trigger {
        p_hat: f64,
    },
    Skip {
        sufficiency: f64,
        cache_entry: Option<u64>,
    },
    Wait {
        k_star: usize,
    },
    Extend {
        clarity: f64,
    },
    Cancel {
        request_id: Option<u64>,
        reason: String,
    },
    Enqueue {
        request_id: u64,
        trigger_token: usize,
        confidence: f64,
        priority: f64,
        strategy: Strategy,
        n_queries: usize,
        predicted_need: usize,
    },
    RetrievalStart {
        request_id: u64,
        source: RetrievalSource,
    },
    RetrievalFinish {
        request_id: u64,
        latency_ms: f64,
        qrs: f64,
    },
    CacheHit {
        request_id: u64,
        via: Served,
    },
    CacheMiss {
        late_request: Option<u64>,
    },
    Integrate {
        served: Served,
        best_cos: f64,
    },
    QueryEnd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEvent {
    pub time_ms: f64,
    pub token_index: usize,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunEventLog {
    pub events: Vec<RunEvent>,
}

impl RunEventLog {
    pub fn push(&mut self, time_ms: f64, token_index: usize, kind: EventKind) {
        debug_assert!(
            self.events.last().is_none_or(|e| e.time_ms <= time_ms),
            "log time went backwards: {kind:?} at {time_ms}"
        );
        self.events.push(RunEvent {
            time_ms,
            token_index,
            kind,
        });
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn count(&self, pred: impl Fn(&EventKind) -> bool) -> usize {
        self.events.iter().filter(|e| pred(&e.kind)).count()
    }

    /// Check ordering and request bookkeeping.
    pub fn validate(&self) -> Result<()> {
        let mut open = std::collections::BTreeMap::new();
        let mut last = f64::NEG_INFINITY;
        for (i, e) in self.events.iter().enumerate() {
            if e.time_ms < last {
                return Err(Error::Log(format!("event {i} goes back in time")));
            }
            last = e.time_ms;
            match &e.kind {
                EventKind::RetrievalStart { request_id, .. } => {
                    if open.insert(*request_id, i).is_some() {
                        return Err(Error::Log(format!("request {request_id} started twice")));
                    }
                }
                EventKind::RetrievalFinish { request_id, .. } => {
                    if open.remove(request_id).is_none() {
                        return Err(Error::Log(format!("request {request_id} finished without a start")));
                    }
                }
                EventKind::Cancel { request_id: Some(id), .. } => {
                    open.remove(id);
                }
                _ => {}
            }
        }
        if let Some((id, _)) = open.into_iter().next() {
            return Err(Error::Log(format!("request {id} started but never finished or cancelled")));
        }
        Ok(())
    }

    pub fn write(&self, out: &mut impl Write) -> Result<()> {
        for e in &self.events {
            serde_json::to_writer(&mut *out, e).map_err(|e| Error::Format(e.to_string()))?;
            out.write_all(b"\n").map_err(|e| Error::Log(e.to_string()))?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("json is utf-8")
    }

    pub fn read(input: impl BufRead) -> Result<Self> {
        let mut events = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line.map_err(|e| Error::Log(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let ev: RunEvent = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
            events.push(ev);
        }
        Ok(RunEventLog { events })
    }
}

/// Split a concatenated multi-query log back into per-query logs.
pub fn split_queries(log: RunEventLog) -> Vec<RunEventLog> {
    let mut out: Vec<RunEventLog> = Vec::new();
    for e in log.events {
        if matches!(e.kind, EventKind::QueryStart { .. }) {
            out.push(RunEventLog::default());
        }
        if let Some(cur) = out.last_mut() {
            cur.events.push(e);
        }
    }
    out
}

pub fn export_logs(logs: &[RunEventLog], path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    for l in logs {
        l.write(&mut w)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn import_logs(path: &Path) -> Result<Vec<RunEventLog>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(split_queries(RunEventLog::read(std::io::BufReader::new(f))?))
}
