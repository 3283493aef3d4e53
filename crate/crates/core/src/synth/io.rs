//! Line-delimited JSON trace files.
//!
//! Each trace is a header record followed by one record per frame:
//!
//! ```text
//! {"record":"trace","id":3,"seed":3,"theta":2.5,"n_frames":2,"events":[...],"suppressed_spans":[]}
//! {"record":"frame","token_index":0,"entropy":0.81,...,"context_embedding":[...],"phrase_complete":true}
//! {"record":"frame","token_index":1,...}
//! ```
//!
//! Floats are written in shortest round-trip form, so export/import is exact.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{SignalFrame, Trace, UncertaintyEvent};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct Header {
    id: u64,
    seed: u64,
    theta: f64,
    n_frames: usize,
    events: Vec<UncertaintyEvent>,
    suppressed_spans: Vec<(usize, usize)>,
}

#[derive(Serialize, Deserialize)]
struct FrameRecord {
    #[serde(flatten)]
    frame: SignalFrame,
    context_embedding: Vec<f64>,
    phrase_complete: bool,
}

fn tagged<T: Serialize>(tag: &str, v: &T) -> String {
    let mut obj = serde_json::Map::new();
    obj.insert("record".into(), Value::String(tag.into()));
    if let Value::Object(m) = serde_json::to_value(v).expect("record serializes") {
        obj.extend(m);
    }
    Value::Object(obj).to_string()
}

pub fn write_traces<W: Write>(traces: &[Trace], mut w: W) -> std::io::Result<()> {
    for tr in traces {
        let h = Header {
            id: tr.id,
            seed: tr.seed,
            theta: tr.theta,
            n_frames: tr.frames.len(),
            events: tr.events.clone(),
            suppressed_spans: tr.suppressed_spans.clone(),
        };
        writeln!(w, "{}", tagged("trace", &h))?;
        for (t, f) in tr.frames.iter().enumerate() {
            let rec = FrameRecord {
                frame: f.clone(),
                context_embedding: tr.context_embeddings[t].clone(),
                phrase_complete: tr.phrase_complete[t],
            };
            writeln!(w, "{}", tagged("frame", &rec))?;
        }
    }
    w.flush()
}

pub fn read_traces<R: Read>(r: R) -> Result<Vec<Trace>> {
    let mut out: Vec<Trace> = Vec::new();
    let mut expected = 0usize;
    let mut last_line = 0usize;
    for (i, line) in BufReader::new(r).lines().enumerate() {
        let lineno = i + 1;
        last_line = lineno;
        let line = line.map_err(|e| Error::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let perr = |msg: String| Error::Parse { line: lineno, msg };
        let mut v: Value = serde_json::from_str(&line).map_err(|e| perr(e.to_string()))?;
        let kind = v
            .as_object_mut()
            .and_then(|o| o.remove("record"))
            .and_then(|k| k.as_str().map(str::to_owned))
            .ok_or_else(|| perr("missing field `record`".into()))?;
        match kind.as_str() {
            "trace" => {
                if expected != 0 {
                    return Err(perr(format!("trace header while {expected} frames still expected")));
                }
                let h: Header = serde_json::from_value(v).map_err(|e| perr(format!("trace: {e}")))?;
                expected = h.n_frames;
                out.push(Trace {
                    id: h.id,
                    seed: h.seed,
                    theta: h.theta,
                    frames: Vec::with_capacity(h.n_frames),
                    events: h.events,
                    context_embeddings: Vec::with_capacity(h.n_frames),
                    phrase_complete: Vec::with_capacity(h.n_frames),
                    suppressed_spans: h.suppressed_spans,
                });
            }
            "frame" => {
                let rec: FrameRecord = serde_json::from_value(v).map_err(|e| perr(format!("frame: {e}")))?;
                let tr = match out.last_mut() {
                    Some(tr) if expected > 0 => tr,
                    _ => return Err(perr("frame record outside a trace".into())),
                };
                if rec.frame.token_index != tr.frames.len() {
                    return Err(perr(format!(
                        "frame token_index {} out of order (expected {})",
                        rec.frame.token_index,
                        tr.frames.len()
                    )));
                }
                tr.frames.push(rec.frame);
                tr.context_embeddings.push(rec.context_embedding);
                tr.phrase_complete.push(rec.phrase_complete);
                expected -= 1;
            }
            other => return Err(perr(format!("unknown record kind `{other}`"))),
        }
    }
    if expected != 0 {
        return Err(Error::Parse {
            line: last_line,
            msg: format!("truncated trace: {expected} frames missing"),
        });
    }
    Ok(out)
}

pub fn export_traces(traces: &[Trace], path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_traces(traces, BufWriter::new(f)).map_err(|e| Error::io(path, e))
}

pub fn import_traces(path: &Path) -> Result<Vec<Trace>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_traces(f)
}
