use std::io::{BufRead, Write};

use serde_json::{json, Value};

use crate::error::{Error, Result};

use super::timeline::{SimEventKind, Timeline};

/// One timeline per line.
pub fn write_timelines_jsonl<W: Write>(mut w: W, timelines: &[Timeline]) -> Result<()> {
    for t in timelines {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_timelines_jsonl<R: BufRead>(r: R) -> Result<Vec<Timeline>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse(format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

fn track(kind: SimEventKind) -> u32 {
    match kind {
        SimEventKind::KernelLaunch => 0,
        SimEventKind::TileCompute => 1,
        SimEventKind::Wait => 2,
        SimEventKind::Transfer => 3,
        SimEventKind::Reduce => 4,
    }
}

/// Chrome trace-event JSON: one process per `(timeline, rank)`, one thread per event kind.
pub fn chrome_trace(timelines: &[Timeline]) -> Value {
    let mut events = Vec::new();
    for (i, t) in timelines.iter().enumerate() {
        let ranks = t.problem.tp;
        for r in 0..ranks {
            let pid = i * ranks + r;
            events.push(json!({
                "name": "process_name", "ph": "M", "pid": pid,
                "args": {"name": format!("{} {} rank {r}", t.strategy, t.problem.pattern)}
            }));
        }
        for e in &t.events {
            let kind = serde_json::to_value(e.kind).expect("kind serializes");
            let name = match (e.tile, e.chunk) {
                (Some((row, col)), _) => format!("tile {row},{col}"),
                (None, Some(c)) => format!("{} chunk {c}", kind.as_str().unwrap_or_default()),
                _ if !e.label.is_empty() => e.label.clone(),
                _ => kind.as_str().unwrap_or_default().to_string(),
            };
            let mut args = json!({});
            if let Some(p) = e.peer {
                args["peer"] = json!(p);
            }
            if let Some(b) = e.bytes {
                args["bytes"] = json!(b);
            }
            events.push(json!({
                "name": name,
                "cat": kind,
                "ph": "X",
                "ts": e.start_us,
                "dur": e.duration(),
                "pid": i * ranks + e.rank,
                "tid": track(e.kind),
                "args": args,
            }));
        }
    }
    json!({ "traceEvents": events, "displayTimeUnit": "ns" })
}
