//! JSON-lines episode traces: one object per step, with the map layout
//! embedded in the `t = 0` record so a trace renders on its own.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::coverage::FovConfig;
use crate::dynamics::Action;
use crate::error::{Error, Result};
use crate::grid::Cell;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: u32,
    pub p: Cell,
    pub b: u32,
    pub l: bool,
    /// Action that led to this record; `null` for the initial state.
    pub action: Option<Action>,
    /// Remaining target count.
    #[serde(rename = "|C|")]
    pub remaining: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub terminated: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truncated: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub map: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub targets: Option<Vec<Cell>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fov: Option<FovConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b_max: Option<u32>,
}

pub fn write_jsonl<W: Write>(mut w: W, records: &[TraceRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<TraceRecord>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    if out.is_empty() {
        return Err(Error::InvalidScenario("empty trace".into()));
    }
    Ok(out)
}
