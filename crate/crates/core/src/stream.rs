//! Newline-delimited stream records shared by files and sockets.
//!
//! Input frames are `{"t":..,"w":[..]}`; output frames are
//! `{"t":..,"char":"..","v":[..],"stale":false}`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::retarget::BlendshapeFrame;
use crate::rig::ControllerFrame;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameRecord {
    pub t: f64,
    pub w: Vec<f64>,
}

impl From<&BlendshapeFrame> for FrameRecord {
    fn from(f: &BlendshapeFrame) -> Self {
        Self {
            t: f.timestamp,
            w: f.weights.clone(),
        }
    }
}

impl From<FrameRecord> for BlendshapeFrame {
    fn from(r: FrameRecord) -> Self {
        BlendshapeFrame {
            timestamp: r.t,
            weights: r.w,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputRecord {
    pub t: f64,
    #[serde(rename = "char")]
    pub character: String,
    pub v: Vec<f64>,
    pub stale: bool,
}

impl OutputRecord {
    pub fn new(character: &str, frame: &ControllerFrame, stale: bool) -> Self {
        Self {
            t: frame.timestamp,
            character: character.to_string(),
            v: frame.values.clone(),
            stale,
        }
    }

    pub fn frame(&self) -> ControllerFrame {
        ControllerFrame {
            timestamp: self.t,
            values: self.v.clone(),
        }
    }
}

/// Serializes one record as a single line (no trailing newline).
pub fn to_line<T: Serialize>(record: &T) -> String {
    serde_json::to_string(record).expect("stream records serialize")
}

/// Parses one frame record, rejecting non-finite or malformed input.
pub fn parse_frame(line: &str) -> Result<FrameRecord> {
    let rec: FrameRecord =
        serde_json::from_str(line).map_err(|e| Error::Stream(format!("malformed frame: {e}")))?;
    if !rec.t.is_finite() {
        return Err(Error::Stream("frame timestamp is not finite".into()));
    }
    if rec.w.iter().any(|w| !w.is_finite()) {
        return Err(Error::Stream("frame weights must be finite".into()));
    }
    Ok(rec)
}

fn read_lines<T>(path: &Path, parse: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    let text = io::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            parse(line).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))
        })
        .collect()
}

pub fn read_frames(path: &Path) -> Result<Vec<BlendshapeFrame>> {
    Ok(read_lines(path, parse_frame)?.into_iter().map(Into::into).collect())
}

pub fn write_frames(path: &Path, frames: &[BlendshapeFrame]) -> Result<()> {
    let mut out = String::new();
    for f in frames {
        out.push_str(&to_line(&FrameRecord::from(f)));
        out.push('\n');
    }
    io::write_string(path, &out)
}

pub fn read_outputs(path: &Path) -> Result<Vec<OutputRecord>> {
    read_lines(path, |l| {
        serde_json::from_str(l).map_err(|e| Error::Stream(format!("malformed output record: {e}")))
    })
}

pub fn write_outputs(path: &Path, records: &[OutputRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&to_line(r));
        out.push('\n');
    }
    io::write_string(path, &out)
}
