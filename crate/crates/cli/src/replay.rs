//! Paced playback of recorded frame streams.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::net::TcpStream;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::{Duration, Instant};

use facerig_core::stream::{to_line, FrameRecord, OutputRecord};
use facerig_core::{BlendshapeFrame, RetargetPipeline};
use serde::Serialize;

use crate::error::{CliError, CliResult};

/// Where replayed records go: a file path, `-` for stdout, or
/// `tcp://host:port`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Sink {
    File(PathBuf),
    Stdout,
    Tcp(String),
}

impl FromStr for Sink {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        if s.is_empty() {
            return Err(CliError::Usage("empty sink".into()));
        }
        Ok(match s.strip_prefix("tcp://") {
            Some("") => return Err(CliError::Usage("tcp sink needs host:port".into())),
            Some(addr) => Sink::Tcp(addr.to_owned()),
            None if s == "-" => Sink::Stdout,
            None => Sink::File(s.into()),
        })
    }
}

impl Sink {
    pub fn open(&self) -> CliResult<Box<dyn Write>> {
        Ok(match self {
            Sink::File(p) => Box::new(BufWriter::new(File::create(p).map_err(|source| CliError::Io {
                what: format!("cannot create {}", p.display()),
                source,
            })?)),
            Sink::Stdout => Box::new(BufWriter::new(std::io::stdout())),
            Sink::Tcp(addr) => {
                let s = TcpStream::connect(addr).map_err(|source| CliError::Io {
                    what: format!("cannot connect to {addr}"),
                    source,
                })?;
                let _ = s.set_nodelay(true);
                Box::new(BufWriter::new(s))
            }
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ReplayReport {
    pub frames: usize,
    pub records: usize,
    /// Time from each frame's scheduled slot to its records being flushed.
    pub mean_latency_ms: f64,
    pub max_latency_ms: f64,
    pub wall_s: f64,
}

/// Absolute-deadline pacing: frame `i` is due at `start + i / fps`, so
/// sleep jitter never accumulates. `fps = 0` disables pacing.
#[derive(Debug, Clone, Copy)]
pub struct Pacer {
    start: Instant,
    fps: f64,
}

impl Pacer {
    pub fn new(fps: f64) -> CliResult<Self> {
        if !(fps >= 0.0 && fps.is_finite()) {
            return Err(CliError::Usage(format!("fps must be finite and >= 0, got {fps}")));
        }
        Ok(Self {
            start: Instant::now(),
            fps,
        })
    }

    /// Sleeps until frame `i` is due and returns its scheduled instant.
    pub fn wait(&self, i: usize) -> Instant {
        if self.fps == 0.0 {
            return Instant::now();
        }
        let due = self.start + Duration::from_secs_f64(i as f64 / self.fps);
        let now = Instant::now();
        if due > now {
            std::thread::sleep(due - now);
        }
        due
    }

    pub fn paced(&self) -> bool {
        self.fps > 0.0
    }
}

#[derive(Default)]
struct LatencyStats {
    sum: f64,
    max: f64,
    n: usize,
}

impl LatencyStats {
    fn add(&mut self, due: Instant) {
        let ms = due.elapsed().as_secs_f64() * 1e3;
        self.sum += ms;
        self.max = self.max.max(ms);
        self.n += 1;
    }

    fn report(&self, frames: usize, records: usize, started: Instant) -> ReplayReport {
        ReplayReport {
            frames,
            records,
            mean_latency_ms: if self.n == 0 { 0.0 } else { self.sum / self.n as f64 },
            max_latency_ms: self.max,
            wall_s: started.elapsed().as_secs_f64(),
        }
    }
}

fn write_err(source: std::io::Error) -> CliError {
    CliError::Io {
        what: "replay sink".into(),
        source,
    }
}

fn emit(out: &mut dyn Write, line: &str) -> CliResult<()> {
    out.write_all(line.as_bytes()).and_then(|_| out.write_all(b"\n")).map_err(write_err)
}

/// Runs every frame through `pipeline` and writes one output record per
/// character (primary first), or only `character`'s records when given.
pub fn replay_pipeline(
    frames: &[BlendshapeFrame],
    pipeline: &mut RetargetPipeline,
    fps: f64,
    character: Option<&str>,
    out: &mut dyn Write,
) -> CliResult<ReplayReport> {
    let ids = pipeline.character_ids();
    if let Some(c) = character {
        if !ids.iter().any(|id| id == c) {
            return Err(CliError::Usage(format!("unknown character '{c}'")));
        }
    }
    let keep = |id: &str| character.map_or(true, |c| c == id);
    let pacer = Pacer::new(fps)?;
    let started = Instant::now();
    let mut stats = LatencyStats::default();
    let mut records = 0;
    for (i, frame) in frames.iter().enumerate() {
        let due = pacer.wait(i);
        let fan = pipeline
            .process(frame)
            .map_err(|e| CliError::Failed(format!("frame {}: {e}", i + 1)))?;
        if keep(&ids[0]) {
            emit(out, &to_line(&OutputRecord::new(&ids[0], &fan.primary, false)))?;
            records += 1;
        }
        for (id, f) in &fan.secondaries {
            if keep(id) {
                emit(out, &to_line(&OutputRecord::new(id, f, false)))?;
                records += 1;
            }
        }
        if pacer.paced() {
            out.flush().map_err(write_err)?;
        }
        stats.add(due);
    }
    out.flush().map_err(write_err)?;
    Ok(stats.report(frames.len(), records, started))
}

/// Forwards the input records unchanged, paced; acts as a tracker source
/// for a running service.
pub fn replay_raw(frames: &[BlendshapeFrame], fps: f64, out: &mut dyn Write) -> CliResult<ReplayReport> {
    let pacer = Pacer::new(fps)?;
    let started = Instant::now();
    let mut stats = LatencyStats::default();
    for (i, frame) in frames.iter().enumerate() {
        let due = pacer.wait(i);
        emit(out, &to_line(&FrameRecord::from(frame)))?;
        if pacer.paced() {
            out.flush().map_err(write_err)?;
        }
        stats.add(due);
    }
    out.flush().map_err(write_err)?;
    Ok(stats.report(frames.len(), frames.len(), started))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sink_parsing() {
        assert_eq!("-".parse::<Sink>().unwrap(), Sink::Stdout);
        assert_eq!("tcp://127.0.0.1:9".parse::<Sink>().unwrap(), Sink::Tcp("127.0.0.1:9".into()));
        assert_eq!("out.ndjson".parse::<Sink>().unwrap(), Sink::File("out.ndjson".into()));
        assert!("tcp://".parse::<Sink>().is_err());
        assert!("".parse::<Sink>().is_err());
    }

    #[test]
    fn pacer_rejects_bad_rates() {
        assert!(Pacer::new(-1.0).is_err());
        assert!(Pacer::new(f64::NAN).is_err());
        assert!(!Pacer::new(0.0).unwrap().paced());
    }

    #[test]
    fn raw_replay_echoes_records() {
        let frames: Vec<BlendshapeFrame> = (0..3)
            .map(|i| BlendshapeFrame {
                timestamp: i as f64 * 0.5,
                weights: vec![0.25, 0.5],
            })
            .collect();
        let mut out = Vec::new();
        let r = replay_raw(&frames, 0.0, &mut out).unwrap();
        assert_eq!(r.frames, 3);
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().next().unwrap(), r#"{"t":0.0,"w":[0.25,0.5]}"#);
        assert_eq!(text.lines().count(), 3);
    }

    #[test]
    fn empty_input_gives_empty_output() {
        let mut out = Vec::new();
        let r = replay_raw(&[], 24.0, &mut out).unwrap();
        assert_eq!(r.frames, 0);
        assert!(out.is_empty());
    }
}
