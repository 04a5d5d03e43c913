#![allow(dead_code)]

use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpStream};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use facerig_cli::demo::{write_demo, write_initial_models, DemoSpec, DemoSummary};
use facerig_cli::protocol::{Ack, ServerMessage};
use facerig_cli::service::{self, ServiceConfig, ServiceHandle};
use facerig_core::stream::OutputRecord;

pub struct Session {
    pub dir: tempfile::TempDir,
    pub demo: DemoSummary,
}

impl Session {
    pub fn manifest(&self) -> &Path {
        &self.demo.manifest
    }
}

/// A small demo session with untrained models.
pub fn session(frames: usize, controllers: usize) -> Session {
    let dir = tempfile::tempdir().unwrap();
    let spec = DemoSpec {
        frames,
        controllers,
        records: 50,
        ..Default::default()
    };
    let demo = write_demo(dir.path(), &spec).unwrap();
    write_initial_models(dir.path(), controllers, 16, 1).unwrap();
    Session { dir, demo }
}

pub fn loopback() -> SocketAddr {
    "127.0.0.1:0".parse().unwrap()
}

pub fn start(manifest: &Path) -> ServiceHandle {
    let mut config = ServiceConfig::new(loopback(), loopback(), manifest.to_path_buf());
    config.metrics_interval = Duration::from_millis(100);
    service::start(&config).unwrap()
}

pub fn config_for(manifest: PathBuf) -> ServiceConfig {
    ServiceConfig::new(loopback(), loopback(), manifest)
}

/// A control-socket client.
pub struct Client {
    pub stream: TcpStream,
    reader: BufReader<TcpStream>,
}

impl Client {
    pub fn connect(addr: SocketAddr) -> Self {
        let stream = TcpStream::connect(addr).unwrap();
        stream.set_read_timeout(Some(Duration::from_secs(10))).unwrap();
        let reader = BufReader::new(stream.try_clone().unwrap());
        Self { stream, reader }
    }

    pub fn send(&mut self, line: &str) {
        self.stream.write_all(line.as_bytes()).unwrap();
        self.stream.write_all(b"\n").unwrap();
    }

    /// Next message, or `None` on EOF or timeout.
    pub fn next(&mut self) -> Option<ServerMessage> {
        let mut line = String::new();
        match self.reader.read_line(&mut line) {
            Ok(0) | Err(_) => None,
            Ok(_) => Some(ServerMessage::parse(line.trim_end()).unwrap()),
        }
    }

    pub fn next_ack(&mut self) -> Ack {
        loop {
            match self.next() {
                Some(ServerMessage::Ack(a)) => return a,
                Some(_) => continue,
                None => panic!("connection closed while waiting for an ack"),
            }
        }
    }

    pub fn subscribe(&mut self, metrics: bool) {
        self.send(&format!(r#"{{"kind":"subscribe","args":{{"metrics":{metrics}}}}}"#));
        assert!(self.next_ack().ok);
    }

    /// Collects `n` non-stale frames, failing after `timeout`.
    pub fn frames(&mut self, n: usize, timeout: Duration) -> Vec<OutputRecord> {
        let deadline = Instant::now() + timeout;
        let mut out = Vec::new();
        while out.len() < n {
            assert!(Instant::now() < deadline, "got {} of {n} frames", out.len());
            match self.next() {
                Some(ServerMessage::Frame(f)) if !f.stale => out.push(f),
                Some(_) => {}
                None => break,
            }
        }
        out
    }
}

/// Sends raw lines to the ingestion socket.
pub struct Feeder {
    pub stream: TcpStream,
}

impl Feeder {
    pub fn connect(addr: SocketAddr) -> Self {
        let stream = TcpStream::connect(addr).unwrap();
        stream.set_nodelay(true).unwrap();
        Self { stream }
    }

    pub fn line(&mut self, line: &str) {
        self.stream.write_all(line.as_bytes()).unwrap();
        self.stream.write_all(b"\n").unwrap();
    }

    pub fn frame(&mut self, t: f64, w: &[f64]) {
        let rec = facerig_core::stream::FrameRecord { t, w: w.to_vec() };
        self.line(&facerig_core::stream::to_line(&rec));
    }
}
