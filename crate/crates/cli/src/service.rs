//! The live service: frame ingestion, the retargeting pipeline and the
//! broadcast fan-out run as three threads joined by bounded queues.
//!
//! * Frames arrive as newline-delimited `{"t","w"}` records on the
//!   ingestion socket. Malformed lines are logged and skipped.
//! * The control socket is duplex: clients send control messages and, once
//!   subscribed, receive acks, broadcast frames and metrics on the same
//!   connection.
//! * Only the pipeline thread touches pipeline state. Control messages are
//!   queued alongside frames, so each is applied between two frames.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, ErrorKind, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, SyncSender, TrySendError};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use facerig_core::stream::{parse_frame, to_line, FrameRecord, OutputRecord};
use facerig_core::{calibrate, BlendshapeFrame, PipelineManifest, RetargetPipeline};
use log::{debug, info, warn};
use serde_json::json;

use crate::error::CliError;
use crate::metrics::{IngestCounters, MetricsTracker, SessionMetrics};
use crate::protocol::{Ack, ControlMessage, MetricsRecord};
use crate::queue::{Entry, PipelineQueue, Pop};

/// Per-subscriber outbound queue length, in messages.
pub const SUBSCRIBER_QUEUE: usize = 256;
pub const DEFAULT_FRAME_QUEUE: usize = 64;
pub const DEFAULT_METRICS_INTERVAL: Duration = Duration::from_secs(1);
const MAX_LINE: usize = 1 << 20;
const POLL: Duration = Duration::from_millis(50);
const BROADCAST_QUEUE: usize = 1024;

#[derive(Debug, Clone, PartialEq)]
pub struct ServiceConfig {
    pub listen: SocketAddr,
    pub control_listen: SocketAddr,
    pub manifest: PathBuf,
    pub metrics_interval: Duration,
    pub frame_queue: usize,
    /// Block ingestion instead of dropping frames when the queue is full.
    pub lossless: bool,
}

impl ServiceConfig {
    pub fn new(listen: SocketAddr, control_listen: SocketAddr, manifest: PathBuf) -> Self {
        Self {
            listen,
            control_listen,
            manifest,
            metrics_interval: DEFAULT_METRICS_INTERVAL,
            frame_queue: DEFAULT_FRAME_QUEUE,
            lossless: false,
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.listen.port() != 0 && self.listen.port() == self.control_listen.port() {
            return Err(CliError::Usage(format!(
                "frame and control ports must differ (both {})",
                self.listen.port()
            )));
        }
        if self.frame_queue == 0 {
            return Err(CliError::Usage("frame queue must hold at least one frame".into()));
        }
        if self.metrics_interval.is_zero() {
            return Err(CliError::Usage("metrics interval must be positive".into()));
        }
        Ok(())
    }
}

struct InFrame {
    record: FrameRecord,
    received: Instant,
}

enum Command {
    Control { conn: u64, line: String },
    Disconnect(u64),
}

type Queue = PipelineQueue<InFrame, Command>;

enum Outbound {
    Register { conn: u64, tx: SyncSender<Arc<str>>, stream: TcpStream },
    Subscribe { conn: u64, metrics: bool },
    Send { conn: u64, line: Arc<str> },
    Frame(Arc<str>),
    Metrics(Arc<str>),
    Disconnect(u64),
    Shutdown,
}

/// A running service. Dropping the handle without calling
/// [`shutdown`](Self::shutdown) leaves the threads running.
pub struct ServiceHandle {
    frame_addr: SocketAddr,
    control_addr: SocketAddr,
    stop: Arc<AtomicBool>,
    queue: Arc<Queue>,
    metrics: Arc<Mutex<SessionMetrics>>,
    pipeline: Option<JoinHandle<SessionMetrics>>,
    threads: Vec<JoinHandle<()>>,
}

impl ServiceHandle {
    pub fn frame_addr(&self) -> SocketAddr {
        self.frame_addr
    }

    pub fn control_addr(&self) -> SocketAddr {
        self.control_addr
    }

    /// Latest metrics snapshot.
    pub fn metrics(&self) -> SessionMetrics {
        self.metrics.lock().expect("metrics lock").clone()
    }

    /// Setting this flag stops the service; [`wait`](Self::wait) returns.
    pub fn stop_flag(&self) -> Arc<AtomicBool> {
        self.stop.clone()
    }

    /// Blocks until the stop flag is set, then shuts down.
    pub fn wait(self) -> SessionMetrics {
        while !self.stop.load(Ordering::Relaxed) {
            thread::sleep(POLL);
        }
        self.shutdown()
    }

    /// Stops accepting input, drains queued work and joins all stages.
    pub fn shutdown(mut self) -> SessionMetrics {
        self.stop.store(true, Ordering::Relaxed);
        self.queue.close();
        let metrics = self
            .pipeline
            .take()
            .map(|h| h.join().expect("pipeline thread"))
            .unwrap_or_default();
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
        metrics
    }
}

pub fn start(config: &ServiceConfig) -> Result<ServiceHandle, CliError> {
    config.validate()?;
    let manifest = PipelineManifest::load(&config.manifest)?;
    let pipeline = manifest.build(&config.manifest)?;
    let bind = |addr: SocketAddr| TcpListener::bind(addr).map_err(|source| CliError::Bind { addr, source });
    let frames = bind(config.listen)?;
    let control = bind(config.control_listen)?;
    let frame_addr = frames.local_addr().map_err(|source| CliError::Bind { addr: config.listen, source })?;
    let control_addr = control.local_addr().map_err(|source| CliError::Bind {
        addr: config.control_listen,
        source,
    })?;
    info!(
        "serving {} characters; frames on {frame_addr}, control on {control_addr}",
        pipeline.character_ids().len()
    );

    let stop = Arc::new(AtomicBool::new(false));
    let queue: Arc<Queue> = Arc::new(PipelineQueue::new(config.frame_queue, config.lossless));
    let counters = Arc::new(IngestCounters::default());
    let metrics = Arc::new(Mutex::new(SessionMetrics::default()));
    let (out_tx, out_rx) = mpsc::sync_channel::<Outbound>(BROADCAST_QUEUE);

    let mut threads = Vec::new();
    threads.push(spawn("broadcast", move || broadcast_stage(out_rx)));
    {
        let (stop, queue, counters) = (stop.clone(), queue.clone(), counters.clone());
        threads.push(spawn("ingest-accept", move || {
            accept_loop(frames, &stop, |stream| {
                let (stop, queue, counters) = (stop.clone(), queue.clone(), counters.clone());
                spawn("ingest", move || ingest_connection(stream, &stop, &queue, &counters));
            })
        }));
    }
    {
        let (stop, queue, out_tx) = (stop.clone(), queue.clone(), out_tx.clone());
        let next_id = AtomicU64::new(1);
        threads.push(spawn("control-accept", move || {
            accept_loop(control, &stop, |stream| {
                let conn = next_id.fetch_add(1, Ordering::Relaxed);
                if let Err(e) = open_control(conn, stream, &stop, &queue, &out_tx) {
                    warn!("control connection {conn} failed to open: {e}");
                }
            })
        }));
    }
    let pipeline = {
        let ctx = PipelineStage {
            queue: queue.clone(),
            out: out_tx,
            counters,
            shared: metrics.clone(),
            metrics_interval: config.metrics_interval,
        };
        thread::Builder::new()
            .name("pipeline".into())
            .spawn(move || ctx.run(pipeline))
            .expect("spawn pipeline thread")
    };
    Ok(ServiceHandle {
        frame_addr,
        control_addr,
        stop,
        queue,
        metrics,
        pipeline: Some(pipeline),
        threads,
    })
}

/// Runs until `stop` is set and returns the final metrics.
pub fn serve(config: &ServiceConfig, stop: Arc<AtomicBool>) -> Result<SessionMetrics, CliError> {
    let handle = start(config)?;
    let flag = handle.stop_flag();
    let watcher = thread::spawn(move || {
        while !stop.load(Ordering::Relaxed) && !flag.load(Ordering::Relaxed) {
            thread::sleep(POLL);
        }
        flag.store(true, Ordering::Relaxed);
    });
    let metrics = handle.wait();
    let _ = watcher.join();
    Ok(metrics)
}

fn spawn<T: Send + 'static>(name: &str, f: impl FnOnce() -> T + Send + 'static) -> JoinHandle<T> {
    thread::Builder::new()
        .name(name.into())
        .spawn(f)
        .expect("spawn service thread")
}

fn accept_loop(listener: TcpListener, stop: &AtomicBool, mut on_conn: impl FnMut(TcpStream)) {
    if let Err(e) = listener.set_nonblocking(true) {
        warn!("listener cannot poll: {e}");
        return;
    }
    while !stop.load(Ordering::Relaxed) {
        match listener.accept() {
            Ok((stream, peer)) => {
                debug!("connection from {peer}");
                if stream.set_nonblocking(false).is_ok() {
                    let _ = stream.set_nodelay(true);
                    on_conn(stream);
                }
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(2)),
            Err(e) => {
                warn!("accept failed: {e}");
                thread::sleep(POLL);
            }
        }
    }
}

/// Calls `on_line` for every non-empty line until EOF, error or `stop`.
fn read_lines(stream: TcpStream, stop: &AtomicBool, mut on_line: impl FnMut(&str)) {
    if stream.set_read_timeout(Some(POLL)).is_err() {
        return;
    }
    let mut reader = BufReader::new(stream);
    let mut buf = Vec::new();
    while !stop.load(Ordering::Relaxed) {
        match reader.read_until(b'\n', &mut buf) {
            Ok(0) => {
                if !buf.is_empty() {
                    emit_line(&buf, &mut on_line);
                }
                return;
            }
            Ok(_) if buf.ends_with(b"\n") => {
                emit_line(&buf, &mut on_line);
                buf.clear();
            }
            Ok(_) => {}
            Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut | ErrorKind::Interrupted) => {}
            Err(e) => {
                debug!("read failed: {e}");
                return;
            }
        }
        if buf.len() > MAX_LINE {
            warn!("discarding a line longer than {MAX_LINE} bytes");
            on_line("");
            buf.clear();
        }
    }
}

fn emit_line(buf: &[u8], on_line: &mut impl FnMut(&str)) {
    let line = String::from_utf8_lossy(buf);
    let line = line.trim_end_matches(['\n', '\r']);
    if !line.trim().is_empty() {
        on_line(line);
    }
}

fn ingest_connection(stream: TcpStream, stop: &AtomicBool, queue: &Queue, counters: &IngestCounters) {
    read_lines(stream, stop, |line| match parse_frame(line) {
        Ok(record) => {
            IngestCounters::bump(&counters.frames_in);
            let dropped = queue.push_frame(InFrame {
                record,
                received: Instant::now(),
            });
            if dropped > 0 {
                IngestCounters::bump(&counters.frames_dropped);
            }
        }
        Err(e) => {
            IngestCounters::bump(&counters.frames_rejected);
            warn!("rejected frame: {e}");
        }
    });
}

fn open_control(
    conn: u64,
    stream: TcpStream,
    stop: &Arc<AtomicBool>,
    queue: &Arc<Queue>,
    out: &SyncSender<Outbound>,
) -> std::io::Result<()> {
    let (tx, rx) = mpsc::sync_channel::<Arc<str>>(SUBSCRIBER_QUEUE);
    let writer = stream.try_clone()?;
    let reader = stream.try_clone()?;
    if out.send(Outbound::Register { conn, tx, stream }).is_err() {
        return Ok(());
    }
    spawn("control-write", move || write_connection(writer, rx));
    let (stop, queue) = (stop.clone(), queue.clone());
    spawn("control-read", move || {
        read_lines(reader, &stop, |line| {
            queue.push_command(Command::Control {
                conn,
                line: line.to_owned(),
            })
        });
        queue.push_command(Command::Disconnect(conn));
    });
    Ok(())
}

fn write_connection(stream: TcpStream, rx: Receiver<Arc<str>>) {
    let mut w = BufWriter::new(&stream);
    'outer: while let Ok(line) = rx.recv() {
        let mut next = Some(line);
        while let Some(line) = next {
            if w.write_all(line.as_bytes()).and_then(|_| w.write_all(b"\n")).is_err() {
                break 'outer;
            }
            next = rx.try_recv().ok();
        }
        if w.flush().is_err() {
            break;
        }
    }
    drop(w);
    let _ = stream.shutdown(Shutdown::Both);
}

struct Subscriber {
    tx: SyncSender<Arc<str>>,
    stream: TcpStream,
    subscribed: bool,
    metrics: bool,
}

fn broadcast_stage(rx: Receiver<Outbound>) {
    let mut conns: BTreeMap<u64, Subscriber> = BTreeMap::new();
    let drop_conn = |conns: &mut BTreeMap<u64, Subscriber>, id: u64, why: &str| {
        if let Some(c) = conns.remove(&id) {
            info!("closing control connection {id}: {why}");
            let _ = c.stream.shutdown(Shutdown::Both);
        }
    };
    let deliver = |conns: &mut BTreeMap<u64, Subscriber>, id: u64, line: &Arc<str>| -> Option<&'static str> {
        let c = conns.get(&id)?;
        match c.tx.try_send(line.clone()) {
            Ok(()) => None,
            Err(TrySendError::Full(_)) => Some("subscriber queue full"),
            Err(TrySendError::Disconnected(_)) => Some("writer closed"),
        }
    };
    while let Ok(msg) = rx.recv() {
        match msg {
            Outbound::Register { conn, tx, stream } => {
                conns.insert(
                    conn,
                    Subscriber {
                        tx,
                        stream,
                        subscribed: false,
                        metrics: false,
                    },
                );
            }
            Outbound::Subscribe { conn, metrics } => {
                if let Some(c) = conns.get_mut(&conn) {
                    c.subscribed = true;
                    c.metrics = metrics;
                }
            }
            Outbound::Send { conn, line } => {
                if let Some(why) = deliver(&mut conns, conn, &line) {
                    drop_conn(&mut conns, conn, why);
                }
            }
            Outbound::Frame(line) | Outbound::Metrics(line) if conns.is_empty() => drop(line),
            Outbound::Frame(line) => {
                let targets: Vec<u64> = conns.iter().filter(|(_, c)| c.subscribed).map(|(id, _)| *id).collect();
                for id in targets {
                    if let Some(why) = deliver(&mut conns, id, &line) {
                        drop_conn(&mut conns, id, why);
                    }
                }
            }
            Outbound::Metrics(line) => {
                let targets: Vec<u64> = conns
                    .iter()
                    .filter(|(_, c)| c.subscribed && c.metrics)
                    .map(|(id, _)| *id)
                    .collect();
                for id in targets {
                    if let Some(why) = deliver(&mut conns, id, &line) {
                        drop_conn(&mut conns, id, why);
                    }
                }
            }
            Outbound::Disconnect(conn) => {
                // Let the writer drain what is already queued.
                conns.remove(&conn);
            }
            Outbound::Shutdown => break,
        }
    }
    for (_, c) in conns {
        drop(c.tx);
        let _ = c.stream.shutdown(Shutdown::Read);
    }
}

struct PipelineStage {
    queue: Arc<Queue>,
    out: SyncSender<Outbound>,
    counters: Arc<IngestCounters>,
    shared: Arc<Mutex<SessionMetrics>>,
    metrics_interval: Duration,
}

struct Recalibration {
    frames: usize,
    window: Vec<BlendshapeFrame>,
}

struct PipelineState {
    pipeline: RetargetPipeline,
    ids: Vec<String>,
    active: usize,
    seq: u64,
    tracker: MetricsTracker,
    recalibration: Option<Recalibration>,
    /// Wall time and stream time of the last real frame.
    last_input: Option<(Instant, f64)>,
    last_emit: Instant,
}

impl PipelineStage {
    fn run(self, pipeline: RetargetPipeline) -> SessionMetrics {
        let ids = pipeline.character_ids();
        let mut st = PipelineState {
            pipeline,
            ids,
            active: 0,
            seq: 0,
            tracker: MetricsTracker::default(),
            recalibration: None,
            last_input: None,
            last_emit: Instant::now(),
        };
        let mut next_flush = Instant::now() + self.metrics_interval;
        loop {
            let now = Instant::now();
            let stale_due = st.last_input.map(|_| st.last_emit + st.pipeline.config().stale_timeout);
            let wake = stale_due.map_or(next_flush, |s| s.min(next_flush));
            match self.queue.pop(wake.saturating_duration_since(now)) {
                Pop::Item(Entry::Frame(f)) => self.on_frame(&mut st, f),
                Pop::Item(Entry::Command(Command::Control { conn, line })) => self.on_control(&mut st, conn, &line),
                Pop::Item(Entry::Command(Command::Disconnect(conn))) => {
                    let _ = self.out.send(Outbound::Disconnect(conn));
                }
                Pop::Timeout => {}
                Pop::Closed => break,
            }
            let now = Instant::now();
            if let Some((wall, t)) = st.last_input {
                if now.duration_since(st.last_emit) >= st.pipeline.config().stale_timeout {
                    self.on_stale(&mut st, t + now.duration_since(wall).as_secs_f64());
                }
            }
            if now >= next_flush {
                let line = MetricsRecord {
                    metrics: self.publish(&st),
                }
                .to_line();
                let _ = self.out.send(Outbound::Metrics(line.into()));
                next_flush = now + self.metrics_interval;
            }
        }
        let final_metrics = self.publish(&st);
        let _ = self.out.send(Outbound::Shutdown);
        info!(
            "session closed: {} frames in, {} out",
            final_metrics.frames_in, final_metrics.frames_out
        );
        final_metrics
    }

    fn publish(&self, st: &PipelineState) -> SessionMetrics {
        let m = st.tracker.snapshot(&self.counters);
        *self.shared.lock().expect("metrics lock") = m.clone();
        m
    }

    fn on_frame(&self, st: &mut PipelineState, f: InFrame) {
        let frame: BlendshapeFrame = f.record.into();
        if let Some(r) = &mut st.recalibration {
            if frame.weights.len() == st.pipeline.channels().len() {
                r.window.push(frame.clone());
            }
            if r.window.len() >= r.frames {
                let r = st.recalibration.take().expect("active recalibration");
                match calibrate(&r.window).and_then(|p| st.pipeline.set_calibration(p)) {
                    Ok(()) => info!("recalibrated from {} frames", r.window.len()),
                    Err(e) => warn!("recalibration failed: {e}"),
                }
            }
        }
        match st.pipeline.process(&frame) {
            Ok(out) => {
                let (id, chosen) = if st.active == 0 {
                    (&st.ids[0], &out.primary)
                } else {
                    let (id, f) = &out.secondaries[st.active - 1];
                    (id, f)
                };
                let line = to_line(&OutputRecord::new(id, chosen, false));
                let _ = self.out.send(Outbound::Frame(line.into()));
                let now = Instant::now();
                st.tracker.record(now, Some(now.duration_since(f.received)), &out.primary);
                st.last_input = Some((now, frame.timestamp));
                st.last_emit = now;
                self.publish(st);
            }
            Err(e) => {
                st.tracker.reject();
                warn!("rejected frame at t={}: {e}", frame.timestamp);
            }
        }
    }

    fn on_stale(&self, st: &mut PipelineState, t: f64) {
        let Some(out) = st.pipeline.process_stale(t) else {
            return;
        };
        let chosen = if st.active == 0 {
            &out.primary
        } else {
            &out.secondaries[st.active - 1].1
        };
        let line = to_line(&OutputRecord::new(&st.ids[st.active], chosen, true));
        let _ = self.out.send(Outbound::Frame(line.into()));
        let now = Instant::now();
        st.tracker.record(now, None, &out.primary);
        st.last_emit = now;
    }

    fn on_control(&self, st: &mut PipelineState, conn: u64, line: &str) {
        st.seq += 1;
        let seq = st.seq;
        let ack = match ControlMessage::parse(line) {
            Err(e) => Ack::refused(&e.kind, seq, e.message),
            Ok(msg) => {
                let kind = msg.kind();
                match msg {
                    ControlMessage::SetCharacter(a) => match st.ids.iter().position(|id| *id == a.id) {
                        Some(i) => {
                            st.active = i;
                            Ack::ok(kind, seq, Some(json!({ "active": a.id })))
                        }
                        None => Ack::refused(kind, seq, format!("unknown character '{}'", a.id)),
                    },
                    ControlMessage::Recalibrate(a) => {
                        st.recalibration = Some(Recalibration {
                            frames: a.frames,
                            window: Vec::with_capacity(a.frames),
                        });
                        Ack::ok(kind, seq, Some(json!({ "frames": a.frames })))
                    }
                    ControlMessage::SetParams(a) => {
                        let ms = a.stale_timeout_ms.expect("validated");
                        st.pipeline.config_mut().stale_timeout = Duration::from_millis(ms);
                        Ack::ok(kind, seq, Some(json!({ "stale_timeout_ms": ms })))
                    }
                    ControlMessage::Subscribe(a) => {
                        let _ = self.out.send(Outbound::Subscribe {
                            conn,
                            metrics: a.metrics,
                        });
                        Ack::ok(kind, seq, None)
                    }
                    ControlMessage::ListCharacters(_) => Ack::ok(
                        kind,
                        seq,
                        Some(json!({ "characters": st.ids, "active": st.ids[st.active] })),
                    ),
                }
            }
        };
        if !ack.ok {
            warn!("refused control message: {}", ack.error.as_deref().unwrap_or(""));
        }
        let _ = self.out.send(Outbound::Send {
            conn,
            line: ack.to_line().into(),
        });
    }
}
