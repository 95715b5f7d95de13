//! Local service that exposes a running engine to a browser viewer.
//!
//! One port serves both the viewer's static files over HTTP and a single
//! WebSocket control connection. Incoming [`ViewportCommand`]s move the
//! engine's view; outgoing binary frames carry the latest rendered frame at
//! the stream rate and text frames carry [`MetricsPacket`]s at 10 Hz. The
//! message schema is in [`protocol`].

pub mod http;
pub mod protocol;

use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use tilestream::metrics::{frame_rate, tpt, window_buffer_rate};
use tilestream::{Engine, FrameMailbox, Viewport};
use tungstenite::{Message, WebSocket};

pub use protocol::{
    decode_frame_packet, encode_frame_packet, encode_png, FramePacket, MetricsPacket, PacketError, ServerMessage, ViewportCommand,
    FRAME_HEADER_BYTES,
};

pub const DEFAULT_PORT: u16 = 8080;
pub const DEFAULT_STREAM_HZ: u32 = 30;
pub const METRICS_HZ: u32 = 10;

/// Read poll interval of a session; bounds command latency.
const POLL: Duration = Duration::from_millis(5);
/// Frames older than this many are not looked at for the fps readout.
const MAX_METRIC_FRAMES: usize = 1024;

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("binding {addr}: {source}")]
    Bind { addr: SocketAddr, source: std::io::Error },
    #[error("stream rate must be positive")]
    StreamHz,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct GatewayConfig {
    pub addr: SocketAddr,
    /// Binary frames per second sent to the client; the engine keeps
    /// rendering at its own rate.
    pub stream_hz: u32,
    /// Viewer assets; when unset, `/` serves a built-in fallback page.
    pub static_dir: Option<PathBuf>,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            addr: SocketAddr::from(([127, 0, 0, 1], DEFAULT_PORT)),
            stream_hz: DEFAULT_STREAM_HZ,
            static_dir: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GatewayStats {
    pub connections: u64,
    pub rejected_connections: u64,
    /// PNG encodes performed; zero while no client is connected.
    pub encodes: u64,
    pub frames_sent: u64,
    /// Rendered frames never sent because a newer one replaced them.
    pub frames_dropped: u64,
    pub metrics_sent: u64,
    pub commands_applied: u64,
    pub commands_ignored: u64,
    pub errors_sent: u64,
}

#[derive(Default)]
struct Counters {
    connections: AtomicU64,
    rejected_connections: AtomicU64,
    encodes: AtomicU64,
    frames_sent: AtomicU64,
    frames_dropped: AtomicU64,
    metrics_sent: AtomicU64,
    commands_applied: AtomicU64,
    commands_ignored: AtomicU64,
    errors_sent: AtomicU64,
}

struct Shared {
    engine: Arc<Engine>,
    mailbox: Arc<FrameMailbox>,
    config: GatewayConfig,
    stop: AtomicBool,
    client: AtomicBool,
    counters: Counters,
    sessions: Mutex<Vec<JoinHandle<()>>>,
}

fn bump(c: &AtomicU64) {
    c.fetch_add(1, Ordering::Relaxed);
}

/// A running gateway. Network I/O happens on its own threads; the engine is
/// only touched through [`Engine::set_view`] and the frame mailbox.
pub struct Gateway {
    shared: Arc<Shared>,
    addr: SocketAddr,
    accept: Option<JoinHandle<()>>,
}

impl Gateway {
    /// Binds and starts serving. `mailbox` is the one the engine's frame loop
    /// publishes into.
    pub fn start(engine: Arc<Engine>, mailbox: Arc<FrameMailbox>, config: GatewayConfig) -> Result<Self, GatewayError> {
        if config.stream_hz == 0 {
            return Err(GatewayError::StreamHz);
        }
        let listener = TcpListener::bind(config.addr).map_err(|source| GatewayError::Bind {
            addr: config.addr,
            source,
        })?;
        let addr = listener.local_addr()?;
        listener.set_nonblocking(true)?;
        let shared = Arc::new(Shared {
            engine,
            mailbox,
            config,
            stop: AtomicBool::new(false),
            client: AtomicBool::new(false),
            counters: Counters::default(),
            sessions: Mutex::new(Vec::new()),
        });
        let s = shared.clone();
        let accept = std::thread::Builder::new()
            .name("gateway-accept".into())
            .spawn(move || accept_loop(&s, listener))?;
        Ok(Self {
            shared,
            addr,
            accept: Some(accept),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn stats(&self) -> GatewayStats {
        let c = &self.shared.counters;
        let get = |a: &AtomicU64| a.load(Ordering::Relaxed);
        GatewayStats {
            connections: get(&c.connections),
            rejected_connections: get(&c.rejected_connections),
            encodes: get(&c.encodes),
            frames_sent: get(&c.frames_sent),
            frames_dropped: get(&c.frames_dropped),
            metrics_sent: get(&c.metrics_sent),
            commands_applied: get(&c.commands_applied),
            commands_ignored: get(&c.commands_ignored),
            errors_sent: get(&c.errors_sent),
        }
    }

    pub fn has_client(&self) -> bool {
        self.shared.client.load(Ordering::SeqCst)
    }

    /// Closes the listener and any session. Idempotent.
    pub fn shutdown(&mut self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
        let sessions = std::mem::take(&mut *self.shared.sessions.lock());
        for h in sessions {
            let _ = h.join();
        }
    }
}

impl Drop for Gateway {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn accept_loop(shared: &Arc<Shared>, listener: TcpListener) {
    while !shared.stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, _)) => {
                let s = shared.clone();
                let handle = std::thread::Builder::new()
                    .name("gateway-conn".into())
                    .spawn(move || handle_connection(&s, stream));
                if let Ok(h) = handle {
                    let mut sessions = shared.sessions.lock();
                    sessions.retain(|h| !h.is_finished());
                    sessions.push(h);
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => std::thread::sleep(Duration::from_millis(10)),
            Err(_) => std::thread::sleep(Duration::from_millis(10)),
        }
    }
}

fn handle_connection(shared: &Arc<Shared>, stream: TcpStream) {
    let _ = stream.set_nonblocking(false);
    let _ = stream.set_nodelay(true);
    let Ok(head) = http::peek_head(&stream, Duration::from_secs(5)) else {
        return;
    };
    if !http::is_websocket_upgrade(&head) {
        let _ = http::serve_static(stream, &head, shared.config.static_dir.as_deref());
        return;
    }
    if shared.client.swap(true, Ordering::SeqCst) {
        bump(&shared.counters.rejected_connections);
        let mut stream = stream;
        let mut consumed = vec![0u8; head.len()];
        let _ = std::io::Read::read_exact(&mut stream, &mut consumed);
        let _ = http::write_response(&mut stream, "409 Conflict", "text/plain", b"a client is already connected\n", false);
        return;
    }
    bump(&shared.counters.connections);
    let _ = stream.set_read_timeout(None);
    if let Ok(ws) = tungstenite::accept(stream) {
        session(shared, ws);
    }
    shared.client.store(false, Ordering::SeqCst);
}

struct Session<'a> {
    shared: &'a Shared,
    ws: WebSocket<TcpStream>,
    last_seq: Option<u64>,
    last_frame: Option<u64>,
    frames_seen: usize,
}

impl Session<'_> {
    fn send_text(&mut self, msg: &ServerMessage) -> tungstenite::Result<()> {
        let text = serde_json::to_string(msg).expect("server messages serialize");
        self.ws.send(Message::text(text))
    }

    fn reject(&mut self, message: String) -> tungstenite::Result<()> {
        bump(&self.shared.counters.errors_sent);
        self.send_text(&ServerMessage::Error { message })
    }

    fn on_text(&mut self, text: &str) -> tungstenite::Result<()> {
        let cmd: ViewportCommand = match serde_json::from_str(text) {
            Ok(c) => c,
            Err(e) => return self.reject(format!("malformed viewport command: {e}")),
        };
        if self.last_seq.is_some_and(|s| cmd.client_seq <= s) {
            bump(&self.shared.counters.commands_ignored);
            return self.send_text(&ServerMessage::Ack {
                client_seq: cmd.client_seq,
                applied: false,
            });
        }
        let (w, h) = self.shared.engine.screen();
        let vp = Viewport::new(cmd.x, cmd.y, w, h, cmd.zoom);
        if let Err(e) = self.shared.engine.set_view(vp) {
            return self.reject(format!("viewport rejected: {e}"));
        }
        self.last_seq = Some(cmd.client_seq);
        bump(&self.shared.counters.commands_applied);
        self.send_text(&ServerMessage::Ack {
            client_seq: cmd.client_seq,
            applied: true,
        })
    }

    /// Sends the newest frame if it has not been sent yet. Anything rendered
    /// in between is skipped.
    fn send_frame(&mut self) -> tungstenite::Result<()> {
        let Some(fb) = self.shared.mailbox.latest() else {
            return Ok(());
        };
        if self.last_frame.is_some_and(|f| fb.frame_index <= f) {
            return Ok(());
        }
        if let Some(prev) = self.last_frame {
            self.shared
                .counters
                .frames_dropped
                .fetch_add(fb.frame_index - prev - 1, Ordering::Relaxed);
        }
        bump(&self.shared.counters.encodes);
        let packet = encode_frame_packet(&fb);
        self.last_frame = Some(fb.frame_index);
        self.ws.send(Message::binary(packet))?;
        bump(&self.shared.counters.frames_sent);
        Ok(())
    }

    fn metrics_packet(&mut self) -> MetricsPacket {
        let engine = &self.shared.engine;
        let recorder = engine.metrics();
        let total = recorder.frame_count();
        let fresh = total.saturating_sub(self.frames_seen).min(MAX_METRIC_FRAMES);
        self.frames_seen = total;
        // One frame of overlap so that a single new frame still has an interval.
        let frames = recorder.recent_frames(fresh + 1);
        let new_frames = &frames[frames.len() - fresh.min(frames.len())..];
        let last = recorder.last_event();
        let occ = engine.pool().occupancy();
        MetricsPacket {
            fps: frame_rate(&frames).ok().map(|s| s.summary.median),
            buffer_rate_gbps: window_buffer_rate(new_frames),
            last_tefov_ms: last.map(|e| e.tefov().as_nanos() as f64 / 1e6),
            last_tpt_us: last.and_then(|e| tpt(&e)).map(|t| t.micros()),
            pool_occupancy: if occ.total() == 0 { 0.0 } else { occ.active as f64 / occ.total() as f64 },
            timestamp: engine.clock().now().nanos() as f64 / 1e6,
        }
    }

    fn run(&mut self) -> tungstenite::Result<()> {
        let frame_period = Duration::from_secs_f64(1.0 / self.shared.config.stream_hz as f64);
        let metrics_period = Duration::from_secs_f64(1.0 / METRICS_HZ as f64);
        let mut next_frame = Instant::now();
        let mut next_metrics = Instant::now() + metrics_period;
        self.frames_seen = self.shared.engine.metrics().frame_count();
        while !self.shared.stop.load(Ordering::SeqCst) {
            match self.ws.read() {
                Ok(Message::Text(t)) => self.on_text(t.as_str())?,
                Ok(Message::Binary(_)) => self.reject("binary messages are not accepted".into())?,
                Ok(_) => {}
                Err(tungstenite::Error::Io(e))
                    if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => {}
                Err(e) => return Err(e),
            }
            let now = Instant::now();
            if now >= next_frame {
                self.send_frame()?;
                next_frame += frame_period;
                if next_frame < now {
                    next_frame = now + frame_period;
                }
            }
            if now >= next_metrics {
                let packet = self.metrics_packet();
                self.send_text(&ServerMessage::Metrics(packet))?;
                bump(&self.shared.counters.metrics_sent);
                next_metrics += metrics_period;
                if next_metrics < now {
                    next_metrics = now + metrics_period;
                }
            }
        }
        let _ = self.ws.close(None);
        let _ = self.ws.flush();
        Ok(())
    }
}

fn session(shared: &Shared, ws: WebSocket<TcpStream>) {
    let _ = ws.get_ref().set_read_timeout(Some(POLL));
    let mut s = Session {
        shared,
        ws,
        last_seq: None,
        last_frame: None,
        frames_seen: 0,
    };
    let _ = s.run();
}
