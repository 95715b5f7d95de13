use std::io::{Read, Write};
use std::net::{SocketAddr, TcpStream};
use std::sync::Arc;
use std::time::{Duration, Instant};

use tilestream::{CompositorConfig, Engine, EngineConfig, FlatSource, FrameLoop, FrameLoopConfig, Pyramid, Viewport};
use tilestream_gateway::{
    decode_frame_packet, encode_frame_packet, FramePacket, Gateway, GatewayConfig, MetricsPacket, ServerMessage, FRAME_HEADER_BYTES,
};
use tungstenite::stream::MaybeTlsStream;
use tungstenite::{Message, WebSocket};

const SCREEN: (u32, u32) = (160, 120);

fn compositor() -> CompositorConfig {
    CompositorConfig {
        parallel: false,
        ..Default::default()
    }
}

struct Rig {
    engine: Arc<Engine>,
    frames: Option<FrameLoop>,
    gateway: Gateway,
}

impl Rig {
    fn new(static_dir: Option<std::path::PathBuf>) -> Self {
        let src = Arc::new(FlatSource::new(Pyramid::from_downsamples(4096, 4096, &[1.0, 4.0, 16.0]).unwrap(), 11));
        let config = EngineConfig {
            pool_size: Some(96),
            loader_workers: 1,
            executors: 1,
            ..Default::default()
        };
        let engine = Arc::new(Engine::start(src, config, SCREEN).unwrap());
        let frames = FrameLoop::start(
            engine.clone(),
            FrameLoopConfig {
                target_hz: 60,
                compositor: compositor(),
            },
        );
        let gateway = Gateway::start(
            engine.clone(),
            frames.mailbox().clone(),
            GatewayConfig {
                addr: SocketAddr::from(([127, 0, 0, 1], 0)),
                static_dir,
                ..Default::default()
            },
        )
        .unwrap();
        Self {
            engine,
            frames: Some(frames),
            gateway,
        }
    }

    fn connect(&self) -> Client {
        let (ws, _) = tungstenite::connect(format!("ws://{}/", self.gateway.local_addr())).unwrap();
        if let MaybeTlsStream::Plain(s) = ws.get_ref() {
            s.set_read_timeout(Some(Duration::from_secs(10))).unwrap();
        }
        Client { ws }
    }
}

impl Drop for Rig {
    fn drop(&mut self) {
        self.gateway.shutdown();
        self.engine.shutdown();
        if let Some(f) = self.frames.take() {
            f.stop();
        }
    }
}

enum Incoming {
    Text(ServerMessage),
    Frame(FramePacket),
}

struct Client {
    ws: WebSocket<MaybeTlsStream<TcpStream>>,
}

impl Client {
    fn send_raw(&mut self, text: &str) {
        self.ws.send(Message::text(text)).unwrap();
    }

    fn send_view(&mut self, x: f64, y: f64, zoom: f64, seq: u64) {
        self.send_raw(&format!(r#"{{"x":{x},"y":{y},"zoom":{zoom},"client_seq":{seq}}}"#));
    }

    fn next(&mut self) -> Incoming {
        loop {
            match self.ws.read().unwrap() {
                Message::Text(t) => return Incoming::Text(serde_json::from_str(t.as_str()).unwrap()),
                Message::Binary(b) => return Incoming::Frame(decode_frame_packet(&b).unwrap()),
                _ => {}
            }
        }
    }

    /// Next non-metrics text message.
    fn reply(&mut self) -> ServerMessage {
        loop {
            if let Incoming::Text(m) = self.next() {
                if !matches!(m, ServerMessage::Metrics(_)) {
                    return m;
                }
            }
        }
    }
}

#[test]
fn streamed_frame_matches_headless_render() {
    let rig = Rig::new(None);
    let mut client = rig.connect();
    let vp = Viewport::new(1000.0, 1200.0, SCREEN.0, SCREEN.1, 0.5);
    client.send_view(vp.origin_x, vp.origin_y, vp.zoom, 1);
    assert_eq!(
        client.reply(),
        ServerMessage::Ack {
            client_seq: 1,
            applied: true
        }
    );
    let settled = rig.engine.wait_quiescent(Duration::from_secs(20)).expect("quiescence");
    // First frame whose render began after the view settled.
    let mailbox = rig.frames.as_ref().unwrap().mailbox().clone();
    let mut after = None;
    let first_settled = loop {
        let f = mailbox.wait_newer(after, Duration::from_secs(5)).expect("frame loop stalled");
        if f.started_at > settled {
            break f.frame_index;
        }
        after = Some(f.frame_index);
    };
    let packet = loop {
        if let Incoming::Frame(p) = client.next() {
            if p.frame_index >= first_settled {
                break p;
            }
        }
    };
    let (fb, _) = rig.engine.render(Some(&vp), &compositor(), packet.frame_index).unwrap();
    assert_eq!(packet.pixels, fb.pixels);
    assert_eq!((packet.width, packet.height), SCREEN);
    // The view is settled: every later frame is identical too.
    let (fb, _) = rig.engine.render(Some(&vp), &compositor(), 0).unwrap();
    for _ in 0..3 {
        if let Incoming::Frame(p) = client.next() {
            assert_eq!(p.pixels, fb.pixels, "frame {}", p.frame_index);
        }
    }
}

#[test]
fn stale_sequence_numbers_are_ignored() {
    let rig = Rig::new(None);
    let mut client = rig.connect();
    client.send_view(500.0, 500.0, 0.5, 5);
    client.send_view(2000.0, 2000.0, 0.5, 3);
    assert_eq!(
        client.reply(),
        ServerMessage::Ack {
            client_seq: 5,
            applied: true
        }
    );
    assert_eq!(
        client.reply(),
        ServerMessage::Ack {
            client_seq: 3,
            applied: false
        }
    );
    let view = rig.engine.view().unwrap();
    assert_eq!((view.origin_x, view.origin_y), (500.0, 500.0));
    let stats = rig.gateway.stats();
    assert_eq!((stats.commands_applied, stats.commands_ignored), (1, 1));
}

#[test]
fn no_client_means_no_encodes() {
    let rig = Rig::new(None);
    rig.engine.set_view(Viewport::new(0.0, 0.0, SCREEN.0, SCREEN.1, 1.0)).unwrap();
    std::thread::sleep(Duration::from_millis(400));
    assert!(rig.engine.metrics().frame_count() > 5);
    assert_eq!(rig.gateway.stats().encodes, 0);
    assert!(!rig.gateway.has_client());
}

#[test]
fn malformed_message_gets_an_error_and_the_connection_survives() {
    let rig = Rig::new(None);
    let mut client = rig.connect();
    for bad in ["not json", r#"{"x":1}"#, r#"{"x":0,"y":0,"zoom":-1,"client_seq":1}"#] {
        client.send_raw(bad);
        assert!(matches!(client.reply(), ServerMessage::Error { .. }), "{bad}");
    }
    client.send_view(0.0, 0.0, 1.0, 2);
    assert_eq!(
        client.reply(),
        ServerMessage::Ack {
            client_seq: 2,
            applied: true
        }
    );
    assert_eq!(rig.gateway.stats().errors_sent, 3);
}

#[test]
fn metrics_stream_at_ten_hertz() {
    let rig = Rig::new(None);
    let mut client = rig.connect();
    client.send_view(0.0, 0.0, 0.25, 1);
    let t0 = Instant::now();
    let mut packets: Vec<MetricsPacket> = Vec::new();
    let mut frames = 0;
    while t0.elapsed() < Duration::from_millis(1500) {
        match client.next() {
            Incoming::Text(ServerMessage::Metrics(m)) => packets.push(m),
            Incoming::Frame(_) => frames += 1,
            _ => {}
        }
    }
    assert!((11..=19).contains(&packets.len()), "{} packets", packets.len());
    assert!(packets.windows(2).all(|w| w[0].timestamp < w[1].timestamp));
    assert!(packets.iter().filter_map(|p| p.fps).any(|f| f > 30.0));
    assert!(packets.iter().all(|p| (0.0..=1.0).contains(&p.pool_occupancy)));
    // Frames are sent at the stream rate, not the render rate.
    assert!(frames <= 50, "{frames} frames in 1.5 s");
}

#[test]
fn second_client_is_refused() {
    let rig = Rig::new(None);
    let _first = rig.connect();
    let second = tungstenite::connect(format!("ws://{}/", rig.gateway.local_addr()));
    assert!(second.is_err());
    assert_eq!(rig.gateway.stats().rejected_connections, 1);
}

fn http_get(addr: SocketAddr, path: &str) -> (String, String) {
    let mut s = TcpStream::connect(addr).unwrap();
    write!(s, "GET {path} HTTP/1.1\r\nHost: localhost\r\n\r\n").unwrap();
    let mut out = String::new();
    s.read_to_string(&mut out).unwrap();
    let (head, body) = out.split_once("\r\n\r\n").unwrap();
    (head.lines().next().unwrap().to_string(), body.to_string())
}

#[test]
fn http_serves_the_viewer_from_the_same_port() {
    let rig = Rig::new(None);
    let (status, body) = http_get(rig.gateway.local_addr(), "/");
    assert!(status.contains("200"), "{status}");
    assert!(body.contains("<canvas"));
    assert!(http_get(rig.gateway.local_addr(), "/missing.js").0.contains("404"));
}

#[test]
fn http_serves_static_dir_and_refuses_traversal() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<p>viewer</p>").unwrap();
    std::fs::write(dir.path().join("app.js"), "let a = 1;").unwrap();
    let rig = Rig::new(Some(dir.path().to_path_buf()));
    let addr = rig.gateway.local_addr();
    assert_eq!(http_get(addr, "/").1, "<p>viewer</p>");
    assert_eq!(http_get(addr, "/app.js").1, "let a = 1;");
    assert!(http_get(addr, "/../Cargo.toml").0.contains("404"));
}

#[test]
fn frame_packet_layout() {
    let fb = tilestream::Framebuffer {
        width: 3,
        height: 2,
        pixels: (0..24).collect(),
        frame_index: 0x0102_0304_0506_0708,
        started_at: Default::default(),
        finished_at: Default::default(),
    };
    let bytes = encode_frame_packet(&fb);
    assert_eq!(&bytes[..8], &[8, 7, 6, 5, 4, 3, 2, 1]);
    assert_eq!(&bytes[8..16], &[3, 0, 0, 0, 2, 0, 0, 0]);
    assert_eq!(&bytes[FRAME_HEADER_BYTES..FRAME_HEADER_BYTES + 8], b"\x89PNG\r\n\x1a\n");
    let p = decode_frame_packet(&bytes).unwrap();
    assert_eq!((p.frame_index, p.width, p.height), (fb.frame_index, 3, 2));
    assert_eq!(p.pixels, fb.pixels);
    assert!(decode_frame_packet(&bytes[..10]).is_err());
}
