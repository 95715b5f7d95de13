//! Minimal HTTP/1.1 static file responder for the viewer's assets.

use std::io::{Read, Write};
use std::net::TcpStream;
use std::path::{Component, Path, PathBuf};
use std::time::{Duration, Instant};

/// Fallback page when no asset directory is configured.
pub const EMBEDDED_INDEX: &str = include_str!("../assets/index.html");

const MAX_HEADER: usize = 16 * 1024;

/// The request head, read without consuming it from the socket.
pub fn peek_head(stream: &TcpStream, timeout: Duration) -> std::io::Result<String> {
    let deadline = Instant::now() + timeout;
    let mut buf = vec![0u8; MAX_HEADER];
    stream.set_read_timeout(Some(Duration::from_millis(50)))?;
    loop {
        match stream.peek(&mut buf) {
            Ok(0) => return Err(std::io::ErrorKind::UnexpectedEof.into()),
            Ok(n) => {
                let head = &buf[..n];
                if let Some(end) = head.windows(4).position(|w| w == b"\r\n\r\n") {
                    return Ok(String::from_utf8_lossy(&head[..end + 4]).into_owned());
                }
                if n == MAX_HEADER {
                    return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, "request head too large"));
                }
            }
            Err(e) if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => {}
            Err(e) => return Err(e),
        }
        if Instant::now() >= deadline {
            return Err(std::io::ErrorKind::TimedOut.into());
        }
        std::thread::sleep(Duration::from_millis(2));
    }
}

pub fn is_websocket_upgrade(head: &str) -> bool {
    head.lines().skip(1).any(|l| {
        let Some((k, v)) = l.split_once(':') else { return false };
        k.trim().eq_ignore_ascii_case("upgrade") && v.trim().eq_ignore_ascii_case("websocket")
    })
}

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()) {
        Some("html") => "text/html; charset=utf-8",
        Some("js" | "mjs") => "text/javascript; charset=utf-8",
        Some("css") => "text/css; charset=utf-8",
        Some("json") => "application/json",
        Some("png") => "image/png",
        Some("svg") => "image/svg+xml",
        Some("wasm") => "application/wasm",
        _ => "application/octet-stream",
    }
}

/// Maps a request target to a file under `root`, refusing anything that
/// would leave it.
fn resolve(root: &Path, target: &str) -> Option<PathBuf> {
    let path = target.split(['?', '#']).next().unwrap_or("/");
    let rel = Path::new(path.trim_start_matches('/'));
    if rel.components().any(|c| !matches!(c, Component::Normal(_))) {
        return None;
    }
    let mut full = root.join(rel);
    if full.is_dir() {
        full.push("index.html");
    }
    full.is_file().then_some(full)
}

pub fn write_response(stream: &mut TcpStream, status: &str, ctype: &str, body: &[u8], head_only: bool) -> std::io::Result<()> {
    write!(
        stream,
        "HTTP/1.1 {status}\r\nContent-Type: {ctype}\r\nContent-Length: {}\r\nCache-Control: no-store\r\nConnection: close\r\n\r\n",
        body.len()
    )?;
    if !head_only {
        stream.write_all(body)?;
    }
    stream.flush()
}

/// Answers one request and closes the connection.
pub fn serve_static(mut stream: TcpStream, head: &str, root: Option<&Path>) -> std::io::Result<()> {
    // Consume the request head that was only peeked.
    let mut consumed = vec![0u8; head.len()];
    stream.read_exact(&mut consumed)?;
    let mut parts = head.lines().next().unwrap_or("").split_whitespace();
    let (method, target) = (parts.next().unwrap_or(""), parts.next().unwrap_or("/"));
    let head_only = method == "HEAD";
    if method != "GET" && !head_only {
        return write_response(&mut stream, "405 Method Not Allowed", "text/plain", b"method not allowed\n", false);
    }
    let file = root.and_then(|r| resolve(r, target));
    match (file, target.split(['?', '#']).next().unwrap_or("/")) {
        (Some(f), _) => match std::fs::read(&f) {
            Ok(body) => write_response(&mut stream, "200 OK", content_type(&f), &body, head_only),
            Err(_) => write_response(&mut stream, "500 Internal Server Error", "text/plain", b"read error\n", head_only),
        },
        (None, "/" | "/index.html") if root.map_or(true, |r| !r.join("index.html").is_file()) => {
            write_response(&mut stream, "200 OK", "text/html; charset=utf-8", EMBEDDED_INDEX.as_bytes(), head_only)
        }
        _ => write_response(&mut stream, "404 Not Found", "text/plain", b"not found\n", head_only),
    }
}
