//! Newline-delimited JSON over TCP: a one-shot request helper and a
//! threaded line server.

use std::io::{self, BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;

/// `socket://host:port` or `host:port` to `host:port`.
pub fn strip_scheme(address: &str) -> &str {
    address.split_once("://").map_or(address, |(_, rest)| rest).trim_end_matches('/')
}

pub fn resolve(address: &str) -> io::Result<SocketAddr> {
    strip_scheme(address)
        .to_socket_addrs()?
        .next()
        .ok_or_else(|| io::Error::new(io::ErrorKind::NotFound, format!("cannot resolve `{address}`")))
}

pub fn connect(address: &str, timeout: Duration) -> io::Result<TcpStream> {
    let stream = TcpStream::connect_timeout(&resolve(address)?, timeout)?;
    stream.set_read_timeout(Some(timeout))?;
    stream.set_write_timeout(Some(timeout))?;
    stream.set_nodelay(true)?;
    Ok(stream)
}

pub fn write_line<T: Serialize>(w: &mut impl Write, value: &T) -> io::Result<()> {
    let mut line = serde_json::to_string(value).map_err(io::Error::other)?;
    line.push('\n');
    w.write_all(line.as_bytes())?;
    w.flush()
}

/// Reads one line and decodes it. `Ok(None)` at end of stream.
pub fn read_line<T: DeserializeOwned>(r: &mut impl BufRead) -> io::Result<Option<T>> {
    let mut line = String::new();
    if r.read_line(&mut line)? == 0 {
        return Ok(None);
    }
    serde_json::from_str(line.trim_end())
        .map(Some)
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
}

/// Sends one request line and waits for one response line.
pub fn request<Q: Serialize, R: DeserializeOwned>(address: &str, req: &Q, timeout: Duration) -> io::Result<R> {
    let stream = connect(address, timeout)?;
    let mut writer = stream.try_clone()?;
    write_line(&mut writer, req)?;
    let mut reader = BufReader::new(stream);
    read_line(&mut reader)?.ok_or_else(|| io::Error::new(io::ErrorKind::UnexpectedEof, "connection closed"))
}

/// A background listener. Dropping the handle stops accepting.
pub struct ServiceHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
}

impl ServiceHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Blocks the calling thread forever (for foreground services).
    pub fn wait(self) -> ! {
        loop {
            thread::park();
        }
    }
}

impl Drop for ServiceHandle {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Wake the blocking accept.
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_millis(200));
    }
}

/// Serves request/response lines: each decoded line is passed to `handle`
/// and its result written back on the same connection.
pub fn serve_lines<Q, R, F>(bind: &str, handle: F) -> io::Result<ServiceHandle>
where
    Q: DeserializeOwned,
    R: Serialize,
    F: Fn(Result<Q, String>) -> R + Send + Sync + 'static,
{
    let listener = TcpListener::bind(strip_scheme(bind))?;
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let handle = Arc::new(handle);
    let flag = stop.clone();
    thread::spawn(move || {
        for conn in listener.incoming() {
            if flag.load(Ordering::SeqCst) {
                break;
            }
            let Ok(stream) = conn else { continue };
            let handle = handle.clone();
            thread::spawn(move || {
                let _ = stream.set_nodelay(true);
                let Ok(mut writer) = stream.try_clone() else { return };
                let reader = BufReader::new(stream);
                for line in reader.lines() {
                    let Ok(line) = line else { break };
                    if line.trim().is_empty() {
                        continue;
                    }
                    let req = serde_json::from_str::<Q>(&line).map_err(|e| e.to_string());
                    if write_line(&mut writer, &handle(req)).is_err() {
                        break;
                    }
                }
            });
        }
    });
    Ok(ServiceHandle { addr, stop })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schemes() {
        assert_eq!(strip_scheme("socket://localhost:8000"), "localhost:8000");
        assert_eq!(strip_scheme("127.0.0.1:9"), "127.0.0.1:9");
    }

    #[test]
    fn echo_roundtrip() {
        let svc = serve_lines("127.0.0.1:0", |req: Result<serde_json::Value, String>| {
            serde_json::json!({ "echo": req.unwrap() })
        })
        .unwrap();
        let resp: serde_json::Value =
            request(&svc.addr().to_string(), &serde_json::json!({"x": 1}), Duration::from_secs(2)).unwrap();
        assert_eq!(resp, serde_json::json!({"echo": {"x": 1}}));
    }
}
