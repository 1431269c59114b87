//! Newline-delimited JSON over TCP: one request object per line in, one
//! response object per line out. Connections are handled on their own
//! threads; a request failure only ever affects its own response.

use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use thiserror::Error;

use crate::gateway::{Gateway, Request, Response};

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("bind failed on {0}: {1}")]
    Bind(String, std::io::Error),
    #[error("server io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed response line: {0}")]
    BadResponse(String),
}

pub struct ServerHandle {
    addr: SocketAddr,
    shutdown: Arc<AtomicBool>,
    live: Arc<AtomicUsize>,
    accept_thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stops accepting, waits briefly for in-flight connections to drain.
    pub fn shutdown(mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        if let Some(t) = self.accept_thread.take() {
            let _ = t.join();
        }
        let deadline = std::time::Instant::now() + Duration::from_secs(5);
        while self.live.load(Ordering::SeqCst) > 0 && std::time::Instant::now() < deadline {
            std::thread::sleep(Duration::from_millis(10));
        }
    }

    pub fn shutdown_flag(&self) -> Arc<AtomicBool> {
        self.shutdown.clone()
    }
}

/// Binds and serves in background threads until shut down.
pub fn serve(gateway: Arc<Gateway>, listen: &str) -> Result<ServerHandle, ServerError> {
    let listener =
        TcpListener::bind(listen).map_err(|e| ServerError::Bind(listen.to_string(), e))?;
    let addr = listener.local_addr()?;
    listener.set_nonblocking(true)?;

    let shutdown = Arc::new(AtomicBool::new(false));
    let live = Arc::new(AtomicUsize::new(0));
    let accept_shutdown = shutdown.clone();
    let accept_live = live.clone();
    let accept_thread = std::thread::spawn(move || {
        loop {
            if accept_shutdown.load(Ordering::SeqCst) {
                break;
            }
            match listener.accept() {
                Ok((stream, _)) => {
                    let gw = gateway.clone();
                    let live = accept_live.clone();
                    let stop = accept_shutdown.clone();
                    live.fetch_add(1, Ordering::SeqCst);
                    std::thread::spawn(move || {
                        let _ = handle_connection(gw, stream, stop);
                        live.fetch_sub(1, Ordering::SeqCst);
                    });
                }
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                    std::thread::sleep(Duration::from_millis(20));
                }
                Err(_) => break,
            }
        }
    });

    Ok(ServerHandle { addr, shutdown, live, accept_thread: Some(accept_thread) })
}

fn handle_connection(
    gateway: Arc<Gateway>,
    stream: TcpStream,
    stop: Arc<AtomicBool>,
) -> std::io::Result<()> {
    stream.set_read_timeout(Some(Duration::from_millis(200)))?;
    let mut writer = stream.try_clone()?;
    let mut reader = BufReader::new(stream);
    let mut line = String::new();
    loop {
        if stop.load(Ordering::SeqCst) {
            break;
        }
        line.clear();
        match reader.read_line(&mut line) {
            Ok(0) => break, // client closed
            Ok(_) => {
                let trimmed = line.trim();
                if trimmed.is_empty() {
                    continue;
                }
                let response = match serde_json::from_str::<Request>(trimmed) {
                    Ok(req) => gateway.handle_request(&req),
                    Err(_) => Response::error_with_id(None, "bad_request"),
                };
                let mut out = serde_json::to_string(&response).expect("response serializes");
                out.push('\n');
                writer.write_all(out.as_bytes())?;
                writer.flush()?;
            }
            Err(e)
                if e.kind() == std::io::ErrorKind::WouldBlock
                    || e.kind() == std::io::ErrorKind::TimedOut =>
            {
                continue;
            }
            Err(_) => break,
        }
    }
    Ok(())
}

/// Blocking line client for tests, the CLI, and the audit game runner.
pub struct GatewayClient {
    writer: TcpStream,
    reader: BufReader<TcpStream>,
}

impl GatewayClient {
    pub fn connect(addr: &SocketAddr) -> Result<Self, ServerError> {
        let stream = TcpStream::connect(addr)?;
        let writer = stream.try_clone()?;
        Ok(Self { writer, reader: BufReader::new(stream) })
    }

    pub fn send_line(&mut self, raw: &str) -> Result<Response, ServerError> {
        self.writer.write_all(raw.as_bytes())?;
        self.writer.write_all(b"\n")?;
        self.writer.flush()?;
        let mut line = String::new();
        self.reader.read_line(&mut line)?;
        serde_json::from_str(&line).map_err(|e| ServerError::BadResponse(e.to_string()))
    }

    pub fn request(&mut self, req: &Request) -> Result<Response, ServerError> {
        self.send_line(&serde_json::to_string(req).expect("request serializes"))
    }

    pub fn register(&mut self, domains: &[&str]) -> Result<String, ServerError> {
        let resp = self.request(&Request {
            id: Some("register".into()),
            register: Some(domains.iter().map(|s| s.to_string()).collect()),
            ..Default::default()
        })?;
        resp.token.ok_or_else(|| {
            ServerError::BadResponse(resp.error.unwrap_or_else(|| "no token".into()))
        })
    }

    pub fn query(
        &mut self,
        id: &str,
        token: &str,
        query: &str,
        max_new_tokens: Option<usize>,
    ) -> Result<Response, ServerError> {
        self.request(&Request {
            id: Some(id.to_string()),
            token: Some(token.to_string()),
            query: Some(query.to_string()),
            max_new_tokens,
            ..Default::default()
        })
    }

    pub fn score(&mut self, id: &str, token: &str, text: &str) -> Result<Response, ServerError> {
        self.request(&Request {
            id: Some(id.to_string()),
            token: Some(token.to_string()),
            score: Some(text.to_string()),
            ..Default::default()
        })
    }
}
