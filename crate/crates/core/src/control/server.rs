//! One TCP listener serving both transports. A connection that opens with
//! `GET ` is upgraded to WebSocket (text messages, one JSON object each);
//! anything else speaks newline-delimited JSON directly.

use std::io::{BufRead, BufReader, ErrorKind, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;
use tungstenite::handshake::server::{ErrorResponse, Request, Response};
use tungstenite::Message;

use super::codec::{LineDecoder, TelemetryFrame};
use super::hub::{Hub, HubConfig, SessionHandle};
use crate::engine::{
    run_world, CommandOutcome, EngineConfig, EngineError, RunState, RunSummary, TelemetrySink,
    TickReport, World,
};

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub listen: String,
    /// Request path accepted for WebSocket upgrades.
    pub ws_path: String,
    pub decimation: u64,
    pub queue_capacity: usize,
    pub snapshot_dir: PathBuf,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:7878".into(),
            ws_path: "/ws".into(),
            decimation: 1,
            queue_capacity: HubConfig::default().queue_capacity,
            snapshot_dir: PathBuf::from("."),
        }
    }
}

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("cannot listen on {addr}: {source}")]
    Bind {
        addr: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Engine(#[from] EngineError),
}

pub struct Server {
    listener: TcpListener,
    cfg: ServerConfig,
}

const POLL: Duration = Duration::from_millis(20);

impl Server {
    pub fn bind(cfg: ServerConfig) -> Result<Self, ServeError> {
        let listener = TcpListener::bind(&cfg.listen).map_err(|source| ServeError::Bind {
            addr: cfg.listen.clone(),
            source,
        })?;
        Ok(Self { listener, cfg })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.listener
            .local_addr()
            .expect("bound listener has an address")
    }

    /// Serve `world` until it finishes or a client stops it. The world is
    /// paused first so clients can connect before anything runs. `extra`
    /// sees the same telemetry as the clients.
    pub fn run(
        self,
        mut world: World,
        engine: &EngineConfig,
        extra: &mut dyn TelemetrySink,
    ) -> Result<RunSummary, ServeError> {
        world.boundary().set_paused(true);
        let (hub, mut commands) = Hub::new(
            world.network(),
            HubConfig {
                queue_capacity: self.cfg.queue_capacity,
                default_decimation: self.cfg.decimation.max(1),
                snapshot_dir: self.cfg.snapshot_dir.clone(),
                ..HubConfig::default()
            },
            RunState::Paused,
        );
        // sessions decimate on their own
        let engine = EngineConfig {
            telemetry_decimation: 1,
            ..engine.clone()
        };
        self.listener
            .set_nonblocking(true)
            .map_err(|source| ServeError::Bind {
                addr: self.cfg.listen.clone(),
                source,
            })?;
        let ws_path = Arc::new(self.cfg.ws_path.clone());
        std::thread::scope(|scope| {
            let accept_hub = hub.clone();
            let listener = &self.listener;
            scope.spawn(move || {
                let mut conns = Vec::new();
                while !accept_hub.is_finished() {
                    match listener.accept() {
                        Ok((stream, _)) => {
                            let hub = accept_hub.clone();
                            let ws_path = ws_path.clone();
                            conns.push(std::thread::spawn(move || {
                                serve_connection(stream, &hub, &ws_path)
                            }));
                        }
                        Err(e) if e.kind() == ErrorKind::WouldBlock => std::thread::sleep(POLL),
                        Err(_) => std::thread::sleep(POLL),
                    }
                }
                // let every client receive its final frames
                for c in conns {
                    let _ = c.join();
                }
            });
            let mut tee = Tee {
                hub: hub.clone(),
                extra,
            };
            run_world(&mut world, &engine, &mut commands, &mut tee).map_err(ServeError::from)
        })
    }
}

struct Tee<'a> {
    hub: Hub,
    extra: &'a mut dyn TelemetrySink,
}

impl TelemetrySink for Tee<'_> {
    fn wants_membrane(&self, tick: u64) -> bool {
        self.hub.wants_membrane(tick) || self.extra.wants_membrane(tick)
    }
    fn on_tick(&mut self, r: &TickReport<'_>) {
        self.hub.on_tick(r);
        self.extra.on_tick(r);
    }
    fn on_outcome(&mut self, o: &CommandOutcome) {
        self.hub.on_outcome(o);
        self.extra.on_outcome(o);
    }
    fn on_state(&mut self, tick: u64, state: RunState) {
        self.hub.on_state(tick, state);
        self.extra.on_state(tick, state);
    }
    fn on_finish(&mut self, result: &Result<RunSummary, EngineError>) {
        self.hub.on_finish(result);
        self.extra.on_finish(result);
    }
}

fn serve_connection(stream: TcpStream, hub: &Hub, ws_path: &str) {
    let _ = stream.set_nonblocking(false);
    let _ = stream.set_nodelay(true);
    let _ = stream.set_write_timeout(Some(Duration::from_secs(5)));
    if opens_with_get(&stream) {
        serve_websocket(stream, hub, ws_path);
    } else {
        serve_lines(stream, hub);
    }
}

/// Raw clients may wait for the server to speak first, so give up
/// peeking after a short while.
fn opens_with_get(stream: &TcpStream) -> bool {
    let _ = stream.set_read_timeout(Some(Duration::from_millis(200)));
    let mut buf = [0u8; 4];
    let mut seen = 0;
    for _ in 0..10 {
        match stream.peek(&mut buf) {
            Ok(0) => break,
            Ok(n) => {
                seen = n;
                if n >= 4 || !b"GET ".starts_with(&buf[..n]) {
                    break;
                }
                std::thread::sleep(POLL);
            }
            Err(_) => break,
        }
    }
    let _ = stream.set_read_timeout(None);
    seen >= 4 && &buf == b"GET "
}

fn serve_lines(stream: TcpStream, hub: &Hub) {
    let Ok(read_half) = stream.try_clone() else {
        return;
    };
    let session = Arc::new(hub.connect());
    let writer_session = session.clone();
    let writer = std::thread::spawn(move || {
        let mut out = std::io::BufWriter::new(&stream);
        while let Some(frames) = writer_session.queue().take(Duration::from_millis(200)) {
            let mut failed = false;
            for f in frames {
                failed |= writeln!(out, "{}", f.encode()).is_err();
            }
            if failed || out.flush().is_err() {
                break;
            }
        }
        drop(out);
        let _ = stream.shutdown(std::net::Shutdown::Both);
    });
    let mut reader = BufReader::new(read_half);
    let mut decoder = LineDecoder::new();
    let mut line = Vec::new();
    loop {
        line.clear();
        match reader.read_until(b'\n', &mut line) {
            Ok(0) | Err(_) => break,
            Ok(_) => dispatch(&session, decoder.decode(&line)),
        }
    }
    let _ = writer.join();
}

fn dispatch(
    session: &SessionHandle,
    decoded: Result<Option<super::ControlMessage>, TelemetryFrame>,
) {
    match decoded {
        Ok(Some(msg)) => session.handle(msg),
        Ok(None) => {}
        Err(frame) => session.send(frame),
    }
}

// The handshake callback signature is fixed by tungstenite.
#[allow(clippy::result_large_err)]
fn serve_websocket(stream: TcpStream, hub: &Hub, ws_path: &str) {
    let check = |req: &Request, resp: Response| -> Result<Response, ErrorResponse> {
        if req.uri().path() == ws_path {
            Ok(resp)
        } else {
            let mut r = ErrorResponse::new(Some(format!(
                "no websocket endpoint at {}",
                req.uri().path()
            )));
            *r.status_mut() = tungstenite::http::StatusCode::NOT_FOUND;
            Err(r)
        }
    };
    let Ok(mut ws) = tungstenite::accept_hdr(stream, check) else {
        return;
    };
    let _ = ws.get_mut().set_read_timeout(Some(POLL));
    let session = hub.connect();
    let mut decoder = LineDecoder::new();
    'conn: loop {
        match session.queue().take(Duration::ZERO) {
            None => break,
            Some(frames) => {
                for f in frames {
                    if ws.send(Message::text(f.encode())).is_err() {
                        break 'conn;
                    }
                }
            }
        }
        match ws.read() {
            Ok(Message::Text(text)) => {
                for line in text.as_str().split_inclusive('\n') {
                    dispatch(&session, decoder.decode(line.as_bytes()));
                }
            }
            Ok(Message::Close(_)) => break,
            Ok(_) => {}
            Err(tungstenite::Error::Io(e))
                if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
            Err(_) => break,
        }
    }
    let _ = ws.close(None);
    let _ = ws.flush();
    let mut rest = [0u8; 256];
    let _ = ws.get_mut().read(&mut rest);
}
