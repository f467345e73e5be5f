mod common;

use std::net::TcpStream;
use std::sync::Arc;
use std::thread;

use common::{is_status, spike_count, status_at, LineClient};
use spikesteer_core::control::{ServeError, Server, ServerConfig, TelemetryFrame};
use spikesteer_core::engine::{RunSummary, SpikeRecorder};
use spikesteer_core::{build_network, EngineConfig, World};

fn start(
    max_ticks: u64,
    cfg: ServerConfig,
) -> (
    std::net::SocketAddr,
    thread::JoinHandle<(RunSummary, SpikeRecorder)>,
) {
    let net = Arc::new(build_network(&common::chain()).unwrap());
    let server = Server::bind(ServerConfig {
        listen: "127.0.0.1:0".into(),
        ..cfg
    })
    .unwrap();
    let addr = server.local_addr();
    let h = thread::spawn(move || {
        let engine = EngineConfig {
            max_ticks,
            ..EngineConfig::default()
        };
        let mut rec = SpikeRecorder::default();
        let s = server.run(World::new(net, 1), &engine, &mut rec).unwrap();
        (s, rec)
    });
    (addr, h)
}

#[test]
fn raw_client_runs_to_completion_and_sees_every_spike() {
    let (addr, h) = start(2000, ServerConfig::default());
    let mut c = LineClient::connect(addr);
    c.until(|f| is_status(f, "paused"));
    c.send(r#"{"type":"resume","id":1}"#);
    c.drain();
    let (summary, rec) = h.join().unwrap();
    assert!(summary.total_spikes > 0);
    assert_eq!(spike_count(&c.frames), summary.total_spikes);
    assert_eq!(rec.spikes.len() as u64, summary.total_spikes);
    assert!(status_at(c.frames.last().unwrap(), "finished", 2000));
}

#[test]
fn start_paused_and_auto_pause_after_resume_ticks() {
    let (addr, h) = start(2000, ServerConfig::default());
    let mut c = LineClient::connect(addr);
    c.until(|f| status_at(f, "paused", 0));
    c.send(r#"{"type":"resume","id":1,"ticks":500}"#);
    c.until(|f| {
        matches!(
            f,
            TelemetryFrame::Ack {
                id: 1,
                effective_tick: 0,
                ..
            }
        )
    });
    c.until(|f| status_at(f, "paused", 500));
    c.send(r#"{"type":"set_param","id":2,"target":"driver","name":"v_thresh","value":-52.0}"#);
    c.send(r#"{"type":"stop","id":3}"#);
    let ack = c.until(|f| matches!(f, TelemetryFrame::Ack { id: 2, .. }));
    assert!(matches!(
        ack,
        TelemetryFrame::Ack {
            effective_tick: 500,
            ..
        }
    ));
    c.drain();
    let (summary, _) = h.join().unwrap();
    assert!(summary.stopped);
    assert_eq!(summary.end_tick, 500);
    assert!(status_at(c.frames.last().unwrap(), "stopped", 500));
}

#[test]
fn bad_lines_get_error_frames_and_session_survives() {
    let (addr, h) = start(100, ServerConfig::default());
    let mut c = LineClient::connect(addr);
    c.until(|f| is_status(f, "paused"));
    let first = r#"{"type":"bogus","id":1}"#;
    c.send(first);
    let e = c.until(|f| matches!(f, TelemetryFrame::Error { .. }));
    assert_eq!(
        e,
        TelemetryFrame::Error {
            id: Some(1),
            reason: "unknown message type bogus".into(),
            offset: Some(0)
        }
    );
    c.send("{oops");
    let e = c.until(|f| matches!(f, TelemetryFrame::Error { .. }));
    assert!(
        matches!(e, TelemetryFrame::Error { offset: Some(o), .. } if o == first.len() as u64 + 1)
    );
    c.send(r#"{"type":"set_param","id":2,"target":"driver","name":"gain","value":1.0}"#);
    let e = c.until(|f| matches!(f, TelemetryFrame::Error { .. }));
    assert!(
        matches!(e, TelemetryFrame::Error { id: Some(2), ref reason, .. } if reason == "unknown parameter gain for model lif")
    );
    c.send(r#"{"type":"stop","id":3}"#);
    c.drain();
    h.join().unwrap();
}

#[test]
fn acks_go_only_to_the_originating_client() {
    let (addr, h) = start(100, ServerConfig::default());
    let mut a = LineClient::connect(addr);
    let mut b = LineClient::connect(addr);
    a.until(|f| is_status(f, "paused"));
    b.until(|f| is_status(f, "paused"));
    a.send(r#"{"type":"set_param","id":7,"target":"follower","name":"r_m","value":12.0}"#);
    a.until(|f| matches!(f, TelemetryFrame::Ack { id: 7, .. }));
    b.send(r#"{"type":"stop","id":1}"#);
    a.drain();
    b.drain();
    h.join().unwrap();
    assert!(!b
        .frames
        .iter()
        .any(|f| matches!(f, TelemetryFrame::Ack { id: 7, .. })));
    assert!(status_at(a.frames.last().unwrap(), "stopped", 0));
    assert!(status_at(b.frames.last().unwrap(), "stopped", 0));
}

#[test]
fn snapshot_over_protocol_writes_file() {
    let dir = tempfile::tempdir().unwrap();
    let (addr, h) = start(
        400,
        ServerConfig {
            snapshot_dir: dir.path().to_path_buf(),
            ..ServerConfig::default()
        },
    );
    let mut c = LineClient::connect(addr);
    c.until(|f| is_status(f, "paused"));
    c.send(r#"{"type":"resume","id":1,"ticks":100}"#);
    c.until(|f| status_at(f, "paused", 100));
    c.send(r#"{"type":"snapshot","id":2,"path":"at100.snap"}"#);
    let ack = c.until(|f| matches!(f, TelemetryFrame::Ack { id: 2, .. }));
    let TelemetryFrame::Ack {
        path: Some(p),
        effective_tick,
        ..
    } = ack
    else {
        panic!("{ack:?}")
    };
    assert_eq!(effective_tick, 100);
    let frame = spikesteer_core::engine::SnapshotFrame::from_bytes(std::fs::read(&p).unwrap());
    assert_eq!(frame.tick().unwrap(), 100);
    c.send(r#"{"type":"stop","id":3}"#);
    c.drain();
    h.join().unwrap();
}

#[test]
fn websocket_client_gets_decimated_membrane() {
    let (addr, h) = start(300, ServerConfig::default());
    let stream = TcpStream::connect(addr).unwrap();
    let (mut ws, _) = tungstenite::client(format!("ws://{addr}/ws"), stream).unwrap();
    let mut frames = Vec::new();
    let recv = |ws: &mut tungstenite::WebSocket<TcpStream>| -> Option<TelemetryFrame> {
        loop {
            match ws.read() {
                Ok(tungstenite::Message::Text(t)) => {
                    let f: TelemetryFrame = serde_json::from_str(t.as_str()).unwrap();
                    return Some(f);
                }
                Ok(tungstenite::Message::Close(_)) | Err(_) => return None,
                Ok(_) => {}
            }
        }
    };
    assert!(is_status(&recv(&mut ws).unwrap(), "paused"));
    ws.send(tungstenite::Message::text(
        r#"{"type":"subscribe","id":1,"channels":["spikes","membrane","rates"],"membrane_neurons":[0,1],"decimation":10,"rate_window_ms":5.0}"#,
    ))
    .unwrap();
    ws.send(tungstenite::Message::text(r#"{"type":"resume","id":2}"#))
        .unwrap();
    while let Some(f) = recv(&mut ws) {
        frames.push(f);
    }
    let (summary, _) = h.join().unwrap();
    let membrane_ticks: Vec<u64> = frames
        .iter()
        .filter_map(|f| match f {
            TelemetryFrame::Membrane { tick, samples } => {
                assert_eq!(samples.len(), 2);
                Some(*tick)
            }
            _ => None,
        })
        .collect();
    assert_eq!(membrane_ticks, (0..300).step_by(10).collect::<Vec<_>>());
    let rates = frames
        .iter()
        .filter(|f| matches!(f, TelemetryFrame::Rates { .. }))
        .count();
    assert_eq!(rates, 300 / 50);
    assert_eq!(spike_count(&frames), summary.total_spikes);
    assert!(is_status(frames.last().unwrap(), "finished"));
}

#[test]
fn websocket_on_wrong_path_is_refused() {
    let (addr, h) = start(10, ServerConfig::default());
    let stream = TcpStream::connect(addr).unwrap();
    assert!(tungstenite::client(format!("ws://{addr}/elsewhere"), stream).is_err());
    let mut c = LineClient::connect(addr);
    c.until(|f| is_status(f, "paused"));
    c.send(r#"{"type":"stop","id":1}"#);
    c.drain();
    h.join().unwrap();
}

#[test]
fn port_in_use_is_a_bind_error() {
    let taken = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let err = Server::bind(ServerConfig {
        listen: taken.local_addr().unwrap().to_string(),
        ..ServerConfig::default()
    })
    .err()
    .unwrap();
    assert!(matches!(err, ServeError::Bind { .. }));
}
