#![allow(dead_code)]

use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpStream};
use std::time::Duration;

use spikesteer_core::control::TelemetryFrame;
use spikesteer_core::NetworkConfig;

pub fn parse(toml_text: &str) -> NetworkConfig {
    spikesteer_core::ConfigDocument::parse(toml_text)
        .expect("test config parses")
        .network
}

/// Driver LIF cell with constant drive feeding a follower through one edge.
pub fn chain() -> NetworkConfig {
    parse(
        r#"
        dt = 0.1
        seed = 3
        [[populations]]
        name = "driver"
        size = 1
        model = "lif"
        input = { kind = "constant-current", amplitude = 2.0 }
        [[populations]]
        name = "follower"
        size = 1
        model = "lif"
        [[connections]]
        src = "driver"
        dst = "follower"
        rule = { kind = "all-to-all" }
        weight = 4.0
        delay = 3
        "#,
    )
}

/// 1000 neurons: LIF and Izhikevich populations under Poisson drive,
/// recurrent random connectivity with mixed delays.
pub fn mixed(seed: u64) -> NetworkConfig {
    parse(&format!(
        r#"
        dt = 0.1
        seed = {seed}
        [[populations]]
        name = "exc"
        size = 600
        model = "lif"
        input = {{ kind = "poisson-spikes", rate = 800.0, amplitude = 1.2 }}
        [[populations]]
        name = "izh"
        size = 400
        model = "izhikevich"
        input = {{ kind = "poisson-spikes", rate = 600.0, amplitude = 12.0 }}
        [[connections]]
        src = "exc"
        dst = "exc"
        rule = {{ kind = "probability", p = 0.05 }}
        weight = {{ min = 0.0, max = 0.4 }}
        delay = 2
        [[connections]]
        src = "exc"
        dst = "izh"
        rule = {{ kind = "probability", p = 0.05 }}
        weight = 2.0
        delay = 1
        [[connections]]
        src = "izh"
        dst = "exc"
        rule = {{ kind = "probability", p = 0.05 }}
        weight = {{ min = -0.6, max = 0.0 }}
        delay = 3
        "#
    ))
}

/// Newline-delimited JSON client for the raw TCP transport.
pub struct LineClient {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
    pub frames: Vec<TelemetryFrame>,
}

impl LineClient {
    pub fn connect(addr: SocketAddr) -> Self {
        let writer = TcpStream::connect(addr).expect("connect");
        writer
            .set_read_timeout(Some(Duration::from_secs(60)))
            .unwrap();
        let reader = BufReader::new(writer.try_clone().unwrap());
        Self {
            reader,
            writer,
            frames: Vec::new(),
        }
    }

    pub fn send(&mut self, line: &str) {
        self.writer.write_all(line.as_bytes()).unwrap();
        self.writer.write_all(b"\n").unwrap();
    }

    /// Next frame, or `None` at end of stream.
    pub fn next(&mut self) -> Option<TelemetryFrame> {
        let mut line = String::new();
        if self.reader.read_line(&mut line).expect("read frame") == 0 {
            return None;
        }
        let f: TelemetryFrame = serde_json::from_str(&line).expect("frame decodes");
        self.frames.push(f.clone());
        Some(f)
    }

    /// Read until `pred` matches a frame and return it.
    pub fn until(&mut self, mut pred: impl FnMut(&TelemetryFrame) -> bool) -> TelemetryFrame {
        loop {
            let f = self.next().expect("stream ended early");
            if pred(&f) {
                return f;
            }
        }
    }

    pub fn drain(&mut self) {
        while self.next().is_some() {}
    }
}

pub fn is_status(f: &TelemetryFrame, want: &str) -> bool {
    matches!(f, TelemetryFrame::Status { state, .. } if state == want)
}

pub fn status_at(f: &TelemetryFrame, want: &str, at: u64) -> bool {
    matches!(f, TelemetryFrame::Status { state, tick, .. } if state == want && *tick == at)
}

pub fn spike_count(frames: &[TelemetryFrame]) -> u64 {
    frames
        .iter()
        .map(|f| match f {
            TelemetryFrame::Spikes { neurons, .. } => neurons.len() as u64,
            _ => 0,
        })
        .sum()
}
