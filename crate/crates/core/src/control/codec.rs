//! JSON-lines wire format shared by the raw TCP and WebSocket transports.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::engine::Target;
use crate::models::{InputSpec, SynapseParams};
use crate::network::ModelParams;

pub const MAX_MEMBRANE_NEURONS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Spikes,
    Membrane,
    Rates,
}

/// Client to engine. Every message carries a per-connection `id` that must
/// strictly increase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ControlMessage {
    SetParam {
        id: u64,
        target: Target,
        name: String,
        value: f64,
    },
    SetInput {
        id: u64,
        target: Target,
        input: InputSpec,
    },
    Pause {
        id: u64,
    },
    Resume {
        id: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        ticks: Option<u64>,
    },
    Subscribe {
        id: u64,
        channels: Vec<Channel>,
        #[serde(default)]
        membrane_neurons: Vec<u32>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        decimation: Option<u64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rate_window_ms: Option<f64>,
    },
    Snapshot {
        id: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        path: Option<String>,
    },
    Stop {
        id: u64,
    },
}

const MESSAGE_TYPES: [&str; 7] = [
    "set_param",
    "set_input",
    "pause",
    "resume",
    "subscribe",
    "snapshot",
    "stop",
];

impl ControlMessage {
    pub fn id(&self) -> u64 {
        match self {
            ControlMessage::SetParam { id, .. }
            | ControlMessage::SetInput { id, .. }
            | ControlMessage::Pause { id }
            | ControlMessage::Resume { id, .. }
            | ControlMessage::Subscribe { id, .. }
            | ControlMessage::Snapshot { id, .. }
            | ControlMessage::Stop { id } => *id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MembraneSample {
    pub neuron: u32,
    pub v: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateSample {
    pub population: String,
    pub rate_hz: f64,
}

/// Layout and current settings of one population, sent on connect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationInfo {
    pub name: String,
    /// Half-open global index range.
    pub start: u32,
    pub end: u32,
    #[serde(flatten)]
    pub model: ModelParams,
    pub synapse: SynapseParams,
    pub input: InputSpec,
}

/// Engine to client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TelemetryFrame {
    /// Neurons that spiked during `tick`; ticks without spikes are skipped.
    Spikes { tick: u64, neurons: Vec<u32> },
    /// Potentials after `tick` of the subscribed neurons.
    Membrane {
        tick: u64,
        samples: Vec<MembraneSample>,
    },
    /// Per-population rate over the window ending with `tick`.
    Rates {
        tick: u64,
        window_ms: f64,
        rates: Vec<RateSample>,
    },
    Ack {
        tick: u64,
        id: u64,
        effective_tick: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        path: Option<String>,
    },
    Error {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        id: Option<u64>,
        reason: String,
        /// Byte offset of the offending line in the connection's input.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        offset: Option<u64>,
    },
    Status {
        tick: u64,
        state: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        message: Option<String>,
        /// Present only in the first frame of a connection.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        dt: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        populations: Option<Vec<PopulationInfo>>,
    },
}

impl TelemetryFrame {
    pub fn status(tick: u64, state: &str, message: Option<String>) -> Self {
        TelemetryFrame::Status {
            tick,
            state: state.into(),
            message,
            dt: None,
            populations: None,
        }
    }
}

impl TelemetryFrame {
    pub fn error(id: Option<u64>, reason: impl Into<String>) -> Self {
        TelemetryFrame::Error {
            id,
            reason: reason.into(),
            offset: None,
        }
    }

    /// Membrane and rates frames may be shed under backpressure.
    pub fn is_droppable(&self) -> bool {
        matches!(
            self,
            TelemetryFrame::Membrane { .. } | TelemetryFrame::Rates { .. }
        )
    }

    /// One line of output, without the trailing newline.
    pub fn encode(&self) -> String {
        serde_json::to_string(self).expect("frame serializes")
    }
}

pub fn encode_message(msg: &ControlMessage) -> String {
    serde_json::to_string(msg).expect("message serializes")
}

/// Turns a connection's input lines into messages, tracking byte offsets
/// and the id sequence.
#[derive(Debug, Default)]
pub struct LineDecoder {
    offset: u64,
    last_id: Option<u64>,
}

impl LineDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Bytes consumed so far.
    pub fn offset(&self) -> u64 {
        self.offset
    }

    /// Decode one line, including its terminator if any. Blank lines give
    /// `Ok(None)`; failures come back as the error frame to send.
    pub fn decode(&mut self, line: &[u8]) -> Result<Option<ControlMessage>, TelemetryFrame> {
        let at = self.offset;
        self.offset += line.len() as u64;
        let fail = |id: Option<u64>, reason: String| TelemetryFrame::Error {
            id,
            reason,
            offset: Some(at),
        };
        let text = std::str::from_utf8(line)
            .map_err(|_| fail(None, "malformed message: not utf-8".into()))?;
        let text = text.trim();
        if text.is_empty() {
            return Ok(None);
        }
        let value: Value = serde_json::from_str(text)
            .map_err(|e| fail(None, format!("malformed message: {e}")))?;
        let id = value.get("id").and_then(Value::as_u64);
        let kind = match value.get("type") {
            Some(Value::String(s)) => s.as_str(),
            _ => return Err(fail(id, "malformed message: missing type".into())),
        };
        if !MESSAGE_TYPES.contains(&kind) {
            return Err(fail(id, format!("unknown message type {kind}")));
        }
        let msg: ControlMessage = serde_json::from_value(value)
            .map_err(|e| fail(id, format!("malformed message: {e}")))?;
        let id = msg.id();
        if let Some(prev) = self.last_id {
            if id <= prev {
                return Err(fail(
                    Some(id),
                    format!("id {id} not greater than previous id {prev}"),
                ));
            }
        }
        self.last_id = Some(id);
        Ok(Some(msg))
    }
}

/// Whether a membrane sample is due at `tick` with decimation `k`.
pub fn is_sampled(tick: u64, k: u64) -> bool {
    tick.is_multiple_of(k.max(1))
}

/// Keep every `k`-th entry of a per-tick trace, tagged with its tick.
pub fn decimate_membrane<T: Clone>(trace: &[T], k: u64) -> Vec<(u64, T)> {
    trace
        .iter()
        .enumerate()
        .map(|(t, v)| (t as u64, v))
        .filter(|(t, _)| is_sampled(*t, k))
        .map(|(t, v)| (t, v.clone()))
        .collect()
}
