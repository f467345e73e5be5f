//! Steering and telemetry: the JSON-lines protocol, the per-session
//! fan-out hub and (with the `server` feature) the TCP/WebSocket server.

mod codec;
mod hub;
#[cfg(feature = "server")]
mod server;

pub use codec::{
    decimate_membrane, encode_message, is_sampled, Channel, ControlMessage, LineDecoder,
    MembraneSample, PopulationInfo, RateSample, TelemetryFrame, MAX_MEMBRANE_NEURONS,
};
pub use hub::{Hub, HubConfig, SessionHandle, SessionQueue};
#[cfg(feature = "server")]
pub use server::{ServeError, Server, ServerConfig};
