use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::models::InputSpec;

/// Which neurons a command addresses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Target {
    Population(String),
    /// Half-open global neuron index range.
    Range {
        start: u32,
        end: u32,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CommandKind {
    /// Replace one model parameter, or `tau_syn` of the synapse.
    SetParam {
        name: String,
        value: f64,
    },
    SetInput {
        input: InputSpec,
    },
    Pause,
    /// Resume; with `ticks`, pause again after that many ticks.
    Resume {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        ticks: Option<u64>,
    },
    SnapshotRequest {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        path: Option<String>,
    },
    Stop,
}

/// A steering mutation, applied at the boundary before the next tick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimCommand {
    pub id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<Target>,
    #[serde(flatten)]
    pub kind: CommandKind,
    /// Opaque routing tag for acknowledgements (e.g. a session id).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<u64>,
}

impl SimCommand {
    pub fn new(id: u64, target: Option<Target>, kind: CommandKind) -> Self {
        Self {
            id,
            target,
            kind,
            origin: None,
        }
    }

    pub fn set_param(id: u64, population: &str, name: &str, value: f64) -> Self {
        Self::new(
            id,
            Some(Target::Population(population.into())),
            CommandKind::SetParam {
                name: name.into(),
                value,
            },
        )
    }

    pub fn set_input(id: u64, population: &str, input: InputSpec) -> Self {
        Self::new(
            id,
            Some(Target::Population(population.into())),
            CommandKind::SetInput { input },
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Effect {
    Applied,
    /// Encoded snapshot frame taken at the effective tick.
    Snapshot(Vec<u8>),
}

/// Acknowledgement or rejection of one command.
#[derive(Debug, Clone, PartialEq)]
pub struct CommandOutcome {
    pub id: u64,
    pub origin: Option<u64>,
    /// First tick that runs with the command in effect.
    pub effective_tick: u64,
    pub result: Result<Effect, String>,
}

pub(crate) fn resolve_target(
    target: Option<&Target>,
    net: &crate::network::BuiltNetwork,
) -> Result<Range<u32>, String> {
    match target {
        None => Err("command needs a target".into()),
        Some(Target::Population(name)) => net
            .population_index(name)
            .map(|i| net.populations[i].range.clone())
            .ok_or_else(|| format!("unknown target {name}")),
        Some(Target::Range { start, end }) => {
            if start < end && *end <= net.neuron_count() {
                Ok(*start..*end)
            } else {
                Err(format!("unknown target range {start}..{end}"))
            }
        }
    }
}
