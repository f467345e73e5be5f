//! Declarative network description and its compilation into a flat,
//! deterministic topology.

use std::collections::HashSet;
use std::fmt;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::models::{InputSpec, IzhParams, LifParams, SynapseParams};

/// `params` may be omitted, giving the model's defaults.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "model", content = "params", rename_all = "lowercase")]
pub enum ModelParams {
    Lif(LifParams),
    Izhikevich(IzhParams),
}

impl<'de> Deserialize<'de> for ModelParams {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(rename_all = "lowercase")]
        enum Name {
            Lif,
            Izhikevich,
        }
        #[derive(Deserialize)]
        struct Raw {
            model: Name,
            #[serde(default)]
            params: Option<serde_json::Value>,
        }
        use serde::de::Error;
        let raw = Raw::deserialize(d)?;
        let params = raw
            .params
            .unwrap_or_else(|| serde_json::Value::Object(Default::default()));
        match raw.model {
            Name::Lif => serde_json::from_value(params).map(ModelParams::Lif),
            Name::Izhikevich => serde_json::from_value(params).map(ModelParams::Izhikevich),
        }
        .map_err(D::Error::custom)
    }
}

impl ModelParams {
    pub fn model_name(&self) -> &'static str {
        match self {
            ModelParams::Lif(_) => "lif",
            ModelParams::Izhikevich(_) => "izhikevich",
        }
    }

    pub fn violations(&self) -> Vec<String> {
        match self {
            ModelParams::Lif(p) => p.violations(),
            ModelParams::Izhikevich(p) => p.violations(),
        }
    }

    pub fn with_field(&self, name: &str, value: f64) -> Option<Self> {
        match self {
            ModelParams::Lif(p) => p.with_field(name, value).map(ModelParams::Lif),
            ModelParams::Izhikevich(p) => p.with_field(name, value).map(ModelParams::Izhikevich),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationSpec {
    pub name: String,
    pub size: u32,
    #[serde(flatten)]
    pub model: ModelParams,
    #[serde(default)]
    pub synapse: SynapseParams,
    #[serde(default)]
    pub input: InputSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ConnectionRule {
    /// Every source to every target. Within one population the diagonal
    /// (self-connections) is skipped.
    AllToAll,
    /// Each candidate pair independently with probability `p`; diagonal
    /// skipped as for all-to-all.
    Probability { p: f64 },
    /// Edges given as population-local indices.
    Explicit { edges: Vec<ExplicitEdge> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplicitEdge {
    pub src: u32,
    pub dst: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delay: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WeightSpec {
    Fixed(f64),
    Uniform { min: f64, max: f64 },
}

impl Default for WeightSpec {
    fn default() -> Self {
        WeightSpec::Fixed(1.0)
    }
}

fn default_delay() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConnectionSpec {
    pub src: String,
    pub dst: String,
    pub rule: ConnectionRule,
    #[serde(default)]
    pub weight: WeightSpec,
    /// Ticks, at least 1.
    #[serde(default = "default_delay")]
    pub delay: u32,
}

/// A change of a population's external input taking effect at the
/// boundary before `from_tick`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputChange {
    pub population: String,
    pub from_tick: u64,
    pub input: InputSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// Step, ms.
    pub dt: f64,
    #[serde(default)]
    pub seed: u64,
    pub populations: Vec<PopulationSpec>,
    #[serde(default)]
    pub connections: Vec<ConnectionSpec>,
    /// Offline input schedule.
    #[serde(default)]
    pub inputs: Vec<InputChange>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub location: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.location, self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid network config: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
pub struct ValidationError(pub Vec<Violation>);

/// Every invariant violation in `config`; empty when it can be built.
pub fn validate_config(config: &NetworkConfig) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |location: String, message: String| out.push(Violation { location, message });

    if !(config.dt > 0.0 && config.dt.is_finite()) {
        push("dt".into(), "dt must be > 0".into());
    }
    if config.populations.is_empty() {
        push(
            "populations".into(),
            "at least one population required".into(),
        );
    }

    let mut names = HashSet::new();
    let mut total: u64 = 0;
    for (i, pop) in config.populations.iter().enumerate() {
        let loc = format!("populations[{i}] ({})", pop.name);
        if pop.size < 1 {
            push(loc.clone(), "size must be >= 1".into());
        }
        if !names.insert(pop.name.as_str()) {
            push(
                loc.clone(),
                format!("duplicate population name {}", pop.name),
            );
        }
        for m in pop.model.violations() {
            push(format!("{loc}.params"), m);
        }
        for m in pop.synapse.violations() {
            push(format!("{loc}.synapse"), m);
        }
        for m in pop.input.violations() {
            push(format!("{loc}.input"), m);
        }
        total += u64::from(pop.size);
    }
    if total > u64::from(u32::MAX) {
        push(
            "populations".into(),
            "total neuron count exceeds 2^32 - 1".into(),
        );
    }

    let size_of = |name: &str| {
        config
            .populations
            .iter()
            .find(|p| p.name == name)
            .map(|p| p.size)
    };

    for (i, conn) in config.connections.iter().enumerate() {
        let loc = format!("connections[{i}] ({}->{})", conn.src, conn.dst);
        let src = size_of(&conn.src);
        let dst = size_of(&conn.dst);
        if src.is_none() {
            push(loc.clone(), format!("unknown population {}", conn.src));
        }
        if dst.is_none() && conn.dst != conn.src {
            push(loc.clone(), format!("unknown population {}", conn.dst));
        }
        if conn.delay < 1 {
            push(loc.clone(), "delay must be >= 1".into());
        }
        match conn.weight {
            WeightSpec::Fixed(w) if !w.is_finite() => {
                push(loc.clone(), "weight must be finite".into())
            }
            WeightSpec::Uniform { min, max }
                if !(min.is_finite() && max.is_finite() && min <= max) =>
            {
                push(loc.clone(), "uniform weight needs finite min <= max".into())
            }
            _ => {}
        }
        match &conn.rule {
            ConnectionRule::AllToAll => {}
            ConnectionRule::Probability { p } => {
                if !(0.0..=1.0).contains(p) {
                    push(loc.clone(), "p must be in [0, 1]".into());
                }
            }
            ConnectionRule::Explicit { edges } => {
                for (k, e) in edges.iter().enumerate() {
                    if let Some(n) = src {
                        if e.src >= n {
                            push(
                                format!("{loc}.edges[{k}]"),
                                format!("src {} out of range", e.src),
                            );
                        }
                    }
                    if let Some(n) = dst {
                        if e.dst >= n {
                            push(
                                format!("{loc}.edges[{k}]"),
                                format!("dst {} out of range", e.dst),
                            );
                        }
                    }
                    if e.delay == Some(0) {
                        push(format!("{loc}.edges[{k}]"), "delay must be >= 1".into());
                    }
                    if matches!(e.weight, Some(w) if !w.is_finite()) {
                        push(format!("{loc}.edges[{k}]"), "weight must be finite".into());
                    }
                }
            }
        }
    }

    for (i, change) in config.inputs.iter().enumerate() {
        let loc = format!("inputs[{i}] ({})", change.population);
        if size_of(&change.population).is_none() {
            push(
                loc.clone(),
                format!("unknown population {}", change.population),
            );
        }
        for m in change.input.violations() {
            push(loc.clone(), m);
        }
    }
    out
}

/// Outgoing synapse, stored on the source neuron.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub target: u32,
    pub delay: u32,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuiltPopulation {
    pub name: String,
    pub range: Range<u32>,
    pub model: ModelParams,
    pub synapse: SynapseParams,
    pub input: InputSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduledInput {
    pub tick: u64,
    pub population: usize,
    pub input: InputSpec,
}

/// Immutable compiled topology. Neurons are numbered by concatenating
/// populations in declaration order.
#[derive(Debug, Clone, PartialEq)]
pub struct BuiltNetwork {
    pub dt: f64,
    pub seed: u64,
    pub populations: Vec<BuiltPopulation>,
    neuron_pop: Vec<u32>,
    offsets: Vec<usize>,
    edges: Vec<Edge>,
    pub schedule: Vec<ScheduledInput>,
    pub max_delay: u32,
}

impl BuiltNetwork {
    pub fn neuron_count(&self) -> u32 {
        self.neuron_pop.len() as u32
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn population_of(&self, neuron: u32) -> usize {
        self.neuron_pop[neuron as usize] as usize
    }

    pub fn population_index(&self, name: &str) -> Option<usize> {
        self.populations.iter().position(|p| p.name == name)
    }

    /// Outgoing edges of `neuron`, ascending by (target, delay).
    pub fn edges_from(&self, neuron: u32) -> &[Edge] {
        let n = neuron as usize;
        &self.edges[self.offsets[n]..self.offsets[n + 1]]
    }

    /// Canonical little-endian encoding of the whole topology.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.edges.len() * 16);
        out.extend_from_slice(&self.dt.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.populations.len() as u64).to_le_bytes());
        for p in &self.populations {
            out.extend_from_slice(&(p.name.len() as u64).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.extend_from_slice(&p.range.start.to_le_bytes());
            out.extend_from_slice(&p.range.end.to_le_bytes());
            // serde_json output is deterministic for these plain records
            for blob in [
                serde_json::to_vec(&p.model),
                serde_json::to_vec(&p.synapse),
                serde_json::to_vec(&p.input),
            ] {
                let blob = blob.expect("plain records serialize");
                out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
                out.extend_from_slice(&blob);
            }
        }
        out.extend_from_slice(&(self.schedule.len() as u64).to_le_bytes());
        for s in &self.schedule {
            out.extend_from_slice(&s.tick.to_le_bytes());
            out.extend_from_slice(&(s.population as u64).to_le_bytes());
            out.extend_from_slice(&serde_json::to_vec(&s.input).expect("plain record"));
        }
        out.extend_from_slice(&(self.offsets.len() as u64).to_le_bytes());
        for &o in &self.offsets {
            out.extend_from_slice(&(o as u64).to_le_bytes());
        }
        for e in &self.edges {
            out.extend_from_slice(&e.target.to_le_bytes());
            out.extend_from_slice(&e.delay.to_le_bytes());
            out.extend_from_slice(&e.weight.to_le_bytes());
        }
        out
    }

    pub fn fingerprint(&self) -> [u8; 32] {
        Sha256::digest(self.to_bytes()).into()
    }
}

fn connection_rng(seed: u64, conn: &ConnectionSpec) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(b"connection");
    h.update(seed.to_le_bytes());
    h.update(conn.src.as_bytes());
    h.update([0]);
    h.update(conn.dst.as_bytes());
    h.update([0]);
    h.update(serde_json::to_vec(&(&conn.rule, &conn.weight, conn.delay)).expect("plain record"));
    ChaCha8Rng::from_seed(h.finalize().into())
}

fn draw_weight(spec: WeightSpec, rng: &mut ChaCha8Rng) -> f64 {
    match spec {
        WeightSpec::Fixed(w) => w,
        WeightSpec::Uniform { min, max } => min + (max - min) * rng.random::<f64>(),
    }
}

/// Compile a validated config.
///
/// Each connection draws from its own generator keyed by the seed and the
/// connection's content, iterating sources then targets in ascending
/// order, so the result does not depend on the declaration order of
/// connections.
pub fn build_network(config: &NetworkConfig) -> Result<BuiltNetwork, ValidationError> {
    let violations = validate_config(config);
    if !violations.is_empty() {
        return Err(ValidationError(violations));
    }

    let mut populations = Vec::with_capacity(config.populations.len());
    let mut neuron_pop = Vec::new();
    let mut next = 0u32;
    for (i, p) in config.populations.iter().enumerate() {
        let range = next..next + p.size;
        next = range.end;
        neuron_pop.extend(std::iter::repeat_n(i as u32, p.size as usize));
        populations.push(BuiltPopulation {
            name: p.name.clone(),
            range,
            model: p.model,
            synapse: p.synapse,
            input: p.input,
        });
    }
    let range_of = |name: &str| {
        populations
            .iter()
            .find(|p| p.name == name)
            .map(|p| p.range.clone())
            .expect("validated")
    };

    let mut per_source: Vec<Vec<Edge>> = vec![Vec::new(); neuron_pop.len()];
    for conn in &config.connections {
        let src = range_of(&conn.src);
        let dst = range_of(&conn.dst);
        let same = conn.src == conn.dst;
        let mut rng = connection_rng(config.seed, conn);
        match &conn.rule {
            ConnectionRule::AllToAll => {
                for s in src.clone() {
                    for t in dst.clone() {
                        if same && s == t {
                            continue;
                        }
                        let weight = draw_weight(conn.weight, &mut rng);
                        per_source[s as usize].push(Edge {
                            target: t,
                            delay: conn.delay,
                            weight,
                        });
                    }
                }
            }
            ConnectionRule::Probability { p } => {
                for s in src.clone() {
                    for t in dst.clone() {
                        if same && s == t {
                            continue;
                        }
                        if rng.random::<f64>() < *p {
                            let weight = draw_weight(conn.weight, &mut rng);
                            per_source[s as usize].push(Edge {
                                target: t,
                                delay: conn.delay,
                                weight,
                            });
                        }
                    }
                }
            }
            ConnectionRule::Explicit { edges } => {
                for e in edges {
                    let weight = match e.weight {
                        Some(w) => w,
                        None => draw_weight(conn.weight, &mut rng),
                    };
                    per_source[(src.start + e.src) as usize].push(Edge {
                        target: dst.start + e.dst,
                        delay: e.delay.unwrap_or(conn.delay),
                        weight,
                    });
                }
            }
        }
    }

    let total_edges: usize = per_source.iter().map(Vec::len).sum();
    let mut offsets = Vec::with_capacity(per_source.len() + 1);
    let mut edges = Vec::with_capacity(total_edges);
    let mut max_delay = 1;
    offsets.push(0);
    for mut list in per_source {
        list.sort_by(|a, b| {
            a.target
                .cmp(&b.target)
                .then(a.delay.cmp(&b.delay))
                .then(a.weight.total_cmp(&b.weight))
        });
        for e in &list {
            max_delay = max_delay.max(e.delay);
        }
        edges.extend(list);
        offsets.push(edges.len());
    }

    let mut schedule: Vec<ScheduledInput> = config
        .inputs
        .iter()
        .map(|c| ScheduledInput {
            tick: c.from_tick,
            population: populations
                .iter()
                .position(|p| p.name == c.population)
                .expect("validated"),
            input: c.input,
        })
        .collect();
    schedule.sort_by_key(|s| s.tick);

    Ok(BuiltNetwork {
        dt: config.dt,
        seed: config.seed,
        populations,
        neuron_pop,
        offsets,
        edges,
        schedule,
        max_delay,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lif_pop(name: &str, size: u32) -> PopulationSpec {
        PopulationSpec {
            name: name.into(),
            size,
            model: ModelParams::Lif(LifParams::default()),
            synapse: SynapseParams::default(),
            input: InputSpec::default(),
        }
    }

    fn two_pop(connections: Vec<ConnectionSpec>) -> NetworkConfig {
        NetworkConfig {
            dt: 0.1,
            seed: 7,
            populations: vec![lif_pop("a", 100), lif_pop("b", 100)],
            connections,
            inputs: vec![],
        }
    }

    fn prob(src: &str, dst: &str, p: f64) -> ConnectionSpec {
        ConnectionSpec {
            src: src.into(),
            dst: dst.into(),
            rule: ConnectionRule::Probability { p },
            weight: WeightSpec::Uniform { min: 0.1, max: 0.5 },
            delay: 2,
        }
    }

    #[test]
    fn well_formed_config_validates() {
        assert!(validate_config(&two_pop(vec![prob("a", "b", 0.1)])).is_empty());
    }

    #[test]
    fn zero_delay_is_one_violation() {
        let mut c = prob("a", "b", 0.1);
        c.delay = 0;
        let v = validate_config(&two_pop(vec![c]));
        assert_eq!(v.len(), 1);
        assert!(v[0].location.starts_with("connections[0]"));
        assert!(v[0].message.contains("delay"));
    }

    #[test]
    fn unknown_population_named() {
        let v = validate_config(&two_pop(vec![prob("a", "X", 0.1)]));
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].message, "unknown population X");
    }

    #[test]
    fn other_violations() {
        let mut cfg = two_pop(vec![prob("a", "b", 1.5)]);
        cfg.dt = 0.0;
        cfg.populations[1].name = "a".into();
        if let ModelParams::Lif(p) = &mut cfg.populations[0].model {
            p.c_m = -1.0;
        }
        let msgs: Vec<String> = validate_config(&cfg)
            .iter()
            .map(|v| v.message.clone())
            .collect();
        assert!(msgs.contains(&"dt must be > 0".to_string()));
        assert!(msgs.contains(&"duplicate population name a".to_string()));
        assert!(msgs.contains(&"c_m must be > 0".to_string()));
        assert!(msgs.contains(&"p must be in [0, 1]".to_string()));
        assert!(build_network(&cfg).is_err());
    }

    #[test]
    fn no_connections_no_edges() {
        let net = build_network(&two_pop(vec![])).unwrap();
        assert_eq!(net.neuron_count(), 200);
        assert_eq!(net.edge_count(), 0);
        assert!((0..200).all(|n| net.edges_from(n).is_empty()));
    }

    #[test]
    fn explicit_edge_kept_exactly() {
        let conn = ConnectionSpec {
            src: "a".into(),
            dst: "a".into(),
            rule: ConnectionRule::Explicit {
                edges: vec![ExplicitEdge {
                    src: 0,
                    dst: 1,
                    weight: Some(0.5),
                    delay: Some(2),
                }],
            },
            weight: WeightSpec::default(),
            delay: 1,
        };
        let net = build_network(&two_pop(vec![conn])).unwrap();
        assert_eq!(net.edge_count(), 1);
        assert_eq!(
            net.edges_from(0),
            &[Edge {
                target: 1,
                delay: 2,
                weight: 0.5
            }]
        );
    }

    #[test]
    fn all_to_all_skips_diagonal_within_population() {
        let conn = ConnectionSpec {
            src: "a".into(),
            dst: "a".into(),
            rule: ConnectionRule::AllToAll,
            weight: WeightSpec::Fixed(0.2),
            delay: 1,
        };
        let mut cfg = two_pop(vec![conn.clone()]);
        cfg.populations[0].size = 5;
        let net = build_network(&cfg).unwrap();
        assert_eq!(net.edge_count(), 20);
        let cross = ConnectionSpec {
            dst: "b".into(),
            ..conn
        };
        let mut cfg = two_pop(vec![cross]);
        cfg.populations[0].size = 5;
        assert_eq!(build_network(&cfg).unwrap().edge_count(), 500);
    }

    #[test]
    fn probability_edge_count_within_binomial_bound() {
        let net = build_network(&two_pop(vec![prob("a", "b", 0.1)])).unwrap();
        let n = 10_000.0;
        let mean = n * 0.1;
        let sigma = (n * 0.1 * 0.9f64).sqrt();
        let count = net.edge_count() as f64;
        assert!((count - mean).abs() <= 3.0 * sigma, "{count}");
        // golden count recorded from the first seeded run
        assert_eq!(net.edge_count(), GOLDEN_P01_EDGES, "golden");
    }

    const GOLDEN_P01_EDGES: usize = 1013;

    #[test]
    fn build_is_deterministic_and_sorted() {
        let cfg = two_pop(vec![
            prob("a", "b", 0.1),
            prob("b", "a", 0.2),
            prob("a", "a", 0.05),
        ]);
        let one = build_network(&cfg).unwrap();
        let two = build_network(&cfg).unwrap();
        assert_eq!(one.to_bytes(), two.to_bytes());
        for n in 0..one.neuron_count() {
            let edges = one.edges_from(n);
            assert!(edges
                .windows(2)
                .all(|w| (w[0].target, w[0].delay) <= (w[1].target, w[1].delay)));
            assert!(edges.iter().all(|e| e.target < one.neuron_count()));
        }
    }

    #[test]
    fn connection_order_does_not_change_edges() {
        let a = prob("a", "b", 0.1);
        let b = prob("b", "a", 0.2);
        let one = build_network(&two_pop(vec![a.clone(), b.clone()])).unwrap();
        let two = build_network(&two_pop(vec![b, a])).unwrap();
        assert_eq!(one.to_bytes(), two.to_bytes());
    }

    #[test]
    fn population_ranges_cover_index_space() {
        let mut cfg = two_pop(vec![]);
        cfg.populations.push(lif_pop("c", 13));
        let net = build_network(&cfg).unwrap();
        let mut next = 0;
        for p in &net.populations {
            assert_eq!(p.range.start, next);
            next = p.range.end;
        }
        assert_eq!(next, net.neuron_count());
        assert_eq!(net.population_of(199), 1);
        assert_eq!(net.population_of(200), 2);
    }

    #[test]
    fn config_parses_from_toml() {
        let text = r#"
            dt = 0.1
            seed = 3
            [[populations]]
            name = "exc"
            size = 4
            model = "lif"
            params = { v_thresh = -52.0 }
            input = { kind = "poisson-spikes", rate = 50.0, amplitude = 0.5 }
            [[populations]]
            name = "inh"
            size = 2
            model = "izhikevich"
            params = { a = 0.1, d = 2.0 }
            [[connections]]
            src = "exc"
            dst = "inh"
            rule = { kind = "probability", p = 0.5 }
            weight = { min = 0.0, max = 1.0 }
            delay = 3
        "#;
        let cfg: NetworkConfig = toml::from_str(text).unwrap();
        assert_eq!(cfg.populations[0].model.model_name(), "lif");
        match cfg.populations[1].model {
            ModelParams::Izhikevich(p) => {
                assert_eq!(p.a, 0.1);
                assert_eq!(p.b, 0.2);
            }
            _ => panic!("wrong model"),
        }
        assert!(validate_config(&cfg).is_empty());
    }
}
