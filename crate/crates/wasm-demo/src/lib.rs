//! Browser bindings: three small experiments computed by the simulation
//! core and drawn by `www/main.js`.

use std::sync::Arc;

use wasm_bindgen::prelude::*;

use spikesteer_core::engine::World;
use spikesteer_core::models::{
    lif_analytic_isi, lif_step, InputSpec, LifParams, LifState, SynapseParams,
};
use spikesteer_core::network::{
    ConnectionRule, ConnectionSpec, ModelParams, PopulationSpec, WeightSpec,
};
use spikesteer_core::{build_network, NetworkConfig};

fn lif(v_thresh: f64, r_m: f64, c_m: f64, t_refrac: f64) -> LifParams {
    LifParams {
        v_thresh,
        r_m,
        c_m,
        t_refrac,
        ..LifParams::default()
    }
}

fn single(name: String, size: u32, model: ModelParams, input: InputSpec) -> PopulationSpec {
    PopulationSpec {
        name,
        size,
        model,
        synapse: SynapseParams::default(),
        input,
    }
}

/// Membrane potential of one LIF cell under constant current, one value
/// per tick.
pub fn membrane_trace(
    current: f64,
    params: &LifParams,
    dt: f64,
    duration_ms: f64,
) -> Result<Vec<f64>, String> {
    if let Some(v) = params.violations().into_iter().next() {
        return Err(v);
    }
    if !(dt > 0.0 && duration_ms > 0.0) {
        return Err("dt and duration must be > 0".into());
    }
    let ticks = (duration_ms / dt).round() as usize;
    let mut state = LifState::at_rest(params);
    let mut out = Vec::with_capacity(ticks);
    for _ in 0..ticks {
        let (next, spiked) = lif_step(state, params, current, dt).map_err(|e| e.to_string())?;
        // draw the spike as a spike
        out.push(if spiked { 0.0 } else { next.v });
        state = next;
    }
    Ok(out)
}

/// Rate of `points` cells driven at currents `i_max * k / (points - 1)`,
/// simulated together for one second. Returns `[current, simulated_hz,
/// analytic_hz]` triples, flattened; analytic is 0 below rheobase.
pub fn rate_curve(
    i_max: f64,
    points: u32,
    params: &LifParams,
    dt: f64,
) -> Result<Vec<f64>, String> {
    if !(2..=200).contains(&points) {
        return Err("points must be in 2..=200".into());
    }
    let currents: Vec<f64> = (0..points)
        .map(|k| i_max * k as f64 / (points - 1) as f64)
        .collect();
    let config = NetworkConfig {
        dt,
        seed: 0,
        populations: currents
            .iter()
            .enumerate()
            .map(|(k, &i)| {
                single(
                    format!("i{k}"),
                    1,
                    ModelParams::Lif(*params),
                    InputSpec::constant(i),
                )
            })
            .collect(),
        connections: vec![],
        inputs: vec![],
    };
    let net = build_network(&config).map_err(|e| e.to_string())?;
    let ticks = (1000.0 / dt).round() as u64;
    let mut counts = vec![0u32; points as usize];
    let mut world = World::new(Arc::new(net), 1);
    for _ in 0..ticks {
        for n in world.step_tick().map_err(|e| e.to_string())? {
            counts[n as usize] += 1;
        }
    }
    let seconds = ticks as f64 * dt / 1000.0;
    Ok(currents
        .iter()
        .zip(&counts)
        .flat_map(|(&i, &c)| {
            let analytic = lif_analytic_isi(params, i).map_or(0.0, |t| 1000.0 / t);
            [i, c as f64 / seconds, analytic]
        })
        .collect())
}

/// Spikes of a random excitatory/inhibitory network under Poisson drive,
/// as flattened `[tick, neuron]` pairs. Excitatory neurons come first.
pub fn network_raster(
    exc: u32,
    inh: u32,
    p: f64,
    drive_hz: f64,
    seed: u64,
    ticks: u64,
) -> Result<Vec<u32>, String> {
    if exc + inh > 2000 || ticks > 20_000 {
        return Err("at most 2000 neurons and 20000 ticks".into());
    }
    let drive = InputSpec::poisson(drive_hz, 1.5);
    let rule = ConnectionRule::Probability { p };
    let connect = |src: &str, dst: &str, w: f64, delay: u32| ConnectionSpec {
        src: src.into(),
        dst: dst.into(),
        rule: rule.clone(),
        weight: WeightSpec::Uniform {
            min: w.min(0.0),
            max: w.max(0.0),
        },
        delay,
    };
    let config = NetworkConfig {
        dt: 0.1,
        seed,
        populations: vec![
            single(
                "exc".into(),
                exc,
                ModelParams::Lif(LifParams::default()),
                drive,
            ),
            single(
                "inh".into(),
                inh,
                ModelParams::Lif(LifParams::default()),
                drive,
            ),
        ],
        connections: vec![
            connect("exc", "exc", 0.5, 2),
            connect("exc", "inh", 0.8, 1),
            connect("inh", "exc", -2.0, 1),
        ],
        inputs: vec![],
    };
    let net = build_network(&config).map_err(|e| e.to_string())?;
    let mut world = World::new(Arc::new(net), 1);
    let mut out = Vec::new();
    for _ in 0..ticks {
        let tick = world.tick() as u32;
        for n in world.step_tick().map_err(|e| e.to_string())? {
            out.extend([tick, n]);
        }
    }
    Ok(out)
}

#[wasm_bindgen]
pub fn lif_trace(
    current: f64,
    v_thresh: f64,
    r_m: f64,
    c_m: f64,
    t_refrac: f64,
    dt: f64,
    duration_ms: f64,
) -> Result<Vec<f64>, JsValue> {
    membrane_trace(current, &lif(v_thresh, r_m, c_m, t_refrac), dt, duration_ms)
        .map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn fi_curve(
    i_max: f64,
    points: u32,
    v_thresh: f64,
    r_m: f64,
    c_m: f64,
    t_refrac: f64,
    dt: f64,
) -> Result<Vec<f64>, JsValue> {
    rate_curve(i_max, points, &lif(v_thresh, r_m, c_m, t_refrac), dt)
        .map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn raster(
    exc: u32,
    inh: u32,
    p: f64,
    drive_hz: f64,
    seed: u32,
    ticks: u32,
) -> Result<Vec<u32>, JsValue> {
    network_raster(exc, inh, p, drive_hz, seed as u64, ticks as u64)
        .map_err(|e| JsValue::from_str(&e))
}
