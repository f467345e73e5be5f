//! Steered run loop: commands in, telemetry out.

use std::sync::mpsc::{Receiver, RecvTimeoutError, TryRecvError};
use std::sync::Arc;
use std::time::{Duration, Instant};

use super::{
    Boundary, CommandOutcome, EngineConfig, EngineError, SimCommand, SpikeRecord, TickHooks, World,
};
use crate::network::BuiltNetwork;

/// Where steering commands come from.
pub trait CommandSource {
    /// Commands to apply at the boundary before `tick`. With `block`, wait
    /// until at least one is available. `None` means the source is gone.
    fn poll(&mut self, tick: u64, block: bool) -> Option<Vec<SimCommand>>;
}

/// An unsteered run.
pub struct NoCommands;

impl CommandSource for NoCommands {
    fn poll(&mut self, _tick: u64, _block: bool) -> Option<Vec<SimCommand>> {
        None
    }
}

impl CommandSource for Receiver<SimCommand> {
    fn poll(&mut self, _tick: u64, block: bool) -> Option<Vec<SimCommand>> {
        let mut out = Vec::new();
        if block {
            // wake periodically so a dropped sender is noticed
            loop {
                match self.recv_timeout(Duration::from_millis(200)) {
                    Ok(c) => {
                        out.push(c);
                        break;
                    }
                    Err(RecvTimeoutError::Timeout) => continue,
                    Err(RecvTimeoutError::Disconnected) => return None,
                }
            }
        }
        loop {
            match self.try_recv() {
                Ok(c) => out.push(c),
                Err(TryRecvError::Empty) => return Some(out),
                Err(TryRecvError::Disconnected) if !out.is_empty() => return Some(out),
                Err(TryRecvError::Disconnected) => return None,
            }
        }
    }
}

/// Commands released at fixed boundaries, keyed by tick.
pub struct ScheduledCommands {
    items: Vec<(u64, SimCommand)>,
    next: usize,
}

impl ScheduledCommands {
    pub fn new(mut items: Vec<(u64, SimCommand)>) -> Self {
        items.sort_by_key(|(t, c)| (*t, c.id));
        Self { items, next: 0 }
    }
}

impl CommandSource for ScheduledCommands {
    fn poll(&mut self, tick: u64, block: bool) -> Option<Vec<SimCommand>> {
        if self.next >= self.items.len() {
            return None;
        }
        let mut out = Vec::new();
        while let Some((t, c)) = self.items.get(self.next) {
            if *t > tick && !(block && out.is_empty()) {
                break;
            }
            out.push(c.clone());
            self.next += 1;
        }
        Some(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunState {
    Running,
    Paused,
    Finished,
    Stopped,
    Aborted,
}

impl RunState {
    pub fn as_str(&self) -> &'static str {
        match self {
            RunState::Running => "running",
            RunState::Paused => "paused",
            RunState::Finished => "finished",
            RunState::Stopped => "stopped",
            RunState::Aborted => "aborted",
        }
    }
}

/// One completed tick as seen by a sink.
pub struct TickReport<'a> {
    pub tick: u64,
    /// Neurons that spiked, ascending.
    pub spikes: &'a [u32],
    /// All membrane potentials, present only on decimated ticks the sink
    /// asked for.
    pub membrane: Option<&'a [f64]>,
}

pub trait TelemetrySink {
    fn wants_membrane(&self, _tick: u64) -> bool {
        false
    }
    fn on_tick(&mut self, _report: &TickReport<'_>) {}
    fn on_outcome(&mut self, _outcome: &CommandOutcome) {}
    fn on_state(&mut self, _tick: u64, _state: RunState) {}
    fn on_finish(&mut self, _result: &Result<RunSummary, EngineError>) {}
}

impl TelemetrySink for () {}

/// Keeps every spike and outcome in memory.
#[derive(Debug, Default)]
pub struct SpikeRecorder {
    pub spikes: Vec<SpikeRecord>,
    pub outcomes: Vec<CommandOutcome>,
    pub states: Vec<(u64, RunState)>,
}

impl TelemetrySink for SpikeRecorder {
    fn on_tick(&mut self, r: &TickReport<'_>) {
        self.spikes
            .extend(r.spikes.iter().map(|&neuron| SpikeRecord {
                tick: r.tick,
                neuron,
            }));
    }
    fn on_outcome(&mut self, o: &CommandOutcome) {
        self.outcomes.push(o.clone());
    }
    fn on_state(&mut self, tick: u64, state: RunState) {
        self.states.push((tick, state));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PopulationRate {
    pub name: String,
    pub spikes: u64,
    /// Spikes per neuron per simulated second over the run.
    pub rate_hz: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub start_tick: u64,
    pub end_tick: u64,
    pub total_spikes: u64,
    pub populations: Vec<PopulationRate>,
    pub wall_time_s: f64,
    /// Ended by a stop command rather than reaching `max_ticks`.
    pub stopped: bool,
}

impl RunSummary {
    pub fn ticks(&self) -> u64 {
        self.end_tick - self.start_tick
    }
}

struct RunLoop<'a> {
    cfg: &'a EngineConfig,
    source: &'a mut dyn CommandSource,
    sink: &'a mut dyn TelemetrySink,
    connected: bool,
    reported: Option<RunState>,
    counts: Vec<u64>,
    membrane: Vec<f64>,
    stopped: bool,
}

impl RunLoop<'_> {
    fn report_state(&mut self, tick: u64, paused: bool) {
        let state = if paused {
            RunState::Paused
        } else {
            RunState::Running
        };
        if self.reported != Some(state) {
            self.reported = Some(state);
            self.sink.on_state(tick, state);
        }
    }
}

impl TickHooks for RunLoop<'_> {
    fn boundary(&mut self, b: &mut Boundary<'_>) -> bool {
        let max = self.cfg.max_ticks;
        loop {
            self.report_state(b.tick(), b.is_paused());
            let block = b.is_paused() && self.connected && !b.has_pending() && b.tick() < max;
            let cmds = if self.connected {
                self.source.poll(b.tick(), block).unwrap_or_else(|| {
                    self.connected = false;
                    Vec::new()
                })
            } else {
                Vec::new()
            };
            if !cmds.is_empty() || b.has_pending() {
                for o in b.apply_commands(cmds) {
                    self.sink.on_outcome(&o);
                }
            }
            if b.stop_requested() {
                self.stopped = true;
                return false;
            }
            if b.tick() >= max {
                return false;
            }
            if b.is_paused() {
                if self.connected {
                    continue;
                }
                // nobody left to resume us
                b.set_paused(false);
            }
            self.report_state(b.tick(), false);
            return true;
        }
    }

    fn after_tick(&mut self, tick: u64, spikes: &[u32], b: &Boundary<'_>) {
        let net = b.network();
        for &n in spikes {
            self.counts[net.population_of(n)] += 1;
        }
        let due =
            tick.is_multiple_of(self.cfg.telemetry_decimation) && self.sink.wants_membrane(tick);
        if due {
            self.membrane = b.membrane_all();
        }
        self.sink.on_tick(&TickReport {
            tick,
            spikes,
            membrane: due.then_some(self.membrane.as_slice()),
        });
    }
}

/// Run a fresh world for `cfg.max_ticks` ticks.
pub fn run(
    net: Arc<BuiltNetwork>,
    cfg: &EngineConfig,
    source: &mut dyn CommandSource,
    sink: &mut dyn TelemetrySink,
) -> Result<RunSummary, EngineError> {
    if let Some(v) = cfg.violations().into_iter().next() {
        return Err(EngineError::Config(v));
    }
    let mut world = World::new(net, cfg.workers);
    run_world(&mut world, cfg, source, sink)
}

/// Drive an existing world (fresh, restored, or paused) until it reaches
/// the absolute tick `cfg.max_ticks` or a stop command arrives.
pub fn run_world(
    world: &mut World,
    cfg: &EngineConfig,
    source: &mut dyn CommandSource,
    sink: &mut dyn TelemetrySink,
) -> Result<RunSummary, EngineError> {
    if let Some(v) = cfg.violations().into_iter().next() {
        return Err(EngineError::Config(v));
    }
    let started = Instant::now();
    let start_tick = world.tick();
    let npops = world.network().populations.len();
    let mut lp = RunLoop {
        cfg,
        source,
        sink,
        connected: true,
        reported: None,
        counts: vec![0; npops],
        membrane: Vec::new(),
        stopped: false,
    };
    let driven = world.drive(&mut lp);
    let RunLoop {
        sink,
        counts,
        stopped,
        ..
    } = lp;
    let result = driven.map(|()| {
        let net = world.network();
        let seconds = (world.tick() - start_tick) as f64 * net.dt / 1000.0;
        RunSummary {
            start_tick,
            end_tick: world.tick(),
            total_spikes: counts.iter().sum(),
            populations: net
                .populations
                .iter()
                .zip(&counts)
                .map(|(p, &spikes)| PopulationRate {
                    name: p.name.clone(),
                    spikes,
                    rate_hz: if seconds > 0.0 {
                        spikes as f64 / p.range.len() as f64 / seconds
                    } else {
                        0.0
                    },
                })
                .collect(),
            wall_time_s: started.elapsed().as_secs_f64(),
            stopped,
        }
    });
    let final_state = match &result {
        Ok(s) if s.stopped => RunState::Stopped,
        Ok(_) => RunState::Finished,
        Err(_) => RunState::Aborted,
    };
    sink.on_state(world.tick(), final_state);
    sink.on_finish(&result);
    result
}
