//! Clock-driven multi-core simulation kernel.
//!
//! Neurons are split into contiguous partitions, one per worker. Each tick
//! runs in two phases:
//!
//! * **A** (per partition, parallel): take this tick's delay-slot input,
//!   add the external drive, update synapse and neuron, record spikes.
//! * **B** (per partition, parallel over disjoint targets): walk every
//!   partition's spikes in ascending neuron order and add each outgoing
//!   edge's weight into its target's future delay slot.
//!
//! A target's slot only ever receives contributions in (source ascending,
//! edge order) sequence, whichever worker owns it, so results are
//! bit-identical for any worker count.

mod command;
mod run;
mod snapshot;

use std::ops::Range;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Barrier, Mutex, RwLock};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::models::{
    izh_step, lif_step, poisson_step, syn_decay, InputKind, InputSpec, IzhState, LifState,
    NumericError, SynapseParams,
};
use crate::network::{BuiltNetwork, ModelParams};

pub use command::{CommandKind, CommandOutcome, Effect, SimCommand, Target};
pub use run::{
    run, run_world, CommandSource, NoCommands, PopulationRate, RunState, RunSummary,
    ScheduledCommands, SpikeRecorder, TelemetrySink, TickReport,
};
pub use snapshot::{SnapshotError, SnapshotFrame, SNAPSHOT_VERSION};

#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    pub workers: usize,
    /// Absolute tick at which a run ends.
    pub max_ticks: u64,
    /// Offer membrane samples to sinks every k ticks.
    pub telemetry_decimation: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            workers: 1,
            max_ticks: 1000,
            telemetry_decimation: 1,
        }
    }
}

impl EngineConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.workers < 1 {
            out.push("workers must be >= 1".into());
        }
        if self.telemetry_decimation < 1 {
            out.push("telemetry_decimation must be >= 1".into());
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SpikeRecord {
    pub tick: u64,
    pub neuron: u32,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EngineError {
    #[error("diverged at tick {tick}: neuron {neuron} ({population}): {source}")]
    Diverged {
        tick: u64,
        neuron: u32,
        population: String,
        source: NumericError,
    },
    #[error("invalid engine config: {0}")]
    Config(String),
    #[error(transparent)]
    Snapshot(#[from] SnapshotError),
}

/// Balanced contiguous split of `[0, total)`; earlier ranges get the extra
/// element when the split is uneven.
pub fn partition(total: u32, workers: usize) -> Vec<Range<u32>> {
    let workers = workers.max(1) as u32;
    let base = total / workers;
    let extra = total % workers;
    let mut start = 0;
    (0..workers)
        .map(|w| {
            let len = base + u32::from(w < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Dynamics {
    Lif(LifState),
    Izh(IzhState),
}

impl Dynamics {
    pub(crate) fn membrane(&self) -> f64 {
        match self {
            Dynamics::Lif(s) => s.v,
            Dynamics::Izh(s) => s.v,
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Neuron {
    pub(crate) state: Dynamics,
    pub(crate) params: ModelParams,
    pub(crate) synapse: SynapseParams,
    pub(crate) decay: f64,
    pub(crate) input: InputSpec,
    pub(crate) syn: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Fault {
    neuron: u32,
    error: NumericError,
}

/// State owned by one worker.
#[derive(Debug, Clone)]
pub(crate) struct Partition {
    pub(crate) start: u32,
    pub(crate) neurons: Vec<Neuron>,
    pub(crate) rngs: Vec<ChaCha8Rng>,
    /// `ring[slot * len + local]`: weight sums arriving at that slot's tick.
    pub(crate) ring: Vec<f64>,
    fault: Option<Fault>,
}

impl Partition {
    fn end(&self) -> u32 {
        self.start + self.neurons.len() as u32
    }

    fn phase_a(&mut self, out: &mut Vec<u32>, slot: usize, dt: f64) {
        out.clear();
        let n = self.neurons.len();
        let row = &mut self.ring[slot * n..(slot + 1) * n];
        for (local, (nrn, rng)) in self.neurons.iter_mut().zip(&mut self.rngs).enumerate() {
            let mut arriving = std::mem::take(&mut row[local]);
            let mut external = 0.0;
            match nrn.input.kind {
                InputKind::ConstantCurrent => external = nrn.input.amplitude,
                InputKind::PoissonSpikes => {
                    if poisson_step(&nrn.input, dt, rng) {
                        arriving += nrn.input.amplitude;
                    }
                }
            }
            let stepped = syn_decay(nrn.syn, nrn.decay, arriving).and_then(|syn| {
                nrn.syn = syn;
                let i_in = syn + external;
                match (&mut nrn.state, &nrn.params) {
                    (Dynamics::Lif(s), ModelParams::Lif(p)) => {
                        lif_step(*s, p, i_in, dt).map(|(next, spiked)| {
                            *s = next;
                            spiked
                        })
                    }
                    (Dynamics::Izh(s), ModelParams::Izhikevich(p)) => izh_step(*s, p, i_in, dt)
                        .map(|(next, spiked)| {
                            *s = next;
                            spiked
                        }),
                    _ => unreachable!("model of a neuron never changes"),
                }
            });
            match stepped {
                Ok(true) => out.push(self.start + local as u32),
                Ok(false) => {}
                Err(error) => {
                    self.fault = Some(Fault {
                        neuron: self.start + local as u32,
                        error,
                    });
                    return;
                }
            }
        }
    }

    fn phase_b<'a>(
        &mut self,
        spike_lists: impl Iterator<Item = &'a [u32]>,
        net: &BuiltNetwork,
        tick: u64,
        ring_len: usize,
    ) {
        let (lo, hi) = (self.start, self.end());
        let n = self.neurons.len();
        if n == 0 {
            return;
        }
        for list in spike_lists {
            for &src in list {
                let edges = net.edges_from(src);
                let first = edges.partition_point(|e| e.target < lo);
                for e in &edges[first..] {
                    if e.target >= hi {
                        break;
                    }
                    let slot = ((tick + u64::from(e.delay)) % ring_len as u64) as usize;
                    self.ring[slot * n + (e.target - lo) as usize] += e.weight;
                }
            }
        }
    }
}

/// Mutable run-control state touched only at tick boundaries.
#[derive(Debug, Clone)]
pub(crate) struct Control {
    pub(crate) tick: u64,
    pub(crate) paused: bool,
    pub(crate) stop: bool,
    /// Ticks left before auto-pausing.
    pub(crate) budget: Option<u64>,
    /// Commands received but not yet applied.
    pub(crate) pending: Vec<SimCommand>,
    /// Index of the first schedule entry not yet applied.
    pub(crate) schedule_cursor: usize,
    pub(crate) ring_len: usize,
    pub(crate) rng_seed: [u8; 32],
}

pub(crate) struct Lanes {
    pub(crate) parts: Vec<Mutex<Partition>>,
    spikes: Vec<RwLock<Vec<u32>>>,
}

/// A simulation instance: a built network plus all dynamic state.
pub struct World {
    pub(crate) net: Arc<BuiltNetwork>,
    pub(crate) lanes: Lanes,
    pub(crate) ctrl: Control,
}

pub(crate) fn neuron_rng_seed(seed: u64) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"neuron-rng");
    h.update(seed.to_le_bytes());
    h.finalize().into()
}

pub(crate) fn neuron_rng(seed: &[u8; 32], neuron: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::from_seed(*seed);
    rng.set_stream(u64::from(neuron));
    rng
}

fn lock<T>(m: &Mutex<T>) -> std::sync::MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

impl World {
    /// Fresh world at tick 0: LIF neurons at rest, Izhikevich neurons at
    /// `(c, b*c)`, all synaptic currents zero.
    pub fn new(net: Arc<BuiltNetwork>, workers: usize) -> Self {
        let rng_seed = neuron_rng_seed(net.seed);
        let neurons: Vec<Neuron> = net
            .populations
            .iter()
            .flat_map(|p| {
                let state = match &p.model {
                    ModelParams::Lif(lp) => Dynamics::Lif(LifState::at_rest(lp)),
                    ModelParams::Izhikevich(ip) => Dynamics::Izh(IzhState::initial(ip)),
                };
                let n = Neuron {
                    state,
                    params: p.model,
                    synapse: p.synapse,
                    decay: p.synapse.decay_factor(net.dt),
                    input: p.input,
                    syn: 0.0,
                };
                std::iter::repeat_n(n, p.range.len())
            })
            .collect();
        let ring_len = net.max_delay as usize + 1;
        let ring = vec![0.0; neurons.len() * ring_len];
        let ctrl = Control {
            tick: 0,
            paused: false,
            stop: false,
            budget: None,
            pending: Vec::new(),
            schedule_cursor: 0,
            ring_len,
            rng_seed,
        };
        Self::assemble(net, workers, neurons, ring, None, ctrl)
    }

    /// Split global per-neuron state into partitions. `ring` is laid out
    /// `[neuron][slot]`; `rng_pos` holds per-neuron word positions.
    pub(crate) fn assemble(
        net: Arc<BuiltNetwork>,
        workers: usize,
        neurons: Vec<Neuron>,
        ring: Vec<f64>,
        rng_pos: Option<Vec<u128>>,
        ctrl: Control,
    ) -> Self {
        let l = ctrl.ring_len;
        let mut parts = Vec::new();
        let mut spikes = Vec::new();
        for r in partition(net.neuron_count(), workers) {
            let (s, e) = (r.start as usize, r.end as usize);
            let n = e - s;
            let mut local_ring = vec![0.0; n * l];
            for i in 0..n {
                for slot in 0..l {
                    local_ring[slot * n + i] = ring[(s + i) * l + slot];
                }
            }
            let rngs = (r.start..r.end)
                .map(|g| {
                    let mut rng = neuron_rng(&ctrl.rng_seed, g);
                    if let Some(pos) = &rng_pos {
                        rng.set_word_pos(pos[g as usize]);
                    }
                    rng
                })
                .collect();
            parts.push(Mutex::new(Partition {
                start: r.start,
                neurons: neurons[s..e].to_vec(),
                rngs,
                ring: local_ring,
                fault: None,
            }));
            spikes.push(RwLock::new(Vec::new()));
        }
        Self {
            net,
            lanes: Lanes { parts, spikes },
            ctrl,
        }
    }

    pub fn network(&self) -> &Arc<BuiltNetwork> {
        &self.net
    }

    pub fn tick(&self) -> u64 {
        self.ctrl.tick
    }

    pub fn workers(&self) -> usize {
        self.lanes.parts.len()
    }

    pub fn is_paused(&self) -> bool {
        self.ctrl.paused
    }

    pub fn boundary(&mut self) -> Boundary<'_> {
        Boundary {
            net: &self.net,
            lanes: &self.lanes,
            ctrl: &mut self.ctrl,
        }
    }

    /// Apply commands at the current tick boundary.
    pub fn apply_commands(
        &mut self,
        cmds: impl IntoIterator<Item = SimCommand>,
    ) -> Vec<CommandOutcome> {
        self.boundary().apply_commands(cmds)
    }

    pub fn membrane(&self, neuron: u32) -> Option<f64> {
        membrane_of(&self.lanes, neuron)
    }

    pub fn snapshot(&self) -> SnapshotFrame {
        snapshot::encode(&self.net, &self.lanes, &self.ctrl, &self.ctrl.pending)
    }

    pub fn restore(
        frame: &SnapshotFrame,
        net: Arc<BuiltNetwork>,
        workers: usize,
    ) -> Result<Self, SnapshotError> {
        snapshot::decode(frame, net, workers)
    }

    /// Advance one tick, returning the neurons that spiked (ascending).
    /// Ignores the paused flag.
    pub fn step_tick(&mut self) -> Result<Vec<u32>, EngineError> {
        struct One(Option<Vec<u32>>);
        impl TickHooks for One {
            fn boundary(&mut self, _: &mut Boundary<'_>) -> bool {
                self.0.is_none()
            }
            fn after_tick(&mut self, _: u64, spikes: &[u32], _: &Boundary<'_>) {
                self.0 = Some(spikes.to_vec());
            }
        }
        let mut hooks = One(None);
        self.drive(&mut hooks)?;
        Ok(hooks.0.unwrap_or_default())
    }

    /// Run ticks until `hooks.boundary` returns false or a neuron diverges.
    ///
    /// With more than one partition, one scoped thread per partition lives
    /// for the whole call; the calling thread coordinates boundaries.
    pub fn drive<H: TickHooks + ?Sized>(&mut self, hooks: &mut H) -> Result<(), EngineError> {
        let dt = self.net.dt;
        let ring_len = self.ctrl.ring_len;
        if self.lanes.parts.len() == 1 {
            let mut collected = Vec::new();
            loop {
                let mut b = self.boundary();
                b.apply_schedule();
                if !hooks.boundary(&mut b) {
                    return Ok(());
                }
                let tick = self.ctrl.tick;
                let slot = (tick % ring_len as u64) as usize;
                {
                    let part = self.lanes.parts[0]
                        .get_mut()
                        .unwrap_or_else(|e| e.into_inner());
                    let spikes = self.lanes.spikes[0]
                        .get_mut()
                        .unwrap_or_else(|e| e.into_inner());
                    part.phase_a(spikes, slot, dt);
                    if part.fault.is_none() {
                        part.phase_b(
                            std::iter::once(spikes.as_slice()),
                            &self.net,
                            tick,
                            ring_len,
                        );
                    }
                }
                self.finish_tick(hooks, &mut collected)?;
            }
        }

        let participants = self.lanes.parts.len() + 1;
        let barrier = Barrier::new(participants);
        let stop = AtomicBool::new(false);
        let tick_now = AtomicU64::new(self.ctrl.tick);
        let net = &*self.net;
        let lanes = &self.lanes;
        let ctrl = &mut self.ctrl;

        std::thread::scope(|scope| {
            for w in 0..lanes.parts.len() {
                let (barrier, stop, tick_now) = (&barrier, &stop, &tick_now);
                scope.spawn(move || loop {
                    barrier.wait();
                    if stop.load(Ordering::Acquire) {
                        return;
                    }
                    let tick = tick_now.load(Ordering::Acquire);
                    let slot = (tick % ring_len as u64) as usize;
                    {
                        let mut part = lock(&lanes.parts[w]);
                        let mut out = lanes.spikes[w].write().unwrap_or_else(|e| e.into_inner());
                        part.phase_a(&mut out, slot, dt);
                    }
                    barrier.wait();
                    {
                        let mut part = lock(&lanes.parts[w]);
                        let guards: Vec<_> = lanes
                            .spikes
                            .iter()
                            .map(|s| s.read().unwrap_or_else(|e| e.into_inner()))
                            .collect();
                        part.phase_b(guards.iter().map(|g| g.as_slice()), net, tick, ring_len);
                    }
                    barrier.wait();
                });
            }

            let mut collected = Vec::new();
            let result = loop {
                let mut b = Boundary {
                    net,
                    lanes,
                    ctrl: &mut *ctrl,
                };
                b.apply_schedule();
                if !hooks.boundary(&mut b) {
                    break Ok(());
                }
                tick_now.store(ctrl.tick, Ordering::Release);
                barrier.wait(); // start phase A
                barrier.wait(); // A -> B
                barrier.wait(); // B done
                let mut b = Boundary {
                    net,
                    lanes,
                    ctrl: &mut *ctrl,
                };
                if let Err(e) = b.finish_tick(hooks, &mut collected) {
                    break Err(e);
                }
            };
            stop.store(true, Ordering::Release);
            barrier.wait();
            result
        })
    }

    fn finish_tick<H: TickHooks + ?Sized>(
        &mut self,
        hooks: &mut H,
        collected: &mut Vec<u32>,
    ) -> Result<(), EngineError> {
        self.boundary().finish_tick(hooks, collected)
    }
}

fn membrane_of(lanes: &Lanes, neuron: u32) -> Option<f64> {
    let idx = lanes.parts.iter().position(|p| {
        let p = lock(p);
        neuron >= p.start && neuron < p.end()
    })?;
    let p = lock(&lanes.parts[idx]);
    Some(p.neurons[(neuron - p.start) as usize].state.membrane())
}

/// Callbacks from [`World::drive`].
pub trait TickHooks {
    /// Called at the boundary before tick `b.tick()`, after scheduled input
    /// changes for that tick were applied. Return false to end the drive.
    fn boundary(&mut self, b: &mut Boundary<'_>) -> bool;
    /// Called after `tick` completed with its spikes in ascending order.
    fn after_tick(&mut self, tick: u64, spikes: &[u32], b: &Boundary<'_>);
}

/// Access to the world between ticks.
pub struct Boundary<'a> {
    net: &'a BuiltNetwork,
    lanes: &'a Lanes,
    ctrl: &'a mut Control,
}

impl Boundary<'_> {
    pub fn tick(&self) -> u64 {
        self.ctrl.tick
    }

    pub fn network(&self) -> &BuiltNetwork {
        self.net
    }

    pub fn is_paused(&self) -> bool {
        self.ctrl.paused
    }

    pub fn stop_requested(&self) -> bool {
        self.ctrl.stop
    }

    pub fn set_paused(&mut self, paused: bool) {
        self.ctrl.paused = paused;
        if !paused {
            self.ctrl.budget = None;
        }
    }

    pub fn has_pending(&self) -> bool {
        !self.ctrl.pending.is_empty()
    }

    pub fn membrane(&self, neuron: u32) -> Option<f64> {
        membrane_of(self.lanes, neuron)
    }

    /// Membrane potential of every neuron, in index order.
    pub fn membrane_all(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.net.neuron_count() as usize);
        for p in &self.lanes.parts {
            out.extend(lock(p).neurons.iter().map(|n| n.state.membrane()));
        }
        out
    }

    pub fn snapshot(&self) -> SnapshotFrame {
        snapshot::encode(self.net, self.lanes, self.ctrl, &self.ctrl.pending)
    }

    /// Apply offline schedule entries due at or before the current tick.
    pub fn apply_schedule(&mut self) {
        let sched = &self.net.schedule;
        while let Some(entry) = sched.get(self.ctrl.schedule_cursor) {
            if entry.tick > self.ctrl.tick {
                break;
            }
            let range = self.net.populations[entry.population].range.clone();
            let input = entry.input;
            self.for_range(&range, |n| n.input = input);
            self.ctrl.schedule_cursor += 1;
        }
    }

    fn for_range(&self, range: &Range<u32>, mut f: impl FnMut(&mut Neuron)) {
        for p in &self.lanes.parts {
            let mut p = lock(p);
            let lo = range.start.max(p.start);
            let hi = range.end.min(p.end());
            for g in lo..hi {
                let i = (g - p.start) as usize;
                f(&mut p.neurons[i]);
            }
        }
    }

    fn try_for_range(
        &self,
        range: &Range<u32>,
        mut f: impl FnMut(&Neuron) -> Result<(), String>,
    ) -> Result<(), String> {
        for p in &self.lanes.parts {
            let p = lock(p);
            let lo = range.start.max(p.start);
            let hi = range.end.min(p.end());
            for g in lo..hi {
                f(&p.neurons[(g - p.start) as usize])?;
            }
        }
        Ok(())
    }

    /// Queue `cmds` behind any pending commands and apply them all in id
    /// order. A snapshot request records the commands after it as pending
    /// in the frame.
    pub fn apply_commands(
        &mut self,
        cmds: impl IntoIterator<Item = SimCommand>,
    ) -> Vec<CommandOutcome> {
        self.apply_schedule();
        self.ctrl.pending.extend(cmds);
        self.ctrl.pending.sort_by_key(|c| c.id);
        let batch = std::mem::take(&mut self.ctrl.pending);
        let mut out = Vec::with_capacity(batch.len());
        for (i, cmd) in batch.iter().enumerate() {
            let result = match &cmd.kind {
                CommandKind::SnapshotRequest { path } => {
                    let frame = snapshot::encode(self.net, self.lanes, self.ctrl, &batch[i + 1..]);
                    match path {
                        Some(p) => std::fs::write(p, frame.as_bytes())
                            .map(|_| Effect::Snapshot(frame.into_bytes()))
                            .map_err(|e| format!("cannot write snapshot {p}: {e}")),
                        None => Ok(Effect::Snapshot(frame.into_bytes())),
                    }
                }
                _ => self.apply_one(cmd).map(|_| Effect::Applied),
            };
            out.push(CommandOutcome {
                id: cmd.id,
                origin: cmd.origin,
                effective_tick: self.ctrl.tick,
                result,
            });
        }
        out
    }

    fn apply_one(&mut self, cmd: &SimCommand) -> Result<(), String> {
        match &cmd.kind {
            CommandKind::SetParam { name, value } => {
                let range = command::resolve_target(cmd.target.as_ref(), self.net)?;
                if name == "tau_syn" {
                    let syn = SynapseParams { tau_syn: *value };
                    if let Some(m) = syn.violations().into_iter().next() {
                        return Err(m);
                    }
                    let decay = syn.decay_factor(self.net.dt);
                    self.for_range(&range, |n| {
                        n.synapse = syn;
                        n.decay = decay;
                    });
                    return Ok(());
                }
                self.try_for_range(&range, |n| {
                    let next = n.params.with_field(name, *value).ok_or_else(|| {
                        format!(
                            "unknown parameter {name} for model {}",
                            n.params.model_name()
                        )
                    })?;
                    match next.violations().into_iter().next() {
                        Some(m) => Err(m),
                        None => Ok(()),
                    }
                })?;
                self.for_range(&range, |n| {
                    n.params = n.params.with_field(name, *value).expect("validated");
                });
                Ok(())
            }
            CommandKind::SetInput { input } => {
                let range = command::resolve_target(cmd.target.as_ref(), self.net)?;
                if let Some(m) = input.violations().into_iter().next() {
                    return Err(m);
                }
                let input = *input;
                self.for_range(&range, |n| n.input = input);
                Ok(())
            }
            CommandKind::Pause => {
                self.ctrl.paused = true;
                self.ctrl.budget = None;
                Ok(())
            }
            CommandKind::Resume { ticks } => {
                match ticks {
                    Some(0) => self.ctrl.paused = true,
                    _ => self.ctrl.paused = false,
                }
                self.ctrl.budget = ticks.filter(|&t| t > 0);
                Ok(())
            }
            CommandKind::Stop => {
                self.ctrl.stop = true;
                Ok(())
            }
            CommandKind::SnapshotRequest { .. } => unreachable!("handled by apply_commands"),
        }
    }

    fn finish_tick<H: TickHooks + ?Sized>(
        &mut self,
        hooks: &mut H,
        collected: &mut Vec<u32>,
    ) -> Result<(), EngineError> {
        let tick = self.ctrl.tick;
        let fault = self
            .lanes
            .parts
            .iter()
            .filter_map(|p| lock(p).fault.take())
            .min_by_key(|f| f.neuron);
        if let Some(f) = fault {
            return Err(EngineError::Diverged {
                tick,
                neuron: f.neuron,
                population: self.net.populations[self.net.population_of(f.neuron)]
                    .name
                    .clone(),
                source: f.error,
            });
        }
        collected.clear();
        for s in &self.lanes.spikes {
            collected.extend_from_slice(&s.read().unwrap_or_else(|e| e.into_inner()));
        }
        self.ctrl.tick += 1;
        if let Some(left) = self.ctrl.budget.as_mut() {
            *left -= 1;
            if *left == 0 {
                self.ctrl.budget = None;
                self.ctrl.paused = true;
            }
        }
        hooks.after_tick(tick, collected, self);
        Ok(())
    }
}
