//! Fan-out of engine telemetry to client sessions, and fan-in of their
//! commands. The engine never blocks on a slow client: each session has a
//! bounded queue that sheds membrane and rate frames oldest first, and a
//! session whose spike frames no longer fit is disconnected.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::ops::Range;
use std::path::PathBuf;
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::Duration;

use super::codec::{
    is_sampled, Channel, ControlMessage, MembraneSample, PopulationInfo, RateSample,
    TelemetryFrame, MAX_MEMBRANE_NEURONS,
};
use crate::engine::Target;
use crate::engine::{
    CommandKind, CommandOutcome, Effect, EngineError, RunState, RunSummary, SimCommand,
    TelemetrySink, TickReport,
};
use crate::network::{BuiltNetwork, ScheduledInput};

#[derive(Debug, Clone)]
pub struct HubConfig {
    /// Frames buffered per session.
    pub queue_capacity: usize,
    /// Membrane decimation for sessions that do not choose one.
    pub default_decimation: u64,
    pub default_rate_window_ms: f64,
    /// Where snapshot requests with relative or missing paths are written.
    pub snapshot_dir: PathBuf,
}

impl Default for HubConfig {
    fn default() -> Self {
        Self {
            queue_capacity: 4096,
            default_decimation: 1,
            default_rate_window_ms: 100.0,
            snapshot_dir: PathBuf::from("."),
        }
    }
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

#[derive(Debug, Default)]
struct QueueInner {
    frames: VecDeque<TelemetryFrame>,
    closed: bool,
    dropped: u64,
}

/// One session's outbound frames.
#[derive(Debug)]
pub struct SessionQueue {
    inner: Mutex<QueueInner>,
    ready: Condvar,
    capacity: usize,
}

impl SessionQueue {
    fn new(capacity: usize) -> Self {
        Self {
            inner: Mutex::default(),
            ready: Condvar::new(),
            capacity: capacity.max(1),
        }
    }

    /// Returns false when the session had to be disconnected.
    fn push(&self, frame: TelemetryFrame, tick: u64) -> bool {
        let mut q = lock(&self.inner);
        if q.closed {
            return false;
        }
        if q.frames.len() >= self.capacity {
            if let Some(pos) = q.frames.iter().position(TelemetryFrame::is_droppable) {
                q.frames.remove(pos);
                q.dropped += 1;
            } else if frame.is_droppable() {
                q.dropped += 1;
                return true;
            } else {
                q.frames.push_back(TelemetryFrame::status(
                    tick,
                    "disconnected",
                    Some("telemetry queue overflow".into()),
                ));
                q.closed = true;
                self.ready.notify_all();
                return false;
            }
        }
        q.frames.push_back(frame);
        self.ready.notify_all();
        true
    }

    fn close_with(&self, frame: TelemetryFrame) {
        let mut q = lock(&self.inner);
        if !q.closed {
            q.frames.push_back(frame);
            q.closed = true;
        }
        self.ready.notify_all();
    }

    /// Wait up to `timeout` for frames. `None` once the queue is closed
    /// and drained.
    pub fn take(&self, timeout: Duration) -> Option<Vec<TelemetryFrame>> {
        let mut q = lock(&self.inner);
        if q.frames.is_empty() && !q.closed {
            q = self
                .ready
                .wait_timeout(q, timeout)
                .unwrap_or_else(|e| e.into_inner())
                .0;
        }
        if q.frames.is_empty() && q.closed {
            return None;
        }
        Some(q.frames.drain(..).collect())
    }

    /// Membrane and rate frames shed so far.
    pub fn dropped(&self) -> u64 {
        lock(&self.inner).dropped
    }
}

#[derive(Debug)]
struct Session {
    queue: Arc<SessionQueue>,
    channels: Vec<Channel>,
    membrane_neurons: Vec<u32>,
    decimation: u64,
    window_ticks: u64,
    window_elapsed: u64,
    window_counts: Vec<u64>,
    /// Engine-bound commands without an outcome yet, by client id.
    awaiting: BTreeSet<u64>,
    /// Replies held back until every earlier command is answered.
    deferred: Vec<(u64, TelemetryFrame)>,
}

impl Session {
    /// Acks and errors leave in command-id order.
    fn reply(&mut self, local_id: u64, frame: TelemetryFrame, tick: u64) {
        if self.awaiting.first().is_some_and(|&a| a < local_id) {
            self.deferred.push((local_id, frame));
        } else {
            self.queue.push(frame, tick);
        }
    }

    fn settle(&mut self, local_id: u64, frame: TelemetryFrame, tick: u64) {
        self.awaiting.remove(&local_id);
        self.queue.push(frame, tick);
        let floor = self.awaiting.first().copied().unwrap_or(u64::MAX);
        let ready = self
            .deferred
            .iter()
            .take_while(|(id, _)| *id < floor)
            .count();
        for (_, f) in self.deferred.drain(..ready) {
            self.queue.push(f, tick);
        }
    }
}

#[derive(Debug)]
struct Inflight {
    session: u64,
    local_id: u64,
    snapshot_path: Option<PathBuf>,
    /// Populations the command covers entirely; their `settings` entry
    /// mirrors the change once applied.
    change: Option<(Vec<usize>, CommandKind)>,
}

#[derive(Debug)]
struct HubState {
    sessions: BTreeMap<u64, Session>,
    inflight: HashMap<u64, Inflight>,
    next_session: u64,
    next_command: u64,
    tick: u64,
    state: RunState,
    finished: bool,
    commands: Sender<SimCommand>,
    /// Population settings as the server knows them: as built, plus the
    /// input schedule and acknowledged population-wide commands.
    settings: Vec<PopulationInfo>,
    schedule: Vec<ScheduledInput>,
    schedule_cursor: usize,
}

#[derive(Debug)]
struct Shared {
    state: Mutex<HubState>,
    cfg: HubConfig,
    dt: f64,
    neuron_count: u32,
    populations: Vec<(String, Range<u32>)>,
}

/// Shared handle; clones refer to the same hub.
#[derive(Debug, Clone)]
pub struct Hub {
    shared: Arc<Shared>,
}

impl Hub {
    /// The receiver is the engine's command source.
    pub fn new(
        net: &BuiltNetwork,
        cfg: HubConfig,
        initial: RunState,
    ) -> (Hub, Receiver<SimCommand>) {
        let (tx, rx) = channel();
        let hub = Hub {
            shared: Arc::new(Shared {
                state: Mutex::new(HubState {
                    sessions: BTreeMap::new(),
                    inflight: HashMap::new(),
                    next_session: 1,
                    next_command: 1,
                    tick: 0,
                    state: initial,
                    finished: false,
                    commands: tx,
                    settings: net
                        .populations
                        .iter()
                        .map(|p| PopulationInfo {
                            name: p.name.clone(),
                            start: p.range.start,
                            end: p.range.end,
                            model: p.model,
                            synapse: p.synapse,
                            input: p.input,
                        })
                        .collect(),
                    schedule: net.schedule.clone(),
                    schedule_cursor: 0,
                }),
                cfg,
                dt: net.dt,
                neuron_count: net.neuron_count(),
                populations: net
                    .populations
                    .iter()
                    .map(|p| (p.name.clone(), p.range.clone()))
                    .collect(),
            }),
        };
        (hub, rx)
    }

    /// Register a session subscribed to spikes; it immediately gets a
    /// status frame.
    pub fn connect(&self) -> SessionHandle {
        let sh = &self.shared;
        let queue = Arc::new(SessionQueue::new(sh.cfg.queue_capacity));
        let mut st = lock(&sh.state);
        let id = st.next_session;
        st.next_session += 1;
        let status = TelemetryFrame::Status {
            tick: st.tick,
            state: st.state.as_str().into(),
            message: None,
            dt: Some(sh.dt),
            populations: Some(st.settings.clone()),
        };
        if st.finished {
            queue.close_with(status);
        } else {
            queue.push(status, st.tick);
        }
        st.sessions.insert(
            id,
            Session {
                queue: queue.clone(),
                channels: vec![Channel::Spikes],
                membrane_neurons: Vec::new(),
                decimation: sh.cfg.default_decimation.max(1),
                window_ticks: self.window_ticks(sh.cfg.default_rate_window_ms),
                window_elapsed: 0,
                window_counts: vec![0; sh.populations.len()],
                awaiting: BTreeSet::new(),
                deferred: Vec::new(),
            },
        );
        SessionHandle {
            id,
            queue,
            hub: self.clone(),
        }
    }

    pub fn is_finished(&self) -> bool {
        lock(&self.shared.state).finished
    }

    pub fn session_count(&self) -> usize {
        lock(&self.shared.state).sessions.len()
    }

    fn window_ticks(&self, ms: f64) -> u64 {
        ((ms / self.shared.dt).round() as u64).max(1)
    }

    fn handle(&self, session: u64, msg: ControlMessage) {
        let sh = &self.shared;
        let mut st = lock(&sh.state);
        let tick = st.tick;
        let local_id = msg.id();
        let finished = st.finished;
        let Some(sess) = st.sessions.get_mut(&session) else {
            return;
        };
        if finished {
            sess.reply(
                local_id,
                TelemetryFrame::error(Some(local_id), "run has ended"),
                tick,
            );
            return;
        }
        let (target, kind, snapshot_path) = match msg {
            ControlMessage::Subscribe {
                channels,
                membrane_neurons,
                decimation,
                rate_window_ms,
                ..
            } => {
                let reject = |sess: &mut Session, reason: String| {
                    sess.reply(
                        local_id,
                        TelemetryFrame::error(Some(local_id), reason),
                        tick,
                    );
                };
                if membrane_neurons.len() > MAX_MEMBRANE_NEURONS {
                    return reject(
                        sess,
                        format!("at most {MAX_MEMBRANE_NEURONS} membrane neurons"),
                    );
                }
                if let Some(&n) = membrane_neurons.iter().find(|&&n| n >= sh.neuron_count) {
                    return reject(sess, format!("unknown neuron {n}"));
                }
                if decimation == Some(0) {
                    return reject(sess, "decimation must be >= 1".into());
                }
                if rate_window_ms.is_some_and(|w| !(w > 0.0 && w.is_finite())) {
                    return reject(sess, "rate_window_ms must be > 0".into());
                }
                let window = rate_window_ms.map(|w| self.window_ticks(w));
                sess.channels = channels;
                sess.membrane_neurons = membrane_neurons;
                if let Some(k) = decimation {
                    sess.decimation = k;
                }
                if let Some(w) = window {
                    sess.window_ticks = w;
                    sess.window_elapsed = 0;
                    sess.window_counts.iter_mut().for_each(|c| *c = 0);
                }
                let ack = TelemetryFrame::Ack {
                    tick,
                    id: local_id,
                    effective_tick: tick,
                    path: None,
                };
                sess.reply(local_id, ack, tick);
                return;
            }
            ControlMessage::SetParam {
                target,
                name,
                value,
                ..
            } => (Some(target), CommandKind::SetParam { name, value }, None),
            ControlMessage::SetInput { target, input, .. } => {
                (Some(target), CommandKind::SetInput { input }, None)
            }
            ControlMessage::Pause { .. } => (None, CommandKind::Pause, None),
            ControlMessage::Resume { ticks, .. } => (None, CommandKind::Resume { ticks }, None),
            ControlMessage::Stop { .. } => (None, CommandKind::Stop, None),
            ControlMessage::Snapshot { path, .. } => {
                let path = path.map(|p| sh.cfg.snapshot_dir.join(p));
                (
                    None,
                    CommandKind::SnapshotRequest { path: None },
                    Some(path),
                )
            }
        };
        sess.awaiting.insert(local_id);
        let covered: Vec<usize> = match &target {
            Some(Target::Population(name)) => st
                .settings
                .iter()
                .position(|p| &p.name == name)
                .into_iter()
                .collect(),
            Some(Target::Range { start, end }) => st
                .settings
                .iter()
                .enumerate()
                .filter(|(_, p)| *start <= p.start && p.end <= *end)
                .map(|(i, _)| i)
                .collect(),
            None => Vec::new(),
        };
        let change = (!covered.is_empty()).then(|| (covered, kind.clone()));
        let global = st.next_command;
        st.next_command += 1;
        let mut cmd = SimCommand::new(global, target, kind);
        cmd.origin = Some(session);
        st.inflight.insert(
            global,
            Inflight {
                session,
                local_id,
                snapshot_path: snapshot_path.map(|p| {
                    p.unwrap_or_else(|| sh.cfg.snapshot_dir.join(format!("snapshot-{global}.snap")))
                }),
                change,
            },
        );
        if st.commands.send(cmd).is_err() {
            st.inflight.remove(&global);
            let sess = st.sessions.get_mut(&session).expect("session present");
            sess.settle(
                local_id,
                TelemetryFrame::error(Some(local_id), "engine is not running"),
                tick,
            );
        }
    }

    fn disconnect(&self, session: u64) {
        let mut st = lock(&self.shared.state);
        if let Some(s) = st.sessions.remove(&session) {
            s.queue
                .close_with(TelemetryFrame::status(st.tick, "disconnected", None));
        }
        st.inflight.retain(|_, f| f.session != session);
    }

    fn broadcast(st: &HubState, frame: &TelemetryFrame) {
        for s in st.sessions.values() {
            s.queue.push(frame.clone(), st.tick);
        }
    }
}

/// A connected client. Dropping it unregisters the session.
#[derive(Debug)]
pub struct SessionHandle {
    id: u64,
    queue: Arc<SessionQueue>,
    hub: Hub,
}

impl SessionHandle {
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn queue(&self) -> &Arc<SessionQueue> {
        &self.queue
    }

    /// Act on one decoded message; replies arrive on the queue.
    pub fn handle(&self, msg: ControlMessage) {
        self.hub.handle(self.id, msg);
    }

    /// Queue a frame produced outside the hub, e.g. a decode error.
    pub fn send(&self, frame: TelemetryFrame) {
        let tick = lock(&self.hub.shared.state).tick;
        self.queue.push(frame, tick);
    }
}

impl Drop for SessionHandle {
    fn drop(&mut self) {
        self.hub.disconnect(self.id);
    }
}

impl TelemetrySink for Hub {
    fn wants_membrane(&self, tick: u64) -> bool {
        let st = lock(&self.shared.state);
        st.sessions.values().any(|s| {
            s.channels.contains(&Channel::Membrane)
                && !s.membrane_neurons.is_empty()
                && is_sampled(tick, s.decimation)
        })
    }

    fn on_tick(&mut self, r: &TickReport<'_>) {
        let sh = &self.shared;
        let mut st = lock(&sh.state);
        st.tick = r.tick + 1;
        while let Some(entry) = st.schedule.get(st.schedule_cursor) {
            if entry.tick > r.tick {
                break;
            }
            let (p, input) = (entry.population, entry.input);
            st.settings[p].input = input;
            st.schedule_cursor += 1;
        }
        let mut per_pop = vec![0u64; sh.populations.len()];
        if !r.spikes.is_empty() {
            let mut p = 0;
            for &n in r.spikes {
                while n >= sh.populations[p].1.end {
                    p += 1;
                }
                per_pop[p] += 1;
            }
        }
        let tick = r.tick;
        for s in st.sessions.values_mut() {
            let mut ok = true;
            if s.channels.contains(&Channel::Spikes) && !r.spikes.is_empty() {
                ok &= s.queue.push(
                    TelemetryFrame::Spikes {
                        tick,
                        neurons: r.spikes.to_vec(),
                    },
                    tick,
                );
            }
            if let Some(v) = r.membrane {
                if ok
                    && s.channels.contains(&Channel::Membrane)
                    && !s.membrane_neurons.is_empty()
                    && is_sampled(tick, s.decimation)
                {
                    let samples = s
                        .membrane_neurons
                        .iter()
                        .map(|&neuron| MembraneSample {
                            neuron,
                            v: v[neuron as usize],
                        })
                        .collect();
                    ok &= s
                        .queue
                        .push(TelemetryFrame::Membrane { tick, samples }, tick);
                }
            }
            for (c, n) in s.window_counts.iter_mut().zip(&per_pop) {
                *c += n;
            }
            s.window_elapsed += 1;
            if s.window_elapsed == s.window_ticks {
                let window_ms = s.window_ticks as f64 * sh.dt;
                let rates = sh
                    .populations
                    .iter()
                    .zip(&s.window_counts)
                    .map(|((name, range), &c)| RateSample {
                        population: name.clone(),
                        rate_hz: c as f64 / range.len() as f64 / (window_ms / 1000.0),
                    })
                    .collect();
                if ok && s.channels.contains(&Channel::Rates) {
                    s.queue.push(
                        TelemetryFrame::Rates {
                            tick,
                            window_ms,
                            rates,
                        },
                        tick,
                    );
                }
                s.window_elapsed = 0;
                s.window_counts.iter_mut().for_each(|c| *c = 0);
            }
        }
    }

    fn on_outcome(&mut self, o: &CommandOutcome) {
        let mut st = lock(&self.shared.state);
        let Some(f) = st.inflight.remove(&o.id) else {
            return;
        };
        if let (Ok(_), Some((covered, kind))) = (&o.result, &f.change) {
            for &p in covered {
                let info = &mut st.settings[p];
                match kind {
                    CommandKind::SetParam { name, value } if name == "tau_syn" => {
                        info.synapse.tau_syn = *value
                    }
                    CommandKind::SetParam { name, value } => {
                        if let Some(m) = info.model.with_field(name, *value) {
                            info.model = m;
                        }
                    }
                    CommandKind::SetInput { input } => info.input = *input,
                    _ => {}
                }
            }
        }
        let Some(sess) = st.sessions.get_mut(&f.session) else {
            return;
        };
        let frame = match &o.result {
            Ok(Effect::Applied) => TelemetryFrame::Ack {
                tick: o.effective_tick,
                id: f.local_id,
                effective_tick: o.effective_tick,
                path: None,
            },
            Ok(Effect::Snapshot(bytes)) => {
                let path = f
                    .snapshot_path
                    .clone()
                    .expect("snapshot command has a path");
                match std::fs::write(&path, bytes) {
                    Ok(()) => TelemetryFrame::Ack {
                        tick: o.effective_tick,
                        id: f.local_id,
                        effective_tick: o.effective_tick,
                        path: Some(path.display().to_string()),
                    },
                    Err(e) => TelemetryFrame::error(
                        Some(f.local_id),
                        format!("cannot write {}: {e}", path.display()),
                    ),
                }
            }
            Err(reason) => TelemetryFrame::error(Some(f.local_id), reason.clone()),
        };
        sess.settle(f.local_id, frame, o.effective_tick);
    }

    fn on_state(&mut self, tick: u64, state: RunState) {
        let mut st = lock(&self.shared.state);
        st.tick = tick;
        st.state = state;
        // terminal states are announced by on_finish, with details
        if matches!(state, RunState::Running | RunState::Paused) {
            let frame = TelemetryFrame::status(tick, state.as_str(), None);
            Hub::broadcast(&st, &frame);
        }
    }

    fn on_finish(&mut self, result: &Result<RunSummary, EngineError>) {
        let mut st = lock(&self.shared.state);
        st.finished = true;
        let (state, message) = match result {
            Ok(s) if s.stopped => (RunState::Stopped, None),
            Ok(_) => (RunState::Finished, None),
            Err(e) => (RunState::Aborted, Some(e.to_string())),
        };
        st.state = state;
        let tick = st.tick;
        let frame = TelemetryFrame::status(tick, state.as_str(), message);
        for s in st.sessions.values_mut() {
            for (_, f) in s.deferred.drain(..) {
                s.queue.push(f, tick);
            }
            s.queue.close_with(frame.clone());
        }
        st.inflight.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{EngineConfig, World};
    use crate::network::build_network;

    fn net() -> Arc<BuiltNetwork> {
        Arc::new(build_network(&crate::engine::tests::chain_config(2)).unwrap())
    }

    fn drain(h: &SessionHandle) -> Vec<TelemetryFrame> {
        h.queue().take(Duration::ZERO).unwrap_or_default()
    }

    #[test]
    fn spikes_fan_out_to_all_sessions() {
        let net = net();
        let (mut hub, rx) = Hub::new(&net, HubConfig::default(), RunState::Running);
        let a = hub.connect();
        let b = hub.connect();
        drop(rx);
        let cfg = EngineConfig {
            max_ticks: 300,
            ..EngineConfig::default()
        };
        let summary =
            crate::engine::run(net, &cfg, &mut crate::engine::NoCommands, &mut hub).unwrap();
        for h in [&a, &b] {
            let frames = drain(h);
            let spikes: usize = frames
                .iter()
                .map(|f| match f {
                    TelemetryFrame::Spikes { neurons, .. } => neurons.len(),
                    _ => 0,
                })
                .sum();
            assert_eq!(spikes as u64, summary.total_spikes);
            assert!(
                matches!(frames.last(), Some(TelemetryFrame::Status { state, .. }) if state == "finished")
            );
            assert!(h.queue().take(Duration::ZERO).is_none());
        }
    }

    #[test]
    fn slow_consumer_sheds_membrane_first_then_disconnects() {
        let q = SessionQueue::new(3);
        let mem = |tick| TelemetryFrame::Membrane {
            tick,
            samples: vec![],
        };
        let spk = |tick| TelemetryFrame::Spikes {
            tick,
            neurons: vec![0],
        };
        assert!(q.push(mem(0), 0));
        assert!(q.push(spk(1), 1));
        assert!(q.push(mem(2), 2));
        assert!(q.push(spk(3), 3)); // evicts mem(0)
        assert_eq!(q.dropped(), 1);
        assert!(q.push(mem(4), 4)); // evicts mem(2)
        assert!(q.push(spk(5), 5)); // evicts mem(4)
        assert!(!q.push(spk(6), 6)); // only spikes left
        let frames = q.take(Duration::ZERO).unwrap();
        assert_eq!(frames[..3], [spk(1), spk(3), spk(5)]);
        assert!(
            matches!(&frames[3], TelemetryFrame::Status { state, .. } if state == "disconnected")
        );
        assert!(q.take(Duration::ZERO).is_none());
    }

    #[test]
    fn commands_get_global_ids_and_acks_route_back() {
        let net = net();
        let (mut hub, rx) = Hub::new(&net, HubConfig::default(), RunState::Paused);
        let a = hub.connect();
        let b = hub.connect();
        a.handle(ControlMessage::SetParam {
            id: 10,
            target: crate::engine::Target::Population("driver".into()),
            name: "v_thresh".into(),
            value: -52.0,
        });
        b.handle(ControlMessage::SetParam {
            id: 10,
            target: crate::engine::Target::Population("nope".into()),
            name: "v_thresh".into(),
            value: -52.0,
        });
        let cmds: Vec<SimCommand> = rx.try_iter().collect();
        assert_eq!(cmds.iter().map(|c| c.id).collect::<Vec<_>>(), vec![1, 2]);
        assert_eq!(cmds[0].origin, Some(a.id()));
        let mut world = World::new(net, 1);
        for o in world.apply_commands(cmds) {
            hub.on_outcome(&o);
        }
        let fa = drain(&a);
        let fb = drain(&b);
        assert!(fa.contains(&TelemetryFrame::Ack {
            tick: 0,
            id: 10,
            effective_tick: 0,
            path: None
        }));
        assert!(fb.iter().any(|f| matches!(f, TelemetryFrame::Error { id: Some(10), reason, .. } if reason == "unknown target nope")));
        assert!(!fa.iter().any(|f| matches!(f, TelemetryFrame::Error { .. })));
    }

    #[test]
    fn subscribe_validates_and_acks() {
        let net = net();
        let (hub, _rx) = Hub::new(&net, HubConfig::default(), RunState::Paused);
        let a = hub.connect();
        a.handle(ControlMessage::Subscribe {
            id: 1,
            channels: vec![Channel::Membrane],
            membrane_neurons: (0..65).collect(),
            decimation: None,
            rate_window_ms: None,
        });
        a.handle(ControlMessage::Subscribe {
            id: 2,
            channels: vec![Channel::Membrane],
            membrane_neurons: vec![0, 1],
            decimation: Some(5),
            rate_window_ms: Some(10.0),
        });
        let frames = drain(&a);
        assert!(frames
            .iter()
            .any(|f| matches!(f, TelemetryFrame::Error { id: Some(1), .. })));
        assert!(frames
            .iter()
            .any(|f| matches!(f, TelemetryFrame::Ack { id: 2, .. })));
        assert!(hub.wants_membrane(10));
        assert!(!hub.wants_membrane(11));
    }

    #[test]
    fn replies_follow_command_id_order() {
        let net = net();
        let (hub, rx) = Hub::new(&net, HubConfig::default(), RunState::Paused);
        let a = hub.connect();
        drain(&a);
        a.handle(ControlMessage::Pause { id: 1 });
        a.handle(ControlMessage::Subscribe {
            id: 2,
            channels: vec![Channel::Rates],
            membrane_neurons: vec![],
            decimation: None,
            rate_window_ms: None,
        });
        a.handle(ControlMessage::Subscribe {
            id: 3,
            channels: vec![Channel::Membrane],
            membrane_neurons: vec![99],
            decimation: None,
            rate_window_ms: None,
        });
        assert!(drain(&a).is_empty());
        let mut world = World::new(net, 1);
        let mut hub = hub;
        for o in world.apply_commands(rx.try_iter()) {
            hub.on_outcome(&o);
        }
        let ids: Vec<u64> = drain(&a)
            .iter()
            .filter_map(|f| match f {
                TelemetryFrame::Ack { id, .. } => Some(*id),
                TelemetryFrame::Error { id, .. } => *id,
                _ => None,
            })
            .collect();
        assert_eq!(ids, vec![1, 2, 3]);
    }

    #[test]
    fn connect_status_reports_current_population_settings() {
        let net = net();
        let (mut hub, rx) = Hub::new(&net, HubConfig::default(), RunState::Paused);
        let a = hub.connect();
        let first = drain(&a);
        let Some(TelemetryFrame::Status {
            dt,
            populations: Some(pops),
            ..
        }) = first.first()
        else {
            panic!("no status: {first:?}");
        };
        assert_eq!(*dt, Some(0.1));
        assert_eq!(
            pops.iter()
                .map(|p| (p.name.as_str(), p.start, p.end))
                .collect::<Vec<_>>(),
            vec![("driver", 0, 1), ("follower", 1, 2)]
        );
        a.handle(ControlMessage::SetParam {
            id: 1,
            target: Target::Population("driver".into()),
            name: "v_thresh".into(),
            value: -52.0,
        });
        a.handle(ControlMessage::SetParam {
            id: 2,
            target: Target::Population("follower".into()),
            name: "tau_syn".into(),
            value: 9.0,
        });
        a.handle(ControlMessage::SetInput {
            id: 3,
            target: Target::Population("follower".into()),
            input: crate::models::InputSpec::constant(1.5),
        });
        a.handle(ControlMessage::SetParam {
            id: 4,
            target: Target::Range { start: 1, end: 2 },
            name: "v_thresh".into(),
            value: -45.0,
        });
        let mut world = World::new(net, 1);
        for o in world.apply_commands(rx.try_iter()) {
            hub.on_outcome(&o);
        }
        let b = hub.connect();
        let Some(TelemetryFrame::Status {
            populations: Some(pops),
            ..
        }) = drain(&b).into_iter().next()
        else {
            panic!("no status");
        };
        let crate::network::ModelParams::Lif(lif) = pops[0].model else {
            panic!("driver is lif");
        };
        assert_eq!(lif.v_thresh, -52.0);
        assert_eq!(pops[1].synapse.tau_syn, 9.0);
        assert_eq!(pops[1].input, crate::models::InputSpec::constant(1.5));
        let crate::network::ModelParams::Lif(lif) = pops[1].model else {
            panic!("follower is lif");
        };
        assert_eq!(lif.v_thresh, -45.0);
    }

    #[test]
    fn channels_are_exclusive() {
        let net = net();
        let (mut hub, rx) = Hub::new(&net, HubConfig::default(), RunState::Running);
        let a = hub.connect();
        a.handle(ControlMessage::Subscribe {
            id: 1,
            channels: vec![Channel::Membrane],
            membrane_neurons: vec![1],
            decimation: Some(50),
            rate_window_ms: None,
        });
        drop(rx);
        let cfg = EngineConfig {
            max_ticks: 300,
            ..EngineConfig::default()
        };
        let summary =
            crate::engine::run(net, &cfg, &mut crate::engine::NoCommands, &mut hub).unwrap();
        assert!(summary.total_spikes > 0);
        let frames = drain(&a);
        assert!(!frames.iter().any(|f| matches!(
            f,
            TelemetryFrame::Spikes { .. } | TelemetryFrame::Rates { .. }
        )));
        let ticks: Vec<u64> = frames
            .iter()
            .filter_map(|f| match f {
                TelemetryFrame::Membrane { tick, samples } => {
                    assert_eq!(
                        samples.iter().map(|s| s.neuron).collect::<Vec<_>>(),
                        vec![1]
                    );
                    Some(*tick)
                }
                _ => None,
            })
            .collect();
        assert_eq!(ticks, vec![0, 50, 100, 150, 200, 250]);
    }

    #[test]
    fn dropped_session_unregisters() {
        let net = net();
        let (hub, _rx) = Hub::new(&net, HubConfig::default(), RunState::Paused);
        let a = hub.connect();
        assert_eq!(hub.session_count(), 1);
        drop(a);
        assert_eq!(hub.session_count(), 0);
    }
}
