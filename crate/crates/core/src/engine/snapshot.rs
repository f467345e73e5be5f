//! Versioned binary snapshot frames.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic    8 bytes  "SPKSNAP\0"
//! version  u32
//! count    u32      number of sections
//! section* tag [u8; 4], len u64, payload [u8; len]
//! ```
//!
//! Sections, in order: `HEAD`, `NEUR`, `RING`, `RNGS`, `PEND`. Unknown
//! tags are skipped. See `docs/snapshot-format.md` for payload layouts.

use std::sync::Arc;

use thiserror::Error;

use super::{lock, Control, Dynamics, Lanes, Neuron, SimCommand, World};
use crate::models::{
    InputKind, InputSpec, IzhParams, IzhState, LifParams, LifState, SynapseParams,
};
use crate::network::{BuiltNetwork, ModelParams};

pub const SNAPSHOT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"SPKSNAP\0";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SnapshotError {
    #[error("corrupt frame")]
    Corrupt,
    #[error("unsupported frame version {0} (expected {SNAPSHOT_VERSION})")]
    Version(u32),
    #[error("frame belongs to a different network")]
    NetworkMismatch,
}

/// Encoded world state at a tick boundary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SnapshotFrame(Vec<u8>);

impl SnapshotFrame {
    pub fn from_bytes(bytes: Vec<u8>) -> Self {
        Self(bytes)
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.0
    }

    /// Tick recorded in the header, if the frame is well formed.
    pub fn tick(&self) -> Result<u64, SnapshotError> {
        let sections = parse_sections(&self.0)?;
        let head = find(&sections, b"HEAD")?;
        Reader::new(head).u64()
    }
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u128(&mut self, v: u128) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, v: &[u8]) {
        self.0.extend_from_slice(v);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8], SnapshotError> {
        let end = self.pos.checked_add(n).ok_or(SnapshotError::Corrupt)?;
        let s = self.buf.get(self.pos..end).ok_or(SnapshotError::Corrupt)?;
        self.pos = end;
        Ok(s)
    }
    fn arr<const N: usize>(&mut self) -> Result<[u8; N], SnapshotError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
    fn u8(&mut self) -> Result<u8, SnapshotError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, SnapshotError> {
        Ok(u32::from_le_bytes(self.arr()?))
    }
    fn u64(&mut self) -> Result<u64, SnapshotError> {
        Ok(u64::from_le_bytes(self.arr()?))
    }
    fn u128(&mut self) -> Result<u128, SnapshotError> {
        Ok(u128::from_le_bytes(self.arr()?))
    }
    fn f64(&mut self) -> Result<f64, SnapshotError> {
        Ok(f64::from_le_bytes(self.arr()?))
    }
    fn done(&self) -> Result<(), SnapshotError> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(SnapshotError::Corrupt)
        }
    }
}

fn put_section(out: &mut Writer, tag: &[u8; 4], payload: Writer) {
    out.bytes(tag);
    out.u64(payload.0.len() as u64);
    out.bytes(&payload.0);
}

pub(crate) fn encode(
    net: &BuiltNetwork,
    lanes: &Lanes,
    ctrl: &Control,
    pending: &[SimCommand],
) -> SnapshotFrame {
    let n = net.neuron_count();
    let l = ctrl.ring_len;

    let mut head = Writer::default();
    head.u64(ctrl.tick);
    head.u32(n);
    head.u32(l as u32);
    head.f64(net.dt);
    head.u64(net.seed);
    head.u8(u8::from(ctrl.paused));
    head.u8(u8::from(ctrl.stop));
    match ctrl.budget {
        Some(b) => {
            head.u8(1);
            head.u64(b);
        }
        None => {
            head.u8(0);
            head.u64(0);
        }
    }
    head.u64(ctrl.schedule_cursor as u64);
    head.bytes(&net.fingerprint());

    let mut neur = Writer::default();
    let mut ring = Writer::default();
    let mut rngs = Writer::default();
    rngs.bytes(&ctrl.rng_seed);
    for part in &lanes.parts {
        let p = lock(part);
        let len = p.neurons.len();
        for (i, nrn) in p.neurons.iter().enumerate() {
            match (&nrn.state, &nrn.params) {
                (Dynamics::Lif(s), ModelParams::Lif(lp)) => {
                    neur.u8(0);
                    neur.f64(s.v);
                    neur.f64(s.refrac_remaining);
                    for v in [
                        lp.v_rest,
                        lp.v_thresh,
                        lp.v_reset,
                        lp.c_m,
                        lp.r_m,
                        lp.t_refrac,
                    ] {
                        neur.f64(v);
                    }
                }
                (Dynamics::Izh(s), ModelParams::Izhikevich(ip)) => {
                    neur.u8(1);
                    neur.f64(s.v);
                    neur.f64(s.u);
                    for v in [ip.a, ip.b, ip.c, ip.d, ip.v_peak] {
                        neur.f64(v);
                    }
                }
                _ => unreachable!("model of a neuron never changes"),
            }
            neur.f64(nrn.synapse.tau_syn);
            neur.u8(match nrn.input.kind {
                InputKind::ConstantCurrent => 0,
                InputKind::PoissonSpikes => 1,
            });
            neur.f64(nrn.input.amplitude);
            neur.f64(nrn.input.rate);
            neur.f64(nrn.syn);
            for slot in 0..l {
                ring.f64(p.ring[slot * len + i]);
            }
            rngs.u128(p.rngs[i].get_word_pos());
        }
    }

    let mut pend = Writer::default();
    pend.u64(pending.len() as u64);
    for c in pending {
        let json = serde_json::to_vec(c).expect("commands serialize");
        pend.u64(json.len() as u64);
        pend.bytes(&json);
    }

    let mut out = Writer::default();
    out.bytes(MAGIC);
    out.u32(SNAPSHOT_VERSION);
    out.u32(5);
    put_section(&mut out, b"HEAD", head);
    put_section(&mut out, b"NEUR", neur);
    put_section(&mut out, b"RING", ring);
    put_section(&mut out, b"RNGS", rngs);
    put_section(&mut out, b"PEND", pend);
    SnapshotFrame(out.0)
}

type Section<'a> = ([u8; 4], &'a [u8]);

fn parse_sections(bytes: &[u8]) -> Result<Vec<Section<'_>>, SnapshotError> {
    let mut r = Reader::new(bytes);
    if r.take(8).map_err(|_| SnapshotError::Corrupt)? != MAGIC {
        return Err(SnapshotError::Corrupt);
    }
    let version = r.u32()?;
    if version != SNAPSHOT_VERSION {
        return Err(SnapshotError::Version(version));
    }
    let count = r.u32()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let tag = r.arr::<4>()?;
        let len = usize::try_from(r.u64()?).map_err(|_| SnapshotError::Corrupt)?;
        out.push((tag, r.take(len)?));
    }
    r.done()?;
    Ok(out)
}

fn find<'a>(sections: &[([u8; 4], &'a [u8])], tag: &[u8; 4]) -> Result<&'a [u8], SnapshotError> {
    sections
        .iter()
        .find(|(t, _)| t == tag)
        .map(|(_, s)| *s)
        .ok_or(SnapshotError::Corrupt)
}

pub(crate) fn decode(
    frame: &SnapshotFrame,
    net: Arc<BuiltNetwork>,
    workers: usize,
) -> Result<World, SnapshotError> {
    let sections = parse_sections(&frame.0)?;

    let mut head = Reader::new(find(&sections, b"HEAD")?);
    let tick = head.u64()?;
    let n = head.u32()?;
    let l = head.u32()? as usize;
    let _dt = head.f64()?;
    let _seed = head.u64()?;
    let paused = head.u8()? != 0;
    let stop = head.u8()? != 0;
    let has_budget = head.u8()? != 0;
    let budget = head.u64()?;
    let schedule_cursor = head.u64()? as usize;
    let fingerprint = head.arr::<32>()?;
    head.done()?;
    if fingerprint != net.fingerprint()
        || n != net.neuron_count()
        || l != net.max_delay as usize + 1
    {
        return Err(SnapshotError::NetworkMismatch);
    }
    if schedule_cursor > net.schedule.len() {
        return Err(SnapshotError::Corrupt);
    }

    let mut neur = Reader::new(find(&sections, b"NEUR")?);
    let mut neurons = Vec::with_capacity(n as usize);
    for g in 0..n {
        let expected = &net.populations[net.population_of(g)].model;
        let tag = neur.u8()?;
        let (state, params) = match (tag, expected) {
            (0, ModelParams::Lif(_)) => {
                let s = LifState {
                    v: neur.f64()?,
                    refrac_remaining: neur.f64()?,
                };
                let p = LifParams {
                    v_rest: neur.f64()?,
                    v_thresh: neur.f64()?,
                    v_reset: neur.f64()?,
                    c_m: neur.f64()?,
                    r_m: neur.f64()?,
                    t_refrac: neur.f64()?,
                };
                (Dynamics::Lif(s), ModelParams::Lif(p))
            }
            (1, ModelParams::Izhikevich(_)) => {
                let s = IzhState {
                    v: neur.f64()?,
                    u: neur.f64()?,
                };
                let p = IzhParams {
                    a: neur.f64()?,
                    b: neur.f64()?,
                    c: neur.f64()?,
                    d: neur.f64()?,
                    v_peak: neur.f64()?,
                };
                (Dynamics::Izh(s), ModelParams::Izhikevich(p))
            }
            _ => return Err(SnapshotError::Corrupt),
        };
        let synapse = SynapseParams {
            tau_syn: neur.f64()?,
        };
        let kind = match neur.u8()? {
            0 => InputKind::ConstantCurrent,
            1 => InputKind::PoissonSpikes,
            _ => return Err(SnapshotError::Corrupt),
        };
        let input = InputSpec {
            kind,
            amplitude: neur.f64()?,
            rate: neur.f64()?,
        };
        let syn = neur.f64()?;
        neurons.push(Neuron {
            state,
            params,
            synapse,
            decay: synapse.decay_factor(net.dt),
            input,
            syn,
        });
    }
    neur.done()?;

    let mut ring_r = Reader::new(find(&sections, b"RING")?);
    let mut ring = Vec::with_capacity(n as usize * l);
    for _ in 0..n as usize * l {
        ring.push(ring_r.f64()?);
    }
    ring_r.done()?;

    let mut rng_r = Reader::new(find(&sections, b"RNGS")?);
    let rng_seed = rng_r.arr::<32>()?;
    let mut pos = Vec::with_capacity(n as usize);
    for _ in 0..n {
        pos.push(rng_r.u128()?);
    }
    rng_r.done()?;

    let mut pend_r = Reader::new(find(&sections, b"PEND")?);
    let count = pend_r.u64()?;
    let mut pending = Vec::new();
    for _ in 0..count {
        let len = pend_r.u64()? as usize;
        let cmd: SimCommand =
            serde_json::from_slice(pend_r.take(len)?).map_err(|_| SnapshotError::Corrupt)?;
        pending.push(cmd);
    }
    pend_r.done()?;

    let ctrl = Control {
        tick,
        paused,
        stop,
        budget: has_budget.then_some(budget),
        pending,
        schedule_cursor,
        ring_len: l,
        rng_seed,
    };
    Ok(World::assemble(
        net,
        workers,
        neurons,
        ring,
        Some(pos),
        ctrl,
    ))
}
