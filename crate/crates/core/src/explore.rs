//! Offline design-space exploration: grid sweeps, per-cell stability
//! metrics and classification of balanced parameter regions.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::config_hash;
use crate::engine::{run, EngineConfig, EngineError, NoCommands, SpikeRecord, SpikeRecorder};
use crate::network::{build_network, BuiltNetwork, NetworkConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepAxis {
    /// Dotted path into the config, e.g. `populations.exc.params.v_thresh`.
    /// List elements are addressed by `name` or by index.
    pub path: String,
    pub values: Vec<f64>,
}

fn default_warmup() -> f64 {
    100.0
}

fn default_parallel() -> usize {
    1
}

fn default_saturation() -> f64 {
    200.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub base: NetworkConfig,
    pub axes: Vec<SweepAxis>,
    pub duration_ms: f64,
    #[serde(default = "default_warmup")]
    pub warmup_ms: f64,
    /// Cells run concurrently.
    #[serde(default = "default_parallel")]
    pub parallel: usize,
    /// Per-neuron rate above which a neuron counts as saturated.
    #[serde(default = "default_saturation")]
    pub saturation_hz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BalanceCriterion {
    pub rate_lo: f64,
    pub rate_hi: f64,
    pub max_cv: f64,
    pub max_silent: f64,
    pub max_saturated: f64,
}

impl Default for BalanceCriterion {
    fn default() -> Self {
        Self {
            rate_lo: 1.0,
            rate_hi: 100.0,
            max_cv: 1.5,
            max_silent: 0.2,
            max_saturated: 0.2,
        }
    }
}

impl BalanceCriterion {
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.rate_lo < self.rate_hi) {
            out.push("rate_lo must be < rate_hi".into());
        }
        for (name, v) in [
            ("rate_lo", self.rate_lo),
            ("max_cv", self.max_cv),
            ("max_silent", self.max_silent),
            ("max_saturated", self.max_saturated),
        ] {
            if !(v >= 0.0) {
                out.push(format!("{name} must be >= 0"));
            }
        }
        out
    }
}

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("invalid sweep spec: {0}")]
    Spec(String),
    #[error("unknown parameter path {0}")]
    UnknownPath(String),
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl SweepSpec {
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.axes.is_empty() {
            out.push("at least one axis required".into());
        }
        for a in &self.axes {
            if a.values.is_empty() {
                out.push(format!("axis {} has no values", a.path));
            }
        }
        if !(self.warmup_ms >= 0.0) {
            out.push("warmup_ms must be >= 0".into());
        }
        if !(self.duration_ms > self.warmup_ms) {
            out.push("duration_ms must be > warmup_ms".into());
        }
        if self.parallel < 1 {
            out.push("parallel must be >= 1".into());
        }
        out
    }

    /// Number of grid cells.
    pub fn cell_count(&self) -> usize {
        self.axes.iter().map(|a| a.values.len()).product()
    }

    /// Axis values of cell `index`; the first axis varies slowest.
    pub fn cell_values(&self, mut index: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.axes.len()];
        for (k, axis) in self.axes.iter().enumerate().rev() {
            let n = axis.values.len();
            out[k] = axis.values[index % n];
            index /= n;
        }
        out
    }
}

/// Return a copy of `config` with the value at `path` replaced.
pub fn set_path(
    config: &NetworkConfig,
    path: &str,
    value: f64,
) -> Result<NetworkConfig, SweepError> {
    let unknown = || SweepError::UnknownPath(path.to_string());
    let mut root = serde_json::to_value(config).expect("config serializes");
    let mut node = &mut root;
    for seg in path.split('.') {
        node = match node {
            Value::Object(map) => map.get_mut(seg).ok_or_else(unknown)?,
            Value::Array(items) => {
                let pos = items
                    .iter()
                    .position(|it| it.get("name").and_then(Value::as_str) == Some(seg))
                    .or_else(|| seg.parse::<usize>().ok().filter(|&i| i < items.len()))
                    .ok_or_else(unknown)?;
                &mut items[pos]
            }
            _ => return Err(unknown()),
        };
    }
    *node = match node {
        Value::Number(n) if n.is_u64() || n.is_i64() => {
            if value.fract() != 0.0 || !value.is_finite() {
                return Err(SweepError::Spec(format!(
                    "{path} needs an integer value, got {value}"
                )));
            }
            if value >= 0.0 {
                Value::from(value as u64)
            } else {
                Value::from(value as i64)
            }
        }
        Value::Number(_) => serde_json::Number::from_f64(value)
            .map(Value::Number)
            .ok_or_else(|| SweepError::Spec(format!("{path}: non-finite value")))?,
        _ => return Err(unknown()),
    };
    serde_json::from_value(root).map_err(|e| SweepError::Spec(format!("{path}: {e}")))
}

/// Every cell's config, in grid order.
pub fn expand_grid(spec: &SweepSpec) -> Result<Vec<NetworkConfig>, SweepError> {
    if let Some(v) = spec.violations().into_iter().next() {
        return Err(SweepError::Spec(v));
    }
    (0..spec.cell_count())
        .map(|i| {
            spec.axes
                .iter()
                .zip(spec.cell_values(i))
                .try_fold(spec.base.clone(), |cfg, (axis, v)| {
                    set_path(&cfg, &axis.path, v)
                })
        })
        .collect()
}

/// Seed for cell `index` of a sweep rooted at `base_seed`.
pub fn cell_seed(base_seed: u64, index: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(b"sweep-cell");
    h.update(base_seed.to_le_bytes());
    h.update((index as u64).to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellStats {
    /// Post-warmup spikes per neuron per second.
    pub rate_hz: f64,
    /// Coefficient of variation of pooled per-neuron ISIs; `None` when no
    /// neuron spiked twice.
    pub isi_cv: Option<f64>,
    pub frac_silent: f64,
    pub frac_saturated: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum CellMetrics {
    Diverged,
    Measured(CellStats),
}

/// Stability metrics of one run over the window `[warmup, duration)` ms.
pub fn compute_metrics(
    spikes: &[SpikeRecord],
    net: &BuiltNetwork,
    duration_ms: f64,
    warmup_ms: f64,
    saturation_hz: f64,
) -> CellStats {
    let n = net.neuron_count() as usize;
    let seconds = (duration_ms - warmup_ms) / 1000.0;
    let mut counts = vec![0u64; n];
    let mut last: Vec<Option<u64>> = vec![None; n];
    let mut isis = Vec::new();
    for s in spikes {
        let t_ms = s.tick as f64 * net.dt;
        if t_ms < warmup_ms || t_ms >= duration_ms {
            continue;
        }
        let i = s.neuron as usize;
        counts[i] += 1;
        if let Some(prev) = last[i] {
            isis.push((s.tick - prev) as f64 * net.dt);
        }
        last[i] = Some(s.tick);
    }
    let total: u64 = counts.iter().sum();
    let silent = counts.iter().filter(|&&c| c == 0).count();
    let saturated = counts
        .iter()
        .filter(|&&c| c as f64 / seconds > saturation_hz)
        .count();
    let isi_cv = (!isis.is_empty()).then(|| {
        let m = isis.len() as f64;
        let mean = isis.iter().sum::<f64>() / m;
        let var = isis.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / m;
        var.sqrt() / mean
    });
    CellStats {
        rate_hz: total as f64 / n as f64 / seconds,
        isi_cv,
        frac_silent: silent as f64 / n as f64,
        frac_saturated: saturated as f64 / n as f64,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CellClass {
    Balanced,
    Silent,
    Saturated,
    Irregular,
    Diverged,
}

impl fmt::Display for CellClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CellClass::Balanced => "balanced",
            CellClass::Silent => "silent",
            CellClass::Saturated => "saturated",
            CellClass::Irregular => "irregular",
            CellClass::Diverged => "diverged",
        })
    }
}

/// Precedence: diverged, silent, saturated, irregular, balanced. An
/// undefined CV never makes a cell irregular.
pub fn classify(metrics: &CellMetrics, c: &BalanceCriterion) -> CellClass {
    let s = match metrics {
        CellMetrics::Diverged => return CellClass::Diverged,
        CellMetrics::Measured(s) => s,
    };
    if s.rate_hz < c.rate_lo || s.frac_silent > c.max_silent {
        CellClass::Silent
    } else if s.rate_hz > c.rate_hi || s.frac_saturated > c.max_saturated {
        CellClass::Saturated
    } else if s.isi_cv.is_some_and(|cv| cv > c.max_cv) {
        CellClass::Irregular
    } else {
        CellClass::Balanced
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub index: usize,
    pub seed: u64,
    pub values: Vec<f64>,
    /// Per-cell failure (invalid config) as a message.
    pub outcome: Result<(CellMetrics, CellClass), String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub axes: Vec<String>,
    pub rows: Vec<SweepRow>,
    pub base_seed: u64,
    pub config_hash: String,
}

/// Run one cell to completion and measure it.
pub fn run_cell(
    config: &NetworkConfig,
    duration_ms: f64,
    warmup_ms: f64,
    saturation_hz: f64,
) -> Result<CellMetrics, String> {
    let net = Arc::new(build_network(config).map_err(|e| e.to_string())?);
    let ticks = (duration_ms / net.dt).round() as u64;
    let cfg = EngineConfig {
        workers: 1,
        max_ticks: ticks,
        telemetry_decimation: 1,
    };
    let mut rec = SpikeRecorder::default();
    match run(net.clone(), &cfg, &mut NoCommands, &mut rec) {
        Ok(_) => Ok(CellMetrics::Measured(compute_metrics(
            &rec.spikes,
            &net,
            duration_ms,
            warmup_ms,
            saturation_hz,
        ))),
        Err(EngineError::Diverged { .. }) => Ok(CellMetrics::Diverged),
        Err(e) => Err(e.to_string()),
    }
}

/// Evaluate every grid cell; rows come back in grid order whatever the
/// completion order. `workers` bounds the number of concurrent cells.
pub fn run_sweep(
    spec: &SweepSpec,
    criterion: &BalanceCriterion,
    workers: usize,
) -> Result<SweepResult, SweepError> {
    if let Some(v) = criterion.violations().into_iter().next() {
        return Err(SweepError::Spec(v));
    }
    if let Some(v) = spec.violations().into_iter().next() {
        return Err(SweepError::Spec(v));
    }
    // surface unknown paths before running anything
    for axis in &spec.axes {
        set_path(&spec.base, &axis.path, axis.values[0])?;
    }

    let eval = |index: usize| {
        let seed = cell_seed(spec.base.seed, index);
        let values = spec.cell_values(index);
        let mut base = spec.base.clone();
        base.seed = seed;
        let outcome = spec
            .axes
            .iter()
            .zip(&values)
            .try_fold(base, |cfg, (axis, &v)| set_path(&cfg, &axis.path, v))
            .map_err(|e| e.to_string())
            .and_then(|cfg| run_cell(&cfg, spec.duration_ms, spec.warmup_ms, spec.saturation_hz))
            .map(|m| {
                let class = classify(&m, criterion);
                (m, class)
            });
        SweepRow {
            index,
            seed,
            values,
            outcome,
        }
    };

    let cells = spec.cell_count();
    let rows: Vec<SweepRow> = if workers <= 1 {
        (0..cells).map(eval).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| SweepError::Spec(format!("thread pool: {e}")))?;
        pool.install(|| (0..cells).into_par_iter().map(eval).collect())
    };

    Ok(SweepResult {
        axes: spec.axes.iter().map(|a| a.path.clone()).collect(),
        rows,
        base_seed: spec.base.seed,
        config_hash: config_hash(&spec.base),
    })
}

impl SweepResult {
    pub fn count(&self, class: CellClass) -> usize {
        self.rows
            .iter()
            .filter(|r| matches!(r.outcome, Ok((_, c)) if c == class))
            .count()
    }

    /// CSV with a leading `#` provenance line, then the header
    /// `<axes...>,rate_hz,isi_cv,frac_silent,frac_saturated,class`.
    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "# config_hash={} base_seed={}\n",
            self.config_hash, self.base_seed
        );
        let mut header: Vec<&str> = self.axes.iter().map(String::as_str).collect();
        header.extend([
            "rate_hz",
            "isi_cv",
            "frac_silent",
            "frac_saturated",
            "class",
        ]);
        out.push_str(&header.join(","));
        out.push('\n');
        for row in &self.rows {
            let mut cols: Vec<String> = row.values.iter().map(|v| v.to_string()).collect();
            match &row.outcome {
                Ok((CellMetrics::Measured(s), class)) => {
                    cols.push(s.rate_hz.to_string());
                    cols.push(s.isi_cv.map_or_else(|| "NA".into(), |v| v.to_string()));
                    cols.push(s.frac_silent.to_string());
                    cols.push(s.frac_saturated.to_string());
                    cols.push(class.to_string());
                }
                Ok((CellMetrics::Diverged, class)) => {
                    cols.extend([
                        "".into(),
                        "".into(),
                        "".into(),
                        "".into(),
                        class.to_string(),
                    ]);
                }
                Err(_) => {
                    cols.extend(["".into(), "".into(), "".into(), "".into(), "error".into()]);
                }
            }
            out.push_str(&cols.join(","));
            out.push('\n');
        }
        out
    }

    /// JSON summary with the spec, criterion and every cell seed embedded.
    pub fn summary_json(&self, spec: &SweepSpec, criterion: &BalanceCriterion) -> Value {
        let cells: Vec<Value> = self
            .rows
            .iter()
            .map(|r| {
                let (class, error) = match &r.outcome {
                    Ok((_, c)) => (Value::from(c.to_string()), Value::Null),
                    Err(e) => (Value::from("error"), Value::from(e.as_str())),
                };
                serde_json::json!({
                    "index": r.index,
                    "seed": r.seed,
                    "values": r.values,
                    "class": class,
                    "error": error,
                })
            })
            .collect();
        serde_json::json!({
            "config_hash": self.config_hash,
            "base_seed": self.base_seed,
            "spec": spec,
            "criterion": criterion,
            "counts": {
                "balanced": self.count(CellClass::Balanced),
                "silent": self.count(CellClass::Silent),
                "saturated": self.count(CellClass::Saturated),
                "irregular": self.count(CellClass::Irregular),
                "diverged": self.count(CellClass::Diverged),
            },
            "cells": cells,
        })
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepFile {
    #[serde(default)]
    base: Option<NetworkConfig>,
    /// Path to a run document, relative to the sweep file.
    #[serde(default)]
    base_config: Option<String>,
    #[serde(default)]
    axes: Vec<SweepAxis>,
    duration_ms: f64,
    #[serde(default = "default_warmup")]
    warmup_ms: f64,
    #[serde(default = "default_parallel")]
    parallel: usize,
    #[serde(default = "default_saturation")]
    saturation_hz: f64,
    #[serde(default)]
    criterion: BalanceCriterion,
}

/// Load a TOML sweep file; returns the spec and its `[criterion]` table.
pub fn load_sweep(path: &Path) -> Result<(SweepSpec, BalanceCriterion), SweepError> {
    let io = |p: &Path| {
        let p = p.to_path_buf();
        move |source| SweepError::Io {
            path: p.display().to_string(),
            source,
        }
    };
    let text = std::fs::read_to_string(path).map_err(io(path))?;
    let file: SweepFile = toml::from_str(&text).map_err(|e| SweepError::Spec(e.to_string()))?;
    let base = match (file.base, file.base_config) {
        (Some(b), None) => b,
        (None, Some(rel)) => {
            let p = path.parent().unwrap_or(Path::new(".")).join(rel);
            crate::config::ConfigDocument::load(&p)
                .map_err(|e| SweepError::Spec(e.to_string()))?
                .network
        }
        _ => {
            return Err(SweepError::Spec(
                "exactly one of base or base_config required".into(),
            ))
        }
    };
    let spec = SweepSpec {
        base,
        axes: file.axes,
        duration_ms: file.duration_ms,
        warmup_ms: file.warmup_ms,
        parallel: file.parallel,
        saturation_hz: file.saturation_hz,
    };
    if let Some(v) = spec.violations().into_iter().next() {
        return Err(SweepError::Spec(v));
    }
    Ok((spec, file.criterion))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{InputSpec, LifParams, SynapseParams};
    use crate::network::{ModelParams, PopulationSpec};

    fn single_lif(current: f64) -> NetworkConfig {
        NetworkConfig {
            dt: 0.1,
            seed: 5,
            populations: vec![PopulationSpec {
                name: "cell".into(),
                size: 1,
                model: ModelParams::Lif(LifParams {
                    t_refrac: 0.0,
                    ..LifParams::default()
                }),
                synapse: SynapseParams::default(),
                input: InputSpec::constant(current),
            }],
            connections: vec![],
            inputs: vec![],
        }
    }

    fn spec(axes: Vec<SweepAxis>) -> SweepSpec {
        SweepSpec {
            base: single_lif(0.0),
            axes,
            duration_ms: 600.0,
            warmup_ms: 100.0,
            parallel: 1,
            saturation_hz: 200.0,
        }
    }

    fn axis(path: &str, values: &[f64]) -> SweepAxis {
        SweepAxis {
            path: path.into(),
            values: values.to_vec(),
        }
    }

    #[test]
    fn grid_is_cartesian_and_lexicographic() {
        let s = spec(vec![
            axis("populations.cell.params.v_thresh", &[-55.0, -52.0, -50.0]),
            axis("populations.cell.input.amplitude", &[1.0, 2.0, 3.0, 4.0]),
        ]);
        let grid = expand_grid(&s).unwrap();
        assert_eq!(grid.len(), 12);
        assert_eq!(s.cell_values(0), vec![-55.0, 1.0]);
        assert_eq!(s.cell_values(1), vec![-55.0, 2.0]);
        assert_eq!(s.cell_values(4), vec![-52.0, 1.0]);
        assert_eq!(grid[5].populations[0].input.amplitude, 2.0);
    }

    #[test]
    fn single_value_axis_equals_base() {
        let s = spec(vec![axis("populations.cell.input.amplitude", &[0.0])]);
        assert_eq!(expand_grid(&s).unwrap(), vec![s.base.clone()]);
    }

    #[test]
    fn path_changes_only_target() {
        let s = spec(vec![axis(
            "populations.cell.params.v_thresh",
            &[-55.0, -50.0],
        )]);
        let grid = expand_grid(&s).unwrap();
        let mut a = grid[0].clone();
        let ModelParams::Lif(p) = &mut a.populations[0].model else {
            unreachable!()
        };
        assert_eq!(p.v_thresh, -55.0);
        p.v_thresh = -50.0;
        assert_eq!(a, grid[1]);
    }

    #[test]
    fn unknown_path_rejected_by_name() {
        let s = spec(vec![axis("populations.cell.params.nonsense", &[1.0])]);
        let err = expand_grid(&s).unwrap_err();
        assert_eq!(
            err.to_string(),
            "unknown parameter path populations.cell.params.nonsense"
        );
        assert!(run_sweep(&s, &BalanceCriterion::default(), 1).is_err());
    }

    #[test]
    fn integer_paths_take_integers() {
        let cfg = set_path(&single_lif(1.0), "populations.0.size", 4.0).unwrap();
        assert_eq!(cfg.populations[0].size, 4);
        assert!(set_path(&single_lif(1.0), "populations.0.size", 4.5).is_err());
    }

    #[test]
    fn metrics_for_silence() {
        let net = build_network(&single_lif(0.0)).unwrap();
        let m = compute_metrics(&[], &net, 1100.0, 100.0, 200.0);
        assert_eq!(m.rate_hz, 0.0);
        assert_eq!(m.frac_silent, 1.0);
        assert_eq!(m.isi_cv, None);
    }

    #[test]
    fn periodic_train_has_zero_cv() {
        let net = build_network(&single_lif(0.0)).unwrap();
        let spikes: Vec<SpikeRecord> = (0..100)
            .map(|k| SpikeRecord {
                tick: 1000 + 70 * k,
                neuron: 0,
            })
            .collect();
        let m = compute_metrics(&spikes, &net, 1100.0, 100.0, 200.0);
        assert_eq!(m.isi_cv, Some(0.0));
        assert_eq!(m.frac_silent, 0.0);
    }

    #[test]
    fn analytic_rate_from_single_cell() {
        let cfg = NetworkConfig {
            dt: 0.01,
            ..single_lif(3.0)
        };
        let CellMetrics::Measured(m) = run_cell(&cfg, 1100.0, 100.0, 200.0).unwrap() else {
            panic!("diverged")
        };
        let analytic = 1000.0 / (10.0 * 2f64.ln());
        // one spike of quantization over a 1 s window
        assert!((m.rate_hz - analytic).abs() <= 1.0 + 1e-9, "{}", m.rate_hz);
    }

    #[test]
    fn classify_precedence() {
        let c = BalanceCriterion {
            rate_lo: 1.0,
            rate_hi: 50.0,
            max_cv: 1.0,
            ..BalanceCriterion::default()
        };
        let stats = |rate, cv, silent, sat| {
            CellMetrics::Measured(CellStats {
                rate_hz: rate,
                isi_cv: cv,
                frac_silent: silent,
                frac_saturated: sat,
            })
        };
        assert_eq!(classify(&stats(0.0, None, 1.0, 0.0), &c), CellClass::Silent);
        assert_eq!(
            classify(&stats(20.0, Some(0.4), 0.0, 0.0), &c),
            CellClass::Balanced
        );
        assert_eq!(classify(&CellMetrics::Diverged, &c), CellClass::Diverged);
        assert_eq!(
            classify(&stats(80.0, Some(3.0), 0.0, 0.0), &c),
            CellClass::Saturated
        );
        assert_eq!(
            classify(&stats(20.0, Some(3.0), 0.0, 0.0), &c),
            CellClass::Irregular
        );
        assert_eq!(
            classify(&stats(20.0, Some(0.1), 0.5, 0.0), &c),
            CellClass::Silent
        );
        assert_eq!(
            classify(&stats(20.0, Some(0.1), 0.0, 0.5), &c),
            CellClass::Saturated
        );
    }

    #[test]
    fn zero_input_grid_all_silent() {
        let s = spec(vec![axis(
            "populations.cell.params.v_thresh",
            &[-55.0, -50.0, -45.0],
        )]);
        let r = run_sweep(&s, &BalanceCriterion::default(), 2).unwrap();
        assert_eq!(r.count(CellClass::Silent), 3);
    }

    #[test]
    fn one_cell_sweep_matches_direct_run() {
        let s = spec(vec![axis("populations.cell.input.amplitude", &[2.0])]);
        let r = run_sweep(&s, &BalanceCriterion::default(), 1).unwrap();
        let mut direct = set_path(&s.base, "populations.cell.input.amplitude", 2.0).unwrap();
        direct.seed = cell_seed(s.base.seed, 0);
        let m = run_cell(&direct, s.duration_ms, s.warmup_ms, s.saturation_hz).unwrap();
        assert_eq!(r.rows[0].outcome.as_ref().unwrap().0, m);
    }

    #[test]
    fn diverged_cells_recorded_and_sweep_continues() {
        let s = spec(vec![axis(
            "populations.cell.input.amplitude",
            &[1e308, 2.0],
        )]);
        let r = run_sweep(&s, &BalanceCriterion::default(), 1).unwrap();
        assert_eq!(r.rows[0].outcome.as_ref().unwrap().1, CellClass::Diverged);
        assert!(r.rows[1].outcome.is_ok());
        let csv = r.to_csv();
        assert!(csv.lines().nth(2).unwrap().ends_with(",,,,diverged"));
    }

    #[test]
    fn parallel_rows_keep_grid_order() {
        let s = spec(vec![axis(
            "populations.cell.input.amplitude",
            &[3.0, 0.0, 2.0, 1.6, 4.0, 0.5],
        )]);
        let seq = run_sweep(&s, &BalanceCriterion::default(), 1).unwrap();
        let par = run_sweep(&s, &BalanceCriterion::default(), 3).unwrap();
        assert_eq!(seq, par);
        assert_eq!(seq.to_csv(), par.to_csv());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn classify_stable_under_tiny_perturbation(
                rate in 0.0f64..200.0,
                cv in 0.0f64..3.0,
                silent in 0.0f64..1.0,
                sat in 0.0f64..1.0,
                eps in -1e-13f64..1e-13,
            ) {
                let c = BalanceCriterion::default();
                // keep away from the thresholds themselves
                prop_assume!([(rate, 1.0), (rate, 100.0), (cv, 1.5), (silent, 0.2), (sat, 0.2)]
                    .iter()
                    .all(|(x, t)| (x - t).abs() > 1e-12));
                let m = |d: f64| CellMetrics::Measured(CellStats {
                    rate_hz: rate + d,
                    isi_cv: Some(cv + d),
                    frac_silent: silent,
                    frac_saturated: sat,
                });
                prop_assert_eq!(classify(&m(0.0), &c), classify(&m(eps), &c));
            }
        }
    }
}
