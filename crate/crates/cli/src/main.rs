use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use spikesteer_core::control::{is_sampled, Server, ServerConfig};
use spikesteer_core::engine::{
    run_world, CommandKind, CommandOutcome, CommandSource, Effect, EngineConfig, EngineError,
    NoCommands, RunSummary, ScheduledCommands, SimCommand, SnapshotFrame, TelemetrySink,
    TickReport, World,
};
use spikesteer_core::explore::{load_sweep, run_sweep};
use spikesteer_core::{build_network, ConfigDocument};

#[derive(Parser)]
#[command(
    name = "spikesteer",
    version,
    about = "Steerable spiking network simulator"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a network offline and write spikes and a summary.
    Run(RunArgs),
    /// Run a network under live control over TCP / WebSocket.
    Serve(ServeArgs),
    /// Evaluate a parameter grid.
    Sweep(SweepArgs),
    /// Continue a run from a snapshot file.
    Replay(ReplayArgs),
}

#[derive(Args)]
struct Common {
    /// Run document (TOML).
    #[arg(long, env = "SPIKESTEER_CONFIG")]
    config: PathBuf,
    #[arg(long, env = "SPIKESTEER_WORKERS")]
    workers: Option<usize>,
    /// Absolute tick to stop at.
    #[arg(long, env = "SPIKESTEER_MAX_TICKS")]
    max_ticks: Option<u64>,
    #[arg(long, env = "SPIKESTEER_SEED")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, env = "SPIKESTEER_OUT", default_value = "out")]
    out: PathBuf,
    /// Record membrane potential of these neurons (comma separated).
    #[arg(long, value_delimiter = ',')]
    record_membrane: Vec<u32>,
    /// Membrane sampling interval in ticks.
    #[arg(long, env = "SPIKESTEER_DECIMATION")]
    decimation: Option<u64>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    /// Also write a snapshot at the boundary before this tick.
    #[arg(long)]
    snapshot_at: Option<u64>,
}

#[derive(Args)]
struct ServeArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, env = "SPIKESTEER_LISTEN", default_value = "127.0.0.1:7878")]
    listen: String,
    #[arg(long, env = "SPIKESTEER_WS_PATH", default_value = "/ws")]
    ws_path: String,
}

#[derive(Args)]
struct SweepArgs {
    /// Sweep file (TOML).
    #[arg(long, env = "SPIKESTEER_SPEC")]
    spec: PathBuf,
    /// Concurrent cells; defaults to the file's `parallel`.
    #[arg(long, env = "SPIKESTEER_PARALLEL")]
    parallel: Option<usize>,
    #[arg(long, env = "SPIKESTEER_OUT", default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct ReplayArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    snapshot: PathBuf,
    /// Ticks to run past the snapshot; overrides --max-ticks.
    #[arg(long)]
    ticks: Option<u64>,
}

enum Failure {
    Validation(String),
    Diverged(String),
    Environment(String),
}

impl Failure {
    fn report(self) -> ExitCode {
        let (code, kind, msg) = match self {
            Failure::Validation(m) => (2, "invalid input", m),
            Failure::Diverged(m) => (3, "numerical divergence", m),
            Failure::Environment(m) => (4, "environment error", m),
        };
        eprintln!("spikesteer: {kind}: {msg}");
        ExitCode::from(code)
    }
}

impl From<EngineError> for Failure {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Diverged { .. } => Failure::Diverged(e.to_string()),
            _ => Failure::Validation(e.to_string()),
        }
    }
}

fn env_err(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| Failure::Environment(format!("{}: {e}", path.display()))
}

struct Prepared {
    doc: ConfigDocument,
    engine: EngineConfig,
    net: Arc<spikesteer_core::BuiltNetwork>,
    hash: String,
}

fn prepare(c: &Common) -> Result<Prepared, Failure> {
    let mut doc = ConfigDocument::load(&c.config).map_err(|e| match e {
        spikesteer_core::ConfigError::Io { .. } => Failure::Environment(e.to_string()),
        _ => Failure::Validation(e.to_string()),
    })?;
    if let Some(seed) = c.seed {
        doc.network.seed = seed;
    }
    if let Some(w) = c.workers {
        doc.engine.workers = w;
    }
    if let Some(t) = c.max_ticks {
        doc.engine.max_ticks = t;
    }
    if let Some(k) = c.decimation {
        doc.engine.decimation = k;
    }
    let engine = doc.engine_config();
    if let Some(v) = engine.violations().into_iter().next() {
        return Err(Failure::Validation(v));
    }
    let net = build_network(&doc.network).map_err(|e| {
        Failure::Validation(
            e.0.iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join("; "),
        )
    })?;
    if let Some(&n) = c.record_membrane.iter().find(|&&n| n >= net.neuron_count()) {
        return Err(Failure::Validation(format!(
            "unknown neuron {n} in --record-membrane"
        )));
    }
    let hash = doc.config_hash();
    Ok(Prepared {
        doc,
        engine,
        net: Arc::new(net),
        hash,
    })
}

/// Streams spikes, sampled membrane potentials and snapshots to files.
struct FileSink {
    spikes: BufWriter<File>,
    membrane: Option<(BufWriter<File>, Vec<u32>, u64)>,
    out: PathBuf,
    error: Option<String>,
}

impl FileSink {
    fn create(out: &Path, p: &Prepared, neurons: &[u32]) -> Result<Self, Failure> {
        std::fs::create_dir_all(out).map_err(env_err(out))?;
        let provenance = format!("# config_hash={} seed={}\n", p.hash, p.doc.network.seed);
        let open = |name: &str, header: &str| -> Result<BufWriter<File>, Failure> {
            let path = out.join(name);
            let mut w = BufWriter::new(File::create(&path).map_err(env_err(&path))?);
            w.write_all(provenance.as_bytes())
                .and_then(|()| w.write_all(header.as_bytes()))
                .map_err(env_err(&path))?;
            Ok(w)
        };
        let spikes = open("spikes.csv", "tick,neuron\n")?;
        let membrane = if neurons.is_empty() {
            None
        } else {
            Some((
                open("membrane.csv", "tick,neuron,v\n")?,
                neurons.to_vec(),
                p.engine.telemetry_decimation,
            ))
        };
        Ok(Self {
            spikes,
            membrane,
            out: out.to_path_buf(),
            error: None,
        })
    }

    fn note(&mut self, r: std::io::Result<()>) {
        if let Err(e) = r {
            self.error.get_or_insert_with(|| e.to_string());
        }
    }

    fn finish(mut self) -> Result<(), Failure> {
        let r = self.spikes.flush();
        self.note(r);
        if let Some((w, _, _)) = &mut self.membrane {
            let r = w.flush();
            self.note(r);
        }
        match self.error {
            Some(e) => Err(Failure::Environment(format!("writing outputs: {e}"))),
            None => Ok(()),
        }
    }
}

impl TelemetrySink for FileSink {
    fn wants_membrane(&self, tick: u64) -> bool {
        self.membrane
            .as_ref()
            .is_some_and(|(_, _, k)| is_sampled(tick, *k))
    }

    fn on_tick(&mut self, r: &TickReport<'_>) {
        let mut res = Ok(());
        for &n in r.spikes {
            res = res.and_then(|()| writeln!(self.spikes, "{},{n}", r.tick));
        }
        if let (Some(v), Some((w, neurons, k))) = (r.membrane, &mut self.membrane) {
            if is_sampled(r.tick, *k) {
                for &n in neurons.iter() {
                    res = res.and_then(|()| writeln!(w, "{},{n},{}", r.tick, v[n as usize]));
                }
            }
        }
        self.note(res);
    }

    fn on_outcome(&mut self, o: &CommandOutcome) {
        if let Ok(Effect::Snapshot(bytes)) = &o.result {
            let path = self.out.join(format!("snapshot-{}.snap", o.effective_tick));
            let r = std::fs::write(&path, bytes);
            self.note(r);
        }
    }
}

fn write_summary(out: &Path, p: &Prepared, workers: usize, s: &RunSummary) -> Result<(), Failure> {
    let populations: Vec<_> = s
        .populations
        .iter()
        .map(|r| json!({"name": r.name, "spikes": r.spikes, "rate_hz": r.rate_hz}))
        .collect();
    let summary = json!({
        "config_hash": p.hash,
        "seed": p.doc.network.seed,
        "workers": workers,
        "dt": p.net.dt,
        "start_tick": s.start_tick,
        "end_tick": s.end_tick,
        "ticks": s.ticks(),
        "total_spikes": s.total_spikes,
        "populations": populations,
        "wall_time_s": s.wall_time_s,
        "stopped": s.stopped,
    });
    let path = out.join("summary.json");
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    std::fs::write(&path, text + "\n").map_err(env_err(&path))?;
    println!(
        "{} ticks, {} spikes, {:.3} s wall",
        s.ticks(),
        s.total_spikes,
        s.wall_time_s
    );
    Ok(())
}

fn drive(
    p: &Prepared,
    c: &Common,
    mut world: World,
    source: &mut dyn CommandSource,
) -> Result<(), Failure> {
    let mut sink = FileSink::create(&c.out, p, &c.record_membrane)?;
    let result = run_world(&mut world, &p.engine, source, &mut sink);
    sink.finish()?;
    let summary = result?;
    write_summary(&c.out, p, p.engine.workers, &summary)
}

fn cmd_run(a: RunArgs) -> Result<(), Failure> {
    let p = prepare(&a.common)?;
    let world = World::new(p.net.clone(), p.engine.workers);
    match a.snapshot_at {
        Some(t) => {
            let snap = SimCommand::new(0, None, CommandKind::SnapshotRequest { path: None });
            drive(
                &p,
                &a.common,
                world,
                &mut ScheduledCommands::new(vec![(t, snap)]),
            )
        }
        None => drive(&p, &a.common, world, &mut NoCommands),
    }
}

fn cmd_replay(a: ReplayArgs) -> Result<(), Failure> {
    let mut p = prepare(&a.common)?;
    let bytes = std::fs::read(&a.snapshot).map_err(env_err(&a.snapshot))?;
    let world = World::restore(
        &SnapshotFrame::from_bytes(bytes),
        p.net.clone(),
        p.engine.workers,
    )
    .map_err(|e| Failure::Validation(format!("{}: {e}", a.snapshot.display())))?;
    if let Some(n) = a.ticks {
        p.engine.max_ticks = world.tick() + n;
    }
    drive(&p, &a.common, world, &mut NoCommands)
}

fn cmd_serve(a: ServeArgs) -> Result<(), Failure> {
    let p = prepare(&a.common)?;
    let c = &a.common;
    std::fs::create_dir_all(&c.out).map_err(env_err(&c.out))?;
    let server = Server::bind(ServerConfig {
        listen: a.listen,
        ws_path: a.ws_path,
        decimation: p.engine.telemetry_decimation,
        snapshot_dir: c.out.clone(),
        ..ServerConfig::default()
    })
    .map_err(|e| Failure::Environment(e.to_string()))?;
    eprintln!("listening on {}", server.local_addr());
    let mut sink = FileSink::create(&c.out, &p, &c.record_membrane)?;
    let world = World::new(p.net.clone(), p.engine.workers);
    let result = server.run(world, &p.engine, &mut sink);
    sink.finish()?;
    let summary = result.map_err(|e| match e {
        spikesteer_core::control::ServeError::Engine(e) => Failure::from(e),
        e => Failure::Environment(e.to_string()),
    })?;
    write_summary(&c.out, &p, p.engine.workers, &summary)
}

fn cmd_sweep(a: SweepArgs) -> Result<(), Failure> {
    let (spec, criterion) = load_sweep(&a.spec).map_err(|e| match e {
        spikesteer_core::explore::SweepError::Io { .. } => Failure::Environment(e.to_string()),
        e => Failure::Validation(e.to_string()),
    })?;
    let workers = a.parallel.unwrap_or(spec.parallel);
    let result =
        run_sweep(&spec, &criterion, workers).map_err(|e| Failure::Validation(e.to_string()))?;
    std::fs::create_dir_all(&a.out).map_err(env_err(&a.out))?;
    let csv = a.out.join("sweep.csv");
    std::fs::write(&csv, result.to_csv()).map_err(env_err(&csv))?;
    let summary = a.out.join("sweep-summary.json");
    let text = serde_json::to_string_pretty(&result.summary_json(&spec, &criterion))
        .expect("summary serializes");
    std::fs::write(&summary, text + "\n").map_err(env_err(&summary))?;
    let failed = result.rows.iter().filter(|r| r.outcome.is_err()).count();
    println!(
        "{} cells, {} balanced, {} failed",
        result.rows.len(),
        result.count(spikesteer_core::explore::CellClass::Balanced),
        failed
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Run(a) => cmd_run(a),
        Cmd::Serve(a) => cmd_serve(a),
        Cmd::Sweep(a) => cmd_sweep(a),
        Cmd::Replay(a) => cmd_replay(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => f.report(),
    }
}
