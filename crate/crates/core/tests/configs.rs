use std::path::PathBuf;

use spikesteer_core::explore::load_sweep;
use spikesteer_core::{build_network, validate_config, ConfigDocument};

fn configs() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

#[test]
fn example_config_builds() {
    let doc = ConfigDocument::load(&configs().join("example.toml")).unwrap();
    assert!(validate_config(&doc.network).is_empty());
    let net = build_network(&doc.network).unwrap();
    assert_eq!(net.neuron_count(), 1000);
    assert_eq!(doc.engine.workers, 4);
    assert_eq!(net.schedule.len(), 1);
}

#[test]
fn example_sweep_loads() {
    let (spec, crit) = load_sweep(&configs().join("fi-sweep.toml")).unwrap();
    assert_eq!(spec.cell_count(), 18);
    assert_eq!(crit.rate_hi, 100.0);
    assert_eq!(spec.saturation_hz, 300.0);
}
