use std::path::PathBuf;

use msb_core::experiment::{AgentKind, ExperimentSpec, SweepVariable};

fn config(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

#[test]
fn defaults_file_matches_builtin_defaults() {
    let spec = ExperimentSpec::load(&config("defaults.toml")).unwrap();
    assert_eq!(spec, ExperimentSpec::default());
}

#[test]
fn shipped_configs_parse() {
    let bandwidth = ExperimentSpec::load(&config("bandwidth_sweep.toml")).unwrap();
    assert_eq!(bandwidth.sweep.unwrap().variable, SweepVariable::Bandwidth);

    let task = ExperimentSpec::load(&config("task_size_sweep.toml")).unwrap();
    assert_eq!(task.sweep.unwrap().values, vec![20.0, 25.0, 30.0, 35.0, 40.0]);

    let num_bs = ExperimentSpec::load(&config("num_bs_sweep.toml")).unwrap();
    assert_eq!(num_bs.sweep.unwrap().values.len(), 7);

    let convergence = ExperimentSpec::load(&config("convergence.toml")).unwrap();
    assert!(convergence.mechanisms.is_empty());
    assert_eq!(convergence.agents.len(), 4);
    assert!(convergence.agents.contains(&AgentKind::Ppo));
}

#[test]
fn unknown_keys_are_rejected() {
    let err = ExperimentSpec::from_toml("name = \"x\"\n[trainer]\ndiscont = 0.5\n");
    assert!(err.is_err());
}
