use stlseeker::orchestrator::{ExperimentConfig, OrchestratorError, RunState, CASE1_CONFIG, CASE2_CONFIG};
use stlseeker::world::PlantKind;

/// Case II shrunk so a cycle takes well under a second.
fn quick(extra: &[&str]) -> ExperimentConfig {
    let mut o: Vec<String> = [
        "model.epochs_initial=40",
        "model.epochs_refit=20",
        "model.sigma_inputs=20",
        "model.sigma_masks=10",
        "optimizer.max_steps=60",
        "optimizer.window=20",
        "policy.hidden=8",
        "policy.layers=1",
        "eval.k_fast=20",
        "eval.k_confirm=40",
        "data.n0=4",
        "data.n=2",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    o.extend(extra.iter().map(|s| s.to_string()));
    ExperimentConfig::parse(CASE2_CONFIG, &o).unwrap()
}

#[test]
fn episode_accounting_and_reports() {
    let cfg = quick(&["eval.target=1.5", "eval.max_cycles=3"]);
    let dir = tempfile::tempdir().unwrap();
    let mut state = RunState::new(cfg).unwrap();
    state.run_to_end(Some(dir.path()), |_, _| {}).unwrap();
    assert_eq!(state.cycle, 3);
    assert!(!state.converged);
    // initial episodes plus one batch after every cycle but the last
    assert_eq!(state.episodes, 4 + 2 * 2);
    for (i, r) in state.reports.iter().enumerate() {
        assert_eq!(r.cycle, i + 1);
        assert!((0.0..=1.0).contains(&r.gamma));
        assert!((0.0..=1.0).contains(&r.collision_rate));
    }
    for c in 1..=3 {
        for rel in [
            format!("checkpoints/cycle_{c:02}.json"),
            format!("reports/cycle_{c:02}.json"),
            format!("traces/cycle_{c:02}.csv"),
        ] {
            assert!(dir.path().join(&rel).exists(), "{rel}");
        }
    }
    assert!(dir.path().join("dataset.csv").exists());
    let cfg_back = ExperimentConfig::load(&dir.path().join("config.toml"), &[]).unwrap();
    assert_eq!(cfg_back, state.config);
}

#[test]
fn checkpoint_round_trip_and_exact_resume() {
    let cfg = quick(&["eval.target=1.5", "eval.max_cycles=3"]);
    let dir = tempfile::tempdir().unwrap();
    let mut full = RunState::new(cfg).unwrap();
    full.run_to_end(Some(dir.path()), |_, _| {}).unwrap();

    let ck = dir.path().join("checkpoints/cycle_01.json");
    let mut resumed = RunState::load(&ck).unwrap();
    assert_eq!(resumed.cycle, 1);
    assert_eq!(resumed.reports[0], full.reports[0]);
    // a save of the loaded state reproduces the file byte for byte
    let again = dir.path().join("again.json");
    resumed.save(&again).unwrap();
    assert_eq!(std::fs::read(&ck).unwrap(), std::fs::read(&again).unwrap());

    resumed.run_to_end(None, |_, _| {}).unwrap();
    assert_eq!(resumed.cycle, 3);
    for (a, b) in resumed.reports.iter().zip(&full.reports) {
        assert!(a.same_outcome(b), "{a:?}\n{b:?}");
    }
    assert_eq!(resumed.policy, full.policy);
    assert_eq!(resumed.model, full.model);
    assert_eq!(resumed.dataset, full.dataset);
}

#[test]
fn checkpoint_errors_are_typed() {
    let dir = tempfile::tempdir().unwrap();
    let state = RunState::new(quick(&[])).unwrap();
    let path = dir.path().join("ck.json");
    state.save(&path).unwrap();

    match RunState::load_for(&path, PlantKind::Unicycle) {
        Err(OrchestratorError::PlantKindMismatch { expected, found }) => {
            assert_eq!((expected, found), (PlantKind::Unicycle, PlantKind::Integrator));
        }
        other => panic!("{other:?}"),
    }
    assert!(RunState::load_for(&path, PlantKind::Integrator).is_ok());

    let text = std::fs::read_to_string(&path).unwrap();
    std::fs::write(&path, text.replacen("\"version\":1", "\"version\":99", 1)).unwrap();
    assert!(matches!(RunState::load(&path), Err(OrchestratorError::Version { found: 99, .. })));

    std::fs::write(&path, &text[..text.len() / 2]).unwrap();
    assert!(matches!(RunState::load(&path), Err(OrchestratorError::Corrupt { .. })));

    std::fs::write(&path, text.replacen("\"cycle\":0", "\"cycle\":\"zero\"", 1)).unwrap();
    assert!(matches!(RunState::load(&path), Err(OrchestratorError::Corrupt { .. })));

    assert!(matches!(RunState::load(&dir.path().join("missing.json")), Err(OrchestratorError::Io { .. })));
}

#[test]
fn evaluation_is_deterministic() {
    let state = RunState::new(ExperimentConfig::parse(CASE1_CONFIG, &[]).unwrap()).unwrap();
    let a = state.evaluate(24, 5, true).unwrap();
    let b = state.evaluate(24, 5, true).unwrap();
    assert_eq!(a, b);
    let c = state.evaluate(24, 6, true).unwrap();
    assert_ne!(a.rollouts, c.rollouts);
    // rollout i does not depend on how many others run
    let d = state.evaluate(10, 5, true).unwrap();
    assert_eq!(d.rollouts[..], a.rollouts[..10]);
}

#[test]
fn tautology_gives_full_success() {
    let cfg = ExperimentConfig::parse(CASE1_CONFIG, &["spec.formula=\"G[0,5] true\"".into(), "spec.horizon=5".into()]).unwrap();
    let state = RunState::new(cfg).unwrap();
    let ev = state.evaluate(50, 1, true).unwrap();
    assert_eq!(ev.gamma, 1.0);
}

#[test]
fn unreachable_spec_gives_zero_success() {
    let cfg = ExperimentConfig::parse(CASE1_CONFIG, &["spec.formula=\"G[0,5] not true\"".into(), "spec.horizon=5".into()]).unwrap();
    let state = RunState::new(cfg).unwrap();
    assert_eq!(state.evaluate(20, 1, true).unwrap().gamma, 0.0);
}

#[test]
fn failing_cycle_leaves_partial_report() {
    // a huge but finite step size blows the model fit up
    let cfg = quick(&["model.lr=1e300"]);
    let dir = tempfile::tempdir().unwrap();
    let mut state = RunState::new(cfg).unwrap();
    let err = state.run_to_end(Some(dir.path()), |_, _| {}).unwrap_err();
    assert!(matches!(err, OrchestratorError::Model(_)), "{err}");
    let partial = std::fs::read_to_string(dir.path().join("reports/cycle_01_partial.json")).unwrap();
    assert!(partial.contains("training loss"), "{partial}");
    assert_eq!(state.cycle, 0);
}

#[test]
fn bad_configs_are_rejected() {
    for o in [
        "data.n0=0",
        "model.dropout=1.0",
        "model.lr=inf",
        "optimizer.lr=-1.0",
        "spec.k=0",
        "spec.formula=\"F[0,3] Nowhere\"",
        "cbf.weights=[1.0]",
        "cbf.alpha=2.0",
        "plant.kind=\"boat\"",
        "eval.surprise=1",
    ] {
        assert!(ExperimentConfig::parse(CASE2_CONFIG, &[o.to_string()]).is_err(), "{o}");
    }
}
