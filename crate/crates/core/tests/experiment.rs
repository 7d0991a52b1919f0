use std::path::Path;

use kappa_core::ensemble::{acc_feature, model_input};
use kappa_core::env::{ActionVec, EnvId};
use kappa_core::experiment::{
    calibrate, read_trace_kappa, run_episode, run_sweep, snapshot_digest, trace_jsonl, CalibrationSnapshot,
    EpisodeOptions, ExperimentConfig, TraceHeader, CELLS_DIR, RECORDS_FILE, REPORT_FILE,
};
use kappa_core::perturb::{ConditionSpec, DelaySpec, MaskSpec, PerturbedEnv};
use kappa_core::{Error, VERSION};

fn mini() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.horizon = 150;
    cfg.grid.po_levels = vec![0.0, 0.5];
    cfg.grid.delay_levels = vec![0, 1];
    cfg.grid.shifts = Some(vec![]);
    cfg.grid.seeds = vec![0];
    cfg.calibration.seeds = vec![1000];
    cfg
}

fn cell_files(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut v: Vec<_> = std::fs::read_dir(dir.join(CELLS_DIR)).unwrap().map(|e| e.unwrap().path()).collect();
    v.sort();
    v
}

#[test]
fn tiny_pre_onset_buffer_is_a_calibration_error() {
    let cfg = ExperimentConfig { t_pre: 10, ..ExperimentConfig::default() };
    assert!(matches!(calibrate(&cfg), Err(Error::Calibration(_))));
}

#[test]
fn calibration_is_idempotent_and_snapshot_round_trips() {
    let cfg = mini();
    let a = calibrate(&cfg).unwrap();
    let b = calibrate(&cfg).unwrap();
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("snap.json");
    a.save(&path).unwrap();
    let loaded = CalibrationSnapshot::load(&path).unwrap();
    assert_eq!(snapshot_digest(&loaded).unwrap(), snapshot_digest(&a).unwrap());

    let cond = ConditionSpec::labeled(Some(MaskSpec::from_fraction(cfg.env, 0.5, cfg.onset).unwrap()), None, None);
    let opts = EpisodeOptions { record_steps: true, ..EpisodeOptions::from_config(&cfg) };
    let header = TraceHeader {
        version: VERSION.to_string(),
        config_hash: cfg.hash(),
        seed: 4,
        env: cfg.env,
        condition: cond.clone(),
        snapshot_digest: snapshot_digest(&a).unwrap(),
    };
    let before = trace_jsonl(&header, &run_episode(&cfg, &a, &cond, 4, &opts).unwrap()).unwrap();
    let after = trace_jsonl(&header, &run_episode(&cfg, &loaded, &cond, 4, &opts).unwrap()).unwrap();
    assert_eq!(before, after);
    let k = read_trace_kappa(&before).unwrap();
    assert_eq!(k.len(), cfg.horizon as usize);
}

#[test]
fn tampered_snapshot_is_rejected() {
    let cfg = mini();
    let snap = calibrate(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("snap.json");
    let mut v: serde_json::Value = serde_json::from_slice(&snap.to_json().unwrap()).unwrap();
    v["ensemble_digest"] = serde_json::Value::String("0".repeat(64));
    std::fs::write(&path, serde_json::to_vec(&v).unwrap()).unwrap();
    assert!(matches!(CalibrationSnapshot::load(&path), Err(Error::Calibration(_))));
}

#[test]
fn mini_sweep_reports_four_records_and_resumes() {
    let cfg = mini();
    let snap = calibrate(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let first = run_sweep(&cfg, &snap, dir.path()).unwrap();
    assert_eq!((first.ran, first.resumed), (4, 0));
    assert_eq!(first.report.n_episodes, 4);
    assert_eq!(first.report.records.len(), 1);
    let report = std::fs::read(dir.path().join(REPORT_FILE)).unwrap();
    let records = std::fs::read(dir.path().join(RECORDS_FILE)).unwrap();
    let parsed = kappa_core::analysis::read_records_csv(records.as_slice()).unwrap();
    assert_eq!(parsed, first.report.records);

    // an interrupted sweep leaves cells without a checkpoint
    let files = cell_files(dir.path());
    let victim = files.iter().find(|p| p.to_string_lossy().ends_with(".summary.json")).unwrap();
    std::fs::remove_file(victim).unwrap();
    let trace = files.iter().find(|p| p.extension().is_some_and(|e| e == "jsonl")).unwrap();
    std::fs::write(trace, b"{\"kind\":\"header\"").unwrap();

    let again = run_sweep(&cfg, &snap, dir.path()).unwrap();
    assert_eq!(again.ran + again.resumed, 4);
    assert!(again.ran >= 1 && again.resumed >= 2);
    assert_eq!(std::fs::read(dir.path().join(REPORT_FILE)).unwrap(), report);
    assert_eq!(std::fs::read(dir.path().join(RECORDS_FILE)).unwrap(), records);
}

#[test]
fn changed_config_does_not_reuse_checkpoints() {
    let cfg = mini();
    let snap = calibrate(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    run_sweep(&cfg, &snap, dir.path()).unwrap();
    let mut other = cfg.clone();
    other.policy.lambda = 2.0;
    let out = run_sweep(&other, &snap, dir.path()).unwrap();
    assert_eq!((out.ran, out.resumed), (4, 0));
}

#[test]
fn one_step_delay_on_oscillation_raises_frozen_error() {
    let cfg = ExperimentConfig { env: EnvId::MassSpring1D, ..ExperimentConfig::default() };
    let snap = calibrate(&cfg).unwrap();
    let floor = snap.noise_floor;
    let onset = cfg.onset;
    let cond = ConditionSpec::labeled(None, Some(DelaySpec { tau: 1, onset_t: onset }), None);
    let (mut penv, mut obs) = PerturbedEnv::new(cfg.env, 3, cfg.env.nominal_params(), cond).unwrap();
    let mut hist: Vec<Vec<f64>> = Vec::new();
    let (mut sum, mut n) = (0.0, 0);
    for t in 0..onset + 200 {
        hist.push(obs.as_slice().to_vec());
        let u = 0.8 * (2.0 * std::f64::consts::PI * t as f64 / 8.0).sin();
        let action = ActionVec::new(vec![u]).unwrap();
        let step = penv.step(&action).unwrap();
        if hist.len() >= 3 {
            let k = hist.len();
            let acc = acc_feature(&hist[k - 1], &hist[k - 2], &hist[k - 3]).unwrap();
            let input = model_input(&hist[k - 1], &acc, action.as_slice());
            let mse = snap.ensemble.mse(&input, step.agent.delta.as_slice()).unwrap();
            if t > onset {
                sum += mse;
                n += 1;
            }
        }
        obs = step.agent.next_obs;
        if penv.is_terminal() {
            break;
        }
    }
    assert!(n > 50, "episode ended after {n} post-onset steps");
    let mean = sum / n as f64;
    assert!(mean > floor.mu0 + floor.sigma0, "post-onset mse {mean} vs floor {floor:?}");
}
