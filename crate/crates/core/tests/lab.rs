//! Experiment runner: reproducibility, artifact layout and configuration
//! errors.

use std::path::Path;

use scarcegrad::lab::artifacts::{read_history, read_profile, read_refined, PROFILE_HEADER, SIGNAL_HEADER};
use scarcegrad::lab::{emit_reports, run, ExperimentConfig, PRESETS};
use scarcegrad::Error;

/// A preset shortened so a run takes well under a second.
fn short(name: &str) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::preset(name).unwrap().with_overrides(None, Some(3), Some(20));
    cfg.optim.snapshots = vec![0, 3];
    cfg
}

fn read(dir: &Path, file: &str) -> Vec<u8> {
    std::fs::read(dir.join(file)).unwrap_or_else(|e| panic!("{file}: {e}"))
}

#[test]
fn every_preset_validates_and_round_trips_through_toml() {
    for name in PRESETS {
        let cfg = ExperimentConfig::preset(name).unwrap();
        cfg.validate().unwrap();
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        assert_eq!(back.hash().unwrap(), cfg.hash().unwrap(), "{name}");
    }
}

#[test]
fn shipped_config_files_match_their_presets() {
    let configs = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in PRESETS {
        let path = configs.join(format!("{name}.toml"));
        let file = ExperimentConfig::load(&path).unwrap();
        assert_eq!(file.hash().unwrap(), ExperimentConfig::preset(name).unwrap().hash().unwrap(), "{name}");
    }
}

#[test]
fn reruns_are_byte_identical() {
    for name in ["cheaters-baseline", "cheaters-g2g", "synthetic1-laplacian"] {
        let mut cfg = short(name);
        if let scarcegrad::lab::DatasetSpec::Synthetic1 { n, .. } = &mut cfg.dataset {
            *n = 256;
        }
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        run(&cfg, a.path()).unwrap();
        run(&cfg, b.path()).unwrap();
        for file in ["history.csv", "refined_edges.csv", "profile_iter3.csv", "graph_final.txt", "manifest.json"] {
            assert_eq!(read(a.path(), file), read(b.path(), file), "{name}/{file}");
        }
    }
}

#[test]
fn artifact_directory_is_complete_and_consistent() {
    let cfg = short("cheaters-g2g");
    let dir = tempfile::tempdir().unwrap();
    let artifacts = run(&cfg, dir.path()).unwrap();

    let history = read_history(&dir.path().join("history.csv")).unwrap();
    assert_eq!(history, artifacts.history);
    assert_eq!(history.iter().map(|r| r.iteration).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
    let refined = read_refined(&dir.path().join("refined_edges.csv")).unwrap();
    assert_eq!(refined, history.iter().map(|r| (r.iteration, r.refined_edges)).collect::<Vec<_>>());

    let profile = read_profile(&dir.path().join("profile_iter3.csv"), PROFILE_HEADER).unwrap();
    let signal = read_profile(&dir.path().join("g2g_signal_iter3.csv"), SIGNAL_HEADER).unwrap();
    assert_eq!(profile.len(), signal.len());
    assert!(profile.iter().zip(&signal).all(|(p, s)| (p.i, p.j, p.distance) == (s.i, s.j, s.distance)));
    assert_eq!(artifacts.effective_profile(3).unwrap(), signal.as_slice());

    let manifest: serde_json::Value = serde_json::from_slice(&read(dir.path(), "manifest.json")).unwrap();
    assert_eq!(manifest["config_hash"], artifacts.config_hash.as_str());
    assert_eq!(manifest["outer"]["parameterization"], "g2g");
    for file in manifest["files"].as_array().unwrap() {
        assert!(dir.path().join(file.as_str().unwrap()).is_file(), "{file}");
    }
    let saved = ExperimentConfig::load(&dir.path().join("config.toml")).unwrap();
    assert_eq!(saved.hash().unwrap(), artifacts.config_hash);

    let reports = emit_reports(dir.path()).unwrap();
    for file in ["metrics.svg", "refined_edges.svg", "objective.svg", "profile_iter3.svg", "g2g_signal_iter3.svg"] {
        assert!(reports.iter().any(|p| p.ends_with(file)), "{file}");
    }
    assert!(dir.path().join("profile_iter0_buckets.csv").is_file());
}

#[test]
fn invalid_configs_report_every_problem() {
    let mut cfg = short("cheaters-baseline");
    cfg.name = " ".into();
    cfg.optim.eta_in = -1.0;
    cfg.optim.tau_out = 0;
    let Err(Error::Config(errs)) = cfg.validate() else { panic!("expected a config error") };
    assert!(errs.len() >= 3, "{errs:?}");
    assert!(errs.iter().any(|e| e.starts_with("name")));

    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(run(&cfg, dir.path()), Err(Error::Config(_))));
    assert!(!dir.path().join("history.csv").exists());

    assert!(matches!(ExperimentConfig::preset("no-such-preset"), Err(Error::Config(_))));
    assert!(matches!(ExperimentConfig::from_toml_str("name = \"x\"\nbogus = 1"), Err(Error::Config(_))));
    assert!(ExperimentConfig::load(&dir.path().join("missing.toml")).is_err());
}
