//! Experiment configuration: TOML files, built-in presets and validation.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bilevel::{BilevelConfig, G2gOutput, G2gParams, InnerModel, OptimizerKind, OuterParameterization};
use crate::data::{self, CheatersOptions, Dataset, Synthetic1Options, TrainPlacement};
use crate::error::{Error, Result};
use crate::graph::{power_support, DistanceMode};

/// Which dataset a run uses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic1 {
        seed: u64,
        /// Node count; the connection radius is rescaled to keep the
        /// nominal expected degree.
        #[serde(default = "default_synthetic1_n")]
        n: usize,
        #[serde(default = "default_placement")]
        placement: TrainPlacement,
    },
    Cheaters {
        seed: u64,
    },
    Cora {
        content: PathBuf,
        cites: PathBuf,
        seed: u64,
        #[serde(default = "default_cora_split")]
        n_train: usize,
        #[serde(default = "default_cora_split")]
        n_outer: usize,
    },
    /// A directory written by `gen-dataset`.
    Dir {
        path: PathBuf,
    },
}

fn default_synthetic1_n() -> usize {
    data::SYNTHETIC1_NOMINAL_N
}

fn default_placement() -> TrainPlacement {
    TrainPlacement::Spread
}

fn default_cora_split() -> usize {
    140
}

impl DatasetSpec {
    pub fn build(&self) -> Result<Dataset> {
        match self {
            DatasetSpec::Synthetic1 { seed, n, placement } => {
                let opts = Synthetic1Options { placement: *placement, ..Synthetic1Options::scaled(*n) };
                data::gen_synthetic1(*seed, &opts)
            }
            DatasetSpec::Cheaters { seed } => data::gen_cheaters(*seed, &CheatersOptions::default()),
            DatasetSpec::Cora { content, cites, seed, n_train, n_outer } => {
                let (mut ds, report) = data::load_cora(content, cites, *seed, *n_train, *n_outer)?;
                ds.meta.insert("duplicate_citations".into(), report.duplicates.into());
                ds.meta.insert("self_citations".into(), report.self_loops.into());
                Ok(ds)
            }
            DatasetSpec::Dir { path } => data::load_exported(path),
        }
    }

    fn set_seed(&mut self, s: u64) {
        match self {
            DatasetSpec::Synthetic1 { seed, .. } | DatasetSpec::Cheaters { seed } | DatasetSpec::Cora { seed, .. } => {
                *seed = s
            }
            DatasetSpec::Dir { .. } => {}
        }
    }
}

/// What the outer problem learns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OuterSpec {
    /// One weight per edge of the `power`-th power of the observed support.
    Direct {
        #[serde(default = "one")]
        power: usize,
        /// Initial weights are drawn from `init_scale · U[0, 1]`.
        #[serde(default = "unit")]
        init_scale: f64,
    },
    /// An MLP edge model on the `power`-th power of the observed support.
    G2g {
        #[serde(default = "one")]
        power: usize,
        hidden: Vec<usize>,
        /// Multiplies the initial final-layer weights.
        #[serde(default = "unit")]
        last_scale: f64,
        #[serde(default)]
        output: G2gOutput,
    },
}

fn one() -> usize {
    1
}

fn unit() -> f64 {
    1.0
}

/// Optimiser settings of both levels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimSpec {
    #[serde(default = "adam")]
    pub inner_optimizer: OptimizerKind,
    pub eta_in: f64,
    pub tau_in: usize,
    #[serde(default = "adam")]
    pub outer_optimizer: OptimizerKind,
    pub eta_out: f64,
    pub tau_out: usize,
    #[serde(default)]
    pub gamma: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_bounds")]
    pub weight_bounds: (f64, f64),
    #[serde(default)]
    pub snapshots: Vec<usize>,
}

fn adam() -> OptimizerKind {
    OptimizerKind::Adam
}

fn default_bounds() -> (f64, f64) {
    (0.0, 1e6)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Default artifact directory; the CLI `--out` flag takes precedence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub dataset: DatasetSpec,
    pub model: InnerModel,
    pub outer: OuterSpec,
    pub optim: OptimSpec,
}

/// Names accepted by [`ExperimentConfig::preset`].
pub const PRESETS: &[&str] =
    &["cheaters-baseline", "cheaters-gamma", "cheaters-g2g", "cheaters-power6", "synthetic1-laplacian"];

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(vec![e.to_string()]))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msgs) => {
                Error::Config(msgs.into_iter().map(|m| format!("{}: {m}", path.display())).collect())
            }
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Internal(format!("config serialisation failed: {e}")))
    }

    /// Hex SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml_string()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    /// Experiment settings of the cheaters and synthetic-1 studies.
    pub fn preset(name: &str) -> Result<Self> {
        let cheaters_optim = OptimSpec {
            inner_optimizer: OptimizerKind::Adam,
            eta_in: 1e-2,
            tau_in: 200,
            outer_optimizer: OptimizerKind::Adam,
            eta_out: 1e-2,
            tau_out: 150,
            gamma: 0.0,
            seed: 0,
            weight_bounds: default_bounds(),
            snapshots: vec![9, 150],
        };
        let cheaters = |name: &str, outer: OuterSpec, optim: OptimSpec| ExperimentConfig {
            name: name.into(),
            out_dir: None,
            dataset: DatasetSpec::Cheaters { seed: 0 },
            model: InnerModel::Gcn { hidden: vec![8] },
            outer,
            optim,
        };
        let tiny_direct = |power| OuterSpec::Direct { power, init_scale: 1e-5 };
        Ok(match name {
            "cheaters-baseline" => cheaters(name, tiny_direct(1), cheaters_optim),
            "cheaters-gamma" => cheaters(name, tiny_direct(1), OptimSpec { gamma: 1.0, ..cheaters_optim }),
            "cheaters-power6" => cheaters(name, tiny_direct(6), cheaters_optim),
            "cheaters-g2g" => cheaters(
                name,
                OuterSpec::G2g { power: 1, hidden: vec![16, 16], last_scale: 1e-5, output: G2gOutput::Relu },
                OptimSpec { eta_out: 1e-3, ..cheaters_optim },
            ),
            "synthetic1-laplacian" => ExperimentConfig {
                name: name.into(),
                out_dir: None,
                dataset: DatasetSpec::Synthetic1 {
                    seed: 0,
                    n: default_synthetic1_n(),
                    placement: TrainPlacement::Spread,
                },
                model: InnerModel::Laplacian { lambda: 1.0 },
                outer: OuterSpec::Direct { power: 1, init_scale: 1.0 },
                optim: OptimSpec { eta_in: 10.0, tau_in: 500, eta_out: 0.1, snapshots: vec![6], ..cheaters_optim },
            },
            other => {
                return Err(Error::Config(vec![format!("unknown preset `{other}`; known: {}", PRESETS.join(", "))]))
            }
        })
    }

    /// Applies command-line overrides. `seed` sets both the dataset and the
    /// inner-initialisation seeds.
    pub fn with_overrides(mut self, seed: Option<u64>, tau_out: Option<usize>, tau_in: Option<usize>) -> Self {
        if let Some(s) = seed {
            self.dataset.set_seed(s);
            self.optim.seed = s;
        }
        if let Some(t) = tau_out {
            self.optim.tau_out = t;
            self.optim.snapshots.retain(|&s| s <= t);
        }
        if let Some(t) = tau_in {
            self.optim.tau_in = t;
        }
        self
    }

    pub fn bilevel(&self) -> BilevelConfig {
        let o = &self.optim;
        BilevelConfig {
            model: self.model.clone(),
            inner_optimizer: o.inner_optimizer,
            eta_in: o.eta_in,
            tau_in: o.tau_in,
            outer_optimizer: o.outer_optimizer,
            eta_out: o.eta_out,
            tau_out: o.tau_out,
            gamma: o.gamma,
            seed: o.seed,
            weight_bounds: o.weight_bounds,
            snapshots: o.snapshots.clone(),
        }
    }

    pub fn distance_mode(&self) -> DistanceMode {
        match self.model {
            InnerModel::Gcn { .. } => DistanceMode::Gcn,
            InnerModel::Laplacian { .. } => DistanceMode::Laplacian,
        }
    }

    /// Reports every invalid field at once.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.name.trim().is_empty() {
            errs.push("name: must not be empty".to_string());
        }
        if let Err(Error::Config(bilevel)) = self.bilevel().validate() {
            errs.extend(bilevel.into_iter().map(|m| format!("optim/model.{m}")));
        }
        match &self.outer {
            OuterSpec::Direct { power, init_scale } => {
                if *power == 0 {
                    errs.push("outer.power: must be at least 1".into());
                }
                if !(*init_scale > 0.0 && init_scale.is_finite()) {
                    errs.push(format!("outer.init_scale: must be positive and finite, got {init_scale}"));
                }
            }
            OuterSpec::G2g { power, hidden, last_scale, .. } => {
                if *power == 0 {
                    errs.push("outer.power: must be at least 1".into());
                }
                if hidden.contains(&0) {
                    errs.push(format!("outer.hidden: widths must be positive, got {hidden:?}"));
                }
                if !(*last_scale > 0.0 && last_scale.is_finite()) {
                    errs.push(format!("outer.last_scale: must be positive and finite, got {last_scale}"));
                }
            }
        }
        match &self.dataset {
            DatasetSpec::Synthetic1 { n, .. } => {
                let d = Synthetic1Options::default();
                if *n < d.n_train + d.n_outer + 2 {
                    errs.push(format!("dataset.n: need at least {} nodes, got {n}", d.n_train + d.n_outer + 2));
                }
            }
            DatasetSpec::Cheaters { .. } => {}
            DatasetSpec::Cora { content, cites, n_train, n_outer, .. } => {
                for (field, p) in [("content", content), ("cites", cites)] {
                    if !p.is_file() {
                        errs.push(format!("dataset.{field}: no file at {}", p.display()));
                    }
                }
                if *n_train == 0 || *n_outer == 0 {
                    errs.push("dataset.n_train/n_outer: must be positive".into());
                }
            }
            DatasetSpec::Dir { path } => {
                if !path.is_dir() {
                    errs.push(format!("dataset.path: no directory at {}", path.display()));
                }
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Initial outer parameters on the configured support.
    pub fn init_outer(&self, ds: &Dataset) -> Result<OuterParameterization> {
        let power = match &self.outer {
            OuterSpec::Direct { power, .. } | OuterSpec::G2g { power, .. } => *power,
        };
        let base = ds.a_obs.support();
        let support = if power == 1 { Arc::clone(base) } else { Arc::new(power_support(base, power)?) };
        // Distinct from the inner-seed stream drawn from the same seed.
        let mut rng = ChaCha8Rng::seed_from_u64(self.optim.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
        Ok(match &self.outer {
            OuterSpec::Direct { init_scale, .. } => {
                OuterParameterization::direct_uniform(support, *init_scale, &mut rng)
            }
            OuterSpec::G2g { hidden, last_scale, output, .. } => {
                let mut dims = vec![ds.x.cols()];
                dims.extend(hidden);
                dims.push(1);
                let params = G2gParams::init(&dims, *last_scale, *output, &mut rng)?;
                let mut param = OuterParameterization::LatentG2G { support, params };
                // A relu output that is zero on every edge has zero gradient
                // forever. The initialisation is sign-symmetric, so flipping
                // the final layer resamples from the same law conditioned on
                // a live start.
                if *output == G2gOutput::Relu && param.edge_weights(&ds.x)?.iter().all(|&w| w <= 0.0) {
                    if let OuterParameterization::LatentG2G { params, .. } = &mut param {
                        params.flip_output_sign();
                    }
                }
                param
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for name in PRESETS {
            let cfg = ExperimentConfig::preset(name).unwrap();
            cfg.validate().unwrap();
            let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
            assert_eq!(back, cfg);
            assert_eq!(back.hash().unwrap(), cfg.hash().unwrap());
        }
    }

    #[test]
    fn validation_lists_each_field() {
        let mut cfg = ExperimentConfig::preset("cheaters-g2g").unwrap();
        cfg.name.clear();
        cfg.optim.eta_out = -1.0;
        cfg.optim.tau_in = 0;
        cfg.outer = OuterSpec::G2g { power: 0, hidden: vec![0], last_scale: 0.0, output: G2gOutput::Relu };
        let Err(Error::Config(errs)) = cfg.validate() else { panic!() };
        assert_eq!(errs.len(), 6, "{errs:?}");
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let mut text = ExperimentConfig::preset("cheaters-baseline").unwrap().to_toml_string().unwrap();
        text.push_str("\n[extra]\nfoo = 1\n");
        assert!(matches!(ExperimentConfig::from_toml_str(&text), Err(Error::Config(_))));
    }
}
