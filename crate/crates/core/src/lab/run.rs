//! Executes an experiment and writes its artifact directory.

use std::path::{Path, PathBuf};

use serde_json::json;

use super::artifacts::{
    count_refined, write_history, write_profile, write_refined, HistoryRow, ProfileRow, PROFILE_HEADER, SIGNAL_HEADER,
};
use super::config::ExperimentConfig;
use crate::bilevel::{outer_loop_with, OuterParameterization, OuterRecord, OuterResult};
use crate::data::Dataset;
use crate::error::Result;
use crate::graph::{edge_distance_via, write_edge_list};

/// Everything a run produced, in memory and on disk.
#[derive(Debug)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub result: OuterResult,
    pub history: Vec<HistoryRow>,
    /// Per snapshot iteration, `|∂F/∂w_e|` of every optimised edge.
    pub profiles: Vec<(usize, Vec<ProfileRow>)>,
    /// Edge models only: per snapshot, the first-order change of every edge
    /// weight along the parameter gradient.
    pub signals: Vec<(usize, Vec<ProfileRow>)>,
    pub config_hash: String,
}

impl RunArtifacts {
    /// Per-edge magnitudes that move the graph at `iteration`: the edge
    /// model's weight change when there is one, else the edge hypergradient.
    pub fn effective_profile(&self, iteration: usize) -> Option<&[ProfileRow]> {
        fn pick(v: &[(usize, Vec<ProfileRow>)], iteration: usize) -> Option<&[ProfileRow]> {
            v.iter().find(|(t, _)| *t == iteration).map(|(_, r)| r.as_slice())
        }
        pick(&self.signals, iteration).or_else(|| pick(&self.profiles, iteration))
    }
}

/// Builds the dataset and runs `cfg` into `out`.
pub fn run(cfg: &ExperimentConfig, out: &Path) -> Result<RunArtifacts> {
    cfg.validate()?;
    let ds = cfg.dataset.build()?;
    run_on(cfg, &ds, out, &mut |_| {})
}

/// Runs `cfg` on an already built dataset, reporting each record to
/// `progress`.
pub fn run_on(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    out: &Path,
    progress: &mut dyn FnMut(&OuterRecord),
) -> Result<RunArtifacts> {
    cfg.validate()?;
    let init = cfg.init_outer(ds)?;
    let bilevel = cfg.bilevel();
    let result = outer_loop_with(&bilevel, ds, init, progress)?;
    std::fs::create_dir_all(out)?;

    let history: Vec<HistoryRow> = result
        .history
        .iter()
        .zip(&result.weight_history)
        .map(|(r, w)| HistoryRow {
            iteration: r.iteration,
            f_out: r.f_out,
            objective: r.objective,
            outer_metric: r.outer_metric,
            val_metric: r.val_metric,
            test_metric: r.test_metric,
            refined_edges: count_refined(w),
        })
        .collect();
    write_history(&out.join("history.csv"), &history)?;
    write_refined(&out.join("refined_edges.csv"), &history)?;

    let support = result.final_param.support();
    let distances = edge_distance_via(ds.a_obs.support(), support.edges(), &ds.split, cfg.distance_mode())?;
    let rows_for = |iteration: usize, values: &[f64]| -> Vec<ProfileRow> {
        support
            .edges()
            .iter()
            .zip(&distances)
            .zip(values)
            .map(|((&(i, j), &distance), v)| ProfileRow { i, j, distance, magnitude: v.abs(), iteration })
            .collect()
    };
    let mut profiles = Vec::new();
    let mut signals = Vec::new();
    let mut files = vec!["config.toml", "history.csv", "refined_edges.csv", "graph_final.txt", "graph_best.txt"]
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>();
    for snap in &result.snapshots {
        let rows = rows_for(snap.iteration, &snap.edge_grad);
        let name = format!("profile_iter{}.csv", snap.iteration);
        write_profile(&out.join(&name), PROFILE_HEADER, &rows)?;
        files.push(name);
        profiles.push((snap.iteration, rows));
        if let Some(signal) = &snap.edge_signal {
            let rows = rows_for(snap.iteration, signal);
            let name = format!("g2g_signal_iter{}.csv", snap.iteration);
            write_profile(&out.join(&name), SIGNAL_HEADER, &rows)?;
            files.push(name);
            signals.push((snap.iteration, rows));
        }
    }
    write_edge_list(&result.final_param.graph(&ds.x)?, &out.join("graph_final.txt"))?;
    write_edge_list(&result.best.graph(&ds.x)?, &out.join("graph_best.txt"))?;

    let config_text = cfg.to_toml_string()?;
    std::fs::write(out.join("config.toml"), &config_text)?;
    let config_hash = cfg.hash()?;
    let best = &result.history[result.best_iteration];
    let parameterization = match &result.final_param {
        OuterParameterization::DirectEdges { .. } => "direct",
        OuterParameterization::LatentG2G { .. } => "g2g",
    };
    let manifest = json!({
        "name": cfg.name,
        "config_hash": config_hash,
        "version": env!("CARGO_PKG_VERSION"),
        "parallel_build": crate::parallel::is_parallel(),
        "dataset": {
            "name": ds.name,
            "n": ds.n(),
            "observed_edges": ds.a_obs.support().num_edges(),
            "meta": ds.meta,
        },
        "outer": {
            "parameterization": parameterization,
            "optimised_edges": support.num_edges(),
            "parameters": result.final_param.flat().len(),
        },
        "seeds": {
            "master": cfg.optim.seed,
            "inner": result.history.iter().map(|r| r.inner_seed).collect::<Vec<_>>(),
        },
        "eta_in_final": result.history.last().map(|r| r.eta_in),
        "divergences": result.divergences,
        "best": {
            "iteration": result.best_iteration,
            "val_metric": best.val_metric,
            "test_metric": best.test_metric,
            "outer_metric": best.outer_metric,
        },
        "files": files,
    });
    std::fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(RunArtifacts { dir: out.to_path_buf(), result, history, profiles, signals, config_hash })
}
