//! Datasets: the record type, metrics, on-disk export, and the generators
//! and loaders that produce them.

mod cora;
mod synthetic;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use cora::{load_cora, CoraReport};
pub use synthetic::{
    cheater_grades, gen_cheaters, gen_synthetic1, CheatersOptions, Synthetic1Options, TrainPlacement,
    SYNTHETIC1_NOMINAL_N, SYNTHETIC1_SIGMA,
};

use crate::error::{Error, Result};
use crate::graph::{read_edge_list, write_edge_list, NodeSplit, SupportPattern, WeightedGraph};
use crate::inner::{LabeledTargets, LossKind};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Regression,
    Classification,
}

impl Task {
    pub fn loss(self) -> LossKind {
        match self {
            Task::Regression => LossKind::Mse,
            Task::Classification => LossKind::Cce,
        }
    }

    /// Whether a larger metric value is better.
    pub fn higher_is_better(self) -> bool {
        self == Task::Classification
    }
}

/// A semi-supervised graph task.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    pub x: Tensor,
    pub a_obs: WeightedGraph,
    pub a_star: Option<WeightedGraph>,
    /// Labels visible to training: rows outside `V_tr ∪ V_out` are masked.
    pub targets: LabeledTargets,
    /// Labels of every node, used only for evaluation.
    pub truth: Tensor,
    pub split: NodeSplit,
    pub task: Task,
    pub meta: BTreeMap<String, serde_json::Value>,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.x.rows()
    }

    /// Builds the training targets from the full labels, exposing only
    /// `V_tr ∪ V_out`.
    pub fn masked_targets(truth: &Tensor, split: &NodeSplit) -> LabeledTargets {
        let mut y = Tensor::zeros(truth.rows(), truth.cols());
        let mut mask = vec![false; truth.rows()];
        for u in split.labelled() {
            y.row_mut(u).copy_from_slice(truth.row(u));
            mask[u] = true;
        }
        LabeledTargets { y, mask }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        self.split.validate(n)?;
        if self.a_obs.n() != n || self.targets.n() != n || self.truth.rows() != n {
            return Err(Error::dim("dataset", "features, graph and labels disagree on n"));
        }
        if !self.x.is_finite() {
            return Err(Error::contract("non-finite feature"));
        }
        let labelled = self.split.labelled();
        for u in 0..n {
            if self.targets.mask[u] != labelled.binary_search(&u).is_ok() {
                return Err(Error::contract(format!("label mask of node {u} disagrees with the split")));
            }
        }
        Ok(())
    }

    /// Accuracy (classification) or mean squared error (regression) of
    /// `pred` on `nodes`.
    pub fn evaluate(&self, pred: &Tensor, nodes: &[usize]) -> Result<f64> {
        evaluate_against(&self.truth, self.task, pred, nodes)
    }
}

/// Accuracy or MSE of `pred` against `truth` on `nodes`.
pub fn evaluate_against(truth: &Tensor, task: Task, pred: &Tensor, nodes: &[usize]) -> Result<f64> {
    if nodes.is_empty() {
        return Err(Error::contract("evaluation on an empty subset"));
    }
    if pred.shape() != truth.shape() {
        return Err(Error::dim("evaluate", format!("pred {:?} vs labels {:?}", pred.shape(), truth.shape())));
    }
    let total: f64 = match task {
        Task::Classification => nodes.iter().filter(|&&u| pred.argmax_row(u) == truth.argmax_row(u)).count() as f64,
        Task::Regression => nodes
            .iter()
            .map(|&u| pred.row(u).iter().zip(truth.row(u)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
            .sum(),
    };
    Ok(total / nodes.len() as f64)
}

/// Shuffles `rest` and halves it into `(val, test)`; `val` gets the smaller
/// half when the count is odd.
pub(crate) fn halve_remaining(mut rest: Vec<usize>, rng: &mut impl Rng) -> (Vec<usize>, Vec<usize>) {
    rest.shuffle(rng);
    let test = rest.split_off(rest.len() / 2);
    let mut val = rest;
    let mut test = test;
    val.sort_unstable();
    test.sort_unstable();
    (val, test)
}

fn write_matrix_csv(path: &Path, t: &Tensor, prefix: &str) -> Result<()> {
    let mut out = String::new();
    let header: Vec<String> = (0..t.cols()).map(|j| format!("{prefix}{j}")).collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for i in 0..t.rows() {
        let row: Vec<String> = t.row(i).iter().map(|v| format!("{v:e}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn read_matrix_csv(path: &Path) -> Result<Tensor> {
    let text = std::fs::read_to_string(path)?;
    let err = |line: usize, msg: String| Error::Parse { path: path.display().to_string(), line, msg };
    let mut rows = Vec::new();
    for (k, line) in text.lines().enumerate().skip(1) {
        if line.is_empty() {
            continue;
        }
        let row: Result<Vec<f64>> =
            line.split(',').map(|f| f.parse::<f64>().map_err(|e| err(k + 1, format!("`{f}`: {e}")))).collect();
        rows.push(row?);
    }
    Tensor::from_rows(&rows)
}

#[derive(Serialize, Deserialize)]
struct ExportHeader {
    name: String,
    task: Task,
    classes: usize,
    meta: BTreeMap<String, serde_json::Value>,
}

/// Writes `X.csv`, `edges.txt`, `labels.csv` (`node,label,mask`),
/// `splits.json`, `dataset.json` and, when present, `a_star.txt`.
pub fn export_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_matrix_csv(&dir.join("X.csv"), &ds.x, "x")?;
    write_edge_list(&ds.a_obs, &dir.join("edges.txt"))?;
    if let Some(a) = &ds.a_star {
        write_edge_list(a, &dir.join("a_star.txt"))?;
    }
    let mut labels = String::from("node,label,mask\n");
    for u in 0..ds.n() {
        let label = match ds.task {
            Task::Classification => ds.truth.argmax_row(u).to_string(),
            Task::Regression => format!("{:e}", ds.truth.get(u, 0)),
        };
        writeln!(labels, "{u},{label},{}", u8::from(ds.targets.mask[u])).expect("writing to a String");
    }
    std::fs::write(dir.join("labels.csv"), labels)?;
    std::fs::write(dir.join("splits.json"), serde_json::to_string_pretty(&ds.split)?)?;
    let header = ExportHeader { name: ds.name.clone(), task: ds.task, classes: ds.truth.cols(), meta: ds.meta.clone() };
    std::fs::write(dir.join("dataset.json"), serde_json::to_string_pretty(&header)?)?;
    Ok(())
}

/// Reads a directory written by [`export_dataset`].
pub fn load_exported(dir: &Path) -> Result<Dataset> {
    let need = |f: &str| {
        let p = dir.join(f);
        if p.exists() {
            Ok(p)
        } else {
            Err(Error::MissingArtifact(p))
        }
    };
    let header: ExportHeader = serde_json::from_str(&std::fs::read_to_string(need("dataset.json")?)?)?;
    let x = read_matrix_csv(&need("X.csv")?)?;
    let n = x.rows();
    let a_obs = read_edge_list(&need("edges.txt")?, Some(n))?;
    let a_star_path = dir.join("a_star.txt");
    let a_star = if a_star_path.exists() { Some(read_edge_list(&a_star_path, Some(n))?) } else { None };
    let split: NodeSplit = serde_json::from_str(&std::fs::read_to_string(need("splits.json")?)?)?;
    let labels_path = need("labels.csv")?;
    let text = std::fs::read_to_string(&labels_path)?;
    let err = |line: usize, msg: String| Error::Parse { path: labels_path.display().to_string(), line, msg };
    let mut truth = Tensor::zeros(n, header.classes);
    for (k, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 {
            return Err(err(k + 1, "expected `node,label,mask`".into()));
        }
        let u: usize = f[0].parse().map_err(|e| err(k + 1, format!("node: {e}")))?;
        if u >= n {
            return Err(err(k + 1, format!("node {u} outside {n}")));
        }
        match header.task {
            Task::Classification => {
                let c: usize = f[1].parse().map_err(|e| err(k + 1, format!("label: {e}")))?;
                if c >= header.classes {
                    return Err(err(k + 1, format!("class {c} outside {}", header.classes)));
                }
                truth.set(u, c, 1.0);
            }
            Task::Regression => truth.set(u, 0, f[1].parse().map_err(|e| err(k + 1, format!("label: {e}")))?),
        }
    }
    let targets = Dataset::masked_targets(&truth, &split);
    let ds =
        Dataset { name: header.name, x, a_obs, a_star, targets, truth, split, task: header.task, meta: header.meta };
    ds.validate()?;
    Ok(ds)
}

/// Unit-weight graph on a support.
pub(crate) fn unit_graph(n: usize, pairs: Vec<(usize, usize)>) -> Result<WeightedGraph> {
    Ok(WeightedGraph::unit(Arc::new(SupportPattern::new(n, pairs)?)))
}
