//! Ingestion of the raw Cora citation files.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::{halve_remaining, unit_graph, Dataset, Task};
use crate::error::{Error, Result};
use crate::graph::NodeSplit;
use crate::tensor::Tensor;

/// Lines of the citation file that did not become edges.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CoraReport {
    pub unknown_ids: usize,
    pub duplicates: usize,
    pub self_loops: usize,
}

/// Loads `content` (`id, 0/1 flags…, class`) and `cites` (`cited, citing`)
/// into an undirected unit-weight classification task. Classes are indexed
/// in sorted label order; splits are drawn from a seeded shuffle.
pub fn load_cora(
    content: &Path,
    cites: &Path,
    seed: u64,
    n_train: usize,
    n_outer: usize,
) -> Result<(Dataset, CoraReport)> {
    let content_text = std::fs::read_to_string(content)?;
    let perr = |path: &Path, line: usize, msg: String| Error::Parse { path: path.display().to_string(), line, msg };

    let mut ids: HashMap<String, usize> = HashMap::new();
    let mut features: Vec<Vec<f64>> = Vec::new();
    let mut labels: Vec<String> = Vec::new();
    for (k, line) in content_text.lines().enumerate() {
        let lineno = k + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 3 {
            return Err(perr(content, lineno, format!("expected id, flags and class, got {} fields", fields.len())));
        }
        let width = fields.len() - 2;
        if let Some(first) = features.first() {
            if first.len() != width {
                return Err(perr(
                    content,
                    lineno,
                    format!("{width} feature flags, earlier lines have {}", first.len()),
                ));
            }
        }
        let row: Result<Vec<f64>> = fields[1..=width]
            .iter()
            .map(|f| match *f {
                "0" => Ok(0.0),
                "1" => Ok(1.0),
                other => Err(perr(content, lineno, format!("feature flag `{other}` is not 0 or 1"))),
            })
            .collect();
        let id = fields[0].to_string();
        if ids.insert(id.clone(), features.len()).is_some() {
            return Err(perr(content, lineno, format!("node id `{id}` listed twice")));
        }
        features.push(row?);
        labels.push(fields[width + 1].trim().to_string());
    }
    let n = features.len();
    if n == 0 {
        return Err(perr(content, 0, "no nodes".into()));
    }
    let classes: Vec<&String> = labels.iter().collect::<BTreeSet<_>>().into_iter().collect();
    let class_of: HashMap<&String, usize> = classes.iter().enumerate().map(|(c, l)| (*l, c)).collect();
    let truth = Tensor::from_fn(n, classes.len(), |u, c| if class_of[&labels[u]] == c { 1.0 } else { 0.0 });

    let cites_text = std::fs::read_to_string(cites)?;
    let mut report = CoraReport::default();
    let mut pairs = BTreeSet::new();
    for (k, line) in cites_text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
        if fields.len() != 2 {
            return Err(perr(cites, k + 1, format!("expected two ids, got {} fields", fields.len())));
        }
        let (Some(&a), Some(&b)) = (ids.get(fields[0]), ids.get(fields[1])) else {
            report.unknown_ids += 1;
            continue;
        };
        if a == b {
            report.self_loops += 1;
        } else if !pairs.insert((a.min(b), a.max(b))) {
            report.duplicates += 1;
        }
    }
    let a_obs = unit_graph(n, pairs.into_iter().collect())?;

    if n_train == 0 || n_outer == 0 || n_train + n_outer > n {
        return Err(Error::contract(format!("cannot draw {n_train} training and {n_outer} outer nodes from {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut rest = order.split_off(n_train);
    let others = rest.split_off(n_outer);
    let (mut train, mut outer) = (order, rest);
    train.sort_unstable();
    outer.sort_unstable();
    let (val, test) = halve_remaining(others, &mut rng);
    let split = NodeSplit::new(n, train, outer, val, test)?;
    let targets = Dataset::masked_targets(&truth, &split);

    let mut meta = BTreeMap::new();
    meta.insert("seed".into(), json!(seed));
    meta.insert("classes".into(), json!(classes));
    meta.insert("unknown_ids".into(), json!(report.unknown_ids));
    let ds = Dataset {
        name: "cora".into(),
        x: Tensor::from_rows(&features)?,
        a_obs,
        a_star: None,
        targets,
        truth,
        split,
        task: Task::Classification,
        meta,
    };
    ds.validate()?;
    Ok((ds, report))
}
