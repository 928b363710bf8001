//! Small hand-built datasets shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scarcegrad::data::{Dataset, Task};
use scarcegrad::graph::{NodeSplit, SupportPattern, WeightedGraph};
use scarcegrad::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Dataset on `pairs` with random features, random labels and the given
/// split; val/test take every remaining node alternately.
pub fn tiny(
    n: usize,
    pairs: &[(usize, usize)],
    p: usize,
    task: Task,
    train: Vec<usize>,
    outer: Vec<usize>,
    seed: u64,
) -> Dataset {
    let mut r = rng(seed);
    let x = Tensor::from_fn(n, p, |_, _| r.gen_range(0.0..1.0));
    let truth = match task {
        Task::Regression => Tensor::from_fn(n, 1, |_, _| r.gen_range(0.0..1.0)),
        Task::Classification => {
            let labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..2)).collect();
            Tensor::from_fn(n, 2, |u, c| if labels[u] == c { 1.0 } else { 0.0 })
        }
    };
    let rest: Vec<usize> = (0..n).filter(|u| !train.contains(u) && !outer.contains(u)).collect();
    let val = rest.iter().copied().step_by(2).collect();
    let test = rest.iter().copied().skip(1).step_by(2).collect();
    let split = NodeSplit::new(n, train, outer, val, test).unwrap();
    let support = Arc::new(SupportPattern::new(n, pairs.to_vec()).unwrap());
    let a_obs = WeightedGraph::unit(support);
    let targets = Dataset::masked_targets(&truth, &split);
    Dataset { name: "tiny".into(), x, a_obs, a_star: None, targets, truth, split, task, meta: BTreeMap::new() }
}

/// Erdős–Rényi pairs with a spanning path so the graph is connected.
pub fn connected_pairs(n: usize, density: f64, seed: u64) -> Vec<(usize, usize)> {
    let mut r = rng(seed);
    let mut pairs: Vec<(usize, usize)> = (1..n).map(|i| (i - 1, i)).collect();
    for i in 0..n {
        for j in (i + 2)..n {
            if r.gen_bool(density) {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

/// Sparse random pairs, possibly disconnected.
pub fn random_pairs(n: usize, density: f64, seed: u64) -> Vec<(usize, usize)> {
    let mut r = rng(seed);
    let mut pairs = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if r.gen_bool(density) {
                pairs.push((i, j));
            }
        }
    }
    pairs
}
