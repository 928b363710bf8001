//! Seeded generators for the two synthetic tasks.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{halve_remaining, Dataset, Task};
use crate::error::{Error, Result};
use crate::graph::{NodeSplit, SupportPattern, WeightedGraph};
use crate::inner::LabeledTargets;
use crate::neumann::{closed_form_solve, RegularizedSystem};
use crate::tensor::Tensor;

/// Node count at which the synthetic-1 bandwidth takes its nominal value.
pub const SYNTHETIC1_NOMINAL_N: usize = 1536;
pub const SYNTHETIC1_SIGMA: f64 = 0.06;
const MIXTURE_COMPONENTS: usize = 3;
const MIXTURE_BANDWIDTH: f64 = 0.2;
const SYNTHETIC1_LAMBDA: f64 = 1.0;
const MAX_ATTEMPTS: usize = 20;

/// Where the training nodes of synthetic-1 are placed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainPlacement {
    /// Uniformly random nodes.
    Spread,
    /// The nodes nearest the centre of the unit square.
    Concentrated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Synthetic1Options {
    pub n: usize,
    pub sigma: f64,
    pub n_train: usize,
    pub n_outer: usize,
    pub placement: TrainPlacement,
}

impl Default for Synthetic1Options {
    fn default() -> Self {
        Self {
            n: SYNTHETIC1_NOMINAL_N,
            sigma: SYNTHETIC1_SIGMA,
            n_train: 100,
            n_outer: 25,
            placement: TrainPlacement::Spread,
        }
    }
}

impl Synthetic1Options {
    /// Smaller instance whose connection radius grows as `1/√n`, keeping the
    /// expected degree of the nominal instance.
    pub fn scaled(n: usize) -> Self {
        let sigma = SYNTHETIC1_SIGMA * (SYNTHETIC1_NOMINAL_N as f64 / n as f64).sqrt();
        Self { n, sigma, ..Self::default() }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Geometric regression task on the unit square. The labels of `V_tr` come
/// from a scaled Gaussian mixture; all other labels are the regularised
/// propagation of those through the true graph.
pub fn gen_synthetic1(seed: u64, opts: &Synthetic1Options) -> Result<Dataset> {
    let n = opts.n;
    if opts.n_train == 0 || opts.n_outer == 0 || opts.n_train + opts.n_outer > n {
        return Err(Error::contract(format!(
            "cannot draw {} training and {} outer nodes from {n}",
            opts.n_train, opts.n_outer
        )));
    }
    if !(opts.sigma > 0.0) {
        return Err(Error::contract(format!("σ must be positive, got {}", opts.sigma)));
    }
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    for attempt in 0..MAX_ATTEMPTS {
        let sub_seed: u64 = master.gen();
        if let Some(ds) = synthetic1_attempt(seed, sub_seed, attempt, opts)? {
            return Ok(ds);
        }
    }
    Err(Error::Convergence(format!("synthetic-1: ground-truth graph disconnected in {MAX_ATTEMPTS} attempts")))
}

fn synthetic1_attempt(seed: u64, sub_seed: u64, attempt: usize, opts: &Synthetic1Options) -> Result<Option<Dataset>> {
    let n = opts.n;
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed);
    let x = Tensor::from_fn(n, 2, |_, _| rng.gen_range(0.0..1.0));
    let sigma2 = opts.sigma * opts.sigma;
    let mut pairs = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if sq_dist(x.row(i), x.row(j)) < sigma2 {
                pairs.push((i, j));
            }
        }
    }
    let support = Arc::new(SupportPattern::new(n, pairs)?);
    let (_, components) = crate::graph::connected_components(&support);
    if components != 1 || support.num_edges() == 0 {
        return Ok(None);
    }
    let a_star = WeightedGraph::unit(Arc::clone(&support));
    let xi: Vec<f64> = (0..support.num_edges()).map(|_| rng.gen_range(0.0..1.0)).collect();
    let a_obs = WeightedGraph::new(Arc::clone(&support), xi)?;

    let (train, rest) = match opts.placement {
        TrainPlacement::Spread => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let rest = order.split_off(opts.n_train);
            (order, rest)
        }
        TrainPlacement::Concentrated => {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| {
                sq_dist(x.row(a), &[0.5, 0.5]).total_cmp(&sq_dist(x.row(b), &[0.5, 0.5])).then(a.cmp(&b))
            });
            let mut rest = order.split_off(opts.n_train);
            rest.shuffle(&mut rng);
            (order, rest)
        }
    };
    let mut rest = rest;
    let others = rest.split_off(opts.n_outer);
    let mut outer = rest;
    let (val, test) = halve_remaining(others, &mut rng);
    let mut train = train;
    train.sort_unstable();
    outer.sort_unstable();
    let split = NodeSplit::new(n, train, outer, val, test)?;

    let centers: Vec<[f64; 2]> =
        (0..MIXTURE_COMPONENTS).map(|_| [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)]).collect();
    let bw2 = 2.0 * MIXTURE_BANDWIDTH * MIXTURE_BANDWIDTH;
    let raw = |u: usize| centers.iter().map(|c| (-sq_dist(x.row(u), c) / bw2).exp()).sum::<f64>();
    let peak = split.train.iter().map(|&u| raw(u)).fold(0.0f64, f64::max);
    let zeta = 1.0 / peak;

    let mut y_train = Tensor::zeros(n, 1);
    let mut mask = vec![false; n];
    for &u in &split.train {
        y_train.set(u, 0, zeta * raw(u));
        mask[u] = true;
    }
    let seed_targets = LabeledTargets::new(y_train.clone(), mask)?;
    let sys = RegularizedSystem::new(
        &a_star.adjacency(),
        support.num_edges(),
        &seed_targets,
        &split.train,
        SYNTHETIC1_LAMBDA,
    )?;
    let mut truth = closed_form_solve(&sys)?;
    for &u in &split.train {
        truth.set(u, 0, y_train.get(u, 0));
    }
    let targets = Dataset::masked_targets(&truth, &split);

    let mut meta = BTreeMap::new();
    meta.insert("seed".into(), json!(seed));
    meta.insert("attempt".into(), json!(attempt));
    meta.insert("sigma".into(), json!(opts.sigma));
    meta.insert("zeta".into(), json!(zeta));
    meta.insert("lambda".into(), json!(SYNTHETIC1_LAMBDA));
    meta.insert("centers".into(), json!(centers));
    meta.insert("placement".into(), json!(opts.placement));
    let ds = Dataset {
        name: "synthetic1".into(),
        x,
        a_obs,
        a_star: Some(a_star),
        targets,
        truth,
        split,
        task: Task::Regression,
        meta,
    };
    ds.validate()?;
    Ok(Some(ds))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheatersOptions {
    pub n: usize,
    pub p: usize,
    pub sigma: f64,
    pub pass_threshold: f64,
}

impl Default for CheatersOptions {
    fn default() -> Self {
        Self { n: 256, p: 10, sigma: 0.027, pass_threshold: 60.0 }
    }
}

/// Grades `A* X[:, 1..p] 1`, where `A*` carries a unit diagonal implicitly.
pub fn cheater_grades(x: &Tensor, a_star: &WeightedGraph) -> Vec<f64> {
    let own: Vec<f64> = (0..x.rows()).map(|u| x.row(u)[1..].iter().sum()).collect();
    let mut grades = own.clone();
    for (&(i, j), &w) in a_star.support().edges().iter().zip(a_star.weights()) {
        grades[i] += w * own[j];
        grades[j] += w * own[i];
    }
    grades
}

/// Exam-room classification task: students sit along a line given by the
/// first feature, copy answers from near neighbours, and pass when their
/// copied grade exceeds the threshold.
pub fn gen_cheaters(seed: u64, opts: &CheatersOptions) -> Result<Dataset> {
    let (n, p) = (opts.n, opts.p);
    if n < 16 || p < 2 {
        return Err(Error::contract(format!("cheaters needs n ≥ 16 and p ≥ 2, got n={n}, p={p}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows: Vec<Vec<f64>> = (0..n).map(|_| (0..p).map(|_| rng.gen_range(0.0..1.0)).collect()).collect();
    rows.sort_by(|a, b| a[0].total_cmp(&b[0]));
    let x = Tensor::from_rows(&rows)?;

    let complete = Arc::new(SupportPattern::complete(n));
    let s2 = opts.sigma * opts.sigma;
    let kernel: Vec<f64> = complete
        .edges()
        .iter()
        .map(|&(i, j)| {
            let d = x.get(i, 0) - x.get(j, 0);
            (-d * d / s2).exp()
        })
        .collect();
    let mut observed = Vec::new();
    for (&e, &w) in complete.edges().iter().zip(&kernel) {
        if rng.gen::<f64>() < w {
            observed.push(e);
        }
    }
    let a_star = WeightedGraph::new(complete, kernel)?;
    let a_obs = super::unit_graph(n, observed)?;

    let grades = cheater_grades(&x, &a_star);
    let truth = Tensor::from_fn(n, 2, |u, c| {
        let pass = grades[u] > opts.pass_threshold;
        if usize::from(pass) == c {
            1.0
        } else {
            0.0
        }
    });

    let train: Vec<usize> = (0..=n / 8).chain(7 * n / 8..n).collect();
    let outer: Vec<usize> = (3 * n / 8..=5 * n / 8).collect();
    let rest: Vec<usize> = (0..n).filter(|u| !train.contains(u) && !outer.contains(u)).collect();
    let (val, test) = halve_remaining(rest, &mut rng);
    let split = NodeSplit::new(n, train, outer, val, test)?;
    let targets = Dataset::masked_targets(&truth, &split);

    let mut meta = BTreeMap::new();
    meta.insert("seed".into(), json!(seed));
    meta.insert("sigma".into(), json!(opts.sigma));
    meta.insert("pass_threshold".into(), json!(opts.pass_threshold));
    meta.insert(
        "pass_rate".into(),
        json!(grades.iter().filter(|&&g| g > opts.pass_threshold).count() as f64 / n as f64),
    );
    let ds = Dataset {
        name: "cheaters".into(),
        x,
        a_obs,
        a_star: Some(a_star),
        targets,
        truth,
        split,
        task: Task::Classification,
        meta,
    };
    ds.validate()?;
    Ok(ds)
}
