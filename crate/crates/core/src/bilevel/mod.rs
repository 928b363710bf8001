//! Bilevel graph learning: an outer problem over edge weights (or an edge
//! model) whose gradient flows through an unrolled inner training run.

pub mod g2g;
pub mod optim;
mod outer;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use g2g::{edge_features, g2g_forward, G2gOutput, G2gParams};
pub use optim::{OptimizerKind, PlainOptimizer, SmoothOptimizer};
pub use outer::{outer_loop, outer_loop_with, OuterRecord, OuterResult, Snapshot};

use crate::ad::{Tape, VarId};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{SupportPattern, WeightedGraph};
use crate::inner::{
    gcn_forward, gcn_forward_traced, inner_grad_gcn, inner_grad_labels, masked_loss, masked_loss_value, GcnParams,
    GcnVars, InnerContext,
};
use crate::tensor::Tensor;

/// Added to every degree inside the log-degree regulariser.
pub const DEGREE_EPS: f64 = 1e-8;

/// The model trained by the inner problem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum InnerModel {
    /// GCN with the given hidden widths; input and output widths come from
    /// the dataset.
    Gcn { hidden: Vec<usize> },
    /// Free node labels with Laplacian smoothing of strength `lambda`.
    Laplacian { lambda: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BilevelConfig {
    pub model: InnerModel,
    pub inner_optimizer: OptimizerKind,
    pub eta_in: f64,
    pub tau_in: usize,
    pub outer_optimizer: OptimizerKind,
    pub eta_out: f64,
    pub tau_out: usize,
    /// Weight of the log-degree regulariser; 0 disables it.
    pub gamma: f64,
    /// Master seed of the per-iteration inner initialisations.
    pub seed: u64,
    /// Directly learned weights are clipped to this interval after every
    /// outer step.
    pub weight_bounds: (f64, f64),
    /// Outer iterations at which per-edge hypergradients are kept.
    pub snapshots: Vec<usize>,
}

impl BilevelConfig {
    /// Checks every field and reports all violations at once.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        match &self.model {
            InnerModel::Gcn { hidden } => {
                if hidden.contains(&0) {
                    errs.push(format!("model.hidden: widths must be positive, got {hidden:?}"));
                }
            }
            InnerModel::Laplacian { lambda } => {
                if !(*lambda > 0.0 && lambda.is_finite()) {
                    errs.push(format!("model.lambda: must be positive and finite, got {lambda}"));
                }
            }
        }
        for (name, eta) in [("eta_in", self.eta_in), ("eta_out", self.eta_out)] {
            if !(eta > 0.0 && eta.is_finite()) {
                errs.push(format!("{name}: must be positive and finite, got {eta}"));
            }
        }
        for (name, tau) in [("tau_in", self.tau_in), ("tau_out", self.tau_out)] {
            if tau == 0 {
                errs.push(format!("{name}: must be at least 1"));
            }
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            errs.push(format!("gamma: must be nonnegative and finite, got {}", self.gamma));
        }
        let (lo, hi) = self.weight_bounds;
        if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
            errs.push(format!("weight_bounds: need 0 ≤ lo ≤ hi < ∞, got ({lo}, {hi})"));
        }
        if let Some(s) = self.snapshots.iter().find(|&&s| s > self.tau_out) {
            errs.push(format!("snapshots: iteration {s} exceeds tau_out = {}", self.tau_out));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// What the outer problem optimises.
#[derive(Clone, Debug, PartialEq)]
pub enum OuterParameterization {
    /// One free weight per support edge.
    DirectEdges { support: Arc<SupportPattern>, weights: Vec<f64> },
    /// Weights produced by an edge model on the support.
    LatentG2G { support: Arc<SupportPattern>, params: G2gParams },
}

impl OuterParameterization {
    /// Direct weights drawn from `scale · U[0, 1]`.
    pub fn direct_uniform(support: Arc<SupportPattern>, scale: f64, rng: &mut impl Rng) -> Self {
        let weights = (0..support.num_edges()).map(|_| scale * rng.gen_range(0.0..1.0)).collect();
        OuterParameterization::DirectEdges { support, weights }
    }

    pub fn support(&self) -> &Arc<SupportPattern> {
        match self {
            OuterParameterization::DirectEdges { support, .. } | OuterParameterization::LatentG2G { support, .. } => {
                support
            }
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        match self {
            OuterParameterization::DirectEdges { weights, .. } => weights.clone(),
            OuterParameterization::LatentG2G { params, .. } => params.flat(),
        }
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        match self {
            OuterParameterization::DirectEdges { weights, .. } => {
                if flat.len() != weights.len() {
                    return Err(Error::dim(
                        "direct_edges",
                        format!("{} values for {} edges", flat.len(), weights.len()),
                    ));
                }
                weights.copy_from_slice(flat);
                Ok(())
            }
            OuterParameterization::LatentG2G { params, .. } => params.set_flat(flat),
        }
    }

    /// Clips direct weights to `[lo, hi]`; edge models are left untouched.
    pub fn project(&mut self, lo: f64, hi: f64) {
        if let OuterParameterization::DirectEdges { weights, .. } = self {
            weights.iter_mut().for_each(|w| *w = w.clamp(lo, hi));
        }
    }

    /// Current weight of every support edge.
    pub fn edge_weights(&self, x: &Tensor) -> Result<Vec<f64>> {
        match self {
            OuterParameterization::DirectEdges { weights, .. } => Ok(weights.clone()),
            OuterParameterization::LatentG2G { support, params } => {
                let f = edge_features(x, support)?;
                Ok((0..f.rows()).map(|e| params.edge_weight(f.row(e))).collect())
            }
        }
    }

    pub fn graph(&self, x: &Tensor) -> Result<WeightedGraph> {
        WeightedGraph::new(Arc::clone(self.support()), self.edge_weights(x)?)
    }
}

/// Tape handles of a materialised adjacency.
#[derive(Clone, Debug)]
pub struct Materialized {
    /// Differentiable leaves, in the order of [`OuterParameterization::flat`].
    pub leaves: Vec<VarId>,
    /// `E × 1` edge weights.
    pub edge_weights: VarId,
    /// Symmetric `n × n` adjacency, zero off the support.
    pub adjacency: VarId,
}

/// Records the adjacency produced by `param` on `tape`.
pub fn materialize_adjacency(tape: &mut Tape, param: &OuterParameterization, x: &Tensor) -> Result<Materialized> {
    let support = param.support();
    let n = support.n();
    let (leaves, edge_weights) = match param {
        OuterParameterization::DirectEdges { weights, .. } => {
            if weights.len() != support.num_edges() {
                return Err(Error::dim(
                    "direct_edges",
                    format!("{} weights for {} edges", weights.len(), support.num_edges()),
                ));
            }
            let w = tape.var(Tensor::column(weights.clone()));
            (vec![w], w)
        }
        OuterParameterization::LatentG2G { params, .. } => {
            if x.cols() != params.input_dim() {
                return Err(Error::dim("g2g", format!("{} features for input width {}", x.cols(), params.input_dim())));
            }
            let leaves: Vec<VarId> = params.tensors().into_iter().map(|t| tape.var(t)).collect();
            let feats = tape.constant(edge_features(x, support)?);
            let w = g2g_forward(tape, &leaves, feats, params.output)?;
            (leaves, w)
        }
    };
    let adjacency = tape.scatter_sym(edge_weights, support.edges_shared(), n)?;
    Ok(Materialized { leaves, edge_weights, adjacency })
}

/// Trained predictions at the end of an unroll.
#[derive(Clone, Copy, Debug)]
pub struct Unrolled {
    pub pred: VarId,
    /// Training loss of the final predictions.
    pub inner_loss: f64,
}

fn finite_or_diverged(tape: &Tape, id: VarId, iteration: usize) -> Result<()> {
    if tape.value(id).is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence { iteration })
    }
}

/// Records `tau_in` inner optimizer steps from a fresh initialisation drawn
/// from `inner_seed`. `num_edges` normalises the Laplacian penalty.
pub fn unroll_inner(
    tape: &mut Tape,
    cfg: &BilevelConfig,
    ds: &Dataset,
    a: VarId,
    num_edges: usize,
    inner_seed: u64,
    eta_in: f64,
) -> Result<Unrolled> {
    if cfg.tau_in == 0 {
        return Err(Error::contract("tau_in must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(inner_seed);
    let kind = ds.task.loss();
    let classes = ds.truth.cols();
    let mut opt = SmoothOptimizer::new(cfg.inner_optimizer, eta_in);
    let pred = match &cfg.model {
        InnerModel::Gcn { hidden } => {
            let ctx = InnerContext::new(tape, a, Some(&ds.x), &ds.targets, &ds.split.train, kind)?;
            let mut dims = vec![ds.x.cols()];
            dims.extend(hidden);
            dims.push(classes);
            let params = GcnParams::xavier(&dims, &mut rng)?;
            let mut vars = GcnVars::leaves(tape, &params);
            for t in 0..cfg.tau_in {
                let trace = gcn_forward_traced(tape, &vars, &ctx)?;
                finite_or_diverged(tape, trace.output, t)?;
                let grads = inner_grad_gcn(tape, &vars, &trace, &ctx)?;
                let flat_grads: Vec<VarId> = grads.iter().flat_map(|g| [g.w1, g.w2, g.b]).collect();
                let next = opt.step(tape, &vars.flatten(), &flat_grads)?;
                vars = GcnVars::from_flat(&next, &vars.activations);
            }
            gcn_forward(tape, &vars, &ctx)?
        }
        InnerModel::Laplacian { lambda } => {
            let ctx = InnerContext::new(tape, a, None, &ds.targets, &ds.split.train, kind)?;
            let init = Tensor::from_fn(ds.n(), classes, |_, _| rng.gen_range(0.0..1.0));
            let mut y = tape.constant(init);
            for t in 0..cfg.tau_in {
                let g = inner_grad_labels(tape, y, &ctx, *lambda, num_edges)?;
                finite_or_diverged(tape, g, t)?;
                y = opt.step(tape, &[y], &[g])?[0];
            }
            y
        }
    };
    finite_or_diverged(tape, pred, cfg.tau_in)?;
    let inner_loss = masked_loss_value(tape.value(pred), &ds.targets, &ds.split.train, kind)?;
    if !inner_loss.is_finite() {
        return Err(Error::Divergence { iteration: cfg.tau_in });
    }
    Ok(Unrolled { pred, inner_loss })
}

/// `masked_loss(pred, V_out) − γ Σ_i log(deg_i + ε)`, with degrees taken from
/// the materialised adjacency `a`.
pub fn outer_objective(tape: &mut Tape, pred: VarId, ds: &Dataset, gamma: f64, a: VarId) -> Result<VarId> {
    if !(gamma >= 0.0) {
        return Err(Error::contract(format!("γ must be nonnegative, got {gamma}")));
    }
    let fit = masked_loss(tape, pred, &ds.targets, &ds.split.outer, ds.task.loss())?;
    if gamma == 0.0 {
        return Ok(fit);
    }
    let n = tape.value(a).rows();
    let ones = tape.constant(Tensor::ones(n, 1));
    let deg = tape.matmul(a, ones)?;
    let shifted = tape.add_scalar(deg, DEGREE_EPS)?;
    let logs = tape.log(shifted)?;
    let total = tape.reduce_sum(logs)?;
    let reg = tape.scale(total, -gamma)?;
    tape.add(fit, reg)
}

/// Outcome of one forward (and possibly backward) pass of the bilevel
/// pipeline.
#[derive(Clone, Debug)]
pub struct Hypergradient {
    /// Outer loss on `V_out`, without the regulariser.
    pub f_out: f64,
    /// Full outer objective.
    pub objective: f64,
    pub inner_loss: f64,
    pub pred: Tensor,
    /// Gradient wrt [`OuterParameterization::flat`].
    pub grad: Vec<f64>,
    /// Gradient wrt each support edge weight.
    pub edge_grad: Vec<f64>,
    /// Edge models only: first-order change of each edge weight along the
    /// parameter gradient.
    pub edge_signal: Option<Vec<f64>>,
}

/// Builds the whole pipeline on a fresh tape and differentiates the outer
/// objective when `differentiate` is set.
pub fn run_pipeline(
    cfg: &BilevelConfig,
    ds: &Dataset,
    param: &OuterParameterization,
    inner_seed: u64,
    eta_in: f64,
    differentiate: bool,
) -> Result<Hypergradient> {
    let mut tape = Tape::new();
    let m = materialize_adjacency(&mut tape, param, &ds.x)?;
    let num_edges = param.support().num_edges();
    let unrolled = unroll_inner(&mut tape, cfg, ds, m.adjacency, num_edges, inner_seed, eta_in)?;
    let objective = outer_objective(&mut tape, unrolled.pred, ds, cfg.gamma, m.adjacency)?;
    let pred = tape.value(unrolled.pred).clone();
    let f_out = masked_loss_value(&pred, &ds.targets, &ds.split.outer, ds.task.loss())?;
    let mut out = Hypergradient {
        f_out,
        objective: tape.value(objective).item(),
        inner_loss: unrolled.inner_loss,
        pred,
        grad: Vec::new(),
        edge_grad: Vec::new(),
        edge_signal: None,
    };
    if !differentiate {
        return Ok(out);
    }
    let grads = tape.backward_retaining(objective, &[m.edge_weights])?;
    out.grad = m.leaves.iter().flat_map(|&l| grads.get_or_zeros(&tape, l).into_vec()).collect();
    out.edge_grad = grads.get_or_zeros(&tape, m.edge_weights).into_vec();
    if let OuterParameterization::LatentG2G { support, params } = param {
        out.edge_signal = Some(params.edge_jvp(&edge_features(&ds.x, support)?, &out.grad)?);
    }
    Ok(out)
}

/// Hypergradient of the outer objective at `param`.
pub fn hypergradient(
    cfg: &BilevelConfig,
    ds: &Dataset,
    param: &OuterParameterization,
    inner_seed: u64,
    eta_in: f64,
) -> Result<Hypergradient> {
    run_pipeline(cfg, ds, param, inner_seed, eta_in, true)
}
