//! The outer loop: hypergradient steps with projection, divergence
//! recovery and validation-based selection.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{run_pipeline, BilevelConfig, Hypergradient, OuterParameterization, PlainOptimizer};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Metrics of the outer iterate after `iteration` updates.
#[derive(Clone, Debug, PartialEq)]
pub struct OuterRecord {
    pub iteration: usize,
    pub f_out: f64,
    pub objective: f64,
    pub inner_loss: f64,
    /// Training metric on `V_out`.
    pub outer_metric: f64,
    /// NaN when the validation set is empty.
    pub val_metric: f64,
    /// NaN when the test set is empty.
    pub test_metric: f64,
    pub inner_seed: u64,
    pub eta_in: f64,
}

/// Per-edge hypergradients kept at a requested iteration.
#[derive(Clone, Debug)]
pub struct Snapshot {
    pub iteration: usize,
    pub edge_grad: Vec<f64>,
    pub edge_signal: Option<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct OuterResult {
    /// Records `0..=tau_out`; record `t` is evaluated after `t` updates.
    pub history: Vec<OuterRecord>,
    pub snapshots: Vec<Snapshot>,
    /// Edge weights of every record.
    pub weight_history: Vec<Vec<f64>>,
    pub best_iteration: usize,
    pub best: OuterParameterization,
    pub best_pred: Tensor,
    pub final_param: OuterParameterization,
    pub final_pred: Tensor,
    /// Unrolls that diverged and were retried.
    pub divergences: usize,
}

fn metric_or_nan(ds: &Dataset, pred: &Tensor, nodes: &[usize]) -> Result<f64> {
    if nodes.is_empty() {
        Ok(f64::NAN)
    } else {
        ds.evaluate(pred, nodes)
    }
}

/// Whether `cand` beats `best` under the task's metric direction; NaN never
/// wins.
fn improves(higher_is_better: bool, cand: f64, best: f64) -> bool {
    if cand.is_nan() {
        return false;
    }
    if best.is_nan() {
        return true;
    }
    if higher_is_better {
        cand > best
    } else {
        cand < best
    }
}

pub fn outer_loop(cfg: &BilevelConfig, ds: &Dataset, init: OuterParameterization) -> Result<OuterResult> {
    outer_loop_with(cfg, ds, init, &mut |_| {})
}

/// Runs `tau_out` outer steps, calling `observer` after each record.
///
/// A diverging unroll halves `eta_in` for the rest of the run and retries
/// with a fresh inner seed; a second divergence is returned as an error.
pub fn outer_loop_with(
    cfg: &BilevelConfig,
    ds: &Dataset,
    init: OuterParameterization,
    observer: &mut dyn FnMut(&OuterRecord),
) -> Result<OuterResult> {
    cfg.validate()?;
    ds.validate()?;
    if init.support().n() != ds.n() {
        return Err(Error::dim(
            "outer_loop",
            format!("support on {} nodes, dataset has {}", init.support().n(), ds.n()),
        ));
    }
    let mut seeds = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut eta_in = cfg.eta_in;
    let mut halved = false;
    let mut divergences = 0;
    let mut param = init;
    let (lo, hi) = cfg.weight_bounds;
    param.project(lo, hi);
    let mut opt = PlainOptimizer::new(cfg.outer_optimizer, cfg.eta_out);
    let higher = ds.task.higher_is_better();

    let mut history = Vec::with_capacity(cfg.tau_out + 1);
    let mut snapshots = Vec::new();
    let mut weight_history = Vec::with_capacity(cfg.tau_out + 1);
    let mut best: Option<(usize, f64, f64, OuterParameterization, Tensor)> = None;
    let mut last_pred = Tensor::zeros(0, 0);

    for t in 0..=cfg.tau_out {
        let differentiate = t < cfg.tau_out || cfg.snapshots.contains(&t);
        let (hg, seed): (Hypergradient, u64) = loop {
            let seed: u64 = seeds.gen();
            match run_pipeline(cfg, ds, &param, seed, eta_in, differentiate) {
                Ok(hg) => break (hg, seed),
                Err(Error::Divergence { .. }) if !halved => {
                    halved = true;
                    divergences += 1;
                    eta_in *= 0.5;
                }
                Err(e) => return Err(e),
            }
        };
        let record = OuterRecord {
            iteration: t,
            f_out: hg.f_out,
            objective: hg.objective,
            inner_loss: hg.inner_loss,
            outer_metric: ds.evaluate(&hg.pred, &ds.split.outer)?,
            val_metric: metric_or_nan(ds, &hg.pred, &ds.split.val)?,
            test_metric: metric_or_nan(ds, &hg.pred, &ds.split.test)?,
            inner_seed: seed,
            eta_in,
        };
        observer(&record);
        weight_history.push(param.edge_weights(&ds.x)?);
        let better = match &best {
            None => true,
            Some((_, val, f_out, _, _)) => {
                improves(higher, record.val_metric, *val)
                    || (val.is_nan() && record.val_metric.is_nan() && record.f_out < *f_out)
            }
        };
        if better {
            best = Some((t, record.val_metric, record.f_out, param.clone(), hg.pred.clone()));
        }
        if cfg.snapshots.contains(&t) {
            snapshots.push(Snapshot {
                iteration: t,
                edge_grad: hg.edge_grad.clone(),
                edge_signal: hg.edge_signal.clone(),
            });
        }
        history.push(record);
        if t < cfg.tau_out {
            let mut flat = param.flat();
            opt.step(&mut flat, &hg.grad)?;
            param.set_flat(&flat)?;
            param.project(lo, hi);
        }
        last_pred = hg.pred;
    }
    let (best_iteration, _, _, best_param, best_pred) = best.expect("at least one record");
    Ok(OuterResult {
        history,
        snapshots,
        weight_history,
        best_iteration,
        best: best_param,
        best_pred,
        final_param: param,
        final_pred: last_pred,
        divergences,
    })
}
