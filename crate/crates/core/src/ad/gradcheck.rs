//! Central finite-difference checks of tape gradients.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tape::{Primitive, Tape, VarId};
use crate::error::{Error, Result};
use crate::parallel;
use crate::tensor::Tensor;

/// Central finite-difference gradient of a scalar function of several
/// tensors. The step for entries of input `k` is `h * max(1, ‖points[k]‖∞)`.
pub fn numeric_gradient<F>(f: F, points: &[Tensor], h: f64) -> Result<Vec<Tensor>>
where
    F: Fn(&[Tensor]) -> Result<f64> + Sync + Send,
{
    let coords: Vec<(usize, usize)> =
        points.iter().enumerate().flat_map(|(k, p)| (0..p.len()).map(move |e| (k, e))).collect();
    let values = parallel::map_indexed(coords.len(), |c| -> Result<f64> {
        let (k, e) = coords[c];
        let step = h * points[k].max_abs().max(1.0);
        let mut shifted = points.to_vec();
        let x0 = points[k].data()[e];
        shifted[k].data_mut()[e] = x0 + step;
        let plus = f(&shifted)?;
        shifted[k].data_mut()[e] = x0 - step;
        let minus = f(&shifted)?;
        Ok((plus - minus) / (2.0 * step))
    });
    let mut out: Vec<Tensor> = points.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
    for (&(k, e), v) in coords.iter().zip(values) {
        out[k].data_mut()[e] = v?;
    }
    Ok(out)
}

/// Max over every input coordinate of `|AD − FD| / max(1, |FD|)` for the
/// scalar built by `f` from leaves holding `points`.
pub fn grad_check<F>(f: F, points: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[VarId]) -> Result<VarId> + Sync + Send,
{
    if !(h > 0.0 && h <= 1e-3) {
        return Err(Error::contract(format!("grad_check step {h} outside (0, 1e-3]")));
    }
    let mut tape = Tape::new();
    let vars: Vec<VarId> = points.iter().map(|p| tape.var(p.clone())).collect();
    let root = f(&mut tape, &vars)?;
    let grads = tape.backward(root)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get_or_zeros(&tape, v)).collect();

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<VarId> = xs.iter().map(|p| t.constant(p.clone())).collect();
        let r = f(&mut t, &vs)?;
        Ok(t.value(r).item())
    };
    let numeric = numeric_gradient(eval, points, h)?;
    let mut worst: f64 = 0.0;
    for (a, n) in analytic.iter().zip(&numeric) {
        for (&ad, &fd) in a.data().iter().zip(n.data()) {
            worst = worst.max((ad - fd).abs() / fd.abs().max(1.0));
        }
    }
    Ok(worst)
}

/// Worst relative error observed for one primitive.
#[derive(Clone, Debug)]
pub struct PrimitiveReport {
    pub primitive: Primitive,
    pub instances: usize,
    pub max_rel_error: f64,
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.gen_range(lo..hi))
}

/// Uniform entries in `[-2, 2]` kept at least `gap` away from `at`.
fn away_from(rng: &mut ChaCha8Rng, rows: usize, cols: usize, at: f64, gap: f64) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| {
        let mag = rng.gen_range(gap..2.0);
        if rng.gen_bool(0.5) {
            at + mag
        } else {
            at - mag
        }
    })
}

/// Runs `instances` random finite-difference checks of every primitive.
///
/// Each instance contracts the primitive's output with a random constant
/// weight so that every output entry contributes to the scalar root. Inputs
/// of kinked primitives stay at least `1e-4` away from the kink and inputs of
/// `log`, `sqrt` and `divide` stay strictly inside their domain.
pub fn primitive_suite(seed: u64, instances: usize, h: f64) -> Result<Vec<PrimitiveReport>> {
    let reports = parallel::map_indexed(Primitive::ALL.len(), |p| -> Result<PrimitiveReport> {
        let prim = Primitive::ALL[p];
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((p as u64 + 1) << 32));
        let mut worst: f64 = 0.0;
        for _ in 0..instances {
            worst = worst.max(check_instance(prim, &mut rng, h)?);
        }
        Ok(PrimitiveReport { primitive: prim, instances, max_rel_error: worst })
    });
    reports.into_iter().collect()
}

fn check_instance(prim: Primitive, rng: &mut ChaCha8Rng, h: f64) -> Result<f64> {
    const KINK: f64 = 1e-4;
    let r = rng.gen_range(1..5);
    let c = rng.gen_range(1..5);
    let k = rng.gen_range(1..5);
    let mut points = Vec::new();
    match prim {
        Primitive::MatMul => {
            points.push(uniform(rng, r, k, -2.0, 2.0));
            points.push(uniform(rng, k, c, -2.0, 2.0));
        }
        Primitive::Add | Primitive::Subtract | Primitive::Hadamard => {
            points.push(uniform(rng, r, c, -2.0, 2.0));
            points.push(uniform(rng, r, c, -2.0, 2.0));
        }
        Primitive::Divide => {
            points.push(uniform(rng, r, c, -2.0, 2.0));
            points.push(uniform(rng, r, c, 0.5, 2.0));
        }
        Primitive::BroadcastAddRow => {
            points.push(uniform(rng, r, c, -2.0, 2.0));
            points.push(uniform(rng, 1, c, -2.0, 2.0));
        }
        Primitive::ScaleRows => {
            points.push(uniform(rng, r, c, -2.0, 2.0));
            points.push(uniform(rng, r, 1, -2.0, 2.0));
        }
        Primitive::Relu | Primitive::Abs => points.push(away_from(rng, r, c, 0.0, KINK)),
        Primitive::ClampMin => points.push(away_from(rng, r, c, 0.3, KINK)),
        Primitive::Log | Primitive::Sqrt => points.push(uniform(rng, r, c, 0.5, 2.0)),
        Primitive::ScatterSym => points.push(uniform(rng, r, 1, -2.0, 2.0)),
        _ => points.push(uniform(rng, r, c, -2.0, 2.0)),
    }
    let scalar = rng.gen_range(-2.0..2.0);
    let rows: Arc<[usize]> = (0..rng.gen_range(1..6)).map(|_| rng.gen_range(0..r)).collect();
    let mask: Vec<bool> = (0..r * c).map(|_| rng.gen_bool(0.4)).collect();
    // Scatter pairs: r distinct unordered pairs on n = r + 2 nodes.
    let n_scatter = r + 2;
    let mut all_pairs: Vec<(usize, usize)> =
        (0..n_scatter).flat_map(|i| ((i + 1)..n_scatter).map(move |j| (i, j))).collect();
    for i in (1..all_pairs.len()).rev() {
        all_pairs.swap(i, rng.gen_range(0..=i));
    }
    let pairs: Arc<[(usize, usize)]> = all_pairs[..r].to_vec().into();

    // The weight shape depends on the primitive's output shape, which is
    // computed once on a throwaway tape.
    let build_output = |t: &mut Tape, v: &[VarId]| -> Result<VarId> {
        match prim {
            Primitive::MatMul => t.matmul(v[0], v[1]),
            Primitive::Add => t.add(v[0], v[1]),
            Primitive::Subtract => t.sub(v[0], v[1]),
            Primitive::Hadamard => t.hadamard(v[0], v[1]),
            Primitive::Divide => t.div(v[0], v[1]),
            Primitive::ScalarScale => t.scale(v[0], scalar),
            Primitive::AddScalar => t.add_scalar(v[0], scalar),
            Primitive::BroadcastAddRow => t.broadcast_add_row(v[0], v[1]),
            Primitive::ScaleRows => t.scale_rows(v[0], v[1]),
            Primitive::Relu => t.relu(v[0]),
            Primitive::SoftmaxRows => t.softmax_rows(v[0]),
            Primitive::LogSoftmaxRows => t.log_softmax_rows(v[0]),
            Primitive::Log => t.log(v[0]),
            Primitive::Exp => t.exp(v[0]),
            Primitive::Square => t.square(v[0]),
            Primitive::Sqrt => t.sqrt(v[0]),
            Primitive::Abs => t.abs(v[0]),
            Primitive::Transpose => t.transpose(v[0]),
            Primitive::RowSelect => t.row_select(v[0], &rows),
            Primitive::ReduceSum => t.reduce_sum(v[0]),
            Primitive::ReduceMean => t.reduce_mean(v[0]),
            Primitive::MaskedFill => t.masked_fill(v[0], &mask, scalar),
            Primitive::ClampMin => t.clamp_min(v[0], 0.3),
            Primitive::ScatterSym => t.scatter_sym(v[0], pairs.clone(), n_scatter),
        }
    };
    let (wr, wc) = {
        let mut t = Tape::new();
        let vs: Vec<VarId> = points.iter().map(|p| t.constant(p.clone())).collect();
        let out = build_output(&mut t, &vs)?;
        t.value(out).shape()
    };
    let weight = uniform(rng, wr, wc, -1.0, 1.0);
    grad_check(
        |t, v| {
            let out = build_output(t, v)?;
            let w = t.constant(weight.clone());
            let prod = t.hadamard(out, w)?;
            t.reduce_sum(prod)
        },
        &points,
        h,
    )
}
