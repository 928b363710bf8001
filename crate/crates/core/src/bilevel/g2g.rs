//! Graph-to-graph edge model: an MLP scoring each support edge from the
//! entrywise squared feature difference of its endpoints.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ad::{Tape, VarId};
use crate::error::{Error, Result};
use crate::graph::SupportPattern;
use crate::tensor::Tensor;

/// Nonlinearity applied to the scalar edge score so weights stay
/// nonnegative.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum G2gOutput {
    #[default]
    Relu,
    Softplus,
    Square,
    Abs,
}

impl G2gOutput {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            G2gOutput::Relu => z.max(0.0),
            G2gOutput::Softplus => softplus(z),
            G2gOutput::Square => z * z,
            G2gOutput::Abs => z.abs(),
        }
    }

    /// Derivative, with the relu and abs kinks resolved to 0.
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            G2gOutput::Relu => f64::from(u8::from(z > 0.0)),
            G2gOutput::Softplus => 1.0 / (1.0 + (-z).exp()),
            G2gOutput::Square => 2.0 * z,
            G2gOutput::Abs => {
                if z == 0.0 {
                    0.0
                } else {
                    z.signum()
                }
            }
        }
    }
}

/// `relu(z) + log(1 + e^{−|z|})`, exact without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// One dense layer `h W + 1 bᵀ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub w: Tensor,
    pub b: Tensor,
}

/// MLP with relu hidden layers and a scalar output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct G2gParams {
    pub layers: Vec<DenseLayer>,
    pub output: G2gOutput,
}

impl G2gParams {
    /// Uniform `±1/√fan_in` initialisation for widths `dims` (first = feature
    /// count, last must be 1); the final layer is multiplied by
    /// `last_scale`.
    pub fn init(dims: &[usize], last_scale: f64, output: G2gOutput, rng: &mut impl Rng) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) || *dims.last().expect("len ≥ 2") != 1 {
            return Err(Error::contract(format!("invalid G2G widths {dims:?}; the last must be 1")));
        }
        let k = dims.len() - 1;
        let layers = (0..k)
            .map(|l| {
                let bound = 1.0 / (dims[l] as f64).sqrt();
                let scale = if l + 1 == k { last_scale } else { 1.0 };
                let w = Tensor::from_fn(dims[l], dims[l + 1], |_, _| scale * rng.gen_range(-bound..bound));
                let b = Tensor::from_fn(1, dims[l + 1], |_, _| scale * rng.gen_range(-bound..bound));
                DenseLayer { w, b }
            })
            .collect();
        Ok(Self { layers, output })
    }

    /// Negates the final layer, mapping every pre-activation `z` to `−z`.
    pub fn flip_output_sign(&mut self) {
        let last = self.layers.last_mut().expect("at least one layer");
        last.w = last.w.map(|v| -v);
        last.b = last.b.map(|v| -v);
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.rows()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Parameters in the order `w, b` per layer.
    pub fn flat(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.w.data().iter().chain(l.b.data()).copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::dim("g2g", format!("{} values for {} parameters", flat.len(), self.num_params())));
        }
        let mut k = 0;
        for l in &mut self.layers {
            for t in [&mut l.w, &mut l.b] {
                let len = t.len();
                t.data_mut().copy_from_slice(&flat[k..k + len]);
                k += len;
            }
        }
        Ok(())
    }

    /// Tensors in the order of [`G2gParams::flat`].
    pub fn tensors(&self) -> Vec<Tensor> {
        self.layers.iter().flat_map(|l| [l.w.clone(), l.b.clone()]).collect()
    }

    /// Plain per-edge evaluation of the weight for one feature row.
    pub fn edge_weight(&self, feature: &[f64]) -> f64 {
        let mut h = feature.to_vec();
        let k = self.layers.len();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut next = layer.b.data().to_vec();
            for (a, &hv) in h.iter().enumerate() {
                for (o, nv) in next.iter_mut().enumerate() {
                    *nv += hv * layer.w.get(a, o);
                }
            }
            if l + 1 < k {
                next.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            h = next;
        }
        self.output.apply(h[0])
    }

    /// Directional derivative of every edge weight along the parameter
    /// direction `dir` (same layout as [`G2gParams::flat`]).
    pub fn edge_jvp(&self, features: &Tensor, dir: &[f64]) -> Result<Vec<f64>> {
        let mut tangent = self.clone();
        tangent.set_flat(dir)?;
        let k = self.layers.len();
        Ok((0..features.rows())
            .map(|e| {
                let mut h = features.row(e).to_vec();
                let mut dh = vec![0.0; h.len()];
                for (l, (layer, tl)) in self.layers.iter().zip(&tangent.layers).enumerate() {
                    let mut z = layer.b.data().to_vec();
                    let mut dz = tl.b.data().to_vec();
                    for a in 0..h.len() {
                        for o in 0..z.len() {
                            z[o] += h[a] * layer.w.get(a, o);
                            dz[o] += dh[a] * layer.w.get(a, o) + h[a] * tl.w.get(a, o);
                        }
                    }
                    if l + 1 < k {
                        for o in 0..z.len() {
                            if z[o] <= 0.0 {
                                z[o] = 0.0;
                                dz[o] = 0.0;
                            }
                        }
                    }
                    h = z;
                    dh = dz;
                }
                self.output.derivative(h[0]) * dh[0]
            })
            .collect())
    }
}

/// `E × p` matrix whose row `e` is `(X_i − X_j)²` entrywise for edge
/// `e = (i, j)`.
pub fn edge_features(x: &Tensor, support: &SupportPattern) -> Result<Tensor> {
    if x.rows() != support.n() {
        return Err(Error::dim("g2g", format!("{} feature rows for {} nodes", x.rows(), support.n())));
    }
    let p = x.cols();
    let mut f = Tensor::zeros(support.num_edges(), p);
    for (e, &(i, j)) in support.edges().iter().enumerate() {
        for (c, (a, b)) in f.row_mut(e).iter_mut().zip(x.row(i).iter().zip(x.row(j))) {
            *c = (a - b) * (a - b);
        }
    }
    Ok(f)
}

/// Records the MLP on `features` and returns the `E × 1` edge weights.
/// `leaves` follow [`G2gParams::tensors`].
pub fn g2g_forward(tape: &mut Tape, leaves: &[VarId], features: VarId, output: G2gOutput) -> Result<VarId> {
    if leaves.is_empty() || !leaves.len().is_multiple_of(2) {
        return Err(Error::contract("G2G leaves come in (w, b) pairs"));
    }
    let k = leaves.len() / 2;
    let mut h = features;
    for l in 0..k {
        let z = tape.matmul(h, leaves[2 * l])?;
        let z = tape.broadcast_add_row(z, leaves[2 * l + 1])?;
        h = if l + 1 < k { tape.relu(z)? } else { z };
    }
    if tape.value(h).cols() != 1 {
        return Err(Error::dim("g2g", "the final layer must have width 1"));
    }
    match output {
        G2gOutput::Relu => tape.relu(h),
        G2gOutput::Square => tape.square(h),
        G2gOutput::Abs => tape.abs(h),
        G2gOutput::Softplus => {
            let pos = tape.relu(h)?;
            let mag = tape.abs(h)?;
            let neg = tape.scale(mag, -1.0)?;
            let e = tape.exp(neg)?;
            let e1 = tape.add_scalar(e, 1.0)?;
            let tail = tape.log(e1)?;
            tape.add(pos, tail)
        }
    }
}
