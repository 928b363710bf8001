//! Inner problems: the message-passing GCN and Laplacian-regularised label
//! propagation, with losses and hand-derived inner gradients recorded as
//! first-order tape primitives.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ad::{Tape, VarId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Mse,
    Cce,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

/// Targets for every node plus the labelled mask. Unlabelled rows hold zeros
/// and are never read by a loss.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledTargets {
    pub y: Tensor,
    pub mask: Vec<bool>,
}

impl LabeledTargets {
    pub fn new(y: Tensor, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != y.rows() {
            return Err(Error::dim("labeled_targets", format!("{} mask entries for {} rows", mask.len(), y.rows())));
        }
        Ok(Self { y, mask })
    }

    pub fn n(&self) -> usize {
        self.y.rows()
    }

    pub fn classes(&self) -> usize {
        self.y.cols()
    }

    /// `n × c` matrix whose rows are 1 on `nodes` and 0 elsewhere.
    pub fn row_mask(&self, nodes: &[usize]) -> Tensor {
        let mut m = Tensor::zeros(self.n(), self.classes());
        for &u in nodes {
            m.row_mut(u).fill(1.0);
        }
        m
    }
}

/// Weights of one GCN layer: `φ(H W1 + A H W2 + 1 bᵀ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GcnLayer {
    pub w1: Tensor,
    pub w2: Tensor,
    /// `1 × d_out` row.
    pub b: Tensor,
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GcnParams {
    pub layers: Vec<GcnLayer>,
}

impl GcnParams {
    /// Xavier-uniform weights and zero biases for layer widths `dims`
    /// (`dims[0]` = feature count, last = output width). Hidden layers use
    /// relu and the final layer is linear.
    pub fn xavier(dims: &[usize], rng: &mut impl Rng) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::contract(format!("invalid GCN widths {dims:?}")));
        }
        let k = dims.len() - 1;
        let layers = (0..k)
            .map(|l| {
                let (din, dout) = (dims[l], dims[l + 1]);
                let bound = (6.0 / (din + dout) as f64).sqrt();
                let mut draw = || Tensor::from_fn(din, dout, |_, _| rng.gen_range(-bound..bound));
                let w1 = draw();
                let w2 = draw();
                GcnLayer {
                    w1,
                    w2,
                    b: Tensor::zeros(1, dout),
                    activation: if l + 1 == k { Activation::Identity } else { Activation::Relu },
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Parameters in a fixed order: `w1, w2, b` per layer.
    pub fn flatten(&self) -> Vec<Tensor> {
        self.layers.iter().flat_map(|l| [l.w1.clone(), l.w2.clone(), l.b.clone()]).collect()
    }

    /// Checks widths chain and returns the output width.
    pub fn validate(&self, in_dim: usize) -> Result<usize> {
        let mut d = in_dim;
        for (l, layer) in self.layers.iter().enumerate() {
            let out = layer.w1.cols();
            if layer.w1.rows() != d || layer.w2.shape() != (d, out) || layer.b.shape() != (1, out) {
                return Err(Error::dim("gcn_forward", format!("layer {l} does not accept width {d}")));
            }
            d = out;
        }
        Ok(d)
    }
}

/// Tape handles of one layer's parameters.
#[derive(Clone, Copy, Debug)]
pub struct GcnLayerVars {
    pub w1: VarId,
    pub w2: VarId,
    pub b: VarId,
}

/// Tape handles of a GCN together with each layer's activation.
#[derive(Clone, Debug)]
pub struct GcnVars {
    pub layers: Vec<GcnLayerVars>,
    pub activations: Vec<Activation>,
}

impl GcnVars {
    pub fn leaves(tape: &mut Tape, params: &GcnParams) -> Self {
        let layers = params
            .layers
            .iter()
            .map(|l| GcnLayerVars { w1: tape.var(l.w1.clone()), w2: tape.var(l.w2.clone()), b: tape.var(l.b.clone()) })
            .collect();
        Self { layers, activations: params.layers.iter().map(|l| l.activation).collect() }
    }

    pub fn flatten(&self) -> Vec<VarId> {
        self.layers.iter().flat_map(|l| [l.w1, l.w2, l.b]).collect()
    }

    /// Inverse of [`GcnVars::flatten`].
    pub fn from_flat(flat: &[VarId], activations: &[Activation]) -> Self {
        let layers = flat.chunks(3).map(|c| GcnLayerVars { w1: c[0], w2: c[1], b: c[2] }).collect();
        Self { layers, activations: activations.to_vec() }
    }
}

/// Per-unroll constants shared by every inner step on one tape.
#[derive(Clone, Debug)]
pub struct InnerContext {
    pub a: VarId,
    pub x: Option<VarId>,
    /// `A X`, formed once because `X` never changes during an unroll.
    pub ax: Option<VarId>,
    pub targets: VarId,
    /// `n × c` row mask of `V_tr`.
    pub train_mask: VarId,
    pub train: Vec<usize>,
    pub ones_row: VarId,
    pub ones_col: VarId,
    pub kind: LossKind,
    pub n: usize,
}

impl InnerContext {
    /// Records the constants for an unroll on adjacency `a`. Features are
    /// only needed by the GCN.
    pub fn new(
        tape: &mut Tape,
        a: VarId,
        features: Option<&Tensor>,
        targets: &LabeledTargets,
        train: &[usize],
        kind: LossKind,
    ) -> Result<Self> {
        let n = targets.n();
        let (ar, ac) = tape.value(a).shape();
        if (ar, ac) != (n, n) {
            return Err(Error::dim("inner_context", format!("adjacency {ar}x{ac} for {n} nodes")));
        }
        check_nodes(targets, train)?;
        let (x, ax) = match features {
            Some(f) => {
                if f.rows() != n {
                    return Err(Error::dim("gcn_forward", format!("{} feature rows for {n} nodes", f.rows())));
                }
                let x = tape.constant(f.clone());
                let ax = tape.matmul(a, x)?;
                (Some(x), Some(ax))
            }
            None => (None, None),
        };
        Ok(Self {
            a,
            x,
            ax,
            targets: tape.constant(targets.y.clone()),
            train_mask: tape.constant(targets.row_mask(train)),
            train: train.to_vec(),
            ones_row: tape.constant(Tensor::ones(1, n)),
            ones_col: tape.constant(Tensor::ones(n, 1)),
            kind,
            n,
        })
    }
}

fn check_nodes(targets: &LabeledTargets, nodes: &[usize]) -> Result<()> {
    if nodes.is_empty() {
        return Err(Error::contract("loss over an empty node set"));
    }
    if let Some(&u) = nodes.iter().find(|&&u| u >= targets.n() || !targets.mask[u]) {
        return Err(Error::contract(format!("node {u} is not labelled")));
    }
    Ok(())
}

/// Intermediate handles of a GCN forward pass, reused by [`inner_grad_gcn`].
#[derive(Clone, Debug)]
pub struct GcnTrace {
    /// Input of each layer (`X` for the first).
    pub inputs: Vec<VarId>,
    /// `A · input` of each layer.
    pub aggregated: Vec<VarId>,
    /// Pre-activation of each layer.
    pub pre: Vec<VarId>,
    pub output: VarId,
}

/// `X^[l] = φ(X^[l−1] W1 + A X^[l−1] W2 + 1 bᵀ)` for every layer.
pub fn gcn_forward_traced(tape: &mut Tape, vars: &GcnVars, ctx: &InnerContext) -> Result<GcnTrace> {
    let x = ctx.x.ok_or_else(|| Error::contract("GCN unroll without features"))?;
    let mut h = x;
    let mut trace = GcnTrace { inputs: vec![], aggregated: vec![], pre: vec![], output: x };
    for (l, (layer, &act)) in vars.layers.iter().zip(&vars.activations).enumerate() {
        let agg = match (l, ctx.ax) {
            (0, Some(ax)) => ax,
            _ => tape.matmul(ctx.a, h)?,
        };
        let self_term = tape.matmul(h, layer.w1)?;
        let neigh_term = tape.matmul(agg, layer.w2)?;
        let lin = tape.add(self_term, neigh_term)?;
        let z = tape.broadcast_add_row(lin, layer.b)?;
        let out = match act {
            Activation::Relu => tape.relu(z)?,
            Activation::Identity => z,
        };
        trace.inputs.push(h);
        trace.aggregated.push(agg);
        trace.pre.push(z);
        h = out;
    }
    trace.output = h;
    Ok(trace)
}

pub fn gcn_forward(tape: &mut Tape, vars: &GcnVars, ctx: &InnerContext) -> Result<VarId> {
    Ok(gcn_forward_traced(tape, vars, ctx)?.output)
}

/// Mean over `nodes` of the per-node loss; MSE sums over columns and CCE
/// applies a row softmax to `pred` first.
pub fn masked_loss(
    tape: &mut Tape,
    pred: VarId,
    targets: &LabeledTargets,
    nodes: &[usize],
    kind: LossKind,
) -> Result<VarId> {
    check_nodes(targets, nodes)?;
    let (pr, pc) = tape.value(pred).shape();
    if (pr, pc) != targets.y.shape() {
        return Err(Error::dim("masked_loss", format!("pred {pr}x{pc} vs targets {:?}", targets.y.shape())));
    }
    let p = tape.row_select(pred, nodes)?;
    let y = tape.constant(targets.y.select_rows(nodes));
    let total = match kind {
        LossKind::Mse => {
            let d = tape.sub(p, y)?;
            let sq = tape.square(d)?;
            tape.reduce_sum(sq)?
        }
        LossKind::Cce => {
            let ls = tape.log_softmax_rows(p)?;
            let prod = tape.hadamard(ls, y)?;
            let s = tape.reduce_sum(prod)?;
            tape.scale(s, -1.0)?
        }
    };
    tape.scale(total, 1.0 / nodes.len() as f64)
}

/// Plain-value counterpart of [`masked_loss`].
pub fn masked_loss_value(pred: &Tensor, targets: &LabeledTargets, nodes: &[usize], kind: LossKind) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(pred.clone());
    let l = masked_loss(&mut tape, p, targets, nodes, kind)?;
    Ok(tape.value(l).item())
}

/// `Σ_c Y_cᵀ L Y_c` with `L = diag(A1) − A`, differentiable in both `Y` and `A`.
pub fn laplacian_quadratic(tape: &mut Tape, y: VarId, a: VarId) -> Result<VarId> {
    let c = tape.value(y).cols();
    let n = tape.value(y).rows();
    let ones_n = tape.constant(Tensor::ones(n, 1));
    let ones_c = tape.constant(Tensor::ones(c, 1));
    let deg = tape.matmul(a, ones_n)?;
    let ysq = tape.square(y)?;
    let norms = tape.matmul(ysq, ones_c)?;
    let weighted = tape.hadamard(deg, norms)?;
    let diag_term = tape.reduce_sum(weighted)?;
    let ay = tape.matmul(a, y)?;
    let cross = tape.hadamard(y, ay)?;
    let cross_term = tape.reduce_sum(cross)?;
    tape.sub(diag_term, cross_term)
}

/// `masked_loss(Y, V_tr) + (λ/|E|) Σ_c Y_cᵀ L Y_c`.
#[allow(clippy::too_many_arguments)]
pub fn laplacian_reg_objective(
    tape: &mut Tape,
    y: VarId,
    a: VarId,
    targets: &LabeledTargets,
    train: &[usize],
    lambda: f64,
    num_edges: usize,
    kind: LossKind,
) -> Result<VarId> {
    if num_edges == 0 {
        return Err(Error::contract("Laplacian objective on an edgeless graph"));
    }
    if !(lambda > 0.0) {
        return Err(Error::contract(format!("λ must be positive, got {lambda}")));
    }
    let fit = masked_loss(tape, y, targets, train, kind)?;
    let quad = laplacian_quadratic(tape, y, a)?;
    let reg = tape.scale(quad, lambda / num_edges as f64)?;
    tape.add(fit, reg)
}

/// Gradient of the masked training loss wrt the predictions, masked by exact
/// zeros outside `V_tr`.
fn loss_grad_wrt_pred(tape: &mut Tape, pred: VarId, ctx: &InnerContext) -> Result<VarId> {
    let n_train = ctx.train.len() as f64;
    match ctx.kind {
        LossKind::Mse => {
            let d = tape.sub(pred, ctx.targets)?;
            let m = tape.hadamard(d, ctx.train_mask)?;
            tape.scale(m, 2.0 / n_train)
        }
        LossKind::Cce => {
            let s = tape.softmax_rows(pred)?;
            let d = tape.sub(s, ctx.targets)?;
            let m = tape.hadamard(d, ctx.train_mask)?;
            tape.scale(m, 1.0 / n_train)
        }
    }
}

/// Hand-derived `∇_W F_in` of the GCN at the traced forward pass. The relu
/// masks enter as constants.
pub fn inner_grad_gcn(
    tape: &mut Tape,
    vars: &GcnVars,
    trace: &GcnTrace,
    ctx: &InnerContext,
) -> Result<Vec<GcnLayerVars>> {
    let k = vars.layers.len();
    let mut grads = Vec::with_capacity(k);
    let mut d_out = loss_grad_wrt_pred(tape, trace.output, ctx)?;
    for l in (0..k).rev() {
        let layer = vars.layers[l];
        let dz = match vars.activations[l] {
            Activation::Relu => {
                let mask = tape.value(trace.pre[l]).map(|z| if z > 0.0 { 1.0 } else { 0.0 });
                let m = tape.constant(mask);
                tape.hadamard(d_out, m)?
            }
            Activation::Identity => d_out,
        };
        let h_t = tape.transpose(trace.inputs[l])?;
        let dw1 = tape.matmul(h_t, dz)?;
        let agg_t = tape.transpose(trace.aggregated[l])?;
        let dw2 = tape.matmul(agg_t, dz)?;
        let db = tape.matmul(ctx.ones_row, dz)?;
        grads.push(GcnLayerVars { w1: dw1, w2: dw2, b: db });
        if l > 0 {
            let w1_t = tape.transpose(layer.w1)?;
            let w2_t = tape.transpose(layer.w2)?;
            let self_part = tape.matmul(dz, w1_t)?;
            let pre_neigh = tape.matmul(dz, w2_t)?;
            // A is symmetric, so Aᵀ (dZ W2ᵀ) = A (dZ W2ᵀ).
            let neigh_part = tape.matmul(ctx.a, pre_neigh)?;
            d_out = tape.add(self_part, neigh_part)?;
        }
    }
    grads.reverse();
    Ok(grads)
}

/// `∇_Y` of [`laplacian_reg_objective`]: the fit term's gradient plus
/// `(2λ/|E|) L Y`.
pub fn inner_grad_labels(
    tape: &mut Tape,
    y: VarId,
    ctx: &InnerContext,
    lambda: f64,
    num_edges: usize,
) -> Result<VarId> {
    if num_edges == 0 {
        return Err(Error::contract("Laplacian objective on an edgeless graph"));
    }
    let fit = loss_grad_wrt_pred(tape, y, ctx)?;
    let deg = tape.matmul(ctx.a, ctx.ones_col)?;
    let dy = tape.scale_rows(y, deg)?;
    let ay = tape.matmul(ctx.a, y)?;
    let ly = tape.sub(dy, ay)?;
    let reg = tape.scale(ly, 2.0 * lambda / num_edges as f64)?;
    tape.add(fit, reg)
}

/// Worst finite-difference disagreement of one inner model's loss.
#[derive(Clone, Debug)]
pub struct ModelCheckReport {
    pub model: &'static str,
    pub instances: usize,
    pub max_rel_error: f64,
}

fn random_symmetric(rng: &mut impl Rng, n: usize) -> Tensor {
    let mut a = Tensor::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            if rng.gen_bool(0.5) {
                let w = rng.gen_range(0.1..1.0);
                a.set(i, j, w);
                a.set(j, i, w);
            }
        }
    }
    a
}

fn random_targets(rng: &mut impl Rng, n: usize, classes: usize, kind: LossKind) -> LabeledTargets {
    let y = match kind {
        LossKind::Cce => {
            let mut y = Tensor::zeros(n, classes);
            for u in 0..n {
                y.set(u, rng.gen_range(0..classes), 1.0);
            }
            y
        }
        LossKind::Mse => Tensor::from_fn(n, classes, |_, _| rng.gen_range(0.0..1.0)),
    };
    LabeledTargets::new(y, vec![true; n]).expect("shapes agree")
}

/// Random finite-difference checks of both inner models with the adjacency
/// itself among the differentiated inputs: the GCN training loss (both loss
/// kinds) wrt every weight and `A`, and the Laplacian-regularized objective
/// wrt `Y` and `A`.
pub fn inner_model_suite(seed: u64, instances: usize, h: f64) -> Result<Vec<ModelCheckReport>> {
    use crate::ad::grad_check;
    use rand::SeedableRng;

    let cases: [(&'static str, Option<LossKind>); 3] =
        [("gcn/cce", Some(LossKind::Cce)), ("gcn/mse", Some(LossKind::Mse)), ("laplacian", None)];
    cases
        .iter()
        .enumerate()
        .map(|(k, &(model, kind))| {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ ((k as u64 + 1) << 40));
            let mut worst: f64 = 0.0;
            for _ in 0..instances {
                let n = rng.gen_range(3..8);
                let train: Vec<usize> = (0..n).filter(|u| u % 2 == 0).collect();
                let a0 = random_symmetric(&mut rng, n);
                let err = match kind {
                    Some(kind) => {
                        let p = rng.gen_range(1..4);
                        let classes = if kind == LossKind::Cce { rng.gen_range(2..4) } else { 1 };
                        let hidden = rng.gen_range(1..4);
                        let params = GcnParams::xavier(&[p, hidden, classes], &mut rng)?;
                        let x = Tensor::from_fn(n, p, |_, _| rng.gen_range(-1.0..1.0));
                        let targets = random_targets(&mut rng, n, classes, kind);
                        let activations: Vec<Activation> = params.layers.iter().map(|l| l.activation).collect();
                        let mut points = vec![a0];
                        points.extend(params.flatten());
                        grad_check(
                            |t, v| {
                                let ctx = InnerContext::new(t, v[0], Some(&x), &targets, &train, kind)?;
                                let vars = GcnVars::from_flat(&v[1..], &activations);
                                let out = gcn_forward(t, &vars, &ctx)?;
                                masked_loss(t, out, &targets, &train, kind)
                            },
                            &points,
                            h,
                        )?
                    }
                    None => {
                        let num_edges = a0.data().iter().filter(|&&w| w != 0.0).count() / 2;
                        let targets = random_targets(&mut rng, n, 1, LossKind::Mse);
                        let lambda = rng.gen_range(0.1..2.0);
                        let y0 = Tensor::from_fn(n, 1, |_, _| rng.gen_range(0.0..1.0));
                        grad_check(
                            |t, v| {
                                laplacian_reg_objective(
                                    t,
                                    v[1],
                                    v[0],
                                    &targets,
                                    &train,
                                    lambda,
                                    num_edges.max(1),
                                    LossKind::Mse,
                                )
                            },
                            &[a0, y0],
                            h,
                        )?
                    }
                };
                worst = worst.max(err);
            }
            Ok(ModelCheckReport { model, instances, max_rel_error: worst })
        })
        .collect()
}
