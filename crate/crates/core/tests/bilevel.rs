mod common;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scarcegrad::ad::Tape;
use scarcegrad::bilevel::{
    hypergradient, materialize_adjacency, outer_loop, outer_objective, run_pipeline, unroll_inner, BilevelConfig,
    G2gOutput, G2gParams, InnerModel, OptimizerKind, OuterParameterization, PlainOptimizer, SmoothOptimizer,
};
use scarcegrad::data::{Dataset, Task};
use scarcegrad::graph::{edge_distance, hop_distances, laplacian_dense, DistanceMode, SupportPattern};
use scarcegrad::inner::{gcn_forward_traced, inner_grad_gcn, GcnParams, GcnVars, InnerContext};
use scarcegrad::neumann::{adjoint_hypergradient, spectral_summary, RegularizedSystem};
use scarcegrad::{Error, Tensor};

use common::{connected_pairs, random_pairs, rng, tiny};

fn laplacian_cfg(lambda: f64, inner: OptimizerKind, eta_in: f64, tau_in: usize) -> BilevelConfig {
    BilevelConfig {
        model: InnerModel::Laplacian { lambda },
        inner_optimizer: inner,
        eta_in,
        tau_in,
        outer_optimizer: OptimizerKind::Adam,
        eta_out: 0.1,
        tau_out: 3,
        gamma: 0.0,
        seed: 7,
        weight_bounds: (0.0, 1e6),
        snapshots: vec![],
    }
}

fn gcn_cfg(hidden: Vec<usize>, inner: OptimizerKind, eta_in: f64, tau_in: usize) -> BilevelConfig {
    BilevelConfig { model: InnerModel::Gcn { hidden }, ..laplacian_cfg(1.0, inner, eta_in, tau_in) }
}

fn direct(ds: &Dataset, seed: u64) -> OuterParameterization {
    OuterParameterization::direct_uniform(Arc::clone(ds.a_obs.support()), 1.0, &mut rng(seed))
}

#[test]
fn direct_single_edge_materializes_symmetrically() {
    let support = Arc::new(SupportPattern::new(3, [(0, 1)]).unwrap());
    let param = OuterParameterization::DirectEdges { support, weights: vec![0.7] };
    let mut tape = Tape::new();
    let m = materialize_adjacency(&mut tape, &param, &Tensor::zeros(3, 1)).unwrap();
    let a = tape.value(m.adjacency);
    assert_eq!(a.get(0, 1), 0.7);
    assert_eq!(a.get(1, 0), 0.7);
    assert_eq!(a.sum(), 1.4);
}

#[test]
fn g2g_dimension_mismatch_is_rejected() {
    let support = Arc::new(SupportPattern::complete(3));
    let params = G2gParams::init(&[2, 4, 1], 1.0, G2gOutput::Relu, &mut rng(0)).unwrap();
    let param = OuterParameterization::LatentG2G { support, params };
    let mut tape = Tape::new();
    assert!(matches!(materialize_adjacency(&mut tape, &param, &Tensor::zeros(3, 5)), Err(Error::Dimension { .. })));
}

#[test]
fn log_degree_regularizer_on_triangle() {
    let ds = tiny(3, &[(0, 1), (0, 2), (1, 2)], 1, Task::Regression, vec![0], vec![1], 0);
    let mut tape = Tape::new();
    let a = tape.constant(ds.a_obs.adjacency());
    let pred = tape.constant(ds.truth.clone());
    let plain = outer_objective(&mut tape, pred, &ds, 0.0, a).unwrap();
    assert_eq!(tape.value(plain).item(), 0.0);
    let reg = outer_objective(&mut tape, pred, &ds, 1.0, a).unwrap();
    assert_eq!(tape.value(reg).item(), -3.0 * (2.0f64 + 1e-8).ln());
}

#[test]
fn log_degree_regularizer_matches_loop() {
    let n = 9;
    let ds = tiny(n, &random_pairs(n, 0.4, 3), 2, Task::Regression, vec![0, 1], vec![2], 3);
    let param = direct(&ds, 11);
    let gamma = 0.37;
    let mut tape = Tape::new();
    let m = materialize_adjacency(&mut tape, &param, &ds.x).unwrap();
    let pred = tape.constant(ds.truth.clone());
    let obj = outer_objective(&mut tape, pred, &ds, gamma, m.adjacency).unwrap();
    let OuterParameterization::DirectEdges { support, weights } = &param else { unreachable!() };
    let mut deg = vec![0.0; n];
    for (&(i, j), &w) in support.edges().iter().zip(weights) {
        deg[i] += w;
        deg[j] += w;
    }
    let want: f64 = -gamma * deg.iter().map(|d| (d + 1e-8).ln()).sum::<f64>();
    assert!((tape.value(obj).item() - want).abs() < 1e-12);
}

#[test]
fn single_laplacian_step_matches_hand_computation() {
    let n = 6;
    let ds = tiny(n, &connected_pairs(n, 0.3, 1), 1, Task::Regression, vec![0, 3], vec![5], 1);
    let (lambda, eta, seed) = (0.8, 0.05, 99);
    let cfg = laplacian_cfg(lambda, OptimizerKind::Gd, eta, 1);
    let a = ds.a_obs.adjacency();
    let m = ds.a_obs.support().num_edges() as f64;
    let mut tape = Tape::new();
    let av = tape.constant(a.clone());
    let out = unroll_inner(&mut tape, &cfg, &ds, av, ds.a_obs.support().num_edges(), seed, eta).unwrap();

    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let y0: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..1.0)).collect();
    let l = laplacian_dense(&a);
    for u in 0..n {
        let fit = if ds.split.train.contains(&u) { 2.0 / 2.0 * (y0[u] - ds.truth.get(u, 0)) } else { 0.0 };
        let ly: f64 = (0..n).map(|v| l.get(u, v) * y0[v]).sum();
        let want = y0[u] - eta * (fit + 2.0 * lambda / m * ly);
        assert!((tape.value(out.pred).get(u, 0) - want).abs() < 1e-14, "node {u}");
    }
}

#[test]
fn zero_inner_steps_are_rejected() {
    let ds = tiny(3, &[(0, 1), (1, 2)], 1, Task::Regression, vec![0], vec![2], 0);
    let cfg = laplacian_cfg(1.0, OptimizerKind::Gd, 0.1, 0);
    let mut tape = Tape::new();
    let a = tape.constant(ds.a_obs.adjacency());
    assert!(unroll_inner(&mut tape, &cfg, &ds, a, 2, 0, 0.1).is_err());
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
}

/// GD step size and step count that bring the label iteration within
/// `tol` of its fixed point.
fn converging_schedule(ds: &Dataset, a: &Tensor, lambda: f64, tol: f64) -> (f64, usize) {
    let sys = RegularizedSystem::new(a, ds.a_obs.support().num_edges(), &ds.targets, &ds.split.train, lambda).unwrap();
    let spec = spectral_summary(&sys).unwrap();
    // The inner gradient is 2(BY − rhs); η = 1/(2μ_max) contracts by
    // 1 − μ_min/μ_max per step.
    let eta = 0.5 / spec.mu_max;
    let steps = (tol.ln() / (1.0 - spec.mu_min / spec.mu_max).ln()).ceil() as usize;
    (eta, steps)
}

#[test]
fn long_laplacian_unroll_reaches_closed_form() {
    let n = 10;
    let ds = tiny(n, &connected_pairs(n, 0.3, 2), 1, Task::Regression, vec![0, 4, 7], vec![9], 2);
    let lambda = 1.0;
    let a = ds.a_obs.adjacency();
    let (eta, steps) = converging_schedule(&ds, &a, lambda, 1e-7);
    let cfg = laplacian_cfg(lambda, OptimizerKind::Gd, eta, steps);
    let mut tape = Tape::new();
    let av = tape.constant(a.clone());
    let out = unroll_inner(&mut tape, &cfg, &ds, av, ds.a_obs.support().num_edges(), 5, eta).unwrap();
    let sys = RegularizedSystem::new(&a, ds.a_obs.support().num_edges(), &ds.targets, &ds.split.train, lambda).unwrap();
    let closed = scarcegrad::neumann::closed_form_solve(&sys).unwrap();
    let err = tape.value(out.pred).sub(&closed).max_abs();
    assert!(err <= 1e-4, "max deviation {err:e} after {steps} steps");
}

#[test]
fn converged_unroll_matches_adjoint_hypergradient() {
    let n = 8;
    let ds = tiny(n, &connected_pairs(n, 0.35, 4), 1, Task::Regression, vec![0, 5], vec![3, 7], 4);
    let param = direct(&ds, 2);
    let lambda = 1.0;
    let graph = param.graph(&ds.x).unwrap();
    let a = graph.adjacency();
    let (eta, steps) = converging_schedule(&ds, &a, lambda, 1e-9);
    let cfg = laplacian_cfg(lambda, OptimizerKind::Gd, eta, steps);
    let hg = hypergradient(&cfg, &ds, &param, 3, eta).unwrap();
    let sys = RegularizedSystem::new(&a, graph.support().num_edges(), &ds.targets, &ds.split.train, lambda).unwrap();
    let oracle = adjoint_hypergradient(&sys, &ds.targets, &ds.split.outer, graph.support().edges()).unwrap();
    let scale = oracle.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    for (e, (got, want)) in hg.edge_grad.iter().zip(&oracle).enumerate() {
        assert!((got - want).abs() <= 1e-3 * want.abs().max(1e-3 * scale), "edge {e}: {got:e} vs {want:e}");
    }
}

/// Central differences of the full pipeline objective along each flat
/// parameter.
fn pipeline_fd(cfg: &BilevelConfig, ds: &Dataset, param: &OuterParameterization, seed: u64, h: f64) -> Vec<f64> {
    let base = param.flat();
    (0..base.len())
        .map(|k| {
            let eval = |delta: f64| {
                let mut p = param.clone();
                let mut flat = base.clone();
                flat[k] += delta;
                p.set_flat(&flat).unwrap();
                run_pipeline(cfg, ds, &p, seed, cfg.eta_in, false).unwrap().objective
            };
            (eval(h) - eval(-h)) / (2.0 * h)
        })
        .collect()
}

fn assert_matches_fd(cfg: &BilevelConfig, ds: &Dataset, param: &OuterParameterization, rel: f64) {
    let seed = 17;
    let hg = hypergradient(cfg, ds, param, seed, cfg.eta_in).unwrap();
    let fd = pipeline_fd(cfg, ds, param, seed, 1e-6);
    for (k, (a, f)) in hg.grad.iter().zip(&fd).enumerate() {
        assert!((a - f).abs() <= rel * f.abs() + 1e-8, "{:?} parameter {k}: AD {a:e} vs FD {f:e}", cfg.model);
    }
}

#[test]
fn laplacian_hypergradient_matches_pipeline_fd() {
    let n = 7;
    let ds = tiny(n, &connected_pairs(n, 0.3, 5), 1, Task::Regression, vec![0, 2], vec![4, 6], 5);
    let param = direct(&ds, 6);
    assert_matches_fd(&laplacian_cfg(0.5, OptimizerKind::Gd, 0.5, 25), &ds, &param, 1e-4);
    assert_matches_fd(&laplacian_cfg(0.5, OptimizerKind::Adam, 0.05, 25), &ds, &param, 1e-3);
}

#[test]
fn gcn_hypergradient_matches_pipeline_fd() {
    let n = 8;
    let ds = tiny(n, &connected_pairs(n, 0.3, 8), 3, Task::Classification, vec![0, 1, 5], vec![3, 7], 8);
    let param = direct(&ds, 9);
    assert_matches_fd(&gcn_cfg(vec![4], OptimizerKind::Gd, 0.2, 10), &ds, &param, 1e-4);
    assert_matches_fd(&gcn_cfg(vec![4], OptimizerKind::Adam, 0.01, 10), &ds, &param, 1e-3);
    let mut with_gamma = gcn_cfg(vec![4], OptimizerKind::Gd, 0.2, 10);
    with_gamma.gamma = 0.3;
    assert_matches_fd(&with_gamma, &ds, &param, 1e-4);
}

#[test]
fn g2g_hypergradient_matches_pipeline_fd() {
    let n = 7;
    let ds = tiny(n, &connected_pairs(n, 0.4, 12), 2, Task::Regression, vec![0, 3], vec![6], 12);
    let params = G2gParams::init(&[2, 5, 1], 1.0, G2gOutput::Softplus, &mut rng(13)).unwrap();
    let param = OuterParameterization::LatentG2G { support: Arc::clone(ds.a_obs.support()), params };
    assert_matches_fd(&laplacian_cfg(1.0, OptimizerKind::Gd, 0.5, 15), &ds, &param, 1e-4);
}

#[test]
fn far_edges_get_exactly_zero_gcn_hypergradient() {
    // Path 0-1-2-3-4 with V_tr = {0}, V_out = {1}: edge (3,4) is two hops
    // from every labelled node.
    let ds = tiny(5, &[(0, 1), (1, 2), (2, 3), (3, 4)], 2, Task::Classification, vec![0], vec![1], 21);
    let cfg = gcn_cfg(vec![4], OptimizerKind::Adam, 0.01, 20);
    let hg = hypergradient(&cfg, &ds, &direct(&ds, 1), 3, cfg.eta_in).unwrap();
    assert_eq!(hg.edge_grad[3], 0.0);
    assert!(hg.edge_grad[..3].iter().any(|g| *g != 0.0));

    let mut closer_nonzero = 0;
    for seed in 0..6 {
        let n = 14;
        let ds = tiny(n, &random_pairs(n, 0.18, 40 + seed), 3, Task::Classification, vec![0, 1], vec![2], 40 + seed);
        let param = direct(&ds, seed);
        let dist = edge_distance(ds.a_obs.support(), &ds.split, DistanceMode::Gcn).unwrap();
        let cfg = gcn_cfg(vec![5], OptimizerKind::Adam, 0.01, 15);
        let hg = hypergradient(&cfg, &ds, &param, seed, cfg.eta_in).unwrap();
        for (e, d) in dist.iter().enumerate() {
            match d {
                Some(d) if *d < 2 => closer_nonzero += usize::from(hg.edge_grad[e] != 0.0),
                _ => assert!(hg.edge_grad[e].abs() <= 1e-12, "seed {seed} edge {e} at distance {d:?}"),
            }
        }
    }
    assert!(closer_nonzero > 0);
}

#[test]
fn far_edges_leave_inner_iterates_unchanged() {
    let n = 12;
    let pairs = connected_pairs(n, 0.1, 31);
    let ds = tiny(n, &pairs, 3, Task::Classification, vec![0, 1], vec![2], 31);
    let support = ds.a_obs.support();
    let d_tr = hop_distances(support, &ds.split.train).unwrap();
    let k = 2;
    let far: Vec<usize> = support
        .edges()
        .iter()
        .enumerate()
        .filter(|(_, &(i, j))| d_tr[i].is_none_or(|d| d >= k) && d_tr[j].is_none_or(|d| d >= k))
        .map(|(e, _)| e)
        .collect();
    assert!(!far.is_empty());
    let weights = |bump: Option<usize>| {
        let mut w = vec![0.5; support.num_edges()];
        if let Some(e) = bump {
            w[e] += 0.3;
        }
        scarcegrad::graph::WeightedGraph::new(Arc::clone(support), w).unwrap().adjacency()
    };
    let iterates = |a: Tensor| {
        let mut tape = Tape::new();
        let av = tape.constant(a);
        let ctx = InnerContext::new(&mut tape, av, Some(&ds.x), &ds.targets, &ds.split.train, ds.task.loss()).unwrap();
        let params = GcnParams::xavier(&[3, 4, 2], &mut rng(5)).unwrap();
        let mut vars = GcnVars::leaves(&mut tape, &params);
        let mut opt = SmoothOptimizer::new(OptimizerKind::Adam, 0.05);
        for _ in 0..8 {
            let trace = gcn_forward_traced(&mut tape, &vars, &ctx).unwrap();
            let g = inner_grad_gcn(&mut tape, &vars, &trace, &ctx).unwrap();
            let flat: Vec<_> = g.iter().flat_map(|l| [l.w1, l.w2, l.b]).collect();
            let next = opt.step(&mut tape, &vars.flatten(), &flat).unwrap();
            vars = GcnVars::from_flat(&next, &vars.activations);
        }
        vars.flatten().iter().map(|&v| tape.value(v).clone()).collect::<Vec<_>>()
    };
    let base = iterates(weights(None));
    for &e in &far {
        for (a, b) in base.iter().zip(iterates(weights(Some(e)))) {
            assert!(a.sub(&b).max_abs() <= 1e-9, "edge {e}");
        }
    }
}

#[test]
fn gamma_adds_log_degree_gradient_to_every_edge() {
    let n = 8;
    let ds = tiny(n, &connected_pairs(n, 0.3, 14), 2, Task::Classification, vec![0, 1], vec![2], 14);
    let param = direct(&ds, 15);
    let plain = gcn_cfg(vec![3], OptimizerKind::Adam, 0.01, 5);
    let regularized = BilevelConfig { gamma: 0.4, ..plain.clone() };
    let g0 = hypergradient(&plain, &ds, &param, 1, plain.eta_in).unwrap();
    let g1 = hypergradient(&regularized, &ds, &param, 1, plain.eta_in).unwrap();
    let deg = param.graph(&ds.x).unwrap().degrees();
    for (e, &(i, j)) in ds.a_obs.support().edges().iter().enumerate() {
        let want = -0.4 * (1.0 / (deg[i] + 1e-8) + 1.0 / (deg[j] + 1e-8));
        let diff = g1.edge_grad[e] - g0.edge_grad[e];
        assert!(diff != 0.0 && (diff - want).abs() < 1e-10, "edge {e}");
    }
}

#[test]
fn one_outer_iteration_is_one_projected_step() {
    let n = 8;
    let ds = tiny(n, &connected_pairs(n, 0.3, 16), 2, Task::Regression, vec![0, 1], vec![2], 16);
    let init = direct(&ds, 17);
    let cfg = BilevelConfig { tau_out: 1, ..laplacian_cfg(1.0, OptimizerKind::Adam, 0.1, 10) };
    let result = outer_loop(&cfg, &ds, init.clone()).unwrap();
    let first_seed: u64 = ChaCha8Rng::seed_from_u64(cfg.seed).gen();
    let hg = hypergradient(&cfg, &ds, &init, first_seed, cfg.eta_in).unwrap();
    let mut flat = init.flat();
    PlainOptimizer::new(cfg.outer_optimizer, cfg.eta_out).step(&mut flat, &hg.grad).unwrap();
    flat.iter_mut().for_each(|w| *w = w.clamp(0.0, 1e6));
    assert_eq!(result.final_param.flat(), flat);
    assert_eq!(result.history.len(), 2);
    assert_eq!(result.history[0].f_out, hg.f_out);
}

#[test]
fn outer_loop_is_deterministic_and_keeps_snapshots() {
    let n = 10;
    let ds = tiny(n, &connected_pairs(n, 0.3, 18), 2, Task::Classification, vec![0, 1, 2], vec![3, 4], 18);
    let cfg = BilevelConfig { tau_out: 4, snapshots: vec![0, 2, 4], ..gcn_cfg(vec![3], OptimizerKind::Adam, 0.01, 8) };
    let a = outer_loop(&cfg, &ds, direct(&ds, 19)).unwrap();
    let b = outer_loop(&cfg, &ds, direct(&ds, 19)).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.final_param, b.final_param);
    assert_eq!(a.snapshots.iter().map(|s| s.iteration).collect::<Vec<_>>(), vec![0, 2, 4]);
    assert!(a.snapshots.iter().all(|s| s.edge_grad.len() == ds.a_obs.support().num_edges()));
    assert!(a.final_param.flat().iter().all(|&w| w >= 0.0));
}

#[test]
fn inner_loss_decreases_on_average() {
    let n = 20;
    let checkpoints = [1, 5, 20, 60];
    let mut means = vec![0.0; checkpoints.len()];
    for seed in 0..10 {
        let ds = tiny(
            n,
            &connected_pairs(n, 0.15, 60 + seed),
            3,
            Task::Classification,
            (0..8).collect(),
            vec![10],
            60 + seed,
        );
        for (c, &tau) in checkpoints.iter().enumerate() {
            let cfg = gcn_cfg(vec![8], OptimizerKind::Adam, 0.01, tau);
            let mut tape = Tape::new();
            let a = tape.constant(ds.a_obs.adjacency());
            let out = unroll_inner(&mut tape, &cfg, &ds, a, ds.a_obs.support().num_edges(), seed, 0.01).unwrap();
            means[c] += out.inner_loss / 10.0;
        }
    }
    assert!(means.windows(2).all(|w| w[1] < w[0]), "{means:?}");
}

#[test]
fn divergence_reports_the_step_and_is_fatal_after_one_retry() {
    let n = 6;
    let ds = tiny(n, &connected_pairs(n, 0.5, 22), 1, Task::Regression, vec![0], vec![5], 22);
    let cfg = laplacian_cfg(1.0, OptimizerKind::Gd, 1e200, 30);
    let mut tape = Tape::new();
    let a = tape.constant(ds.a_obs.adjacency());
    let err = unroll_inner(&mut tape, &cfg, &ds, a, ds.a_obs.support().num_edges(), 0, 1e200).unwrap_err();
    assert!(matches!(err, Error::Divergence { iteration } if iteration > 0 && iteration <= 30), "{err}");
    assert!(matches!(outer_loop(&cfg, &ds, direct(&ds, 0)), Err(Error::Divergence { .. })));
}

#[test]
fn config_validation_lists_every_problem() {
    let cfg = BilevelConfig {
        model: InnerModel::Laplacian { lambda: -1.0 },
        eta_in: 0.0,
        tau_out: 0,
        gamma: -2.0,
        ..laplacian_cfg(1.0, OptimizerKind::Gd, 0.1, 5)
    };
    let Err(Error::Config(errs)) = cfg.validate() else { panic!("expected a config error") };
    assert_eq!(errs.len(), 4, "{errs:?}");
}
