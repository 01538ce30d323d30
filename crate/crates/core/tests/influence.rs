mod common;

use common::{example, gaussian, kendall_tau, logistic, logistic_dataset, rel_err, rng, spearman};
use veilscan_core::influence::{top_damped_eigenvalue, trackin_from_probe_gradients};
use veilscan_core::vector::scaled;
use veilscan_core::{
    distill_student, embedding_influence, exact_inverse_hvp, generate_corpus, if_influence, lissa_inverse_hvp,
    trackin_influence, trainloss_influence, train, wrong_label, Architecture, Checkpoint, CorpusSpec, Error, Example,
    InfluenceEngine, Label, LabelSource, LissaConfig, Method, SolverMode, StudentModel, TrainConfig,
};

const L2: f64 = 0.01;

/// Convex student at the exact regularised optimum of `data`.
fn optimum(data: &[Example], l2: f64) -> StudentModel {
    let d = data[0].features.len();
    StudentModel::from_params(Architecture::convex(d), logistic::fit(data, l2), l2).unwrap()
}

fn probe(seed: u64, d: usize) -> Example {
    let mut p = example(10_000 + seed, gaussian(&mut rng(seed), d), Label::Offensive);
    p.observed_label = Label::NonOffensive;
    p
}

fn probe_gradient(model: &StudentModel, prb: &Example) -> Vec<f64> {
    model.grad_loss(prb, Some(wrong_label(prb))).unwrap()
}

#[test]
fn exact_solve_residual() {
    for seed in 0..5 {
        let data = logistic_dataset(seed, 40, 5);
        let model = optimum(&data, L2);
        let v = gaussian(&mut rng(seed + 100), 6);
        for damping in [0.0, 3e-3, 1.0] {
            let u = exact_inverse_hvp(&model, &data, &v, damping).unwrap();
            let back = model.hvp(&data, &u, damping).unwrap();
            assert!(rel_err(&back, &v) <= 1e-10, "seed {seed} damping {damping}");
        }
    }
}

#[test]
fn exact_solve_at_huge_damping_is_scaled_identity() {
    let data = logistic_dataset(1, 20, 3);
    let model = optimum(&data, L2);
    let v = gaussian(&mut rng(3), 4);
    let u = exact_inverse_hvp(&model, &data, &v, 1e6).unwrap();
    assert!(rel_err(&u, &scaled(1e-6, &v)) <= 1e-3);
}

#[test]
fn exact_solve_flags_singular_systems() {
    let data = logistic_dataset(1, 2, 5);
    let model = StudentModel::zeros(Architecture::convex(5), 0.0);
    assert!(matches!(exact_inverse_hvp(&model, &data, &[1.0; 6], 0.0), Err(Error::Singular { .. })));
}

fn lissa_instance() -> (StudentModel, Vec<Example>, Vec<f64>) {
    let data = logistic_dataset(21, 200, 4);
    let model = optimum(&data, L2);
    let v = probe_gradient(&model, &probe(5, 4));
    (model, data, v)
}

#[test]
fn lissa_matches_exact_on_the_distilled_convex_student() {
    let spec = CorpusSpec::default();
    let corpus = generate_corpus(&spec).unwrap();
    let cfg = TrainConfig { hidden_dim: 0, seed: spec.seed, ..TrainConfig::default() };
    let model = distill_student(&spec.teacher, &corpus.train, &corpus.test, &cfg).unwrap().model;
    let data = &corpus.train;
    // one batch-8 recursion carries 5-15% sampling noise here; averaging 20 brings it near 3%
    let lissa = LissaConfig { recursion_depth: Some(2 * data.len()), num_recursions: 20, ..LissaConfig::default() };
    for prb in &corpus.probe[..5] {
        let v = probe_gradient(&model, prb);
        let exact = exact_inverse_hvp(&model, data, &v, lissa.damping).unwrap();
        let est = lissa_inverse_hvp(&model, data, &v, &lissa).unwrap();
        let err = rel_err(&est.estimate, &exact);
        assert!(err <= 0.05, "probe {}: relative error {err}", prb.id);
        assert_eq!(est.diagnostic.final_step_norms.len(), 20);
    }
}

#[test]
fn lissa_mean_over_seeds_is_unbiased() {
    let (model, data, v) = lissa_instance();
    let exact = exact_inverse_hvp(&model, &data, &v, 3e-3).unwrap();
    let eig = logistic::hessian(model.params(), &data, L2).symmetric_eigen().eigenvalues;
    let (lo, hi) = (eig.min() + 3e-3, eig.max() + 3e-3);
    // a wide scale keeps each run's noise small; the depth drives truncation bias below 1e-4
    let scale = 50.0 * hi;
    let depth = ((1e4f64).ln() * scale / lo).ceil() as usize;
    let mut mean = vec![0.0; v.len()];
    for seed in 0..100 {
        let cfg = LissaConfig { recursion_depth: Some(depth), scale: Some(scale), seed, max_passes: 1000, ..LissaConfig::default() };
        let est = lissa_inverse_hvp(&model, &data, &v, &cfg).unwrap().estimate;
        for (m, e) in mean.iter_mut().zip(est) {
            *m += e / 100.0;
        }
    }
    let err = rel_err(&mean, &exact);
    assert!(err <= 0.01, "relative error of the mean {err}");
}

#[test]
fn lissa_is_seed_deterministic_and_fixes_zero() {
    let (model, data, v) = lissa_instance();
    let cfg = LissaConfig { seed: 4, ..LissaConfig::default() };
    let a = lissa_inverse_hvp(&model, &data, &v, &cfg).unwrap();
    let b = lissa_inverse_hvp(&model, &data, &v, &cfg).unwrap();
    assert_eq!(a, b);
    let zero = lissa_inverse_hvp(&model, &data, &vec![0.0; v.len()], &cfg).unwrap();
    assert!(zero.estimate.iter().all(|x| *x == 0.0));
}

#[test]
fn lissa_divergence_detector_fires_below_top_eigenvalue() {
    let (model, data, v) = lissa_instance();
    let top = top_damped_eigenvalue(&model, &data, 3e-3, 0).unwrap();
    for factor in [0.99, 0.6, 0.2] {
        let cfg = LissaConfig { scale: Some(factor * top), recursion_depth: Some(2 * data.len()), ..LissaConfig::default() };
        match lissa_inverse_hvp(&model, &data, &v, &cfg) {
            Err(Error::LissaScaleTooSmall { scale, .. }) => assert_eq!(scale, factor * top),
            other => panic!("expected a refused scale at {factor}, got {other:?}"),
        }
    }
    let ok = LissaConfig { scale: Some(1.01 * top), recursion_depth: Some(2 * data.len()), ..LissaConfig::default() };
    assert!(lissa_inverse_hvp(&model, &data, &v, &ok).is_ok());
}

#[test]
fn top_eigenvalue_matches_dense_spectrum() {
    let (model, data, _) = lissa_instance();
    let h = logistic::hessian(model.params(), &data, L2);
    let dense = h.symmetric_eigen().eigenvalues.max() + 3e-3;
    let est = top_damped_eigenvalue(&model, &data, 3e-3, 0).unwrap();
    assert!((est - dense).abs() <= 1e-6 * dense, "{est} vs {dense}");
}

/// `L(θ_{-i}, prb, ŷ) - L(θ, prb, ŷ)` with both optima solved by Newton's method.
fn leave_one_out_deltas(data: &[Example], prb: &Example, l2: f64) -> Vec<f64> {
    let full = logistic::fit(data, l2);
    let y_hat = wrong_label(prb);
    let base = logistic::example_loss(&full, &prb.features, y_hat, l2);
    (0..data.len())
        .map(|i| {
            let rest: Vec<Example> = data.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, e)| e.clone()).collect();
            logistic::example_loss(&logistic::fit(&rest, l2), &prb.features, y_hat, l2) - base
        })
        .collect()
}

#[test]
fn influence_tracks_leave_one_out_retraining() {
    for (seed, n) in [(31u64, 20usize), (32, 25), (33, 30)] {
        let data = logistic_dataset(seed, n, 3);
        let model = optimum(&data, L2);
        let cfg = LissaConfig { damping: 1e-9, ..LissaConfig::default() };
        for p in 0..3 {
            let prb = probe(seed * 10 + p, 3);
            let loo = leave_one_out_deltas(&data, &prb, L2);
            let scores: Vec<f64> =
                data.iter().map(|t| if_influence(&model, &data, t, &prb, &cfg, SolverMode::Exact).unwrap()).collect();
            let rho = spearman(&scores, &loo);
            assert!(rho >= 0.9, "n {n} probe {p}: spearman {rho}");
        }
    }
}

#[test]
fn exact_and_lissa_rankings_agree() {
    let (model, data, _) = lissa_instance();
    let engine = InfluenceEngine::new(&model, &[], &data, LissaConfig::default());
    for p in 0..3 {
        let prb = probe(p, 4);
        let exact = engine.if_scores_for_probe(&data, &prb, SolverMode::Exact).unwrap();
        let lissa = engine.if_scores_for_probe(&data, &prb, SolverMode::Lissa).unwrap();
        let tau = kendall_tau(&exact, &lissa);
        assert!(tau >= 0.8, "probe {p}: kendall {tau}");
    }
}

#[test]
fn zero_probe_gradient_gives_zero_influence() {
    let (model, data, _) = lissa_instance();
    let engine = InfluenceEngine::new(&model, &[], &data, LissaConfig::default());
    let s = engine.if_scores_from_probe_gradient(&vec![0.0; 5], &data, SolverMode::Exact).unwrap();
    assert!(s.iter().all(|x| *x == 0.0));
}

fn checkpoints_for(data: &[Example], epochs: usize) -> Vec<Checkpoint> {
    let cfg = TrainConfig { epochs, hidden_dim: 4, seed: 2, ..TrainConfig::default() };
    train(data, &cfg, &LabelSource::Observed).unwrap().1
}

#[test]
fn trackin_is_additive_over_checkpoints() {
    let data = logistic_dataset(4, 50, 3);
    let cks = checkpoints_for(&data, 3);
    let prb = probe(1, 3);
    for t in &data[..10] {
        let whole = trackin_influence(&cks, t, &prb).unwrap();
        let parts: f64 = cks.iter().map(|c| trackin_influence(std::slice::from_ref(c), t, &prb).unwrap()).sum();
        assert!((whole - parts).abs() <= 1e-12 * whole.abs().max(1.0));
    }
}

#[test]
fn trackin_sign_agrees_with_replayed_steps() {
    let data = logistic_dataset(9, 12, 2);
    let prb = probe(3, 2);
    let y_hat = wrong_label(&prb);
    let lr = 0.05;
    let mut theta = vec![0.0; 3];
    let (mut agree, mut total) = (0, 0);
    for epoch in 0..10 {
        for e in &data {
            let ck = Checkpoint { epoch, model: StudentModel::from_params(Architecture::convex(2), theta.clone(), L2).unwrap() };
            let score = trackin_influence(&[ck], e, &prb).unwrap();
            let g = logistic::example_grad(&theta, &e.features, e.observed_label, L2);
            let next: Vec<f64> = theta.iter().zip(&g).map(|(t, gi)| t - lr * gi).collect();
            let reduction = logistic::example_loss(&theta, &prb.features, y_hat, L2)
                - logistic::example_loss(&next, &prb.features, y_hat, L2);
            if reduction != 0.0 {
                total += 1;
                agree += usize::from(score.signum() == reduction.signum());
            }
            theta = next;
        }
    }
    assert!(agree as f64 >= 0.9 * total as f64, "{agree}/{total}");
}

#[test]
fn scores_scale_with_the_probe_gradient() {
    let (model, data, _) = lissa_instance();
    let prb = probe(2, 4);
    let g = probe_gradient(&model, &prb);
    let engine = InfluenceEngine::new(&model, &[], &data, LissaConfig::default());
    let base = engine.if_scores_from_probe_gradient(&g, &data, SolverMode::Exact).unwrap();
    for c in [4.0, 3.7] {
        let s = engine.if_scores_from_probe_gradient(&scaled(c, &g), &data, SolverMode::Exact).unwrap();
        for (a, b) in s.iter().zip(&base) {
            assert!((a - c * b).abs() <= 1e-12 * (c * b).abs().max(1e-12));
        }
    }

    let mlp_data = logistic_dataset(4, 50, 4);
    let cks = checkpoints_for(&mlp_data, 3);
    let grads: Vec<Vec<f64>> = cks.iter().map(|c| probe_gradient(&c.model, &prb)).collect();
    for t in &mlp_data[..10] {
        let base = trackin_from_probe_gradients(&cks, t, &grads).unwrap();
        assert_eq!(base, trackin_influence(&cks, t, &prb).unwrap());
        let doubled: Vec<Vec<f64>> = grads.iter().map(|g| scaled(2.0, g)).collect();
        assert_eq!(trackin_from_probe_gradients(&cks, t, &doubled).unwrap(), 2.0 * base);
    }
}

#[test]
fn one_solve_per_probe() {
    let (model, data, _) = lissa_instance();
    let probes: Vec<Example> = (0..7).map(|p| probe(p, 4)).collect();
    for (method, mode) in [(Method::IfExact, SolverMode::Exact), (Method::IfLissa, SolverMode::Lissa)] {
        let engine = InfluenceEngine::new(&model, &[], &data, LissaConfig::default());
        let rows = engine.score(method, &data, &probes).unwrap();
        assert_eq!(rows.len(), data.len() * probes.len());
        assert_eq!(engine.solve_count(), probes.len(), "{mode:?}");
    }
}

#[test]
fn trainloss_ignores_probes_and_flags_outliers() {
    let mut r = rng(8);
    let mut data: Vec<Example> = (0..40)
        .map(|i| {
            let pos = i % 2 == 0;
            let c = if pos { 1.5 } else { -1.5 };
            example(i, gaussian(&mut r, 2).iter().map(|g| c + 0.4 * g).collect(), Label::from_bool(pos))
        })
        .collect();
    // deep inside the positive cluster, labeled negative
    data.push(example(99, vec![2.0, 2.0], Label::NonOffensive));
    let model = train(&data, &TrainConfig { hidden_dim: 0, epochs: 10, ..TrainConfig::default() }, &LabelSource::Observed).unwrap().0;
    let mut losses: Vec<f64> = data.iter().map(|e| trainloss_influence(&model, e).unwrap()).collect();
    let outlier = *losses.last().unwrap();
    losses.sort_by(f64::total_cmp);
    assert!(outlier > losses[losses.len() / 2]);
    assert_eq!(outlier, losses[losses.len() - 1]);

    let engine = InfluenceEngine::new(&model, &[], &data, LissaConfig::default());
    let a = engine.score(Method::TrainLoss, &data, &[probe(1, 2)]).unwrap();
    let b = engine.score(Method::TrainLoss, &data, &[probe(2, 2), probe(3, 2)]).unwrap();
    assert_eq!(a, b);
    assert!(a.iter().all(|s| s.prb_id.is_none()));
}

#[test]
fn embedding_product_is_symmetric() {
    let data = logistic_dataset(4, 10, 3);
    let model = checkpoints_for(&data, 1).pop().unwrap().model;
    for a in &data {
        assert!(embedding_influence(&model, a, a).unwrap() >= 0.0);
        for b in &data {
            assert_eq!(embedding_influence(&model, a, b).unwrap(), embedding_influence(&model, b, a).unwrap());
        }
    }
}

#[test]
fn every_method_is_finite_on_the_default_corpus() {
    let spec = CorpusSpec::default();
    let corpus = generate_corpus(&spec).unwrap();
    let candidates = corpus.candidates();
    let probes = &corpus.probe[..5];
    for hidden_dim in [0, TrainConfig::default().hidden_dim] {
        let cfg = TrainConfig { hidden_dim, seed: spec.seed, ..TrainConfig::default() };
        let out = distill_student(&spec.teacher, &corpus.train, &corpus.test, &cfg).unwrap();
        let engine = InfluenceEngine::new(&out.model, &out.checkpoints, &corpus.train, LissaConfig::default());
        for method in Method::ALL {
            if method == Method::IfExact && hidden_dim > 0 {
                assert!(engine.score(method, &candidates, probes).is_err());
                continue;
            }
            let rows = engine.score(method, &candidates, probes).unwrap();
            let expected = if method.uses_probes() { candidates.len() * probes.len() } else { candidates.len() };
            assert_eq!(rows.len(), expected, "{method}");
            assert!(rows.iter().all(|r| r.score.is_finite()), "{method} hidden {hidden_dim}");
        }
    }
}

#[test]
fn scores_do_not_depend_on_worker_count() {
    let corpus = generate_corpus(&CorpusSpec::default()).unwrap();
    let out = distill_student(&CorpusSpec::default().teacher, &corpus.train, &corpus.test, &TrainConfig::default()).unwrap();
    let candidates = corpus.candidates();
    let probes = &corpus.probe[..4];
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let engine = InfluenceEngine::new(&out.model, &out.checkpoints, &corpus.train, LissaConfig::default());
            [Method::IfLissa, Method::TrackIn, Method::Embedding]
                .map(|m| engine.score(m, &candidates, probes).unwrap())
        })
    };
    assert_eq!(run(1), run(4));
}
