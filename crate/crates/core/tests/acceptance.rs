//! One test per headline criterion. Each prints a single
//! `ACCEPTANCE <name>: PASS|FAIL` line straight to stderr (bypassing the test
//! harness capture) and then asserts the verdict.

mod common;

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use common::{gaussian, logistic, logistic_dataset, rel_err, rng, spearman};
use veilscan_core::influence::top_damped_eigenvalue;
use veilscan_core::surfacing::k_for_fraction;
use veilscan_core::{
    apply_plan, build_plan, distill_student, exact_inverse_hvp, generate_corpus, if_influence, lissa_inverse_hvp,
    rank_by_influence, wrong_label, Architecture, Cohort, CorpusSpec, Error, EvalRow, Example, InfluenceEngine,
    InfluenceScore, Label, LissaConfig, Method, PipelineConfig, RemediationMode, Run, SolverMode, Stage,
    StudentModel, SurfacingSummary, TrainConfig,
};

const SEEDS: [u64; 5] = [77, 78, 79, 80, 81];
const DEFAULT_SEED: u64 = 77;

struct Verdict {
    name: &'static str,
    started: Instant,
    /// Time spent on shared work done outside this test, charged to it in full.
    charged: Duration,
    limit: Option<Duration>,
    failures: Vec<String>,
    notes: Vec<String>,
}

impl Verdict {
    fn new(name: &'static str, limit: Option<Duration>) -> Self {
        Self { name, started: Instant::now(), charged: Duration::ZERO, limit, failures: vec![], notes: vec![] }
    }

    fn check(&mut self, ok: bool, detail: impl Into<String>) {
        let detail = detail.into();
        if ok {
            self.notes.push(detail);
        } else {
            self.failures.push(detail);
        }
    }

    fn finish(mut self) {
        let elapsed = self.started.elapsed() + self.charged;
        if let Some(limit) = self.limit {
            self.check(elapsed <= limit, format!("runtime {:.1}s within {}s", elapsed.as_secs_f64(), limit.as_secs()));
        }
        let pass = self.failures.is_empty();
        let mut err = std::io::stderr().lock();
        let _ = writeln!(
            err,
            "ACCEPTANCE {}: {} ({:.2}s)",
            self.name,
            if pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64()
        );
        for f in &self.failures {
            let _ = writeln!(err, "    failed: {f}");
        }
        drop(err);
        assert!(pass, "{} failed: {:?}\n(passing checks: {:?})", self.name, self.failures, self.notes);
    }
}

struct SeedRun {
    summary: SurfacingSummary,
    eval: Option<Vec<EvalRow>>,
}

struct SeedRuns {
    runs: BTreeMap<u64, SeedRun>,
    build: Duration,
}

/// Surfacing reports for every seed; the default seed also runs remediation.
/// Callers charge the build time to their own runtime.
fn seed_runs(v: &mut Verdict) -> &'static BTreeMap<u64, SeedRun> {
    static RUNS: OnceLock<SeedRuns> = OnceLock::new();
    let shared = RUNS.get_or_init(|| {
        let t0 = Instant::now();
        let runs = SEEDS
            .iter()
            .map(|&seed| {
                let dir = tempfile::tempdir().unwrap();
                let cfg = PipelineConfig { seed, out_dir: dir.path().to_path_buf(), ..PipelineConfig::default() };
                let run = Run::create(&cfg).unwrap();
                let last = if seed == DEFAULT_SEED { Stage::Evaluate } else { Stage::Report };
                for stage in Stage::ALL.into_iter().take_while(|s| *s <= last) {
                    run.run_stage(stage).unwrap();
                }
                let eval = (seed == DEFAULT_SEED).then(|| run.eval_rows().unwrap());
                (seed, SeedRun { summary: run.surfacing_summary().unwrap(), eval })
            })
            .collect();
        SeedRuns { runs, build: t0.elapsed() }
    });
    v.charged += shared.build;
    &shared.runs
}

fn method_row(summary: &SurfacingSummary, m: Method) -> &veilscan_core::pipeline::MethodSurfacing {
    summary.methods.iter().find(|r| r.method == m).unwrap()
}

#[test]
fn gradient_correctness() {
    let mut v = Verdict::new("gradient_correctness", Some(Duration::from_secs(10)));
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut pairs = 0;
    for seed in 0..24u64 {
        let arch = if seed % 4 == 0 { Architecture::convex(6) } else { Architecture::new(6, 2 + seed as usize % 7) };
        let mut r = rng(seed);
        let params: Vec<f64> = gaussian(&mut r, arch.param_count()).iter().map(|p| 0.7 * p).collect();
        let model = StudentModel::from_params(arch, params, 0.01 * (seed % 5) as f64).unwrap();
        let x = gaussian(&mut r, 6);
        let y = Label::from_bool(seed % 3 == 0);
        let analytic = model.grad_loss_at(&x, y).unwrap();
        let numeric: Vec<f64> = (0..model.param_count())
            .map(|j| {
                let mut p = model.params().to_vec();
                p[j] += h;
                let up = model.with_params(p.clone()).unwrap().loss_at(&x, y).unwrap();
                p[j] -= 2.0 * h;
                let down = model.with_params(p).unwrap().loss_at(&x, y).unwrap();
                (up - down) / (2.0 * h)
            })
            .collect();
        worst = worst.max(rel_err(&analytic, &numeric));
        pairs += 1;
    }
    v.check(pairs >= 20, format!("{pairs} model/example pairs"));
    v.check(worst <= 1e-6, format!("worst gradient relative error {worst:.2e} <= 1e-6"));

    let mut worst_hvp = 0.0f64;
    for seed in 0..5 {
        let data = logistic_dataset(seed, 40, 5);
        let model = StudentModel::from_params(Architecture::convex(5), gaussian(&mut rng(seed + 9), 6), 0.01).unwrap();
        let dense = logistic::hessian(model.params(), &data, 0.01);
        let dir = gaussian(&mut rng(seed + 99), 6);
        let expected: Vec<f64> = (&dense * nalgebra::DVector::from_column_slice(&dir)).iter().copied().collect();
        worst_hvp = worst_hvp.max(rel_err(&model.hvp(&data, &dir, 0.0).unwrap(), &expected));
    }
    v.check(worst_hvp <= 1e-8, format!("worst convex HVP relative error {worst_hvp:.2e} <= 1e-8"));
    v.finish();
}

#[test]
fn influence_function_fidelity() {
    let mut v = Verdict::new("influence_function_fidelity", Some(Duration::from_secs(60)));
    let l2 = 0.01;
    let cfg = LissaConfig { damping: 1e-9, ..LissaConfig::default() };
    for (seed, n) in [(41u64, 20usize), (42, 25), (43, 30)] {
        let data = logistic_dataset(seed, n, 3);
        let theta = logistic::fit(&data, l2);
        let model = StudentModel::from_params(Architecture::convex(3), theta.clone(), l2).unwrap();
        let mut prb = common::example(99_999, gaussian(&mut rng(seed + 7), 3), Label::Offensive);
        prb.observed_label = Label::NonOffensive;
        let y_hat = wrong_label(&prb);
        let before = logistic::example_loss(&theta, &prb.features, y_hat, l2);
        let loo: Vec<f64> = (0..n)
            .map(|i| {
                let rest: Vec<Example> = data.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, e)| e.clone()).collect();
                logistic::example_loss(&logistic::fit(&rest, l2), &prb.features, y_hat, l2) - before
            })
            .collect();
        let scores: Vec<f64> =
            data.iter().map(|t| if_influence(&model, &data, t, &prb, &cfg, SolverMode::Exact).unwrap()).collect();
        let rho = spearman(&scores, &loo);
        v.check(rho >= 0.9, format!("n = {n}: Spearman {rho:.3} >= 0.9"));
    }
    v.finish();
}

#[test]
fn lissa_accuracy() {
    let mut v = Verdict::new("lissa_accuracy", Some(Duration::from_secs(60)));
    let spec = CorpusSpec::default();
    let corpus = generate_corpus(&spec).unwrap();
    let cfg = TrainConfig { hidden_dim: 0, seed: spec.seed, ..TrainConfig::default() };
    let model = distill_student(&spec.teacher, &corpus.train, &corpus.test, &cfg).unwrap().model;
    let data = &corpus.train;
    let lissa = LissaConfig { damping: 3e-3, recursion_depth: Some(2 * data.len()), num_recursions: 20, ..LissaConfig::default() };
    let mut worst = 0.0f64;
    for prb in &corpus.probe[..5] {
        let g = model.grad_loss(prb, Some(wrong_label(prb))).unwrap();
        let exact = exact_inverse_hvp(&model, data, &g, lissa.damping).unwrap();
        let est = lissa_inverse_hvp(&model, data, &g, &lissa).unwrap();
        worst = worst.max(rel_err(&est.estimate, &exact));
    }
    v.check(worst <= 0.05, format!("worst relative L2 error {worst:.4} <= 0.05"));

    let top = top_damped_eigenvalue(&model, data, lissa.damping, 0).unwrap();
    let g = model.grad_loss(&corpus.probe[0], Some(Label::NonOffensive)).unwrap();
    for factor in [0.9, 0.5, 0.1] {
        let small = LissaConfig { scale: Some(factor * top), ..lissa.clone() };
        let fired = matches!(
            lissa_inverse_hvp(&model, data, &g, &small),
            Err(Error::LissaScaleTooSmall { .. } | Error::LissaDiverged { .. })
        );
        v.check(fired, format!("detector fires at scale {factor} x top eigenvalue"));
    }
    v.finish();
}

#[test]
fn surfacing_precision_ratios() {
    let mut v = Verdict::new("surfacing_precision_ratios", Some(Duration::from_secs(600)));
    for (seed, run) in seed_runs(&mut v) {
        let s = &run.summary;
        let k = k_for_fraction(0.05, s.candidate_count);
        let idx = s.ks.iter().position(|&x| x == k).expect("5% cut-off reported");
        let random = k as f64 * 0.2;
        v.check((s.random[idx] - random).abs() < 1e-9, format!("seed {seed}: random baseline {} = k * 0.2", s.random[idx]));
        for (m, ratio) in [(Method::TrackIn, 2.0), (Method::IfLissa, 2.0), (Method::TrainLoss, 1.5)] {
            let found = method_row(s, m).counts[idx];
            v.check(found as f64 >= ratio * random, format!("seed {seed}: {m} found {found} at k = {k}, needs >= {ratio} x {random}"));
        }
    }
    v.finish();
}

#[test]
fn remediation_recalls() {
    let mut v = Verdict::new("remediation_recalls", Some(Duration::from_secs(600)));
    let rows = seed_runs(&mut v)[&DEFAULT_SEED].eval.as_ref().unwrap();
    let original = &rows.iter().find(|r| r.model == "Original").unwrap().report;
    let [vo, no, oo] = original.recalls();
    v.check(vo <= 5.0, format!("original VO {vo} <= 5"));
    v.check(no >= 95.0, format!("original NO {no} >= 95"));
    v.check(oo >= 95.0, format!("original OO {oo} >= 95"));

    let candidates = generate_corpus(&CorpusSpec::default()).unwrap().candidates().len();
    let plan = format!("trackin-flip-{}", k_for_fraction(0.20, candidates));
    let flip = &rows.iter().find(|r| r.plan.as_deref() == Some(plan.as_str())).expect("gradient-product flip row").report;
    let [fvo, _, foo] = flip.recalls();
    v.check(fvo >= vo + 30.0, format!("{plan}: VO {fvo} >= original {vo} + 30"));
    v.check((foo - oo).abs() <= 5.0, format!("{plan}: OO {foo} within 5 of {oo}"));

    let gold = rows.iter().find(|r| r.model == "Gold").unwrap().report.veiled_offensive.recall;
    let remediated: Vec<&EvalRow> = rows.iter().filter(|r| r.plan.is_some()).collect();
    v.check(remediated.len() == 16, format!("{} remediated models", remediated.len()));
    for r in remediated {
        let rv = r.report.veiled_offensive.recall;
        v.check(gold >= rv, format!("gold VO {gold} >= {} {} VO {rv}", r.model, r.operation));
    }
    v.finish();
}

#[test]
fn rank_distribution_skew() {
    let mut v = Verdict::new("rank_distribution_skew", None);
    for (seed, run) in seed_runs(&mut v) {
        let med = &method_row(&run.summary, Method::TrackIn).median_percentile;
        let (veiled, clean) = (med[&Cohort::Veiled], med[&Cohort::Clean]);
        v.check(veiled < clean, format!("seed {seed}: veiled median {veiled:.1} < clean median {clean:.1}"));
    }
    v.finish();
}

#[test]
fn probe_count_robustness() {
    let mut v = Verdict::new("probe_count_robustness", None);
    let s = &seed_runs(&mut v)[&DEFAULT_SEED].summary;
    let tolerance = 0.05 * s.candidate_count as f64;
    for row in s.methods.iter().filter(|r| r.method.uses_probes()) {
        v.check(row.robustness.len() == 5, format!("{} has 5 subsets", row.method));
        for (i, subset) in row.robustness.iter().enumerate() {
            v.check(subset.len() == s.ks.len(), format!("{} subset {i} covers every cut-off", row.method));
            for (j, (&a, &b)) in subset.iter().zip(&row.counts).enumerate() {
                let gap = (a as f64 - b as f64).abs();
                v.check(
                    gap <= tolerance,
                    format!("{} subset {i} @{}: {a} vs {b} (gap {gap} <= {tolerance})", row.method, s.ks[j]),
                );
            }
        }
    }
    v.finish();
}

#[test]
fn determinism_and_invariance() {
    let mut v = Verdict::new("determinism_and_invariance", None);
    let dir = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig {
        out_dir: dir.path().to_path_buf(),
        methods: vec!["trainloss".into(), "trackin".into()],
        ..PipelineConfig::default()
    };
    let run = Run::create(&cfg).unwrap();
    run.run_all().unwrap();
    let corpus = run.load_corpus().unwrap();
    let cand_ids: Vec<u64> = corpus.candidates().iter().map(|e| e.id).collect();
    let probe_ids: Vec<u64> = run.probes(&corpus).unwrap().iter().map(|e| e.id).collect();

    // monotone transforms of real scores
    let scores = run.load_scores(Method::TrackIn).unwrap();
    let base = run.load_ranks(Method::TrackIn).unwrap();
    let transforms: [(&str, fn(f64) -> f64); 3] =
        [("affine", |x| 3.0 * x - 2.0), ("cube", |x| x * x * x), ("sinh", f64::sinh)];
    for (name, f) in transforms {
        let mapped: Vec<InfluenceScore> = scores.iter().map(|s| InfluenceScore { score: f(s.score), ..s.clone() }).collect();
        let t = rank_by_influence(&mapped, &cand_ids, &probe_ids).unwrap();
        v.check(t == base, format!("{name} transform leaves the rank table unchanged"));
    }

    // flip twice
    let k = k_for_fraction(0.2, cand_ids.len());
    let once = apply_plan(&corpus.train, &build_plan(&base, k, RemediationMode::Flip, &corpus.train, None).unwrap()).unwrap();
    let twice = apply_plan(&once, &build_plan(&base, k, RemediationMode::Flip, &once, None).unwrap()).unwrap();
    v.check(twice == corpus.train, "flip applied twice restores every observed label");

    // training loss ignores probes
    let (model, checkpoints) = run.load_model().unwrap();
    let engine = InfluenceEngine::new(&model, &checkpoints, &corpus.train, cfg.lissa.clone());
    let cands = corpus.candidates();
    let a = engine.score(Method::TrainLoss, &cands, &corpus.probe[..3]).unwrap();
    let b = engine.score(Method::TrainLoss, &cands, &corpus.probe[50..90]).unwrap();
    v.check(a == b, "training-loss scores identical under different probe sets");
    let ta = rank_by_influence(&a, &cand_ids, &probe_ids[..3]).unwrap();
    let tb = rank_by_influence(&b, &cand_ids, &probe_ids[50..90]).unwrap();
    v.check(ta == tb && ta == run.load_ranks(Method::TrainLoss).unwrap(), "training-loss ranking identical across probe sets");

    // replay: rebuild every artifact from run.json and compare bytes
    let keep = ["reports/veiled_found.tsv", "reports/class_recall.tsv", "reports/eval.json", "influence/trackin.tsv", "model/student.txt"];
    let before: Vec<Vec<u8>> = keep.iter().map(|rel| std::fs::read(run.path(rel)).unwrap()).collect();
    for entry in std::fs::read_dir(dir.path()).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            std::fs::remove_dir_all(path).unwrap();
        }
    }
    let replay = Run::open(dir.path()).unwrap();
    replay.run_all().unwrap();
    let after: Vec<Vec<u8>> = keep.iter().map(|rel| std::fs::read(replay.path(rel)).unwrap()).collect();
    v.check(before == after, "replayed artifacts are byte-identical");
    v.finish();
}
