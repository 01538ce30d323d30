#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use veilscan_core::{Cohort, Example, ExampleId, Label};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn example(id: ExampleId, features: Vec<f64>, label: Label) -> Example {
    Example { id, features, gold_label: label, observed_label: label, cohort: Cohort::General, teacher_score: 0.0 }
}

/// Noisy logistic data: labels drawn from a random linear model, so the set is
/// not separable and the regularised optimum is well inside the interior.
pub fn logistic_dataset(seed: u64, n: usize, d: usize) -> Vec<Example> {
    let mut r = rng(seed);
    let w = gaussian(&mut r, d);
    (0..n)
        .map(|i| {
            let x = gaussian(&mut r, d);
            let z: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + 0.3;
            let p = 1.0 / (1.0 + (-z).exp());
            let y = Label::from_bool(r.random::<f64>() < p);
            example(i as ExampleId, x, y)
        })
        .collect()
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-300);
    diff / scale
}

/// Ranks with ties sharing their mean position.
pub fn fractional_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    pearson(&fractional_ranks(a), &fractional_ranks(b))
}

/// Kendall tau-a over all pairs.
pub fn kendall_tau(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len();
    let mut s = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            s += ((a[i] - a[j]) * (b[i] - b[j])).signum();
        }
    }
    s / (n * (n - 1) / 2) as f64
}

/// Independent logistic-regression math on `[x; 1]` with weights `[w; b]`.
pub mod logistic {
    use nalgebra::{DMatrix, DVector};
    use veilscan_core::{Example, Label};

    fn aug(x: &[f64]) -> DVector<f64> {
        let mut v = DVector::zeros(x.len() + 1);
        v.rows_mut(0, x.len()).copy_from_slice(x);
        v[x.len()] = 1.0;
        v
    }

    fn prob(theta: &DVector<f64>, x: &[f64]) -> f64 {
        1.0 / (1.0 + (-theta.dot(&aug(x))).exp())
    }

    pub fn example_loss(theta: &[f64], x: &[f64], y: Label, l2: f64) -> f64 {
        let t = DVector::from_column_slice(theta);
        let p = prob(&t, x);
        let ce = if y == Label::Offensive { -p.ln() } else { -(1.0 - p).ln() };
        ce + 0.5 * l2 * t.norm_squared()
    }

    pub fn example_grad(theta: &[f64], x: &[f64], y: Label, l2: f64) -> Vec<f64> {
        let t = DVector::from_column_slice(theta);
        let g = aug(x) * (prob(&t, x) - y.as_f64()) + &t * l2;
        g.iter().copied().collect()
    }

    pub fn hessian(theta: &[f64], data: &[Example], l2: f64) -> DMatrix<f64> {
        let t = DVector::from_column_slice(theta);
        let m = theta.len();
        let mut h = DMatrix::identity(m, m) * l2;
        for e in data {
            let a = aug(&e.features);
            let p = prob(&t, &e.features);
            h += (&a * a.transpose()) * (p * (1.0 - p) / data.len() as f64);
        }
        h
    }

    fn gradient(t: &DVector<f64>, data: &[Example], l2: f64) -> DVector<f64> {
        let mut g = t * l2;
        for e in data {
            let a = aug(&e.features);
            g += a * ((prob(t, &e.features) - e.observed_label.as_f64()) / data.len() as f64);
        }
        g
    }

    /// Newton's method to machine precision on the mean regularised loss.
    pub fn fit(data: &[Example], l2: f64) -> Vec<f64> {
        let m = data[0].features.len() + 1;
        let mut t = DVector::zeros(m);
        for _ in 0..100 {
            let g = gradient(&t, data, l2);
            if g.norm() < 1e-14 {
                break;
            }
            let step = hessian(t.as_slice(), data, l2).lu().solve(&g).expect("regularised Hessian is invertible");
            t -= step;
        }
        t.iter().copied().collect()
    }
}
