//! Generators and finite-difference checks shared by the integration tests
//! and the acceptance harness.
#![allow(dead_code)]

use misspec::oracle::FeatureMask;
use misspec::sem::{EnvId, Environment, TaskSpec};
use misspec::theorem::CertificationCase;
use misspec::trainer::{batch_gradient, input_gradient, LinearClassifier, Similarity};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn random_model(rng: &mut ChaCha8Rng, d: usize) -> LinearClassifier {
    LinearClassifier {
        weights: [
            (0..d).map(|_| normal(rng)).collect(),
            (0..d).map(|_| normal(rng)).collect(),
        ],
        bias: [normal(rng), normal(rng)],
    }
}

pub fn random_batch(rng: &mut ChaCha8Rng, n: usize, d: usize) -> (DMatrix<f64>, Vec<i8>) {
    let x = DMatrix::from_fn(n, d, |_, _| normal(rng));
    let labels = (0..n)
        .map(|_| if rng.random_bool(0.5) { 1 } else { -1 })
        .collect();
    (x, labels)
}

pub fn row(x: &DMatrix<f64>, r: usize) -> Vec<f64> {
    x.row(r).iter().copied().collect()
}

fn margin(m: &LinearClassifier, h: &[f64]) -> f64 {
    let z = m.logits(h);
    (z[0] - z[1]).abs()
}

fn relative(analytic: &[f64], fd: &[f64], floor: f64) -> f64 {
    let err: f64 = analytic
        .iter()
        .zip(fd)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    err / scale.max(floor)
}

/// Worst relative error of the input gradient against central differences
/// over `instances` random heads (d <= 8) away from logit ties.
pub fn input_gradient_check(seed: u64, instances: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < instances {
        let d = rng.random_range(1..=8);
        let m = random_model(&mut rng, d);
        let h: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
        if margin(&m, &h) < 1e-3 {
            continue;
        }
        let eps = 1e-6;
        let max_logit = |h: &[f64]| {
            let z = m.logits(h);
            z[0].max(z[1])
        };
        let fd: Vec<f64> = (0..d)
            .map(|j| {
                let (mut hp, mut hm) = (h.clone(), h.clone());
                hp[j] += eps;
                hm[j] -= eps;
                (max_logit(&hp) - max_logit(&hm)) / (2.0 * eps)
            })
            .collect();
        worst = worst.max(relative(input_gradient(&m, &h), &fd, 1e-12));
        done += 1;
    }
    worst
}

fn flatten(models: &[LinearClassifier]) -> Vec<f64> {
    let mut v = Vec::new();
    for m in models {
        v.extend(&m.weights[0]);
        v.extend(&m.weights[1]);
        v.extend(m.bias);
    }
    v
}

fn unflatten(d: usize, v: &[f64]) -> Vec<LinearClassifier> {
    v.chunks(2 * d + 2)
        .map(|c| LinearClassifier {
            weights: [c[..d].to_vec(), c[d..2 * d].to_vec()],
            bias: [c[2 * d], c[2 * d + 1]],
        })
        .collect()
}

/// Worst relative error of the full objective gradient (classification plus
/// weighted diversity, all similarities) against central differences over
/// `instances` random sets (d <= 8, at most 4 models). Instances whose
/// argmax selections sit near a tie are redrawn.
pub fn objective_gradient_check(seed: u64, instances: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sims = [
        Similarity::RawDot,
        Similarity::SquaredDot,
        Similarity::Cosine,
    ];
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < instances {
        let d = rng.random_range(1..=8);
        let k = rng.random_range(1..=4);
        let n = rng.random_range(1..=6);
        let models: Vec<_> = (0..k).map(|_| random_model(&mut rng, d)).collect();
        let (x, labels) = random_batch(&mut rng, n, d);
        let sim = sims[done % 3];
        let weight = rng.random_range(0.0..5.0);
        if (0..n).any(|r| models.iter().any(|m| margin(m, &row(&x, r)) < 1e-3)) {
            continue;
        }
        let analytic = flatten(
            &batch_gradient(&models, &x, &labels, sim, weight)
                .unwrap()
                .grads,
        );
        let theta = flatten(&models);
        let eps = 1e-6;
        let fd: Vec<f64> = (0..theta.len())
            .map(|j| {
                let (mut tp, mut tm) = (theta.clone(), theta.clone());
                tp[j] += eps;
                tm[j] -= eps;
                let f = |t: &[f64]| {
                    batch_gradient(&unflatten(d, t), &x, &labels, sim, weight)
                        .unwrap()
                        .total
                };
                (f(&tp) - f(&tm)) / (2.0 * eps)
            })
            .collect();
        worst = worst.max(relative(&analytic, &fd, 1e-8));
        done += 1;
    }
    worst
}

/// Spurious-only masks where every spurious column has the same eigenvalue
/// gap `sigma_j (alpha_OOD_j^2 - alpha_ID_j^2)`: the ID and OOD moment
/// matrices then commute while the ID eigenvalues stay distinct.
pub fn commuting_case(rng: &mut ChaCha8Rng) -> CertificationCase {
    let d_inv = rng.random_range(1..=3);
    let d_spu = rng.random_range(2..=5);
    let gamma = (0..d_inv).map(|_| rng.random_range(-2.0..2.0)).collect();
    let sigma_spu: Vec<f64> = (0..d_spu).map(|_| rng.random_range(0.25..4.0)).collect();
    let alpha_id: Vec<f64> = (0..d_spu).map(|_| rng.random_range(0.0..0.5)).collect();
    let gap = rng.random_range(4.0..36.0);
    let alpha_ood = alpha_id
        .iter()
        .zip(&sigma_spu)
        .map(|(a, s)| (a * a + gap / s).sqrt())
        .collect();
    let task = TaskSpec::new(gamma, rng.random_range(0.25..4.0), sigma_spu, 1.0).unwrap();
    let new_spu = rng.random_range(0..d_spu);
    let mut before: Vec<usize> = (0..d_spu)
        .filter(|&i| i != new_spu && rng.random_bool(0.5))
        .map(|i| task.spurious_column(i))
        .collect();
    if before.is_empty() {
        before.push(task.spurious_column((new_spu + 1) % d_spu));
    }
    CertificationCase {
        mask_before: FeatureMask::from_indices(d_inv, d_spu, &before).unwrap(),
        new_index: task.spurious_column(new_spu),
        env_id: Environment::new(EnvId::Id, alpha_id),
        env_ood: Environment::new(EnvId::Ood, alpha_ood),
        task,
    }
}
