//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

mod common;

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use misspec::landscape::{
    diverse_run, erm_runs, points_from_runs, selection_bias_report, shift_sweep_report,
    ExperimentPlan, Pattern, SelectionOptions, Thresholds,
};
use misspec::oracle::{
    empirical_moments, population_moments, solve_regression, FeatureMask, MomentSet,
    RegressionSolution,
};
use misspec::sem::{make_shift_family, sample_dataset, Dataset, EnvId, Environment, TaskSpec};
use misspec::theorem::{certify, RandomCaseRanges, Tolerances, Verdict};
use misspec::trainer::{Similarity, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

type Check = fn() -> Outcome;

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn e0() -> (TaskSpec, Environment, Environment) {
    (
        TaskSpec::new(vec![1.0], 1.0, vec![1.0], 1.0).unwrap(),
        Environment::uniform(EnvId::Id, 1, 0.1),
        Environment::uniform(EnvId::Ood, 1, 3.0),
    )
}

fn benchmark() -> (TaskSpec, Environment, Environment) {
    (
        TaskSpec::benchmark(),
        Environment::uniform(EnvId::Id, 4, 0.1),
        Environment::uniform(EnvId::Ood, 4, 3.0),
    )
}

fn mse(fit: &RegressionSolution, data: &Dataset) -> f64 {
    let cols = fit.mask.indices();
    let mut total = 0.0;
    for r in 0..data.len() {
        let pred: f64 = cols
            .iter()
            .zip(fit.beta.iter())
            .map(|(&c, b)| data.features[(r, c)] * b)
            .sum();
        total += (data.target[r] - pred).powi(2);
    }
    total / data.len() as f64
}

fn criterion1() -> Outcome {
    let start = Instant::now();
    let (task, id, ood) = e0();
    let inv = FeatureMask::invariant_only(&task);
    let cert = certify(&task, &id, &ood, &inv, 1, &Tolerances::default()).unwrap();
    // With x_spu = y + a e the ID fit is beta = (a^2, 1) / (1 + a^2); its
    // risks follow by expanding the residual.
    let (a, b) = (0.1f64, 3.0f64);
    let closed_id = a * a / (1.0 + a * a) - 1.0;
    let closed_ood = (a.powi(4) + b * b) / (1.0 + a * a).powi(2) - 1.0;

    let n = 1_000_000;
    let train = sample_dataset(&task, &id, n, 101).unwrap();
    let test_id = sample_dataset(&task, &id, n, 102).unwrap();
    let test_ood = sample_dataset(&task, &ood, n, 103).unwrap();
    let full = inv.with(1).unwrap();
    let fit =
        |mask: &FeatureMask| solve_regression(&empirical_moments(&train, mask).unwrap()).unwrap();
    let (before, after) = (fit(&inv), fit(&full));
    let mc_id = mse(&after, &test_id) - mse(&before, &test_id);
    let mc_ood = mse(&after, &test_ood) - mse(&before, &test_ood);
    let secs = start.elapsed().as_secs_f64();

    let pass = (cert.delta_id - closed_id).abs() <= 1e-6
        && (cert.delta_ood_transfer - closed_ood).abs() <= 1e-6
        && (cert.delta_id - mc_id).abs() <= 0.01 * mc_id.abs()
        && (cert.delta_ood_transfer - mc_ood).abs() <= 0.01 * mc_ood.abs()
        && cert.verdict == Verdict::InverseCertified
        && secs < 10.0;
    outcome(
        pass,
        format!(
            "delta_id={:.6} (MC {mc_id:.6}) delta_ood_transfer={:.6} (MC {mc_ood:.6}) in {secs:.1}s",
            cert.delta_id, cert.delta_ood_transfer
        ),
    )
}

fn criterion2() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let ranges = RandomCaseRanges::default();
    let tol = Tolerances::default();
    let (mut qualified, mut certified, mut drawn) = (0, 0, 0);
    let (mut prefix_q, mut prefix_c, mut shared_q, mut shared_c) = (0, 0, 0, 0);
    while qualified < 1000 {
        drawn += 1;
        let case = ranges.sample(&mut rng);
        let cert = case.certify(&tol).unwrap();
        if !(cert.assumption1_ok && cert.sufficient_condition_holds()) {
            continue;
        }
        qualified += 1;
        let ok = cert.delta_id < 0.0 && cert.delta_ood_transfer > 0.0;
        certified += usize::from(ok);
        if case.mask_before.d_hat_spu() == 0 {
            prefix_q += 1;
            prefix_c += usize::from(ok);
        }
        if cert.shared_eigvec_ok {
            shared_q += 1;
            shared_c += usize::from(ok);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let (mut commuting_q, mut commuting_c) = (0, 0);
    while commuting_q < 1000 {
        let cert = common::commuting_case(&mut rng).certify(&tol).unwrap();
        if cert.assumption1_ok && cert.sufficient_condition_holds() {
            commuting_q += 1;
            commuting_c += usize::from(cert.delta_id < 0.0 && cert.delta_ood_transfer > 0.0);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        certified == qualified && secs < 60.0,
        format!(
            "{certified}/{qualified} qualifying random cases certified ({drawn} drawn); \
             invariant-only prefixes {prefix_c}/{prefix_q}, shared-eigenvector cases {shared_c}/{shared_q}, \
             commuting generator {commuting_c}/{commuting_q}; {secs:.1}s"
        ),
    )
}

fn criterion3() -> Outcome {
    let tol = Tolerances::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut shared, mut identity_ok, mut q3_ok, mut total) = (0, 0, 0, 0);
    let mut worst: f64 = 0.0;
    for k in 0..4000 {
        let case = if k % 2 == 0 {
            RandomCaseRanges::default().sample(&mut rng)
        } else {
            common::commuting_case(&mut rng)
        };
        let cert = case.certify(&tol).unwrap();
        total += 1;
        q3_ok += usize::from(cert.q3 >= 0.0);
        if cert.shared_eigvec_ok {
            shared += 1;
            let rel = cert.q_identity_residual / cert.delta_ood_transfer.abs().max(1.0);
            worst = worst.max(rel);
            identity_ok += usize::from(rel < 1e-6);
        }
    }
    outcome(
        identity_ok == shared && shared > 0 && q3_ok == total,
        format!(
            "identity within tolerance on {identity_ok}/{shared} shared-eigenvector cases (worst {worst:.2e}); \
             Q3 >= 0 on {q3_ok}/{total}"
        ),
    )
}

fn moments_close(emp: &MomentSet, pop: &MomentSet) -> bool {
    let d = pop.dim();
    let close = |e: f64, p: f64, scale: f64| (e - p).abs() <= 0.01 * p.abs().max(scale);
    (0..d).all(|i| {
        (0..d).all(|j| {
            close(
                emp.m[(i, j)],
                pop.m[(i, j)],
                (pop.m[(i, i)] * pop.m[(j, j)]).sqrt(),
            )
        }) && close(emp.b[i], pop.b[i], (pop.m[(i, i)] * pop.s_y).sqrt())
    }) && close(emp.s_y, pop.s_y, 0.0)
}

fn criterion4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let ranges = RandomCaseRanges::default();
    let mut passed = 0;
    let triples = 50;
    for k in 0..triples {
        let case = ranges.sample(&mut rng);
        let env = if rng.random_bool(0.5) {
            case.env_id
        } else {
            case.env_ood
        };
        let width = case.task.width();
        let mut idx: Vec<usize> = (0..width).filter(|_| rng.random_bool(0.6)).collect();
        if idx.is_empty() {
            idx.push(rng.random_range(0..width));
        }
        let mask = FeatureMask::from_indices(case.task.d_inv, case.task.d_spu, &idx).unwrap();
        let pop = population_moments(&case.task, &env, &mask).unwrap();
        let data = sample_dataset(&case.task, &env, 1_000_000, 400 + k).unwrap();
        let emp = empirical_moments(&data, &mask).unwrap();
        passed += usize::from(moments_close(&emp, &pop));
    }
    let rate = passed as f64 / triples as f64;
    outcome(
        rate >= 0.99,
        format!("{passed}/{triples} triples within 1% at n=1e6"),
    )
}

fn criterion5() -> Outcome {
    let input = common::input_gradient_check(5, 100);
    let full = common::objective_gradient_check(55, 100);
    outcome(
        input <= 1e-4 && full <= 1e-4,
        format!("worst relative error: input gradient {input:.2e}, training loss {full:.2e}"),
    )
}

fn range(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    v.iter().cloned().fold(f64::MIN, f64::max) - v.iter().cloned().fold(f64::MAX, f64::min)
}

fn criterion6() -> Outcome {
    let start = Instant::now();
    let (task, id, ood) = benchmark();
    let plan = ExperimentPlan {
        n_train: 1000,
        n_eval: 20_000,
        n_seeds: 24,
    };
    let mut ratios = Vec::new();
    for rep in 0..5u64 {
        let cfg = TrainConfig {
            n_models: 24,
            diversity_weight: 10.0,
            similarity: Similarity::RawDot,
            learning_rate: 0.01,
            seed: 100 * rep,
            ..TrainConfig::default()
        };
        let erm = erm_runs(&task, &id, &ood, &cfg, &plan).unwrap();
        let erm_range = range(erm.iter().map(|r| r.final_records()[0].ood_accuracy));
        let ratio = match diverse_run(&task, &id, &ood, &cfg, &plan) {
            Ok(set) => range(set.final_records().iter().map(|r| r.ood_accuracy)) / erm_range,
            Err(_) => 0.0,
        };
        ratios.push(ratio);
    }
    let secs = start.elapsed().as_secs_f64();
    let shown: Vec<String> = ratios.iter().map(|r| format!("{r:.1}")).collect();
    outcome(
        ratios.iter().all(|&r| r >= 2.0) && secs < 300.0,
        format!(
            "diverse/ERM OOD-accuracy range ratios [{}] in {secs:.1}s",
            shown.join(", ")
        ),
    )
}

fn criterion7() -> Outcome {
    let (task, id, ood) = benchmark();
    let cfg = TrainConfig {
        learning_rate: 0.01,
        ..TrainConfig::default()
    };
    let plan = ExperimentPlan::default();
    let mut runs = erm_runs(&task, &id, &ood, &cfg, &plan).unwrap();
    let erm_only = points_from_runs(&runs);
    runs.push(diverse_run(&task, &id, &ood, &cfg, &plan).unwrap());
    let pooled = points_from_runs(&runs);
    let opts = SelectionOptions::default();
    let thr = Thresholds::default();
    let report = selection_bias_report(&pooled, &opts, &thr).unwrap();
    let erm_report = selection_bias_report(&erm_only, &opts, &thr).unwrap();
    let pass = report.pattern_full.pattern == Pattern::Negative
        && matches!(
            report.pattern_filtered.pattern,
            Pattern::Vertical | Pattern::Positive
        )
        && report.ood_regret > 0.05;
    outcome(
        pass,
        format!(
            "full={} (r={:.3}) filtered={} (r={:.3}) regret={:.4}; ERM-only cloud: full={} (r={:.3}, ID spread {:.4}) regret={:.4}",
            report.pattern_full.pattern,
            report.pattern_full.pearson_r,
            report.pattern_filtered.pattern,
            report.pattern_filtered.pearson_r,
            report.ood_regret,
            erm_report.pattern_full.pattern,
            erm_report.pattern_full.pearson_r,
            erm_report.pattern_full.id_spread,
            erm_report.ood_regret,
        ),
    )
}

fn criterion8() -> Outcome {
    let (task, id, _) = benchmark();
    let family = make_shift_family(&task, &id.alpha, &[3.0; 4], 5).unwrap();
    let plan = ExperimentPlan {
        n_train: 1000,
        n_eval: 20_000,
        n_seeds: 50,
    };
    let thr = Thresholds::default();
    let steps =
        shift_sweep_report(&task, &id, &family, &TrainConfig::default(), &plan, &thr).unwrap();
    let r: Vec<f64> = steps.iter().map(|s| s.label.pearson_r).collect();
    let monotone = r.windows(2).all(|w| w[1] <= w[0] + 0.05);
    let last = &steps[steps.len() - 1].label;
    let ends = last.pearson_r <= -0.5
        || (last.pattern == Pattern::Horizontal && (last.mean_ood - thr.chance).abs() <= 0.05);
    let shown: Vec<String> = steps
        .iter()
        .map(|s| format!("{:.3}/{}", s.label.pearson_r, s.label.pattern))
        .collect();
    outcome(
        monotone && r[0] >= 0.5 && ends,
        format!("r/pattern per step [{}]", shown.join(", ")),
    )
}

fn run_twice(sub: &str, config: &Path, artifact: &str) -> Result<bool, String> {
    let dir = tempfile::TempDir::new().map_err(|e| e.to_string())?;
    let mut outputs = Vec::new();
    for (k, threads) in ["4", "1"].iter().enumerate() {
        let out = dir.path().join(format!("run{k}"));
        let status = Command::new(env!("CARGO_BIN_EXE_misspec"))
            .args([sub, "--config"])
            .arg(config)
            .arg("--out")
            .arg(&out)
            .env("RAYON_NUM_THREADS", threads)
            .output()
            .map_err(|e| e.to_string())?;
        if !status.status.success() {
            return Err(format!("{sub} exited with {:?}", status.status.code()));
        }
        outputs.push(std::fs::read(out.join(artifact)).map_err(|e| e.to_string())?);
    }
    Ok(outputs[0] == outputs[1])
}

fn criterion9() -> Outcome {
    let configs = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    let train = run_twice("train", &configs.join("benchmark.toml"), "train.csv");
    let cert = run_twice("certify", &configs.join("e0.toml"), "certificate.json");
    match (train, cert) {
        (Ok(t), Ok(c)) => outcome(
            t && c,
            format!("train.csv identical: {t}, certificate.json identical: {c}"),
        ),
        (t, c) => outcome(false, format!("train: {t:?}, certify: {c:?}")),
    }
}

fn main() {
    let criteria: [(&str, Check); 9] = [
        ("E0 certificate", criterion1),
        ("randomized sufficient condition", criterion2),
        ("Q-identity and Q3 sign", criterion3),
        ("oracle equivalence", criterion4),
        ("gradient checks", criterion5),
        ("diversity spread", criterion6),
        ("selection-bias collapse", criterion7),
        ("shift ordering", criterion8),
        ("determinism", criterion9),
    ];
    let mut failed = 0;
    for (k, (name, check)) in criteria.iter().enumerate() {
        let result = check();
        let tag = if result.pass { "PASS" } else { "FAIL" };
        failed += usize::from(!result.pass);
        println!("criterion {}: {tag} {name}: {}", k + 1, result.detail);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
