//! Trains a diverse set of linear heads and a matching number of ERM seeds on
//! the benchmark task and compares how widely their OOD accuracies spread.

use misspec::landscape::{diverse_run, erm_runs, ExperimentPlan};
use misspec::sem::{EnvId, Environment, TaskSpec};
use misspec::trainer::{Similarity, TrainConfig};

fn spread(v: &[f64]) -> (f64, f64) {
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

fn main() -> misspec::Result<()> {
    let task = TaskSpec::benchmark();
    let id = Environment::uniform(EnvId::Id, task.d_spu, 0.1);
    let ood = Environment::uniform(EnvId::Ood, task.d_spu, 3.0);
    let cfg = TrainConfig {
        n_models: 24,
        diversity_weight: 10.0,
        similarity: Similarity::RawDot,
        learning_rate: 0.01,
        ..TrainConfig::default()
    };
    let plan = ExperimentPlan {
        n_seeds: 24,
        ..ExperimentPlan::default()
    };

    let erm = erm_runs(&task, &id, &ood, &cfg, &plan)?;
    let erm_ood: Vec<f64> = erm
        .iter()
        .map(|r| r.final_records()[0].ood_accuracy)
        .collect();
    let set = diverse_run(&task, &id, &ood, &cfg, &plan)?;
    let last = set.final_records();
    let div_ood: Vec<f64> = last.iter().map(|r| r.ood_accuracy).collect();

    let (lo, hi) = spread(&erm_ood);
    println!("ERM seeds   : OOD accuracy {lo:.4} .. {hi:.4}");
    let (lo, hi) = spread(&div_ood);
    println!("diverse set : OOD accuracy {lo:.4} .. {hi:.4}");
    for r in last.iter().take(6) {
        println!(
            "  model {:>2}: ID {:.4} OOD {:.4}",
            r.model_idx, r.id_accuracy, r.ood_accuracy
        );
    }
    Ok(())
}
