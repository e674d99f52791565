//! Pools ERM seeds and a diverse set trained on the benchmark task, labels
//! the ID/OOD cloud and the fixed-epoch subsample, and reports what picking
//! by ID accuracy costs OOD. Writes the scatter plot to out/examples.

use std::path::Path;

use misspec::landscape::{
    diverse_run, erm_runs, points_from_runs, selection_bias_report, ExperimentPlan,
    SelectionOptions, Thresholds,
};
use misspec::plot::scatter_svg;
use misspec::sem::{EnvId, Environment, TaskSpec};
use misspec::trainer::TrainConfig;

fn main() -> misspec::Result<()> {
    let task = TaskSpec::benchmark();
    let id = Environment::uniform(EnvId::Id, task.d_spu, 0.1);
    let ood = Environment::uniform(EnvId::Ood, task.d_spu, 3.0);
    let cfg = TrainConfig {
        learning_rate: 0.01,
        ..TrainConfig::default()
    };
    let plan = ExperimentPlan::default();
    let mut runs = erm_runs(&task, &id, &ood, &cfg, &plan)?;
    runs.push(diverse_run(&task, &id, &ood, &cfg, &plan)?);
    let points = points_from_runs(&runs);

    let report = selection_bias_report(
        &points,
        &SelectionOptions::default(),
        &Thresholds::default(),
    )?;
    let (full, filtered) = (&report.pattern_full, &report.pattern_filtered);
    println!(
        "all points ({}): {} r={:.3}",
        full.n_points, full.pattern, full.pearson_r
    );
    println!(
        "epoch {} ERM only ({}): {} r={:.3}",
        report.fixed_epoch, filtered.n_points, filtered.pattern, filtered.pearson_r
    );
    println!("OOD regret of ID-based selection: {:.4}", report.ood_regret);

    let out = Path::new("out/examples");
    std::fs::create_dir_all(out)?;
    let svg = scatter_svg(
        &points,
        &report.selected_by_id,
        &report.selected_by_ood,
        "benchmark",
    );
    std::fs::write(out.join("scatter.svg"), svg)?;
    Ok(())
}
