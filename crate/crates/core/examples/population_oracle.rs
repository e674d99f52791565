//! Population moments, the least-squares fit and its ID/OOD risks for every
//! feature mask of a one-invariant, two-spurious task, next to the same fit
//! estimated from a finite sample.

use misspec::oracle::{
    eigendecompose, empirical_moments, population_moments, risk, solve_regression, FeatureMask,
};
use misspec::sem::{sample_dataset, EnvId, Environment, TaskSpec};

fn main() -> misspec::Result<()> {
    let task = TaskSpec::new(vec![1.0], 1.0, vec![1.0, 0.5], 1.0)?;
    let id = Environment::new(EnvId::Id, vec![0.1, 0.5]);
    let ood = Environment::new(EnvId::Ood, vec![3.0, 0.5]);
    let sample = sample_dataset(&task, &id, 100_000, 1)?;

    println!(
        "{:<10} {:>9} {:>9} {:>9}  beta",
        "mask", "L_ID", "L_OOD", "L_ID(emp)"
    );
    for bits in 1u32..(1 << task.width()) {
        let idx: Vec<usize> = (0..task.width()).filter(|i| bits & (1 << i) != 0).collect();
        let mask = FeatureMask::from_indices(task.d_inv, task.d_spu, &idx)?;
        let pop_id = population_moments(&task, &id, &mask)?;
        let pop_ood = population_moments(&task, &ood, &mask)?;
        let fit = solve_regression(&pop_id)?;
        let emp_fit = solve_regression(&empirical_moments(&sample, &mask)?)?;
        println!(
            "{:<10} {:>9.5} {:>9.5} {:>9.5}  {:.4?}",
            format!("{idx:?}"),
            risk(&fit, &pop_id)?,
            risk(&fit, &pop_ood)?,
            risk(&emp_fit, &pop_id)?,
            fit.beta.as_slice()
        );
    }

    let full = FeatureMask::full(&task);
    let eig = eigendecompose(&population_moments(&task, &id, &full)?.m)?;
    println!(
        "ID second-moment eigenvalues: {:.4?}",
        eig.lambdas.as_slice()
    );
    Ok(())
}
