//! Certifies that adding a spurious feature helps ID and hurts OOD, first on
//! the one-dimensional example and then on a batch of random tasks.

use misspec::oracle::FeatureMask;
use misspec::sem::{EnvId, Environment, TaskSpec};
use misspec::theorem::{certify, RandomCaseRanges, Tolerances, Verdict};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> misspec::Result<()> {
    let task = TaskSpec::new(vec![1.0], 1.0, vec![1.0], 1.0)?;
    let id = Environment::uniform(EnvId::Id, 1, 0.1);
    let ood = Environment::uniform(EnvId::Ood, 1, 3.0);
    let tol = Tolerances::default();
    let cert = certify(
        &task,
        &id,
        &ood,
        &FeatureMask::invariant_only(&task),
        1,
        &tol,
    )?;
    println!("{}", cert.summary());

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut counts = [0usize; 4];
    for _ in 0..1000 {
        let verdict = RandomCaseRanges::default()
            .sample(&mut rng)
            .certify(&tol)?
            .verdict;
        counts[match verdict {
            Verdict::InverseCertified => 0,
            Verdict::IdOnlyImproved => 1,
            Verdict::DecompositionInvalid => 2,
            Verdict::AssumptionViolated => 3,
        }] += 1;
    }
    println!(
        "1000 random additions: {} inverse, {} ID-only, {} invalid decomposition, {} assumption violated",
        counts[0], counts[1], counts[2], counts[3]
    );
    Ok(())
}
