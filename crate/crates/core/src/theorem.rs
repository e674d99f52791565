//! Population-level certificates for the effect of adding one spurious
//! feature to a least-squares model.
//!
//! Adding a feature can only lower the ID risk. The OOD risk of the
//! ID-fitted coefficients ("transfer" risk) is split as
//!
//! ```text
//! L_OOD^transfer = xi1 + xi2
//! xi2 = min_beta E_OOD (y - x^T beta)^2                       (OOD-oracle risk)
//! xi1 = sum_i (b^T v_i)^2 lam_i^OOD (1/lam_i^ID - 1/lam_i^OOD)^2
//! ```
//!
//! where the last identity holds when `M^ID` and `M^OOD` share eigenvectors.
//! The change from adding a feature is then `q1 + q2 + q3` with `q1` the
//! change in `xi2`, `q3` the `xi1` term of the eigen-direction carrying the
//! new feature and `q2` the change of all other `xi1` terms.
//!
//! Direct risk differences are always computed from the oracle and are the
//! only source of the verdict; the decomposition is a diagnostic.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::{
    eigendecompose, population_moments, risk, solve_regression, EigenSystem, FeatureMask, MomentSet,
};
use crate::sem::{EnvId, Environment, TaskSpec};

/// Mixing weight used to build a joint eigenbasis of commuting moment matrices.
const JOINT_BASIS_WEIGHT: f64 = 0.754_877_666_246_692_8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    /// Minimum |b^T v_i| for Assumption 1 (absolute).
    pub assumption1: f64,
    /// Relative tolerance for treating ID/OOD eigenvectors as shared.
    pub shared_eigvec: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            assumption1: 1e-9,
            shared_eigvec: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    /// ID risk strictly decreased and transfer OOD risk strictly increased.
    InverseCertified,
    /// ID risk decreased, transfer OOD risk did not increase.
    IdOnlyImproved,
    /// No ID improvement and the ID/OOD eigenvectors are not shared.
    DecompositionInvalid,
    /// No ID improvement and Assumption 1 fails.
    AssumptionViolated,
}

/// Result of [`certify`].
///
/// Assumption 1 is checked as `|E[Phi(x) y]^T v_i| > tol` for every
/// eigenvector `v_i` of `M` in both environments and both masks. (The literal
/// reading, a projection of `E[x]`, vanishes identically for zero-mean
/// features.)
///
/// `shared_eigvec_ok` holds when an orthonormal basis diagonalises both
/// `M^ID` and `M^OOD` to relative accuracy `tolerances.shared_eigvec`, for
/// both masks. Only then is `q1 + q2 + q3` expected to equal
/// `delta_ood_transfer`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Certificate {
    pub mask_before: FeatureMask,
    pub mask_after: FeatureMask,
    pub new_index: usize,
    pub l_id_before: f64,
    pub l_id_after: f64,
    pub l_ood_transfer_before: f64,
    pub l_ood_transfer_after: f64,
    pub l_ood_oracle_before: f64,
    pub l_ood_oracle_after: f64,
    pub delta_id: f64,
    pub delta_ood_transfer: f64,
    pub delta_ood_oracle: f64,
    pub q1: f64,
    pub q2: f64,
    pub q3: f64,
    pub q_identity_residual: f64,
    pub assumption1_ok: bool,
    pub shared_eigvec_ok: bool,
    /// |alpha_ID^2 - alpha_OOD^2| on the added coordinate.
    pub alpha_gap: f64,
    /// Smallest alpha gap for which q3 > |q1 + q2|; `None` when the new
    /// eigen-direction has zero projection.
    pub alpha_threshold: Option<f64>,
    pub verdict: Verdict,
    pub tolerances: Tolerances,
}

impl Theorem1Certificate {
    pub fn sufficient_condition_holds(&self) -> bool {
        self.alpha_threshold.is_some_and(|t| self.alpha_gap > t)
    }

    pub fn summary(&self) -> String {
        let id = if self.delta_id < 0.0 {
            "delta_id < 0"
        } else {
            "delta_id >= 0"
        };
        let ood = if self.delta_ood_transfer > 0.0 {
            "delta_ood > 0"
        } else {
            "delta_ood <= 0"
        };
        format!(
            "{:?}: {id} ({:.6}), {ood} ({:.6}); q1={:.6} q2={:.6} q3={:.6}",
            self.verdict, self.delta_id, self.delta_ood_transfer, self.q1, self.q2, self.q3
        )
    }
}

/// Q-decomposition terms with the quantities the threshold needs.
#[derive(Clone, Debug, PartialEq)]
pub struct QDecomposition {
    pub q1: f64,
    pub q2: f64,
    pub q3: f64,
    pub shared_eigvec_ok: bool,
    pub assumption1_ok: bool,
    /// `E_OOD[Phi(x) y]^T v` for the eigen-direction carrying the new feature.
    pub new_projection: f64,
    pub new_lambda_id: f64,
    pub new_lambda_ood: f64,
    /// sigma_spu^2 * (alpha_ID^2 - alpha_OOD^2) for the new coordinate.
    pub eigen_gap: f64,
    pub sigma_sq_new: f64,
}

/// `|b^T v_i| > tol` for each eigen-index.
pub fn check_assumption1(moments: &MomentSet, eig: &EigenSystem, tol: f64) -> Vec<bool> {
    (0..eig.dim())
        .map(|i| moments.b.dot(&eig.vectors.column(i)).abs() > tol)
        .collect()
}

struct PairedBasis {
    vectors: DMatrix<f64>,
    lambda_id: DVector<f64>,
    lambda_ood: DVector<f64>,
    shared: bool,
}

fn diagonal_residual(m: &DMatrix<f64>, v: &DMatrix<f64>, lambdas: &DVector<f64>) -> f64 {
    (m * v - v * DMatrix::from_diagonal(lambdas)).norm()
}

/// OOD eigenbasis (or a joint basis when the matrices commute) with the
/// Rayleigh quotients of both environments along it.
fn paired_basis(m_id: &DMatrix<f64>, m_ood: &DMatrix<f64>, tol: f64) -> Result<PairedBasis> {
    let commutator = (m_id * m_ood - m_ood * m_id).norm();
    let commuting = commutator <= tol * m_id.norm() * m_ood.norm();
    let eig = if commuting {
        eigendecompose(&(m_ood + m_id * JOINT_BASIS_WEIGHT))?
    } else {
        eigendecompose(m_ood)?
    };
    let v = eig.vectors;
    let d = v.ncols();
    let rayleigh = |m: &DMatrix<f64>| {
        DVector::from_fn(d, |i, _| {
            let col = v.column(i);
            col.dot(&(m * col))
        })
    };
    let lambda_id = rayleigh(m_id);
    let lambda_ood = rayleigh(m_ood);
    let shared = diagonal_residual(m_id, &v, &lambda_id) <= tol * m_id.norm()
        && diagonal_residual(m_ood, &v, &lambda_ood) <= tol * m_ood.norm();
    Ok(PairedBasis {
        vectors: v,
        lambda_id,
        lambda_ood,
        shared,
    })
}

fn xi1_terms(basis: &PairedBasis, b_ood: &DVector<f64>) -> Vec<f64> {
    (0..basis.vectors.ncols())
        .map(|i| {
            let p = b_ood.dot(&basis.vectors.column(i));
            let (li, lo) = (basis.lambda_id[i], basis.lambda_ood[i]);
            let diff = 1.0 / li - 1.0 / lo;
            p * p * lo * diff * diff
        })
        .collect()
}

struct Moments4 {
    id_before: MomentSet,
    id_after: MomentSet,
    ood_before: MomentSet,
    ood_after: MomentSet,
}

fn check_addition(
    task: &TaskSpec,
    env_id: &Environment,
    env_ood: &Environment,
    mask_before: &FeatureMask,
    new_index: usize,
) -> Result<FeatureMask> {
    task.validate_shape()?;
    env_id.check(task)?;
    env_ood.check(task)?;
    mask_before.check(task)?;
    if mask_before.d_hat() == 0 {
        return Err(Error::config(
            "mask_before must select at least one feature",
        ));
    }
    if !mask_before.is_spurious(new_index) {
        return Err(Error::config(format!(
            "new feature index {new_index} must be a spurious column ({}..{})",
            task.d_inv,
            task.width()
        )));
    }
    if mask_before.contains(new_index) {
        return Err(Error::config(format!(
            "feature {new_index} is already in mask_before"
        )));
    }
    mask_before.with(new_index)
}

fn moments4(
    task: &TaskSpec,
    env_id: &Environment,
    env_ood: &Environment,
    before: &FeatureMask,
    after: &FeatureMask,
) -> Result<Moments4> {
    Ok(Moments4 {
        id_before: population_moments(task, env_id, before)?,
        id_after: population_moments(task, env_id, after)?,
        ood_before: population_moments(task, env_ood, before)?,
        ood_after: population_moments(task, env_ood, after)?,
    })
}

fn oracle_risk(m: &MomentSet) -> Result<f64> {
    risk(&solve_regression(m)?, m)
}

fn assumption1_all(m: &MomentSet, tol: f64) -> Result<bool> {
    let eig = eigendecompose(&m.m)?;
    Ok(check_assumption1(m, &eig, tol).into_iter().all(|ok| ok))
}

fn decompose(
    task: &TaskSpec,
    env_id: &Environment,
    env_ood: &Environment,
    after: &FeatureMask,
    new_index: usize,
    mom: &Moments4,
    tol: &Tolerances,
) -> Result<QDecomposition> {
    let q1 = oracle_risk(&mom.ood_after)? - oracle_risk(&mom.ood_before)?;

    let before_basis = paired_basis(&mom.id_before.m, &mom.ood_before.m, tol.shared_eigvec)?;
    let after_basis = paired_basis(&mom.id_after.m, &mom.ood_after.m, tol.shared_eigvec)?;
    let before_terms = xi1_terms(&before_basis, &mom.ood_before.b);
    let after_terms = xi1_terms(&after_basis, &mom.ood_after.b);

    let pos = after
        .position(new_index)
        .expect("new feature is part of mask_after");
    let star = (0..after_basis.vectors.ncols())
        .max_by(|&a, &b| {
            after_basis.vectors[(pos, a)]
                .abs()
                .partial_cmp(&after_basis.vectors[(pos, b)].abs())
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(b.cmp(&a))
        })
        .expect("mask_after is nonempty");

    let spu = new_index - task.d_inv;
    let sigma_sq_new = task.sigma_spu_sq[spu];
    let (a_id, a_ood) = (env_id.alpha[spu], env_ood.alpha[spu]);
    let eigen_gap = sigma_sq_new * (a_id * a_id - a_ood * a_ood);
    let new_projection = mom.ood_after.b.dot(&after_basis.vectors.column(star));
    let new_lambda_id = after_basis.lambda_id[star];
    let new_lambda_ood = after_basis.lambda_ood[star];
    let q3 = new_projection * new_projection * eigen_gap * eigen_gap
        / (new_lambda_id * new_lambda_id * new_lambda_ood);

    let q2 = after_terms
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != star)
        .map(|(_, t)| t)
        .sum::<f64>()
        - before_terms.iter().sum::<f64>();

    let assumption1_ok = assumption1_all(&mom.id_before, tol.assumption1)?
        && assumption1_all(&mom.id_after, tol.assumption1)?
        && assumption1_all(&mom.ood_before, tol.assumption1)?
        && assumption1_all(&mom.ood_after, tol.assumption1)?;
    if !assumption1_ok {
        log::warn!("Assumption 1 fails for the certified feature addition");
    }

    Ok(QDecomposition {
        q1,
        q2,
        q3,
        shared_eigvec_ok: before_basis.shared && after_basis.shared,
        assumption1_ok,
        new_projection,
        new_lambda_id,
        new_lambda_ood,
        eigen_gap,
        sigma_sq_new,
    })
}

/// Q1/Q2/Q3 for adding spurious column `new_index` to `mask_before`.
pub fn q_decomposition(
    task: &TaskSpec,
    env_id: &Environment,
    env_ood: &Environment,
    mask_before: &FeatureMask,
    new_index: usize,
) -> Result<QDecomposition> {
    q_decomposition_with(
        task,
        env_id,
        env_ood,
        mask_before,
        new_index,
        &Tolerances::default(),
    )
}

pub fn q_decomposition_with(
    task: &TaskSpec,
    env_id: &Environment,
    env_ood: &Environment,
    mask_before: &FeatureMask,
    new_index: usize,
    tol: &Tolerances,
) -> Result<QDecomposition> {
    let after = check_addition(task, env_id, env_ood, mask_before, new_index)?;
    let mom = moments4(task, env_id, env_ood, mask_before, &after)?;
    decompose(task, env_id, env_ood, &after, new_index, &mom, tol)
}

fn threshold_from(q: &QDecomposition, tol: f64) -> Result<f64> {
    if q.new_projection.abs() <= tol {
        return Err(Error::ZeroProjection {
            projection: q.new_projection,
        });
    }
    let ratio = q.new_lambda_id * q.new_lambda_id * q.new_lambda_ood
        / (q.new_projection * q.new_projection);
    Ok((ratio * (q.q1 + q.q2).abs()).sqrt() / q.sigma_sq_new)
}

/// Minimal |alpha_ID^2 - alpha_OOD^2| on the new coordinate for which
/// `q3 > |q1 + q2|`.
///
/// With unit spurious noise this is the usual bound; for general
/// `sigma_spu_sq` the eigenvalue shift is `sigma^2` times the alpha gap, so
/// the bound is divided by `sigma^2`.
pub fn sufficient_alpha_threshold(
    task: &TaskSpec,
    env_id: &Environment,
    env_ood: &Environment,
    mask_before: &FeatureMask,
    new_index: usize,
) -> Result<f64> {
    let tol = Tolerances::default();
    let q = q_decomposition_with(task, env_id, env_ood, mask_before, new_index, &tol)?;
    threshold_from(&q, tol.assumption1)
}

/// Full certificate for one spurious-feature addition.
pub fn certify(
    task: &TaskSpec,
    env_id: &Environment,
    env_ood: &Environment,
    mask_before: &FeatureMask,
    new_index: usize,
    tol: &Tolerances,
) -> Result<Theorem1Certificate> {
    let after = check_addition(task, env_id, env_ood, mask_before, new_index)?;
    let mom = moments4(task, env_id, env_ood, mask_before, &after)?;

    let fit_before = solve_regression(&mom.id_before)?;
    let fit_after = solve_regression(&mom.id_after)?;
    let l_id_before = risk(&fit_before, &mom.id_before)?;
    let l_id_after = risk(&fit_after, &mom.id_after)?;
    let l_ood_transfer_before = risk(&fit_before, &mom.ood_before)?;
    let l_ood_transfer_after = risk(&fit_after, &mom.ood_after)?;
    let l_ood_oracle_before = oracle_risk(&mom.ood_before)?;
    let l_ood_oracle_after = oracle_risk(&mom.ood_after)?;

    let delta_id = l_id_after - l_id_before;
    let delta_ood_transfer = l_ood_transfer_after - l_ood_transfer_before;
    let delta_ood_oracle = l_ood_oracle_after - l_ood_oracle_before;

    let q = decompose(task, env_id, env_ood, &after, new_index, &mom, tol)?;
    let alpha_threshold = threshold_from(&q, tol.assumption1).ok();
    let spu = new_index - task.d_inv;
    let alpha_gap = (env_id.alpha[spu].powi(2) - env_ood.alpha[spu].powi(2)).abs();

    let verdict = if delta_id < 0.0 && delta_ood_transfer > 0.0 {
        Verdict::InverseCertified
    } else if delta_id < 0.0 {
        Verdict::IdOnlyImproved
    } else if !q.assumption1_ok {
        Verdict::AssumptionViolated
    } else {
        Verdict::DecompositionInvalid
    };

    Ok(Theorem1Certificate {
        mask_before: mask_before.clone(),
        mask_after: after,
        new_index,
        l_id_before,
        l_id_after,
        l_ood_transfer_before,
        l_ood_transfer_after,
        l_ood_oracle_before,
        l_ood_oracle_after,
        delta_id,
        delta_ood_transfer,
        delta_ood_oracle,
        q1: q.q1,
        q2: q.q2,
        q3: q.q3,
        q_identity_residual: (delta_ood_transfer - (q.q1 + q.q2 + q.q3)).abs(),
        assumption1_ok: q.assumption1_ok,
        shared_eigvec_ok: q.shared_eigvec_ok,
        alpha_gap,
        alpha_threshold,
        verdict,
        tolerances: *tol,
    })
}

/// One row of [`spurious_sweep`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepStep {
    pub step: usize,
    pub d_hat: usize,
    pub mask: FeatureMask,
    pub l_id: f64,
    pub l_ood: f64,
}

/// Risks of the ID fit as spurious columns in `order` are added one at a time
/// to the all-invariant mask.
pub fn spurious_sweep(
    task: &TaskSpec,
    env_id: &Environment,
    env_ood: &Environment,
    order: &[usize],
) -> Result<Vec<SweepStep>> {
    task.validate_shape()?;
    env_id.check(task)?;
    env_ood.check(task)?;
    let mut mask = FeatureMask::invariant_only(task);
    for (k, &col) in order.iter().enumerate() {
        if !mask.is_spurious(col) {
            return Err(Error::config(format!(
                "sweep entry {col} is not a spurious column"
            )));
        }
        if order[..k].contains(&col) {
            return Err(Error::config(format!("sweep entry {col} is repeated")));
        }
    }
    let mut steps = Vec::with_capacity(order.len() + 1);
    for step in 0..=order.len() {
        if step > 0 {
            mask = mask.with(order[step - 1])?;
        }
        let id = population_moments(task, env_id, &mask)?;
        let ood = population_moments(task, env_ood, &mask)?;
        let fit = solve_regression(&id)?;
        steps.push(SweepStep {
            step,
            d_hat: mask.d_hat(),
            mask: mask.clone(),
            l_id: risk(&fit, &id)?,
            l_ood: risk(&fit, &ood)?,
        });
    }
    Ok(steps)
}

pub fn write_sweep_csv<W: std::io::Write>(steps: &[SweepStep], out: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(["step", "d_hat", "L_ID", "L_OOD"])?;
    for s in steps {
        wtr.write_record([
            s.step.to_string(),
            s.d_hat.to_string(),
            format!("{}", s.l_id),
            format!("{}", s.l_ood),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Sampling ranges for randomized certification cases.
#[derive(Clone, Debug, PartialEq)]
pub struct RandomCaseRanges {
    pub d_inv: (usize, usize),
    pub d_spu: (usize, usize),
    /// |gamma_i| is drawn from `[gamma_min_abs, gamma_max_abs]` with a random sign.
    pub gamma_min_abs: f64,
    pub gamma_max_abs: f64,
    pub sigma_sq: (f64, f64),
    pub alpha_id: (f64, f64),
    pub alpha_ood: (f64, f64),
}

impl Default for RandomCaseRanges {
    fn default() -> Self {
        RandomCaseRanges {
            d_inv: (1, 3),
            d_spu: (1, 4),
            gamma_min_abs: 0.1,
            gamma_max_abs: 2.0,
            sigma_sq: (0.25, 4.0),
            alpha_id: (0.0, 0.5),
            alpha_ood: (2.0, 6.0),
        }
    }
}

/// A task, two environments and a feature addition to certify.
#[derive(Clone, Debug, PartialEq)]
pub struct CertificationCase {
    pub task: TaskSpec,
    pub env_id: Environment,
    pub env_ood: Environment,
    pub mask_before: FeatureMask,
    pub new_index: usize,
}

impl RandomCaseRanges {
    /// Draws a case: all invariant features, a random subset of the other
    /// spurious features, and one new spurious column.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> CertificationCase {
        let d_inv = rng.random_range(self.d_inv.0..=self.d_inv.1);
        let d_spu = rng.random_range(self.d_spu.0..=self.d_spu.1);
        let gamma = (0..d_inv)
            .map(|_| {
                let mag = rng.random_range(self.gamma_min_abs..=self.gamma_max_abs);
                if rng.random_bool(0.5) {
                    mag
                } else {
                    -mag
                }
            })
            .collect();
        let sigma_inv_sq = rng.random_range(self.sigma_sq.0..=self.sigma_sq.1);
        let sigma_spu_sq = (0..d_spu)
            .map(|_| rng.random_range(self.sigma_sq.0..=self.sigma_sq.1))
            .collect();
        let task = TaskSpec::new(gamma, sigma_inv_sq, sigma_spu_sq, 1.0)
            .expect("sampling ranges produce valid tasks");
        let alpha_id = (0..d_spu)
            .map(|_| rng.random_range(self.alpha_id.0..=self.alpha_id.1))
            .collect();
        let alpha_ood = (0..d_spu)
            .map(|_| rng.random_range(self.alpha_ood.0..=self.alpha_ood.1))
            .collect();
        let new_spu = rng.random_range(0..d_spu);
        let mut mask_before = FeatureMask::invariant_only(&task);
        for i in 0..d_spu {
            if i != new_spu && rng.random_bool(0.5) {
                mask_before = mask_before
                    .with(task.spurious_column(i))
                    .expect("column in range");
            }
        }
        CertificationCase {
            new_index: task.spurious_column(new_spu),
            env_id: Environment::new(EnvId::Id, alpha_id),
            env_ood: Environment::new(EnvId::Ood, alpha_ood),
            mask_before,
            task,
        }
    }
}

impl CertificationCase {
    pub fn certify(&self, tol: &Tolerances) -> Result<Theorem1Certificate> {
        certify(
            &self.task,
            &self.env_id,
            &self.env_ood,
            &self.mask_before,
            self.new_index,
            tol,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e0() -> (TaskSpec, Environment, Environment) {
        let task = TaskSpec::new(vec![1.0], 1.0, vec![1.0], 1.0).unwrap();
        (
            task,
            Environment::uniform(EnvId::Id, 1, 0.1),
            Environment::uniform(EnvId::Ood, 1, 3.0),
        )
    }

    #[test]
    fn e0_certificate() {
        let (task, id, ood) = e0();
        let inv = FeatureMask::invariant_only(&task);
        let cert = certify(&task, &id, &ood, &inv, 1, &Tolerances::default()).unwrap();
        assert!((cert.delta_id - (0.01 / 1.01 - 1.0)).abs() < 1e-12);
        assert!((cert.delta_ood_transfer - 7.8228).abs() < 1e-4);
        assert_eq!(cert.verdict, Verdict::InverseCertified);
        assert!(cert.q3 > 0.0);
        assert!(cert.assumption1_ok);
        assert!(!cert.shared_eigvec_ok);
        assert!((cert.alpha_gap - 8.99).abs() < 1e-12);
        assert!(cert.sufficient_condition_holds());
    }

    #[test]
    fn identical_environments() {
        let (task, id, _) = e0();
        let same = Environment::uniform(EnvId::Ood, 1, 0.1);
        let inv = FeatureMask::invariant_only(&task);
        let cert = certify(&task, &id, &same, &inv, 1, &Tolerances::default()).unwrap();
        assert!(cert.delta_id < 0.0);
        assert_eq!(cert.delta_ood_transfer, cert.delta_id);
        assert_eq!(cert.verdict, Verdict::IdOnlyImproved);
        assert_eq!(cert.q2, 0.0);
        assert_eq!(cert.q3, 0.0);
        assert!(cert.shared_eigvec_ok);
        assert!(cert.q_identity_residual < 1e-12);
    }

    #[test]
    fn balanced_q1_q2_gives_zero_threshold() {
        let q = QDecomposition {
            q1: -0.4,
            q2: 0.4,
            q3: 1.0,
            shared_eigvec_ok: true,
            assumption1_ok: true,
            new_projection: 2.0,
            new_lambda_id: 3.0,
            new_lambda_ood: 5.0,
            eigen_gap: -4.0,
            sigma_sq_new: 1.0,
        };
        assert_eq!(threshold_from(&q, 1e-9).unwrap(), 0.0);
        let zero = QDecomposition {
            new_projection: 0.0,
            ..q
        };
        assert!(matches!(
            threshold_from(&zero, 1e-9),
            Err(Error::ZeroProjection { .. })
        ));
    }

    #[test]
    fn new_index_must_be_spurious_and_new() {
        let task = TaskSpec::new(vec![1.0, 0.5], 1.0, vec![1.0], 1.0).unwrap();
        let id = Environment::uniform(EnvId::Id, 1, 0.1);
        let ood = Environment::uniform(EnvId::Ood, 1, 3.0);
        let mask = FeatureMask::from_indices(2, 1, &[0]).unwrap();
        assert!(matches!(
            certify(&task, &id, &ood, &mask, 1, &Tolerances::default()),
            Err(Error::Config(_))
        ));
        let mask = FeatureMask::from_indices(2, 1, &[0, 2]).unwrap();
        assert!(certify(&task, &id, &ood, &mask, 2, &Tolerances::default()).is_err());
    }

    #[test]
    fn no_alpha_gap_means_no_q3() {
        let task = TaskSpec::new(vec![1.0], 1.0, vec![1.0, 1e6], 1.0).unwrap();
        let id = Environment::new(EnvId::Id, vec![0.1, 0.7]);
        let ood = Environment::new(EnvId::Ood, vec![3.0, 0.7]);
        let mask = FeatureMask::from_indices(1, 2, &[0, 1]).unwrap();
        let q = q_decomposition(&task, &id, &ood, &mask, 2).unwrap();
        assert_eq!(q.q3, 0.0);
    }

    #[test]
    fn q_identity_with_shared_eigenvectors() {
        // Spurious-only masks with equal gaps keep the moment matrices commuting.
        let task = TaskSpec::new(vec![1.0], 1.0, vec![1.0, 1.0, 1.0], 1.0).unwrap();
        let id = Environment::new(EnvId::Id, vec![0.3, 0.3, 0.3]);
        let ood = Environment::new(EnvId::Ood, vec![2.0, 2.0, 2.0]);
        let mask = FeatureMask::from_indices(1, 3, &[1, 2]).unwrap();
        let cert = certify(&task, &id, &ood, &mask, 3, &Tolerances::default()).unwrap();
        assert!(cert.shared_eigvec_ok);
        assert!(cert.q_identity_residual < 1e-9, "{cert:?}");
        assert!(cert.q3 > 0.0);
    }

    #[test]
    fn assumption1_predicate() {
        let mask = FeatureMask::from_indices(2, 0, &[0, 1]).unwrap();
        let eig = EigenSystem {
            lambdas: DVector::from_vec(vec![1.0, 1.0]),
            vectors: DMatrix::identity(2, 2),
        };
        let mut mom = MomentSet {
            m: DMatrix::identity(2, 2),
            b: DVector::from_vec(vec![1.0, 2.0]),
            s_y: 5.0,
            source: crate::oracle::MomentSource::Population { env_id: EnvId::Id },
            mask,
            underdetermined: false,
        };
        assert_eq!(check_assumption1(&mom, &eig, 1e-9), vec![true, true]);
        mom.b = DVector::from_vec(vec![1.0, 0.0]);
        assert_eq!(check_assumption1(&mom, &eig, 1e-9), vec![true, false]);
    }

    #[test]
    fn sweep_shapes() {
        let (task, id, ood) = e0();
        let steps = spurious_sweep(&task, &id, &ood, &[]).unwrap();
        assert_eq!(steps.len(), 1);
        assert!((steps[0].l_id - 1.0).abs() < 1e-12);
        assert_eq!(steps[0].l_id, steps[0].l_ood);
        assert!(spurious_sweep(&task, &id, &ood, &[0]).is_err());
        assert!(spurious_sweep(&task, &id, &ood, &[1, 1]).is_err());

        let mut buf = Vec::new();
        write_sweep_csv(&spurious_sweep(&task, &id, &ood, &[1]).unwrap(), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("step,d_hat,L_ID,L_OOD\n0,1,"));
    }

    #[test]
    fn sweep_trade_off_three_features() {
        let task = TaskSpec::new(vec![1.0], 1.0, vec![1.0; 3], 1.0).unwrap();
        let id = Environment::uniform(EnvId::Id, 3, 0.1);
        let ood = Environment::uniform(EnvId::Ood, 3, 3.0);
        let steps = spurious_sweep(&task, &id, &ood, &[1, 2, 3]).unwrap();
        for w in steps.windows(2) {
            assert!(w[1].l_id < w[0].l_id);
        }
        // Identical spurious copies average their OOD noise, so only the first
        // addition raises the transfer risk; all stay above the baseline.
        assert!(steps[1].l_ood > steps[0].l_ood);
        assert!(steps[2].l_ood < steps[1].l_ood);
        assert!(steps[1..].iter().all(|s| s.l_ood > steps[0].l_ood));
        let same = Environment::uniform(EnvId::Ood, 3, 0.1);
        let steps = spurious_sweep(&task, &id, &same, &[1, 2, 3]).unwrap();
        for w in steps.windows(2) {
            assert!(w[1].l_id <= w[0].l_id);
        }
        assert!(steps.iter().all(|s| s.l_id == s.l_ood));
    }
}
