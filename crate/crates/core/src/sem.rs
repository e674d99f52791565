//! Linear structural-equation model with invariant and spurious features.
//!
//! For an environment `e` the generator draws
//!
//! ```text
//! x_inv ~ N(0, inv_scale_sq * I)
//! y     = gamma . x_inv + eps_inv                 eps_inv   ~ N(0, sigma_inv_sq)
//! x_spu = y * 1 + alpha_e (elementwise) eps_spu   eps_spu,i ~ N(0, sigma_spu_sq[i])
//! ```
//!
//! Only `alpha_e` changes across environments; `gamma` and the noise variances
//! are shared. Features are laid out as `[x_inv | x_spu]`.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

const SAMPLE_STREAM: u64 = 0x5E3_0001;

fn default_inv_scale_sq() -> f64 {
    1.0
}

/// The environment-independent part of the data-generating process.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub d_inv: usize,
    pub d_spu: usize,
    pub gamma: Vec<f64>,
    pub sigma_inv_sq: f64,
    pub sigma_spu_sq: Vec<f64>,
    #[serde(default = "default_inv_scale_sq")]
    pub inv_scale_sq: f64,
}

impl TaskSpec {
    /// Builds and validates a task, including the requirement that `gamma`
    /// has a nonzero entry.
    pub fn new(
        gamma: Vec<f64>,
        sigma_inv_sq: f64,
        sigma_spu_sq: Vec<f64>,
        inv_scale_sq: f64,
    ) -> Result<Self> {
        let task = TaskSpec {
            d_inv: gamma.len(),
            d_spu: sigma_spu_sq.len(),
            gamma,
            sigma_inv_sq,
            sigma_spu_sq,
            inv_scale_sq,
        };
        task.validate()?;
        Ok(task)
    }

    /// Structural checks only: lengths, positivity, finiteness.
    ///
    /// The oracle accepts a zero `gamma` (pure-noise target), so that check
    /// lives in [`TaskSpec::validate`].
    pub fn validate_shape(&self) -> Result<()> {
        if self.d_inv == 0 {
            return Err(Error::config("task.d_inv must be positive"));
        }
        if self.gamma.len() != self.d_inv {
            return Err(Error::config(format!(
                "task.gamma has length {} but d_inv = {}",
                self.gamma.len(),
                self.d_inv
            )));
        }
        if self.sigma_spu_sq.len() != self.d_spu {
            return Err(Error::config(format!(
                "task.sigma_spu_sq has length {} but d_spu = {}",
                self.sigma_spu_sq.len(),
                self.d_spu
            )));
        }
        if self.gamma.iter().any(|g| !g.is_finite()) {
            return Err(Error::config("task.gamma must be finite"));
        }
        if !(self.sigma_inv_sq > 0.0 && self.sigma_inv_sq.is_finite()) {
            return Err(Error::config("task.sigma_inv_sq must be positive"));
        }
        if self
            .sigma_spu_sq
            .iter()
            .any(|s| !(*s > 0.0 && s.is_finite()))
        {
            return Err(Error::config("task.sigma_spu_sq entries must be positive"));
        }
        if !(self.inv_scale_sq > 0.0 && self.inv_scale_sq.is_finite()) {
            return Err(Error::config("task.inv_scale_sq must be positive"));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_shape()?;
        if self.gamma.iter().all(|g| *g == 0.0) {
            return Err(Error::config("task.gamma needs at least one nonzero entry"));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.d_inv + self.d_spu
    }

    /// E[y^2] = inv_scale_sq * |gamma|^2 + sigma_inv_sq.
    pub fn target_second_moment(&self) -> f64 {
        self.inv_scale_sq * self.gamma.iter().map(|g| g * g).sum::<f64>() + self.sigma_inv_sq
    }

    /// Column index of spurious coordinate `i` (0-based) in the feature layout.
    pub fn spurious_column(&self, i: usize) -> usize {
        self.d_inv + i
    }

    /// The misspecified benchmark: four invariant and four spurious features,
    /// nearly noiseless spurious copies in the ID environment.
    pub fn benchmark() -> Self {
        TaskSpec::new(vec![0.5; 4], 1.0, vec![1.0; 4], 1.0).expect("valid benchmark task")
    }
}

/// Environment label.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", from = "String")]
pub enum EnvId {
    Id,
    Ood,
    Named(String),
}

impl fmt::Display for EnvId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EnvId::Id => f.write_str("ID"),
            EnvId::Ood => f.write_str("OOD"),
            EnvId::Named(name) => f.write_str(name),
        }
    }
}

impl From<String> for EnvId {
    fn from(s: String) -> Self {
        match s.as_str() {
            "ID" => EnvId::Id,
            "OOD" => EnvId::Ood,
            _ => EnvId::Named(s),
        }
    }
}

impl From<EnvId> for String {
    fn from(id: EnvId) -> Self {
        id.to_string()
    }
}

impl FromStr for EnvId {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(EnvId::from(s.to_string()))
    }
}

/// Per-environment spurious noise scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub alpha: Vec<f64>,
    pub env_id: EnvId,
}

impl Environment {
    pub fn new(env_id: EnvId, alpha: Vec<f64>) -> Self {
        Environment { alpha, env_id }
    }

    pub fn uniform(env_id: EnvId, d_spu: usize, alpha: f64) -> Self {
        Environment::new(env_id, vec![alpha; d_spu])
    }

    pub fn check(&self, task: &TaskSpec) -> Result<()> {
        if self.alpha.len() != task.d_spu {
            return Err(Error::config(format!(
                "environment {} has {} alpha entries but task has d_spu = {}",
                self.env_id,
                self.alpha.len(),
                task.d_spu
            )));
        }
        if self.alpha.iter().any(|a| !a.is_finite()) {
            return Err(Error::config(format!(
                "environment {} has non-finite alpha",
                self.env_id
            )));
        }
        Ok(())
    }
}

/// A finite sample from one environment.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// n x (d_inv + d_spu), invariant columns first.
    pub features: DMatrix<f64>,
    pub target: DVector<f64>,
    /// sign(target) with sign(0) = +1.
    pub label: Vec<i8>,
    pub d_inv: usize,
    pub env_id: EnvId,
    pub seed: u64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target.is_empty()
    }

    pub fn width(&self) -> usize {
        self.features.ncols()
    }

    pub fn d_spu(&self) -> usize {
        self.width() - self.d_inv
    }

    /// Builds a dataset from raw parts; labels are derived from the target.
    pub fn from_parts(
        features: DMatrix<f64>,
        target: DVector<f64>,
        d_inv: usize,
        env_id: EnvId,
        seed: u64,
    ) -> Result<Self> {
        if features.nrows() != target.len() {
            return Err(Error::config(format!(
                "features have {} rows but target has {}",
                features.nrows(),
                target.len()
            )));
        }
        if d_inv > features.ncols() {
            return Err(Error::config("d_inv exceeds feature width"));
        }
        let label = target.iter().map(|&y| sign_label(y)).collect();
        Ok(Dataset {
            features,
            target,
            label,
            d_inv,
            env_id,
            seed,
        })
    }

    /// Writes `y,label,x_inv_1..,x_spu_1..`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        let mut header = vec!["y".to_string(), "label".to_string()];
        header.extend((1..=self.d_inv).map(|i| format!("x_inv_{i}")));
        header.extend((1..=self.d_spu()).map(|i| format!("x_spu_{i}")));
        wtr.write_record(&header)?;
        let mut row = Vec::with_capacity(header.len());
        for r in 0..self.len() {
            row.clear();
            row.push(format!("{}", self.target[r]));
            row.push(format!("{}", self.label[r]));
            for c in 0..self.width() {
                row.push(format!("{}", self.features[(r, c)]));
            }
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

pub(crate) fn sign_label(y: f64) -> i8 {
    if y >= 0.0 {
        1
    } else {
        -1
    }
}

/// Draws `n` i.i.d. rows from `env`. Pure function of `(task, env, n, seed)`.
pub fn sample_dataset(task: &TaskSpec, env: &Environment, n: usize, seed: u64) -> Result<Dataset> {
    task.validate_shape()?;
    env.check(task)?;
    if n == 0 {
        return Err(Error::config("sample size must be at least 1"));
    }
    let width = task.width();
    let inv_sd = task.inv_scale_sq.sqrt();
    let eps_inv_sd = task.sigma_inv_sq.sqrt();
    let spu_sd: Vec<f64> = task.sigma_spu_sq.iter().map(|s| s.sqrt()).collect();

    let mut rng = seed::rng(seed, SAMPLE_STREAM);
    let mut features = DMatrix::<f64>::zeros(n, width);
    let mut target = DVector::<f64>::zeros(n);
    let mut row = vec![0.0; width];
    for r in 0..n {
        let mut y = 0.0;
        for (k, g) in task.gamma.iter().enumerate() {
            let x = inv_sd * rng.sample::<f64, _>(StandardNormal);
            row[k] = x;
            y += g * x;
        }
        y += eps_inv_sd * rng.sample::<f64, _>(StandardNormal);
        for i in 0..task.d_spu {
            let eps = spu_sd[i] * rng.sample::<f64, _>(StandardNormal);
            row[task.d_inv + i] = y + env.alpha[i] * eps;
        }
        for (c, v) in row.iter().enumerate() {
            features[(r, c)] = *v;
        }
        target[r] = y;
    }
    Dataset::from_parts(features, target, task.d_inv, env.env_id.clone(), seed)
}

/// Environments with alpha interpolated linearly from `alpha_id` (t = 0) to
/// `alpha_far` (t = 1) at `steps` evenly spaced points.
pub fn make_shift_family(
    task: &TaskSpec,
    alpha_id: &[f64],
    alpha_far: &[f64],
    steps: usize,
) -> Result<Vec<Environment>> {
    if alpha_id.len() != task.d_spu || alpha_far.len() != task.d_spu {
        return Err(Error::config(format!(
            "shift endpoints need {} alpha entries (got {} and {})",
            task.d_spu,
            alpha_id.len(),
            alpha_far.len()
        )));
    }
    if steps < 2 {
        return Err(Error::config("shift family needs at least 2 steps"));
    }
    let last = (steps - 1) as f64;
    Ok((0..steps)
        .map(|k| {
            let alpha = if k == 0 {
                alpha_id.to_vec()
            } else if k == steps - 1 {
                alpha_far.to_vec()
            } else {
                let t = k as f64 / last;
                alpha_id
                    .iter()
                    .zip(alpha_far)
                    .map(|(a, b)| (1.0 - t) * a + t * b)
                    .collect()
            };
            Environment::new(EnvId::Named(format!("shift_{k}")), alpha)
        })
        .collect())
}

/// Interpolation parameter of step `k` in a family of `steps`.
pub fn shift_parameter(k: usize, steps: usize) -> f64 {
    if steps < 2 {
        0.0
    } else {
        k as f64 / (steps - 1) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_dim_task() -> TaskSpec {
        TaskSpec::new(vec![1.0], 1.0, vec![1.0], 1.0).unwrap()
    }

    #[test]
    fn zero_alpha_makes_spurious_an_exact_copy() {
        let task = one_dim_task();
        let env = Environment::uniform(EnvId::Id, 1, 0.0);
        let ds = sample_dataset(&task, &env, 5, 17).unwrap();
        for r in 0..5 {
            assert_eq!(ds.features[(r, 1)], ds.target[r]);
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let task = TaskSpec::benchmark();
        let env = Environment::uniform(EnvId::Ood, 4, 3.0);
        let a = sample_dataset(&task, &env, 50, 9).unwrap();
        let b = sample_dataset(&task, &env, 50, 9).unwrap();
        assert_eq!(a, b);
        let c = sample_dataset(&task, &env, 50, 10).unwrap();
        assert_ne!(a.target, c.target);
    }

    #[test]
    fn labels_follow_target_sign() {
        let task = TaskSpec::benchmark();
        let env = Environment::uniform(EnvId::Id, 4, 0.1);
        let ds = sample_dataset(&task, &env, 500, 3).unwrap();
        for (y, l) in ds.target.iter().zip(&ds.label) {
            assert_eq!(*l == 1, *y >= 0.0);
        }
        assert_eq!(sign_label(0.0), 1);
    }

    #[test]
    fn dimension_mismatch_is_a_config_error() {
        let task = TaskSpec::benchmark();
        let env = Environment::uniform(EnvId::Id, 3, 0.1);
        assert!(matches!(
            sample_dataset(&task, &env, 10, 0),
            Err(Error::Config(_))
        ));
        assert!(sample_dataset(&task, &Environment::uniform(EnvId::Id, 4, 0.1), 0, 0).is_err());
    }

    #[test]
    fn task_invariants() {
        assert!(TaskSpec::new(vec![0.0, 0.0], 1.0, vec![1.0], 1.0).is_err());
        assert!(TaskSpec::new(vec![1.0], 0.0, vec![1.0], 1.0).is_err());
        assert!(TaskSpec::new(vec![1.0], 1.0, vec![-1.0], 1.0).is_err());
        let mut t = one_dim_task();
        t.d_spu = 2;
        assert!(t.validate().is_err());
    }

    #[test]
    fn shift_family_interpolates() {
        let task = one_dim_task();
        let fam = make_shift_family(&task, &[0.0], &[4.0], 5).unwrap();
        let alphas: Vec<f64> = fam.iter().map(|e| e.alpha[0]).collect();
        assert_eq!(alphas, vec![0.0, 1.0, 2.0, 3.0, 4.0]);

        let fam = make_shift_family(&task, &[1.0], &[1.0], 3).unwrap();
        assert!(fam.iter().all(|e| e.alpha == vec![1.0]));

        let two = TaskSpec::new(vec![1.0], 1.0, vec![1.0, 1.0], 1.0).unwrap();
        let fam = make_shift_family(&two, &[0.1, 0.1], &[3.0, 5.0], 2).unwrap();
        assert_eq!(fam[0].alpha, vec![0.1, 0.1]);
        assert_eq!(fam[1].alpha, vec![3.0, 5.0]);
    }

    #[test]
    fn shift_family_errors() {
        let task = one_dim_task();
        assert!(make_shift_family(&task, &[0.0], &[1.0], 1).is_err());
        assert!(make_shift_family(&task, &[0.0, 1.0], &[1.0], 3).is_err());
    }

    #[test]
    fn csv_header_layout() {
        let task = TaskSpec::new(vec![1.0, 0.5], 1.0, vec![1.0], 1.0).unwrap();
        let env = Environment::uniform(EnvId::Id, 1, 0.5);
        let ds = sample_dataset(&task, &env, 3, 1).unwrap();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "y,label,x_inv_1,x_inv_2,x_spu_1"
        );
        assert_eq!(text.lines().count(), 4);
    }

    #[test]
    fn env_id_round_trips_through_strings() {
        for id in [EnvId::Id, EnvId::Ood, EnvId::Named("shift_3".into())] {
            let s: String = id.clone().into();
            assert_eq!(EnvId::from(s), id);
        }
    }
}
