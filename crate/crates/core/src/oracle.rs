//! Second moments, least-squares fits and risks for the structural-equation
//! model, in closed form (population) or estimated from samples (empirical).

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sem::{Dataset, EnvId, Environment, TaskSpec};

/// Largest condition number accepted by [`solve_regression`].
pub const MAX_CONDITION: f64 = 1e12;

/// Binary selection of feature columns (the mask Phi).
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureMask {
    pub selected: Vec<bool>,
    pub d_inv: usize,
}

impl FeatureMask {
    pub fn from_indices(d_inv: usize, d_spu: usize, indices: &[usize]) -> Result<Self> {
        let width = d_inv + d_spu;
        let mut selected = vec![false; width];
        for &i in indices {
            if i >= width {
                return Err(Error::config(format!(
                    "mask index {i} out of range for {width} features"
                )));
            }
            selected[i] = true;
        }
        Ok(FeatureMask { selected, d_inv })
    }

    pub fn invariant_only(task: &TaskSpec) -> Self {
        let mut selected = vec![false; task.width()];
        selected[..task.d_inv].iter_mut().for_each(|s| *s = true);
        FeatureMask {
            selected,
            d_inv: task.d_inv,
        }
    }

    pub fn full(task: &TaskSpec) -> Self {
        FeatureMask {
            selected: vec![true; task.width()],
            d_inv: task.d_inv,
        }
    }

    pub fn width(&self) -> usize {
        self.selected.len()
    }

    pub fn d_hat(&self) -> usize {
        self.selected.iter().filter(|s| **s).count()
    }

    pub fn d_hat_inv(&self) -> usize {
        self.selected[..self.d_inv].iter().filter(|s| **s).count()
    }

    pub fn d_hat_spu(&self) -> usize {
        self.d_hat() - self.d_hat_inv()
    }

    pub fn contains(&self, column: usize) -> bool {
        self.selected.get(column).copied().unwrap_or(false)
    }

    pub fn is_spurious(&self, column: usize) -> bool {
        column >= self.d_inv && column < self.width()
    }

    /// Selected column indices in ascending order.
    pub fn indices(&self) -> Vec<usize> {
        self.selected
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.then_some(i))
            .collect()
    }

    /// Position of `column` within the selected coordinates.
    pub fn position(&self, column: usize) -> Option<usize> {
        self.indices().iter().position(|&c| c == column)
    }

    pub fn with(&self, column: usize) -> Result<Self> {
        if column >= self.width() {
            return Err(Error::config(format!(
                "feature index {column} out of range"
            )));
        }
        let mut next = self.clone();
        next.selected[column] = true;
        Ok(next)
    }

    /// Checks the mask against a task's layout.
    pub fn check(&self, task: &TaskSpec) -> Result<()> {
        if self.width() != task.width() || self.d_inv != task.d_inv {
            return Err(Error::config(format!(
                "mask covers {} columns ({} invariant) but task has {} ({} invariant)",
                self.width(),
                self.d_inv,
                task.width(),
                task.d_inv
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MomentSource {
    Population { env_id: EnvId },
    Empirical { env_id: EnvId, n: usize, seed: u64 },
}

impl MomentSource {
    pub fn env_id(&self) -> &EnvId {
        match self {
            MomentSource::Population { env_id } | MomentSource::Empirical { env_id, .. } => env_id,
        }
    }
}

/// `M = E[Phi(x) Phi(x)^T]`, `b = E[Phi(x) y]` and `s_y = E[y^2]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentSet {
    #[serde(rename = "M", with = "matrix_rows")]
    pub m: DMatrix<f64>,
    #[serde(with = "vector_entries")]
    pub b: DVector<f64>,
    pub s_y: f64,
    pub source: MomentSource,
    pub mask: FeatureMask,
    /// Set when fewer samples than selected features were available.
    #[serde(default)]
    pub underdetermined: bool,
}

impl MomentSet {
    pub fn dim(&self) -> usize {
        self.b.len()
    }
}

/// `beta = M^{-1} b` for one environment and mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionSolution {
    #[serde(with = "vector_entries")]
    pub beta: DVector<f64>,
    pub fit_env: EnvId,
    pub mask: FeatureMask,
}

/// Eigenvalues in descending order; column `i` of `vectors` belongs to
/// `lambdas[i]` and has its first non-negligible component positive.
#[derive(Clone, Debug, PartialEq)]
pub struct EigenSystem {
    pub lambdas: DVector<f64>,
    pub vectors: DMatrix<f64>,
}

impl EigenSystem {
    pub fn dim(&self) -> usize {
        self.lambdas.len()
    }

    pub fn vector(&self, i: usize) -> DVector<f64> {
        self.vectors.column(i).into_owned()
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.vectors * DMatrix::from_diagonal(&self.lambdas) * self.vectors.transpose()
    }
}

/// Exact moments under Gaussian `x_inv` with covariance `inv_scale_sq * I`.
pub fn population_moments(
    task: &TaskSpec,
    env: &Environment,
    mask: &FeatureMask,
) -> Result<MomentSet> {
    task.validate_shape()?;
    env.check(task)?;
    mask.check(task)?;
    let cols = mask.indices();
    if cols.is_empty() {
        return Err(Error::config("feature mask selects no columns"));
    }
    let s_y = task.target_second_moment();
    let d_inv = task.d_inv;
    let scale = task.inv_scale_sq;

    let cov = |a: usize, c: usize| -> f64 {
        match (a < d_inv, c < d_inv) {
            (true, true) => {
                if a == c {
                    scale
                } else {
                    0.0
                }
            }
            (true, false) => scale * task.gamma[a],
            (false, true) => scale * task.gamma[c],
            (false, false) => {
                let (i, j) = (a - d_inv, c - d_inv);
                if i == j {
                    s_y + env.alpha[i] * env.alpha[i] * task.sigma_spu_sq[i]
                } else {
                    s_y
                }
            }
        }
    };
    let cross = |a: usize| -> f64 {
        if a < d_inv {
            scale * task.gamma[a]
        } else {
            s_y
        }
    };

    let d = cols.len();
    let m = DMatrix::from_fn(d, d, |r, c| cov(cols[r], cols[c]));
    let b = DVector::from_fn(d, |r, _| cross(cols[r]));
    Ok(MomentSet {
        m,
        b,
        s_y,
        source: MomentSource::Population {
            env_id: env.env_id.clone(),
        },
        mask: mask.clone(),
        underdetermined: false,
    })
}

/// Sample averages `X^T X / n`, `X^T y / n`, `y^T y / n` over the masked columns.
pub fn empirical_moments(dataset: &Dataset, mask: &FeatureMask) -> Result<MomentSet> {
    if dataset.is_empty() {
        return Err(Error::config("empirical moments need a nonempty dataset"));
    }
    if mask.width() != dataset.width() || mask.d_inv != dataset.d_inv {
        return Err(Error::config(format!(
            "mask covers {} columns but dataset has {}",
            mask.width(),
            dataset.width()
        )));
    }
    let cols = mask.indices();
    if cols.is_empty() {
        return Err(Error::config("feature mask selects no columns"));
    }
    let n = dataset.len();
    let x = dataset.features.select_columns(&cols);
    let inv_n = 1.0 / n as f64;
    let m = x.tr_mul(&x) * inv_n;
    let b = x.tr_mul(&dataset.target) * inv_n;
    let s_y = dataset.target.dot(&dataset.target) * inv_n;
    let underdetermined = n < cols.len();
    if underdetermined {
        log::warn!(
            "empirical moments from {n} rows for {} features: M may be singular",
            cols.len()
        );
    }
    Ok(MomentSet {
        m,
        b,
        s_y,
        source: MomentSource::Empirical {
            env_id: dataset.env_id.clone(),
            n,
            seed: dataset.seed,
        },
        mask: mask.clone(),
        underdetermined,
    })
}

/// Spectral condition number of a symmetric matrix (infinite when not PD).
pub fn condition_estimate(m: &DMatrix<f64>) -> f64 {
    let eig = SymmetricEigen::new(m.clone());
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if min <= 0.0 || !min.is_finite() {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Normal-equations solution via Cholesky, guarded by [`MAX_CONDITION`].
pub fn solve_regression(moments: &MomentSet) -> Result<RegressionSolution> {
    let condition = condition_estimate(&moments.m);
    if condition.is_nan() || condition >= MAX_CONDITION {
        return Err(Error::SingularMoment { condition });
    }
    let chol = moments
        .m
        .clone()
        .cholesky()
        .ok_or(Error::SingularMoment { condition })?;
    let beta = chol.solve(&moments.b);
    Ok(RegressionSolution {
        beta,
        fit_env: moments.source.env_id().clone(),
        mask: moments.mask.clone(),
    })
}

/// `E[(y - Phi(x)^T beta)^2] = s_y - 2 beta^T b + beta^T M beta` under the
/// evaluation moments.
pub fn risk(solution: &RegressionSolution, eval: &MomentSet) -> Result<f64> {
    if solution.beta.len() != eval.dim() || solution.mask != eval.mask {
        return Err(Error::config(format!(
            "solution has {} coefficients but evaluation moments have dimension {} or a different mask",
            solution.beta.len(),
            eval.dim()
        )));
    }
    Ok(quadratic_risk(&solution.beta, eval))
}

pub(crate) fn quadratic_risk(beta: &DVector<f64>, eval: &MomentSet) -> f64 {
    let value = eval.s_y - 2.0 * beta.dot(&eval.b) + beta.dot(&(&eval.m * beta));
    value.max(0.0)
}

/// Relative residual `|M beta - b| / |b|`.
pub fn relative_residual(solution: &RegressionSolution, moments: &MomentSet) -> f64 {
    let r = &moments.m * &solution.beta - &moments.b;
    r.norm() / moments.b.norm().max(f64::MIN_POSITIVE)
}

/// Symmetric eigendecomposition with descending eigenvalues and the
/// first-nonzero-component-positive sign rule.
pub fn eigendecompose(m: &DMatrix<f64>) -> Result<EigenSystem> {
    if !m.is_square() {
        return Err(Error::config("eigendecomposition needs a square matrix"));
    }
    let scale = m.amax().max(1.0);
    let asymmetry = (m - m.transpose()).amax();
    if asymmetry > 1e-12 * scale {
        return Err(Error::NotSymmetric { asymmetry });
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let lambdas = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let mut v = eig.eigenvectors.column(src).into_owned();
        if let Some(first) = v.iter().find(|x| x.abs() > 1e-12) {
            if *first < 0.0 {
                v.neg_mut();
            }
        }
        vectors.set_column(dst, &v);
    }
    Ok(EigenSystem { lambdas, vectors })
}

mod matrix_rows {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        let n = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != c) {
            return Err(serde::de::Error::custom("ragged matrix rows"));
        }
        Ok(DMatrix::from_fn(n, c, |i, j| rows[i][j]))
    }
}

mod vector_entries {
    use nalgebra::DVector;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
        Ok(DVector::from_vec(Vec::<f64>::deserialize(d)?))
    }
}
