//! ID/OOD scatter analysis: pattern classification, fixed-epoch selection
//! bias, training-domain model selection and the shift-magnitude sweep.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::sem::{sample_dataset, Dataset, Environment, TaskSpec};
use crate::trainer::{self, Method, RecordRow, TrainConfig, TrainRun};

const EVAL_ID_STREAM: u64 = 0x1A5_0001;
const EVAL_OOD_STREAM: u64 = 0x1A5_0002;
const TRAIN_STREAM: u64 = 0x1A5_0003;

/// One trained model at one epoch, placed in the ID/OOD plane.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelPoint {
    pub id_metric: f64,
    pub ood_metric: f64,
    pub run_id: String,
    pub method: String,
    pub seed: u64,
    pub model_idx: usize,
    pub epoch: usize,
}

impl ModelPoint {
    pub fn from_row(row: &RecordRow) -> Self {
        ModelPoint {
            id_metric: row.id_acc,
            ood_metric: row.ood_acc,
            run_id: format!("{}-{}", row.method, row.seed),
            method: row.method.clone(),
            seed: row.seed,
            model_idx: row.model_idx,
            epoch: row.epoch,
        }
    }

    /// A model trajectory: one ERM seed, or one member of a diverse set.
    pub fn trajectory(&self) -> (&str, usize) {
        (&self.run_id, self.model_idx)
    }
}

/// Points for every record of every run.
pub fn points_from_runs(runs: &[TrainRun]) -> Vec<ModelPoint> {
    runs.iter()
        .flat_map(|run| {
            run.records.iter().map(move |r| {
                ModelPoint::from_row(&RecordRow::from_record(run.method, run.seed, r))
            })
        })
        .collect()
}

pub fn points_from_rows(rows: &[RecordRow]) -> Vec<ModelPoint> {
    rows.iter().map(ModelPoint::from_row).collect()
}

/// Rejects out-of-range metrics and duplicate `(run_id, epoch, model_idx)`.
pub fn check_points(points: &[ModelPoint]) -> Result<()> {
    let mut seen = HashMap::new();
    for (i, p) in points.iter().enumerate() {
        for (name, v) in [("id_metric", p.id_metric), ("ood_metric", p.ood_metric)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Schema {
                    row: i + 1,
                    message: format!("{name} = {v} is outside [0, 1]"),
                });
            }
        }
        if let Some(first) = seen.insert((p.run_id.as_str(), p.epoch, p.model_idx), i) {
            return Err(Error::Schema {
                row: i + 1,
                message: format!(
                    "duplicate point ({}, epoch {}, model {}) first seen at point {}",
                    p.run_id,
                    p.epoch,
                    p.model_idx,
                    first + 1
                ),
            });
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Pattern {
    Positive,
    Vertical,
    Horizontal,
    Negative,
    NoTrend,
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Cutoffs of the pattern decision rule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Thresholds {
    /// ID spread below which a cloud is vertical.
    pub eps_x: f64,
    /// OOD spread below which a cloud can be horizontal.
    pub eps_y: f64,
    /// Allowed margin above chance for a horizontal cloud.
    pub delta: f64,
    pub chance: f64,
    /// |r| needed for a line pattern.
    pub r_cut: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            eps_x: 0.01,
            eps_y: 0.01,
            delta: 0.05,
            chance: 0.5,
            r_cut: 0.5,
        }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.eps_x, self.eps_y, self.delta]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0)
            && (0.0..=1.0).contains(&self.chance)
            && (0.0..=1.0).contains(&self.r_cut);
        if ok {
            Ok(())
        } else {
            Err(Error::config(
                "landscape thresholds: eps_x, eps_y, delta must be nonnegative; chance and r_cut in [0, 1]",
            ))
        }
    }
}

/// A pattern together with the statistics that decided it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatternLabel {
    pub pattern: Pattern,
    pub pearson_r: f64,
    /// Population standard deviation of the ID metric.
    pub id_spread: f64,
    /// Population standard deviation of the OOD metric.
    pub ood_spread: f64,
    pub mean_id: f64,
    pub mean_ood: f64,
    pub n_points: usize,
}

/// Spreads below this are rounding noise of a constant column.
const FLAT: f64 = 1e-12;

/// Mean, population std and Pearson r; r is 0 when either std vanishes.
/// Pairs are sorted first so the result does not depend on input order.
fn moments(pairs: &mut [(f64, f64)]) -> (f64, f64, f64, f64, f64) {
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let n = pairs.len() as f64;
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for &(x, y) in pairs.iter() {
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
        sxy += (x - mx) * (y - my);
    }
    let (sx, sy) = ((sxx / n).sqrt(), (syy / n).sqrt());
    let r = if sx > FLAT && sy > FLAT {
        (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)
    } else {
        0.0
    };
    (mx, my, sx, sy, r)
}

/// Horizontal if the OOD spread is below `eps_y` and mean OOD is within
/// `delta` of chance; otherwise Vertical if the ID spread is below `eps_x`;
/// otherwise Positive / Negative when `|r| >= r_cut`; otherwise NoTrend.
pub fn classify_pattern(points: &[ModelPoint], thresholds: &Thresholds) -> Result<PatternLabel> {
    if points.len() < 3 {
        return Err(Error::config(format!(
            "pattern classification needs at least 3 points, got {}",
            points.len()
        )));
    }
    let mut pairs: Vec<(f64, f64)> = points.iter().map(|p| (p.id_metric, p.ood_metric)).collect();
    let (mean_id, mean_ood, sx, sy, r) = moments(&mut pairs);
    let t = thresholds;
    let pattern = if sy < t.eps_y && mean_ood <= t.chance + t.delta {
        Pattern::Horizontal
    } else if sx < t.eps_x {
        Pattern::Vertical
    } else if r >= t.r_cut {
        Pattern::Positive
    } else if r <= -t.r_cut {
        Pattern::Negative
    } else {
        Pattern::NoTrend
    };
    Ok(PatternLabel {
        pattern,
        pearson_r: r,
        id_spread: sx,
        ood_spread: sy,
        mean_id,
        mean_ood,
        n_points: points.len(),
    })
}

/// Points recorded at `epoch`, in input order.
pub fn filter_fixed_epoch(points: &[ModelPoint], epoch: usize) -> Vec<ModelPoint> {
    let kept: Vec<ModelPoint> = points
        .iter()
        .filter(|p| p.epoch == epoch)
        .cloned()
        .collect();
    if kept.is_empty() {
        log::warn!("no points recorded at epoch {epoch}");
    }
    kept
}

fn better(a: &ModelPoint, b: &ModelPoint, key: fn(&ModelPoint) -> f64) -> bool {
    match key(a).total_cmp(&key(b)) {
        Ordering::Greater => true,
        Ordering::Less => false,
        Ordering::Equal => a.epoch < b.epoch,
    }
}

fn select_by(points: &[ModelPoint], key: fn(&ModelPoint) -> f64) -> Vec<ModelPoint> {
    let mut order: Vec<(&str, usize)> = Vec::new();
    let mut best: HashMap<(&str, usize), &ModelPoint> = HashMap::new();
    for p in points {
        match best.get(&p.trajectory()) {
            None => {
                order.push(p.trajectory());
                best.insert(p.trajectory(), p);
            }
            Some(cur) if better(p, cur, key) => {
                best.insert(p.trajectory(), p);
            }
            Some(_) => {}
        }
    }
    order.iter().map(|k| best[k].clone()).collect()
}

/// Training-domain validation: per trajectory, the point of highest ID
/// metric (ties go to the earliest epoch). Output follows first appearance.
pub fn select_max_id(points: &[ModelPoint]) -> Vec<ModelPoint> {
    select_by(points, |p| p.id_metric)
}

/// Per trajectory, the point of highest OOD metric.
pub fn select_max_ood(points: &[ModelPoint]) -> Vec<ModelPoint> {
    select_by(points, |p| p.ood_metric)
}

/// Best OOD metric in the cloud minus the OOD metric of the cloud's ID-best
/// point (ties to the earliest epoch, then input order).
pub fn ood_regret(points: &[ModelPoint]) -> f64 {
    let Some(first) = points.first() else {
        return 0.0;
    };
    let chosen = points.iter().fold(first, |cur, p| {
        if better(p, cur, |q| q.id_metric) {
            p
        } else {
            cur
        }
    });
    let best = points
        .iter()
        .map(|p| p.ood_metric)
        .fold(f64::NEG_INFINITY, f64::max);
    (best - chosen.ood_metric).max(0.0)
}

/// How the fixed-epoch subsample is drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionOptions {
    pub fixed_epoch: usize,
    /// Restrict the filtered subsample to one method tag (e.g. only ERM
    /// seeds, pooled); `None` keeps every method.
    pub filter_method: Option<String>,
}

impl Default for SelectionOptions {
    fn default() -> Self {
        SelectionOptions {
            fixed_epoch: 10,
            filter_method: Some(Method::Erm.to_string()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub pattern_full: PatternLabel,
    pub pattern_filtered: PatternLabel,
    pub fixed_epoch: usize,
    pub filter_method: Option<String>,
    pub selected_by_id: Vec<ModelPoint>,
    pub selected_by_ood: Vec<ModelPoint>,
    pub ood_regret: f64,
}

/// Pattern on the whole cloud versus on the fixed-epoch pooled subsample,
/// and the OOD cost of selecting by ID.
pub fn selection_bias_report(
    points: &[ModelPoint],
    options: &SelectionOptions,
    thresholds: &Thresholds,
) -> Result<SelectionReport> {
    check_points(points)?;
    let mut epochs: Vec<usize> = points.iter().map(|p| p.epoch).collect();
    epochs.sort_unstable();
    epochs.dedup();
    let mut runs: Vec<(&str, usize)> = points.iter().map(|p| p.trajectory()).collect();
    runs.sort_unstable();
    runs.dedup();
    if epochs.len() < 2 || runs.len() < 2 {
        return Err(Error::config(format!(
            "selection bias needs at least 2 epochs and 2 runs, got {} and {}",
            epochs.len(),
            runs.len()
        )));
    }
    let mut filtered = filter_fixed_epoch(points, options.fixed_epoch);
    if let Some(method) = &options.filter_method {
        filtered.retain(|p| &p.method == method);
    }
    Ok(SelectionReport {
        pattern_full: classify_pattern(points, thresholds)?,
        pattern_filtered: classify_pattern(&filtered, thresholds)?,
        fixed_epoch: options.fixed_epoch,
        filter_method: options.filter_method.clone(),
        selected_by_id: select_max_id(points),
        selected_by_ood: select_max_ood(points),
        ood_regret: ood_regret(points),
    })
}

/// Sample sizes for generated experiments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentPlan {
    /// Training rows drawn per run from the ID environment.
    pub n_train: usize,
    /// Rows in each of the shared ID and OOD evaluation sets.
    pub n_eval: usize,
    /// Number of ERM seeds.
    pub n_seeds: usize,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        ExperimentPlan {
            n_train: 1000,
            n_eval: 20_000,
            n_seeds: 10,
        }
    }
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_eval == 0 || self.n_seeds == 0 {
            return Err(Error::config(
                "n_train, n_eval and n_seeds must be positive",
            ));
        }
        Ok(())
    }
}

/// Shared evaluation sets for an (ID, OOD) pair, drawn from `seed`.
pub fn eval_sets(
    task: &TaskSpec,
    env_id: &Environment,
    env_ood: &Environment,
    n_eval: usize,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    Ok((
        sample_dataset(task, env_id, n_eval, seed::derive(seed, EVAL_ID_STREAM))?,
        sample_dataset(task, env_ood, n_eval, seed::derive(seed, EVAL_OOD_STREAM))?,
    ))
}

/// Training sample of the run with seed `run_seed`.
pub fn training_set(
    task: &TaskSpec,
    env_id: &Environment,
    n: usize,
    run_seed: u64,
) -> Result<Dataset> {
    sample_dataset(task, env_id, n, seed::derive(run_seed, TRAIN_STREAM))
}

/// `plan.n_seeds` ERM runs with seeds `config.seed + s`, each on its own
/// training sample, evaluated on shared sets. Runs execute in parallel;
/// the result is ordered by seed.
pub fn erm_runs(
    task: &TaskSpec,
    env_id: &Environment,
    env_ood: &Environment,
    config: &TrainConfig,
    plan: &ExperimentPlan,
) -> Result<Vec<TrainRun>> {
    plan.validate()?;
    let (eval_id, eval_ood) = eval_sets(task, env_id, env_ood, plan.n_eval, config.seed)?;
    (0..plan.n_seeds as u64)
        .into_par_iter()
        .map(|s| {
            let cfg = TrainConfig {
                seed: config.seed.wrapping_add(s),
                ..config.clone()
            };
            let train = training_set(task, env_id, plan.n_train, cfg.seed)?;
            trainer::train_erm(&train, &eval_id, &eval_ood, &cfg)
        })
        .collect()
}

/// One diverse set trained on the sample of seed `config.seed`.
pub fn diverse_run(
    task: &TaskSpec,
    env_id: &Environment,
    env_ood: &Environment,
    config: &TrainConfig,
    plan: &ExperimentPlan,
) -> Result<TrainRun> {
    plan.validate()?;
    let (eval_id, eval_ood) = eval_sets(task, env_id, env_ood, plan.n_eval, config.seed)?;
    let train = training_set(task, env_id, plan.n_train, config.seed)?;
    trainer::train_diverse(&train, &eval_id, &eval_ood, config)
}

/// One row of a shift sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftStep {
    pub step: usize,
    pub t: f64,
    pub label: PatternLabel,
    /// The classified cloud; not serialized.
    #[serde(skip)]
    pub points: Vec<ModelPoint>,
}

/// For each OOD environment of the family, trains ERM seeds with every
/// epoch recorded and classifies the resulting cloud.
pub fn shift_sweep_report(
    task: &TaskSpec,
    env_id: &Environment,
    family: &[Environment],
    config: &TrainConfig,
    plan: &ExperimentPlan,
    thresholds: &Thresholds,
) -> Result<Vec<ShiftStep>> {
    if family.len() < 2 {
        return Err(Error::config(
            "a shift family needs at least 2 environments",
        ));
    }
    thresholds.validate()?;
    let cfg = TrainConfig {
        record_every_epoch: true,
        ..config.clone()
    };
    let steps = family.len();
    family
        .par_iter()
        .enumerate()
        .map(|(k, env)| {
            let runs = erm_runs(task, env_id, env, &cfg, plan)?;
            let points = points_from_runs(&runs);
            let label = classify_pattern(&points, thresholds)?;
            Ok(ShiftStep {
                step: k,
                t: crate::sem::shift_parameter(k, steps),
                label,
                points,
            })
        })
        .collect()
}

pub fn write_shift_csv<W: Write>(steps: &[ShiftStep], out: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(["t", "pattern", "pearson_r", "mean_ood"])?;
    for s in steps {
        wtr.write_record([
            s.t.to_string(),
            s.label.pattern.to_string(),
            s.label.pearson_r.to_string(),
            s.label.mean_ood.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Scatter CSV row: a point plus its selection flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatterRow {
    pub run_id: String,
    pub method: String,
    pub seed: u64,
    pub model_idx: usize,
    pub epoch: usize,
    pub id_metric: f64,
    pub ood_metric: f64,
    pub selected_by_id: bool,
    pub selected_by_ood: bool,
}

impl ScatterRow {
    pub fn point(&self) -> ModelPoint {
        ModelPoint {
            id_metric: self.id_metric,
            ood_metric: self.ood_metric,
            run_id: self.run_id.clone(),
            method: self.method.clone(),
            seed: self.seed,
            model_idx: self.model_idx,
            epoch: self.epoch,
        }
    }
}

fn same_point(a: &ModelPoint, b: &ModelPoint) -> bool {
    a.run_id == b.run_id && a.model_idx == b.model_idx && a.epoch == b.epoch
}

pub fn scatter_rows(points: &[ModelPoint], report: &SelectionReport) -> Vec<ScatterRow> {
    points
        .iter()
        .map(|p| ScatterRow {
            run_id: p.run_id.clone(),
            method: p.method.clone(),
            seed: p.seed,
            model_idx: p.model_idx,
            epoch: p.epoch,
            id_metric: p.id_metric,
            ood_metric: p.ood_metric,
            selected_by_id: report.selected_by_id.iter().any(|q| same_point(p, q)),
            selected_by_ood: report.selected_by_ood.iter().any(|q| same_point(p, q)),
        })
        .collect()
}

pub fn write_scatter_csv<W: Write>(rows: &[ScatterRow], out: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_scatter_csv<R: Read>(input: R) -> Result<Vec<ScatterRow>> {
    let mut rdr = csv::Reader::from_reader(input);
    rdr.deserialize()
        .enumerate()
        .map(|(i, r)| {
            r.map_err(|e| Error::Schema {
                row: i + 2,
                message: e.to_string(),
            })
        })
        .collect()
}
