//! Two-logit linear classifiers on fixed features, trained with plain
//! minibatch gradient descent on softmax cross-entropy, optionally jointly
//! with an input-gradient diversity penalty across a set of copies.
//!
//! The input gradient of a linear model is the weight row of its largest
//! logit. The selection is treated as constant when differentiating.

use std::fmt;
use std::io::{Read, Write};

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::sem::Dataset;

const SHUFFLE_STREAM: u64 = 0x7A1_0001;
const INIT_STREAM: u64 = 0x7A1_1000;
/// Standard deviation of the Gaussian weight initialisation.
pub const INIT_STD: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearClassifier {
    /// One weight row per class logit.
    pub weights: [Vec<f64>; 2],
    pub bias: [f64; 2],
}

impl LinearClassifier {
    pub fn zeros(dim: usize) -> Self {
        LinearClassifier {
            weights: [vec![0.0; dim], vec![0.0; dim]],
            bias: [0.0; 2],
        }
    }

    /// Gaussian weights with std [`INIT_STD`] from the `(seed, model_idx)` stream; zero bias.
    pub fn init(dim: usize, seed: u64, model_idx: usize) -> Self {
        let mut rng = seed::rng(seed, INIT_STREAM + model_idx as u64);
        let mut draw = || -> Vec<f64> {
            (0..dim)
                .map(|_| INIT_STD * rng.sample::<f64, _>(StandardNormal))
                .collect()
        };
        let w0 = draw();
        let w1 = draw();
        LinearClassifier {
            weights: [w0, w1],
            bias: [0.0; 2],
        }
    }

    pub fn dim(&self) -> usize {
        self.weights[0].len()
    }

    pub fn logits(&self, h: &[f64]) -> [f64; 2] {
        [
            dot(&self.weights[0], h) + self.bias[0],
            dot(&self.weights[1], h) + self.bias[1],
        ]
    }

    /// Index of the largest logit; ties go to class 0.
    pub fn predict(&self, h: &[f64]) -> usize {
        top_logit(self.logits(h))
    }

    fn is_finite(&self) -> bool {
        self.bias.iter().all(|b| b.is_finite())
            && self.weights.iter().flatten().all(|w| w.is_finite())
    }
}

fn top_logit(z: [f64; 2]) -> usize {
    usize::from(z[1] > z[0])
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn class_of(label: i8) -> usize {
    usize::from(label > 0)
}

/// Gradient of the largest logit with respect to the input `h`.
pub fn input_gradient<'a>(model: &'a LinearClassifier, h: &[f64]) -> &'a [f64] {
    &model.weights[model.predict(h)]
}

/// Pairwise similarity of two input gradients.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    /// Signed dot product.
    #[default]
    RawDot,
    /// Squared dot product; penalises alignment and anti-alignment alike.
    SquaredDot,
    /// Cosine similarity; zero when either gradient vanishes.
    Cosine,
}

impl Similarity {
    pub fn value(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Similarity::RawDot => dot(a, b),
            Similarity::SquaredDot => {
                let d = dot(a, b);
                d * d
            }
            Similarity::Cosine => {
                let (na, nb) = (dot(a, a).sqrt(), dot(b, b).sqrt());
                if na == 0.0 || nb == 0.0 {
                    0.0
                } else {
                    dot(a, b) / (na * nb)
                }
            }
        }
    }

    /// Adds `scale * d value(a, b) / d a` into `out`.
    fn accumulate_grad(self, a: &[f64], b: &[f64], scale: f64, out: &mut [f64]) {
        match self {
            Similarity::RawDot => {
                for (o, bj) in out.iter_mut().zip(b) {
                    *o += scale * bj;
                }
            }
            Similarity::SquaredDot => {
                let d = 2.0 * dot(a, b);
                for (o, bj) in out.iter_mut().zip(b) {
                    *o += scale * d * bj;
                }
            }
            Similarity::Cosine => {
                let (na, nb) = (dot(a, a).sqrt(), dot(b, b).sqrt());
                if na == 0.0 || nb == 0.0 {
                    return;
                }
                let cos = dot(a, b) / (na * nb);
                for ((o, ai), bj) in out.iter_mut().zip(a).zip(b) {
                    *o += scale * (bj / (na * nb) - cos * ai / (na * na));
                }
            }
        }
    }
}

impl fmt::Display for Similarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Similarity::RawDot => "raw_dot",
            Similarity::SquaredDot => "squared_dot",
            Similarity::Cosine => "cosine",
        })
    }
}

/// Sum over batch rows and model pairs `i < j` of the similarity of the
/// models' input gradients.
pub fn diversity_loss(
    models: &[LinearClassifier],
    batch: &DMatrix<f64>,
    similarity: Similarity,
) -> f64 {
    if models.len() < 2 {
        log::warn!("diversity loss needs at least two models; returning 0");
        return 0.0;
    }
    let rows = RowMajor::from_matrix(batch);
    (0..rows.len())
        .map(|r| row_diversity(models, rows.row(r), similarity))
        .sum()
}

fn row_diversity(models: &[LinearClassifier], h: &[f64], similarity: Similarity) -> f64 {
    let grads: Vec<&[f64]> = models.iter().map(|m| input_gradient(m, h)).collect();
    let mut total = 0.0;
    for i in 0..grads.len() {
        for j in i + 1..grads.len() {
            total += similarity.value(grads[i], grads[j]);
        }
    }
    total
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub n_models: usize,
    pub diversity_weight: f64,
    pub similarity: Similarity,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub record_every_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n_models: 24,
            diversity_weight: 10.0,
            similarity: Similarity::RawDot,
            learning_rate: 0.1,
            epochs: 10,
            batch_size: 64,
            seed: 0,
            record_every_epoch: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_models == 0 {
            return Err(Error::config("trainer.n_models must be at least 1"));
        }
        if !(self.diversity_weight >= 0.0 && self.diversity_weight.is_finite()) {
            return Err(Error::config(
                "trainer.diversity_weight must be nonnegative",
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("trainer.learning_rate must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::config("trainer.epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("trainer.batch_size must be at least 1"));
        }
        Ok(())
    }
}

/// Metrics for one model after one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub model_idx: usize,
    pub id_accuracy: f64,
    pub ood_accuracy: f64,
    pub id_logistic_risk: f64,
    pub ood_logistic_risk: f64,
    /// Mean cross-entropy of this model on the training set.
    pub classification_loss: f64,
    /// Row-averaged pairwise similarity of the whole set on the training set.
    pub diversity_loss: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Erm,
    Diverse,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Erm => "erm",
            Method::Diverse => "diverse",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainRun {
    pub method: Method,
    pub seed: u64,
    pub records: Vec<EpochRecord>,
    pub models: Vec<LinearClassifier>,
}

impl TrainRun {
    pub fn run_id(&self) -> String {
        run_id(self.method, self.seed)
    }

    /// Records of the last recorded epoch.
    pub fn final_records(&self) -> Vec<&EpochRecord> {
        let last = self.records.iter().map(|r| r.epoch).max().unwrap_or(0);
        self.records.iter().filter(|r| r.epoch == last).collect()
    }
}

pub fn run_id(method: Method, seed: u64) -> String {
    format!("{method}-{seed}")
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub logistic_risk: f64,
}

/// Row-major copy of a feature matrix for per-row access.
pub(crate) struct RowMajor {
    data: Vec<f64>,
    dim: usize,
}

impl RowMajor {
    pub(crate) fn from_matrix(m: &DMatrix<f64>) -> Self {
        let (n, d) = m.shape();
        let mut data = Vec::with_capacity(n * d);
        for r in 0..n {
            data.extend(m.row(r).iter());
        }
        RowMajor { data, dim: d }
    }

    pub(crate) fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    pub(crate) fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.dim..(r + 1) * self.dim]
    }
}

/// Two-class cross-entropy `logsumexp(z) - z_y`, computed stably.
fn cross_entropy(z: [f64; 2], class: usize) -> f64 {
    let m = z[0].max(z[1]);
    m + ((z[0] - m).exp() + (z[1] - m).exp()).ln() - z[class]
}

fn softmax(z: [f64; 2]) -> [f64; 2] {
    let m = z[0].max(z[1]);
    let e = [(z[0] - m).exp(), (z[1] - m).exp()];
    let s = e[0] + e[1];
    [e[0] / s, e[1] / s]
}

fn evaluate_rows(model: &LinearClassifier, rows: &RowMajor, labels: &[i8]) -> Evaluation {
    let n = rows.len();
    let mut correct = 0usize;
    let mut loss = 0.0;
    for r in 0..n {
        let z = model.logits(rows.row(r));
        let class = class_of(labels[r]);
        if top_logit(z) == class {
            correct += 1;
        }
        loss += cross_entropy(z, class);
    }
    Evaluation {
        accuracy: correct as f64 / n as f64,
        logistic_risk: loss / n as f64,
    }
}

/// Accuracy (argmax logit vs. label) and mean cross-entropy on `dataset`.
pub fn evaluate(model: &LinearClassifier, dataset: &Dataset) -> Evaluation {
    evaluate_rows(
        model,
        &RowMajor::from_matrix(&dataset.features),
        &dataset.label,
    )
}

/// Value and gradient of one minibatch objective.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchGradient {
    /// Sum over models of mean cross-entropy.
    pub classification: f64,
    /// Row-averaged pairwise similarity (before weighting).
    pub diversity: f64,
    /// `classification + weight * diversity`.
    pub total: f64,
    /// Gradients shaped like the models.
    pub grads: Vec<LinearClassifier>,
}

fn batch_gradient_rows(
    models: &[LinearClassifier],
    rows: &RowMajor,
    labels: &[i8],
    batch: &[usize],
    similarity: Similarity,
    weight: f64,
) -> BatchGradient {
    let dim = models[0].dim();
    let m = batch.len() as f64;
    let mut grads: Vec<LinearClassifier> = models
        .iter()
        .map(|_| LinearClassifier::zeros(dim))
        .collect();
    let mut classification = 0.0;
    for (model, grad) in models.iter().zip(grads.iter_mut()) {
        let mut loss = 0.0;
        for &r in batch {
            let h = rows.row(r);
            let class = class_of(labels[r]);
            let z = model.logits(h);
            loss += cross_entropy(z, class);
            let p = softmax(z);
            for k in 0..2 {
                let g = (p[k] - if k == class { 1.0 } else { 0.0 }) / m;
                grad.bias[k] += g;
                for (w, x) in grad.weights[k].iter_mut().zip(h) {
                    *w += g * x;
                }
            }
        }
        classification += loss / m;
    }

    let mut diversity = 0.0;
    if weight != 0.0 && models.len() >= 2 {
        let scale = weight / m;
        let mut selected = vec![0usize; models.len()];
        for &r in batch {
            let h = rows.row(r);
            for (s, model) in selected.iter_mut().zip(models) {
                *s = model.predict(h);
            }
            for i in 0..models.len() {
                let gi = &models[i].weights[selected[i]];
                for j in 0..models.len() {
                    if i == j {
                        continue;
                    }
                    let gj = &models[j].weights[selected[j]];
                    if i < j {
                        diversity += similarity.value(gi, gj);
                    }
                    similarity.accumulate_grad(gi, gj, scale, &mut grads[i].weights[selected[i]]);
                }
            }
        }
        diversity /= m;
    }

    BatchGradient {
        classification,
        diversity,
        total: classification + weight * diversity,
        grads,
    }
}

/// Objective and analytic gradient on the rows `batch` of `features`:
/// `sum_i CE_i + weight * (1/|batch|) sum_rows sum_{i<j} sim(grad_i, grad_j)`.
pub fn batch_gradient(
    models: &[LinearClassifier],
    features: &DMatrix<f64>,
    labels: &[i8],
    similarity: Similarity,
    weight: f64,
) -> Result<BatchGradient> {
    if models.is_empty() {
        return Err(Error::config("batch gradient needs at least one model"));
    }
    if features.nrows() != labels.len() || features.nrows() == 0 {
        return Err(Error::config(
            "features and labels must be nonempty and aligned",
        ));
    }
    if models.iter().any(|m| m.dim() != features.ncols()) {
        return Err(Error::config("model width does not match feature width"));
    }
    let rows = RowMajor::from_matrix(features);
    let batch: Vec<usize> = (0..rows.len()).collect();
    Ok(batch_gradient_rows(
        models, &rows, labels, &batch, similarity, weight,
    ))
}

/// Full-dataset objective `(classification, diversity)` for a model set.
pub fn objective(
    models: &[LinearClassifier],
    dataset: &Dataset,
    similarity: Similarity,
) -> (f64, f64) {
    let rows = RowMajor::from_matrix(&dataset.features);
    let batch: Vec<usize> = (0..rows.len()).collect();
    let g = batch_gradient_rows(models, &rows, &dataset.label, &batch, similarity, 1.0);
    (g.classification, g.diversity)
}

fn check_widths(train: &Dataset, eval_id: &Dataset, eval_ood: &Dataset) -> Result<()> {
    if train.is_empty() || eval_id.is_empty() || eval_ood.is_empty() {
        return Err(Error::config(
            "training and evaluation sets must be nonempty",
        ));
    }
    if eval_id.width() != train.width() || eval_ood.width() != train.width() {
        return Err(Error::config(format!(
            "feature widths differ: train {}, eval_id {}, eval_ood {}",
            train.width(),
            eval_id.width(),
            eval_ood.width()
        )));
    }
    Ok(())
}

fn run(
    method: Method,
    train: &Dataset,
    eval_id: &Dataset,
    eval_ood: &Dataset,
    config: &TrainConfig,
    init_indices: &[usize],
) -> Result<TrainRun> {
    config.validate()?;
    check_widths(train, eval_id, eval_ood)?;
    let dim = train.width();
    let weight = match method {
        Method::Erm => 0.0,
        Method::Diverse => config.diversity_weight,
    };
    let rows = RowMajor::from_matrix(&train.features);
    let id_rows = RowMajor::from_matrix(&eval_id.features);
    let ood_rows = RowMajor::from_matrix(&eval_ood.features);
    let mut models: Vec<LinearClassifier> = init_indices
        .iter()
        .map(|&i| LinearClassifier::init(dim, config.seed, i))
        .collect();
    let mut order: Vec<usize> = (0..rows.len()).collect();
    let mut shuffle = seed::rng(config.seed, SHUFFLE_STREAM);
    let mut records = Vec::new();
    let name = run_id(method, config.seed);

    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle);
        for batch in order.chunks(config.batch_size) {
            let g = batch_gradient_rows(
                &models,
                &rows,
                &train.label,
                batch,
                config.similarity,
                weight,
            );
            if !g.total.is_finite() {
                return Err(Error::TrainingDiverged { run: name, epoch });
            }
            let lr = config.learning_rate;
            for (model, grad) in models.iter_mut().zip(&g.grads) {
                for k in 0..2 {
                    model.bias[k] -= lr * grad.bias[k];
                    for (w, dw) in model.weights[k].iter_mut().zip(&grad.weights[k]) {
                        *w -= lr * dw;
                    }
                }
            }
        }
        if models.iter().any(|m| !m.is_finite()) {
            return Err(Error::TrainingDiverged { run: name, epoch });
        }

        if config.record_every_epoch || epoch == config.epochs {
            let all: Vec<usize> = (0..rows.len()).collect();
            let full = batch_gradient_rows(
                &models,
                &rows,
                &train.label,
                &all,
                config.similarity,
                weight.max(1.0),
            );
            let diversity = if models.len() >= 2 {
                full.diversity
            } else {
                0.0
            };
            for (idx, model) in models.iter().enumerate() {
                let id = evaluate_rows(model, &id_rows, &eval_id.label);
                let ood = evaluate_rows(model, &ood_rows, &eval_ood.label);
                let train_eval = evaluate_rows(model, &rows, &train.label);
                if !train_eval.logistic_risk.is_finite() {
                    return Err(Error::TrainingDiverged { run: name, epoch });
                }
                records.push(EpochRecord {
                    epoch,
                    model_idx: idx,
                    id_accuracy: id.accuracy,
                    ood_accuracy: ood.accuracy,
                    id_logistic_risk: id.logistic_risk,
                    ood_logistic_risk: ood.logistic_risk,
                    classification_loss: train_eval.logistic_risk,
                    diversity_loss: diversity,
                });
            }
        }
    }
    Ok(TrainRun {
        method,
        seed: config.seed,
        records,
        models,
    })
}

/// Standard ERM: one model, initialised from stream `(config.seed, 0)`.
/// `config.n_models` and `config.diversity_weight` are ignored.
pub fn train_erm(
    train: &Dataset,
    eval_id: &Dataset,
    eval_ood: &Dataset,
    config: &TrainConfig,
) -> Result<TrainRun> {
    train_erm_from(train, eval_id, eval_ood, config, 0)
}

/// ERM from the initialisation stream of model `init_index`; this is the
/// trajectory model `init_index` of [`train_diverse`] follows when the
/// diversity weight is zero.
pub fn train_erm_from(
    train: &Dataset,
    eval_id: &Dataset,
    eval_ood: &Dataset,
    config: &TrainConfig,
    init_index: usize,
) -> Result<TrainRun> {
    let mut run = run(Method::Erm, train, eval_id, eval_ood, config, &[init_index])?;
    for r in &mut run.records {
        r.model_idx = init_index;
    }
    Ok(run)
}

/// Joint training of `config.n_models` copies on the summed cross-entropies
/// plus `diversity_weight` times the row-averaged diversity loss.
pub fn train_diverse(
    train: &Dataset,
    eval_id: &Dataset,
    eval_ood: &Dataset,
    config: &TrainConfig,
) -> Result<TrainRun> {
    if config.n_models < 2 {
        return Err(Error::config("diverse training needs n_models >= 2"));
    }
    let indices: Vec<usize> = (0..config.n_models).collect();
    run(Method::Diverse, train, eval_id, eval_ood, config, &indices)
}

/// One row of the trainer CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordRow {
    pub method: String,
    pub seed: u64,
    pub model_idx: usize,
    pub epoch: usize,
    pub id_acc: f64,
    pub ood_acc: f64,
    pub id_risk: f64,
    pub ood_risk: f64,
}

pub const RECORD_HEADER: [&str; 8] = [
    "method",
    "seed",
    "model_idx",
    "epoch",
    "id_acc",
    "ood_acc",
    "id_risk",
    "ood_risk",
];

impl RecordRow {
    pub fn from_record(method: Method, seed: u64, r: &EpochRecord) -> Self {
        RecordRow {
            method: method.to_string(),
            seed,
            model_idx: r.model_idx,
            epoch: r.epoch,
            id_acc: r.id_accuracy,
            ood_acc: r.ood_accuracy,
            id_risk: r.id_logistic_risk,
            ood_risk: r.ood_logistic_risk,
        }
    }
}

/// Writes `method,seed,model_idx,epoch,id_acc,ood_acc,id_risk,ood_risk`.
pub fn write_records_csv<W: Write>(runs: &[TrainRun], out: W) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(out);
    wtr.write_record(RECORD_HEADER)?;
    for run in runs {
        for r in &run.records {
            wtr.serialize(RecordRow::from_record(run.method, run.seed, r))?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Parses the trainer CSV, reporting the 1-based line of the first bad row.
pub fn read_records_csv<R: Read>(input: R) -> Result<Vec<RecordRow>> {
    let mut rdr = csv::Reader::from_reader(input);
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != RECORD_HEADER {
        return Err(Error::Schema {
            row: 1,
            message: format!(
                "expected header `{}`, found `{}`",
                RECORD_HEADER.join(","),
                headers.iter().collect::<Vec<_>>().join(",")
            ),
        });
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.deserialize::<RecordRow>().enumerate() {
        let line = i + 2;
        let row = rec.map_err(|e| Error::Schema {
            row: line,
            message: e.to_string(),
        })?;
        for (name, v) in [("id_acc", row.id_acc), ("ood_acc", row.ood_acc)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Schema {
                    row: line,
                    message: format!("{name} = {v} is outside [0, 1]"),
                });
            }
        }
        if row.epoch == 0 {
            return Err(Error::Schema {
                row: line,
                message: "epoch must be at least 1".into(),
            });
        }
        rows.push(row);
    }
    Ok(rows)
}
