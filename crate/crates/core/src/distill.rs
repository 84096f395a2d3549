//! Distilling a frozen reaction-trained teacher into a property-prediction
//! student.
//!
//! The student encoder feeds a two-layer head. Training minimizes
//! `beta * L_sup + (1 - beta) * L_kd`, where `L_kd` is an InfoNCE loss that
//! asks each student embedding to pick out its own molecule's projected
//! teacher embedding among the other teacher embeddings in the batch.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chem::MolGraph;
use crate::encoder::{
    encode_inputs, forward, Architecture, EncoderError, EncoderParams, EncoderSpec, GraphBatch, GraphInput,
};
use crate::evalkit::{auc_roc, mae, rmse, EvalError};
use crate::featurize::FeatureVocab;
use crate::ndiff::{adam_step, AdamConfig, AdamState, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("beta {0} is outside [0, 1]")]
    BetaOutOfRange(f64),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: {0:?} vs {1:?}")]
    DimMismatch((usize, usize), (usize, usize)),
    #[error("label {0} is not valid for this task")]
    LabelOutOfDomain(f64),
    #[error("split is empty: {0}")]
    EmptySplit(&'static str),
    #[error("index {0} is outside the dataset")]
    BadIndex(usize),
    #[error("bad parameter layout: {0}")]
    Layout(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Classification,
    Regression,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Classification => "classification",
            TaskKind::Regression => "regression",
        })
    }
}

impl FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "classification" | "binary" => Ok(TaskKind::Classification),
            "regression" => Ok(TaskKind::Regression),
            _ => Err(format!("unknown task kind {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    /// InfoNCE temperature.
    pub tau: f64,
    /// Weight of the supervised term.
    pub beta: f64,
    pub task: TaskKind,
    pub arch: Architecture,
    pub layers: usize,
    pub k_hops: usize,
    pub hidden_dim: usize,
    /// Student embedding width, also the projection output width.
    pub student_dim: usize,
    pub head_hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Drops the distillation term entirely.
    pub no_kd: bool,
    /// Starts the student from a copy of the teacher weights.
    pub init_from_teacher: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            tau: 0.1,
            beta: 0.5,
            task: TaskKind::Classification,
            arch: Architecture::Tag,
            layers: 2,
            k_hops: 3,
            hidden_dim: 64,
            student_dim: 64,
            head_hidden: 64,
            epochs: 50,
            batch_size: 32,
            adam: AdamConfig::default(),
            seed: 0,
            no_kd: false,
            init_from_teacher: false,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<(), DistillError> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(DistillError::BetaOutOfRange(self.beta));
        }
        let bad = |m: &str| Err(DistillError::InvalidConfig(m.to_string()));
        if !(self.tau > 0.0) {
            return bad("tau must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if self.layers == 0 || self.hidden_dim == 0 || self.student_dim == 0 || self.head_hidden == 0 {
            return bad("layers and dimensions must be positive");
        }
        if !(self.adam.lr > 0.0) {
            return bad("learning rate must be positive");
        }
        Ok(())
    }

    fn uses_kd(&self) -> bool {
        !self.no_kd && self.beta < 1.0
    }
}

/// `-1/B sum_i log softmax_j(cos(s_i, t_j) / tau)[i]`, computed with a
/// row-wise log-sum-exp. Rows of zeros have cosine 0 with everything.
pub fn infonce_kd_loss<'t>(student: Var<'t>, teacher: Var<'t>, tau: f64) -> Result<Var<'t>, DistillError> {
    if student.shape() != teacher.shape() {
        return Err(DistillError::DimMismatch(student.shape(), teacher.shape()));
    }
    let b = student.shape().0;
    let tape = student.tape();
    let logits = student
        .row_normalize()
        .matmul(teacher.row_normalize().transpose())?
        .scale(1.0 / tau);
    let positive = logits.mul(tape.constant_owned(Tensor::identity(b)))?.sum_cols();
    Ok(logits.logsumexp_rows().sub(positive)?.sum().scale(1.0 / b as f64))
}

/// Masked mean of BCE-with-logits (classification) or squared error
/// (regression). `mask` marks observed labels with 1.
pub fn supervised_loss<'t>(
    predictions: Var<'t>,
    labels: &Tensor,
    mask: &Tensor,
    task: TaskKind,
) -> Result<Var<'t>, DistillError> {
    let shape = predictions.shape();
    if labels.shape() != shape || mask.shape() != shape {
        return Err(DistillError::DimMismatch(shape, labels.shape()));
    }
    for (&l, &m) in labels.data().iter().zip(mask.data()) {
        if m != 0.0 && (!l.is_finite() || (task == TaskKind::Classification && l != 0.0 && l != 1.0)) {
            return Err(DistillError::LabelOutOfDomain(l));
        }
    }
    let tape = predictions.tape();
    let observed: f64 = mask.data().iter().sum();
    let masked_labels = {
        let mut t = labels.clone();
        t.data_mut().iter_mut().zip(mask.data()).for_each(|(v, &m)| *v *= m);
        tape.constant_owned(t)
    };
    let per_entry = match task {
        TaskKind::Classification => predictions.softplus().sub(predictions.mul(masked_labels)?)?,
        TaskKind::Regression => {
            let diff = predictions.sub(masked_labels)?;
            diff.mul(diff)?
        }
    };
    let total = per_entry.mul(tape.constant(mask))?.sum();
    Ok(if observed > 0.0 {
        total.scale(1.0 / observed)
    } else {
        total
    })
}

/// `beta * sup + (1 - beta) * kd`.
pub fn combined_loss<'t>(sup: Var<'t>, kd: Var<'t>, beta: f64) -> Result<Var<'t>, DistillError> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(DistillError::BetaOutOfRange(beta));
    }
    Ok(sup.scale(beta).add(kd.scale(1.0 - beta))?)
}

pub fn combine_values(sup: f64, kd: f64, beta: f64) -> Result<f64, DistillError> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(DistillError::BetaOutOfRange(beta));
    }
    Ok(beta * sup + (1.0 - beta) * kd)
}

/// Teacher-to-student map: one linear layer followed by relu.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherProjection {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl TeacherProjection {
    pub fn init<R: rand::Rng>(teacher_dim: usize, student_dim: usize, rng: &mut R) -> Self {
        TeacherProjection {
            weight: Tensor::uniform_init(teacher_dim, student_dim, teacher_dim, rng),
            bias: Tensor::uniform_init(1, student_dim, teacher_dim, rng),
        }
    }

    pub fn apply<'t>(teacher: Var<'t>, weight: Var<'t>, bias: Var<'t>) -> Result<Var<'t>, TensorError> {
        Ok(teacher.matmul(weight)?.add_row(bias)?.relu())
    }
}

/// Two fully connected layers with a relu between them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl Head {
    pub fn init<R: rand::Rng>(input: usize, hidden: usize, outputs: usize, rng: &mut R) -> Self {
        Head {
            w1: Tensor::uniform_init(input, hidden, input, rng),
            b1: Tensor::uniform_init(1, hidden, input, rng),
            w2: Tensor::uniform_init(hidden, outputs, hidden, rng),
            b2: Tensor::uniform_init(1, outputs, hidden, rng),
        }
    }

    fn apply<'t>(emb: Var<'t>, p: &[Var<'t>]) -> Result<Var<'t>, TensorError> {
        emb.matmul(p[0])?.add_row(p[1])?.relu().matmul(p[2])?.add_row(p[3])
    }
}

/// Molecules with one or more labels each; `None` marks a missing label.
#[derive(Debug, Clone, PartialEq)]
pub struct PropertyDataset {
    pub graphs: Vec<MolGraph>,
    pub labels: Vec<Vec<Option<f64>>>,
    pub task_names: Vec<String>,
}

impl PropertyDataset {
    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn task_count(&self) -> usize {
        self.task_names.len()
    }

    pub fn validate(&self, task: TaskKind) -> Result<(), DistillError> {
        if self.labels.len() != self.graphs.len() {
            return Err(DistillError::Layout("one label row per molecule".into()));
        }
        for row in &self.labels {
            if row.len() != self.task_names.len() {
                return Err(DistillError::Layout("label row width".into()));
            }
            for &l in row.iter().flatten() {
                if !l.is_finite() || (task == TaskKind::Classification && l != 0.0 && l != 1.0) {
                    return Err(DistillError::LabelOutOfDomain(l));
                }
            }
        }
        Ok(())
    }

    fn label_tensors(&self, idx: &[usize]) -> (Tensor, Tensor) {
        let t = self.task_count();
        let mut labels = Tensor::zeros(idx.len(), t);
        let mut mask = Tensor::zeros(idx.len(), t);
        for (r, &i) in idx.iter().enumerate() {
            for (c, l) in self.labels[i].iter().enumerate() {
                if let Some(v) = l {
                    labels.set(r, c, *v);
                    mask.set(r, c, 1.0);
                }
            }
        }
        (labels, mask)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    /// Seeded random 8:1:1 partition of `0..n`.
    pub fn random(n: usize, seed: u64) -> Split {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_train = n * 8 / 10;
        let n_valid = n / 10;
        Split {
            train: idx[..n_train].to_vec(),
            valid: idx[n_train..n_train + n_valid].to_vec(),
            test: idx[n_train + n_valid..].to_vec(),
        }
    }
}

/// Student encoder, head and teacher projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predictor {
    pub task: TaskKind,
    pub task_names: Vec<String>,
    pub student: EncoderParams,
    pub head: Head,
    pub projection: TeacherProjection,
}

impl Predictor {
    /// Raw outputs (`n x tasks`): logits for classification.
    pub fn predict_inputs(&self, inputs: &[GraphInput]) -> Result<Tensor, DistillError> {
        let chunks: Vec<Result<Vec<Vec<f64>>, DistillError>> = inputs
            .par_chunks(64)
            .map(|chunk| {
                let refs: Vec<&GraphInput> = chunk.iter().collect();
                let emb = encode_inputs(&refs, &self.student)?;
                let h = emb.matmul(&self.head.w1)?;
                let h = add_bias_relu(h, &self.head.b1, true);
                let out = add_bias_relu(h.matmul(&self.head.w2)?, &self.head.b2, false);
                Ok(out.to_rows())
            })
            .collect();
        let mut rows = Vec::with_capacity(inputs.len());
        for c in chunks {
            rows.extend(c?);
        }
        if rows.is_empty() {
            return Ok(Tensor::zeros(0, self.task_names.len()));
        }
        Ok(Tensor::from_rows(&rows)?)
    }

    /// Outputs on the label scale: probabilities for classification.
    pub fn predict(&self, g: &MolGraph, vocab: &FeatureVocab) -> Result<Vec<f64>, DistillError> {
        let raw = self.predict_inputs(&[GraphInput::new(g, vocab)?])?;
        Ok(raw.row(0).iter().map(|&v| self.to_label_scale(v)).collect())
    }

    fn to_label_scale(&self, v: f64) -> f64 {
        match self.task {
            TaskKind::Classification => 1.0 / (1.0 + (-v).exp()),
            TaskKind::Regression => v,
        }
    }

    pub fn student_embedding(&self, g: &MolGraph, vocab: &FeatureVocab) -> Result<Vec<f64>, DistillError> {
        Ok(crate::encoder::encode_graph(g, vocab, &self.student)?)
    }
}

fn add_bias_relu(mut x: Tensor, bias: &Tensor, relu: bool) -> Tensor {
    let n = x.cols();
    for (i, v) in x.data_mut().iter_mut().enumerate() {
        *v += bias.data()[i % n];
        if relu && *v < 0.0 {
            *v = 0.0;
        }
    }
    x
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinetuneEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_metric: f64,
}

/// Test-split metrics of the validation-selected predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub task: TaskKind,
    pub best_epoch: usize,
    /// Macro AUC for classification, RMSE for regression.
    pub valid_metric: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auc_roc: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub per_task_auc: Vec<Option<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rmse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mae: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub predictor: Predictor,
    pub log: Vec<FinetuneEpoch>,
    pub report: FinetuneReport,
}

/// Per-task scores for one split. Classification tasks whose split lacks a
/// class yield `None` and are left out of the macro average.
struct SplitScores {
    per_task_auc: Vec<Option<f64>>,
    macro_auc: Option<f64>,
    rmse: Option<f64>,
    mae: Option<f64>,
}

fn score_split(
    predictor: &Predictor,
    inputs: &[GraphInput],
    data: &PropertyDataset,
    idx: &[usize],
) -> Result<SplitScores, DistillError> {
    let sub: Vec<GraphInput> = idx.iter().map(|&i| inputs[i].clone()).collect();
    let raw = predictor.predict_inputs(&sub)?;
    let tasks = data.task_count();
    let mut per_task_auc = Vec::with_capacity(tasks);
    let (mut all_p, mut all_l) = (Vec::new(), Vec::new());
    for t in 0..tasks {
        let (mut p, mut l) = (Vec::new(), Vec::new());
        for (r, &i) in idx.iter().enumerate() {
            if let Some(v) = data.labels[i][t] {
                p.push(raw.get(r, t));
                l.push(v);
            }
        }
        if predictor.task == TaskKind::Classification {
            per_task_auc.push(match auc_roc(&p, &l) {
                Ok(a) => Some(a),
                Err(EvalError::SingleClass) => None,
                Err(e) => return Err(e.into()),
            });
        }
        all_p.extend(p);
        all_l.extend(l);
    }
    let aucs: Vec<f64> = per_task_auc.iter().flatten().copied().collect();
    let macro_auc = (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64);
    let (rmse_v, mae_v) = if predictor.task == TaskKind::Regression && !all_p.is_empty() {
        (Some(rmse(&all_p, &all_l)?), Some(mae(&all_p, &all_l)?))
    } else {
        (None, None)
    };
    Ok(SplitScores {
        per_task_auc,
        macro_auc,
        rmse: rmse_v,
        mae: mae_v,
    })
}

/// Validation selection score; larger is better.
fn selection_score(task: TaskKind, s: &SplitScores) -> f64 {
    match task {
        TaskKind::Classification => s.macro_auc.unwrap_or(f64::NEG_INFINITY),
        TaskKind::Regression => s.rmse.map_or(f64::NEG_INFINITY, |r| -r),
    }
}

fn reported_metric(task: TaskKind, s: &SplitScores) -> f64 {
    match task {
        TaskKind::Classification => s.macro_auc.unwrap_or(f64::NAN),
        TaskKind::Regression => s.rmse.unwrap_or(f64::NAN),
    }
}

/// Trains student, head and projection against a frozen teacher and keeps
/// the epoch with the best validation score (earliest on ties).
pub fn finetune(
    data: &PropertyDataset,
    split: &Split,
    teacher: &EncoderParams,
    vocab: &FeatureVocab,
    cfg: &DistillConfig,
) -> Result<FinetuneOutcome, DistillError> {
    cfg.validate()?;
    data.validate(cfg.task)?;
    for (name, part) in [("train", &split.train), ("valid", &split.valid), ("test", &split.test)] {
        if part.is_empty() {
            return Err(DistillError::EmptySplit(name));
        }
        if let Some(&bad) = part.iter().find(|&&i| i >= data.len()) {
            return Err(DistillError::BadIndex(bad));
        }
    }
    if teacher.spec.input_dim() != vocab.total_dim() {
        return Err(DistillError::Layout(format!(
            "teacher expects {} features, vocabulary has {}",
            teacher.spec.input_dim(),
            vocab.total_dim()
        )));
    }
    let inputs = data
        .graphs
        .iter()
        .map(|g| GraphInput::new(g, vocab))
        .collect::<Result<Vec<_>, _>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let student = if cfg.init_from_teacher {
        teacher.clone()
    } else {
        let spec = EncoderSpec::new(
            cfg.arch,
            vocab.total_dim(),
            cfg.hidden_dim,
            cfg.student_dim,
            cfg.layers,
            cfg.k_hops,
        );
        EncoderParams::init(spec, &mut rng)?
    };
    let student_dim = student.output_dim();
    let head = Head::init(student_dim, cfg.head_hidden, data.task_count(), &mut rng);
    let projection = TeacherProjection::init(teacher.output_dim(), student_dim, &mut rng);
    let mut predictor = Predictor {
        task: cfg.task,
        task_names: data.task_names.clone(),
        student,
        head,
        projection,
    };

    let teacher_reps = if cfg.uses_kd() {
        let refs: Vec<&GraphInput> = inputs.iter().collect();
        Some(encode_inputs(&refs, teacher)?)
    } else {
        None
    };

    let n_student = predictor.student.weights.len();
    let mut flat = flatten(&predictor);
    let mut adam = AdamState::new(cfg.adam, &flat);
    let mut order = split.train.clone();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Predictor)> = None;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let tape = Tape::new();
            let vars: Vec<Var<'_>> = flat.iter().map(|t| tape.param(t)).collect();
            let (enc, rest) = vars.split_at(n_student);
            let refs: Vec<&GraphInput> = batch.iter().map(|&i| &inputs[i]).collect();
            let graph_batch = GraphBatch::new(&refs)?;
            let (_, emb) = forward(&tape, &predictor.student.spec, enc, &graph_batch)?;
            let preds = Head::apply(emb, &rest[..4])?;
            let (labels, mask) = data.label_tensors(batch);
            let sup = supervised_loss(preds, &labels, &mask, cfg.task)?;
            let loss = match &teacher_reps {
                Some(reps) => {
                    let rows: Vec<Vec<f64>> = batch.iter().map(|&i| reps.row(i).to_vec()).collect();
                    let t = tape.constant_owned(Tensor::from_rows(&rows)?);
                    let projected = TeacherProjection::apply(t, rest[4], rest[5])?;
                    let kd = infonce_kd_loss(emb, projected, cfg.tau)?;
                    combined_loss(sup, kd, cfg.beta)?
                }
                None => sup,
            };
            total += loss.item();
            batches += 1;
            let grads = tape.backward(loss)?;
            let g: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();
            adam_step(&mut flat, &g, &mut adam)?;
        }
        unflatten(&mut predictor, &flat);
        let scores = score_split(&predictor, &inputs, data, &split.valid)?;
        let selection = selection_score(cfg.task, &scores);
        log.push(FinetuneEpoch {
            epoch,
            train_loss: total / batches.max(1) as f64,
            valid_metric: reported_metric(cfg.task, &scores),
        });
        if best.as_ref().map_or(true, |(s, _, _)| selection > *s) {
            best = Some((selection, epoch, predictor.clone()));
        }
    }

    let (best_epoch, chosen) = match best {
        Some((_, e, p)) => (e, p),
        None => (0, predictor),
    };
    let valid = score_split(&chosen, &inputs, data, &split.valid)?;
    let test = score_split(&chosen, &inputs, data, &split.test)?;
    let report = FinetuneReport {
        task: cfg.task,
        best_epoch,
        valid_metric: reported_metric(cfg.task, &valid),
        auc_roc: test.macro_auc,
        per_task_auc: test.per_task_auc,
        rmse: test.rmse,
        mae: test.mae,
    };
    Ok(FinetuneOutcome {
        predictor: chosen,
        log,
        report,
    })
}

/// Student weights, then head `w1 b1 w2 b2`, then projection `weight bias`.
pub fn flatten(p: &Predictor) -> Vec<Tensor> {
    let mut out = p.student.weights.clone();
    out.extend([
        p.head.w1.clone(),
        p.head.b1.clone(),
        p.head.w2.clone(),
        p.head.b2.clone(),
        p.projection.weight.clone(),
        p.projection.bias.clone(),
    ]);
    out
}

fn unflatten(p: &mut Predictor, flat: &[Tensor]) {
    let n = p.student.weights.len();
    p.student.weights.clone_from_slice(&flat[..n]);
    p.head.w1 = flat[n].clone();
    p.head.b1 = flat[n + 1].clone();
    p.head.w2 = flat[n + 2].clone();
    p.head.b2 = flat[n + 3].clone();
    p.projection.weight = flat[n + 4].clone();
    p.projection.bias = flat[n + 5].clone();
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::chem::{explicit_hydrogens, parse_smiles};
    use crate::featurize::build_vocab;
    use crate::ndiff::grad_check;

    fn naive_infonce(s: &[Vec<f64>], t: &[Vec<f64>], tau: f64) -> f64 {
        let cos = |a: &[f64], b: &[f64]| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            dot / (na * nb)
        };
        let b = s.len();
        let mut total = 0.0;
        for i in 0..b {
            let pos = (cos(&s[i], &t[i]) / tau).exp();
            let mut den = pos;
            for j in 0..b {
                if j != i {
                    den += (cos(&s[i], &t[j]) / tau).exp();
                }
            }
            total -= (pos / den).ln();
        }
        total / b as f64
    }

    fn kd_value(s: &[Vec<f64>], t: &[Vec<f64>], tau: f64) -> f64 {
        let tape = Tape::new();
        let sv = tape.constant_owned(Tensor::from_rows(s).unwrap());
        let tv = tape.constant_owned(Tensor::from_rows(t).unwrap());
        infonce_kd_loss(sv, tv, tau).unwrap().item()
    }

    #[test]
    fn infonce_examples() {
        assert_eq!(kd_value(&[vec![1.0, 2.0]], &[vec![3.0, -1.0]], 0.1), 0.0);
        let eye = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let expected = (1.0 + (-10.0f64).exp()).ln();
        assert!((kd_value(&eye, &eye, 0.1) - expected).abs() < 1e-15);
        assert!((expected - 4.54e-5).abs() < 1e-7);
    }

    #[test]
    fn infonce_matches_naive_and_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..30 {
            let b = rng.gen_range(1..=8);
            let d = rng.gen_range(1..=6);
            let tau = [0.05, 0.075, 0.1][rng.gen_range(0..3)];
            let mut gen = || -> Vec<Vec<f64>> {
                (0..b)
                    .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
                    .collect()
            };
            let s = gen();
            let t = gen();
            let got = kd_value(&s, &t, tau);
            assert!((got - naive_infonce(&s, &t, tau)).abs() < 1e-10);
            let mut scaled = s.clone();
            scaled[0].iter_mut().for_each(|v| *v *= 37.5);
            assert!((kd_value(&scaled, &t, tau) - got).abs() < 1e-9);
        }
    }

    #[test]
    fn supervised_examples() {
        let tape = Tape::new();
        let preds = tape.constant_owned(Tensor::zeros(3, 1));
        let labels = Tensor::new(3, 1, vec![1.0, 0.0, 1.0]).unwrap();
        let mask = Tensor::filled(3, 1, 1.0);
        let l = supervised_loss(preds, &labels, &mask, TaskKind::Classification).unwrap();
        assert!((l.item() - std::f64::consts::LN_2).abs() < 1e-15);

        let p = tape.constant_owned(labels.clone());
        let l = supervised_loss(p, &labels, &mask, TaskKind::Regression).unwrap();
        assert_eq!(l.item(), 0.0);

        let bad = Tensor::new(3, 1, vec![1.0, 0.5, 1.0]).unwrap();
        assert!(matches!(
            supervised_loss(preds, &bad, &mask, TaskKind::Classification),
            Err(DistillError::LabelOutOfDomain(_))
        ));
    }

    #[test]
    fn supervised_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..30 {
            let b = rng.gen_range(1..=16);
            let x: Vec<f64> = (0..b).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let y: Vec<f64> = (0..b).map(|_| f64::from(rng.gen_bool(0.5))).collect();
            let m: Vec<f64> = (0..b).map(|i| f64::from(i == 0 || rng.gen_bool(0.8))).collect();
            let tape = Tape::new();
            let preds = tape.constant_owned(Tensor::new(b, 1, x.clone()).unwrap());
            let lt = Tensor::new(b, 1, y.clone()).unwrap();
            let mt = Tensor::new(b, 1, m.clone()).unwrap();
            let bce = supervised_loss(preds, &lt, &mt, TaskKind::Classification)
                .unwrap()
                .item();
            let mse = supervised_loss(preds, &lt, &mt, TaskKind::Regression).unwrap().item();
            let (mut eb, mut em, mut n) = (0.0, 0.0, 0.0);
            for i in 0..b {
                if m[i] == 1.0 {
                    let p = 1.0 / (1.0 + (-x[i]).exp());
                    eb += -(y[i] * p.ln() + (1.0 - y[i]) * (1.0 - p).ln());
                    em += (x[i] - y[i]).powi(2);
                    n += 1.0;
                }
            }
            assert!((bce - eb / n).abs() < 1e-12);
            assert!((mse - em / n).abs() < 1e-12);
        }
    }

    #[test]
    fn combination_examples() {
        assert_eq!(combine_values(2.0, 4.0, 1.0).unwrap(), 2.0);
        assert_eq!(combine_values(2.0, 4.0, 0.0).unwrap(), 4.0);
        assert_eq!(combine_values(2.0, 4.0, 0.5).unwrap(), 3.0);
        assert!(matches!(
            combine_values(1.0, 1.0, 1.5),
            Err(DistillError::BetaOutOfRange(_))
        ));
        let tape = Tape::new();
        let a = tape.constant_owned(Tensor::scalar(2.0));
        let b = tape.constant_owned(Tensor::scalar(4.0));
        assert_eq!(combined_loss(a, b, 0.5).unwrap().item(), 3.0);
        assert!(combined_loss(a, b, -0.1).is_err());
    }

    #[test]
    fn combined_gradient_is_the_affine_mix() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let s = Tensor::uniform_init(4, 3, 1, &mut rng);
        let t = Tensor::uniform_init(4, 3, 1, &mut rng);
        let labels = Tensor::new(4, 3, (0..12).map(|i| f64::from(i % 2 == 0)).collect()).unwrap();
        let mask = Tensor::filled(4, 3, 1.0);
        let grad_of = |which: u8| {
            let tape = Tape::new();
            let sv = tape.param(&s);
            let tv = tape.constant(&t);
            let sup = supervised_loss(sv, &labels, &mask, TaskKind::Classification).unwrap();
            let kd = infonce_kd_loss(sv, tv, 0.1).unwrap();
            let loss = match which {
                0 => sup,
                1 => kd,
                _ => combined_loss(sup, kd, 0.3).unwrap(),
            };
            tape.backward(loss).unwrap().wrt(sv)
        };
        let (gs, gk, gc) = (grad_of(0), grad_of(1), grad_of(2));
        for i in 0..12 {
            let mix = 0.3 * gs.data()[i] + 0.7 * gk.data()[i];
            assert!((gc.data()[i] - mix).abs() < 1e-12);
        }
        let report = grad_check(
            |tape, x| {
                let sup = supervised_loss(x, &labels, &mask, TaskKind::Classification).unwrap();
                let kd = infonce_kd_loss(x, tape.constant(&t), 0.1).unwrap();
                Ok(combined_loss(sup, kd, 0.3).unwrap())
            },
            &s,
            1e-5,
        );
        assert!(report.unwrap().max_rel_error < 1e-4);
    }

    fn toy_data() -> (PropertyDataset, FeatureVocab) {
        let smiles = [
            "CCO",
            "CCN",
            "CCCO",
            "CCCN",
            "c1ccccc1O",
            "c1ccccc1N",
            "CC(=O)O",
            "CC(=O)N",
            "OCCO",
            "NCCN",
            "CCCCO",
            "CCCCN",
            "OC1CCCCC1",
            "NC1CCCCC1",
            "COC",
            "CNC",
            "OCC(C)C",
            "NCC(C)C",
            "Oc1ccncc1",
            "Nc1ccncc1",
        ];
        let graphs: Vec<MolGraph> = smiles
            .iter()
            .map(|s| explicit_hydrogens(&parse_smiles(s).unwrap()))
            .collect();
        let labels = smiles
            .iter()
            .enumerate()
            .map(|(i, _)| {
                vec![
                    Some(f64::from(i % 2 == 0)),
                    if i % 3 == 0 { None } else { Some(f64::from(i % 4 < 2)) },
                ]
            })
            .collect();
        let vocab = build_vocab(&graphs, true).unwrap();
        (
            PropertyDataset {
                graphs,
                labels,
                task_names: vec!["a".into(), "b".into()],
            },
            vocab,
        )
    }

    fn toy_split() -> Split {
        Split {
            train: (0..14).collect(),
            valid: (14..17).collect(),
            test: (17..20).collect(),
        }
    }

    fn toy_teacher(vocab: &FeatureVocab) -> EncoderParams {
        let spec = EncoderSpec::new(Architecture::Tag, vocab.total_dim(), 8, 6, 2, 2);
        EncoderParams::init(spec, &mut ChaCha8Rng::seed_from_u64(99)).unwrap()
    }

    fn toy_cfg() -> DistillConfig {
        DistillConfig {
            hidden_dim: 8,
            student_dim: 8,
            head_hidden: 8,
            epochs: 4,
            batch_size: 5,
            k_hops: 2,
            seed: 3,
            ..DistillConfig::default()
        }
    }

    #[test]
    fn beta_one_equals_no_kd() {
        let (data, vocab) = toy_data();
        let teacher = toy_teacher(&vocab);
        let a = finetune(
            &data,
            &toy_split(),
            &teacher,
            &vocab,
            &DistillConfig { beta: 1.0, ..toy_cfg() },
        )
        .unwrap();
        let b = finetune(
            &data,
            &toy_split(),
            &teacher,
            &vocab,
            &DistillConfig {
                no_kd: true,
                ..toy_cfg()
            },
        )
        .unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.predictor.student, b.predictor.student);
        assert_eq!(a.predictor.head, b.predictor.head);
    }

    #[test]
    fn finetune_is_deterministic_and_leaves_teacher_alone() {
        let (data, vocab) = toy_data();
        let teacher = toy_teacher(&vocab);
        let before = teacher.clone();
        let a = finetune(&data, &toy_split(), &teacher, &vocab, &toy_cfg()).unwrap();
        let b = finetune(&data, &toy_split(), &teacher, &vocab, &toy_cfg()).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.report, b.report);
        assert_eq!(teacher, before);
        assert!((1..=4).contains(&a.report.best_epoch));
        assert_eq!(a.report.per_task_auc.len(), 2);
        let json = serde_json::to_value(&a.report).unwrap();
        assert!(json.get("auc_roc").is_some());
    }

    #[test]
    fn regression_report_and_init_from_teacher() {
        let (mut data, vocab) = toy_data();
        for (i, row) in data.labels.iter_mut().enumerate() {
            *row = vec![Some(i as f64 * 0.1), None];
            row[1] = Some(1.0);
        }
        let teacher = toy_teacher(&vocab);
        let cfg = DistillConfig {
            task: TaskKind::Regression,
            init_from_teacher: true,
            ..toy_cfg()
        };
        let out = finetune(&data, &toy_split(), &teacher, &vocab, &cfg).unwrap();
        assert!(out.report.rmse.unwrap() >= out.report.mae.unwrap());
        assert!(out.report.auc_roc.is_none());
        assert_eq!(out.predictor.student.spec, teacher.spec);
        let p = out.predictor.predict(&data.graphs[0], &vocab).unwrap();
        assert_eq!(p.len(), 2);
    }

    #[test]
    fn config_errors() {
        let (data, vocab) = toy_data();
        let teacher = toy_teacher(&vocab);
        let bad_beta = DistillConfig { beta: 1.2, ..toy_cfg() };
        assert!(matches!(
            finetune(&data, &toy_split(), &teacher, &vocab, &bad_beta),
            Err(DistillError::BetaOutOfRange(_))
        ));
        let bad_tau = DistillConfig { tau: 0.0, ..toy_cfg() };
        assert!(bad_tau.validate().is_err());
        let empty = Split {
            valid: vec![],
            ..toy_split()
        };
        assert!(matches!(
            finetune(&data, &empty, &teacher, &vocab, &toy_cfg()),
            Err(DistillError::EmptySplit("valid"))
        ));
    }

    #[test]
    fn random_split_partitions() {
        let s = Split::random(103, 5);
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (82, 10, 11));
        let mut all: Vec<usize> = s.train.iter().chain(&s.valid).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..103).collect::<Vec<_>>());
        assert_eq!(Split::random(103, 5), s);
    }
}
