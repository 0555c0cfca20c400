//! Loss composition and the training protocol.
//!
//! Students minimize `alpha * CE + beta * KD` where KD is either the vanilla
//! softened-logit loss or the temporal saliency distillation loss built from
//! normalized perturbation profiles. The same loop trains teachers (pure CE),
//! with Adam, a fixed step decay schedule, and patience-based early stopping
//! on validation AUC-PRC.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::TimeSeriesDataset;
use crate::fsutil::write_atomic;
use crate::metrics::{auc_prc, MetricError};
use crate::models::{build_model, forward, forward_var, ModelError, ModelParams, ModelSpec};
use crate::rng;
use crate::saliency::{
    batched_saliency_on_tape, make_grid, temporal_saliency, BackgroundSelector, SaliencyError,
    SaliencyProfile, SaliencyVariant, MEAN_FLOOR,
};
use crate::tensor::{smooth_l1, softmax_temperature, Tape, Tensor, TensorError, Var};

/// The β grid searched over in the protocol.
pub const DEFAULT_BETA_GRID: [f64; 6] = [0.1, 0.5, 1.0, 10.0, 100.0, 200.0];

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Saliency(#[from] SaliencyError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("distill io: {0}")]
    Io(#[from] std::io::Error),
    #[error("distill encoding: {0}")]
    Encoding(#[from] serde_json::Error),
}

/// Which knowledge-distillation term accompanies the cross-entropy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Objective {
    /// Cross-entropy only.
    Base,
    /// Softened-logit matching.
    BaseKd,
    /// Temporal saliency distillation.
    Tsd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSettings {
    pub num_subsequences: usize,
    pub width: usize,
}

impl Default for GridSettings {
    fn default() -> Self {
        GridSettings { num_subsequences: 50, width: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerSettings {
    pub initial_lr: f64,
    pub decay_factor: f64,
    pub decay_epochs: Vec<usize>,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        OptimizerSettings {
            initial_lr: 0.01,
            decay_factor: 0.5,
            decay_epochs: vec![25, 30, 35],
            batch_size: 32,
            max_epochs: 500,
            patience: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub alpha: f64,
    pub beta: f64,
    pub beta_grid: Vec<f64>,
    pub tau_saliency: f64,
    pub tau_kd: f64,
    pub grid: GridSettings,
    pub variant: SaliencyVariant,
    pub optimizer: OptimizerSettings,
    pub seed: u64,
    pub objective: Objective,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            alpha: 1.0,
            beta: 1.0,
            beta_grid: DEFAULT_BETA_GRID.to_vec(),
            tau_saliency: 8.0,
            tau_kd: 4.0,
            grid: GridSettings::default(),
            variant: SaliencyVariant::Whole,
            optimizer: OptimizerSettings::default(),
            seed: 0,
            objective: Objective::Tsd,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<(), DistillError> {
        let bad = |msg: String| Err(DistillError::InvalidConfig(msg));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be >= 0, got {}", self.alpha));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be >= 0, got {}", self.beta));
        }
        if self.beta_grid.iter().any(|b| !(*b >= 0.0 && b.is_finite())) {
            return bad("beta_grid entries must be >= 0".into());
        }
        for (name, tau) in [("tau_saliency", self.tau_saliency), ("tau_kd", self.tau_kd)] {
            if !(tau > 0.0 && tau.is_finite()) {
                return bad(format!("{name} must be > 0, got {tau}"));
            }
        }
        if self.grid.num_subsequences < 1 || self.grid.width < 1 {
            return bad("grid num_subsequences and width must be >= 1".into());
        }
        let o = &self.optimizer;
        if !(o.initial_lr > 0.0 && o.initial_lr.is_finite()) {
            return bad(format!("initial_lr must be > 0, got {}", o.initial_lr));
        }
        if !(o.decay_factor > 0.0 && o.decay_factor <= 1.0) {
            return bad(format!("decay_factor must be in (0, 1], got {}", o.decay_factor));
        }
        if o.batch_size < 1 || o.max_epochs < 1 || o.patience < 1 {
            return bad("batch_size, max_epochs, patience must be >= 1".into());
        }
        if o.patience > o.max_epochs {
            return bad(format!(
                "patience {} exceeds max_epochs {}",
                o.patience, o.max_epochs
            ));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub ce: f64,
    pub kd: f64,
    pub val_auc_prc: f64,
}

/// A finished run: best-epoch parameter snapshot plus the full history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedArtifact {
    pub params: ModelParams,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub config: DistillConfig,
}

impl TrainedArtifact {
    /// Validation AUC-PRC at the best epoch.
    pub fn best_val_auc(&self) -> f64 {
        self.history[self.best_epoch - 1].val_auc_prc
    }

    pub fn save(&self, path: &Path) -> Result<(), DistillError> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_atomic(path, text.as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DistillError> {
        let artifact: TrainedArtifact = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        artifact.config.validate()?;
        artifact.params.spec().validate()?;
        if artifact.history.is_empty()
            || artifact.best_epoch < 1
            || artifact.best_epoch > artifact.history.len()
        {
            return Err(DistillError::InvalidArgument(format!(
                "best_epoch {} outside recorded history of {}",
                artifact.best_epoch,
                artifact.history.len()
            )));
        }
        Ok(artifact)
    }

    /// Delimited per-epoch log: epoch, lr, train_loss, ce, kd, val_auc_prc.
    pub fn write_history(&self, path: &Path) -> Result<(), DistillError> {
        let mut text = String::from("epoch\tlr\ttrain_loss\tce\tkd\tval_auc_prc\n");
        for r in &self.history {
            writeln!(
                text,
                "{}\t{:?}\t{:?}\t{:?}\t{:?}\t{:?}",
                r.epoch, r.lr, r.train_loss, r.ce, r.kd, r.val_auc_prc
            )
            .expect("string write");
        }
        write_atomic(path, text.as_bytes())?;
        Ok(())
    }
}

fn normalized(profile: &SaliencyProfile) -> Vec<f64> {
    let mu = profile.mean.max(MEAN_FLOOR);
    profile.scores.iter().map(|s| s / mu).collect()
}

/// Smooth-L1 between μ-normalized profiles; μ floored at 1e-8 so all-zero
/// profiles contribute zero loss instead of dividing by zero.
pub fn tsd_loss(
    teacher: &SaliencyProfile,
    student: &SaliencyProfile,
) -> Result<f64, DistillError> {
    if teacher.scores.len() != student.scores.len() {
        return Err(DistillError::InvalidArgument(format!(
            "profile grids differ: {} vs {} entries",
            teacher.scores.len(),
            student.scores.len()
        )));
    }
    if teacher.variant != student.variant {
        return Err(DistillError::InvalidArgument("profile variants differ".into()));
    }
    Ok(smooth_l1(&normalized(student), &normalized(teacher))?)
}

/// Differentiable [`tsd_loss`]: the teacher profile enters as a constant, the
/// student scores and mean as live nodes.
pub fn tsd_loss_on_tape(
    tape: &Tape,
    teacher: &SaliencyProfile,
    student_scores: Var,
    student_mean: Var,
) -> Result<Var, DistillError> {
    let shape = tape.shape_of(student_scores)?;
    if shape != [teacher.scores.len()] {
        return Err(DistillError::InvalidArgument(format!(
            "profile grids differ: teacher {} entries, student shape {:?}",
            teacher.scores.len(),
            shape
        )));
    }
    let t_norm =
        tape.constant_from(vec![teacher.scores.len()], normalized(teacher))?;
    let mu = tape.clamp_min(student_mean, MEAN_FLOOR)?;
    let s_norm = tape.div_by_scalar(student_scores, mu)?;
    Ok(tape.smooth_l1(s_norm, t_norm)?)
}

/// Vanilla softened-logit distillation: `tau^2 * KL(P_tau(t) || P_tau(s))`,
/// batch-mean over rows.
pub fn base_kd_loss(
    teacher_logits: &[f64],
    student_logits: &[f64],
    num_classes: usize,
    tau: f64,
) -> Result<f64, DistillError> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(DistillError::InvalidArgument(format!("tau must be > 0, got {tau}")));
    }
    if teacher_logits.len() != student_logits.len()
        || num_classes < 2
        || teacher_logits.is_empty()
        || teacher_logits.len() % num_classes != 0
    {
        return Err(DistillError::InvalidArgument("logit matrices must share an Rx C shape".into()));
    }
    let rows = teacher_logits.len() / num_classes;
    let mut total = 0.0;
    for (t, s) in teacher_logits.chunks(num_classes).zip(student_logits.chunks(num_classes)) {
        let p = softmax_temperature(t, tau)?;
        let q = softmax_temperature(s, tau)?;
        total += crate::tensor::kl_divergence(&p, &q)?;
    }
    Ok(tau * tau * total / rows as f64)
}

/// Differentiable [`base_kd_loss`] with frozen teacher logits.
pub fn base_kd_loss_on_tape(
    tape: &Tape,
    teacher_logits: &Tensor,
    student_logits: Var,
    tau: f64,
) -> Result<Var, DistillError> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(DistillError::InvalidArgument(format!("tau must be > 0, got {tau}")));
    }
    let shape = teacher_logits.shape().to_vec();
    if tape.shape_of(student_logits)? != shape || shape.len() != 2 {
        return Err(DistillError::InvalidArgument("logit matrices must share an RxC shape".into()));
    }
    let (rows, classes) = (shape[0], shape[1]);
    let mut softened = Vec::with_capacity(rows * classes);
    for row in teacher_logits.values().chunks(classes) {
        softened.extend(softmax_temperature(row, tau)?);
    }
    let t_probs = tape.constant_from(vec![rows, classes], softened)?;
    let s_probs = tape.softmax_temperature(student_logits, tau)?;
    let kl = tape.kl_divergence(t_probs, s_probs)?;
    Ok(tape.scale(kl, tau * tau)?)
}

/// `alpha * ce + beta * kd`.
pub fn total_loss(ce: f64, kd: f64, alpha: f64, beta: f64) -> f64 {
    alpha * ce + beta * kd
}

/// Adam with bias correction. Moments are keyed by parameter name so the
/// update order never depends on map iteration details.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step_count: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn step(
        &mut self,
        params: &mut ModelParams,
        grads: &BTreeMap<String, Vec<f64>>,
    ) -> Result<(), DistillError> {
        self.step_count += 1;
        let c1 = 1.0 - self.beta1.powi(self.step_count as i32);
        let c2 = 1.0 - self.beta2.powi(self.step_count as i32);
        for (name, tensor) in params.tensors_mut() {
            let grad = grads.get(name).ok_or_else(|| {
                DistillError::InvalidArgument(format!("missing gradient for {name}"))
            })?;
            if grad.len() != tensor.len() {
                return Err(DistillError::InvalidArgument(format!(
                    "gradient length {} does not match {name} of {}",
                    grad.len(),
                    tensor.len()
                )));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; grad.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; grad.len()]);
            for (((w, &g), m), v) in
                tensor.values_mut().iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *w -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
                if !w.is_finite() {
                    return Err(DistillError::InvalidArgument(format!(
                        "non-finite parameter in {name} after update"
                    )));
                }
            }
        }
        Ok(())
    }
}

fn check_dataset(spec: &ModelSpec, data: &TimeSeriesDataset, role: &str) -> Result<(), DistillError> {
    if data.is_empty() {
        return Err(DistillError::InvalidArgument(format!("{role} split is empty")));
    }
    if spec.input_channels != 1 {
        return Err(DistillError::InvalidArgument(
            "training expects univariate models (input_channels 1)".into(),
        ));
    }
    if data.series_length != spec.input_length {
        return Err(DistillError::InvalidArgument(format!(
            "{role} length {} does not match model input length {}",
            data.series_length, spec.input_length
        )));
    }
    if data.num_classes != spec.num_classes {
        return Err(DistillError::InvalidArgument(format!(
            "{role} has {} classes, model expects {}",
            data.num_classes, spec.num_classes
        )));
    }
    Ok(())
}

fn dataset_tensor(data: &TimeSeriesDataset) -> Result<Tensor, DistillError> {
    Ok(Tensor::new(vec![data.len(), 1, data.series_length], data.flat_values())?)
}

fn softmax_rows(logits: &[f64], classes: usize) -> Result<Vec<f64>, DistillError> {
    let mut probs = Vec::with_capacity(logits.len());
    for row in logits.chunks(classes) {
        probs.extend(softmax_temperature(row, 1.0)?);
    }
    Ok(probs)
}

fn eval_auc_prc(params: &ModelParams, data: &TimeSeriesDataset) -> Result<f64, DistillError> {
    let logits = forward(params, &dataset_tensor(data)?)?;
    let probs = softmax_rows(logits.values(), params.spec().num_classes)?;
    Ok(auc_prc(&probs, params.spec().num_classes, &data.labels())?)
}

fn tensor_bits(params: &ModelParams) -> Vec<u64> {
    params.tensors().values().flat_map(|t| t.values().iter().map(|v| v.to_bits())).collect()
}

/// First index of the maximum; earlier runs win ties.
fn argmax_run(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Index of the winning `(beta, validation score)` entry: highest score,
/// ties broken toward the smaller β.
pub fn select_beta_index(results: &[(f64, f64)]) -> usize {
    let mut best = 0;
    for (i, &(beta, score)) in results.iter().enumerate() {
        if score > results[best].1 || (score == results[best].1 && beta < results[best].0) {
            best = i;
        }
    }
    best
}

fn run_training(
    spec: &ModelSpec,
    train: &TimeSeriesDataset,
    val: &TimeSeriesDataset,
    config: &DistillConfig,
    seed: u64,
    requested: Objective,
    teacher: Option<&ModelParams>,
) -> Result<TrainedArtifact, DistillError> {
    config.validate()?;
    check_dataset(spec, train, "train")?;
    check_dataset(spec, val, "val")?;
    let objective = if config.beta == 0.0 { Objective::Base } else { requested };
    if objective != Objective::Base && teacher.is_none() {
        return Err(DistillError::InvalidArgument("distillation objective without a teacher".into()));
    }
    if let Some(t) = teacher {
        check_dataset(t.spec(), train, "train")?;
    }

    let n = train.len();
    let labels = train.labels();
    let classes = spec.num_classes;
    let t_len = spec.input_length;

    let teacher_logits = match (objective, teacher) {
        (Objective::BaseKd, Some(t)) => Some(forward(t, &dataset_tensor(train)?)?),
        _ => None,
    };
    let saliency_ctx = match objective {
        Objective::Tsd => Some((
            make_grid(t_len, config.grid.num_subsequences, config.grid.width)?,
            BackgroundSelector::new(train, seed)?,
        )),
        _ => None,
    };
    let mut profile_cache: BTreeMap<(usize, usize), SaliencyProfile> = BTreeMap::new();

    let mut params = build_model(spec, seed)?;
    let mut adam = Adam::new(config.optimizer.initial_lr);
    let mut lr = config.optimizer.initial_lr;
    let mut history: Vec<EpochRecord> = Vec::new();
    let mut best_epoch = 0usize;
    let mut best_val = f64::NEG_INFINITY;
    let mut best_params = params.clone();

    for epoch in 1..=config.optimizer.max_epochs {
        if config.optimizer.decay_epochs.contains(&epoch) {
            lr *= config.optimizer.decay_factor;
        }
        adam.set_lr(lr);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(seed, &format!("shuffle/epoch{epoch}")));

        let mut loss_sum = 0.0;
        let mut ce_sum = 0.0;
        let mut kd_sum = 0.0;
        for chunk in order.chunks(config.optimizer.batch_size) {
            let tape = Tape::new();
            let vars = params.attach(&tape)?;
            let mut rows = Vec::with_capacity(chunk.len() * t_len);
            let mut batch_labels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                rows.extend_from_slice(&train.instances[i].values);
                batch_labels.push(labels[i]);
            }
            let x = tape.constant(&Tensor::new(vec![chunk.len(), 1, t_len], rows)?)?;
            let logits = forward_var(&tape, spec, &vars, x)?;
            let ce = tape.cross_entropy(logits, &batch_labels)?;

            let kd = match objective {
                Objective::Base => None,
                Objective::BaseKd => {
                    let all = teacher_logits.as_ref().expect("teacher logits cached");
                    let mut t_rows = Vec::with_capacity(chunk.len() * classes);
                    for &i in chunk {
                        t_rows.extend_from_slice(&all.values()[i * classes..(i + 1) * classes]);
                    }
                    let t = Tensor::new(vec![chunk.len(), classes], t_rows)?;
                    Some(base_kd_loss_on_tape(&tape, &t, logits, config.tau_kd)?)
                }
                Objective::Tsd => {
                    let (grid, selector) = saliency_ctx.as_ref().expect("saliency context");
                    let teacher_params = teacher.expect("teacher params");
                    let mut keys = Vec::with_capacity(chunk.len());
                    for &i in chunk {
                        let bg = selector.select_index(epoch, i)?;
                        if !profile_cache.contains_key(&(i, bg)) {
                            let profile = temporal_saliency(
                                teacher_params,
                                &train.instances[i],
                                &train.instances[bg],
                                grid,
                                config.tau_saliency,
                                config.variant,
                            )?;
                            profile_cache.insert((i, bg), profile);
                        }
                        keys.push((i, bg));
                    }
                    let pairs: Vec<_> = keys
                        .iter()
                        .map(|&(i, bg)| (&train.instances[i], &train.instances[bg]))
                        .collect();
                    let student_nodes = batched_saliency_on_tape(
                        &tape,
                        spec,
                        &vars,
                        &pairs,
                        grid,
                        config.tau_saliency,
                        config.variant,
                    )?;
                    let mut per_instance = Vec::with_capacity(chunk.len());
                    for (key, (scores, mean)) in keys.iter().zip(student_nodes) {
                        per_instance.push(tsd_loss_on_tape(
                            &tape,
                            &profile_cache[key],
                            scores,
                            mean,
                        )?);
                    }
                    let stacked = tape.concat_scalars(&per_instance)?;
                    Some(tape.mean(stacked)?)
                }
            };

            let loss = match kd {
                Some(k) => {
                    tape.add(tape.scale(ce, config.alpha)?, tape.scale(k, config.beta)?)?
                }
                None if config.alpha == 1.0 => ce,
                None => tape.scale(ce, config.alpha)?,
            };
            tape.backward(loss)?;
            let mut grads = BTreeMap::new();
            for (name, var) in &vars {
                grads.insert(name.clone(), tape.grad(*var)?);
            }
            adam.step(&mut params, &grads)?;

            let w = chunk.len() as f64;
            loss_sum += tape.value_scalar(loss)? * w;
            ce_sum += tape.value_scalar(ce)? * w;
            if let Some(k) = kd {
                kd_sum += tape.value_scalar(k)? * w;
            }
        }

        let val_auc = eval_auc_prc(&params, val)?;
        history.push(EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / n as f64,
            ce: ce_sum / n as f64,
            kd: kd_sum / n as f64,
            val_auc_prc: val_auc,
        });
        // Ties refresh the snapshot: on tiny validation sets the score pegs
        // early, and the latest peak model is the one worth keeping.
        if val_auc >= best_val {
            best_val = val_auc;
            best_epoch = epoch;
            best_params = params.clone();
        }
        if epoch >= best_epoch + config.optimizer.patience {
            break;
        }
    }

    let mut stored = config.clone();
    stored.seed = seed;
    stored.objective = requested;
    Ok(TrainedArtifact { params: best_params, history, best_epoch, config: stored })
}

/// Trains one cross-entropy-only model under `config.seed`.
pub fn train_base(
    spec: &ModelSpec,
    train: &TimeSeriesDataset,
    val: &TimeSeriesDataset,
    config: &DistillConfig,
) -> Result<TrainedArtifact, DistillError> {
    run_training(spec, train, val, config, config.seed, Objective::Base, None)
}

/// All candidate teacher runs: `num_seeds` independent cross-entropy runs
/// under seeds `config.seed + s`, in seed order.
pub fn train_teacher_runs(
    spec: &ModelSpec,
    train: &TimeSeriesDataset,
    val: &TimeSeriesDataset,
    config: &DistillConfig,
    num_seeds: usize,
) -> Result<Vec<TrainedArtifact>, DistillError> {
    if num_seeds < 1 {
        return Err(DistillError::InvalidArgument("num_seeds must be >= 1".into()));
    }
    (0..num_seeds)
        .into_par_iter()
        .map(|s| {
            run_training(spec, train, val, config, config.seed + s as u64, Objective::Base, None)
        })
        .collect()
}

/// Index of the run [`train_teacher`] would select: highest validation
/// AUC-PRC, earliest run on ties.
pub fn select_teacher(runs: &[TrainedArtifact]) -> usize {
    let scores: Vec<f64> = runs.iter().map(TrainedArtifact::best_val_auc).collect();
    argmax_run(&scores)
}

/// Trains `num_seeds` independent cross-entropy runs (seeds `config.seed + s`)
/// and returns the one with the highest validation AUC-PRC, earliest seed on
/// ties.
pub fn train_teacher(
    spec: &ModelSpec,
    train: &TimeSeriesDataset,
    val: &TimeSeriesDataset,
    config: &DistillConfig,
    num_seeds: usize,
) -> Result<TrainedArtifact, DistillError> {
    let runs = train_teacher_runs(spec, train, val, config, num_seeds)?;
    let winner = select_teacher(&runs);
    Ok(runs.into_iter().nth(winner).expect("winner index in range"))
}

/// Distills a student against a frozen teacher under `config.objective`.
pub fn distill(
    teacher: &TrainedArtifact,
    student_spec: &ModelSpec,
    train: &TimeSeriesDataset,
    val: &TimeSeriesDataset,
    config: &DistillConfig,
) -> Result<TrainedArtifact, DistillError> {
    let before = tensor_bits(&teacher.params);
    let artifact = run_training(
        student_spec,
        train,
        val,
        config,
        config.seed,
        config.objective,
        Some(&teacher.params),
    )?;
    assert_eq!(before, tensor_bits(&teacher.params), "teacher parameters changed");
    Ok(artifact)
}

/// One distillation per β in ascending grid order, same seed throughout.
pub fn grid_search_runs(
    teacher: &TrainedArtifact,
    student_spec: &ModelSpec,
    train: &TimeSeriesDataset,
    val: &TimeSeriesDataset,
    config: &DistillConfig,
) -> Result<Vec<(f64, TrainedArtifact)>, DistillError> {
    let mut grid = config.beta_grid.clone();
    if grid.is_empty() {
        return Err(DistillError::InvalidArgument("beta_grid is empty".into()));
    }
    grid.sort_by(|a, b| a.partial_cmp(b).expect("finite betas"));
    grid.dedup();
    grid.into_par_iter()
        .map(|beta| {
            let mut c = config.clone();
            c.beta = beta;
            distill(teacher, student_spec, train, val, &c).map(|a| (beta, a))
        })
        .collect()
}

/// One distillation per β (same seed), highest validation AUC-PRC wins,
/// smaller β on ties.
pub fn grid_search_beta(
    teacher: &TrainedArtifact,
    student_spec: &ModelSpec,
    train: &TimeSeriesDataset,
    val: &TimeSeriesDataset,
    config: &DistillConfig,
) -> Result<(f64, TrainedArtifact), DistillError> {
    let runs = grid_search_runs(teacher, student_spec, train, val, config)?;
    let scored: Vec<(f64, f64)> = runs.iter().map(|(b, a)| (*b, a.best_val_auc())).collect();
    let winner = select_beta_index(&scored);
    Ok(runs.into_iter().nth(winner).expect("winner index in range"))
}
