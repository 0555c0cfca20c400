//! Config-driven experiment harness behind the CLI.
//!
//! A single JSON config names the dataset, teacher and student architectures,
//! the distillation protocol, the metrics, and the seeds; commands fan that
//! out into teacher selection, per-objective distillation, ablation sweeps,
//! and report aggregation. One global seed derives every stream (teacher
//! seeds, splits, backgrounds, synthetic data), so a (config, seed) pair
//! pins every artifact bit for bit. All outputs stay inside the configured
//! output directory and are written atomically; nothing embeds timestamps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{
    generate_cbf, load_archive, prepare, split_train_val, DataError, Split, TimeSeriesDataset,
};
use crate::distill::{
    distill, grid_search_runs, select_beta_index, select_teacher, train_teacher_runs,
    DistillConfig, DistillError, Objective, TrainedArtifact,
};
use crate::fsutil::write_atomic;
use crate::metrics::{
    accuracy, argmax, auc_prc, auc_roc, predictive_kl, rank_and_wins, saliency_mse,
    top1_agreement, MetricError, ScoreTable,
};
use crate::models::{forward, ModelError, ModelParams, ModelSpec};
use crate::rng;
use crate::saliency::{
    export_maps, fgsm_perturb, gradient_saliency, occlusion_map, SaliencyError, SaliencyVariant,
};
use crate::tensor::{softmax_temperature, Tensor, TensorError};

/// Seed flip separating the synthetic test pool from the training pool.
const TEST_POOL_SEED_FLIP: u64 = 0x9E37_79B9_7F4A_7C15;

/// Metric names a config may request.
pub const KNOWN_METRICS: [&str; 6] =
    ["auc_prc", "auc_roc", "accuracy", "top1_agreement", "predictive_kl", "occlusion_mse"];

#[derive(Debug, Error)]
pub enum ExperimentError {
    /// Bad config or usage; the CLI exits 1.
    #[error("config error: {0}")]
    Config(String),
    /// Failure while executing a valid config; the CLI exits 2.
    #[error("{0}")]
    Runtime(String),
}

impl ExperimentError {
    pub fn exit_code(&self) -> u8 {
        match self {
            ExperimentError::Config(_) => 1,
            ExperimentError::Runtime(_) => 2,
        }
    }
}

macro_rules! runtime_from {
    ($($err:ty),*) => {$(
        impl From<$err> for ExperimentError {
            fn from(e: $err) -> Self {
                ExperimentError::Runtime(e.to_string())
            }
        }
    )*};
}
runtime_from!(DataError, DistillError, MetricError, ModelError, SaliencyError, TensorError);

impl From<std::io::Error> for ExperimentError {
    fn from(e: std::io::Error) -> Self {
        ExperimentError::Runtime(format!("io: {e}"))
    }
}

/// Where the instances come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    /// Delimited train/test files with leading labels, UCR style.
    Archive { train_path: PathBuf, test_path: PathBuf },
    /// Synthetic cylinder/bell/funnel pools, three classes.
    Cbf { train_per_class: usize, test_per_class: usize, length: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    Tau,
    Width,
    NumSubsequences,
    Variant,
    TrainFraction,
    FgsmEpsilon,
}

impl AblationAxis {
    fn name(self) -> &'static str {
        match self {
            AblationAxis::Tau => "tau",
            AblationAxis::Width => "width",
            AblationAxis::NumSubsequences => "num_subsequences",
            AblationAxis::Variant => "variant",
            AblationAxis::TrainFraction => "train_fraction",
            AblationAxis::FgsmEpsilon => "fgsm_epsilon",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSettings {
    pub axis: AblationAxis,
    pub values: Vec<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Dataset label used in score tables and report rows.
    pub name: String,
    pub dataset: DatasetSource,
    pub teacher: ModelSpec,
    pub student: ModelSpec,
    pub objectives: Vec<Objective>,
    pub distill: DistillConfig,
    pub metrics: Vec<String>,
    /// Student run seeds; one student per (objective, seed).
    pub seeds: Vec<u64>,
    /// Teacher candidates trained from seeds `distill.seed + 0..teacher_seeds`.
    pub teacher_seeds: usize,
    /// Search `distill.beta_grid` per student instead of using `distill.beta`.
    pub use_beta_grid: bool,
    pub val_fraction: f64,
    pub output_dir: PathBuf,
    pub ablation: Option<AblationSettings>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "cbf".into(),
            dataset: DatasetSource::Cbf {
                train_per_class: 10,
                test_per_class: 300,
                length: 100,
            },
            teacher: ModelSpec::fcn(3, 32, 3, 100, 1),
            student: ModelSpec::fcn(2, 4, 3, 100, 1),
            objectives: vec![Objective::Base, Objective::BaseKd, Objective::Tsd],
            distill: DistillConfig::default(),
            metrics: vec![
                "auc_prc".into(),
                "auc_roc".into(),
                "accuracy".into(),
                "top1_agreement".into(),
                "predictive_kl".into(),
            ],
            seeds: vec![0, 1, 2, 3, 4],
            teacher_seeds: 5,
            use_beta_grid: false,
            val_fraction: 0.2,
            output_dir: PathBuf::from("runs/cbf"),
            ablation: None,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            ExperimentError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        let config: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| ExperimentError::Config(format!("bad config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |msg: String| Err(ExperimentError::Config(msg));
        if self.name.is_empty() {
            return bad("name must not be empty".into());
        }
        for (role, spec) in [("teacher", &self.teacher), ("student", &self.student)] {
            spec.validate()
                .map_err(|e| ExperimentError::Config(format!("{role} spec: {e}")))?;
            if spec.input_channels != 1 {
                return bad(format!("{role} must be univariate (input_channels 1)"));
            }
        }
        if self.teacher.num_classes != self.student.num_classes
            || self.teacher.input_length != self.student.input_length
        {
            return bad("teacher and student must share num_classes and input_length".into());
        }
        if let DatasetSource::Cbf { train_per_class, test_per_class, length } = &self.dataset {
            if *train_per_class < 2 || *test_per_class < 1 || *length < 8 {
                return bad("cbf needs train_per_class >= 2, test_per_class >= 1, length >= 8".into());
            }
            if self.teacher.num_classes != 3 {
                return bad("cbf is a three-class generator".into());
            }
        }
        if self.objectives.is_empty() {
            return bad("objectives must not be empty".into());
        }
        if self.metrics.is_empty() {
            return bad("metrics must not be empty".into());
        }
        for m in &self.metrics {
            if !KNOWN_METRICS.contains(&m.as_str()) {
                return bad(format!("unknown metric {m:?}; known: {}", KNOWN_METRICS.join(", ")));
            }
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        if self.teacher_seeds < 1 {
            return bad("teacher_seeds must be >= 1".into());
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad(format!("val_fraction must be in (0, 1), got {}", self.val_fraction));
        }
        self.distill
            .validate()
            .map_err(|e| ExperimentError::Config(e.to_string()))?;
        if let Some(ablation) = &self.ablation {
            if ablation.values.is_empty() {
                return bad("ablation.values must not be empty".into());
            }
        }
        Ok(())
    }

    /// Applies CLI overrides, yielding the effective config every command
    /// echoes next to its outputs.
    pub fn effective(&self, out: Option<&Path>, seed: Option<u64>) -> Self {
        let mut c = self.clone();
        if let Some(out) = out {
            c.output_dir = out.to_path_buf();
        }
        if let Some(seed) = seed {
            c.distill.seed = seed;
        }
        c
    }

    fn echo(&self, out: &Path) -> Result<(), ExperimentError> {
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| ExperimentError::Runtime(format!("config echo: {e}")))?;
        text.push('\n');
        write_atomic(&out.join("config.json"), text.as_bytes())?;
        Ok(())
    }
}

/// The three splits every command works with.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: TimeSeriesDataset,
    pub val: TimeSeriesDataset,
    pub test: TimeSeriesDataset,
}

/// Loads or generates the dataset and produces prepared train/val/test
/// splits. Runs before any output is written so failures leave nothing
/// behind.
pub fn resolve_data(config: &ExperimentConfig) -> Result<PreparedData, ExperimentError> {
    let seed = config.distill.seed;
    let (pool, test) = match &config.dataset {
        DatasetSource::Archive { train_path, test_path } => {
            let pool = load_archive(train_path).map_err(|e| {
                ExperimentError::Runtime(format!("dataset {}: {e}", train_path.display()))
            })?;
            let test = load_archive(test_path).map_err(|e| {
                ExperimentError::Runtime(format!("dataset {}: {e}", test_path.display()))
            })?;
            (pool, test)
        }
        DatasetSource::Cbf { train_per_class, test_per_class, length } => {
            let pool = generate_cbf(*train_per_class, *length, seed)?;
            let test = generate_cbf(*test_per_class, *length, seed ^ TEST_POOL_SEED_FLIP)?;
            (pool, test)
        }
    };
    if pool.num_classes != config.teacher.num_classes {
        return Err(ExperimentError::Runtime(format!(
            "dataset has {} classes, model specs expect {}",
            pool.num_classes, config.teacher.num_classes
        )));
    }
    let target = config.teacher.input_length;
    let pool = prepare(&pool, target)?;
    let mut test = prepare(&test, target)?;
    test.split = Split::Test;
    let split = split_train_val(&pool, config.val_fraction, seed)?;
    for w in &split.warnings {
        eprintln!("warning: {w}");
    }
    Ok(PreparedData { train: split.train, val: split.val, test })
}

/// Stratified reduction of a split to `fraction` of each class, at least one
/// instance per class; `fraction` 1 is an exact no-op.
pub fn subsample(
    data: &TimeSeriesDataset,
    fraction: f64,
    seed: u64,
) -> Result<TimeSeriesDataset, ExperimentError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(ExperimentError::Config(format!(
            "train_fraction must be in (0, 1], got {fraction}"
        )));
    }
    if fraction == 1.0 {
        return Ok(data.clone());
    }
    let mut keep = Vec::new();
    for class in 0..data.num_classes {
        let mut idx: Vec<usize> = (0..data.len())
            .filter(|&i| data.instances[i].label == class)
            .collect();
        if idx.is_empty() {
            continue;
        }
        let want = ((fraction * idx.len() as f64).round() as usize).clamp(1, idx.len());
        idx.shuffle(&mut rng::stream(seed, &format!("subsample/class{class}")));
        keep.extend(idx.into_iter().take(want));
    }
    keep.sort_unstable();
    Ok(TimeSeriesDataset {
        instances: keep.iter().map(|&i| data.instances[i].clone()).collect(),
        num_classes: data.num_classes,
        series_length: data.series_length,
        name: data.name.clone(),
        split: data.split,
    })
}

fn with_pool<T: Send>(
    jobs: Option<usize>,
    f: impl FnOnce() -> Result<T, ExperimentError> + Send,
) -> Result<T, ExperimentError> {
    match jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| ExperimentError::Runtime(format!("thread pool: {e}")))?
            .install(f),
        None => f(),
    }
}

fn objective_label(o: Objective) -> &'static str {
    match o {
        Objective::Base => "base",
        Objective::BaseKd => "base_kd",
        Objective::Tsd => "tsd",
    }
}

fn dataset_tensor(data: &TimeSeriesDataset) -> Result<Tensor, ExperimentError> {
    Ok(Tensor::new(vec![data.len(), 1, data.series_length], data.flat_values())?)
}

fn softmax_rows(logits: &[f64], classes: usize, tau: f64) -> Result<Vec<f64>, ExperimentError> {
    let mut probs = Vec::with_capacity(logits.len());
    for row in logits.chunks(classes) {
        probs.extend(softmax_temperature(row, tau)?);
    }
    Ok(probs)
}

/// Everything evaluation needs about the fixed teacher and test split.
struct EvalContext<'a> {
    teacher: &'a ModelParams,
    test: &'a TimeSeriesDataset,
    labels: Vec<usize>,
    metrics: &'a [String],
    tau_kd: f64,
    teacher_logits: Vec<f64>,
    teacher_occlusion: Option<Vec<Vec<f64>>>,
}

fn occlusion_maps(
    params: &ModelParams,
    data: &TimeSeriesDataset,
) -> Result<Vec<Vec<f64>>, ExperimentError> {
    data.instances.iter().map(|x| Ok(occlusion_map(params, x, 1, 0.0)?)).collect()
}

fn build_eval_context<'a>(
    teacher: &'a ModelParams,
    test: &'a TimeSeriesDataset,
    metrics: &'a [String],
    tau_kd: f64,
) -> Result<EvalContext<'a>, ExperimentError> {
    let teacher_logits = forward(teacher, &dataset_tensor(test)?)?.values().to_vec();
    let teacher_occlusion = if metrics.iter().any(|m| m == "occlusion_mse") {
        Some(occlusion_maps(teacher, test)?)
    } else {
        None
    };
    Ok(EvalContext {
        teacher,
        test,
        labels: test.labels(),
        metrics,
        tau_kd,
        teacher_logits,
        teacher_occlusion,
    })
}

/// Test-set metrics for one student. `fgsm_epsilon` > 0 evaluates on inputs
/// perturbed against the student; occlusion maps always use clean inputs.
fn evaluate_student(
    ctx: &EvalContext,
    student: &ModelParams,
    fgsm_epsilon: Option<f64>,
) -> Result<BTreeMap<String, f64>, ExperimentError> {
    let classes = ctx.teacher.spec().num_classes;
    let t_len = ctx.test.series_length;
    let n = ctx.test.len();

    let adversarial = matches!(fgsm_epsilon, Some(e) if e > 0.0);
    let (inputs, teacher_logits) = if adversarial {
        let eps = fgsm_epsilon.expect("epsilon present");
        let mut rows = Vec::with_capacity(n * t_len);
        for x in &ctx.test.instances {
            rows.extend(fgsm_perturb(student, x, eps)?);
        }
        let t = forward(ctx.teacher, &Tensor::new(vec![n, 1, t_len], rows.clone())?)?
            .values()
            .to_vec();
        (rows, t)
    } else {
        (ctx.test.flat_values(), ctx.teacher_logits.clone())
    };
    let student_logits =
        forward(student, &Tensor::new(vec![n, 1, t_len], inputs)?)?.values().to_vec();

    let student_probs = softmax_rows(&student_logits, classes, 1.0)?;
    let student_preds: Vec<usize> = student_probs.chunks(classes).map(argmax).collect();
    let teacher_preds: Vec<usize> = teacher_logits.chunks(classes).map(argmax).collect();

    let mut out = BTreeMap::new();
    for metric in ctx.metrics {
        let value = match metric.as_str() {
            "auc_prc" => auc_prc(&student_probs, classes, &ctx.labels)?,
            "auc_roc" => auc_roc(&student_probs, classes, &ctx.labels)?,
            "accuracy" => accuracy(&student_preds, &ctx.labels)?,
            "top1_agreement" => top1_agreement(&teacher_preds, &student_preds)?,
            "predictive_kl" => {
                let t = softmax_rows(&teacher_logits, classes, ctx.tau_kd)?;
                let s = softmax_rows(&student_logits, classes, ctx.tau_kd)?;
                predictive_kl(&t, &s, classes)?
            }
            "occlusion_mse" => {
                let teacher_maps =
                    ctx.teacher_occlusion.as_ref().expect("teacher occlusion cached");
                let mut total = 0.0;
                for (x, t_map) in ctx.test.instances.iter().zip(teacher_maps) {
                    let s_map = occlusion_map(student, x, 1, 0.0)?;
                    total += saliency_mse(t_map, &s_map)?;
                }
                total / n as f64
            }
            other => {
                return Err(ExperimentError::Config(format!("unknown metric {other:?}")))
            }
        };
        out.insert(metric.clone(), value);
    }
    Ok(out)
}

fn teacher_dir(out: &Path) -> PathBuf {
    out.join("teacher")
}

fn teacher_checkpoint(out: &Path) -> PathBuf {
    teacher_dir(out).join("teacher.json")
}

fn write_selection(
    out: &Path,
    runs: &[TrainedArtifact],
    winner: usize,
) -> Result<(), ExperimentError> {
    let mut text = String::from("seed\tbest_epoch\tval_auc_prc\tselected\n");
    for (i, run) in runs.iter().enumerate() {
        writeln!(
            text,
            "{}\t{}\t{:?}\t{}",
            run.config.seed,
            run.best_epoch,
            run.best_val_auc(),
            usize::from(i == winner)
        )
        .expect("string write");
    }
    write_atomic(&teacher_dir(out).join("selection.tsv"), text.as_bytes())?;
    Ok(())
}

fn train_and_store_teacher(
    config: &ExperimentConfig,
    data: &PreparedData,
) -> Result<TrainedArtifact, ExperimentError> {
    let out = &config.output_dir;
    let runs = train_teacher_runs(
        &config.teacher,
        &data.train,
        &data.val,
        &config.distill,
        config.teacher_seeds,
    )?;
    let winner = select_teacher(&runs);
    write_selection(out, &runs, winner)?;
    for run in &runs {
        run.write_history(&teacher_dir(out).join(format!("seed{}_history.tsv", run.config.seed)))?;
    }
    let teacher = runs.into_iter().nth(winner).expect("winner index in range");
    teacher.save(&teacher_checkpoint(out))?;
    Ok(teacher)
}

/// Reuses the stored teacher checkpoint when present, training one otherwise.
fn obtain_teacher(
    config: &ExperimentConfig,
    data: &PreparedData,
) -> Result<TrainedArtifact, ExperimentError> {
    let path = teacher_checkpoint(&config.output_dir);
    if path.exists() {
        let teacher = TrainedArtifact::load(&path)?;
        if teacher.params.spec() != &config.teacher {
            return Err(ExperimentError::Runtime(format!(
                "teacher checkpoint {} does not match the configured teacher spec",
                path.display()
            )));
        }
        return Ok(teacher);
    }
    train_and_store_teacher(config, data)
}

/// Trains teacher candidates, writes the selection record, per-seed logs, and
/// the winning checkpoint.
pub fn cmd_train_teacher(
    config: &ExperimentConfig,
    jobs: Option<usize>,
) -> Result<(), ExperimentError> {
    config.validate()?;
    let data = resolve_data(config)?;
    with_pool(jobs, || {
        config.echo(&config.output_dir)?;
        train_and_store_teacher(config, &data)?;
        Ok(())
    })
}

struct StudentRun {
    method: &'static str,
    seed: u64,
    artifact: TrainedArtifact,
    best_beta: Option<f64>,
    grid: Vec<(f64, TrainedArtifact)>,
}

fn train_students(
    config: &ExperimentConfig,
    teacher: &TrainedArtifact,
    train: &TimeSeriesDataset,
    val: &TimeSeriesDataset,
) -> Result<Vec<StudentRun>, ExperimentError> {
    let pairs: Vec<(Objective, u64)> = config
        .objectives
        .iter()
        .flat_map(|&o| config.seeds.iter().map(move |&s| (o, s)))
        .collect();
    pairs
        .into_par_iter()
        .map(|(objective, seed)| {
            let mut c = config.distill.clone();
            c.objective = objective;
            c.seed = seed;
            if config.use_beta_grid && objective != Objective::Base {
                let runs = grid_search_runs(teacher, &config.student, train, val, &c)?;
                let scored: Vec<(f64, f64)> =
                    runs.iter().map(|(b, a)| (*b, a.best_val_auc())).collect();
                let winner = select_beta_index(&scored);
                let best_beta = runs[winner].0;
                let artifact = runs[winner].1.clone();
                Ok(StudentRun {
                    method: objective_label(objective),
                    seed,
                    artifact,
                    best_beta: Some(best_beta),
                    grid: runs,
                })
            } else {
                let artifact = distill(teacher, &config.student, train, val, &c)?;
                Ok(StudentRun {
                    method: objective_label(objective),
                    seed,
                    artifact,
                    best_beta: None,
                    grid: Vec::new(),
                })
            }
        })
        .collect()
}

fn write_student_run(dir: &Path, run: &StudentRun) -> Result<(), ExperimentError> {
    run.artifact.save(&dir.join("student.json"))?;
    run.artifact.write_history(&dir.join("history.tsv"))?;
    if !run.grid.is_empty() {
        let best = run.best_beta.expect("grid runs carry a winner");
        let mut text = String::from("beta\tbest_epoch\tval_auc_prc\tselected\n");
        for (beta, artifact) in &run.grid {
            writeln!(
                text,
                "{beta:?}\t{}\t{:?}\t{}",
                artifact.best_epoch,
                artifact.best_val_auc(),
                usize::from(*beta == best)
            )
            .expect("string write");
        }
        write_atomic(&dir.join("beta_grid.tsv"), text.as_bytes())?;
    }
    Ok(())
}

/// Distills one student per (objective, seed), evaluates on the test split,
/// and appends everything to the run's score table.
pub fn cmd_distill(config: &ExperimentConfig, jobs: Option<usize>) -> Result<(), ExperimentError> {
    config.validate()?;
    let data = resolve_data(config)?;
    with_pool(jobs, || {
        let out = &config.output_dir;
        config.echo(out)?;
        let teacher = obtain_teacher(config, &data)?;
        let runs = train_students(config, &teacher, &data.train, &data.val)?;
        let ctx =
            build_eval_context(&teacher.params, &data.test, &config.metrics, config.distill.tau_kd)?;
        let evaluated: Vec<(usize, BTreeMap<String, f64>)> = runs
            .par_iter()
            .enumerate()
            .map(|(i, run)| Ok((i, evaluate_student(&ctx, &run.artifact.params, None)?)))
            .collect::<Result<_, ExperimentError>>()?;
        let mut table = ScoreTable::new();
        for (i, values) in evaluated {
            let run = &runs[i];
            for (metric, value) in &values {
                table.insert(run.method, &config.name, run.seed, metric, *value)?;
            }
            if let Some(beta) = run.best_beta {
                table.insert(run.method, &config.name, run.seed, "beta", beta)?;
            }
            write_student_run(
                &out.join("students").join(run.method).join(format!("seed{}", run.seed)),
                run,
            )?;
        }
        table.write(&out.join("scores.tsv"))?;
        Ok(())
    })
}

fn axis_f64(value: &serde_json::Value) -> Result<f64, ExperimentError> {
    value
        .as_f64()
        .ok_or_else(|| ExperimentError::Config(format!("expected a number, got {value}")))
}

fn axis_usize(value: &serde_json::Value) -> Result<usize, ExperimentError> {
    value
        .as_u64()
        .map(|v| v as usize)
        .ok_or_else(|| ExperimentError::Config(format!("expected a non-negative integer, got {value}")))
}

fn axis_variant(value: &serde_json::Value) -> Result<SaliencyVariant, ExperimentError> {
    serde_json::from_value(value.clone())
        .map_err(|_| ExperimentError::Config(format!("expected a saliency variant, got {value}")))
}

/// One distillation per axis value (objectives and seeds shared), reusing the
/// stored teacher, keyed by `{axis}={value}` in the sweep's score table.
pub fn cmd_ablate(config: &ExperimentConfig, jobs: Option<usize>) -> Result<(), ExperimentError> {
    config.validate()?;
    let settings = config
        .ablation
        .clone()
        .ok_or_else(|| ExperimentError::Config("ablate requires an ablation section".into()))?;
    let data = resolve_data(config)?;
    with_pool(jobs, || {
        let out = &config.output_dir;
        config.echo(out)?;
        let teacher = obtain_teacher(config, &data)?;
        let ctx =
            build_eval_context(&teacher.params, &data.test, &config.metrics, config.distill.tau_kd)?;
        let sweep_dir = out.join(format!("ablate_{}", settings.axis.name()));
        let mut table = ScoreTable::new();

        // Epsilon only changes evaluation, so its students are shared.
        if settings.axis == AblationAxis::FgsmEpsilon {
            let runs = train_students(config, &teacher, &data.train, &data.val)?;
            for run in &runs {
                write_student_run(
                    &sweep_dir.join("students").join(run.method).join(format!("seed{}", run.seed)),
                    run,
                )?;
            }
            for value in &settings.values {
                let eps = axis_f64(value)?;
                if !(eps >= 0.0 && eps.is_finite()) {
                    return Err(ExperimentError::Config(format!(
                        "fgsm_epsilon must be >= 0, got {eps}"
                    )));
                }
                let label = format!("fgsm_epsilon={eps:?}");
                let evaluated: Vec<(usize, BTreeMap<String, f64>)> = runs
                    .par_iter()
                    .enumerate()
                    .map(|(i, run)| {
                        Ok((i, evaluate_student(&ctx, &run.artifact.params, Some(eps))?))
                    })
                    .collect::<Result<_, ExperimentError>>()?;
                for (i, values) in evaluated {
                    for (metric, v) in &values {
                        table.insert(runs[i].method, &label, runs[i].seed, metric, *v)?;
                    }
                }
            }
        } else {
            for value in &settings.values {
                let mut c = config.clone();
                let mut train = data.train.clone();
                let label = match settings.axis {
                    AblationAxis::Tau => {
                        let tau = axis_f64(value)?;
                        c.distill.tau_saliency = tau;
                        format!("tau={tau:?}")
                    }
                    AblationAxis::Width => {
                        let width = axis_usize(value)?;
                        c.distill.grid.width = width;
                        format!("width={width}")
                    }
                    AblationAxis::NumSubsequences => {
                        let num = axis_usize(value)?;
                        c.distill.grid.num_subsequences = num;
                        format!("num_subsequences={num}")
                    }
                    AblationAxis::Variant => {
                        let variant = axis_variant(value)?;
                        c.distill.variant = variant;
                        format!("variant={}", serde_json::to_string(&variant).expect("variant name").trim_matches('"'))
                    }
                    AblationAxis::TrainFraction => {
                        let fraction = axis_f64(value)?;
                        train = subsample(&data.train, fraction, config.distill.seed)?;
                        format!("train_fraction={fraction:?}")
                    }
                    AblationAxis::FgsmEpsilon => unreachable!("handled above"),
                };
                c.distill.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
                let runs = train_students(&c, &teacher, &train, &data.val)?;
                let evaluated: Vec<(usize, BTreeMap<String, f64>)> = runs
                    .par_iter()
                    .enumerate()
                    .map(|(i, run)| Ok((i, evaluate_student(&ctx, &run.artifact.params, None)?)))
                    .collect::<Result<_, ExperimentError>>()?;
                for (i, values) in evaluated {
                    for (metric, v) in &values {
                        table.insert(runs[i].method, &label, runs[i].seed, metric, *v)?;
                    }
                    write_student_run(
                        &sweep_dir
                            .join(&label)
                            .join(runs[i].method)
                            .join(format!("seed{}", runs[i].seed)),
                        &runs[i],
                    )?;
                }
            }
        }

        table.write(&sweep_dir.join("scores.tsv"))?;
        for metric in &config.metrics {
            write_atomic(
                &sweep_dir.join(format!("pivot_{metric}.tsv")),
                table.pivot(metric)?.as_bytes(),
            )?;
        }
        Ok(())
    })
}

/// Build and environment identifiers embedded in reports; stable for a given
/// binary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildInfo {
    pub package_version: String,
    pub os: String,
    pub arch: String,
}

impl BuildInfo {
    fn current() -> Self {
        BuildInfo {
            package_version: env!("CARGO_PKG_VERSION").to_string(),
            os: std::env::consts::OS.to_string(),
            arch: std::env::consts::ARCH.to_string(),
        }
    }
}

/// Aggregates a finished run directory: pivots per metric, rank/wins
/// standings, a JSON report with the config echo, and per-instance saliency
/// exports for plotting. Regeneration is byte-identical.
pub fn cmd_report(run_dir: &Path) -> Result<(), ExperimentError> {
    let required = ["config.json", "scores.tsv", "teacher/teacher.json"];
    let missing: Vec<&str> =
        required.iter().copied().filter(|p| !run_dir.join(p).exists()).collect();
    if !missing.is_empty() {
        return Err(ExperimentError::Runtime(format!(
            "incomplete run directory {}: missing {}",
            run_dir.display(),
            missing.join(", ")
        )));
    }
    let config = ExperimentConfig::load(&run_dir.join("config.json"))?;
    let table = ScoreTable::from_delimited(&std::fs::read_to_string(run_dir.join("scores.tsv"))?)?;
    let teacher = TrainedArtifact::load(&teacher_checkpoint(run_dir))?;

    let report_dir = run_dir.join("report");
    for metric in table.metric_names() {
        // Auxiliary values like the selected beta exist only for some
        // methods and cannot be pivoted.
        if let Ok(pivot) = table.pivot(&metric) {
            write_atomic(&report_dir.join(format!("pivot_{metric}.tsv")), pivot.as_bytes())?;
        }
    }

    let standings = rank_and_wins(&table, "auc_prc").ok();
    if let Some(standings) = &standings {
        let mut text = String::from("method\tavg_rank\twins\tlosses\n");
        for (method, s) in standings {
            writeln!(text, "{method}\t{:?}\t{}\t{}", s.avg_rank, s.wins, s.losses)
                .expect("string write");
        }
        write_atomic(&report_dir.join("standings.tsv"), text.as_bytes())?;
    }

    let mut summary = String::new();
    writeln!(summary, "run: {}", config.name).expect("string write");
    writeln!(summary, "teacher best val auc_prc: {:?}", teacher.best_val_auc())
        .expect("string write");
    for metric in table.metric_names() {
        writeln!(summary, "\nseed-averaged {metric}:").expect("string write");
        for ((method, dataset), value) in table.seed_averaged(&metric) {
            writeln!(summary, "  {method} on {dataset}: {value:?}").expect("string write");
        }
    }
    if let Some(standings) = &standings {
        writeln!(summary, "\nauc_prc standings (rank / wins / losses):").expect("string write");
        for (method, s) in standings {
            writeln!(summary, "  {method}: {:?} / {} / {}", s.avg_rank, s.wins, s.losses)
                .expect("string write");
        }
    }
    write_atomic(&report_dir.join("summary.txt"), summary.as_bytes())?;

    #[derive(Serialize)]
    struct Report<'a> {
        build: BuildInfo,
        config: &'a ExperimentConfig,
        standings: &'a Option<BTreeMap<String, crate::metrics::MethodStanding>>,
    }
    let mut text = serde_json::to_string_pretty(&Report {
        build: BuildInfo::current(),
        config: &config,
        standings: &standings,
    })
    .map_err(|e| ExperimentError::Runtime(format!("report encoding: {e}")))?;
    text.push('\n');
    write_atomic(&report_dir.join("report.json"), text.as_bytes())?;

    export_report_saliency(run_dir, &report_dir, &config, &teacher)?;
    Ok(())
}

/// Occlusion and gradient maps for the first few test instances, teacher plus
/// every student checkpoint found, for external plotting.
fn export_report_saliency(
    run_dir: &Path,
    report_dir: &Path,
    config: &ExperimentConfig,
    teacher: &TrainedArtifact,
) -> Result<(), ExperimentError> {
    let data = resolve_data(config)?;
    let count = data.test.len().min(8);
    let sample = &data.test.instances[..count];
    let saliency_dir = report_dir.join("saliency");

    let export_model = |name: &str, params: &ModelParams| -> Result<(), ExperimentError> {
        let occlusion: Vec<Vec<f64>> =
            sample.iter().map(|x| Ok::<_, ExperimentError>(occlusion_map(params, x, 1, 0.0)?)).collect::<Result<_, _>>()?;
        let gradient: Vec<Vec<f64>> =
            sample.iter().map(|x| Ok::<_, ExperimentError>(gradient_saliency(params, x)?)).collect::<Result<_, _>>()?;
        export_maps(&occlusion, &saliency_dir.join(format!("occlusion_{name}.tsv")))?;
        export_maps(&gradient, &saliency_dir.join(format!("gradient_{name}.tsv")))?;
        Ok(())
    };
    export_model("teacher", &teacher.params)?;

    let students_dir = run_dir.join("students");
    if students_dir.is_dir() {
        let mut methods: Vec<PathBuf> = std::fs::read_dir(&students_dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        methods.sort();
        for method_dir in methods {
            let method = method_dir
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            let mut seats: Vec<PathBuf> = std::fs::read_dir(&method_dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.join("student.json").exists())
                .collect();
            seats.sort();
            if let Some(first) = seats.first() {
                let artifact = TrainedArtifact::load(&first.join("student.json"))?;
                export_model(&method, &artifact.params)?;
            }
        }
    }
    Ok(())
}
