//! Temporal saliency and post-hoc attribution.
//!
//! The central quantity is the shift in a model's softened predictive
//! distribution when a subsequence of the input is spliced over with the
//! corresponding time steps of an opposing-class background instance. A
//! [`SubsequenceGrid`] fixes which windows are probed; profiles come in three
//! variants (full-distribution KL, target-vs-rest binary KL, and a plain
//! target-probability shift). Occlusion, gradient saliency, integrated
//! gradients and FGSM probes round out the evaluation side.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Instance, TimeSeriesDataset};
use crate::fsutil::write_atomic;
use crate::models::{forward, forward_var, ModelError, ModelParams, ModelSpec, ParamVars};
use crate::rng;
use crate::tensor::{kl_divergence, softmax_temperature, Tape, Tensor, TensorError, Var};

/// Floor for the per-instance mean saliency used as a normalizer.
pub const MEAN_FLOOR: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum SaliencyError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("saliency io: {0}")]
    Io(#[from] std::io::Error),
}

/// How the predictive shift of a perturbation is condensed to one score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SaliencyVariant {
    /// KL over the full softened class distribution.
    Whole,
    /// KL over (target class, everything else) two-entry distributions.
    Binary,
    /// Absolute shift of the target-class probability, always at temperature 1.
    TargetScalar,
}

/// Windows probed by the saliency loss: `(start, width)` pairs, unique and
/// sorted, each contained in `[0, series_length)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsequenceGrid {
    pairs: Vec<(usize, usize)>,
    series_length: usize,
}

impl SubsequenceGrid {
    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn series_length(&self) -> usize {
        self.series_length
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Evenly spread starts `round(i*(T-width)/(num-1))`, de-duplicated, so the
/// first window begins at 0 and the last ends at T.
pub fn make_grid(
    series_length: usize,
    num_subsequences: usize,
    width: usize,
) -> Result<SubsequenceGrid, SaliencyError> {
    if width < 1 || width > series_length {
        return Err(SaliencyError::InvalidArgument(format!(
            "width {width} outside 1..={series_length}"
        )));
    }
    let max_num = series_length - width + 1;
    if num_subsequences < 1 || num_subsequences > max_num {
        return Err(SaliencyError::InvalidArgument(format!(
            "num_subsequences {num_subsequences} outside 1..={max_num} for width {width}"
        )));
    }
    let span = (series_length - width) as f64;
    let mut pairs: Vec<(usize, usize)> = if num_subsequences == 1 {
        vec![(0, width)]
    } else {
        (0..num_subsequences)
            .map(|i| {
                let start = (i as f64 * span / (num_subsequences - 1) as f64).round() as usize;
                (start, width)
            })
            .collect()
    };
    pairs.dedup();
    Ok(SubsequenceGrid { pairs, series_length })
}

/// One saliency score per grid entry plus their arithmetic mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyProfile {
    pub scores: Vec<f64>,
    pub mean: f64,
    pub variant: SaliencyVariant,
    pub tau: f64,
}

/// Splices `background[t..t+z)` into a copy of `x`.
pub fn perturb(
    x: &[f64],
    background: &[f64],
    t: usize,
    z: usize,
) -> Result<Vec<f64>, SaliencyError> {
    if x.len() != background.len() {
        return Err(SaliencyError::InvalidArgument(format!(
            "series lengths differ: {} vs {}",
            x.len(),
            background.len()
        )));
    }
    if t + z > x.len() {
        return Err(SaliencyError::InvalidArgument(format!(
            "window [{t}, {t}+{z}) exceeds length {}",
            x.len()
        )));
    }
    let mut out = x.to_vec();
    out[t..t + z].copy_from_slice(&background[t..t + z]);
    Ok(out)
}

fn effective_tau(variant: SaliencyVariant, tau: f64) -> f64 {
    match variant {
        SaliencyVariant::TargetScalar => 1.0,
        _ => tau,
    }
}

/// Perturbation scores from precomputed logits: row 0 is the unperturbed
/// forward, row 1+j the j-th grid entry.
fn scores_from_logits(
    logits: &[f64],
    num_classes: usize,
    target: usize,
    tau: f64,
    variant: SaliencyVariant,
) -> Result<Vec<f64>, SaliencyError> {
    let rows = logits.len() / num_classes;
    let tau = effective_tau(variant, tau);
    let base = softmax_temperature(&logits[..num_classes], tau)?;
    let base_binary = [base[target], 1.0 - base[target]];
    let mut scores = Vec::with_capacity(rows - 1);
    for r in 1..rows {
        let row = &logits[r * num_classes..(r + 1) * num_classes];
        let p = softmax_temperature(row, tau)?;
        // KL is nonnegative; the clamp only absorbs float cancellation noise
        // when the two distributions nearly coincide.
        let score = match variant {
            SaliencyVariant::Whole => kl_divergence(&base, &p)?.max(0.0),
            SaliencyVariant::Binary => {
                kl_divergence(&base_binary, &[p[target], 1.0 - p[target]])?.max(0.0)
            }
            SaliencyVariant::TargetScalar => (base[target] - p[target]).abs(),
        };
        scores.push(score);
    }
    Ok(scores)
}

/// Temporal saliency profile of a model for one instance.
///
/// Runs one batched forward holding the original plus every perturbed copy;
/// no gradients are tracked. `TargetScalar` ignores `tau` and uses 1.
pub fn temporal_saliency(
    params: &ModelParams,
    x: &Instance,
    background: &Instance,
    grid: &SubsequenceGrid,
    tau: f64,
    variant: SaliencyVariant,
) -> Result<SaliencyProfile, SaliencyError> {
    let spec = params.spec();
    if tau <= 0.0 || !tau.is_finite() {
        return Err(SaliencyError::InvalidArgument(format!("tau must be positive, got {tau}")));
    }
    if grid.series_length() != x.values.len() || spec.input_length != x.values.len() {
        return Err(SaliencyError::InvalidArgument(format!(
            "grid length {}, model length {}, instance length {}",
            grid.series_length(),
            spec.input_length,
            x.values.len()
        )));
    }
    if x.label >= spec.num_classes {
        return Err(SaliencyError::InvalidArgument(format!(
            "label {} outside {} classes",
            x.label, spec.num_classes
        )));
    }
    let t_len = x.values.len();
    let rows = 1 + grid.len();
    let mut batch = Vec::with_capacity(rows * t_len);
    batch.extend_from_slice(&x.values);
    for &(t, z) in grid.pairs() {
        batch.extend(perturb(&x.values, &background.values, t, z)?);
    }
    let batch = Tensor::new(vec![rows, 1, t_len], batch)?;
    let logits = forward(params, &batch)?;
    let scores =
        scores_from_logits(logits.values(), spec.num_classes, x.label, tau, variant)?;
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    Ok(SaliencyProfile { scores, mean, variant, tau: effective_tau(variant, tau) })
}

/// Differentiable per-instance saliency nodes for a whole training batch.
///
/// All `(1 + grid)` student forwards of `batch.len()` instances run as a
/// single forward pass; the result holds, per instance, the `[grid]` score
/// vector node and its scalar mean node, ready for normalization inside the
/// distillation loss.
pub fn batched_saliency_on_tape(
    tape: &Tape,
    spec: &ModelSpec,
    vars: &ParamVars,
    batch: &[(&Instance, &Instance)],
    grid: &SubsequenceGrid,
    tau: f64,
    variant: SaliencyVariant,
) -> Result<Vec<(Var, Var)>, SaliencyError> {
    if batch.is_empty() {
        return Err(SaliencyError::InvalidArgument("empty saliency batch".into()));
    }
    if tau <= 0.0 || !tau.is_finite() {
        return Err(SaliencyError::InvalidArgument(format!("tau must be positive, got {tau}")));
    }
    let t_len = grid.series_length();
    if spec.input_length != t_len {
        return Err(SaliencyError::InvalidArgument(format!(
            "grid length {} does not match model length {}",
            t_len, spec.input_length
        )));
    }
    let tau = effective_tau(variant, tau);
    let per_instance = 1 + grid.len();
    let rows = batch.len() * per_instance;
    let mut values = Vec::with_capacity(rows * t_len);
    for (x, background) in batch {
        if x.values.len() != t_len || background.values.len() != t_len {
            return Err(SaliencyError::InvalidArgument("instance length mismatch".into()));
        }
        values.extend_from_slice(&x.values);
        for &(t, z) in grid.pairs() {
            values.extend(perturb(&x.values, &background.values, t, z)?);
        }
    }
    let x_var = tape.constant(&Tensor::new(vec![rows, 1, t_len], values)?)?;
    let logits = forward_var(tape, spec, vars, x_var)?;
    let probs = tape.softmax_temperature(logits, tau)?;
    let classes = spec.num_classes;
    let one = tape.constant(&Tensor::scalar(1.0))?;
    let mut out = Vec::with_capacity(batch.len());
    for (b, (x, _)) in batch.iter().enumerate() {
        let base_row = b * per_instance;
        let target = x.label;
        let binary_of = |row: usize| -> Result<Var, SaliencyError> {
            let py = tape.select(probs, row * classes + target)?;
            let rest = tape.sub(one, py)?;
            Ok(tape.concat_scalars(&[py, rest])?)
        };
        let base_full = tape.slice_flat(probs, base_row * classes, classes)?;
        let mut scores = Vec::with_capacity(grid.len());
        for j in 0..grid.len() {
            let row = base_row + 1 + j;
            let score = match variant {
                SaliencyVariant::Whole => {
                    let p = tape.slice_flat(probs, row * classes, classes)?;
                    tape.kl_divergence(base_full, p)?
                }
                SaliencyVariant::Binary => {
                    let p = binary_of(base_row)?;
                    let q = binary_of(row)?;
                    tape.kl_divergence(p, q)?
                }
                SaliencyVariant::TargetScalar => {
                    let a = tape.select(probs, base_row * classes + target)?;
                    let c = tape.select(probs, row * classes + target)?;
                    tape.abs(tape.sub(a, c)?)?
                }
            };
            scores.push(score);
        }
        let scores = tape.concat_scalars(&scores)?;
        let mean = tape.mean(scores)?;
        out.push((scores, mean));
    }
    Ok(out)
}

/// Per-timestep drop in predicted-class probability when a sliding window is
/// replaced by `baseline_value`, averaged over the windows covering each step.
pub fn occlusion_map(
    params: &ModelParams,
    x: &Instance,
    window: usize,
    baseline_value: f64,
) -> Result<Vec<f64>, SaliencyError> {
    let t_len = x.values.len();
    if window < 1 || window > t_len {
        return Err(SaliencyError::InvalidArgument(format!(
            "window {window} outside 1..={t_len}"
        )));
    }
    let positions = t_len - window + 1;
    let mut batch = Vec::with_capacity((positions + 1) * t_len);
    batch.extend_from_slice(&x.values);
    for s in 0..positions {
        let mut masked = x.values.clone();
        masked[s..s + window].iter_mut().for_each(|v| *v = baseline_value);
        batch.extend(masked);
    }
    let logits = forward(params, &Tensor::new(vec![positions + 1, 1, t_len], batch)?)?;
    let classes = params.spec().num_classes;
    let predicted = argmax(&logits.values()[..classes]);
    let base = softmax_temperature(&logits.values()[..classes], 1.0)?[predicted];
    let mut total = vec![0.0; t_len];
    let mut cover = vec![0usize; t_len];
    for s in 0..positions {
        let row = &logits.values()[(s + 1) * classes..(s + 2) * classes];
        let drop = base - softmax_temperature(row, 1.0)?[predicted];
        for t in s..s + window {
            total[t] += drop;
            cover[t] += 1;
        }
    }
    for (v, &c) in total.iter_mut().zip(&cover) {
        *v /= c as f64;
    }
    Ok(total)
}

/// |d logit_predicted / d x_t| per timestep.
pub fn gradient_saliency(params: &ModelParams, x: &Instance) -> Result<Vec<f64>, SaliencyError> {
    let grad = predicted_logit_input_grad(params, &x.values)?;
    Ok(grad.into_iter().map(f64::abs).collect())
}

/// Riemann-midpoint integrated gradients of the predicted-class logit against
/// a straight path from `baseline` to `x`.
pub fn integrated_gradients(
    params: &ModelParams,
    x: &Instance,
    baseline: &Instance,
    steps: usize,
) -> Result<Vec<f64>, SaliencyError> {
    if steps < 1 {
        return Err(SaliencyError::InvalidArgument("steps must be at least 1".into()));
    }
    if baseline.values.len() != x.values.len() {
        return Err(SaliencyError::InvalidArgument(format!(
            "baseline length {} vs instance length {}",
            baseline.values.len(),
            x.values.len()
        )));
    }
    let t_len = x.values.len();
    let predicted = {
        let logits = forward(params, &Tensor::new(vec![1, 1, t_len], x.values.clone())?)?;
        argmax(logits.values())
    };
    let mut mean_grad = vec![0.0; t_len];
    for k in 0..steps {
        let alpha = (k as f64 + 0.5) / steps as f64;
        let point: Vec<f64> = x
            .values
            .iter()
            .zip(&baseline.values)
            .map(|(&xv, &bv)| bv + alpha * (xv - bv))
            .collect();
        let grad = logit_input_grad(params, &point, predicted)?;
        for (m, g) in mean_grad.iter_mut().zip(grad) {
            *m += g / steps as f64;
        }
    }
    Ok(x.values
        .iter()
        .zip(&baseline.values)
        .zip(mean_grad)
        .map(|((&xv, &bv), g)| (xv - bv) * g)
        .collect())
}

/// Fast gradient sign step against the cross-entropy of the true label.
pub fn fgsm_perturb(
    params: &ModelParams,
    x: &Instance,
    epsilon: f64,
) -> Result<Vec<f64>, SaliencyError> {
    if epsilon < 0.0 || !epsilon.is_finite() {
        return Err(SaliencyError::InvalidArgument(format!(
            "epsilon must be non-negative, got {epsilon}"
        )));
    }
    let t_len = x.values.len();
    let tape = Tape::new();
    let vars = params.attach_frozen(&tape)?;
    let input = Tensor::new(vec![1, 1, t_len], x.values.clone())?.with_requires_grad(true);
    let input_var = tape.leaf(&input)?;
    let logits = forward_var(&tape, params.spec(), &vars, input_var)?;
    let loss = tape.cross_entropy(logits, &[x.label])?;
    tape.backward(loss)?;
    let grad = tape.grad(input_var)?;
    Ok(x.values
        .iter()
        .zip(grad)
        .map(|(&v, g)| v + epsilon * sign(g))
        .collect())
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn predicted_logit_input_grad(
    params: &ModelParams,
    values: &[f64],
) -> Result<Vec<f64>, SaliencyError> {
    let logits = forward(params, &Tensor::new(vec![1, 1, values.len()], values.to_vec())?)?;
    logit_input_grad(params, values, argmax(logits.values()))
}

fn logit_input_grad(
    params: &ModelParams,
    values: &[f64],
    class: usize,
) -> Result<Vec<f64>, SaliencyError> {
    let tape = Tape::new();
    let vars = params.attach_frozen(&tape)?;
    let input =
        Tensor::new(vec![1, 1, values.len()], values.to_vec())?.with_requires_grad(true);
    let input_var = tape.leaf(&input)?;
    let logits = forward_var(&tape, params.spec(), &vars, input_var)?;
    let selected = tape.select(logits, class)?;
    tape.backward(selected)?;
    Ok(tape.grad(input_var)?)
}

/// Draws one opposing-class background per `(epoch, instance)` from a fixed
/// source split, deterministically under the seed.
#[derive(Debug)]
pub struct BackgroundSelector<'a> {
    seed: u64,
    source: &'a TimeSeriesDataset,
    opposing: Vec<Vec<usize>>,
}

impl<'a> BackgroundSelector<'a> {
    pub fn new(source: &'a TimeSeriesDataset, seed: u64) -> Result<Self, SaliencyError> {
        if source.num_classes < 2 {
            return Err(SaliencyError::InvalidArgument(
                "background source needs at least two classes".into(),
            ));
        }
        let mut opposing = vec![Vec::new(); source.num_classes];
        for (i, inst) in source.instances.iter().enumerate() {
            for (label, pool) in opposing.iter_mut().enumerate() {
                if inst.label != label {
                    pool.push(i);
                }
            }
        }
        Ok(BackgroundSelector { seed, source, opposing })
    }

    /// Index into the source split of the chosen background.
    pub fn select_index(&self, epoch: usize, instance_index: usize) -> Result<usize, SaliencyError> {
        let label = self
            .source
            .instances
            .get(instance_index)
            .ok_or_else(|| {
                SaliencyError::InvalidArgument(format!(
                    "instance index {instance_index} outside source of {}",
                    self.source.len()
                ))
            })?
            .label;
        let pool = &self.opposing[label];
        if pool.is_empty() {
            return Err(SaliencyError::InvalidArgument(format!(
                "no opposing-class instance for label {label}"
            )));
        }
        let mut rng =
            rng::stream(self.seed, &format!("background/epoch{epoch}/inst{instance_index}"));
        Ok(pool[rng.random_range(0..pool.len())])
    }

    pub fn select(&self, epoch: usize, instance_index: usize) -> Result<&'a Instance, SaliencyError> {
        Ok(&self.source.instances[self.select_index(epoch, instance_index)?])
    }
}

/// Writes one row per map: instance id, then the values, tab delimited.
pub fn export_maps(maps: &[Vec<f64>], path: &Path) -> Result<(), SaliencyError> {
    let mut text = String::new();
    for (i, map) in maps.iter().enumerate() {
        write!(text, "{i}").expect("string write");
        for v in map {
            write!(text, "\t{v:?}").expect("string write");
        }
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())?;
    Ok(())
}
