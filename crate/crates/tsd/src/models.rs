//! Teacher and student model families at desk scale.
//!
//! Three families cover the experiments: FCN stacks of
//! conv → per-channel scale/shift → ReLU blocks with global average pooling,
//! a stacked unidirectional LSTM read out at the last time step, and a plain
//! linear classifier over the flattened series. Construction is declarative:
//! a [`ModelSpec`] plus a seed fully determine every parameter bit.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fsutil::write_atomic;
use crate::rng;
use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Kernel sizes cycled across FCN blocks when none are given explicitly.
pub const DEFAULT_FCN_KERNELS: [usize; 3] = [8, 5, 3];

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint encoding: {0}")]
    Encoding(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ModelFamily {
    Fcn,
    Lstm,
    Linear,
}

/// Declarative description of one classifier.
///
/// `width` is Table-style "output dimension": first conv channel count for
/// FCN, hidden size for LSTM. `kernel_sizes` applies to FCN only and must
/// hold one entry per block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: ModelFamily,
    pub num_blocks: usize,
    pub width: usize,
    #[serde(default)]
    pub kernel_sizes: Vec<usize>,
    pub num_classes: usize,
    pub input_length: usize,
    pub input_channels: usize,
}

impl ModelSpec {
    /// FCN spec with the default kernel cycle truncated or repeated to fit.
    pub fn fcn(
        num_blocks: usize,
        width: usize,
        num_classes: usize,
        input_length: usize,
        input_channels: usize,
    ) -> Self {
        let kernel_sizes =
            (0..num_blocks).map(|b| DEFAULT_FCN_KERNELS[b % DEFAULT_FCN_KERNELS.len()]).collect();
        ModelSpec {
            family: ModelFamily::Fcn,
            num_blocks,
            width,
            kernel_sizes,
            num_classes,
            input_length,
            input_channels,
        }
    }

    pub fn lstm(
        num_blocks: usize,
        width: usize,
        num_classes: usize,
        input_length: usize,
        input_channels: usize,
    ) -> Self {
        ModelSpec {
            family: ModelFamily::Lstm,
            num_blocks,
            width,
            kernel_sizes: vec![],
            num_classes,
            input_length,
            input_channels,
        }
    }

    pub fn linear(num_classes: usize, input_length: usize, input_channels: usize) -> Self {
        ModelSpec {
            family: ModelFamily::Linear,
            num_blocks: 1,
            width: 1,
            kernel_sizes: vec![],
            num_classes,
            input_length,
            input_channels,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("num_blocks", self.num_blocks),
            ("width", self.width),
            ("input_length", self.input_length),
            ("input_channels", self.input_channels),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ModelError::InvalidSpec(format!("{name} must be positive")));
            }
        }
        if self.num_classes < 2 {
            return Err(ModelError::InvalidSpec(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        match self.family {
            ModelFamily::Fcn => {
                if self.kernel_sizes.len() != self.num_blocks {
                    return Err(ModelError::InvalidSpec(format!(
                        "{} kernel sizes for {} blocks",
                        self.kernel_sizes.len(),
                        self.num_blocks
                    )));
                }
                if let Some(&k) = self.kernel_sizes.iter().find(|&&k| k == 0) {
                    return Err(ModelError::InvalidSpec(format!("kernel size {k}")));
                }
                let max_k = *self.kernel_sizes.iter().max().expect("non-empty");
                if self.input_length < max_k {
                    return Err(ModelError::InvalidSpec(format!(
                        "input_length {} shorter than largest kernel {max_k}",
                        self.input_length
                    )));
                }
                // Lengths drift when even kernels pad by (k-1)/2; every block
                // must still fit its kernel.
                let mut len = self.input_length;
                for &k in &self.kernel_sizes {
                    let pad = (k - 1) / 2;
                    if len + 2 * pad < k {
                        return Err(ModelError::InvalidSpec(format!(
                            "kernel {k} does not fit intermediate length {len}"
                        )));
                    }
                    len = len + 2 * pad - k + 1;
                }
            }
            ModelFamily::Lstm | ModelFamily::Linear => {
                if !self.kernel_sizes.is_empty() {
                    return Err(ModelError::InvalidSpec(
                        "kernel_sizes only apply to the FCN family".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Output channels per FCN block: `width` first, doubled after, and back
    /// to `width` for the final block once there are three or more blocks
    /// (the 1, 2, ..., 2, 1 pattern of the cited FCN).
    pub fn fcn_channels(&self) -> Vec<usize> {
        (0..self.num_blocks)
            .map(|b| {
                if b == 0 || (b + 1 == self.num_blocks && self.num_blocks >= 3) {
                    self.width
                } else {
                    2 * self.width
                }
            })
            .collect()
    }

    /// Parameter paths and shapes, in construction order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        match self.family {
            ModelFamily::Fcn => {
                let chans = self.fcn_channels();
                let mut c_in = self.input_channels;
                for (b, (&c_out, &k)) in chans.iter().zip(&self.kernel_sizes).enumerate() {
                    out.push((format!("block{b}.conv.weight"), vec![c_out, c_in, k]));
                    out.push((format!("block{b}.scale"), vec![c_out]));
                    out.push((format!("block{b}.shift"), vec![c_out]));
                    c_in = c_out;
                }
                out.push(("head.weight".into(), vec![self.num_classes, c_in]));
                out.push(("head.bias".into(), vec![self.num_classes]));
            }
            ModelFamily::Lstm => {
                let h = self.width;
                let mut in_dim = self.input_channels;
                for l in 0..self.num_blocks {
                    out.push((format!("layer{l}.w_ih"), vec![4 * h, in_dim]));
                    out.push((format!("layer{l}.w_hh"), vec![4 * h, h]));
                    out.push((format!("layer{l}.b_ih"), vec![4 * h]));
                    out.push((format!("layer{l}.b_hh"), vec![4 * h]));
                    in_dim = h;
                }
                out.push(("head.weight".into(), vec![self.num_classes, h]));
                out.push(("head.bias".into(), vec![self.num_classes]));
            }
            ModelFamily::Linear => {
                let flat = self.input_channels * self.input_length;
                out.push(("head.weight".into(), vec![self.num_classes, flat]));
                out.push(("head.bias".into(), vec![self.num_classes]));
            }
        }
        out
    }
}

/// A spec together with every parameter tensor, keyed by path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    spec: ModelSpec,
    tensors: BTreeMap<String, Tensor>,
}

/// Sum of element counts over a parameter mapping.
pub fn parameter_count(tensors: &BTreeMap<String, Tensor>) -> usize {
    tensors.values().map(Tensor::len).sum()
}

/// Tape handles for attached parameters, keyed by path.
pub type ParamVars = BTreeMap<String, Var>;

impl ModelParams {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.tensors
    }

    pub fn parameter_count(&self) -> usize {
        parameter_count(&self.tensors)
    }

    /// Records every parameter as a differentiable leaf.
    pub fn attach(&self, tape: &Tape) -> Result<ParamVars, ModelError> {
        self.tensors
            .iter()
            .map(|(k, t)| Ok((k.clone(), tape.leaf(t)?)))
            .collect()
    }

    /// Records every parameter as a constant (frozen teacher).
    pub fn attach_frozen(&self, tape: &Tape) -> Result<ParamVars, ModelError> {
        self.tensors
            .iter()
            .map(|(k, t)| Ok((k.clone(), tape.constant(t)?)))
            .collect()
    }

    /// Copies gradients of the last backward pass into each tensor's `grad`.
    pub fn store_grads(&mut self, tape: &Tape, vars: &ParamVars) -> Result<(), ModelError> {
        for (name, tensor) in &mut self.tensors {
            let var = vars.get(name).ok_or_else(|| {
                ModelError::DimensionMismatch(format!("no attached var for {name}"))
            })?;
            tensor.set_grad(Some(tape.grad(*var)?))?;
        }
        Ok(())
    }

    /// Serializes spec and tensors to a self-describing JSON checkpoint.
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        write_atomic(path, &bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let bytes = std::fs::read(path)?;
        let params: ModelParams = serde_json::from_slice(&bytes)?;
        params.spec.validate()?;
        let declared: BTreeMap<String, Vec<usize>> =
            params.spec.parameter_shapes().into_iter().collect();
        for (name, tensor) in &params.tensors {
            match declared.get(name) {
                Some(shape) if shape == tensor.shape() => {}
                Some(shape) => {
                    return Err(ModelError::DimensionMismatch(format!(
                        "{name} has shape {:?}, spec wants {shape:?}",
                        tensor.shape()
                    )))
                }
                None => {
                    return Err(ModelError::DimensionMismatch(format!(
                        "unexpected parameter {name}"
                    )))
                }
            }
        }
        if params.tensors.len() != declared.len() {
            return Err(ModelError::DimensionMismatch(format!(
                "{} parameters, spec wants {}",
                params.tensors.len(),
                declared.len()
            )));
        }
        Ok(params)
    }
}

/// Initializes all parameters deterministically from `seed`.
///
/// Conv and linear weights draw He-style fan-in normals, LSTM weights and
/// biases draw uniform ±1/√hidden, scale/shift start at identity, and other
/// biases start at zero. Each tensor has its own RNG stream keyed by path, so
/// values do not depend on construction order.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<ModelParams, ModelError> {
    spec.validate()?;
    let mut tensors = BTreeMap::new();
    for (name, shape) in spec.parameter_shapes() {
        let len: usize = shape.iter().product();
        let mut rng = rng::stream(seed, &format!("init/{name}"));
        let values: Vec<f64> = match init_kind(spec, &name) {
            Init::HeNormal { fan_in } => {
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
                    .expect("positive std");
                (0..len).map(|_| normal.sample(&mut rng)).collect()
            }
            Init::Uniform { bound } => {
                (0..len).map(|_| rng.random_range(-bound..=bound)).collect()
            }
            Init::Fill(v) => vec![v; len],
        };
        let tensor = Tensor::new(shape, values)?.with_requires_grad(true);
        tensors.insert(name, tensor);
    }
    Ok(ModelParams { spec: spec.clone(), tensors })
}

enum Init {
    HeNormal { fan_in: usize },
    Uniform { bound: f64 },
    Fill(f64),
}

fn init_kind(spec: &ModelSpec, name: &str) -> Init {
    if spec.family == ModelFamily::Lstm && name.starts_with("layer") {
        return Init::Uniform { bound: 1.0 / (spec.width as f64).sqrt() };
    }
    if name.ends_with(".scale") {
        return Init::Fill(1.0);
    }
    if name.ends_with(".shift") || name.ends_with(".bias") {
        return Init::Fill(0.0);
    }
    let shapes: BTreeMap<String, Vec<usize>> = spec.parameter_shapes().into_iter().collect();
    let shape = &shapes[name];
    let fan_in = shape[1..].iter().product::<usize>().max(1);
    Init::HeNormal { fan_in }
}

/// Builds the forward graph on `tape` from already attached parameters.
///
/// `x` must be a `[batch, input_channels, input_length]` node.
pub fn forward_var(
    tape: &Tape,
    spec: &ModelSpec,
    vars: &ParamVars,
    x: Var,
) -> Result<Var, ModelError> {
    let shape = tape.shape_of(x)?;
    if shape.len() != 3 || shape[1] != spec.input_channels || shape[2] != spec.input_length {
        return Err(ModelError::DimensionMismatch(format!(
            "batch shape {shape:?} does not match {} channels x {} steps",
            spec.input_channels, spec.input_length
        )));
    }
    let batch = shape[0];
    let var = |name: &str| -> Result<Var, ModelError> {
        vars.get(name)
            .copied()
            .ok_or_else(|| ModelError::DimensionMismatch(format!("missing parameter {name}")))
    };
    let logits = match spec.family {
        ModelFamily::Fcn => {
            let mut h = x;
            for b in 0..spec.num_blocks {
                let k = spec.kernel_sizes[b];
                let conv = tape.conv1d(h, var(&format!("block{b}.conv.weight"))?, 1, (k - 1) / 2)?;
                let ss = tape.scale_shift(
                    conv,
                    var(&format!("block{b}.scale"))?,
                    var(&format!("block{b}.shift"))?,
                )?;
                h = tape.relu(ss)?;
            }
            let pooled = tape.global_avg_pool(h)?;
            tape.linear(pooled, var("head.weight")?, var("head.bias")?)?
        }
        ModelFamily::Lstm => {
            let h_dim = spec.width;
            let mut layer_inputs: Vec<Var> = (0..spec.input_length)
                .map(|t| tape.time_step(x, t))
                .collect::<Result<_, _>>()?;
            let mut last_h = None;
            for l in 0..spec.num_blocks {
                let w_ih = var(&format!("layer{l}.w_ih"))?;
                let w_hh = var(&format!("layer{l}.w_hh"))?;
                let b_ih = var(&format!("layer{l}.b_ih"))?;
                let b_hh = var(&format!("layer{l}.b_hh"))?;
                let mut h = tape.constant_from(vec![batch, h_dim], vec![0.0; batch * h_dim])?;
                let mut c = h;
                let mut outputs = Vec::with_capacity(layer_inputs.len());
                for &x_t in &layer_inputs {
                    let from_input = tape.linear(x_t, w_ih, b_ih)?;
                    let from_hidden = tape.linear(h, w_hh, b_hh)?;
                    let gates = tape.add(from_input, from_hidden)?;
                    let i_gate = tape.sigmoid(tape.slice_cols(gates, 0, h_dim)?)?;
                    let f_gate = tape.sigmoid(tape.slice_cols(gates, h_dim, h_dim)?)?;
                    let g_gate = tape.tanh(tape.slice_cols(gates, 2 * h_dim, h_dim)?)?;
                    let o_gate = tape.sigmoid(tape.slice_cols(gates, 3 * h_dim, h_dim)?)?;
                    let keep = tape.mul(f_gate, c)?;
                    let write = tape.mul(i_gate, g_gate)?;
                    c = tape.add(keep, write)?;
                    h = tape.mul(o_gate, tape.tanh(c)?)?;
                    outputs.push(h);
                }
                last_h = Some(h);
                layer_inputs = outputs;
            }
            let last = last_h.expect("at least one layer");
            tape.linear(last, var("head.weight")?, var("head.bias")?)?
        }
        ModelFamily::Linear => {
            let flat = tape.reshape(x, vec![batch, spec.input_channels * spec.input_length])?;
            tape.linear(flat, var("head.weight")?, var("head.bias")?)?
        }
    };
    Ok(logits)
}

/// Plain forward pass: builds a throwaway tape with frozen parameters.
pub fn forward(params: &ModelParams, batch: &Tensor) -> Result<Tensor, ModelError> {
    let tape = Tape::new();
    let vars = params.attach_frozen(&tape)?;
    let x = tape.constant(batch)?;
    let logits = forward_var(&tape, params.spec(), &vars, x)?;
    let out = tape.value(logits)?;
    if !out.is_finite() {
        return Err(ModelError::Tensor(TensorError::NonFinite("forward logits")));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::cross_entropy_mean;
    use approx::assert_relative_eq;

    fn tiny_batch(batch: usize, channels: usize, len: usize, scale: f64) -> Tensor {
        let values: Vec<f64> =
            (0..batch * channels * len).map(|i| ((i as f64) * 0.73).sin() * scale).collect();
        Tensor::new(vec![batch, channels, len], values).unwrap()
    }

    #[test]
    fn build_is_deterministic_for_same_spec_and_seed() {
        let spec = ModelSpec::fcn(2, 4, 3, 16, 1);
        let a = build_model(&spec, 11).unwrap();
        let b = build_model(&spec, 11).unwrap();
        assert_eq!(a, b);
        for (ta, tb) in a.tensors().values().zip(b.tensors().values()) {
            for (x, y) in ta.values().iter().zip(tb.values()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        let c = build_model(&spec, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn linear_count_matches_closed_form() {
        let spec = ModelSpec::linear(2, 4, 1);
        assert_eq!(build_model(&spec, 0).unwrap().parameter_count(), 4 * 2 + 2);
        let spec = ModelSpec::linear(5, 100, 1);
        assert_eq!(build_model(&spec, 0).unwrap().parameter_count(), 505);
    }

    #[test]
    fn empty_mapping_counts_zero() {
        assert_eq!(parameter_count(&BTreeMap::new()), 0);
    }

    #[test]
    fn fcn_count_matches_shape_enumeration_oracle() {
        let mut spec = ModelSpec::fcn(2, 4, 2, 16, 1);
        spec.kernel_sizes = vec![3, 3];
        let params = build_model(&spec, 5).unwrap();
        // Oracle: enumerate declared shapes by hand for this configuration.
        let expected: usize = [
            4 * 1 * 3, // block0 conv
            4,         // block0 scale
            4,         // block0 shift
            8 * 4 * 3, // block1 conv
            8,
            8,
            2 * 8, // head weight
            2,     // head bias
        ]
        .iter()
        .sum();
        assert_eq!(params.parameter_count(), expected);
        let by_tensors: usize = params.tensors().values().map(Tensor::len).sum();
        assert_eq!(by_tensors, expected);
    }

    #[test]
    fn lstm_count_matches_closed_form_oracle() {
        let (h, n, c) = (8usize, 1usize, 3usize);
        let spec = ModelSpec::lstm(1, h, c, 20, n);
        let params = build_model(&spec, 9).unwrap();
        let expected = 4 * (n * h + h * h + 2 * h) + h * c + c;
        assert_eq!(params.parameter_count(), expected);
    }

    #[test]
    fn fcn_count_is_input_length_independent() {
        let a = build_model(&ModelSpec::fcn(2, 4, 3, 16, 1), 1).unwrap();
        let b = build_model(&ModelSpec::fcn(2, 4, 3, 32, 1), 1).unwrap();
        assert_eq!(a.parameter_count(), b.parameter_count());
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(ModelSpec::fcn(2, 4, 1, 16, 1).validate().is_err());
        assert!(ModelSpec::fcn(2, 0, 3, 16, 1).validate().is_err());
        assert!(ModelSpec::fcn(1, 4, 2, 4, 1).validate().is_err());
        let mut wrong_kernels = ModelSpec::fcn(2, 4, 2, 16, 1);
        wrong_kernels.kernel_sizes = vec![3];
        assert!(wrong_kernels.validate().is_err());
        let mut lstm = ModelSpec::lstm(1, 4, 2, 16, 1);
        lstm.kernel_sizes = vec![3];
        assert!(lstm.validate().is_err());
    }

    #[test]
    fn default_kernels_cycle_eight_five_three() {
        assert_eq!(ModelSpec::fcn(4, 4, 2, 32, 1).kernel_sizes, vec![8, 5, 3, 8]);
        assert_eq!(ModelSpec::fcn(2, 4, 2, 32, 1).kernel_sizes, vec![8, 5]);
    }

    #[test]
    fn zeroed_fcn_and_linear_emit_zero_logits() {
        for spec in [ModelSpec::fcn(2, 3, 3, 12, 1), ModelSpec::linear(3, 12, 1)] {
            let mut params = build_model(&spec, 3).unwrap();
            for t in params.tensors_mut().values_mut() {
                t.values_mut().iter_mut().for_each(|v| *v = 0.0);
            }
            let out = forward(&params, &tiny_batch(2, 1, 12, 1.0)).unwrap();
            assert!(out.values().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn duplicated_instance_yields_identical_rows() {
        for spec in [
            ModelSpec::fcn(2, 3, 2, 12, 1),
            ModelSpec::lstm(2, 5, 2, 12, 1),
            ModelSpec::linear(2, 12, 1),
        ] {
            let params = build_model(&spec, 7).unwrap();
            let one = tiny_batch(1, 1, 12, 1.0);
            let two = Tensor::new(
                vec![2, 1, 12],
                one.values().iter().chain(one.values()).copied().collect(),
            )
            .unwrap();
            let out = forward(&params, &two).unwrap();
            let (a, b) = out.values().split_at(spec.num_classes);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn linear_forward_matches_hand_matrix_product() {
        let spec = ModelSpec::linear(2, 3, 1);
        let mut params = build_model(&spec, 0).unwrap();
        let w = Tensor::new(vec![2, 3], vec![1.0, -1.0, 2.0, 0.5, 0.0, -0.5])
            .unwrap()
            .with_requires_grad(true);
        let b = Tensor::new(vec![2], vec![0.25, -0.25]).unwrap().with_requires_grad(true);
        params.tensors_mut().insert("head.weight".into(), w);
        params.tensors_mut().insert("head.bias".into(), b);
        let x = Tensor::new(vec![1, 1, 3], vec![2.0, 3.0, 4.0]).unwrap();
        let out = forward(&params, &x).unwrap();
        assert_eq!(out.values(), &[2.0 - 3.0 + 8.0 + 0.25, 1.0 - 2.0 - 0.25]);
    }

    #[test]
    fn forward_is_permutation_equivariant_over_batch() {
        for spec in [ModelSpec::fcn(2, 3, 3, 10, 1), ModelSpec::lstm(1, 4, 3, 10, 1)] {
            let params = build_model(&spec, 21).unwrap();
            let batch = tiny_batch(3, 1, 10, 1.5);
            let fwd = forward(&params, &batch).unwrap();
            let perm = [2usize, 0, 1];
            let swapped: Vec<f64> =
                perm.iter().flat_map(|&i| batch.values()[i * 10..(i + 1) * 10].to_vec()).collect();
            let swapped = Tensor::new(vec![3, 1, 10], swapped).unwrap();
            let out = forward(&params, &swapped).unwrap();
            let c = spec.num_classes;
            for (row, &src) in perm.iter().enumerate() {
                assert_eq!(&out.values()[row * c..(row + 1) * c], &fwd.values()[src * c..(src + 1) * c]);
            }
        }
    }

    #[test]
    fn forward_rejects_wrong_batch_shape() {
        let params = build_model(&ModelSpec::fcn(1, 3, 2, 10, 1), 1).unwrap();
        let bad = tiny_batch(2, 1, 9, 1.0);
        assert!(matches!(forward(&params, &bad), Err(ModelError::DimensionMismatch(_))));
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        for spec in [
            ModelSpec::fcn(2, 3, 3, 16, 1),
            ModelSpec::lstm(2, 4, 2, 16, 2),
            ModelSpec::linear(4, 16, 1),
        ] {
            let params = build_model(&spec, 17).unwrap();
            params.save(&path).unwrap();
            let loaded = ModelParams::load(&path).unwrap();
            assert_eq!(params, loaded);
            for (a, b) in params.tensors().values().zip(loaded.tensors().values()) {
                for (x, y) in a.values().iter().zip(b.values()) {
                    assert_eq!(x.to_bits(), y.to_bits());
                }
            }
        }
    }

    #[test]
    fn checkpoint_load_rejects_tampered_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let params = build_model(&ModelSpec::linear(2, 4, 1), 2).unwrap();
        params.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap().replace("\"head.bias\"", "\"head.bogus\"");
        std::fs::write(&path, text).unwrap();
        assert!(ModelParams::load(&path).is_err());
    }

    #[test]
    fn gradients_match_finite_differences_for_every_family() {
        let specs = [
            ModelSpec::fcn(2, 2, 2, 8, 1),
            ModelSpec::lstm(1, 3, 2, 6, 1),
            ModelSpec::linear(2, 6, 1),
        ];
        for spec in specs {
            let params = build_model(&spec, 13).unwrap();
            let batch = tiny_batch(2, 1, spec.input_length, 0.8);
            let labels = [0usize, 1];

            let tape = Tape::new();
            let vars = params.attach(&tape).unwrap();
            let x = tape.constant(&batch).unwrap();
            let logits = forward_var(&tape, &spec, &vars, x).unwrap();
            let loss = tape.cross_entropy(logits, &labels).unwrap();
            tape.backward(loss).unwrap();

            let h = 1e-4;
            for (name, var) in &vars {
                let grad = tape.grad(*var).unwrap();
                for j in 0..grad.len() {
                    let eval = |delta: f64| {
                        let mut p = params.clone();
                        p.tensors_mut().get_mut(name).unwrap().values_mut()[j] += delta;
                        let out = forward(&p, &batch).unwrap();
                        cross_entropy_mean(out.values(), spec.num_classes, &labels).unwrap()
                    };
                    let fd = (eval(h) - eval(-h)) / (2.0 * h);
                    assert_relative_eq!(grad[j], fd, epsilon = 1e-6, max_relative = 1e-4);
                }
            }
        }
    }
}
