//! Value-level math shared by tape operations and evaluation metrics.

use super::TensorError;

/// Floor applied to reference probabilities inside logarithms and divisions.
pub(crate) const PROB_FLOOR: f64 = 1e-12;

/// Temperature-scaled softmax over one logit vector.
///
/// Logits are divided by `tau` and shifted by their maximum before
/// exponentiation, so arbitrarily large logits stay finite.
pub fn softmax_temperature(logits: &[f64], tau: f64) -> Result<Vec<f64>, TensorError> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(TensorError::InvalidArgument(format!(
            "softmax temperature must be finite and positive, got {tau}"
        )));
    }
    if logits.is_empty() {
        return Err(TensorError::InvalidArgument("softmax of empty logits".into()));
    }
    let mut max = f64::NEG_INFINITY;
    for &z in logits {
        if !z.is_finite() {
            return Err(TensorError::NonFinite("softmax_temperature input"));
        }
        max = max.max(z / tau);
    }
    let mut out: Vec<f64> = logits.iter().map(|&z| (z / tau - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    Ok(out)
}

/// KL divergence `sum_i p_i ln(p_i / q_i)` with the `0 ln 0 = 0` convention.
///
/// `q` is floored at 1e-12 inside the logarithm so near-zero reference mass
/// cannot produce infinities; `p` is never floored, keeping `KL(p, p) = 0`
/// exact.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64, TensorError> {
    if p.len() != q.len() || p.is_empty() {
        return Err(TensorError::ShapeMismatch(format!(
            "kl_divergence over lengths {} and {}",
            p.len(),
            q.len()
        )));
    }
    let mut total = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if !(pi.is_finite() && qi.is_finite()) || pi < 0.0 || qi < 0.0 {
            return Err(TensorError::InvalidArgument(
                "kl_divergence needs finite non-negative inputs".into(),
            ));
        }
        if pi > 0.0 {
            total += pi * (pi.ln() - qi.max(PROB_FLOOR).ln());
        }
    }
    Ok(total)
}

/// Smooth L1 (Huber with unit transition) averaged over all elements.
pub fn smooth_l1(a: &[f64], b: &[f64]) -> Result<f64, TensorError> {
    if a.len() != b.len() || a.is_empty() {
        return Err(TensorError::ShapeMismatch(format!(
            "smooth_l1 over lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let mut total = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let d = x - y;
        total += if d.abs() < 1.0 { 0.5 * d * d } else { d.abs() - 0.5 };
    }
    Ok(total / a.len() as f64)
}

/// Mean negative log-likelihood of `labels` under row-wise softmax of `logits`.
///
/// `logits` is row-major `[rows, classes]`.
pub fn cross_entropy_mean(
    logits: &[f64],
    classes: usize,
    labels: &[usize],
) -> Result<f64, TensorError> {
    if classes == 0 || labels.is_empty() || logits.len() != labels.len() * classes {
        return Err(TensorError::ShapeMismatch(format!(
            "cross_entropy over {} logits, {} labels, {} classes",
            logits.len(),
            labels.len(),
            classes
        )));
    }
    let mut total = 0.0;
    for (row, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(TensorError::InvalidArgument(format!(
                "label {label} out of range for {classes} classes"
            )));
        }
        let z = &logits[row * classes..(row + 1) * classes];
        let p = softmax_temperature(z, 1.0)?;
        total -= p[label].max(PROB_FLOOR).ln();
    }
    Ok(total / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn softmax_with_temperature_two() {
        let p = softmax_temperature(&[2.0, 0.0], 2.0).unwrap();
        assert_relative_eq!(p[0], 0.731_058_578_630_004_9, epsilon = 1e-15);
        assert_relative_eq!(p[1], 0.268_941_421_369_995_1, epsilon = 1e-15);
        assert_relative_eq!(p[0] + p[1], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let p = softmax_temperature(&[1000.0, 0.0], 1.0).unwrap();
        assert!(p.iter().all(|v| v.is_finite()));
        assert_relative_eq!(p[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn softmax_rejects_bad_temperature() {
        assert!(softmax_temperature(&[1.0], 0.0).is_err());
        assert!(softmax_temperature(&[1.0], -2.0).is_err());
        assert!(softmax_temperature(&[1.0], f64::NAN).is_err());
    }

    #[test]
    fn kl_matches_hand_computed_value() {
        let v = kl_divergence(&[0.5, 0.5], &[0.75, 0.25]).unwrap();
        assert_relative_eq!(v, 0.5 * (4.0f64 / 3.0).ln(), epsilon = 1e-15);
        assert_relative_eq!(v, 0.143_841_036_225_890_45, epsilon = 1e-12);
    }

    #[test]
    fn kl_of_identical_distributions_is_zero() {
        let p = [0.2, 0.3, 0.5];
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn kl_treats_zero_mass_as_zero_term() {
        let v = kl_divergence(&[0.0, 1.0], &[0.5, 0.5]).unwrap();
        assert_relative_eq!(v, (2.0f64).ln(), epsilon = 1e-15);
    }

    #[test]
    fn kl_floors_tiny_reference_mass() {
        let v = kl_divergence(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert!(v.is_finite());
        assert_relative_eq!(v, -(1e-12f64).ln(), epsilon = 1e-12);
    }

    #[test]
    fn kl_certain_versus_uniform_is_ln_two() {
        let v = kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert_relative_eq!(v, (2.0f64).ln(), epsilon = 1e-15);
    }

    #[test]
    fn smooth_l1_crosses_quadratic_to_linear() {
        assert_relative_eq!(smooth_l1(&[0.5], &[0.0]).unwrap(), 0.125, epsilon = 1e-15);
        assert_relative_eq!(smooth_l1(&[3.0], &[0.0]).unwrap(), 2.5, epsilon = 1e-15);
        let mixed = smooth_l1(&[0.5, 3.0], &[0.0, 0.0]).unwrap();
        assert_relative_eq!(mixed, (0.125 + 2.5) / 2.0, epsilon = 1e-15);
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_log_classes() {
        let v = cross_entropy_mean(&[0.0, 0.0, 0.0], 3, &[1]).unwrap();
        assert_relative_eq!(v, (3.0f64).ln(), epsilon = 1e-15);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_label() {
        assert!(cross_entropy_mean(&[0.0, 0.0], 2, &[2]).is_err());
    }
}
