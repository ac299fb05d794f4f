//! Cross-entropy loss, AdamW with decoupled weight decay, and the step
//! learning-rate schedule.

use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// `-log softmax(logits)[label]` and its gradient `softmax - onehot`,
/// stabilised by subtracting the max logit.
pub fn cross_entropy<T: Scalar>(logits: &[T], label: usize) -> Result<(T, Vec<T>)> {
    if label >= logits.len() {
        return Err(Error::InvalidArgument(format!(
            "label {label} outside 0..{}",
            logits.len()
        )));
    }
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum = exps.iter().fold(T::zero(), |a, &b| a + b);
    let loss = sum.ln() - (logits[label] - max);
    let mut grad: Vec<T> = exps.into_iter().map(|e| e / sum).collect();
    grad[label] -= T::one();
    Ok((loss, grad))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// First and second moment estimates for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Scalar> Moments<T> {
    pub fn zeros(len: usize) -> Self {
        Self {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
        }
    }
}

/// One AdamW update at 1-based `step`:
///
/// ```text
/// w ← w·(1 − lr·λ)
/// m ← β₁m + (1 − β₁)g,   v ← β₂v + (1 − β₂)g²
/// w ← w − lr·m̂ / (√v̂ + ε)   with m̂ = m/(1 − β₁ᵗ), v̂ = v/(1 − β₂ᵗ)
/// ```
pub fn adamw_step<T: Scalar>(
    weights: &mut [T],
    grads: &[T],
    state: &mut Moments<T>,
    step: u64,
    params: &AdamWParams,
    lr: f64,
) -> Result<()> {
    if weights.len() != grads.len() || weights.len() != state.m.len() || weights.len() != state.v.len() {
        return Err(Error::Shape(format!(
            "adamw: {} weights, {} grads, {}/{} moments",
            weights.len(),
            grads.len(),
            state.m.len(),
            state.v.len()
        )));
    }
    if step == 0 {
        return Err(Error::InvalidArgument("adamw step index is 1-based".into()));
    }
    let b1 = T::of(params.beta1);
    let b2 = T::of(params.beta2);
    let one = T::one();
    let decay = T::of(1.0 - lr * params.weight_decay);
    let lr_t = T::of(lr);
    let eps = T::of(params.eps);
    let bc1 = T::of(1.0 - params.beta1.powi(step as i32));
    let bc2 = T::of(1.0 - params.beta2.powi(step as i32));
    for (((w, &g), m), v) in weights.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *w = *w * decay;
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *w = *w - lr_t * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// `lr0 · gamma^⌊epoch / step_epochs⌋`.
pub fn lr_schedule(epoch: usize, lr0: f64, gamma: f64, step_epochs: usize) -> f64 {
    lr0 * gamma.powi((epoch / step_epochs.max(1)) as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_entropy_closed_forms() {
        let (l, g) = cross_entropy(&[0.0f64, 0.0], 0).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((g[0] + 0.5).abs() < 1e-12 && (g[1] - 0.5).abs() < 1e-12);

        let (l, _) = cross_entropy(&[1.0f64, 0.0], 0).unwrap();
        assert!((l - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12);
        assert!((l - 0.313262).abs() < 1e-6);

        let (l, g) = cross_entropy(&[1000.0f64, 0.0], 0).unwrap();
        assert!(l.is_finite() && l.abs() < 1e-12);
        assert!(g.iter().all(|v| v.is_finite()));

        let (l, _) = cross_entropy(&[1000.0f32, 0.0], 1).unwrap();
        assert!((l - 1000.0).abs() < 1e-3);

        assert!(cross_entropy(&[0.0f64, 0.0], 2).is_err());
    }

    #[test]
    fn decay_only_when_gradient_vanishes() {
        let p = AdamWParams::default();
        let lr = 1e-3;
        let mut w = vec![0.5f64, -2.0, 3.25];
        let expected: Vec<f64> = w.iter().map(|x| x * (1.0 - lr * p.weight_decay)).collect();
        let mut st = Moments::zeros(3);
        adamw_step(&mut w, &[0.0; 3], &mut st, 1, &p, lr).unwrap();
        assert_eq!(w, expected);
    }

    #[test]
    fn first_step_moves_by_lr_in_sign_direction() {
        let p = AdamWParams {
            weight_decay: 0.0,
            ..AdamWParams::default()
        };
        for g in [3.0f64, -0.01, 1e-3] {
            let mut w = vec![1.0f64];
            let mut st = Moments::zeros(1);
            adamw_step(&mut w, &[g], &mut st, 1, &p, 0.1).unwrap();
            let step = w[0] - 1.0;
            let expected = -0.1 * g / (g.abs() + p.eps);
            assert!((step - expected).abs() < 1e-15, "{step} vs {expected}");
            assert!((step + 0.1 * g.signum()).abs() < 1e-4);
        }
    }

    #[test]
    fn shape_and_step_checks() {
        let p = AdamWParams::default();
        let mut st = Moments::zeros(2);
        assert!(adamw_step(&mut [0.0f64; 2], &[0.0; 3], &mut st, 1, &p, 0.1).is_err());
        assert!(adamw_step(&mut [0.0f64; 2], &[0.0; 2], &mut st, 0, &p, 0.1).is_err());
    }

    #[test]
    fn step_schedule() {
        let s = |e| lr_schedule(e, 1e-4, 0.3, 30);
        assert_eq!(s(0), 1e-4);
        assert_eq!(s(29), 1e-4);
        assert!((s(30) - 3e-5).abs() < 1e-18);
        assert!((s(60) - 9e-6).abs() < 1e-18);
        for e in 0..200 {
            assert!(s(e + 1) <= s(e));
        }
    }
}
