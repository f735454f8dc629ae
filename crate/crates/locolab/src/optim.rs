//! Inner AdamW and outer SGD with Nesterov momentum.
//!
//! The inner optimizer runs on every replica's local shard; the outer
//! optimizer consumes replica-averaged outer gradients (parameter deltas), so
//! its momentum state exists once per fragment rather than once per replica.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// AdamW hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamHp {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamHp {
    fn default() -> Self {
        AdamHp {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.99,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Per-replica Adam moment state.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// One AdamW step in place:
/// `m' = b1 m + (1-b1) g`, `v' = b2 v + (1-b2) g^2`, bias-corrected, then
/// `theta -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)`.
pub fn adamw_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    hp: &AdamHp,
) -> Result<()> {
    adamw_step_masked(params, grads, state, hp, None)
}

/// AdamW with an optional frozen mask. Frozen coordinates keep their moment
/// state untouched and receive only the decoupled weight-decay term.
pub fn adamw_step_masked(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    hp: &AdamHp,
    frozen: Option<&[bool]>,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::structural(format!(
            "adamw shapes disagree: params {}, grads {}, state {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if let Some(bad) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric {
            step: state.t + 1,
            replica: usize::MAX,
            message: format!("non-finite gradient at parameter {bad}"),
        });
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    for i in 0..params.len() {
        if frozen.is_some_and(|f| f[i]) {
            params[i] -= hp.lr * hp.weight_decay * params[i];
            continue;
        }
        let g = grads[i];
        state.m[i] = hp.beta1 * state.m[i] + (1.0 - hp.beta1) * g;
        state.v[i] = hp.beta2 * state.v[i] + (1.0 - hp.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= hp.lr * (m_hat / (v_hat.sqrt() + hp.epsilon) + hp.weight_decay * params[i]);
    }
    Ok(())
}

/// Outer optimizer hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NesterovHp {
    pub lr: f64,
    pub momentum: f64,
}

impl Default for NesterovHp {
    fn default() -> Self {
        NesterovHp {
            lr: 0.4,
            momentum: 0.9,
        }
    }
}

/// Outer momentum, one vector per fragment (shared across replicas: it only
/// ever consumes the replica-averaged delta).
#[derive(Debug, Clone)]
pub struct NesterovState {
    pub v: Vec<f64>,
}

impl NesterovState {
    pub fn new(len: usize) -> Self {
        NesterovState { v: vec![0.0; len] }
    }
}

/// Advance the momentum once for a sync round and return the effective step
/// direction `delta + mu * v'` with `v' = mu * v + delta`.
///
/// The outer update for a base vector is `base - lr * direction`; splitting it
/// this way lets every replica apply the same round direction to its own base
/// while the momentum advances exactly once per round.
pub fn nesterov_direction(
    delta: &[f64],
    state: &mut NesterovState,
    hp: &NesterovHp,
) -> Result<Vec<f64>> {
    if delta.len() != state.v.len() {
        return Err(Error::structural(format!(
            "nesterov shapes disagree: delta {}, state {}",
            delta.len(),
            state.v.len()
        )));
    }
    let mut dir = vec![0.0; delta.len()];
    for i in 0..delta.len() {
        state.v[i] = hp.momentum * state.v[i] + delta[i];
        dir[i] = delta[i] + hp.momentum * state.v[i];
    }
    Ok(dir)
}

/// Full outer step: `new = base - lr * (delta + mu * v')`.
///
/// `delta` points opposite the descent direction (it is `old - new` over the
/// inner window), hence the minus sign.
pub fn nesterov_step(
    base: &[f64],
    delta: &[f64],
    state: &mut NesterovState,
    hp: &NesterovHp,
) -> Result<Vec<f64>> {
    if base.len() != delta.len() {
        return Err(Error::structural(format!(
            "nesterov shapes disagree: base {}, delta {}",
            base.len(),
            delta.len()
        )));
    }
    let dir = nesterov_direction(delta, state, hp)?;
    Ok(base
        .iter()
        .zip(dir.iter())
        .map(|(b, d)| b - hp.lr * d)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_fixed() {
        let mut params = vec![0.3, -1.2, 4.0];
        let grads = vec![0.0; 3];
        let mut state = AdamState::new(3);
        let hp = AdamHp::default();
        adamw_step(&mut params, &grads, &mut state, &hp).unwrap();
        assert_eq!(params, vec![0.3, -1.2, 4.0]);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // Scalar theta=0, g=0.5, lr=0.1: bias correction makes the first step
        // m_hat / sqrt(v_hat) = g/|g| up to epsilon.
        let mut params = vec![0.0];
        let mut state = AdamState::new(1);
        let hp = AdamHp {
            lr: 0.1,
            weight_decay: 0.0,
            ..AdamHp::default()
        };
        adamw_step(&mut params, &[0.5], &mut state, &hp).unwrap();
        assert!((params[0] + 0.1).abs() < 1e-7, "{}", params[0]);
    }

    #[test]
    fn decoupled_decay_only() {
        let mut params = vec![1.0];
        let mut state = AdamState::new(1);
        let hp = AdamHp {
            lr: 0.1,
            weight_decay: 0.1,
            ..AdamHp::default()
        };
        adamw_step(&mut params, &[0.0], &mut state, &hp).unwrap();
        assert!((params[0] - 0.99).abs() < 1e-15);
    }

    #[test]
    fn first_step_update_is_bounded() {
        let mut params: Vec<f64> = vec![0.5, -2.0, 0.0, 3.0];
        let before = params.clone();
        let grads = vec![0.3, -0.01, 2.0, -5.0];
        let mut state = AdamState::new(4);
        let hp = AdamHp {
            lr: 0.05,
            weight_decay: 0.01,
            ..AdamHp::default()
        };
        adamw_step(&mut params, &grads, &mut state, &hp).unwrap();
        for i in 0..4 {
            let update = (params[i] - before[i]).abs();
            // |m_hat|/(sqrt(v_hat)+eps) <= 1 on the first step, so the move is
            // at most lr * (1 + wd*|theta|).
            let bound = hp.lr * (1.0 + hp.weight_decay * before[i].abs()) + 1e-12;
            assert!(update <= bound, "update {update} exceeds {bound}");
        }
    }

    #[test]
    fn non_finite_gradient_fails_fast() {
        let mut params = vec![0.0];
        let mut state = AdamState::new(1);
        let err = adamw_step(&mut params, &[f64::NAN], &mut state, &AdamHp::default()).unwrap_err();
        assert!(matches!(err, Error::Numeric { step: 1, .. }));
    }

    #[test]
    fn frozen_mask_applies_decay_only() {
        let mut params = vec![1.0, 1.0];
        let grads = vec![0.7, 0.7];
        let mut state = AdamState::new(2);
        let hp = AdamHp {
            lr: 0.1,
            weight_decay: 0.1,
            ..AdamHp::default()
        };
        adamw_step_masked(&mut params, &grads, &mut state, &hp, Some(&[false, true])).unwrap();
        assert!((params[1] - 0.99).abs() < 1e-15);
        assert_ne!(params[0], params[1]);
        assert_eq!(state.m[1], 0.0);
        assert_eq!(state.v[1], 0.0);
    }

    #[test]
    fn nesterov_identity_when_plain() {
        // mu=0, lr=1 recovers new = base - delta.
        let mut state = NesterovState::new(2);
        let hp = NesterovHp {
            lr: 1.0,
            momentum: 0.0,
        };
        let new = nesterov_step(&[2.0, -1.0], &[0.5, 0.25], &mut state, &hp).unwrap();
        assert_eq!(new, vec![1.5, -1.25]);
    }

    #[test]
    fn nesterov_single_step_magnitude() {
        let mut state = NesterovState::new(1);
        let hp = NesterovHp::default();
        let new = nesterov_step(&[0.0], &[1.0], &mut state, &hp).unwrap();
        assert!((new[0] + 0.76).abs() < 1e-15);
        assert_eq!(state.v, vec![1.0]);
    }

    #[test]
    fn nesterov_unrolled_two_steps() {
        let mut state = NesterovState::new(1);
        let hp = NesterovHp::default();
        let a = nesterov_step(&[0.0], &[1.0], &mut state, &hp).unwrap();
        let b = nesterov_step(&a, &[1.0], &mut state, &hp).unwrap();
        let second_update = (b[0] - a[0]).abs();
        assert!((second_update - 1.084).abs() < 1e-12, "{second_update}");
    }

    #[test]
    fn nesterov_mu_zero_is_plain_sgd() {
        let mut state = NesterovState::new(3);
        let hp = NesterovHp {
            lr: 0.4,
            momentum: 0.0,
        };
        let base = [1.0, 2.0, 3.0];
        let delta = [0.1, -0.2, 0.3];
        let new = nesterov_step(&base, &delta, &mut state, &hp).unwrap();
        for i in 0..3 {
            assert_eq!(new[i], base[i] - 0.4 * delta[i]);
        }
    }

    #[test]
    fn length_mismatch_is_structural() {
        let mut state = NesterovState::new(2);
        let err = nesterov_step(&[1.0], &[1.0, 2.0], &mut state, &NesterovHp::default());
        assert!(err.is_err());
    }
}
