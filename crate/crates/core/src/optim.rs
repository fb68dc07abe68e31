//! Adaptive moment estimation. `step` always descends; callers maximizing an
//! objective pass the negated gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Self {
        AdamHyper {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub t: u64,
    #[serde(with = "crate::numfmt::vec")]
    pub m: Vec<f64>,
    #[serde(with = "crate::numfmt::vec")]
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(d: usize) -> Self {
        AdamState {
            t: 0,
            m: vec![0.0; d],
            v: vec![0.0; d],
        }
    }
}

/// One update of `params` against `grad`. Leaves everything untouched on a
/// non-finite gradient or update.
pub fn step(params: &mut [f64], grad: &[f64], state: &mut AdamState, hyper: &AdamHyper) -> Result<()> {
    assert_eq!(params.len(), grad.len());
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Diverged("gradient"));
    }
    let t = state.t + 1;
    let bc1 = 1.0 - hyper.beta1.powi(t as i32);
    let bc2 = 1.0 - hyper.beta2.powi(t as i32);
    let mut m = state.m.clone();
    let mut v = state.v.clone();
    let mut next = params.to_vec();
    for i in 0..params.len() {
        let g = grad[i];
        m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g;
        v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g * g;
        if m[i] == 0.0 {
            continue;
        }
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        next[i] -= hyper.lr * mhat / (vhat.sqrt() + hyper.eps);
    }
    if next.iter().any(|x| !x.is_finite()) {
        return Err(Error::Diverged("parameter update"));
    }
    params.copy_from_slice(&next);
    state.m = m;
    state.v = v;
    state.t = t;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = vec![1.0, -2.0];
        let mut s = AdamState::new(2);
        step(&mut p, &[0.0, 0.0], &mut s, &AdamHyper::with_lr(0.1)).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn constant_gradient_moves_by_lr_times_sign() {
        let mut p = vec![0.0, 0.0];
        let mut s = AdamState::new(2);
        let h = AdamHyper::with_lr(0.01);
        let mut prev = p.clone();
        for _ in 0..2000 {
            prev.copy_from_slice(&p);
            step(&mut p, &[3.0, -0.002], &mut s, &h).unwrap();
        }
        assert!(((p[0] - prev[0]) + 0.01).abs() < 1e-6);
        assert!(((p[1] - prev[1]) - 0.01).abs() < 1e-5);
    }

    #[test]
    fn non_finite_is_rejected_without_mutation() {
        let mut p = vec![1.0];
        let mut s = AdamState::new(1);
        assert!(matches!(
            step(&mut p, &[f64::NAN], &mut s, &AdamHyper::with_lr(0.1)),
            Err(Error::Diverged(_))
        ));
        assert_eq!(p, vec![1.0]);
        assert_eq!(s.t, 0);
    }

    #[test]
    fn state_round_trips_bit_for_bit() {
        let mut p = vec![0.3, 0.1, -0.7];
        let mut s = AdamState::new(3);
        for k in 0..7 {
            step(&mut p, &[0.1 * k as f64, -1.0 / 3.0, 1e-9], &mut s, &AdamHyper::with_lr(0.05)).unwrap();
        }
        let back: AdamState = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(back, s);
        assert!(back.v.iter().zip(&s.v).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
