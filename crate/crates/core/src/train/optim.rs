use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Inverted dropout: surviving entries are scaled by `1 / (1 - rate)` so the
/// expected activation is unchanged.
#[derive(Debug, Clone)]
pub struct Dropout {
    rate: f64,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(rate: f64, seed: u64) -> Self {
        Self::from_rng(rate, ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn from_rng(rate: f64, rng: ChaCha8Rng) -> Self {
        assert!((0.0..1.0).contains(&rate), "dropout rate {rate} outside [0, 1)");
        Self { rate, rng }
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    /// A fresh multiplicative mask, or `None` when the rate is zero.
    pub fn mask(&mut self, shape: (usize, usize)) -> Option<Array2<f64>> {
        if self.rate == 0.0 {
            return None;
        }
        let keep = 1.0 / (1.0 - self.rate);
        let rate = self.rate;
        Some(Array2::from_shape_simple_fn(shape, || {
            if self.rng.gen::<f64>() < rate {
                0.0
            } else {
                keep
            }
        }))
    }
}

/// Applies inverted dropout to one vector. Outside training the input is
/// returned unchanged.
pub fn apply_dropout<R: Rng>(x: &Array1<f64>, rate: f64, rng: &mut R, training: bool) -> Array1<f64> {
    if !training || rate == 0.0 {
        return x.clone();
    }
    let keep = 1.0 / (1.0 - rate);
    x.mapv(|v| if rng.gen::<f64>() < rate { 0.0 } else { v * keep })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One bias-corrected Adam update of every tensor in `params`. The moment
/// buffers are allocated on the first call and must keep their shapes.
pub fn adam_step(params: &mut [&mut [f64]], grads: &[&[f64]], state: &mut AdamState, hp: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape("adam gradient tensors", params.len(), grads.len()));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.len() != g.len() {
            return Err(Error::shape("adam gradient length", p.len(), g.len()));
        }
    }
    if state.step == 0 && state.m.is_empty() {
        state.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
        state.v = state.m.clone();
    }
    if state.m.len() != params.len() {
        return Err(Error::shape("adam state tensors", state.m.len(), params.len()));
    }
    for (m, p) in state.m.iter().zip(params.iter()) {
        if m.len() != p.len() {
            return Err(Error::shape("adam state length", m.len(), p.len()));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        for i in 0..p.len() {
            m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g[i];
            v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= hp.learning_rate * m_hat / (v_hat.sqrt() + hp.epsilon);
        }
    }
    Ok(())
}
