//! Adam.
//!
//! The update runs entirely in f64: the optimizer keeps a 64-bit master copy
//! of every parameter alongside the first/second-moment accumulators and
//! writes f32 casts back into the network after each step. That keeps the
//! recurrence exactly reproducible (and checkable against an independent
//! 64-bit oracle at 1e-12) while the network itself stays 32-bit.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::mathf;
use crate::model::{NetGrads, Network};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum OptimError {
    #[error("non-finite gradient for layer {layer} ({kind}) at index {index}")]
    NonFiniteGradient { layer: usize, kind: &'static str, index: usize },
    #[error("gradient layout does not match optimizer state")]
    LayoutMismatch,
}

/// Adam hyperparameters; defaults follow the optimizer's original source.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams { lr: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// One Adam update on a flat parameter vector, `t` being the step count
/// *including* this step (t >= 1):
///
/// m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g^2;
/// theta <- theta - lr * m_hat / (sqrt(v_hat) + eps)
///
/// with bias-corrected m_hat = m / (1 - b1^t), v_hat = v / (1 - b2^t).
pub fn adam_update(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    h: &AdamParams,
) {
    debug_assert!(t >= 1);
    debug_assert_eq!(params.len(), grads.len());
    let bc1 = 1.0 - powi(h.beta1, t);
    let bc2 = 1.0 - powi(h.beta2, t);
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g;
        v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        params[i] -= h.lr * m_hat / (mathf::sqrt(v_hat) + h.epsilon);
    }
}

#[inline]
fn powi(base: f64, mut e: u64) -> f64 {
    let mut acc = 1.0;
    let mut b = base;
    while e > 0 {
        if e & 1 == 1 {
            acc *= b;
        }
        b *= b;
        e >>= 1;
    }
    acc
}

struct LayerState {
    master_w: Vec<f64>,
    m_w: Vec<f64>,
    v_w: Vec<f64>,
    master_b: Vec<f64>,
    m_b: Vec<f64>,
    v_b: Vec<f64>,
}

/// Full-network Adam state: per-layer moments plus the f64 master weights.
pub struct OptimizerState {
    pub hyper: AdamParams,
    pub t: u64,
    layers: Vec<LayerState>,
}

impl OptimizerState {
    /// Snapshot the network's parameters as the master copy.
    pub fn new(net: &Network, hyper: AdamParams) -> Self {
        let layers = net
            .layers()
            .iter()
            .map(|(_, l)| {
                let w: Vec<f64> = l.params.weights.iter().map(|&x| x as f64).collect();
                let b: Vec<f64> = l.params.bias.iter().map(|&x| x as f64).collect();
                LayerState {
                    m_w: alloc::vec![0.0; w.len()],
                    v_w: alloc::vec![0.0; w.len()],
                    master_w: w,
                    m_b: alloc::vec![0.0; b.len()],
                    v_b: alloc::vec![0.0; b.len()],
                    master_b: b,
                }
            })
            .collect();
        OptimizerState { hyper, t: 0, layers }
    }

    /// One optimization step over the whole network. Rejects non-finite
    /// gradients before touching any state, so an aborted step leaves the
    /// optimizer unchanged.
    pub fn step(&mut self, net: &mut Network, grads: &NetGrads) -> Result<(), OptimError> {
        if grads.dw.len() != self.layers.len() || grads.db.len() != self.layers.len() {
            return Err(OptimError::LayoutMismatch);
        }
        for (li, st) in self.layers.iter().enumerate() {
            if grads.dw[li].len() != st.master_w.len() || grads.db[li].len() != st.master_b.len() {
                return Err(OptimError::LayoutMismatch);
            }
            if let Some(index) = grads.dw[li].iter().position(|g| !g.is_finite()) {
                return Err(OptimError::NonFiniteGradient { layer: li, kind: "weights", index });
            }
            if let Some(index) = grads.db[li].iter().position(|g| !g.is_finite()) {
                return Err(OptimError::NonFiniteGradient { layer: li, kind: "bias", index });
            }
        }
        self.t += 1;
        let t = self.t;
        for (li, (st, layer)) in self.layers.iter_mut().zip(net.layers_mut()).enumerate() {
            adam_update(&mut st.master_w, &grads.dw[li], &mut st.m_w, &mut st.v_w, t, &self.hyper);
            adam_update(&mut st.master_b, &grads.db[li], &mut st.m_b, &mut st.v_b, t, &self.hyper);
            for (w, &mw) in layer.params.weights.iter_mut().zip(&st.master_w) {
                *w = mw as f32;
            }
            for (b, &mb) in layer.params.bias.iter_mut().zip(&st.master_b) {
                *b = mb as f32;
            }
        }
        Ok(())
    }
}
