//! Adam with bias correction.
//!
//! One state instance owns the moment buffers for one parameter pack (an
//! entire network, or a flat vector such as inversion codes). Buffers are
//! shaped at construction; a shape drift between state and parameters is a
//! bug surfaced as a shape error, not silently re-shaped.

use alloc::vec;
use alloc::vec::Vec;

use crate::mlp::{MlpGrads, MlpParams};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    pub fn new(lr: f64) -> AdamHyper {
        AdamHyper {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn with_betas(lr: f64, beta1: f64, beta2: f64) -> AdamHyper {
        AdamHyper {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.lr.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidSpec(alloc::format!(
                "bad Adam hyperparameters {self:?}"
            )))
        }
    }
}

/// Moment buffers for one parameter pack, chunked the way the parameters are
/// (one chunk per layer for networks, a single chunk for flat vectors).
#[derive(Debug, Clone)]
pub struct AdamState {
    hyper: AdamHyper,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
    // Running β^t so bias correction never needs a pow call.
    beta1_t: f64,
    beta2_t: f64,
}

impl AdamState {
    pub fn for_mlp(params: &MlpParams, hyper: AdamHyper) -> Result<AdamState> {
        hyper.validate()?;
        let chunks: Vec<usize> = params
            .layers()
            .iter()
            .map(|l| l.w.rows() * l.w.cols() + l.b.len())
            .collect();
        Ok(Self::with_chunks(&chunks, hyper))
    }

    pub fn for_len(n: usize, hyper: AdamHyper) -> Result<AdamState> {
        hyper.validate()?;
        Ok(Self::with_chunks(&[n], hyper))
    }

    fn with_chunks(chunks: &[usize], hyper: AdamHyper) -> AdamState {
        AdamState {
            hyper,
            m: chunks.iter().map(|&n| vec![0.0; n]).collect(),
            v: chunks.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
            beta1_t: 1.0,
            beta2_t: 1.0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn hyper(&self) -> AdamHyper {
        self.hyper
    }

    /// One update on a whole network. Gradient layout must match the state's.
    pub fn step_mlp(&mut self, params: &mut MlpParams, grads: &MlpGrads) -> Result<()> {
        if grads.layers.len() != self.m.len() {
            return Err(Error::shape(
                "AdamState::step_mlp",
                (self.m.len(), 0),
                (grads.layers.len(), 0),
            ));
        }
        self.advance();
        // Collect each layer's (w ‖ b) into the layer chunk without copying
        // params: update weights then biases against the same moment slice.
        let mut updated = params.clone();
        for (idx, layer) in updated.layers_mut().iter_mut().enumerate() {
            let g = &grads.layers[idx];
            let nw = layer.w.rows() * layer.w.cols();
            if g.dw.shape() != layer.w.shape() || g.db.len() != layer.b.len() {
                return Err(Error::shape(
                    "AdamState::step_mlp layer",
                    layer.w.shape(),
                    g.dw.shape(),
                ));
            }
            let (mw, mb) = self.m[idx].split_at_mut(nw);
            let (vw, vb) = self.v[idx].split_at_mut(nw);
            update_chunk(
                self.hyper,
                self.beta1_t,
                self.beta2_t,
                mw,
                vw,
                layer.w.data_mut(),
                g.dw.data(),
                idx,
            )?;
            update_chunk(
                self.hyper,
                self.beta1_t,
                self.beta2_t,
                mb,
                vb,
                &mut layer.b,
                &g.db,
                idx,
            )?;
        }
        *params = updated;
        Ok(())
    }

    /// One update on a flat parameter vector (state built by `for_len`).
    pub fn step_flat(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if self.m.len() != 1 || self.m[0].len() != params.len() || grads.len() != params.len() {
            return Err(Error::shape(
                "AdamState::step_flat",
                (self.m.first().map_or(0, |c| c.len()), 1),
                (params.len(), 1),
            ));
        }
        self.advance();
        update_chunk(
            self.hyper,
            self.beta1_t,
            self.beta2_t,
            &mut self.m[0],
            &mut self.v[0],
            params,
            grads,
            0,
        )
    }

    fn advance(&mut self) {
        self.t += 1;
        self.beta1_t *= self.hyper.beta1;
        self.beta2_t *= self.hyper.beta2;
    }
}

#[allow(clippy::too_many_arguments)]
fn update_chunk(
    hyper: AdamHyper,
    beta1_t: f64,
    beta2_t: f64,
    m: &mut [f64],
    v: &mut [f64],
    params: &mut [f64],
    grads: &[f64],
    layer: usize,
) -> Result<()> {
    let bc1 = 1.0 - beta1_t;
    let bc2 = 1.0 - beta2_t;
    for i in 0..params.len() {
        let g = grads[i];
        if !g.is_finite() {
            return Err(Error::NonFinite {
                context: "adam gradient",
                layer,
            });
        }
        m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g;
        v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        params[i] -= hyper.lr * m_hat / (crate::fmath::sqrt(v_hat) + hyper.eps);
        if !params[i].is_finite() {
            return Err(Error::NonFinite {
                context: "adam parameter",
                layer,
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlp::Activation;
    use crate::rng;

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut r = rng::stream(1, 0);
        let mut net =
            MlpParams::init(&[2, 3, 1], Activation::Tanh, Activation::Identity, &mut r).unwrap();
        let before = net.clone();
        let mut state = AdamState::for_mlp(&net, AdamHyper::new(0.01)).unwrap();
        let zeros = MlpGrads::zeros_like(&net);
        state.step_mlp(&mut net, &zeros).unwrap();
        assert_eq!(net, before);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut w = [0.0f64];
        let mut state = AdamState::for_len(1, AdamHyper::new(0.1)).unwrap();
        state.step_flat(&mut w, &[1.0]).unwrap();
        // Bias-corrected first step is lr · g/(|g| + ε·scale) ≈ lr.
        assert!((w[0] + 0.1).abs() < 1e-8, "w = {}", w[0]);
    }

    #[test]
    fn hundred_steps_on_quadratic_approach_zero() {
        let mut w = [1.0f64];
        let mut state = AdamState::for_len(1, AdamHyper::new(0.05)).unwrap();
        for _ in 0..100 {
            let g = [2.0 * w[0]];
            state.step_flat(&mut w, &g).unwrap();
        }
        assert!(w[0].abs() < 0.2, "w = {}", w[0]);
    }

    #[test]
    fn non_finite_gradient_names_the_layer() {
        let mut r = rng::stream(2, 0);
        let mut net =
            MlpParams::init(&[2, 2, 2], Activation::Identity, Activation::Identity, &mut r)
                .unwrap();
        let mut state = AdamState::for_mlp(&net, AdamHyper::new(0.01)).unwrap();
        let mut grads = MlpGrads::zeros_like(&net);
        grads.layers[1].db[0] = f64::NAN;
        let err = state.step_mlp(&mut net, &grads).unwrap_err();
        assert!(matches!(err, Error::NonFinite { layer: 1, .. }), "{err:?}");
    }
}
