//! SGD with classic momentum and the polynomial learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `lr0 · (1 − iter/total_iter)^power`.
pub fn poly_lr(lr0: f64, iter: usize, total_iter: usize, power: f64) -> Result<f64> {
    if total_iter == 0 {
        return Err(Error::InvalidArgument("total_iter must be > 0".into()));
    }
    if iter > total_iter {
        return Err(Error::InvalidArgument(format!(
            "iter {iter} exceeds total_iter {total_iter}"
        )));
    }
    Ok(lr0 * (1.0 - iter as f64 / total_iter as f64).powf(power))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub power: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            // Tuned for the toy network, which has no normalization layers.
            lr0: 0.05,
            momentum: 0.9,
            weight_decay: 1.0e-4,
            power: 0.8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SgdState {
    pub config: SgdConfig,
    buffers: Vec<Tensor>,
}

impl SgdState {
    pub fn new(config: SgdConfig, params: &[Tensor]) -> Self {
        SgdState {
            config,
            buffers: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
        }
    }

    pub fn buffers(&self) -> &[Tensor] {
        &self.buffers
    }

    /// One update: `v ← m·v + g + wd·p`, then `p ← p − lr·v`.
    ///
    /// `names` is only used for diagnostics. Grads are checked for NaN/Inf
    /// before any parameter is touched; an update that overflows a parameter
    /// is reported after the fact.
    pub fn step(
        &mut self,
        params: &mut [Tensor],
        grads: &[Tensor],
        names: &[String],
        lr: f64,
    ) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.buffers.len() {
            return Err(Error::shape(
                "sgd_step",
                format!(
                    "{} params, {} grads, {} buffers",
                    params.len(),
                    grads.len(),
                    self.buffers.len()
                ),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.buffers[i].shape() {
                return Err(Error::shape(
                    "sgd_step",
                    format!("{}: param {:?} vs grad {:?}", names[i], p.shape(), g.shape()),
                ));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite {
                    what: format!("gradient of {}", names[i]),
                });
            }
        }
        let (m, wd) = (self.config.momentum as f32, self.config.weight_decay as f32);
        let lr = lr as f32;
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.buffers) {
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = m * *vv + gv + wd * *pv;
                *pv -= lr * *vv;
            }
        }
        match params.iter().position(|p| !p.all_finite()) {
            Some(i) => Err(Error::NonFinite {
                what: format!("{} after update", names[i]),
            }),
            None => Ok(()),
        }
    }
}
