//! Reconstruction losses for SFE pretraining and the point-cloud loss.

use serde::{Deserialize, Serialize};

use super::model::encoder_blocks;
use crate::error::{Error, Result};
use crate::tensor::{ops, Graph, ParamStore, Tensor, Var};

/// Stabilising constants of the SSIM ratio.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimConstants {
    pub c1: f64,
    pub c2: f64,
}

impl SsimConstants {
    pub fn new(c1: f64, c2: f64) -> Result<Self> {
        if !(c1 > 0.0 && c2 > 0.0) {
            return Err(Error::Parameter("SSIM constants must be positive".into()));
        }
        Ok(Self { c1, c2 })
    }
}

impl Default for SsimConstants {
    /// `(0.01)²` and `(0.03)²` for images in [0, 1].
    fn default() -> Self {
        Self {
            c1: 0.01 * 0.01,
            c2: 0.03 * 0.03,
        }
    }
}

/// Frozen feature extractor for the perceptual loss: a snapshot of the first
/// encoder blocks. Its weights enter the graph as constants, so no gradient
/// can reach them.
#[derive(Clone, Debug, PartialEq)]
pub struct Perceptual {
    weights: ParamStore,
    taps: usize,
}

/// Number of encoder blocks feeding the perceptual loss.
pub const PERCEPTUAL_TAPS: usize = 2;

impl Perceptual {
    /// Snapshot the first `min(PERCEPTUAL_TAPS, blocks)` encoder blocks.
    pub fn snapshot(encoder: &ParamStore, blocks: usize) -> Result<Self> {
        let taps = PERCEPTUAL_TAPS.min(blocks);
        let mut weights = ParamStore::new();
        for i in 0..taps {
            let sub = encoder.subset(&format!("sfe.b{i}."));
            if sub.is_empty() {
                return Err(Error::Contract(format!("encoder block {i} missing for perceptual loss")));
            }
            for (k, v) in sub.iter() {
                weights.insert(k, v.clone())?;
            }
        }
        Ok(Self { weights, taps })
    }

    pub fn weights(&self) -> &ParamStore {
        &self.weights
    }

    pub fn taps(&self) -> usize {
        self.taps
    }
}

/// Mean squared error between two tensors of the same shape.
pub fn mse_loss(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    g.mse(pred, target)
}

/// `Σ_i ‖φ_i(pred) − φ_i(target)‖²` over the perceptual taps.
pub fn perceptual_loss(g: &mut Graph, phi: &Perceptual, pred: Var, target: Var) -> Result<Var> {
    let a = encoder_blocks(g, &phi.weights, pred, phi.taps, true)?;
    let b = encoder_blocks(g, &phi.weights, target, phi.taps, true)?;
    let mut terms = Vec::with_capacity(phi.taps);
    for (x, y) in a.into_iter().zip(b) {
        terms.push((g.sum_sq(x, y)?, 1.0));
    }
    g.weighted_sum(&terms)
}

/// `1 − SSIM(pred, target)`.
pub fn ssim_loss(g: &mut Graph, pred: Var, target: Var, c: SsimConstants) -> Result<Var> {
    let s = g.ssim(pred, target, c.c1, c.c2)?;
    let one = g.input(Tensor::scalar(1.0));
    g.weighted_sum(&[(one, 1.0), (s, -1.0)])
}

/// Plain SSIM of two images.
pub fn ssim(pred: &Tensor, target: &Tensor, c: SsimConstants) -> Result<f64> {
    ops::ssim(pred, target, c.c1, c.c2)
}

/// Weighted pretraining objective `l_m + α·l_p + β·l_s`.
pub fn sfe_composite_loss(
    g: &mut Graph,
    pred: Var,
    target: Var,
    phi: Option<&Perceptual>,
    alpha: f64,
    beta: f64,
    c: SsimConstants,
) -> Result<Var> {
    if alpha < 0.0 || beta < 0.0 {
        return Err(Error::Parameter("loss weights must be non-negative".into()));
    }
    let m = mse_loss(g, pred, target)?;
    let mut terms = vec![(m, 1.0)];
    if alpha > 0.0 {
        let phi = phi.ok_or_else(|| Error::Contract("perceptual weight set without a feature extractor".into()))?;
        terms.push((perceptual_loss(g, phi, pred, target)?, alpha));
    }
    if beta > 0.0 {
        terms.push((ssim_loss(g, pred, target, c)?, beta));
    }
    g.weighted_sum(&terms)
}
