//! Meaningful-perturbation masks: blending toward a neutral value, the regularized
//! suppression loss and its gradient, group/session optimization, thresholding,
//! quality checks and the regularization grid search.

mod grid;
mod optimize;
mod qc;

pub use grid::{default_sweeps, grid_search_masks, GridAxis, GridCell, GridFailure, GridOutcome, GridSweep, MaskHyper};
pub use optimize::{correctly_classified, optimize_group_mask, optimize_session_mask, MaskEpoch, MaskLog, MaskResult};
pub use qc::{loss_outlier_flags, quality_check_stage1, QcEntry, QcReport, QC_MIN_MAX_VALUE};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::Network;
use crate::trainer::EarlyStopPolicy;
use crate::volgrad::{Scalar, Tensor};
use crate::volume::Volume;

pub const DEFAULT_THRESHOLD: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskOptConfig {
    /// Value masked voxels are blended toward.
    pub mu: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub learning_rate: f64,
    /// Class whose probability is minimized (AD = 1).
    pub target_class: usize,
    pub stop: EarlyStopPolicy,
    /// Session masks scale both lambdas by this factor.
    pub session_multiplier: f64,
    /// Floor on `|1 - m|` and `|grad m|` before raising to a power below one.
    pub epsilon: f64,
    pub threshold: f64,
}

impl Default for MaskOptConfig {
    fn default() -> Self {
        Self {
            mu: 1.0,
            lambda1: 1e-4,
            lambda2: 1e-2,
            beta1: 0.1,
            beta2: 1.0,
            learning_rate: 0.1,
            target_class: 1,
            stop: EarlyStopPolicy::group_mask(),
            session_multiplier: 100.0,
            epsilon: 1e-6,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

impl MaskOptConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return bad(format!("lambdas must be >= 0, got {} and {}", self.lambda1, self.lambda2));
        }
        if !(self.beta1 > 0.0 && self.beta2 > 0.0) {
            return bad(format!("betas must be > 0, got {} and {}", self.beta1, self.beta2));
        }
        if !(0.0..=1.0).contains(&self.mu) {
            return bad(format!("mu {} not in [0, 1]", self.mu));
        }
        if !(self.learning_rate > 0.0) || !(self.epsilon > 0.0) {
            return bad("learning rate and epsilon must be positive".into());
        }
        if self.target_class > 1 {
            return bad(format!("target class {}", self.target_class));
        }
        self.stop.validate()
    }
}

fn check_shape<T: Copy, U: Copy>(op: &'static str, a: &Volume<T>, b: &Volume<U>) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(Error::dim(op, format!("{:?} vs {:?}", a.dims(), b.dims())))
    }
}

/// `m * X + (1 - m) * mu`, voxelwise.
pub fn apply_mask<T: Scalar>(x: &Volume<T>, m: &Volume<T>, mu: f64) -> Result<Volume<T>> {
    check_shape("apply_mask", x, m)?;
    let mu = T::of(mu);
    let data = x.data().iter().zip(m.data()).map(|(&x, &m)| m * x + (T::one() - m) * mu).collect();
    Volume::new(x.dims(), data)
}

pub fn ones_mask<T: Scalar>(dims: [usize; 3]) -> Volume<T> {
    Volume::filled(dims, T::one())
}

/// `sum |1 - m|^beta1`.
pub fn sparsity_term<T: Scalar>(m: &Volume<T>, beta1: f64) -> f64 {
    m.data().iter().map(|&v| (1.0 - v.as_f64()).abs().powf(beta1)).sum()
}

/// `d/dx |x|^beta` with the base floored at `eps`; zero at `x = 0`.
fn floored_power_derivative(x: f64, beta: f64, eps: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        beta * x.abs().max(eps).powf(beta - 1.0) * x.signum()
    }
}

pub fn sparsity_gradient<T: Scalar>(m: &Volume<T>, beta1: f64, eps: f64) -> Volume<f64> {
    m.map(|v| -floored_power_derivative(1.0 - v.as_f64(), beta1, eps))
}

fn forward_pairs(dims: [usize; 3]) -> impl Iterator<Item = (usize, usize)> {
    let [d, h, w] = dims;
    let strides = [h * w, w, 1];
    (0..d * h * w).flat_map(move |i| {
        let pos = [i / (h * w), (i / w) % h, i % w];
        (0..3).filter_map(move |a| (pos[a] + 1 < dims[a]).then_some((i, i + strides[a])))
    })
}

/// `sum_u sum_axis |m(u + e_axis) - m(u)|^beta2`, zero difference at the far faces.
pub fn tv_term<T: Scalar>(m: &Volume<T>, beta2: f64) -> f64 {
    let v = m.data();
    forward_pairs(m.dims()).map(|(i, j)| (v[j].as_f64() - v[i].as_f64()).abs().powf(beta2)).sum()
}

pub fn tv_gradient<T: Scalar>(m: &Volume<T>, beta2: f64, eps: f64) -> Volume<f64> {
    let v = m.data();
    let mut g = vec![0.0; v.len()];
    for (i, j) in forward_pairs(m.dims()) {
        let d = floored_power_derivative(v[j].as_f64() - v[i].as_f64(), beta2, eps);
        g[j] += d;
        g[i] -= d;
    }
    Volume::new(m.dims(), g).expect("same extent")
}

fn masked_batch<T: Scalar>(images: &[&Volume<T>], m: &Volume<T>, mu: f64) -> Result<Tensor<T>> {
    let masked = images.iter().map(|x| apply_mask(x, m, mu)).collect::<Result<Vec<_>>>()?;
    crate::volume::batch_tensor(&masked.iter().collect::<Vec<_>>())
}

/// Mean target-class probability of the masked images.
pub fn masked_probability<T: Scalar>(net: &Network<T>, images: &[&Volume<T>], m: &Volume<T>, cfg: &MaskOptConfig) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::Empty("image set"));
    }
    let probs = net.forward(&masked_batch(images, m, cfg.mu)?)?;
    let k = net.spec().n_classes;
    Ok(probs.data().iter().skip(cfg.target_class).step_by(k).map(|p| p.as_f64()).sum::<f64>() / images.len() as f64)
}

pub fn regularization<T: Scalar>(m: &Volume<T>, cfg: &MaskOptConfig) -> f64 {
    let s = if cfg.lambda1 != 0.0 { cfg.lambda1 * sparsity_term(m, cfg.beta1) } else { 0.0 };
    let t = if cfg.lambda2 != 0.0 { cfg.lambda2 * tv_term(m, cfg.beta2) } else { 0.0 };
    s + t
}

/// `lambda1 * sparsity + lambda2 * TV + mean target-class probability` on the masked batch.
pub fn mask_loss<T: Scalar>(net: &Network<T>, images: &[&Volume<T>], m: &Volume<T>, cfg: &MaskOptConfig) -> Result<f64> {
    Ok(regularization(m, cfg) + masked_probability(net, images, m, cfg)?)
}

/// Loss and its gradient with respect to every mask voxel.
pub fn mask_loss_and_gradient<T: Scalar>(
    net: &Network<T>,
    images: &[&Volume<T>],
    m: &Volume<T>,
    cfg: &MaskOptConfig,
) -> Result<(f64, Volume<f64>)> {
    if images.is_empty() {
        return Err(Error::Empty("image set"));
    }
    for x in images {
        check_shape("mask_gradient", x, m)?;
    }
    let (probs, gx) = net.class_probability_gradient(&masked_batch(images, m, cfg.mu)?, cfg.target_class)?;
    let n = m.len();
    let mut g = vec![0.0f64; n];
    for (i, x) in images.iter().enumerate() {
        let gi = &gx.data()[i * n..(i + 1) * n];
        for ((acc, &xv), &gv) in g.iter_mut().zip(x.data()).zip(gi) {
            *acc += (xv.as_f64() - cfg.mu) * gv.as_f64();
        }
    }
    if cfg.lambda1 != 0.0 {
        for (acc, s) in g.iter_mut().zip(sparsity_gradient(m, cfg.beta1, cfg.epsilon).data()) {
            *acc += cfg.lambda1 * s;
        }
    }
    if cfg.lambda2 != 0.0 {
        for (acc, t) in g.iter_mut().zip(tv_gradient(m, cfg.beta2, cfg.epsilon).data()) {
            *acc += cfg.lambda2 * t;
        }
    }
    let p = probs.iter().map(|p| p.as_f64()).sum::<f64>() / images.len() as f64;
    Ok((regularization(m, cfg) + p, Volume::new(m.dims(), g)?))
}

pub fn mask_gradient<T: Scalar>(net: &Network<T>, images: &[&Volume<T>], m: &Volume<T>, cfg: &MaskOptConfig) -> Result<Volume<f64>> {
    Ok(mask_loss_and_gradient(net, images, m, cfg)?.1)
}

/// Values strictly above `cutoff` become 1; the rest are unchanged.
pub fn threshold_mask<T: Scalar>(m: &Volume<T>, cutoff: f64) -> Volume<T> {
    m.map(|v| if v.as_f64() > cutoff { T::one() } else { v })
}

/// Number of voxels below `cutoff`.
pub fn coverage<T: Scalar>(m: &Volume<T>, cutoff: f64) -> usize {
    m.data().iter().filter(|v| v.as_f64() < cutoff).count()
}
