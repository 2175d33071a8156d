use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{mask_loss, mask_loss_and_gradient, ones_mask, threshold_mask, MaskOptConfig};
use crate::error::{Error, Result};
use crate::network::Network;
use crate::trainer::EarlyStopPolicy;
use crate::volgrad::Scalar;
use crate::volume::{batch_tensor, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskEpoch {
    /// 0 is the all-ones initialization.
    pub epoch: usize,
    pub train_loss: f64,
    /// Validation loss for group masks; `None` when no validation set is used.
    pub val_loss: Option<f64>,
}

impl MaskEpoch {
    pub fn monitored(&self) -> f64 {
        self.val_loss.unwrap_or(self.train_loss)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskLog {
    pub epochs: Vec<MaskEpoch>,
    pub best_epoch: usize,
    pub best_loss: f64,
    pub stopped_early: bool,
    /// Mean loss of each training image over the steps it drove.
    pub image_losses: Vec<f64>,
}

impl MaskLog {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("epoch\ttrain_mask_loss\tval_mask_loss\n");
        for e in &self.epochs {
            let v = e.val_loss.map(|v| v.to_string()).unwrap_or_else(|| "NA".into());
            s.push_str(&format!("{}\t{}\t{}\n", e.epoch, e.train_loss, v));
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct MaskResult<T> {
    /// Best mask after thresholding.
    pub mask: Volume<T>,
    /// Best mask before thresholding.
    pub raw: Volume<T>,
    pub log: MaskLog,
}

/// Indices of images the network assigns to `class`.
pub fn correctly_classified<T: Scalar>(net: &Network<T>, images: &[&Volume<T>], class: usize) -> Result<Vec<usize>> {
    if images.is_empty() {
        return Ok(Vec::new());
    }
    let pred = net.predict(&batch_tensor(images)?)?;
    Ok(pred.iter().enumerate().filter(|&(_, &p)| p == class).map(|(i, _)| i).collect())
}

fn require_target<T: Scalar>(net: &Network<T>, images: &[&Volume<T>], class: usize) -> Result<()> {
    let pred = net.predict(&batch_tensor(images)?)?;
    match pred.iter().position(|&p| p != class) {
        Some(index) => Err(Error::Misclassified { index, target: class }),
        None => Ok(()),
    }
}

fn step<T: Scalar>(m: &mut Volume<T>, g: &Volume<f64>, lr: f64) {
    for (v, &gv) in m.data_mut().iter_mut().zip(g.data()) {
        let next = v.as_f64() - lr * gv;
        *v = T::of(next.clamp(0.0, 1.0));
    }
    debug_assert!(m.data().iter().all(|v| (0.0..=1.0).contains(&v.as_f64())));
}

fn unbounded(policy: EarlyStopPolicy) -> EarlyStopPolicy {
    EarlyStopPolicy { max_epochs: usize::MAX, ..policy }
}

fn check_divergence(epoch: usize, loss: f64, initial: f64) -> Result<()> {
    if !loss.is_finite() || loss > 10.0 * initial {
        return Err(Error::Divergence { epoch, loss, initial });
    }
    Ok(())
}

/// One shared mask, one projected-gradient step per image per epoch in a freshly
/// shuffled order. The mask with the lowest monitored loss (validation loss, or the
/// epoch's mean training loss without a validation set) is returned, thresholded.
pub fn optimize_group_mask<T: Scalar, R: Rng + ?Sized>(
    net: &Network<T>,
    images: &[&Volume<T>],
    validation: &[&Volume<T>],
    cfg: &MaskOptConfig,
    rng: &mut R,
) -> Result<MaskResult<T>> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::Empty("image set"));
    }
    require_target(net, images, cfg.target_class)?;
    let mut m = ones_mask::<T>(images[0].dims());
    let train0 = mask_loss(net, images, &m, cfg)?;
    let val0 = if validation.is_empty() { None } else { Some(mask_loss(net, validation, &m, cfg)?) };
    let first = MaskEpoch { epoch: 0, train_loss: train0, val_loss: val0 };
    let initial = first.monitored();
    let mut stopper = unbounded(cfg.stop).stopper();
    stopper.observe(initial);
    let mut epochs = vec![first];
    let mut best = (initial, 0usize, m.clone());
    let mut stopped_early = false;
    let mut image_sum = vec![0.0; images.len()];
    let mut image_steps = 0usize;
    let mut order: Vec<usize> = (0..images.len()).collect();

    for epoch in 1..=cfg.stop.max_epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for &i in &order {
            let (loss, g) = mask_loss_and_gradient(net, &[images[i]], &m, cfg)?;
            total += loss;
            image_sum[i] += loss;
            step(&mut m, &g, cfg.learning_rate);
        }
        image_steps += 1;
        let train_loss = total / images.len() as f64;
        let val_loss = if validation.is_empty() { None } else { Some(mask_loss(net, validation, &m, cfg)?) };
        let e = MaskEpoch { epoch, train_loss, val_loss };
        check_divergence(epoch, e.monitored(), initial)?;
        epochs.push(e);
        if e.monitored() < best.0 {
            best = (e.monitored(), epoch, m.clone());
        }
        if stopper.observe(e.monitored()).is_some() {
            stopped_early = true;
            break;
        }
    }
    let (best_loss, best_epoch, raw) = best;
    let image_losses = image_sum.iter().map(|s| if image_steps > 0 { s / image_steps as f64 } else { 0.0 }).collect();
    Ok(MaskResult {
        mask: threshold_mask(&raw, cfg.threshold),
        raw,
        log: MaskLog { epochs, best_epoch, best_loss, stopped_early, image_losses },
    })
}

/// Single-image mask with both lambdas scaled by `session_multiplier`; the monitored
/// loss is the training loss on the image itself.
pub fn optimize_session_mask<T: Scalar>(net: &Network<T>, x: &Volume<T>, cfg: &MaskOptConfig) -> Result<MaskResult<T>> {
    let cfg = MaskOptConfig {
        lambda1: cfg.lambda1 * cfg.session_multiplier,
        lambda2: cfg.lambda2 * cfg.session_multiplier,
        ..*cfg
    };
    cfg.validate()?;
    require_target(net, &[x], cfg.target_class)?;
    let mut m = ones_mask::<T>(x.dims());
    let mut stopper = unbounded(cfg.stop).stopper();
    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, Volume<T>)> = None;
    let mut initial = f64::NAN;
    let mut stopped_early = false;
    for epoch in 0..=cfg.stop.max_epochs {
        let (loss, g) = mask_loss_and_gradient(net, &[x], &m, &cfg)?;
        if epoch == 0 {
            initial = loss;
        } else {
            check_divergence(epoch, loss, initial)?;
        }
        epochs.push(MaskEpoch { epoch, train_loss: loss, val_loss: None });
        if best.as_ref().is_none_or(|b| loss < b.0) {
            best = Some((loss, epoch, m.clone()));
        }
        if stopper.observe(loss).is_some() {
            stopped_early = true;
            break;
        }
        if epoch == cfg.stop.max_epochs {
            break;
        }
        step(&mut m, &g, cfg.learning_rate);
    }
    let (best_loss, best_epoch, raw) = best.expect("epoch 0 always runs");
    let image_losses = vec![epochs.iter().skip(1).map(|e| e.train_loss).sum::<f64>() / (epochs.len() - 1).max(1) as f64];
    Ok(MaskResult {
        mask: threshold_mask(&raw, cfg.threshold),
        raw,
        log: MaskLog { epochs, best_epoch, best_loss, stopped_early, image_losses },
    })
}
