//! Subject-level splitting, classifier training with early stopping, cross-validation
//! and random architecture search.

mod cv;
mod early_stop;
mod search;
mod split;

pub use cv::{run_cv, train_fold, CvResult, FoldResult, Hyperparams};
pub use early_stop::{simulate_stop, EarlyStopPolicy, EarlyStopper, StopMode, StopReason};
pub use search::{random_search, SearchSpace, TrialOutcome, TrialResult};
pub use split::{make_split, session_indices, subject_labels, Fold, SplitPlan};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::manifest::CohortManifest;
use crate::dataio::nifti::read_volume_f32;
use crate::error::{Error, Result};
use crate::network::{argmax_rows, Mode, Network};
use crate::volume::{batch_tensor, Volume};

/// Mean of per-class recalls over both classes; errors if either is absent.
pub fn balanced_accuracy(truth: &[usize], predicted: &[usize]) -> Result<f64> {
    if truth.len() != predicted.len() {
        return Err(Error::dim("balanced_accuracy", format!("{} labels vs {} predictions", truth.len(), predicted.len())));
    }
    if truth.is_empty() {
        return Err(Error::Empty("label list"));
    }
    let mut recall = 0.0;
    for class in 0..2 {
        let total = truth.iter().filter(|&&t| t == class).count();
        if total == 0 {
            return Err(Error::MissingClass(class));
        }
        let hit = truth.iter().zip(predicted).filter(|&(&t, &p)| t == class && p == class).count();
        recall += hit as f64 / total as f64;
    }
    Ok(recall / 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    #[default]
    None,
    /// Per-image rescaling to [0, 1].
    MinMax,
}

impl std::str::FromStr for Normalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Normalization::None),
            "minmax" => Ok(Normalization::MinMax),
            other => Err(Error::InvalidArgument(format!("unknown normalization {other:?}"))),
        }
    }
}

impl std::fmt::Display for Normalization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Normalization::None => "none",
            Normalization::MinMax => "minmax",
        })
    }
}

pub fn normalize(v: &Volume<f32>, norm: Normalization) -> Volume<f32> {
    match norm {
        Normalization::None => v.clone(),
        Normalization::MinMax => {
            let (lo, hi) = (v.min_value(), v.max_value());
            let span = hi - lo;
            if span > 0.0 {
                v.map(|x| (x - lo) / span)
            } else {
                v.map(|_| 0.0)
            }
        }
    }
}

/// Labelled volumes held in memory.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub volumes: Vec<Volume<f32>>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(volumes: Vec<Volume<f32>>, labels: Vec<usize>) -> Result<Self> {
        if volumes.len() != labels.len() {
            return Err(Error::dim("dataset", format!("{} volumes vs {} labels", volumes.len(), labels.len())));
        }
        Ok(Self { volumes, labels })
    }

    pub fn len(&self) -> usize {
        self.volumes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.volumes.is_empty()
    }

    fn batch(&self, idx: &[usize]) -> Result<(crate::volgrad::Tensor<f32>, Vec<usize>)> {
        let vols: Vec<&Volume<f32>> = idx.iter().map(|&i| &self.volumes[i]).collect();
        Ok((batch_tensor(&vols)?, idx.iter().map(|&i| self.labels[i]).collect()))
    }
}

/// A manifest with every volume loaded, index-aligned with `manifest.entries`.
#[derive(Debug, Clone)]
pub struct CohortData {
    pub manifest: CohortManifest,
    pub volumes: Vec<Volume<f32>>,
}

impl CohortData {
    pub fn load(manifest: CohortManifest) -> Result<Self> {
        let volumes = manifest
            .entries
            .par_iter()
            .map(|e| read_volume_f32(manifest.resolve(e)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { manifest, volumes })
    }

    pub fn dataset(&self, indices: &[usize], norm: Normalization) -> Dataset {
        Dataset {
            volumes: indices.iter().map(|&i| normalize(&self.volumes[i], norm)).collect(),
            labels: indices.iter().map(|&i| self.manifest.entries[i].diagnosis.class()).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub policy: EarlyStopPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { learning_rate: 0.01, weight_decay: 1e-4, batch_size: 8, policy: EarlyStopPolicy::classifier() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_balanced_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose weights were returned: highest validation balanced accuracy,
    /// ties broken by lower validation loss, then by earlier epoch.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainingLog {
    pub fn best(&self) -> &EpochRecord {
        &self.epochs[self.best_epoch - 1]
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("epoch\ttrain_loss\tval_loss\tval_balanced_accuracy\n");
        for e in &self.epochs {
            s.push_str(&format!("{}\t{}\t{}\t{}\n", e.epoch, e.train_loss, e.val_loss, e.val_balanced_accuracy));
        }
        s
    }
}

/// Validation cross-entropy and balanced accuracy of an eval-mode network.
pub fn validate(net: &Network<f32>, data: &Dataset) -> Result<(f64, f64)> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let (x, y) = data.batch(&idx)?;
    let (loss, probs) = net.evaluate(&x, &y)?;
    Ok((loss as f64, balanced_accuracy(&y, &argmax_rows(&probs))?))
}

/// Mini-batch SGD, reshuffled every epoch, keeping the last partial batch. Early
/// stopping watches validation cross-entropy; the returned network is the epoch with
/// the best validation balanced accuracy (lower validation loss among ties), in eval mode.
pub fn train_classifier<R: Rng + ?Sized>(
    mut net: Network<f32>,
    train: &Dataset,
    validation: &Dataset,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(Network<f32>, TrainingLog)> {
    if train.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if validation.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    cfg.policy.validate()?;
    let mut stopper = cfg.policy.stopper();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::new();
    let mut best: Option<(f64, f64, usize, Network<f32>)> = None;
    let mut stopped_early = false;
    for epoch in 1..=cfg.policy.max_epochs {
        net.set_mode(Mode::Train);
        order.shuffle(rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = train.batch(chunk)?;
            let loss = net.train_step(&x, &y, cfg.learning_rate, cfg.weight_decay, rng)?;
            total += loss as f64 * chunk.len() as f64;
        }
        net.set_mode(Mode::Eval);
        let (val_loss, val_ba) = validate(&net, validation)?;
        let record = EpochRecord { epoch, train_loss: total / train.len() as f64, val_loss, val_balanced_accuracy: val_ba };
        log::debug!("epoch {epoch}: train {:.4} val {:.4} ba {:.3}", record.train_loss, val_loss, val_ba);
        log.push(record);
        let better = best.as_ref().is_none_or(|(b_ba, b_loss, _, _)| {
            val_ba > *b_ba || (val_ba == *b_ba && val_loss < *b_loss)
        });
        if better {
            best = Some((val_ba, val_loss, epoch, net.clone()));
        }
        if let Some(reason) = stopper.observe(val_loss) {
            stopped_early = reason == StopReason::Patience;
            break;
        }
    }
    let (_, _, best_epoch, best_net) = best.expect("at least one epoch");
    Ok((best_net, TrainingLog { epochs: log, best_epoch, stopped_early }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_accuracy_identities() {
        assert_eq!(balanced_accuracy(&[0, 0, 1, 1], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(balanced_accuracy(&[0, 0, 1, 1], &[1, 1, 1, 1]).unwrap(), 0.5);
        // sensitivity 4/5, specificity 3/5
        let truth = [1, 1, 1, 1, 1, 0, 0, 0, 0, 0];
        let pred = [1, 1, 1, 1, 0, 0, 0, 0, 1, 1];
        assert!((balanced_accuracy(&truth, &pred).unwrap() - 0.7).abs() < 1e-12);
        assert!(matches!(balanced_accuracy(&[1, 1], &[1, 0]), Err(Error::MissingClass(0))));
        assert!(balanced_accuracy(&[], &[]).is_err());
    }

    #[test]
    fn minmax_normalization() {
        let v = Volume::new([1, 1, 3], vec![0.25f32, 0.625, 1.0]).unwrap();
        assert_eq!(normalize(&v, Normalization::MinMax).data(), &[0.0, 0.5, 1.0]);
        assert_eq!(normalize(&Volume::filled([1, 1, 2], 0.3f32), Normalization::MinMax).data(), &[0.0, 0.0]);
    }
}
