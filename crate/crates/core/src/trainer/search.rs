use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::cv::{train_fold, Hyperparams};
use super::{CohortData, EarlyStopPolicy, Normalization, SplitPlan, TrainConfig};
use crate::error::{Error, Result};
use crate::network::{ArchitectureSpec, ConvBlockSpec, Reduction, MAX_CHANNELS_FACTOR};
use crate::seed::job_rng;
use crate::volgrad::kernels::DEFAULT_NEGATIVE_SLOPE;

/// Sampling ranges; integer ranges are inclusive, `log10_*` ranges are sampled
/// uniformly in log space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub conv_blocks: (usize, usize),
    pub first_filters: Vec<usize>,
    pub sub_blocks: (usize, usize),
    pub reductions: Vec<Reduction>,
    pub fc_layers: (usize, usize),
    pub dropout: (f64, f64),
    pub log10_learning_rate: (f64, f64),
    pub log10_weight_decay: (f64, f64),
    pub batch_sizes: Vec<usize>,
    pub normalizations: Vec<Normalization>,
    pub policy: EarlyStopPolicy,
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            conv_blocks: (1, 7),
            first_filters: vec![4, 8, 16],
            sub_blocks: (1, 3),
            reductions: vec![Reduction::MaxPool, Reduction::StridedConv],
            fc_layers: (1, 3),
            dropout: (0.0, 0.8),
            log10_learning_rate: (-4.0, -1.0),
            log10_weight_decay: (-6.0, -2.0),
            batch_sizes: vec![4, 8, 16],
            normalizations: vec![Normalization::None, Normalization::MinMax],
            policy: EarlyStopPolicy::classifier(),
        }
    }
}

impl SearchSpace {
    fn check(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(format!("search space: {what}")));
        if self.conv_blocks.0 == 0 || self.conv_blocks.0 > self.conv_blocks.1 {
            return bad("conv_blocks");
        }
        if self.sub_blocks.0 == 0 || self.sub_blocks.0 > self.sub_blocks.1 {
            return bad("sub_blocks");
        }
        if self.fc_layers.0 == 0 || self.fc_layers.0 > self.fc_layers.1 {
            return bad("fc_layers");
        }
        if self.first_filters.is_empty() || self.reductions.is_empty() || self.batch_sizes.is_empty() || self.normalizations.is_empty() {
            return bad("empty choice list");
        }
        if self.dropout.0 > self.dropout.1 || self.log10_learning_rate.0 > self.log10_learning_rate.1 || self.log10_weight_decay.0 > self.log10_weight_decay.1 {
            return bad("inverted range");
        }
        Ok(())
    }

    /// Samples hyperparameters; the architecture is not validated here.
    pub fn sample<R: Rng + ?Sized>(&self, input_shape: [usize; 3], rng: &mut R) -> Hyperparams {
        let n_blocks = rng.gen_range(self.conv_blocks.0..=self.conv_blocks.1);
        let first = *self.first_filters.choose(rng).expect("non-empty");
        let conv_blocks = (0..n_blocks)
            .map(|i| ConvBlockSpec {
                sub_blocks: rng.gen_range(self.sub_blocks.0..=self.sub_blocks.1),
                out_channels: (first << i.min(31)).min(first * MAX_CHANNELS_FACTOR),
                reduction: *self.reductions.choose(rng).expect("non-empty"),
            })
            .collect();
        let spec = ArchitectureSpec {
            input_shape,
            conv_blocks,
            n_fc_layers: rng.gen_range(self.fc_layers.0..=self.fc_layers.1),
            fc_hidden: 64,
            dropout_rate: sample_range(rng, self.dropout),
            negative_slope: DEFAULT_NEGATIVE_SLOPE,
            n_classes: 2,
        };
        let train = TrainConfig {
            learning_rate: 10f64.powf(sample_range(rng, self.log10_learning_rate)),
            weight_decay: 10f64.powf(sample_range(rng, self.log10_weight_decay)),
            batch_size: *self.batch_sizes.choose(rng).expect("non-empty"),
            policy: self.policy,
        };
        Hyperparams { spec, train, normalization: *self.normalizations.choose(rng).expect("non-empty") }
    }
}

fn sample_range<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum TrialOutcome {
    Trained { val_balanced_accuracy: f64, best_epoch: usize },
    Failed { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub trial: usize,
    pub hyperparams: Hyperparams,
    pub outcome: TrialOutcome,
}

impl TrialResult {
    pub fn score(&self) -> Option<f64> {
        match self.outcome {
            TrialOutcome::Trained { val_balanced_accuracy, .. } => Some(val_balanced_accuracy),
            TrialOutcome::Failed { .. } => None,
        }
    }
}

/// Trains every trial on fold 0 and ranks by validation balanced accuracy
/// (descending, ties by trial index); failed trials go last.
pub fn random_search(
    space: &SearchSpace,
    n_trials: usize,
    data: &CohortData,
    plan: &SplitPlan,
    input_shape: [usize; 3],
    seed: u64,
) -> Result<Vec<TrialResult>> {
    space.check()?;
    let mut results: Vec<TrialResult> = (0..n_trials)
        .into_par_iter()
        .map(|t| {
            let hp = space.sample(input_shape, &mut job_rng(seed, "trial-sample", t as u64));
            let outcome = match hp.spec.block_extents() {
                Err(e) => TrialOutcome::Failed { reason: e.to_string() },
                Ok(_) => match train_fold(data, plan, 0, &hp, crate::seed::derive_seed(seed, "trial", t as u64)) {
                    Ok(f) => TrialOutcome::Trained { val_balanced_accuracy: f.val_balanced_accuracy, best_epoch: f.log.best_epoch },
                    Err(e) => TrialOutcome::Failed { reason: e.to_string() },
                },
            };
            TrialResult { trial: t, hyperparams: hp, outcome }
        })
        .collect();
    results.sort_by(|a, b| match (a.score(), b.score()) {
        (Some(x), Some(y)) => y.total_cmp(&x).then(a.trial.cmp(&b.trial)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.trial.cmp(&b.trial),
    });
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from_seed;

    #[test]
    fn sampled_specs_either_validate_or_fail_cleanly() {
        let space = SearchSpace::default();
        let mut rng = rng_from_seed(11);
        let mut ok = 0;
        for _ in 0..200 {
            let hp = space.sample([24, 24, 24], &mut rng);
            match hp.spec.block_extents() {
                Ok(ext) => {
                    ok += 1;
                    assert!(ext.iter().flatten().all(|&e| e >= 1));
                }
                Err(e) => assert!(matches!(e, Error::Architecture(_))),
            }
        }
        assert!(ok > 0);
    }
}
