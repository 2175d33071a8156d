use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{session_indices, train_classifier, validate, CohortData, Normalization, SplitPlan, TrainConfig, TrainingLog};
use crate::error::{Error, Result};
use crate::network::{ArchitectureSpec, Network};
use crate::seed::job_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub spec: ArchitectureSpec,
    pub train: TrainConfig,
    pub normalization: Normalization,
}

#[derive(Debug, Clone)]
pub struct FoldResult {
    pub fold: usize,
    pub network: Network<f32>,
    pub log: TrainingLog,
    pub val_balanced_accuracy: f64,
    /// `None` when the plan has no test subjects.
    pub test_balanced_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct CvResult {
    pub folds: Vec<FoldResult>,
}

impl CvResult {
    pub fn mean_val_balanced_accuracy(&self) -> f64 {
        self.folds.iter().map(|f| f.val_balanced_accuracy).sum::<f64>() / self.folds.len() as f64
    }

    pub fn mean_test_balanced_accuracy(&self) -> Option<f64> {
        let v: Option<Vec<f64>> = self.folds.iter().map(|f| f.test_balanced_accuracy).collect();
        v.map(|v| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn table_tsv(&self) -> String {
        let fmt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_else(|| "NA".into());
        let mut s = String::from("fold\tbest_epoch\tval_balanced_accuracy\ttest_balanced_accuracy\n");
        for f in &self.folds {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                f.fold,
                f.log.best_epoch,
                f.val_balanced_accuracy,
                fmt(f.test_balanced_accuracy)
            ));
        }
        s.push_str(&format!(
            "mean\t\t{}\t{}\n",
            self.mean_val_balanced_accuracy(),
            fmt(self.mean_test_balanced_accuracy())
        ));
        s
    }
}

/// Trains one fold: all sessions of training subjects, first session of validation
/// and test subjects.
pub fn train_fold(data: &CohortData, plan: &SplitPlan, fold: usize, hp: &Hyperparams, seed: u64) -> Result<FoldResult> {
    let f = plan
        .folds
        .get(fold)
        .ok_or_else(|| Error::InvalidArgument(format!("fold {fold} of {}", plan.folds.len())))?;
    let m = &data.manifest;
    let train = data.dataset(&session_indices(m, &f.train, true), hp.normalization);
    let val = data.dataset(&session_indices(m, &f.validation, false), hp.normalization);
    let net = Network::build(hp.spec.clone(), &mut job_rng(seed, "fold-init", fold as u64))?;
    let (net, log) = train_classifier(net, &train, &val, &hp.train, &mut job_rng(seed, "fold-train", fold as u64))?;
    let test_balanced_accuracy = if plan.test_subjects.is_empty() {
        None
    } else {
        let test = data.dataset(&session_indices(m, &plan.test_subjects, false), hp.normalization);
        Some(validate(&net, &test)?.1)
    };
    Ok(FoldResult { fold, val_balanced_accuracy: log.best().val_balanced_accuracy, network: net, log, test_balanced_accuracy })
}

/// All folds, run in parallel; each fold's seeds derive from `(seed, fold)`.
pub fn run_cv(data: &CohortData, plan: &SplitPlan, hp: &Hyperparams, seed: u64) -> Result<CvResult> {
    let folds = (0..plan.folds.len())
        .into_par_iter()
        .map(|k| train_fold(data, plan, k, hp, seed))
        .collect::<Result<Vec<_>>>()?;
    Ok(CvResult { folds })
}
