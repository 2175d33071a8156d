use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum StopMode {
    /// Violation: loss above the best loss so far.
    Absolute,
    /// Violation: `(loss - best) / max(best, 1e-12) > tolerance`.
    Relative { tolerance: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopPolicy {
    pub patience: usize,
    pub max_epochs: usize,
    pub mode: StopMode,
}

impl EarlyStopPolicy {
    pub fn absolute(patience: usize, max_epochs: usize) -> Self {
        Self { patience, max_epochs, mode: StopMode::Absolute }
    }

    pub fn relative(tolerance: f64, patience: usize, max_epochs: usize) -> Self {
        Self { patience, max_epochs, mode: StopMode::Relative { tolerance } }
    }

    /// Classifier training: absolute, N = 5, at most 30 epochs.
    pub fn classifier() -> Self {
        Self::absolute(5, 30)
    }

    /// Group masks on the main cohort.
    pub fn group_mask() -> Self {
        Self::relative(0.05, 5, 150)
    }

    /// Group masks on the smaller external cohort.
    pub fn group_mask_extended() -> Self {
        Self::relative(0.05, 25, 300)
    }

    pub fn session_mask() -> Self {
        Self::relative(0.01, 200, 5000)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patience == 0 {
            return Err(Error::InvalidArgument("patience must be at least 1".into()));
        }
        if let StopMode::Relative { tolerance } = self.mode {
            if !(tolerance >= 0.0) {
                return Err(Error::InvalidArgument(format!("tolerance {tolerance} must be non-negative")));
            }
        }
        Ok(())
    }

    pub fn stopper(&self) -> EarlyStopper {
        EarlyStopper { policy: *self, best: None, violations: 0, epochs: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Patience,
    MaxEpochs,
}

/// Feeds on one monitored loss per epoch and says when to stop.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    policy: EarlyStopPolicy,
    best: Option<f64>,
    violations: usize,
    epochs: usize,
}

impl EarlyStopper {
    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn epochs(&self) -> usize {
        self.epochs
    }

    fn violates(&self, loss: f64, best: f64) -> bool {
        if loss.is_nan() {
            return true;
        }
        match self.policy.mode {
            StopMode::Absolute => loss > best,
            StopMode::Relative { tolerance } => (loss - best) / best.max(1e-12) > tolerance,
        }
    }

    /// Records one epoch. Returns `Some(reason)` when training should stop after it.
    pub fn observe(&mut self, loss: f64) -> Option<StopReason> {
        self.epochs += 1;
        match self.best {
            None => {
                if !loss.is_nan() {
                    self.best = Some(loss);
                }
            }
            Some(best) => {
                if self.violates(loss, best) {
                    self.violations += 1;
                } else {
                    self.violations = 0;
                }
                if loss < best {
                    self.best = Some(loss);
                }
            }
        }
        if self.violations >= self.policy.patience {
            Some(StopReason::Patience)
        } else if self.epochs >= self.policy.max_epochs {
            Some(StopReason::MaxEpochs)
        } else {
            None
        }
    }
}

/// Number of epochs run on a fixed trace (the trace is cut short by the policy).
pub fn simulate_stop(policy: &EarlyStopPolicy, trace: &[f64]) -> usize {
    let mut s = policy.stopper();
    for &l in trace {
        if s.observe(l).is_some() {
            break;
        }
    }
    s.epochs()
}
