use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{coverage, optimize_group_mask, MaskLog, MaskOptConfig};
use crate::error::{Error, Result};
use crate::network::Network;
use crate::seed::job_rng;
use crate::volgrad::Scalar;
use crate::volume::Volume;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridAxis {
    Beta1,
    Beta2,
    Lambda1,
    Lambda2,
}

impl std::fmt::Display for GridAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GridAxis::Beta1 => "beta1",
            GridAxis::Beta2 => "beta2",
            GridAxis::Lambda1 => "lambda1",
            GridAxis::Lambda2 => "lambda2",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskHyper {
    pub lambda1: f64,
    pub lambda2: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl MaskHyper {
    fn with(self, axis: GridAxis, v: f64) -> Self {
        let mut h = self;
        match axis {
            GridAxis::Beta1 => h.beta1 = v,
            GridAxis::Beta2 => h.beta2 = v,
            GridAxis::Lambda1 => h.lambda1 = v,
            GridAxis::Lambda2 => h.lambda2 = v,
        }
        h
    }
}

/// One axis varied over `values`, everything else held at `base`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSweep {
    pub axis: GridAxis,
    pub values: Vec<f64>,
    pub base: MaskHyper,
}

/// The beta phase at lambda = (1e-4, 1e-3), then the lambda phase at beta = (0.1, 1).
pub fn default_sweeps() -> Vec<GridSweep> {
    let beta_phase = MaskHyper { lambda1: 1e-4, lambda2: 1e-3, beta1: 0.1, beta2: 1.0 };
    let lambda_phase = MaskHyper { lambda1: 1e-4, lambda2: 1e-2, beta1: 0.1, beta2: 1.0 };
    let lambdas = vec![0.1, 0.01, 0.001, 0.0001];
    vec![
        GridSweep { axis: GridAxis::Beta1, values: vec![0.1, 0.5, 1.0, 2.0], base: beta_phase },
        GridSweep { axis: GridAxis::Beta2, values: vec![1.0, 2.0, 3.0], base: beta_phase },
        GridSweep { axis: GridAxis::Lambda1, values: lambdas.clone(), base: lambda_phase },
        GridSweep { axis: GridAxis::Lambda2, values: lambdas, base: lambda_phase },
    ]
}

#[derive(Debug, Clone)]
pub struct GridCell<T> {
    pub sweep: usize,
    pub index: usize,
    pub axis: GridAxis,
    pub value: f64,
    pub hyper: MaskHyper,
    /// Learning rate that produced the mask (a tenth of the configured one after divergence).
    pub learning_rate: f64,
    pub mask: Volume<T>,
    pub log: MaskLog,
    /// Voxels below the threshold.
    pub coverage: usize,
    pub min_value: f64,
}

/// A cell that diverged at both learning rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridFailure {
    pub sweep: usize,
    pub index: usize,
    pub axis: GridAxis,
    pub value: f64,
    pub hyper: MaskHyper,
    pub reason: String,
}

pub type GridOutcome<T> = std::result::Result<GridCell<T>, GridFailure>;

/// One group mask per grid cell, cells in parallel. A cell that diverges is rerun
/// once with the learning rate divided by ten; if that diverges too the cell is
/// reported as a failure and the other cells are kept.
pub fn grid_search_masks<T: Scalar>(
    net: &Network<T>,
    images: &[&Volume<T>],
    validation: &[&Volume<T>],
    sweeps: &[GridSweep],
    cfg: &MaskOptConfig,
    seed: u64,
) -> Result<Vec<GridOutcome<T>>> {
    if sweeps.is_empty() || sweeps.iter().any(|s| s.values.is_empty()) {
        return Err(Error::Empty("grid"));
    }
    let jobs: Vec<(usize, usize)> =
        sweeps.iter().enumerate().flat_map(|(s, sw)| (0..sw.values.len()).map(move |i| (s, i))).collect();
    jobs.par_iter()
        .map(|&(s, i)| {
            let sw = &sweeps[s];
            let value = sw.values[i];
            let hyper = sw.base.with(sw.axis, value);
            let mut cell_cfg = MaskOptConfig {
                lambda1: hyper.lambda1,
                lambda2: hyper.lambda2,
                beta1: hyper.beta1,
                beta2: hyper.beta2,
                ..*cfg
            };
            let job = (s * 1000 + i) as u64;
            let result = match optimize_group_mask(net, images, validation, &cell_cfg, &mut job_rng(seed, "grid-cell", job)) {
                Err(Error::Divergence { .. }) => {
                    log::warn!("grid cell {}={value} diverged; retrying with lr / 10", sw.axis);
                    cell_cfg.learning_rate /= 10.0;
                    match optimize_group_mask(net, images, validation, &cell_cfg, &mut job_rng(seed, "grid-cell", job)) {
                        Err(e @ Error::Divergence { .. }) => {
                            let reason = e.to_string();
                            return Ok(Err(GridFailure { sweep: s, index: i, axis: sw.axis, value, hyper, reason }));
                        }
                        other => other?,
                    }
                }
                other => other?,
            };
            let min_value = result.mask.data().iter().map(|v| v.as_f64()).fold(f64::INFINITY, f64::min);
            Ok(Ok(GridCell {
                sweep: s,
                index: i,
                axis: sw.axis,
                value,
                hyper,
                learning_rate: cell_cfg.learning_rate,
                coverage: coverage(&result.mask, cfg.threshold),
                min_value,
                mask: result.mask,
                log: result.log,
            }))
        })
        .collect()
}
