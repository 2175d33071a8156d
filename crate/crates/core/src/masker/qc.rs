use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volgrad::Scalar;
use crate::volume::Volume;

/// Volumes whose maximum is below this are rejected.
pub const QC_MIN_MAX_VALUE: f64 = 0.95;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QcEntry {
    /// Position in the input list.
    pub index: usize,
    pub max_value: f64,
    /// `None` when kept.
    pub rejection: Option<String>,
}

/// Entries sorted by maximum value, ascending.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct QcReport {
    pub entries: Vec<QcEntry>,
}

impl QcReport {
    pub fn kept(&self) -> Vec<usize> {
        self.entries.iter().filter(|e| e.rejection.is_none()).map(|e| e.index).collect()
    }

    pub fn rejected(&self) -> Vec<usize> {
        self.entries.iter().filter(|e| e.rejection.is_some()).map(|e| e.index).collect()
    }
}

pub fn quality_check_stage1<T: Scalar>(volumes: &[&Volume<T>]) -> QcReport {
    let mut entries: Vec<QcEntry> = volumes
        .iter()
        .enumerate()
        .map(|(index, v)| {
            // Compared in the volume's own precision so a stored 0.95 passes in f32.
            let max = if v.is_empty() { None } else { Some(v.max_value()) };
            let max_value = max.map_or(f64::NEG_INFINITY, |m| m.as_f64());
            let rejection = (!max.is_some_and(|m| m >= T::of(QC_MIN_MAX_VALUE)))
                .then(|| format!("maximum {max_value} is below {QC_MIN_MAX_VALUE}"));
            QcEntry { index, max_value, rejection }
        })
        .collect();
    entries.sort_by(|a, b| a.max_value.total_cmp(&b.max_value).then(a.index.cmp(&b.index)));
    QcReport { entries }
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Indices whose loss exceeds `median + z * 1.4826 * MAD`.
pub fn loss_outlier_flags(losses: &[f64], z_threshold: f64) -> Result<Vec<usize>> {
    if losses.len() < 3 {
        return Err(Error::TooFew { needed: 3, got: losses.len() });
    }
    let mut sorted = losses.to_vec();
    sorted.sort_by(f64::total_cmp);
    let med = median(&sorted);
    let mut dev: Vec<f64> = losses.iter().map(|x| (x - med).abs()).collect();
    dev.sort_by(f64::total_cmp);
    let cut = med + z_threshold * 1.4826 * median(&dev);
    Ok(losses.iter().enumerate().filter(|&(_, &x)| x > cut).map(|(i, _)| i).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn qc_boundaries() {
        let a = Volume::filled([2, 2, 2], 0.90f64);
        let b = Volume::filled([2, 2, 2], 0.95f64);
        let c = Volume::filled([2, 2, 2], 1.0f64);
        let r = quality_check_stage1(&[&c, &a, &b]);
        assert_eq!(r.rejected(), vec![1]);
        assert_eq!(r.kept(), vec![2, 0]);
        assert_eq!(r.entries.iter().map(|e| e.index).collect::<Vec<_>>(), vec![1, 2, 0]);
        assert!(quality_check_stage1::<f64>(&[]).entries.is_empty());
    }

    #[test]
    fn outliers() {
        assert_eq!(loss_outlier_flags(&[1.0, 1.0, 1.0, 1.0, 100.0], 3.0).unwrap(), vec![4]);
        assert!(loss_outlier_flags(&[0.5; 6], 3.0).unwrap().is_empty());
        assert!(loss_outlier_flags(&[0.50, 0.51, 0.52, 0.49, 0.505], 3.0).unwrap().is_empty());
        assert!(matches!(loss_outlier_flags(&[1.0, 2.0], 3.0), Err(Error::TooFew { needed: 3, got: 2 })));
    }
}
