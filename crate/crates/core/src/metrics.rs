//! ROI-vector similarity and prob_CNN dissimilarity between masks, and the pairwise
//! comparison protocol over folds, runs and sessions.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masker::apply_mask;
use crate::network::Network;
use crate::volgrad::Scalar;
use crate::volume::{batch_tensor, LabelVolume, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DensityKind {
    /// Σ(1 − m) over the region.
    #[default]
    Sum,
    /// Σ(1 − m) divided by the region's voxel count.
    Mean,
}

impl std::str::FromStr for DensityKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(DensityKind::Sum),
            "mean" => Ok(DensityKind::Mean),
            other => Err(Error::InvalidArgument(format!("unknown density kind {other:?}"))),
        }
    }
}

impl std::fmt::Display for DensityKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DensityKind::Sum => "sum",
            DensityKind::Mean => "mean",
        })
    }
}

/// Per-region mask density; entry `i` belongs to atlas label `i + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiVector {
    pub densities: Vec<f64>,
}

impl RoiVector {
    pub fn len(&self) -> usize {
        self.densities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.densities.is_empty()
    }

    pub fn is_zero(&self) -> bool {
        self.densities.iter().all(|&d| d == 0.0)
    }
}

/// One entry per label 1..=max label; label 0 is background and skipped.
pub fn roi_density_vector<T: Scalar>(m: &Volume<T>, atlas: &LabelVolume, kind: DensityKind) -> Result<RoiVector> {
    if !m.same_shape(atlas) {
        return Err(Error::dim("roi_density_vector", format!("mask {:?} vs atlas {:?}", m.dims(), atlas.dims())));
    }
    let k = atlas.data().iter().copied().max().unwrap_or(0) as usize;
    let mut sums = vec![0.0; k];
    let mut counts = vec![0usize; k];
    for (&v, &l) in m.data().iter().zip(atlas.data()) {
        if l > 0 {
            sums[l as usize - 1] += 1.0 - v.as_f64();
            counts[l as usize - 1] += 1;
        }
    }
    if kind == DensityKind::Mean {
        for (s, &c) in sums.iter_mut().zip(&counts) {
            if c > 0 {
                *s /= c as f64;
            }
        }
    }
    Ok(RoiVector { densities: sums })
}

/// Cosine similarity; `None` when either vector is all zeros.
pub fn roi_similarity(a: &RoiVector, b: &RoiVector) -> Result<Option<f64>> {
    if a.len() != b.len() {
        return Err(Error::dim("roi_similarity", format!("lengths {} and {}", a.len(), b.len())));
    }
    let dot: f64 = a.densities.iter().zip(&b.densities).map(|(x, y)| x * y).sum();
    let na = a.densities.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.densities.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(None);
    }
    Ok(Some((dot / (na * nb)).clamp(-1.0, 1.0)))
}

/// Mean target-class probability of `net` on `images` masked by `mask`.
pub fn probcnn_dissimilarity<T: Scalar>(
    net: &Network<T>,
    images: &[&Volume<T>],
    mask: &Volume<T>,
    target_class: usize,
    mu: f64,
) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::Empty("image set"));
    }
    let k = net.spec().n_classes;
    if target_class >= k {
        return Err(Error::InvalidArgument(format!("target class {target_class} with {k} classes")));
    }
    let masked = images.iter().map(|x| apply_mask(x, mask, mu)).collect::<Result<Vec<_>>>()?;
    let probs = net.forward(&batch_tensor(&masked.iter().collect::<Vec<_>>())?)?;
    let total: f64 = probs.data().iter().skip(target_class).step_by(k).map(|p| p.as_f64()).sum();
    Ok(total / images.len() as f64)
}

/// A mask together with the model and images it was optimized for.
#[derive(Debug, Clone)]
pub struct MaskContext<'a, T> {
    pub name: String,
    pub mask: Volume<T>,
    /// Needed for prob_CNN; contexts without one only get ROI similarity.
    pub net: Option<&'a Network<T>>,
    pub images: Vec<&'a Volume<T>>,
    /// Participant id for longitudinal grouping.
    pub subject: Option<String>,
    /// First session of its subject.
    pub baseline: bool,
}

impl<'a, T> MaskContext<'a, T> {
    pub fn new(name: impl Into<String>, mask: Volume<T>) -> Self {
        Self { name: name.into(), mask, net: None, images: Vec::new(), subject: None, baseline: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    /// Every pair in one group (folds, runs, grid neighbours).
    All,
    /// Same-subject pairs are intra-subject; pairs of baseline sessions from
    /// different subjects are inter-subject; other pairs are listed but ungrouped.
    Longitudinal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub a: String,
    pub b: String,
    pub group: Option<String>,
    /// `None` when either mask is all ones.
    pub roi_similarity: Option<f64>,
    /// net_a on images_a masked by mask_b.
    pub probcnn_ab: Option<f64>,
    pub probcnn_ba: Option<f64>,
}

impl PairRecord {
    pub fn probcnn_mean(&self) -> Option<f64> {
        match (self.probcnn_ab, self.probcnn_ba) {
            (Some(x), Some(y)) => Some(0.5 * (x + y)),
            (x, y) => x.or(y),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub group: String,
    pub n_pairs: usize,
    /// Pairs whose similarity was undefined; excluded from the mean.
    pub n_undefined: usize,
    pub mean_roi_similarity: Option<f64>,
    pub mean_probcnn: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub density: DensityKind,
    pub pairs: Vec<PairRecord>,
    pub groups: Vec<GroupSummary>,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_else(|| "NA".into())
}

impl ComparisonReport {
    pub fn group(&self, name: &str) -> Option<&GroupSummary> {
        self.groups.iter().find(|g| g.group == name)
    }

    pub fn pairs_tsv(&self) -> String {
        let mut s = String::from("context_a\tcontext_b\tgroup\troi_similarity\tprobcnn_ab\tprobcnn_ba\tprobcnn_mean\n");
        for p in &self.pairs {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                p.a,
                p.b,
                p.group.as_deref().unwrap_or("NA"),
                opt(p.roi_similarity),
                opt(p.probcnn_ab),
                opt(p.probcnn_ba),
                opt(p.probcnn_mean())
            );
        }
        s
    }

    /// key=value lines, one block per group.
    pub fn summary(&self) -> String {
        let mut s = format!("density={}\npairs={}\n", self.density, self.pairs.len());
        for g in &self.groups {
            let _ = writeln!(s, "{}.pairs={}", g.group, g.n_pairs);
            let _ = writeln!(s, "{}.undefined={}", g.group, g.n_undefined);
            let _ = writeln!(s, "{}.roi_similarity={}", g.group, opt(g.mean_roi_similarity));
            let _ = writeln!(s, "{}.probcnn={}", g.group, opt(g.mean_probcnn));
        }
        s
    }
}

pub fn pairwise_report<T: Scalar>(
    contexts: &[MaskContext<'_, T>],
    atlas: &LabelVolume,
    grouping: Grouping,
    density: DensityKind,
    target_class: usize,
    mu: f64,
) -> Result<ComparisonReport> {
    if contexts.len() < 2 {
        return Err(Error::TooFew { needed: 2, got: contexts.len() });
    }
    let vectors = contexts.iter().map(|c| roi_density_vector(&c.mask, atlas, density)).collect::<Result<Vec<_>>>()?;
    let direction = |a: &MaskContext<'_, T>, b: &MaskContext<'_, T>| -> Result<Option<f64>> {
        match a.net {
            Some(net) if !a.images.is_empty() => Ok(Some(probcnn_dissimilarity(net, &a.images, &b.mask, target_class, mu)?)),
            _ => Ok(None),
        }
    };
    let mut pairs = Vec::new();
    for i in 0..contexts.len() {
        for j in i + 1..contexts.len() {
            let (a, b) = (&contexts[i], &contexts[j]);
            let group = match grouping {
                Grouping::All => Some("all".to_string()),
                Grouping::Longitudinal => match (&a.subject, &b.subject) {
                    (Some(x), Some(y)) if x == y => Some("intra_subject".to_string()),
                    (Some(_), Some(_)) if a.baseline && b.baseline => Some("inter_subject".to_string()),
                    _ => None,
                },
            };
            pairs.push(PairRecord {
                a: a.name.clone(),
                b: b.name.clone(),
                group,
                roi_similarity: roi_similarity(&vectors[i], &vectors[j])?,
                probcnn_ab: direction(a, b)?,
                probcnn_ba: direction(b, a)?,
            });
        }
    }
    let names: &[&str] = match grouping {
        Grouping::All => &["all"],
        Grouping::Longitudinal => &["intra_subject", "inter_subject"],
    };
    let groups = names
        .iter()
        .map(|&name| {
            let members: Vec<&PairRecord> = pairs.iter().filter(|p| p.group.as_deref() == Some(name)).collect();
            GroupSummary {
                group: name.to_string(),
                n_pairs: members.len(),
                n_undefined: members.iter().filter(|p| p.roi_similarity.is_none()).count(),
                mean_roi_similarity: mean(members.iter().filter_map(|p| p.roi_similarity)),
                mean_probcnn: mean(members.iter().filter_map(|p| p.probcnn_mean())),
            }
        })
        .collect();
    Ok(ComparisonReport { density, pairs, groups })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: &[f64]) -> RoiVector {
        RoiVector { densities: x.to_vec() }
    }

    #[test]
    fn density_examples() {
        let atlas = Volume::new([1, 1, 4], vec![0u32, 1, 1, 2]).unwrap();
        let ones = Volume::filled([1, 1, 4], 1.0f64);
        assert_eq!(roi_density_vector(&ones, &atlas, DensityKind::Sum).unwrap().densities, vec![0.0, 0.0]);
        let m = Volume::new([1, 1, 4], vec![0.0, -0.2, -1.0, 1.0]).unwrap();
        assert_eq!(roi_density_vector(&m, &atlas, DensityKind::Sum).unwrap().densities, vec![3.2, 0.0]);
        assert_eq!(roi_density_vector(&m, &atlas, DensityKind::Mean).unwrap().densities, vec![1.6, 0.0]);
        assert!(roi_density_vector(&Volume::filled([1, 1, 3], 1.0f64), &atlas, DensityKind::Sum).is_err());
    }

    #[test]
    fn cosine_examples() {
        let s = roi_similarity(&v(&[1.0, 1.0, 0.0]), &v(&[1.0, 0.0, 0.0])).unwrap().unwrap();
        assert!((s - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert_eq!(roi_similarity(&v(&[2.0, 3.0]), &v(&[2.0, 3.0])).unwrap(), Some(1.0));
        assert_eq!(roi_similarity(&v(&[1.0, 0.0]), &v(&[0.0, 4.0])).unwrap(), Some(0.0));
        assert_eq!(roi_similarity(&v(&[0.0, 0.0]), &v(&[0.0, 4.0])).unwrap(), None);
        assert!(roi_similarity(&v(&[1.0]), &v(&[1.0, 0.0])).is_err());
    }

    #[test]
    fn pair_counts() {
        let atlas = Volume::new([1, 1, 3], vec![1u32, 2, 3]).unwrap();
        let ctx: Vec<MaskContext<'_, f64>> = (0..5)
            .map(|i| MaskContext::new(format!("c{i}"), Volume::new([1, 1, 3], vec![0.1 * i as f64, 0.5, 1.0]).unwrap()))
            .collect();
        let r = pairwise_report(&ctx, &atlas, Grouping::All, DensityKind::Sum, 1, 1.0).unwrap();
        assert_eq!(r.pairs.len(), 10);
        assert_eq!(r.group("all").unwrap().n_pairs, 10);
        assert!(pairwise_report(&ctx[..1], &atlas, Grouping::All, DensityKind::Sum, 1, 1.0).is_err());
        let r2 = pairwise_report(&ctx[..2], &atlas, Grouping::All, DensityKind::Sum, 1, 1.0).unwrap();
        assert_eq!(r2.pairs.len(), 1);
        assert!(r2.pairs[0].probcnn_ab.is_none());
    }

    #[test]
    fn longitudinal_groups() {
        let atlas = Volume::new([1, 1, 2], vec![1u32, 2]).unwrap();
        let mk = |s: &str, base: bool, a: f64| {
            let mut c = MaskContext::new(format!("{s}-{base}"), Volume::new([1, 1, 2], vec![a, 0.5]).unwrap());
            c.subject = Some(s.into());
            c.baseline = base;
            c
        };
        let ctx = vec![mk("a", true, 0.0), mk("a", false, 0.1), mk("b", true, 0.9), mk("b", false, 0.8)];
        let r = pairwise_report::<f64>(&ctx, &atlas, Grouping::Longitudinal, DensityKind::Sum, 1, 1.0).unwrap();
        assert_eq!(r.group("intra_subject").unwrap().n_pairs, 2);
        assert_eq!(r.group("inter_subject").unwrap().n_pairs, 1);
        assert_eq!(r.pairs.iter().filter(|p| p.group.is_none()).count(), 3);
    }
}
