//! Synthetic gray-matter-like cohorts with a planted atrophy region.
//!
//! Every volume is `template + subject pattern - atrophy + session noise`, clipped
//! to [0, 1] and zeroed outside an ellipsoidal brain. The template is shared by the
//! whole cohort, the subject pattern by all sessions of one participant. AD subjects
//! lose `depth * (1 ± asymmetry)` of intensity in the left/right atrophy lobes.

use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::manifest::{write_manifest, CohortManifest, Diagnosis, ManifestEntry};
use crate::dataio::nifti::{write_nifti, write_volume_f32, NiftiVolume};
use crate::dataio::write_atomic;
use crate::error::{Error, Result};
use crate::seed::{derive_seed, job_rng, rng_from_seed, JobRng};
use crate::volume::{LabelVolume, Volume};

pub const BACKGROUND_LABEL: u32 = 0;
pub const ATROPHY_LABELS: [u32; 2] = [1, 2];

/// Template intensities are mapped onto `[TEMPLATE_FLOOR, 1]` inside the brain.
const TEMPLATE_FLOOR: f64 = 0.15;
const BRAIN_SEMI_AXIS: f64 = 0.46;
const LOBE_CENTERS: [[f64; 3]; 2] = [[0.5, 0.5, 0.3], [0.5, 0.5, 0.7]];
const DISTRACTOR_CENTERS: [[f64; 3]; 4] = [[0.5, 0.22, 0.5], [0.5, 0.78, 0.5], [0.22, 0.5, 0.5], [0.78, 0.5, 0.5]];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCohortSpec {
    /// (D, H, W).
    pub shape: [usize; 3],
    pub n_cn: usize,
    pub n_ad: usize,
    pub sessions: usize,
    /// Radius in voxels of each of the two atrophy lobes.
    pub roi_radius: f64,
    pub depth_min: f64,
    pub depth_max: f64,
    /// Left/right depth imbalance is drawn from `[-asymmetry, asymmetry]`.
    pub asymmetry: f64,
    pub subject_effect: f64,
    pub noise: f64,
    /// Half-width of the triangular smoothing kernel.
    pub smoothing: usize,
    /// Distractor spheres (same radius as the lobes), at most 4.
    pub n_distractors: usize,
    /// Coarse parcels per axis covering the remaining brain.
    pub parcels_per_axis: usize,
    pub seed: u64,
}

impl Default for SyntheticCohortSpec {
    fn default() -> Self {
        Self {
            shape: [24, 24, 24],
            n_cn: 40,
            n_ad: 40,
            sessions: 1,
            roi_radius: 4.0,
            depth_min: 0.3,
            depth_max: 0.3,
            asymmetry: 0.5,
            subject_effect: 0.1,
            noise: 0.02,
            smoothing: 2,
            n_distractors: 4,
            parcels_per_axis: 2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectInfo {
    pub participant_id: String,
    pub diagnosis: Diagnosis,
    /// Zero for CN.
    pub depth: f64,
    pub asymmetry: f64,
}

#[derive(Debug, Clone)]
pub struct SyntheticCohort {
    pub spec: SyntheticCohortSpec,
    pub subjects: Vec<SubjectInfo>,
    /// One entry per volume; paths are the file names `write_cohort` uses.
    pub manifest: CohortManifest,
    /// Same order as `manifest.entries`.
    pub volumes: Vec<Volume<f32>>,
    pub atlas: LabelVolume,
}

impl SyntheticCohort {
    /// True inside either atrophy lobe.
    pub fn atrophy_roi(&self) -> Volume<bool> {
        self.atlas.map(|l| ATROPHY_LABELS.contains(&l))
    }

    pub fn labels(&self) -> Vec<usize> {
        self.manifest.entries.iter().map(|e| e.diagnosis.class()).collect()
    }
}

fn center(frac: [f64; 3], shape: [usize; 3]) -> [f64; 3] {
    [0, 1, 2].map(|a| frac[a] * (shape[a] as f64 - 1.0))
}

fn in_sphere(p: [usize; 3], c: [f64; 3], r: f64) -> bool {
    (0..3).map(|a| (p[a] as f64 - c[a]).powi(2)).sum::<f64>() <= r * r
}

fn brain_mask(shape: [usize; 3]) -> Volume<bool> {
    let c = [0, 1, 2].map(|a| (shape[a] as f64 - 1.0) / 2.0);
    let s = [0, 1, 2].map(|a| BRAIN_SEMI_AXIS * shape[a] as f64);
    Volume::from_fn(shape, |d, h, w| {
        let p = [d, h, w];
        (0..3).map(|a| ((p[a] as f64 - c[a]) / s[a]).powi(2)).sum::<f64>() <= 1.0
    })
}

/// Atlas: 0 outside the brain, 1-2 atrophy lobes, then distractor spheres, then
/// a coarse grid over the remaining brain. Earlier labels win on overlap.
pub fn build_atlas(spec: &SyntheticCohortSpec) -> Result<LabelVolume> {
    let shape = spec.shape;
    let brain = brain_mask(shape);
    let r = spec.roi_radius;
    if !(r > 0.0) {
        return Err(Error::Geometry(format!("roi radius {r}")));
    }
    if spec.n_distractors > DISTRACTOR_CENTERS.len() {
        return Err(Error::Geometry(format!("at most {} distractors", DISTRACTOR_CENTERS.len())));
    }
    if spec.parcels_per_axis == 0 {
        return Err(Error::Geometry("parcels_per_axis must be positive".into()));
    }
    let spheres: Vec<[f64; 3]> = LOBE_CENTERS
        .iter()
        .chain(DISTRACTOR_CENTERS.iter().take(spec.n_distractors))
        .map(|&f| center(f, shape))
        .collect();
    for (i, c) in spheres.iter().enumerate().take(2) {
        for a in 0..3 {
            if c[a] - r < 0.0 || c[a] + r > shape[a] as f64 - 1.0 {
                return Err(Error::Geometry(format!(
                    "atrophy lobe {} (radius {r}) overflows axis {a} of {shape:?}",
                    i + 1
                )));
            }
        }
    }
    let p = spec.parcels_per_axis;
    let mut atlas = Volume::filled(shape, BACKGROUND_LABEL);
    for d in 0..shape[0] {
        for h in 0..shape[1] {
            for w in 0..shape[2] {
                if !brain.get(d, h, w) {
                    continue;
                }
                let v = [d, h, w];
                let label = match spheres.iter().position(|&c| in_sphere(v, c, r)) {
                    Some(i) => i as u32 + 1,
                    None => {
                        let cell = [0, 1, 2].map(|a| v[a] * p / shape[a]);
                        spheres.len() as u32 + 1 + (cell[0] * p * p + cell[1] * p + cell[2]) as u32
                    }
                };
                let i = atlas.index(d, h, w);
                atlas.data_mut()[i] = label;
            }
        }
    }
    for l in ATROPHY_LABELS {
        let count = atlas.data().iter().filter(|&&x| x == l).count();
        if count == 0 {
            return Err(Error::Geometry(format!("atrophy lobe {l} is empty")));
        }
        // a lobe clipped by the brain boundary is an overflow too
        let c = spheres[l as usize - 1];
        let expected = (0..atlas.len())
            .filter(|&i| {
                let w = i % shape[2];
                let h = (i / shape[2]) % shape[1];
                let d = i / (shape[1] * shape[2]);
                in_sphere([d, h, w], c, r)
            })
            .count();
        if count != expected {
            return Err(Error::Geometry(format!("atrophy lobe {l} extends outside the brain")));
        }
    }
    Ok(atlas)
}

/// Separable triangular smoothing with clamped boundaries; half-width 0 is identity.
pub fn triangular_smooth(v: &Volume<f64>, half_width: usize) -> Volume<f64> {
    if half_width == 0 {
        return v.clone();
    }
    let k = half_width as isize;
    let weights: Vec<f64> = (-k..=k).map(|o| (k + 1 - o.abs()) as f64).collect();
    let total: f64 = weights.iter().sum();
    let dims = v.dims();
    let mut cur = v.clone();
    for axis in 0..3 {
        let src = cur.clone();
        let n = dims[axis] as isize;
        cur = Volume::from_fn(dims, |d, h, w| {
            let mut p = [d, h, w];
            let base = p[axis] as isize;
            let mut acc = 0.0;
            for (j, o) in (-k..=k).enumerate() {
                p[axis] = (base + o).clamp(0, n - 1) as usize;
                acc += weights[j] * src.get(p[0], p[1], p[2]);
            }
            acc / total
        });
    }
    cur
}

fn smooth_noise(shape: [usize; 3], half_width: usize, rng: &mut JobRng) -> Volume<f64> {
    let n = shape.iter().product();
    let raw = Volume::new(shape, (0..n).map(|_| rng.gen::<f64>()).collect()).expect("extent");
    triangular_smooth(&raw, half_width)
}

fn template(spec: &SyntheticCohortSpec, atlas: &LabelVolume) -> Volume<f64> {
    let t = smooth_noise(spec.shape, spec.smoothing, &mut job_rng(spec.seed, "synth-template", 0));
    // range taken outside the atrophy lobes so the brightest voxel is never atrophied
    let outside = t
        .data()
        .iter()
        .zip(atlas.data())
        .filter(|(_, &l)| l != BACKGROUND_LABEL && !ATROPHY_LABELS.contains(&l));
    let (lo, hi) = outside.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (&x, _)| (lo.min(x), hi.max(x)));
    let span = (hi - lo).max(1e-12);
    t.map(|x| TEMPLATE_FLOOR + (1.0 - TEMPLATE_FLOOR) * (x - lo) / span)
}

/// Zero-mean pattern with unit maximum magnitude.
fn subject_pattern(spec: &SyntheticCohortSpec, rng: &mut JobRng) -> Volume<f64> {
    let s = smooth_noise(spec.shape, spec.smoothing, rng);
    let mean = s.data().iter().sum::<f64>() / s.len() as f64;
    let peak = s.data().iter().fold(0.0f64, |m, &x| m.max((x - mean).abs())).max(1e-12);
    s.map(|x| (x - mean) / peak)
}

fn validate(spec: &SyntheticCohortSpec) -> Result<()> {
    if spec.shape.iter().any(|&e| e < 4) {
        return Err(Error::Geometry(format!("shape {:?} too small", spec.shape)));
    }
    if spec.sessions == 0 || spec.n_cn + spec.n_ad == 0 {
        return Err(Error::InvalidArgument("cohort needs subjects and sessions".into()));
    }
    if !(0.0..=1.0).contains(&spec.depth_min) || !(spec.depth_min..=1.0).contains(&spec.depth_max) {
        return Err(Error::InvalidArgument(format!(
            "depth range [{}, {}] invalid",
            spec.depth_min, spec.depth_max
        )));
    }
    if !(0.0..=1.0).contains(&spec.asymmetry) || spec.noise < 0.0 || spec.subject_effect < 0.0 {
        return Err(Error::InvalidArgument("asymmetry, noise and subject_effect must be non-negative".into()));
    }
    Ok(())
}

pub fn volume_file_name(participant: &str, session: &str) -> String {
    format!("{participant}_{session}.nii.gz")
}

pub const MANIFEST_FILE: &str = "participants.tsv";
pub const ATLAS_FILE: &str = "atlas.nii.gz";
pub const SUBJECTS_FILE: &str = "subjects.json";

/// Builds the cohort in memory. Subjects are generated in parallel, each from its own
/// derived seed, so the output does not depend on thread scheduling.
pub fn synthesize(spec: &SyntheticCohortSpec) -> Result<SyntheticCohort> {
    validate(spec)?;
    let atlas = build_atlas(spec)?;
    let brain = atlas.map(|l| l != BACKGROUND_LABEL);
    let base = template(spec, &atlas);
    let n_subjects = spec.n_cn + spec.n_ad;
    let width = n_subjects.to_string().len().max(3);

    let per_subject: Vec<(SubjectInfo, Vec<(ManifestEntry, Volume<f32>)>)> = (0..n_subjects)
        .into_par_iter()
        .map(|s| {
            let mut rng = job_rng(spec.seed, "synth-subject", s as u64);
            let diagnosis = if s < spec.n_cn { Diagnosis::CN } else { Diagnosis::AD };
            let participant_id = format!("sub-{:0width$}", s + 1);
            let pattern = subject_pattern(spec, &mut rng);
            let (depth, asymmetry) = match diagnosis {
                Diagnosis::CN => (0.0, 0.0),
                Diagnosis::AD => (
                    rng.gen_range(spec.depth_min..=spec.depth_max),
                    rng.gen_range(-spec.asymmetry..=spec.asymmetry),
                ),
            };
            let loss = [depth * (1.0 + asymmetry), depth * (1.0 - asymmetry)];
            let sessions = (0..spec.sessions)
                .map(|k| {
                    let mut noise_rng =
                        rng_from_seed(derive_seed(derive_seed(spec.seed, "synth-session", s as u64), "session", k as u64));
                    let data = (0..base.len())
                        .map(|i| {
                            let eps = noise_rng.gen_range(-1.0..=1.0) * spec.noise;
                            if !brain.data()[i] {
                                return 0.0f32;
                            }
                            let mut x = base.data()[i] + spec.subject_effect * pattern.data()[i] + eps;
                            match atlas.data()[i] {
                                1 => x -= loss[0],
                                2 => x -= loss[1],
                                _ => {}
                            }
                            x.clamp(0.0, 1.0) as f32
                        })
                        .collect();
                    let session_id = format!("ses-M{:02}", 12 * k);
                    let entry = ManifestEntry {
                        path: PathBuf::from(volume_file_name(&participant_id, &session_id)),
                        participant_id: participant_id.clone(),
                        session_id,
                        diagnosis,
                        age: None,
                        sex: None,
                    };
                    (entry, Volume::new(spec.shape, data).expect("extent"))
                })
                .collect();
            (SubjectInfo { participant_id, diagnosis, depth, asymmetry }, sessions)
        })
        .collect();

    let mut subjects = Vec::with_capacity(n_subjects);
    let mut entries = Vec::new();
    let mut volumes = Vec::new();
    for (info, sessions) in per_subject {
        subjects.push(info);
        for (e, v) in sessions {
            entries.push(e);
            volumes.push(v);
        }
    }
    Ok(SyntheticCohort {
        spec: spec.clone(),
        subjects,
        manifest: CohortManifest::new(entries, PathBuf::new())?,
        volumes,
        atlas,
    })
}

/// Writes volumes, `participants.tsv`, `atlas.nii.gz` and `subjects.json` into `dir`.
pub fn write_cohort(cohort: &SyntheticCohort, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    cohort
        .manifest
        .entries
        .par_iter()
        .zip(cohort.volumes.par_iter())
        .try_for_each(|(e, v)| write_volume_f32(v, dir.join(&e.path)))?;
    write_manifest(&cohort.manifest, dir.join(MANIFEST_FILE))?;
    write_nifti(&NiftiVolume::from_labels(&cohort.atlas)?, dir.join(ATLAS_FILE))?;
    let meta = serde_json::json!({ "spec": cohort.spec, "subjects": cohort.subjects });
    write_atomic(&dir.join(SUBJECTS_FILE), serde_json::to_string_pretty(&meta)?.as_bytes())
}

pub fn generate_synthetic_cohort(spec: &SyntheticCohortSpec, dir: impl AsRef<Path>) -> Result<SyntheticCohort> {
    let cohort = synthesize(spec)?;
    write_cohort(&cohort, &dir)?;
    let mut cohort = cohort;
    cohort.manifest.base_dir = dir.as_ref().to_path_buf();
    Ok(cohort)
}
