use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde_json::{json, Map, Value};

use neuromask::dataio::manifest::{parse_manifest, Diagnosis};
use neuromask::dataio::nifti::{read_nifti, read_volume_f32, write_volume_f32};
use neuromask::dataio::render::render_slices;
use neuromask::dataio::synth::{generate_synthetic_cohort, SyntheticCohortSpec};
use neuromask::dataio::write_text;
use neuromask::masker::{
    correctly_classified, coverage, grid_search_masks, loss_outlier_flags, masked_probability, optimize_group_mask,
    optimize_session_mask, quality_check_stage1, GridAxis, GridSweep, MaskHyper, MaskOptConfig,
};
use neuromask::metrics::{pairwise_report, DensityKind, Grouping, MaskContext};
use neuromask::network::{ArchitectureSpec, ConvBlockSpec, Network, Reduction, MAX_CHANNELS_FACTOR};
use neuromask::seed::job_rng;
use neuromask::trainer::{
    make_split, random_search, run_cv, session_indices, train_fold, CohortData, EarlyStopPolicy, FoldResult, Hyperparams,
    Normalization, SearchSpace, SplitPlan, TrainConfig, TrialOutcome,
};
use neuromask::{Error as CoreError, Volume};

use crate::config::RunConfig;

pub const RESOLVED_CONFIG: &str = "config.resolved";
pub const SUMMARY: &str = "reports/summary.json";

/// Output directory of one command invocation.
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        for sub in ["checkpoints", "masks", "logs", "reports"] {
            std::fs::create_dir_all(root.join(sub)).with_context(|| format!("creating {}", root.join(sub).display()))?;
        }
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn text(&self, rel: &str, text: &str) -> Result<()> {
        Ok(write_text(&self.path(rel), text)?)
    }
}

type Summary = Map<String, Value>;

fn write_summary(run: &RunDir, command: &str, mut s: Summary) -> Result<()> {
    s.insert("command".into(), json!(command));
    run.text(SUMMARY, &(serde_json::to_string_pretty(&s)? + "\n"))
}

fn shape3(cfg: &RunConfig, key: &str) -> Result<[usize; 3]> {
    match cfg.list::<usize>(key)?.as_slice() {
        &[d, h, w] => Ok([d, h, w]),
        _ => bail!("config key {key:?} needs three extents"),
    }
}

pub fn synth(cfg: &RunConfig, run: &RunDir) -> Result<()> {
    let spec = SyntheticCohortSpec {
        shape: shape3(cfg, "synth.shape")?,
        n_cn: cfg.get("synth.n_cn")?,
        n_ad: cfg.get("synth.n_ad")?,
        sessions: cfg.get("synth.sessions")?,
        roi_radius: cfg.get("synth.roi_radius")?,
        depth_min: cfg.get("synth.depth_min")?,
        depth_max: cfg.get("synth.depth_max")?,
        asymmetry: cfg.get("synth.asymmetry")?,
        subject_effect: cfg.get("synth.subject_effect")?,
        noise: cfg.get("synth.noise")?,
        smoothing: cfg.get("synth.smoothing")?,
        n_distractors: cfg.get("synth.n_distractors")?,
        parcels_per_axis: cfg.get("synth.parcels_per_axis")?,
        seed: cfg.get("seed")?,
    };
    let cohort = generate_synthetic_cohort(&spec, run.path("data"))?;
    let roi = cohort.atrophy_roi();
    let mut s = Summary::new();
    s.insert("volumes".into(), json!(cohort.volumes.len()));
    s.insert("subjects".into(), json!(cohort.subjects.len()));
    s.insert("manifest".into(), json!("data/participants.tsv"));
    s.insert("atlas".into(), json!("data/atlas.nii.gz"));
    s.insert("atrophy_roi_fraction".into(), json!(roi.data().iter().filter(|&&b| b).count() as f64 / roi.len() as f64));
    write_summary(run, "synth", s)
}

pub fn qc(cfg: &RunConfig, run: &RunDir) -> Result<()> {
    let data = CohortData::load(parse_manifest(cfg.required("manifest")?)?)?;
    let refs: Vec<&Volume<f32>> = data.volumes.iter().collect();
    let report = quality_check_stage1(&refs);
    let mut tsv = String::from("participant_id\tsession_id\tmax_value\tstatus\treason\n");
    for e in &report.entries {
        let row = &data.manifest.entries[e.index];
        let (status, reason) = match &e.rejection {
            None => ("kept", ""),
            Some(r) => ("rejected", r.as_str()),
        };
        tsv.push_str(&format!("{}\t{}\t{}\t{status}\t{reason}\n", row.participant_id, row.session_id, e.max_value));
    }
    run.text("reports/qc.tsv", &tsv)?;
    let mut s = Summary::new();
    s.insert("kept".into(), json!(report.kept().len()));
    s.insert("rejected".into(), json!(report.rejected().len()));
    write_summary(run, "qc", s)
}

fn load_cohort(cfg: &RunConfig) -> Result<(CohortData, SplitPlan)> {
    let data = CohortData::load(parse_manifest(cfg.required("manifest")?)?)?;
    if data.volumes.is_empty() {
        bail!("manifest has no rows");
    }
    let plan = make_split(&data.manifest, cfg.get("split.folds")?, cfg.get("split.test_per_class")?, cfg.get("seed")?)?;
    Ok((data, plan))
}

fn hyperparams(cfg: &RunConfig, input_shape: [usize; 3]) -> Result<Hyperparams> {
    let blocks: usize = cfg.get("arch.blocks")?;
    let first: usize = cfg.get("arch.first_filters")?;
    let sub_blocks: usize = cfg.get("arch.sub_blocks")?;
    let reduction: Reduction = cfg.get("arch.reduction")?;
    let spec = ArchitectureSpec {
        conv_blocks: (0..blocks)
            .map(|i| ConvBlockSpec {
                sub_blocks,
                out_channels: (first << i.min(31)).min(first * MAX_CHANNELS_FACTOR),
                reduction,
            })
            .collect(),
        n_fc_layers: cfg.get("arch.fc_layers")?,
        fc_hidden: cfg.get("arch.fc_hidden")?,
        dropout_rate: cfg.get("arch.dropout")?,
        negative_slope: cfg.get("arch.negative_slope")?,
        ..ArchitectureSpec::with_blocks(input_shape, blocks, first)
    };
    spec.block_extents()?;
    Ok(Hyperparams {
        spec,
        train: TrainConfig {
            learning_rate: cfg.get("train.lr")?,
            weight_decay: cfg.get("train.weight_decay")?,
            batch_size: cfg.get("train.batch_size")?,
            policy: EarlyStopPolicy::absolute(cfg.get("train.patience")?, cfg.get("train.max_epochs")?),
        },
        normalization: cfg.get("train.normalization")?,
    })
}

fn write_fold(run: &RunDir, f: &FoldResult) -> Result<()> {
    f.network.save(run.path(&format!("checkpoints/fold-{}.ckpt", f.fold)))?;
    run.text(&format!("logs/train-fold-{}.tsv", f.fold), &f.log.to_tsv())
}

fn fold_summary(f: &FoldResult) -> Value {
    json!({
        "fold": f.fold,
        "best_epoch": f.log.best_epoch,
        "epochs_run": f.log.epochs.len(),
        "stopped_early": f.log.stopped_early,
        "val_balanced_accuracy": f.val_balanced_accuracy,
        "test_balanced_accuracy": f.test_balanced_accuracy,
    })
}

pub fn train(cfg: &RunConfig, run: &RunDir) -> Result<()> {
    let (data, plan) = load_cohort(cfg)?;
    let hp = hyperparams(cfg, data.volumes[0].dims())?;
    run.text("reports/split.json", &serde_json::to_string_pretty(&plan)?)?;
    let fold: usize = cfg.get("train.fold")?;
    let result = train_fold(&data, &plan, fold, &hp, cfg.get("seed")?)?;
    write_fold(run, &result)?;
    let mut s = Summary::new();
    s.insert("fold".into(), fold_summary(&result));
    write_summary(run, "train", s)
}

pub fn cv(cfg: &RunConfig, run: &RunDir) -> Result<()> {
    let (data, plan) = load_cohort(cfg)?;
    let hp = hyperparams(cfg, data.volumes[0].dims())?;
    run.text("reports/split.json", &serde_json::to_string_pretty(&plan)?)?;
    let result = run_cv(&data, &plan, &hp, cfg.get("seed")?)?;
    for f in &result.folds {
        write_fold(run, f)?;
    }
    run.text("reports/cv.tsv", &result.table_tsv())?;
    let mut s = Summary::new();
    s.insert("folds".into(), Value::Array(result.folds.iter().map(fold_summary).collect()));
    s.insert("mean_val_balanced_accuracy".into(), json!(result.mean_val_balanced_accuracy()));
    s.insert("mean_test_balanced_accuracy".into(), json!(result.mean_test_balanced_accuracy()));
    write_summary(run, "cv", s)
}

pub fn search(cfg: &RunConfig, run: &RunDir) -> Result<()> {
    let (data, plan) = load_cohort(cfg)?;
    let space = SearchSpace {
        conv_blocks: cfg.pair("search.blocks")?,
        first_filters: cfg.list("search.first_filters")?,
        sub_blocks: cfg.pair("search.sub_blocks")?,
        reductions: cfg.list("search.reductions")?,
        fc_layers: cfg.pair("search.fc_layers")?,
        dropout: cfg.pair("search.dropout")?,
        log10_learning_rate: cfg.pair("search.log10_lr")?,
        log10_weight_decay: cfg.pair("search.log10_weight_decay")?,
        batch_sizes: cfg.list("search.batch_sizes")?,
        normalizations: cfg.list("search.normalizations")?,
        policy: EarlyStopPolicy::absolute(cfg.get("train.patience")?, cfg.get("train.max_epochs")?),
    };
    run.text("reports/split.json", &serde_json::to_string_pretty(&plan)?)?;
    let trials = random_search(&space, cfg.get("search.trials")?, &data, &plan, data.volumes[0].dims(), cfg.get("seed")?)?;
    let mut tsv = String::from(
        "rank\ttrial\tstatus\tval_balanced_accuracy\tbest_epoch\tconv_blocks\tfirst_filters\tsub_blocks\treduction\tfc_layers\tdropout\tlearning_rate\tweight_decay\tbatch_size\tnormalization\treason\n",
    );
    for (rank, t) in trials.iter().enumerate() {
        let hp = &t.hyperparams;
        let b0 = &hp.spec.conv_blocks[0];
        let (status, ba, epoch, reason) = match &t.outcome {
            TrialOutcome::Trained { val_balanced_accuracy, best_epoch } => ("trained", val_balanced_accuracy.to_string(), best_epoch.to_string(), String::new()),
            TrialOutcome::Failed { reason } => ("failed", "NA".into(), "NA".into(), reason.clone()),
        };
        tsv.push_str(&format!(
            "{}\t{}\t{status}\t{ba}\t{epoch}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{reason}\n",
            rank + 1,
            t.trial,
            hp.spec.conv_blocks.len(),
            b0.out_channels,
            b0.sub_blocks,
            b0.reduction,
            hp.spec.n_fc_layers,
            hp.spec.dropout_rate,
            hp.train.learning_rate,
            hp.train.weight_decay,
            hp.train.batch_size,
            hp.normalization,
        ));
    }
    run.text("reports/search.tsv", &tsv)?;
    run.text("reports/search.json", &serde_json::to_string_pretty(&trials)?)?;
    let mut s = Summary::new();
    s.insert("trials".into(), json!(trials.len()));
    s.insert("failed".into(), json!(trials.iter().filter(|t| t.score().is_none()).count()));
    s.insert("best".into(), trials.first().map(|t| json!({ "trial": t.trial, "val_balanced_accuracy": t.score() })).unwrap_or(Value::Null));
    write_summary(run, "random-search", s)
}

/// Network, cohort and split of a finished train/cv run.
pub struct TrainedFold {
    pub net: Network<f32>,
    pub data: CohortData,
    pub plan: SplitPlan,
    pub fold: usize,
    pub normalization: Normalization,
}

fn read_resolved(dir: &Path) -> Result<RunConfig> {
    let p = dir.join(RESOLVED_CONFIG);
    let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
    Ok(RunConfig::from_resolved_text(&text, &p.display().to_string())?)
}

pub fn load_trained_fold(train_run: &Path, fold: usize) -> Result<TrainedFold> {
    let tcfg = read_resolved(train_run)?;
    let split = train_run.join("reports/split.json");
    let plan: SplitPlan = serde_json::from_str(&std::fs::read_to_string(&split).with_context(|| format!("reading {}", split.display()))?)?;
    if fold >= plan.folds.len() {
        bail!("fold {fold} out of range: the run has {} folds", plan.folds.len());
    }
    let net = Network::load(train_run.join(format!("checkpoints/fold-{fold}.ckpt")))?;
    let data = CohortData::load(parse_manifest(tcfg.required("manifest")?)?)?;
    Ok(TrainedFold { net, data, plan, fold, normalization: tcfg.get("train.normalization")? })
}

/// Target-class volumes of the given rows that pass QC and are predicted as the target.
struct ImageSet {
    rows: Vec<usize>,
    volumes: Vec<Volume<f32>>,
    rejected_qc: usize,
    misclassified: usize,
}

impl ImageSet {
    fn refs(&self) -> Vec<&Volume<f32>> {
        self.volumes.iter().collect()
    }
}

fn image_set(tf: &TrainedFold, rows: &[usize], target: usize, cap: usize) -> Result<ImageSet> {
    let rows: Vec<usize> = rows.iter().copied().filter(|&i| tf.data.manifest.entries[i].diagnosis.class() == target).collect();
    let vols: Vec<Volume<f32>> = rows.iter().map(|&i| neuromask::trainer::normalize(&tf.data.volumes[i], tf.normalization)).collect();
    let qc = quality_check_stage1(&vols.iter().collect::<Vec<_>>());
    let mut kept = qc.kept();
    kept.sort_unstable();
    let refs: Vec<&Volume<f32>> = kept.iter().map(|&k| &vols[k]).collect();
    let ok = correctly_classified(&tf.net, &refs, target)?;
    let mut chosen: Vec<usize> = ok.iter().map(|&j| kept[j]).collect();
    if cap > 0 {
        chosen.truncate(cap);
    }
    Ok(ImageSet {
        rows: chosen.iter().map(|&k| rows[k]).collect(),
        volumes: chosen.iter().map(|&k| vols[k].clone()).collect(),
        rejected_qc: qc.rejected().len(),
        misclassified: kept.len() - ok.len(),
    })
}

fn group_sets(tf: &TrainedFold, target: usize, cap: usize) -> Result<(ImageSet, ImageSet)> {
    let f = &tf.plan.folds[tf.fold];
    let m = &tf.data.manifest;
    let train = image_set(tf, &session_indices(m, &f.train, true), target, cap)?;
    let val = image_set(tf, &session_indices(m, &f.validation, false), target, 0)?;
    Ok((train, val))
}

fn mask_config(cfg: &RunConfig) -> Result<MaskOptConfig> {
    let c = MaskOptConfig {
        mu: cfg.get("mask.mu")?,
        lambda1: cfg.get("mask.lambda1")?,
        lambda2: cfg.get("mask.lambda2")?,
        beta1: cfg.get("mask.beta1")?,
        beta2: cfg.get("mask.beta2")?,
        learning_rate: cfg.get("mask.lr")?,
        target_class: cfg.get("mask.target_class")?,
        stop: EarlyStopPolicy::relative(cfg.get("mask.stop.tolerance")?, cfg.get("mask.stop.patience")?, cfg.get("mask.stop.max_epochs")?),
        session_multiplier: cfg.get("mask.session_multiplier")?,
        epsilon: cfg.get("mask.epsilon")?,
        threshold: cfg.get("mask.threshold")?,
    };
    c.validate()?;
    Ok(c)
}

fn min_value(m: &Volume<f32>) -> f64 {
    m.data().iter().fold(f64::INFINITY, |a, &b| a.min(b as f64))
}

fn image_counts(s: &mut Summary, prefix: &str, set: &ImageSet) {
    s.insert(format!("{prefix}_images"), json!(set.volumes.len()));
    s.insert(format!("{prefix}_rejected_qc"), json!(set.rejected_qc));
    s.insert(format!("{prefix}_misclassified"), json!(set.misclassified));
}

pub fn mask_group(cfg: &RunConfig, run: &RunDir) -> Result<()> {
    let mcfg = mask_config(cfg)?;
    let fold: usize = cfg.get("fold")?;
    let tf = load_trained_fold(Path::new(cfg.required("train_run")?), fold)?;
    let (train, val) = group_sets(&tf, mcfg.target_class, cfg.get("mask.max_images")?)?;
    let seed: u64 = cfg.get("seed")?;
    let result = optimize_group_mask(&tf.net, &train.refs(), &val.refs(), &mcfg, &mut job_rng(seed, "group-mask", fold as u64))?;
    write_volume_f32(&result.mask, run.path("masks/group.nii.gz"))?;
    write_volume_f32(&result.raw, run.path("masks/group-raw.nii.gz"))?;
    run.text("logs/mask-group.tsv", &result.log.to_tsv())?;

    let z: f64 = cfg.get("mask.outlier_z")?;
    let flagged = match loss_outlier_flags(&result.log.image_losses, z) {
        Ok(f) => f,
        Err(CoreError::TooFew { .. }) => Vec::new(),
        Err(e) => return Err(e.into()),
    };
    let mut tsv = String::from("participant_id\tsession_id\tmean_mask_loss\tflagged\n");
    for (k, &row) in train.rows.iter().enumerate() {
        let e = &tf.data.manifest.entries[row];
        tsv.push_str(&format!("{}\t{}\t{}\t{}\n", e.participant_id, e.session_id, result.log.image_losses[k], flagged.contains(&k)));
    }
    run.text("reports/image-losses.tsv", &tsv)?;

    let mut s = Summary::new();
    image_counts(&mut s, "train", &train);
    image_counts(&mut s, "validation", &val);
    s.insert("best_epoch".into(), json!(result.log.best_epoch));
    s.insert("best_loss".into(), json!(result.log.best_loss));
    s.insert("epochs_run".into(), json!(result.log.epochs.len() - 1));
    s.insert("stopped_early".into(), json!(result.log.stopped_early));
    s.insert("coverage".into(), json!(coverage(&result.mask, mcfg.threshold)));
    s.insert("min_value".into(), json!(min_value(&result.mask)));
    s.insert("loss_outliers".into(), json!(flagged.len()));
    let p = if val.volumes.is_empty() { None } else { Some(masked_probability(&tf.net, &val.refs(), &result.mask, &mcfg)?) };
    s.insert("validation_masked_probability".into(), json!(p));
    write_summary(run, "mask-group", s)
}

fn session_manifest(cfg: &RunConfig, tf: &TrainedFold) -> Result<CohortData> {
    match cfg.raw("session.manifest") {
        "" => Ok(tf.data.clone()),
        p => Ok(CohortData::load(parse_manifest(p)?)?),
    }
}

pub fn mask_session(cfg: &RunConfig, run: &RunDir) -> Result<()> {
    let mcfg = mask_config(cfg)?;
    let fold: usize = cfg.get("fold")?;
    let tf = load_trained_fold(Path::new(cfg.required("train_run")?), fold)?;
    let sessions = session_manifest(cfg, &tf)?;
    let target = Diagnosis::from_class(mcfg.target_class);
    let rows: Vec<usize> = (0..sessions.volumes.len()).filter(|&i| Some(sessions.manifest.entries[i].diagnosis) == target).collect();

    enum Outcome {
        Done(neuromask::masker::MaskResult<f32>, f64),
        Skipped(String),
        Failed(String),
    }
    let outcomes: Vec<Outcome> = rows
        .par_iter()
        .map(|&i| {
            let x = neuromask::trainer::normalize(&sessions.volumes[i], tf.normalization);
            if quality_check_stage1(&[&x]).kept().is_empty() {
                return Outcome::Skipped("rejected_qc".into());
            }
            match optimize_session_mask(&tf.net, &x, &mcfg) {
                Ok(r) => match masked_probability(&tf.net, &[&x], &r.mask, &mcfg) {
                    Ok(p) => Outcome::Done(r, p),
                    Err(e) => Outcome::Failed(e.to_string()),
                },
                Err(CoreError::Misclassified { .. }) => Outcome::Skipped("misclassified".into()),
                Err(e) => Outcome::Failed(e.to_string()),
            }
        })
        .collect();

    let mut tsv = String::from("participant_id\tsession_id\tstatus\tmask\tbest_epoch\tmasked_probability\tcoverage\n");
    let mut failures = Vec::new();
    let mut done = 0;
    for (&i, o) in rows.iter().zip(&outcomes) {
        let e = &sessions.manifest.entries[i];
        let stem = format!("{}_{}", e.participant_id, e.session_id);
        match o {
            Outcome::Done(r, p) => {
                let rel = format!("masks/session-{stem}.nii.gz");
                write_volume_f32(&r.mask, run.path(&rel))?;
                run.text(&format!("logs/session-{stem}.tsv"), &r.log.to_tsv())?;
                tsv.push_str(&format!(
                    "{}\t{}\tok\t{rel}\t{}\t{p}\t{}\n",
                    e.participant_id,
                    e.session_id,
                    r.log.best_epoch,
                    coverage(&r.mask, mcfg.threshold)
                ));
                done += 1;
            }
            Outcome::Skipped(why) => tsv.push_str(&format!("{}\t{}\t{why}\tNA\tNA\tNA\tNA\n", e.participant_id, e.session_id)),
            Outcome::Failed(why) => {
                tsv.push_str(&format!("{}\t{}\tfailed\tNA\tNA\tNA\tNA\n", e.participant_id, e.session_id));
                failures.push(format!("{stem}: {why}"));
            }
        }
    }
    run.text("reports/sessions.tsv", &tsv)?;
    let mut s = Summary::new();
    s.insert("sessions".into(), json!(rows.len()));
    s.insert("masked".into(), json!(done));
    s.insert("failed".into(), json!(failures.len()));
    write_summary(run, "mask-session", s)?;
    if !failures.is_empty() {
        bail!("{} session masks failed:\n  {}", failures.len(), failures.join("\n  "));
    }
    Ok(())
}

fn grid_sweeps(cfg: &RunConfig) -> Result<Vec<GridSweep>> {
    let beta = MaskHyper {
        lambda1: cfg.get("grid.beta_phase.lambda1")?,
        lambda2: cfg.get("grid.beta_phase.lambda2")?,
        beta1: cfg.get("grid.beta_phase.beta1")?,
        beta2: cfg.get("grid.beta_phase.beta2")?,
    };
    let lambda = MaskHyper {
        lambda1: cfg.get("grid.lambda_phase.lambda1")?,
        lambda2: cfg.get("grid.lambda_phase.lambda2")?,
        beta1: cfg.get("grid.lambda_phase.beta1")?,
        beta2: cfg.get("grid.lambda_phase.beta2")?,
    };
    let mut sweeps = Vec::new();
    for (axis, key, base) in [
        (GridAxis::Beta1, "grid.beta1", beta),
        (GridAxis::Beta2, "grid.beta2", beta),
        (GridAxis::Lambda1, "grid.lambda1", lambda),
        (GridAxis::Lambda2, "grid.lambda2", lambda),
    ] {
        let values: Vec<f64> = cfg.list(key)?;
        if !values.is_empty() {
            sweeps.push(GridSweep { axis, values, base });
        }
    }
    Ok(sweeps)
}

pub fn grid_search(cfg: &RunConfig, run: &RunDir) -> Result<()> {
    let mcfg = mask_config(cfg)?;
    let fold: usize = cfg.get("fold")?;
    let tf = load_trained_fold(Path::new(cfg.required("train_run")?), fold)?;
    let (train, val) = group_sets(&tf, mcfg.target_class, cfg.get("mask.max_images")?)?;
    let sweeps = grid_sweeps(cfg)?;
    let outcomes = grid_search_masks(&tf.net, &train.refs(), &val.refs(), &sweeps, &mcfg, cfg.get("seed")?)?;
    let mut tsv = String::from("axis\tindex\tvalue\tlambda1\tlambda2\tbeta1\tbeta2\tstatus\tlearning_rate\tbest_epoch\tcoverage\tmin_value\tmask\n");
    let mut failures = Vec::new();
    let mut retried = 0;
    for o in &outcomes {
        match o {
            Ok(c) => {
                let stem = format!("grid-{}-{}", c.axis, c.index);
                let rel = format!("masks/{stem}.nii.gz");
                write_volume_f32(&c.mask, run.path(&rel))?;
                run.text(&format!("logs/{stem}.tsv"), &c.log.to_tsv())?;
                if c.learning_rate != mcfg.learning_rate {
                    retried += 1;
                }
                tsv.push_str(&format!(
                    "{}\t{}\t{}\t{}\t{}\t{}\t{}\tok\t{}\t{}\t{}\t{}\t{rel}\n",
                    c.axis, c.index, c.value, c.hyper.lambda1, c.hyper.lambda2, c.hyper.beta1, c.hyper.beta2, c.learning_rate, c.log.best_epoch, c.coverage, c.min_value
                ));
            }
            Err(f) => {
                tsv.push_str(&format!(
                    "{}\t{}\t{}\t{}\t{}\t{}\t{}\tdiverged\tNA\tNA\tNA\tNA\tNA\n",
                    f.axis, f.index, f.value, f.hyper.lambda1, f.hyper.lambda2, f.hyper.beta1, f.hyper.beta2
                ));
                failures.push(format!("{}={}: {}", f.axis, f.value, f.reason));
            }
        }
    }
    run.text("reports/grid.tsv", &tsv)?;
    let mut s = Summary::new();
    image_counts(&mut s, "train", &train);
    image_counts(&mut s, "validation", &val);
    s.insert("cells".into(), json!(outcomes.len()));
    s.insert("retried_cells".into(), json!(retried));
    s.insert("diverged_cells".into(), json!(failures.len()));
    write_summary(run, "grid-search", s)?;
    if !failures.is_empty() {
        bail!("{} grid cells diverged:\n  {}", failures.len(), failures.join("\n  "));
    }
    Ok(())
}

fn run_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| p.display().to_string())
}

fn split_paths(cfg: &RunConfig, key: &str) -> Result<Vec<PathBuf>> {
    Ok(cfg.list::<String>(key)?.into_iter().map(PathBuf::from).collect())
}

pub fn compare(cfg: &RunConfig, run: &RunDir) -> Result<()> {
    let atlas = read_nifti(cfg.required("atlas")?)?.to_labels()?;
    let density: DensityKind = cfg.get("compare.density")?;
    let runs = split_paths(cfg, "compare.runs")?;
    let masks = split_paths(cfg, "compare.masks")?;
    let session_run = cfg.raw("compare.session_run");
    let modes = [!runs.is_empty(), !masks.is_empty(), !session_run.is_empty()];
    if modes.iter().filter(|&&m| m).count() != 1 {
        bail!("set exactly one of compare.runs, compare.masks, compare.session_run");
    }

    // Owned inputs first; contexts borrow from them.
    struct Source {
        name: String,
        mask: Volume<f32>,
        fold: Option<usize>,
        images: Vec<Volume<f32>>,
        subject: Option<String>,
        session: Option<String>,
    }
    let mut folds: Vec<TrainedFold> = Vec::new();
    let mut sources: Vec<Source> = Vec::new();
    let mut target_class = 1;
    let mut mu = 1.0;
    let grouping;
    if !runs.is_empty() {
        grouping = Grouping::All;
        for r in &runs {
            let rc = read_resolved(r)?;
            target_class = rc.get("mask.target_class")?;
            mu = rc.get("mask.mu")?;
            let tf = load_trained_fold(Path::new(rc.required("train_run")?), rc.get("fold")?)?;
            let (_, val) = group_sets(&tf, target_class, 0)?;
            sources.push(Source {
                name: run_name(r),
                mask: read_volume_f32(r.join("masks/group.nii.gz"))?,
                fold: Some(folds.len()),
                images: val.volumes,
                subject: None,
                session: None,
            });
            folds.push(tf);
        }
    } else if !masks.is_empty() {
        grouping = Grouping::All;
        for m in &masks {
            sources.push(Source { name: run_name(m), mask: read_volume_f32(m)?, fold: None, images: Vec::new(), subject: None, session: None });
        }
    } else {
        grouping = Grouping::Longitudinal;
        let dir = Path::new(session_run);
        let rc = read_resolved(dir)?;
        target_class = rc.get("mask.target_class")?;
        mu = rc.get("mask.mu")?;
        let tf = load_trained_fold(Path::new(rc.required("train_run")?), rc.get("fold")?)?;
        let sessions = session_manifest(&rc, &tf)?;
        let table = std::fs::read_to_string(dir.join("reports/sessions.tsv")).context("reading sessions.tsv")?;
        for line in table.lines().skip(1) {
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() < 4 || cols[2] != "ok" {
                continue;
            }
            let row = sessions
                .manifest
                .entries
                .iter()
                .position(|e| e.participant_id == cols[0] && e.session_id == cols[1])
                .with_context(|| format!("session {} {} not in manifest", cols[0], cols[1]))?;
            sources.push(Source {
                name: format!("{}_{}", cols[0], cols[1]),
                mask: read_volume_f32(dir.join(cols[3]))?,
                fold: Some(0),
                images: vec![neuromask::trainer::normalize(&sessions.volumes[row], tf.normalization)],
                subject: Some(cols[0].to_string()),
                session: Some(cols[1].to_string()),
            });
        }
        folds.push(tf);
    }
    let first_session = |subject: &str| sources.iter().filter(|s| s.subject.as_deref() == Some(subject)).filter_map(|s| s.session.clone()).min();
    let contexts: Vec<MaskContext<'_, f32>> = sources
        .iter()
        .map(|s| MaskContext {
            name: s.name.clone(),
            mask: s.mask.clone(),
            net: s.fold.map(|k| &folds[k].net),
            images: s.images.iter().collect(),
            subject: s.subject.clone(),
            baseline: s.subject.as_deref().is_some_and(|sub| first_session(sub) == s.session),
        })
        .collect();
    let report = pairwise_report(&contexts, &atlas, grouping, density, target_class, mu)?;
    run.text("reports/pairs.tsv", &report.pairs_tsv())?;
    run.text("reports/comparison.txt", &report.summary())?;
    let mut s = Summary::new();
    s.insert("contexts".into(), json!(contexts.len()));
    s.insert("pairs".into(), json!(report.pairs.len()));
    s.insert("groups".into(), serde_json::to_value(&report.groups)?);
    write_summary(run, "compare", s)
}

pub fn render(cfg: &RunConfig, run: &RunDir) -> Result<()> {
    let volume = read_volume_f32(cfg.required("render.volume")?)?;
    let mask = match cfg.raw("render.mask") {
        "" => None,
        p => Some(read_volume_f32(p)?),
    };
    let axis: usize = cfg.get("render.axis")?;
    if axis > 2 {
        bail!("render.axis must be 0, 1 or 2");
    }
    let mut slices: Vec<usize> = cfg.list("render.slices")?;
    if slices.is_empty() {
        let n = volume.dims()[axis];
        slices = (1..=5).map(|i| i * n / 6).collect();
    }
    let name = cfg.required("render.output")?;
    render_slices(&volume, mask.as_ref(), axis, &slices, run.path(&format!("reports/{name}")))?;
    let mut s = Summary::new();
    s.insert("image".into(), json!(format!("reports/{name}")));
    s.insert("axis".into(), json!(axis));
    s.insert("slices".into(), json!(slices));
    write_summary(run, "render", s)
}
