//! Flat `key = value` run configuration with per-subcommand key tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config key {key:?}")]
    UnknownKey { key: String },
    #[error("{origin}: line {line}: expected `key = value`")]
    Syntax { origin: String, line: usize },
    #[error("config key {key:?} given twice in {origin}")]
    Duplicate { key: String, origin: String },
    #[error("config key {key:?}: cannot parse {value:?}: {reason}")]
    Value { key: String, value: String, reason: String },
    #[error("config key {key:?} is required")]
    Missing { key: String },
    #[error("reading config {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone)]
pub struct Key {
    pub name: &'static str,
    pub default: String,
    pub help: &'static str,
}

fn key(name: &'static str, default: impl ToString, help: &'static str) -> Key {
    Key { name, default: default.to_string(), help }
}

pub fn synth_keys() -> Vec<Key> {
    vec![
        key("seed", 0, "master seed"),
        key("synth.shape", "24,24,24", "volume extent D,H,W"),
        key("synth.n_cn", 40, "CN subjects"),
        key("synth.n_ad", 40, "AD subjects"),
        key("synth.sessions", 1, "sessions per subject"),
        key("synth.roi_radius", 4.0, "radius of each atrophy lobe in voxels"),
        key("synth.depth_min", 0.3, "lower bound of the per-subject atrophy depth"),
        key("synth.depth_max", 0.3, "upper bound of the per-subject atrophy depth"),
        key("synth.asymmetry", 0.5, "maximum left/right depth imbalance"),
        key("synth.subject_effect", 0.1, "amplitude of the subject-specific pattern"),
        key("synth.noise", 0.02, "per-session noise amplitude"),
        key("synth.smoothing", 2, "triangular smoothing half-width"),
        key("synth.n_distractors", 4, "distractor ROI count"),
        key("synth.parcels_per_axis", 2, "coarse parcels per axis for the remaining brain"),
    ]
}

pub fn qc_keys() -> Vec<Key> {
    vec![key("manifest", "", "cohort manifest (TSV)")]
}

fn split_keys() -> Vec<Key> {
    vec![
        key("seed", 0, "master seed"),
        key("manifest", "", "cohort manifest (TSV)"),
        key("split.folds", 5, "cross-validation folds"),
        key("split.test_per_class", 0, "held-out test subjects per class"),
    ]
}

fn arch_keys() -> Vec<Key> {
    vec![
        key("arch.blocks", 3, "convolutional blocks"),
        key("arch.first_filters", 8, "filters of the first block, doubled per block"),
        key("arch.sub_blocks", 1, "conv-BN-activation units per block"),
        key("arch.reduction", "maxpool", "maxpool | strided_conv"),
        key("arch.fc_layers", 1, "fully-connected layers"),
        key("arch.fc_hidden", 64, "hidden fully-connected width"),
        key("arch.dropout", 0.5, "dropout rate before the classifier"),
        key("arch.negative_slope", 0.01, "leaky ReLU slope"),
    ]
}

fn train_keys() -> Vec<Key> {
    vec![
        key("train.lr", 0.01, "SGD learning rate"),
        key("train.weight_decay", 1e-4, "L2 weight decay"),
        key("train.batch_size", 8, "mini-batch size"),
        key("train.patience", 5, "early-stop patience (epochs)"),
        key("train.max_epochs", 30, "maximum epochs"),
        key("train.normalization", "none", "none | minmax"),
    ]
}

pub fn classifier_keys(single_fold: bool) -> Vec<Key> {
    let mut k = split_keys();
    k.extend(arch_keys());
    k.extend(train_keys());
    if single_fold {
        k.push(key("train.fold", 0, "fold to train"));
    }
    k
}

pub fn search_keys() -> Vec<Key> {
    let mut k = split_keys();
    k.extend([
        key("search.trials", 10, "sampled configurations"),
        key("search.blocks", "1,7", "inclusive range of conv blocks"),
        key("search.first_filters", "4,8,16", "choices for first-block filters"),
        key("search.sub_blocks", "1,3", "inclusive range of units per block"),
        key("search.reductions", "maxpool,strided_conv", "choices of reduction"),
        key("search.fc_layers", "1,3", "inclusive range of fully-connected layers"),
        key("search.dropout", "0,0.8", "dropout range"),
        key("search.log10_lr", "-4,-1", "log10 learning-rate range"),
        key("search.log10_weight_decay", "-6,-2", "log10 weight-decay range"),
        key("search.batch_sizes", "4,8,16", "batch-size choices"),
        key("search.normalizations", "none,minmax", "normalization choices"),
        key("train.patience", 5, "early-stop patience (epochs)"),
        key("train.max_epochs", 30, "maximum epochs"),
    ]);
    k
}

/// Mask optimizer keys; `session` switches the stopping defaults.
fn mask_keys(session: bool) -> Vec<Key> {
    let (tol, patience, max) = if session { (0.01, 200, 5000) } else { (0.05, 5, 150) };
    vec![
        key("seed", 0, "master seed"),
        key("train_run", "", "run directory of a train or cv command"),
        key("fold", 0, "fold whose checkpoint and split are used"),
        key("mask.mu", 1.0, "value masked voxels are blended toward"),
        key("mask.lambda1", 1e-4, "sparsity weight"),
        key("mask.lambda2", 1e-2, "total-variation weight"),
        key("mask.beta1", 0.1, "sparsity exponent"),
        key("mask.beta2", 1.0, "total-variation exponent"),
        key("mask.lr", 0.1, "projected gradient step"),
        key("mask.target_class", 1, "class whose probability is suppressed"),
        key("mask.session_multiplier", 100.0, "lambda scale for session masks"),
        key("mask.epsilon", 1e-6, "gradient floor for exponents below one"),
        key("mask.threshold", 0.95, "values above this are set to 1"),
        key("mask.stop.tolerance", tol, "relative early-stop tolerance"),
        key("mask.stop.patience", patience, "early-stop patience (epochs)"),
        key("mask.stop.max_epochs", max, "maximum epochs"),
        key("mask.max_images", 0, "cap on training images (0 = all)"),
    ]
}

pub fn mask_group_keys() -> Vec<Key> {
    let mut k = mask_keys(false);
    k.push(key("mask.outlier_z", 3.0, "robust z-score above which an image loss is flagged"));
    k
}

pub fn mask_session_keys() -> Vec<Key> {
    let mut k = mask_keys(true);
    k.push(key("session.manifest", "", "sessions to mask (default: the train run's manifest)"));
    k
}

pub fn grid_keys() -> Vec<Key> {
    let mut k = mask_keys(false);
    k.extend([
        key("grid.beta1", "0.1,0.5,1,2", "beta1 values of the beta phase"),
        key("grid.beta2", "1,2,3", "beta2 values of the beta phase"),
        key("grid.beta_phase.lambda1", 1e-4, "lambda1 held during the beta phase"),
        key("grid.beta_phase.lambda2", 1e-3, "lambda2 held during the beta phase"),
        key("grid.beta_phase.beta1", 0.1, "beta1 held while beta2 varies"),
        key("grid.beta_phase.beta2", 1.0, "beta2 held while beta1 varies"),
        key("grid.lambda1", "0.1,0.01,0.001,0.0001", "lambda1 values of the lambda phase"),
        key("grid.lambda2", "0.1,0.01,0.001,0.0001", "lambda2 values of the lambda phase"),
        key("grid.lambda_phase.lambda1", 1e-4, "lambda1 held while lambda2 varies"),
        key("grid.lambda_phase.lambda2", 1e-2, "lambda2 held while lambda1 varies"),
        key("grid.lambda_phase.beta1", 0.1, "beta1 held during the lambda phase"),
        key("grid.lambda_phase.beta2", 1.0, "beta2 held during the lambda phase"),
    ]);
    k
}

pub fn compare_keys() -> Vec<Key> {
    vec![
        key("atlas", "", "label volume defining the ROIs"),
        key("compare.runs", "", "mask-group run directories (comma separated)"),
        key("compare.masks", "", "mask files (comma separated); ROI similarity only"),
        key("compare.session_run", "", "mask-session run directory; longitudinal grouping"),
        key("compare.density", "sum", "sum | mean of (1 - m) per ROI"),
    ]
}

pub fn render_keys() -> Vec<Key> {
    vec![
        key("render.volume", "", "volume to display"),
        key("render.mask", "", "optional mask overlay"),
        key("render.axis", 0, "slicing axis: 0 = D, 1 = H, 2 = W"),
        key("render.slices", "", "slice indices (default: five evenly spaced)"),
        key("render.output", "montage.png", "file name under reports/"),
    ]
}

pub fn keys_help(keys: &[Key]) -> String {
    let width = keys.iter().map(|k| k.name.len() + k.default.len() + 3).max().unwrap_or(0);
    let mut s = String::from("Config keys (default):\n");
    for k in keys {
        let kv = format!("{} = {}", k.name, k.default);
        let _ = writeln!(s, "  {kv:<width$}  {}", k.help);
    }
    s
}

/// Every key of the table, defaults materialized.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

fn parse_lines(text: &str, origin: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { origin: origin.into(), line: i + 1 })?;
        let k = k.trim();
        if k.is_empty() {
            return Err(ConfigError::Syntax { origin: origin.into(), line: i + 1 });
        }
        if out.iter().any(|(seen, _)| seen == k) {
            return Err(ConfigError::Duplicate { key: k.into(), origin: origin.into() });
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    /// Defaults, then the file, then `--set` overrides (later wins).
    pub fn resolve(keys: &[Key], file: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut values: BTreeMap<String, String> = keys.iter().map(|k| (k.name.to_string(), k.default.clone())).collect();
        let mut assign = |pairs: Vec<(String, String)>| -> Result<(), ConfigError> {
            for (k, v) in pairs {
                match values.get_mut(&k) {
                    Some(slot) => *slot = v,
                    None => return Err(ConfigError::UnknownKey { key: k }),
                }
            }
            Ok(())
        };
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
            assign(parse_lines(&text, &path.display().to_string())?)?;
        }
        for (i, o) in overrides.iter().enumerate() {
            let (k, v) = o.split_once('=').ok_or(ConfigError::Syntax { origin: "--set".into(), line: i + 1 })?;
            assign(vec![(k.trim().to_string(), v.trim().to_string())])?;
        }
        Ok(Self { values })
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("key {key} not in table"))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.raw(key);
        v.parse().map_err(|e: T::Err| ConfigError::Value { key: key.into(), value: v.into(), reason: e.to_string() })
    }

    /// Non-empty string value.
    pub fn required(&self, key: &str) -> Result<&str, ConfigError> {
        match self.raw(key) {
            "" => Err(ConfigError::Missing { key: key.into() }),
            v => Ok(v),
        }
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.raw(key);
        v.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|e: T::Err| ConfigError::Value { key: key.into(), value: v.into(), reason: e.to_string() }))
            .collect()
    }

    pub fn pair<T: FromStr + Copy>(&self, key: &str) -> Result<(T, T), ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        match self.list::<T>(key)?.as_slice() {
            &[a, b] => Ok((a, b)),
            _ => Err(ConfigError::Value { key: key.into(), value: self.raw(key).into(), reason: "expected two values".into() }),
        }
    }

    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Reads a file written by `to_text` without a key table.
    pub fn from_resolved_text(text: &str, origin: &str) -> Result<Self, ConfigError> {
        Ok(Self { values: parse_lines(text, origin)?.into_iter().collect() })
    }

    pub fn contains(&self, key: &str) -> bool {
        self.values.contains_key(key)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_and_unknown_keys() {
        let keys = synth_keys();
        let c = RunConfig::resolve(&keys, None, &["synth.n_cn = 3".into()]).unwrap();
        assert_eq!(c.get::<usize>("synth.n_cn").unwrap(), 3);
        assert_eq!(c.get::<usize>("synth.n_ad").unwrap(), 40);
        let e = RunConfig::resolve(&keys, None, &["synth.bogus=1".into()]).unwrap_err();
        assert!(e.to_string().contains("synth.bogus"));
        let again = RunConfig::from_resolved_text(&c.to_text(), "x").unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn file_syntax() {
        assert!(matches!(parse_lines("a = 1\nb\n", "f"), Err(ConfigError::Syntax { line: 2, .. })));
        assert!(matches!(parse_lines("a = 1\na = 2\n", "f"), Err(ConfigError::Duplicate { .. })));
        assert_eq!(parse_lines("# c\n\na = 1 # note\n", "f").unwrap(), vec![("a".into(), "1".into())]);
    }

    #[test]
    fn lists() {
        let c = RunConfig::resolve(&grid_keys(), None, &[]).unwrap();
        assert_eq!(c.list::<f64>("grid.beta1").unwrap(), vec![0.1, 0.5, 1.0, 2.0]);
        let s = RunConfig::resolve(&search_keys(), None, &[]).unwrap();
        assert_eq!(s.pair::<usize>("search.blocks").unwrap(), (1, 7));
    }
}
