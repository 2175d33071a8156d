use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataio::manifest::{CohortManifest, Diagnosis};
use crate::error::{Error, Result};
use crate::seed::job_rng;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<String>,
    pub validation: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub seed: u64,
    pub test_subjects: Vec<String>,
    pub folds: Vec<Fold>,
}

/// Diagnosis per participant, taken from the participant's first session.
pub fn subject_labels(manifest: &CohortManifest) -> BTreeMap<String, Diagnosis> {
    let mut out: BTreeMap<String, (String, Diagnosis)> = BTreeMap::new();
    for e in &manifest.entries {
        let slot = out.entry(e.participant_id.clone()).or_insert((e.session_id.clone(), e.diagnosis));
        if e.session_id < slot.0 {
            *slot = (e.session_id.clone(), e.diagnosis);
        }
    }
    out.into_iter().map(|(k, (_, d))| (k, d)).collect()
}

/// Subject-level split: a label-balanced test set, then stratified folds over the rest.
///
/// Each class is shuffled independently by the seed; the first `n_test_per_class`
/// of each go to test. The remaining CN then AD subjects are dealt round-robin into
/// folds, so every fold holds within one subject of its share of each class.
pub fn make_split(manifest: &CohortManifest, n_folds: usize, n_test_per_class: usize, seed: u64) -> Result<SplitPlan> {
    if n_folds < 2 {
        return Err(Error::InvalidArgument(format!("{n_folds} folds; at least 2 needed")));
    }
    let labels = subject_labels(manifest);
    let mut rng = job_rng(seed, "split", 0);
    let mut test = Vec::new();
    let mut rest = Vec::new();
    for class in [Diagnosis::CN, Diagnosis::AD] {
        let mut ids: Vec<String> = labels.iter().filter(|(_, &d)| d == class).map(|(k, _)| k.clone()).collect();
        if ids.len() < n_test_per_class + n_folds {
            return Err(Error::InsufficientSubjects(format!(
                "{class}: {} subjects for {n_test_per_class} test + {n_folds} folds",
                ids.len()
            )));
        }
        ids.shuffle(&mut rng);
        test.extend(ids.drain(..n_test_per_class));
        rest.extend(ids);
    }
    let mut validation = vec![Vec::new(); n_folds];
    for (i, id) in rest.iter().enumerate() {
        validation[i % n_folds].push(id.clone());
    }
    let folds = validation
        .iter()
        .enumerate()
        .map(|(k, val)| {
            let mut train: Vec<String> =
                validation.iter().enumerate().filter(|&(j, _)| j != k).flat_map(|(_, v)| v.iter().cloned()).collect();
            train.sort();
            let mut val = val.clone();
            val.sort();
            Fold { train, validation: val }
        })
        .collect();
    test.sort();
    Ok(SplitPlan { seed, test_subjects: test, folds })
}

/// Manifest row indices for the given subjects: every session, or only the first
/// session (sorted by session id) of each subject.
pub fn session_indices(manifest: &CohortManifest, subjects: &[String], all_sessions: bool) -> Vec<usize> {
    let wanted: BTreeSet<&str> = subjects.iter().map(String::as_str).collect();
    let mut first: BTreeMap<&str, usize> = BTreeMap::new();
    let mut all = Vec::new();
    for (i, e) in manifest.entries.iter().enumerate() {
        if !wanted.contains(e.participant_id.as_str()) {
            continue;
        }
        all.push(i);
        let slot = first.entry(&e.participant_id).or_insert(i);
        if e.session_id < manifest.entries[*slot].session_id {
            *slot = i;
        }
    }
    if all_sessions {
        all
    } else {
        let mut v: Vec<usize> = first.into_values().collect();
        v.sort_unstable();
        v
    }
}
