//! Tab-separated cohort manifests.
//!
//! Required columns: `participant_id`, `session_id`, `diagnosis` (or `label`),
//! `path`. Optional: `age`, `sex`. Relative paths resolve against the manifest's
//! directory.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataio::write_atomic;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Diagnosis {
    CN,
    AD,
}

impl Diagnosis {
    /// Class index used by the classifier: CN = 0, AD = 1.
    pub fn class(self) -> usize {
        match self {
            Diagnosis::CN => 0,
            Diagnosis::AD => 1,
        }
    }

    pub fn from_class(c: usize) -> Option<Self> {
        match c {
            0 => Some(Diagnosis::CN),
            1 => Some(Diagnosis::AD),
            _ => None,
        }
    }
}

impl fmt::Display for Diagnosis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Diagnosis::CN => "CN",
            Diagnosis::AD => "AD",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub participant_id: String,
    pub session_id: String,
    pub diagnosis: Diagnosis,
    pub path: PathBuf,
    pub age: Option<f64>,
    pub sex: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CohortManifest {
    pub entries: Vec<ManifestEntry>,
    /// Directory relative paths are resolved against.
    pub base_dir: PathBuf,
}

impl CohortManifest {
    pub fn new(entries: Vec<ManifestEntry>, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut seen = HashSet::new();
        for (i, e) in entries.iter().enumerate() {
            if !seen.insert((e.participant_id.clone(), e.session_id.clone())) {
                return Err(Error::DuplicateSession {
                    row: i + 1,
                    participant: e.participant_id.clone(),
                    session: e.session_id.clone(),
                });
            }
        }
        Ok(Self { entries, base_dir: base_dir.into() })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            self.base_dir.join(&entry.path)
        }
    }

    /// Sorted, de-duplicated participant ids.
    pub fn participants(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.entries.iter().map(|e| e.participant_id.clone()).collect();
        ids.sort();
        ids.dedup();
        ids
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("participant_id\tsession_id\tdiagnosis\tpath\tage\tsex\n");
        for e in &self.entries {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                e.participant_id,
                e.session_id,
                e.diagnosis,
                e.path.display(),
                e.age.map(|a| a.to_string()).unwrap_or_default(),
                e.sex.clone().unwrap_or_default()
            ));
        }
        out
    }
}

pub fn parse_manifest_str(text: &str, base_dir: impl Into<PathBuf>) -> Result<CohortManifest> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    let col = |names: &[&str]| headers.iter().position(|h| names.contains(&h));
    let need = |names: &[&str]| col(names).ok_or_else(|| Error::MissingColumn(names[0].to_string()));
    let pid = need(&["participant_id"])?;
    let sid = need(&["session_id"])?;
    let dx = need(&["diagnosis", "label"])?;
    let path = need(&["path"])?;
    let age = col(&["age"]);
    let sex = col(&["sex"]);

    let mut entries = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record?;
        let field = |c: usize| record.get(c).unwrap_or("");
        let diagnosis = match field(dx) {
            "CN" => Diagnosis::CN,
            "AD" => Diagnosis::AD,
            other => return Err(Error::UnknownLabel { row, label: other.to_string() }),
        };
        let age = match age.map(field).filter(|s| !s.is_empty()) {
            None => None,
            Some(s) => Some(
                s.parse::<f64>()
                    .map_err(|_| Error::ManifestRow { row, detail: format!("age {s:?} is not a number") })?,
            ),
        };
        let participant_id = field(pid).to_string();
        let session_id = field(sid).to_string();
        if participant_id.is_empty() || session_id.is_empty() || field(path).is_empty() {
            return Err(Error::ManifestRow { row, detail: "empty participant, session or path".into() });
        }
        entries.push(ManifestEntry {
            participant_id,
            session_id,
            diagnosis,
            path: PathBuf::from(field(path)),
            age,
            sex: sex.map(field).filter(|s| !s.is_empty()).map(str::to_string),
        });
    }
    CohortManifest::new(entries, base_dir)
}

pub fn parse_manifest(path: impl AsRef<Path>) -> Result<CohortManifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_manifest_str(&text, base)
}

pub fn write_manifest(manifest: &CohortManifest, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), manifest.to_tsv().as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEAD: &str = "participant_id\tsession_id\tdiagnosis\tpath\n";

    #[test]
    fn two_valid_rows() {
        let text = format!("{HEAD}sub-1\tses-M00\tCN\ta.nii\nsub-2\tses-M00\tAD\tb.nii.gz\n");
        let m = parse_manifest_str(&text, "/data").unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.entries[1].diagnosis, Diagnosis::AD);
        assert_eq!(m.resolve(&m.entries[0]), PathBuf::from("/data/a.nii"));
    }

    #[test]
    fn duplicate_session_is_rejected() {
        let text = format!("{HEAD}sub-1\tses-M00\tCN\ta.nii\nsub-1\tses-M00\tCN\tb.nii\n");
        assert!(matches!(parse_manifest_str(&text, ""), Err(Error::DuplicateSession { row: 2, .. })));
    }

    #[test]
    fn unknown_label_names_the_row() {
        let text = format!("{HEAD}sub-1\tses-M00\tCN\ta.nii\nsub-2\tses-M00\tMCI\tb.nii\n");
        let err = parse_manifest_str(&text, "").unwrap_err();
        assert!(matches!(&err, Error::UnknownLabel { row: 2, label } if label == "MCI"));
        assert!(err.to_string().contains("row 2"));
    }

    #[test]
    fn missing_column() {
        let text = "participant_id\tsession_id\tpath\nsub-1\tses-M00\ta.nii\n";
        assert!(matches!(parse_manifest_str(text, ""), Err(Error::MissingColumn(c)) if c == "diagnosis"));
    }

    #[test]
    fn tsv_round_trip_with_covariates() {
        let text = "participant_id\tsession_id\tlabel\tpath\tage\tsex\nsub-1\tses-M00\tAD\tx.nii\t71.5\tF\nsub-1\tses-M12\tAD\ty.nii\t\t\n";
        let m = parse_manifest_str(text, "").unwrap();
        assert_eq!(m.entries[0].age, Some(71.5));
        assert_eq!(m.entries[1].sex, None);
        let again = parse_manifest_str(&m.to_tsv(), "").unwrap();
        assert_eq!(again, m);
    }
}
