//! On-disk layout of a data directory shared by the CLI and the review
//! service.
//!
//! ```text
//! <root>/trials/<trial_id>.json
//! <root>/patients/<patient_id>.json
//! <root>/store/pages.tmvs            (+ pages.tmvs.meta.jsonl)
//! <root>/assessments/<trial_id>/<patient_id>.jsonl
//! <root>/runs/<trial_id>/<patient_id>/<strategy>.json
//! <root>/feedback.jsonl
//! <root>/usage.jsonl
//! ```

use std::path::{Path, PathBuf};

use crate::matching::MatchRun;
use crate::model::{CriterionAssessment, FeedbackEvent, PatientRecord, RetrievalStrategy, Trial};
use crate::record::{self, RecordError};

#[derive(Debug, thiserror::Error)]
pub enum WorkspaceError {
    #[error("invalid id `{0}`: ids must be non-empty and may not contain path separators or start with a dot")]
    InvalidId(String),
    #[error("{kind} `{id}` not found")]
    NotFound { kind: &'static str, id: String },
    #[error("{path}: {source}")]
    Record { path: PathBuf, source: RecordError },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// Rejects ids that would escape their directory.
pub fn check_id(id: &str) -> Result<(), WorkspaceError> {
    if id.is_empty() || id.starts_with('.') || id.contains(['/', '\\', '\0']) {
        return Err(WorkspaceError::InvalidId(id.to_string()));
    }
    Ok(())
}

/// File-name form of a strategy, e.g. `topk-guideline-3`.
pub fn strategy_slug(strategy: &RetrievalStrategy) -> String {
    strategy.to_string().replace(':', "-")
}

#[derive(Debug, Clone)]
pub struct Workspace {
    root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Workspace { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn trial_path(&self, trial_id: &str) -> Result<PathBuf, WorkspaceError> {
        check_id(trial_id)?;
        Ok(self.root.join("trials").join(format!("{trial_id}.json")))
    }

    pub fn patient_path(&self, patient_id: &str) -> Result<PathBuf, WorkspaceError> {
        check_id(patient_id)?;
        Ok(self.root.join("patients").join(format!("{patient_id}.json")))
    }

    pub fn store_path(&self) -> PathBuf {
        self.root.join("store").join("pages.tmvs")
    }

    pub fn feedback_path(&self) -> PathBuf {
        self.root.join("feedback.jsonl")
    }

    pub fn usage_path(&self) -> PathBuf {
        self.root.join("usage.jsonl")
    }

    pub fn assessments_path(&self, trial_id: &str, patient_id: &str) -> Result<PathBuf, WorkspaceError> {
        check_id(trial_id)?;
        check_id(patient_id)?;
        Ok(self.root.join("assessments").join(trial_id).join(format!("{patient_id}.jsonl")))
    }

    pub fn run_path(
        &self,
        trial_id: &str,
        patient_id: &str,
        strategy: &RetrievalStrategy,
    ) -> Result<PathBuf, WorkspaceError> {
        check_id(trial_id)?;
        check_id(patient_id)?;
        Ok(self.root.join("runs").join(trial_id).join(patient_id).join(format!("{}.json", strategy_slug(strategy))))
    }

    pub fn save_trial(&self, trial: &Trial) -> Result<(), WorkspaceError> {
        write_json(&self.trial_path(&trial.trial_id)?, trial)
    }

    pub fn load_trial(&self, trial_id: &str) -> Result<Trial, WorkspaceError> {
        read_json(&self.trial_path(trial_id)?, "trial", trial_id)
    }

    /// Every stored trial, sorted by id.
    pub fn trials(&self) -> Result<Vec<Trial>, WorkspaceError> {
        list_json(&self.root.join("trials"))
    }

    pub fn save_patient(&self, record: &PatientRecord) -> Result<(), WorkspaceError> {
        write_json(&self.patient_path(&record.patient_id)?, record)
    }

    pub fn load_patient(&self, patient_id: &str) -> Result<PatientRecord, WorkspaceError> {
        read_json(&self.patient_path(patient_id)?, "patient", patient_id)
    }

    pub fn load_patient_or_new(&self, patient_id: &str) -> Result<PatientRecord, WorkspaceError> {
        match self.load_patient(patient_id) {
            Err(WorkspaceError::NotFound { .. }) => Ok(PatientRecord::new(patient_id)),
            other => other,
        }
    }

    /// Every stored patient record, sorted by id.
    pub fn patients(&self) -> Result<Vec<PatientRecord>, WorkspaceError> {
        list_json(&self.root.join("patients"))
    }

    pub fn save_assessments(
        &self,
        trial_id: &str,
        patient_id: &str,
        items: &[CriterionAssessment],
    ) -> Result<(), WorkspaceError> {
        let path = self.assessments_path(trial_id, patient_id)?;
        record::write_jsonl(&path, items).map_err(|source| WorkspaceError::Record { path, source })
    }

    /// Every stored assessment, ordered by trial, patient, then file order.
    pub fn assessments(&self) -> Result<Vec<CriterionAssessment>, WorkspaceError> {
        let mut out = Vec::new();
        for trial_dir in sorted_entries(&self.root.join("assessments"))? {
            for file in sorted_entries(&trial_dir)? {
                if file.extension().is_some_and(|e| e == "jsonl") {
                    out.extend(
                        record::read_jsonl(&file).map_err(|source| WorkspaceError::Record { path: file, source })?,
                    );
                }
            }
        }
        Ok(out)
    }

    pub fn save_run(&self, run: &MatchRun) -> Result<(), WorkspaceError> {
        write_json(&self.run_path(&run.trial_id, &run.patient_id, &run.strategy)?, run)
    }

    /// Every stored match run, ordered by trial, patient, then strategy file name.
    pub fn runs(&self) -> Result<Vec<MatchRun>, WorkspaceError> {
        let mut out = Vec::new();
        for trial_dir in sorted_entries(&self.root.join("runs"))? {
            for patient_dir in sorted_entries(&trial_dir)? {
                out.extend(list_json::<MatchRun>(&patient_dir)?);
            }
        }
        Ok(out)
    }

    pub fn feedback(&self) -> Result<Vec<FeedbackEvent>, WorkspaceError> {
        let path = self.feedback_path();
        if !path.exists() {
            return Ok(Vec::new());
        }
        record::read_jsonl(&path).map_err(|source| WorkspaceError::Record { path, source })
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), WorkspaceError> {
    let record_err = |source| WorkspaceError::Record { path: path.to_path_buf(), source };
    let mut text = record::serialize_record(value).map_err(record_err)?;
    text.push('\n');
    record::write_atomic(path, text.as_bytes()).map_err(record_err)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, kind: &'static str, id: &str) -> Result<T, WorkspaceError> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(WorkspaceError::NotFound { kind, id: id.to_string() })
        }
        Err(source) => return Err(WorkspaceError::Io { path: path.to_path_buf(), source }),
    };
    record::deserialize_record(text.trim_end())
        .map_err(|source| WorkspaceError::Record { path: path.to_path_buf(), source })
}

/// Entries of `dir` sorted by name; a missing directory is empty.
fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>, WorkspaceError> {
    let read = match std::fs::read_dir(dir) {
        Ok(r) => r,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(source) => return Err(WorkspaceError::Io { path: dir.to_path_buf(), source }),
    };
    let mut paths: Vec<PathBuf> = read.filter_map(|e| e.ok().map(|e| e.path())).collect();
    paths.sort();
    Ok(paths)
}

fn list_json<T: serde::de::DeserializeOwned>(dir: &Path) -> Result<Vec<T>, WorkspaceError> {
    sorted_entries(dir)?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .map(|p| {
            let id = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            read_json(&p, "record", &id)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_cannot_escape() {
        for bad in ["", "..", "../x", "a/b", ".hidden", "a\\b"] {
            assert!(check_id(bad).is_err(), "{bad}");
        }
        check_id("P-001").unwrap();
    }

    #[test]
    fn patient_round_trip_and_missing() {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::new(dir.path());
        assert!(matches!(ws.load_patient("P1"), Err(WorkspaceError::NotFound { .. })));
        let record = PatientRecord::new("P1");
        ws.save_patient(&record).unwrap();
        assert_eq!(ws.load_patient("P1").unwrap(), record);
        assert_eq!(ws.patients().unwrap().len(), 1);
        assert!(ws.assessments().unwrap().is_empty());
        assert!(ws.feedback().unwrap().is_empty());
    }
}
