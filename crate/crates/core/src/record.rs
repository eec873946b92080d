//! Canonical text records: one UTF-8 JSON object per line.
//!
//! Field order follows struct declaration order, so serializing the same
//! value twice always yields the same bytes.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum RecordError {
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("record is not valid UTF-8 at byte {offset}")]
    Utf8 { offset: usize },
    #[error("serialization failed: {0}")]
    Serialize(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Serializes one entity to its canonical single-line form.
pub fn serialize_record<T: Serialize>(entity: &T) -> Result<String, RecordError> {
    serde_json::to_string(entity).map_err(|e| RecordError::Serialize(e.to_string()))
}

/// Inverse of [`serialize_record`]. Errors carry the byte offset of the fault.
pub fn deserialize_record<T: DeserializeOwned>(text: &str) -> Result<T, RecordError> {
    serde_json::from_str(text)
        .map_err(|e| RecordError::Parse { offset: byte_offset(text, e.line(), e.column()), message: e.to_string() })
}

// serde_json reports 1-based line and column, where column counts bytes.
fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let line_start: usize = text.split_inclusive('\n').take(line.saturating_sub(1)).map(str::len).sum();
    (line_start + column.saturating_sub(1)).min(text.len())
}

/// Parses a line-delimited dataset. Blank lines are skipped; offsets in
/// errors are relative to the start of `text`.
pub fn parse_jsonl<T: DeserializeOwned>(text: &str) -> Result<Vec<T>, RecordError> {
    let mut out = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let content = line.trim_end_matches(['\n', '\r']);
        if !content.trim().is_empty() {
            match deserialize_record(content) {
                Ok(v) => out.push(v),
                Err(RecordError::Parse { offset: inner, message }) => {
                    return Err(RecordError::Parse { offset: offset + inner, message })
                }
                Err(other) => return Err(other),
            }
        }
        offset += line.len();
    }
    Ok(out)
}

pub fn to_jsonl<T: Serialize>(items: &[T]) -> Result<String, RecordError> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serialize_record(item)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, RecordError> {
    let bytes = fs::read(path).map_err(|source| RecordError::Io { path: path.display().to_string(), source })?;
    let text = String::from_utf8(bytes).map_err(|e| RecordError::Utf8 { offset: e.utf8_error().valid_up_to() })?;
    parse_jsonl(&text)
}

/// Writes `items` to `path`, replacing it atomically.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), RecordError> {
    let text = to_jsonl(items)?;
    write_atomic(path, text.as_bytes())
}

/// Appends one record as a new line.
pub fn append_jsonl<T: Serialize>(path: &Path, item: &T) -> Result<(), RecordError> {
    let io_err = |source| RecordError::Io { path: path.display().to_string(), source };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err)?;
    }
    let file = fs::OpenOptions::new().create(true).append(true).open(path).map_err(io_err)?;
    let mut line = serialize_record(item)?;
    line.push('\n');
    let mut writer = BufWriter::new(file);
    writer.write_all(line.as_bytes()).map_err(io_err)?;
    writer.flush().map_err(io_err)
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), RecordError> {
    let io_err = |source| RecordError::Io { path: path.display().to_string(), source };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err)?;
    }
    let tmp = path.with_extension(format!("{}.tmp", path.extension().and_then(|e| e.to_str()).unwrap_or("")));
    fs::write(&tmp, bytes).map_err(io_err)?;
    fs::rename(&tmp, path).map_err(io_err)
}

/// Serde adapter storing raw bytes as standard base64 text.
pub mod base64_bytes {
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&base64::engine::general_purpose::STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(deserializer: D) -> Result<Vec<u8>, D::Error> {
        let text = String::deserialize(deserializer)?;
        base64::engine::general_purpose::STANDARD.decode(text.as_bytes()).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::*;

    fn sample_trial() -> Trial {
        let mut c = EligibilityCriterion::new("I01", CriterionKind::Inclusion, "Age >= 18");
        c.guidelines = vec!["Demographics header".into()];
        c.domain = Some(CriterionDomain::DemographicAdministrative);
        Trial {
            trial_id: "T1".into(),
            title: "Diabetes study".into(),
            raw_criteria_text: "Inclusion: age >= 18".into(),
            phase: TrialPhase::III,
            therapeutic_area: "Endocrinology".into(),
            criteria: vec![c],
            relevance_criterion: Some("Patient has diabetes".into()),
            site_type: Some(SiteType::OutpatientClinic),
            prepared: false,
        }
    }

    #[test]
    fn trial_round_trips() {
        let trial = sample_trial();
        let text = serialize_record(&trial).unwrap();
        assert!(!text.contains('\n'));
        let back: Trial = deserialize_record(&text).unwrap();
        assert_eq!(back, trial);
    }

    #[test]
    fn truncated_record_reports_offset() {
        let text = serialize_record(&sample_trial()).unwrap();
        let cut = &text[..text.len() / 2];
        match deserialize_record::<Trial>(cut) {
            Err(RecordError::Parse { offset, .. }) => assert!(offset <= cut.len()),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_verdict_lists_allowed_values() {
        let err = deserialize_record::<Verdict>("\"Maybe\"").unwrap_err();
        let msg = err.to_string();
        for allowed in ["Met", "Unmet", "Unknown"] {
            assert!(msg.contains(allowed), "{msg}");
        }
    }

    #[test]
    fn jsonl_offsets_are_file_relative() {
        let text = "\"Met\"\n\"Unmet\"\n\"Maybe\"\n";
        match parse_jsonl::<Verdict>(text) {
            Err(RecordError::Parse { offset, .. }) => assert!((14..22).contains(&offset), "{offset}"),
            other => panic!("expected parse error, got {other:?}"),
        }
        assert_eq!(parse_jsonl::<Verdict>("\"Met\"\n\n\"Unknown\"").unwrap(), vec![Verdict::Met, Verdict::Unknown]);
    }
}
