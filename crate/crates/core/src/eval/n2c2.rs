//! Loader for the 2018 n2c2 cohort-selection corpus: one XML file per
//! patient holding concatenated clinical notes and 13 met / not met tags.
//!
//! The corpus is distributed under a data-use agreement and is never
//! bundled; callers point [`load_dir`] at a local copy.

use std::path::{Path, PathBuf};

use chrono::NaiveDate;

use super::ground_truth::{GroundTruthLabel, Provenance};
use crate::model::{CriterionKind, EligibilityCriterion, Trial, TrialPhase, Verdict};

pub const TRIAL_ID: &str = "n2c2-2018";

/// Tag name and definition of each cohort criterion, in corpus order.
pub const CRITERIA: [(&str, &str); 13] = [
    ("DRUG-ABUSE", "Drug abuse, current or past"),
    ("ALCOHOL-ABUSE", "Current alcohol use over weekly recommended limits"),
    ("ENGLISH", "Patient must speak English"),
    ("MAKES-DECISIONS", "Patient must make their own medical decisions"),
    ("ABDOMINAL", "History of intra-abdominal surgery, small or large intestine resection, or small bowel obstruction"),
    (
        "MAJOR-DIABETES",
        "Major diabetes-related complication. A major complication is any of the following that are a result of \
         (or strongly correlated with) uncontrolled diabetes: amputation, kidney damage, skin conditions, \
         retinopathy, nephropathy, neuropathy",
    ),
    (
        "ADVANCED-CAD",
        "Advanced cardiovascular disease (CAD), meaning 2 or more of the following: taking 2 or more medications \
         to treat CAD, history of myocardial infarction (MI), currently experiencing angina, ischemia past or present",
    ),
    ("MI-6MOS", "MI in the past 6 months"),
    ("KETO-1YR", "Diagnosis of ketoacidosis in the past year"),
    ("DIETSUPP-2MOS", "Taken a dietary supplement (excluding vitamin D) in the past 2 months"),
    ("ASP-FOR-MI", "Use of aspirin to prevent MI"),
    ("HBA1C", "Any hemoglobin A1c (HbA1c) value between 6.5% and 9.5%"),
    ("CREATININE", "Serum creatinine >= upper limit of normal"),
];

#[derive(Debug, thiserror::Error)]
pub enum N2c2Error {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{file}: {reason}")]
    Malformed { file: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct N2c2Patient {
    /// File stem, e.g. `100` for `100.xml`.
    pub patient_id: String,
    /// Notes in file order, each without the separator line.
    pub notes: Vec<String>,
    /// (tag, verdict) for every tag present in the file.
    pub tags: Vec<(String, Verdict)>,
}

impl N2c2Patient {
    /// Latest `Record date:` among the notes; the criteria's time windows
    /// are anchored to it.
    pub fn latest_record_date(&self) -> Option<NaiveDate> {
        self.notes
            .iter()
            .flat_map(|n| n.lines())
            .filter_map(|l| l.trim().strip_prefix("Record date:"))
            .filter_map(|d| NaiveDate::parse_from_str(d.trim(), "%Y-%m-%d").ok())
            .max()
    }
}

/// The 13-criterion trial. Every criterion is an inclusion criterion whose
/// id is the corpus tag name.
pub fn trial() -> Trial {
    let raw = CRITERIA.iter().map(|(tag, text)| format!("{tag}: {text}")).collect::<Vec<_>>().join("\n");
    Trial {
        trial_id: TRIAL_ID.into(),
        title: "n2c2 2018 cohort selection".into(),
        raw_criteria_text: raw,
        phase: TrialPhase::Other,
        therapeutic_area: "Endocrinology".into(),
        criteria: CRITERIA
            .iter()
            .map(|(tag, text)| EligibilityCriterion::new(*tag, CriterionKind::Inclusion, *text))
            .collect(),
        relevance_criterion: None,
        site_type: None,
        prepared: false,
    }
}

fn is_separator(line: &str) -> bool {
    let t = line.trim();
    t.len() >= 20 && t.bytes().all(|b| b == b'*')
}

pub fn parse_patient(patient_id: &str, xml: &str) -> Result<N2c2Patient, N2c2Error> {
    let malformed = |reason: &str| N2c2Error::Malformed { file: patient_id.to_string(), reason: reason.into() };
    let start = xml.find("<![CDATA[").ok_or_else(|| malformed("no CDATA text block"))? + "<![CDATA[".len();
    let len = xml[start..].find("]]>").ok_or_else(|| malformed("unterminated CDATA"))?;
    let text = &xml[start..start + len];

    let mut notes = Vec::new();
    let mut current = String::new();
    for line in text.lines() {
        if is_separator(line) {
            notes.push(std::mem::take(&mut current));
        } else {
            current.push_str(line);
            current.push('\n');
        }
    }
    notes.push(current);
    let notes: Vec<String> = notes.into_iter().map(|n| n.trim().to_string()).filter(|n| !n.is_empty()).collect();

    let tags_start = xml.find("<TAGS>").ok_or_else(|| malformed("no TAGS block"))?;
    let mut tags = Vec::new();
    for element in xml[tags_start..].split('<').skip(1) {
        let Some((name, rest)) = element.split_once(char::is_whitespace) else { continue };
        let Some(value) = rest.split_once("met=\"").and_then(|(_, v)| v.split_once('"')).map(|(v, _)| v) else {
            continue;
        };
        let verdict = match value {
            "met" => Verdict::Met,
            "not met" => Verdict::Unmet,
            other => return Err(malformed(&format!("tag {name}: unexpected value `{other}`"))),
        };
        tags.push((name.to_string(), verdict));
    }
    Ok(N2c2Patient { patient_id: patient_id.to_string(), notes, tags })
}

/// Every `*.xml` file in `dir`, sorted by file name.
pub fn load_dir(dir: &Path) -> Result<Vec<N2c2Patient>, N2c2Error> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|source| N2c2Error::Io { path: dir.to_path_buf(), source })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("xml")))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|path| {
            let xml = std::fs::read_to_string(path).map_err(|source| N2c2Error::Io { path: path.clone(), source })?;
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            parse_patient(stem, &xml)
        })
        .collect()
}

pub fn labels(patients: &[N2c2Patient]) -> Vec<GroundTruthLabel> {
    patients
        .iter()
        .flat_map(|p| {
            p.tags.iter().map(|(tag, verdict)| GroundTruthLabel {
                patient_id: p.patient_id.clone(),
                trial_id: TRIAL_ID.into(),
                criterion_id: tag.clone(),
                label: *verdict,
                provenance: Provenance::DatasetAnnotation,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"<?xml version="1.0" encoding="UTF-8" ?>
<PatientMatching>
<TEXT><![CDATA[
Record date: 2069-04-07
Patient seen for follow-up of diabetes.
****************************************************************************************************
Record date: 2070-01-15
HbA1c 7.2%. Aspirin 81 mg daily.
]]></TEXT>
<TAGS>
<ABDOMINAL met="not met" />
<HBA1C met="met" />
</TAGS>
</PatientMatching>
"#;

    #[test]
    fn parses_notes_and_tags() {
        let p = parse_patient("100", SAMPLE).unwrap();
        assert_eq!(p.notes.len(), 2);
        assert!(p.notes[1].contains("Aspirin"));
        assert_eq!(p.tags, vec![("ABDOMINAL".into(), Verdict::Unmet), ("HBA1C".into(), Verdict::Met)]);
        assert_eq!(p.latest_record_date(), NaiveDate::from_ymd_opt(2070, 1, 15));
    }

    #[test]
    fn trial_has_thirteen_inclusion_criteria() {
        let t = trial();
        assert_eq!(t.criteria.len(), 13);
        assert!(t.criteria.iter().all(|c| c.kind == CriterionKind::Inclusion));
        assert!(crate::model::validate_trial(&t).is_empty());
    }

    #[test]
    fn unknown_tag_value_is_rejected() {
        let bad = SAMPLE.replace("met=\"met\"", "met=\"maybe\"");
        assert!(matches!(parse_patient("100", &bad), Err(N2c2Error::Malformed { .. })));
    }
}
