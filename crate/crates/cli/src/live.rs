//! End-to-end run over a local copy of the n2c2 2018 cohort-selection
//! corpus: prepare the trial, ingest each patient's notes as rendered
//! pages, assess every criterion (no relevance gate; the whole cohort is in
//! scope) and score against the dataset annotations.

use std::path::PathBuf;

use anyhow::Context;
use clap::Args;
use serde_json::json;
use trialmatch_core::eval::join_rows;
use trialmatch_core::eval::n2c2;
use trialmatch_core::eval::report::classification_report;
use trialmatch_core::ingest::redact::Passthrough;
use trialmatch_core::ingest::{ingest_patient, IngestOptions, UploadedDocument, DEFAULT_PDF_DPI, DEFAULT_TEXT_DPI};
use trialmatch_core::matching::Matcher;
use trialmatch_core::model::{CriterionAssessment, RetrievalStrategy, Verdict};
use trialmatch_core::prep::prepare_trial;
use trialmatch_core::store::VectorStore;
use trialmatch_core::workspace::{Workspace, WorkspaceError};

use crate::commands::{gateway, print_json, workers};
use crate::{CliError, CliResult, DataArgs, GatewayArgs};

#[derive(Args)]
pub struct N2c2Args {
    /// Directory of the corpus XML files (one per patient).
    #[arg(long)]
    pub n2c2_dir: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub gateway: GatewayArgs,
    #[arg(long, default_value = "all")]
    pub strategy: RetrievalStrategy,
    /// Only the first N patients, in file-name order.
    #[arg(long)]
    pub limit: Option<usize>,
}

pub fn run(a: N2c2Args) -> CliResult {
    if !a.n2c2_dir.is_dir() {
        return Err(CliError::Usage(format!("{} is not a directory", a.n2c2_dir.display())));
    }
    let mut patients = n2c2::load_dir(&a.n2c2_dir).context("loading corpus")?;
    if let Some(limit) = a.limit {
        patients.truncate(limit);
    }
    let ws = Workspace::new(&a.data.data);
    let (gw, _) = gateway(&a.gateway, ws.usage_path())?;
    let workers = workers(&a.gateway);

    let mut trial = match ws.load_trial(n2c2::TRIAL_ID) {
        Ok(t) => t,
        Err(WorkspaceError::NotFound { .. }) => n2c2::trial(),
        Err(e) => return Err(e.into()),
    };
    let prepared = prepare_trial(&gw, &mut trial, workers);
    ws.save_trial(&trial)?;
    prepared.context("preparing trial")?;

    let store = VectorStore::open_or_empty(&ws.store_path())?;
    let options = IngestOptions { pdf_dpi: DEFAULT_PDF_DPI, text_dpi: DEFAULT_TEXT_DPI, workers };
    let mut predictions: Vec<CriterionAssessment> = Vec::new();
    let mut failures = 0;
    for patient in &patients {
        let as_of = patient
            .latest_record_date()
            .with_context(|| format!("patient {} has no record date", patient.patient_id))?;
        let uploads = patient
            .notes
            .iter()
            .enumerate()
            .map(|(i, note)| UploadedDocument::new(format!("note-{:02}.txt", i + 1), note.as_bytes().to_vec()))
            .collect::<Result<Vec<_>, _>>()?;
        let mut record = ws.load_patient_or_new(&patient.patient_id)?;
        ingest_patient(&gw, &store, &mut record, &uploads, &Passthrough, &options)
            .with_context(|| format!("ingesting patient {}", patient.patient_id))?;
        store.persist(&ws.store_path())?;
        ws.save_patient(&record)?;

        let matcher = Matcher { workers, ..Matcher::new(&gw, &store, &record) };
        let run = matcher
            .assess_ungated(&trial, a.strategy, as_of)
            .with_context(|| format!("matching patient {}", patient.patient_id))?;
        failures += run.failures.len();
        ws.save_assessments(&trial.trial_id, &record.patient_id, &run.assessments)?;
        ws.save_run(&run)?;
        predictions.extend(run.assessments);
    }

    let labels = n2c2::labels(&patients);
    let rows = join_rows(std::slice::from_ref(&trial), &predictions, &labels);
    let pairs: Vec<(Verdict, Verdict)> = rows.iter().map(|r| (r.label, r.prediction)).collect();
    let report = classification_report(&pairs, &[Verdict::Met, Verdict::Unmet]).context("building report")?;
    eprint!("{}", report.render_text());
    print_json(&json!({
        "patients": patients.len(),
        "labeled": labels.len(),
        "scored": rows.len(),
        "criterion_failures": failures,
        "report": report,
    }))
}
