//! Patient ingestion through the mock gateway into the vector store.

use std::sync::Arc;

use trialmatch_core::gateway::config::GatewayConfig;
use trialmatch_core::gateway::{Gateway, UsageLog};
use trialmatch_core::ingest::redact::{FnRedactor, Passthrough};
use trialmatch_core::ingest::{
    ingest_patient, render_text_note, IngestError, IngestOptions, UploadedDocument, DEFAULT_TEXT_DPI,
};
use trialmatch_core::model::{validate_patient_record, PatientRecord, RedactionPolicy};
use trialmatch_core::store::VectorStore;

fn gateway() -> Gateway {
    GatewayConfig::mock(11).build(None, Arc::new(UsageLog::in_memory())).unwrap()
}

/// A note of `pages` full pages, each line tagged with the page number.
fn note(tag: &str, pages: usize) -> String {
    (0..pages * 60).map(|i| format!("{tag} page {} line {}", i / 60 + 1, i % 60)).collect::<Vec<_>>().join("\n")
}

fn uploads() -> Vec<UploadedDocument> {
    vec![
        UploadedDocument::new("visit.txt", note("visit", 3).into_bytes()).unwrap(),
        UploadedDocument::new("labs.txt", note("labs", 2).into_bytes()).unwrap(),
    ]
}

fn options() -> IngestOptions {
    IngestOptions { workers: 3, ..IngestOptions::default() }
}

#[test]
fn two_documents_five_pages_five_vectors() {
    let gw = gateway();
    let store = VectorStore::new();
    let mut record = PatientRecord::new("P1");
    let report = ingest_patient(&gw, &store, &mut record, &uploads(), &Passthrough, &options()).unwrap();
    assert_eq!(report.documents_added, 2);
    assert_eq!(report.pages_stored, 5);
    assert_eq!(store.len(), 5);
    assert_eq!(record.pages.len(), 5);
    assert!(report.quarantined.is_empty());
    assert!(validate_patient_record(&record).is_empty());
    assert!(record.pages.iter().all(|p| p.dpi == DEFAULT_TEXT_DPI && !p.redacted));
    // Document order, then page order.
    let numbers: Vec<u32> = record.pages.iter().map(|p| p.page_number).collect();
    assert_eq!(numbers, vec![1, 2, 3, 1, 2]);
}

#[test]
fn reingesting_the_same_files_changes_nothing() {
    let gw = gateway();
    let store = VectorStore::new();
    let mut record = PatientRecord::new("P1");
    ingest_patient(&gw, &store, &mut record, &uploads(), &Passthrough, &options()).unwrap();
    let before_record = record.clone();
    let before_store = store.snapshot();
    let again = ingest_patient(&gw, &store, &mut record, &uploads(), &Passthrough, &options()).unwrap();
    assert_eq!(again.documents_skipped, 2);
    assert_eq!(again.documents_added, 0);
    assert_eq!(again.pages_stored, 0);
    assert_eq!(record, before_record);
    assert_eq!(store.snapshot(), before_store);
}

#[test]
fn failed_redaction_quarantines_one_page() {
    let labs = note("labs", 2);
    let poisoned = render_text_note(&labs, DEFAULT_TEXT_DPI).unwrap().remove(1);
    let redactor =
        FnRedactor(
            move |png: &[u8]| {
                if png == poisoned.as_slice() {
                    Err("plugin crashed".to_string())
                } else {
                    Ok(png.to_vec())
                }
            },
        );
    let gw = gateway();
    let store = VectorStore::new();
    let mut record = PatientRecord::new("P1");
    let report = ingest_patient(&gw, &store, &mut record, &uploads(), &redactor, &options()).unwrap();
    assert_eq!(store.len(), 4);
    assert_eq!(report.quarantined.len(), 1);
    let q = &report.quarantined[0];
    assert_eq!(q.page_number, 2);
    assert!(q.reason.starts_with("redaction:"), "{}", q.reason);
    let labs_doc = record.documents.iter().find(|d| d.filename == "labs.txt").unwrap();
    assert_eq!(q.document_id, labs_doc.document_id);
    assert_eq!(record.redaction, RedactionPolicy::Plugin { target: "in-process".into() });
    assert!(record.pages.iter().all(|p| p.redacted));
    assert!(validate_patient_record(&record).is_empty());
}

#[test]
fn every_page_quarantined_leaves_state_untouched() {
    let redactor = FnRedactor(|_: &[u8]| Err("down".to_string()));
    let gw = gateway();
    let store = VectorStore::new();
    let mut record = PatientRecord::new("P1");
    let err = ingest_patient(&gw, &store, &mut record, &uploads(), &redactor, &options()).unwrap_err();
    match err {
        IngestError::AllQuarantined { quarantined, .. } => assert_eq!(quarantined.len(), 5),
        other => panic!("unexpected {other}"),
    }
    assert!(store.is_empty());
    assert_eq!(record, PatientRecord::new("P1"));
}

#[test]
fn patients_are_namespaced_in_the_store() {
    let gw = gateway();
    let store = VectorStore::new();
    let mut a = PatientRecord::new("A");
    let mut b = PatientRecord::new("B");
    ingest_patient(&gw, &store, &mut a, &uploads(), &Passthrough, &options()).unwrap();
    ingest_patient(&gw, &store, &mut b, &uploads()[..1], &Passthrough, &options()).unwrap();
    assert_eq!(store.page_ids("A").len(), 5);
    assert_eq!(store.page_ids("B").len(), 3);
    assert!(a.pages.iter().all(|p| !b.pages.iter().any(|q| q.page_id == p.page_id)));
}
