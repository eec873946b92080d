//! HTTP API of the review service against a fixture data directory.

use axum::body::Body;
use axum::http::{Request, StatusCode};
use chrono::NaiveDate;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;
use trialmatch_core::eval::ground_truth::Provenance;
use trialmatch_core::model::{
    CriterionAssessment, CriterionKind, EligibilityCriterion, MediaType, PatientRecord, RecordPage, RedactionPolicy,
    RetrievalStrategy, SourceDocument, Trial, TrialPhase, Verdict,
};
use trialmatch_core::workspace::Workspace;
use trialmatch_review::{router, AppState, ExportBundle, PairSummary};

const TOKEN: &str = "s3cret";

fn trial(id: &str, criteria: usize) -> Trial {
    Trial {
        trial_id: id.into(),
        title: format!("Trial {id}"),
        raw_criteria_text: String::new(),
        phase: TrialPhase::II,
        therapeutic_area: "Endocrinology".into(),
        criteria: (1..=criteria)
            .map(|i| EligibilityCriterion::new(format!("I{i:02}"), CriterionKind::Inclusion, format!("criterion {i}")))
            .collect(),
        relevance_criterion: Some("Diabetes".into()),
        site_type: None,
        prepared: false,
    }
}

fn patient(id: &str, pages: u32, redaction: RedactionPolicy, redacted: bool) -> PatientRecord {
    let doc = format!("doc-{id}");
    PatientRecord {
        patient_id: id.into(),
        documents: vec![SourceDocument {
            document_id: doc.clone(),
            patient_id: id.into(),
            filename: "chart.pdf".into(),
            media_type: MediaType::Pdf,
            page_count: pages,
            content_hash: "h".into(),
        }],
        pages: (1..=pages)
            .map(|n| RecordPage {
                page_id: format!("pg-{id}-{n}"),
                document_id: doc.clone(),
                page_number: n,
                image_bytes: format!("png {id} {n}").into_bytes(),
                dpi: 150,
                redacted,
            })
            .collect(),
        quarantined: Vec::new(),
        redaction,
    }
}

fn assessments(patient: &str, trial: &Trial, pages_each: u32) -> Vec<CriterionAssessment> {
    trial
        .criteria
        .iter()
        .enumerate()
        .map(|(i, c)| CriterionAssessment {
            assessment_id: format!("asm-{patient}-{}", c.criterion_id),
            patient_id: patient.into(),
            trial_id: trial.trial_id.clone(),
            criterion_id: c.criterion_id.clone(),
            verdict: if i % 2 == 0 { Verdict::Met } else { Verdict::Unmet },
            rationale: format!("evidence for {}", c.criterion_id),
            source_page_ids: (1..=pages_each).map(|n| format!("pg-{patient}-{n}")).collect(),
            as_of_date: NaiveDate::from_ymd_opt(2024, 1, 1).unwrap(),
            usage: Default::default(),
            strategy: RetrievalStrategy::default(),
        })
        .collect()
}

/// P1 x T13 (13 criteria, 2 pages each), P2 x T5 (5 criteria), and P3
/// ingested with a redaction plugin whose pages were never redacted.
fn fixture() -> (tempfile::TempDir, Workspace) {
    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::new(dir.path());
    let t13 = trial("T13", 13);
    let t5 = trial("T5", 5);
    ws.save_trial(&t13).unwrap();
    ws.save_trial(&t5).unwrap();
    ws.save_patient(&patient("P1", 3, RedactionPolicy::Passthrough, false)).unwrap();
    ws.save_patient(&patient("P2", 2, RedactionPolicy::Passthrough, false)).unwrap();
    ws.save_patient(&patient("P3", 1, RedactionPolicy::Plugin { target: "redact-cli".into() }, false)).unwrap();
    ws.save_assessments("T13", "P1", &assessments("P1", &t13, 2)).unwrap();
    ws.save_assessments("T5", "P2", &assessments("P2", &t5, 1)).unwrap();
    (dir, ws)
}

struct Client {
    app: axum::Router,
}

impl Client {
    fn new(ws: &Workspace) -> Self {
        Client { app: router(AppState::load(ws.clone(), TOKEN).unwrap()) }
    }

    async fn send(&self, request: Request<Body>) -> (StatusCode, Vec<u8>) {
        let response = self.app.clone().oneshot(request).await.unwrap();
        let status = response.status();
        (status, response.into_body().collect().await.unwrap().to_bytes().to_vec())
    }

    async fn get(&self, uri: &str) -> (StatusCode, Vec<u8>) {
        self.send(Request::get(uri).header("authorization", format!("Bearer {TOKEN}")).body(Body::empty()).unwrap())
            .await
    }

    async fn get_json(&self, uri: &str) -> (StatusCode, Value) {
        let (status, body) = self.get(uri).await;
        (status, serde_json::from_slice(&body).unwrap())
    }

    async fn post(&self, uri: &str, actor: Option<&str>, body: Value) -> (StatusCode, Value) {
        let mut builder = Request::post(uri)
            .header("authorization", format!("Bearer {TOKEN}"))
            .header("content-type", "application/json");
        if let Some(actor) = actor {
            builder = builder.header("x-actor-id", actor);
        }
        let (status, bytes) = self.send(builder.body(Body::from(body.to_string())).unwrap()).await;
        (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
    }

    async fn pairs(&self) -> Vec<PairSummary> {
        let (_, body) = self.get("/pairs").await;
        serde_json::from_slice(&body).unwrap()
    }

    async fn export(&self) -> (Vec<u8>, ExportBundle) {
        let (status, body) = self.get("/export").await;
        assert_eq!(status, StatusCode::OK);
        let bundle = serde_json::from_slice(&body).unwrap();
        (body, bundle)
    }
}

fn review(criterion: &str, verdict: &str, patient: &str, trial: &str) -> Value {
    json!({ "patient_id": patient, "trial_id": trial, "criterion_id": criterion, "human_verdict": verdict })
}

#[tokio::test]
async fn requests_without_the_token_are_refused() {
    let (_dir, ws) = fixture();
    let client = Client::new(&ws);
    let (status, _) = client.send(Request::get("/pairs").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::UNAUTHORIZED);
    let wrong = Request::get("/pairs").header("authorization", "Bearer nope").body(Body::empty()).unwrap();
    assert_eq!(client.send(wrong).await.0, StatusCode::UNAUTHORIZED);
}

#[tokio::test]
async fn empty_data_directory_lists_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let client = Client::new(&Workspace::new(dir.path()));
    assert!(client.pairs().await.is_empty());
    let (_, bundle) = client.export().await;
    assert!(bundle.labels.is_empty() && bundle.assessments.is_empty() && bundle.feedback_events.is_empty());
    assert_eq!(bundle.generated_at, None);
}

#[tokio::test]
async fn pairs_report_pending_reviews() {
    let (_dir, ws) = fixture();
    let client = Client::new(&ws);
    let pairs = client.pairs().await;
    assert_eq!(pairs.len(), 2);
    for c in ["I01", "I02"] {
        let (status, _) = client.post("/feedback", Some("crc-1"), review(c, "Met", "P2", "T5")).await;
        assert_eq!(status, StatusCode::CREATED);
    }
    let p2 = client.pairs().await.into_iter().find(|p| p.patient_id == "P2").unwrap();
    assert_eq!((p2.assessments, p2.reviewed, p2.pending), (5, 2, 3));
    assert_eq!(p2.classification, None);
}

#[tokio::test]
async fn assessments_carry_rationales_and_resolvable_pages() {
    let (_dir, ws) = fixture();
    let client = Client::new(&ws);
    let (status, body) = client.get_json("/pairs/P1/T13/assessments").await;
    assert_eq!(status, StatusCode::OK);
    let items = body["assessments"].as_array().unwrap();
    assert_eq!(items.len(), 13);
    for item in items {
        assert!(!item["rationale"].as_str().unwrap().is_empty());
        let pages = item["pages"].as_array().unwrap();
        assert_eq!(pages.len(), 2);
        for page in pages {
            let (status, bytes) = client.get(page["url"].as_str().unwrap()).await;
            assert_eq!(status, StatusCode::OK);
            assert!(bytes.starts_with(b"png P1"));
        }
    }
    assert_eq!(client.get("/pairs/P1/NOPE/assessments").await.0, StatusCode::NOT_FOUND);
    assert_eq!(client.get("/pages/missing.png").await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn unredacted_pages_of_a_redacted_record_are_withheld() {
    let (_dir, ws) = fixture();
    let client = Client::new(&ws);
    assert_eq!(client.get("/pages/pg-P3-1.png").await.0, StatusCode::FORBIDDEN);
}

#[tokio::test]
async fn feedback_is_validated_stamped_and_deduplicated() {
    let (_dir, ws) = fixture();
    let client = Client::new(&ws);
    let mut body = review("I03", "Unmet", "P1", "T13");
    body["event_id"] = json!("evt-1");
    let (status, event) = client.post("/feedback", Some("crc-7"), body.clone()).await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!(event["actor_id"], "crc-7");
    assert!(event["timestamp"].is_string());
    let (status, again) = client.post("/feedback", Some("crc-7"), body).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(again, event);
    assert_eq!(ws.feedback().unwrap().len(), 1);

    let (status, err) = client.post("/feedback", Some("crc-7"), review("I99", "Met", "P1", "T13")).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(err["error"].as_str().unwrap().contains("I99"));
    let (status, _) = client.post("/feedback", None, review("I01", "Met", "P1", "T13")).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = client.post("/feedback", Some("crc-7"), review("I01", "Met", "P9", "T13")).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(ws.feedback().unwrap().len(), 1);
}

#[tokio::test]
async fn classification_is_reflected_in_pairs() {
    let (_dir, ws) = fixture();
    let client = Client::new(&ws);
    let body = json!({ "patient_id": "P1", "trial_id": "T13", "label": "ToScreen" });
    assert_eq!(client.post("/classification", Some("crc-1"), body).await.0, StatusCode::CREATED);
    let p1 = client.pairs().await.into_iter().find(|p| p.patient_id == "P1").unwrap();
    assert_eq!(p1.classification, Some(trialmatch_core::model::PatientLabel::ToScreen));
}

#[tokio::test]
async fn export_of_direct_reviews() {
    let (_dir, ws) = fixture();
    let client = Client::new(&ws);
    for (c, v) in [("I01", "Unmet"), ("I02", "Met"), ("I03", "Unknown")] {
        client.post("/feedback", Some("crc-1"), review(c, v, "P2", "T5")).await;
    }
    let (_, bundle) = client.export().await;
    assert_eq!(bundle.labels.len(), 3);
    assert!(bundle.labels.iter().all(|l| l.provenance == Provenance::DirectCriterionReview));
    assert_eq!(bundle.feedback_events.len(), 3);
    assert_eq!(bundle.generated_at, Some(bundle.feedback_events[2].timestamp));
}

#[tokio::test]
async fn export_of_a_to_screen_classification_confirms_met_inclusions() {
    let (_dir, ws) = fixture();
    let client = Client::new(&ws);
    let body = json!({ "patient_id": "P1", "trial_id": "T13", "label": "ToScreen" });
    client.post("/classification", Some("crc-1"), body).await;
    let (_, bundle) = client.export().await;
    // Every even-indexed criterion of P1 was assessed Met; all are inclusion.
    let expected: Vec<String> = (1..=13).filter(|i| (i - 1) % 2 == 0).map(|i| format!("I{i:02}")).collect();
    let got: Vec<String> = bundle.labels.iter().map(|l| l.criterion_id.clone()).collect();
    assert_eq!(got, expected);
    assert!(bundle
        .labels
        .iter()
        .all(|l| l.provenance == Provenance::InferredFromPatientLabel && l.label == Verdict::Met));
}

#[tokio::test]
async fn export_is_deterministic_and_survives_restart() {
    let (_dir, ws) = fixture();
    let client = Client::new(&ws);
    client.post("/feedback", Some("crc-1"), review("I01", "Unmet", "P1", "T13")).await;
    client
        .post("/classification", Some("crc-1"), json!({ "patient_id": "P2", "trial_id": "T5", "label": "NotEligible" }))
        .await;
    let (first, _) = client.export().await;
    let (second, _) = client.export().await;
    assert_eq!(first, second);
    let restarted = Client::new(&ws);
    let (third, _) = restarted.export().await;
    assert_eq!(first, third);
}
