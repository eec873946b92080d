//! Subcommand implementations.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::Context;
use serde::Serialize;
use serde_json::json;
use trialmatch_core::eval::ground_truth::{infer_ground_truth, GroundTruthLabel};
use trialmatch_core::eval::profile::{profile_corpus, sample_records, ProfilePage};
use trialmatch_core::eval::report::{classification_report, group_accuracy, render_group_accuracy, EvalRow, Subset};
use trialmatch_core::eval::review_time::review_time_stats;
use trialmatch_core::eval::{ablation, join_rows};
use trialmatch_core::gateway::config::{ConfigError, GatewayConfig, Mode};
use trialmatch_core::gateway::{usage_totals, Gateway, ModelRole, UsageFilter, UsageLog, UsageRecord};
use trialmatch_core::ingest::redact::Passthrough;
use trialmatch_core::ingest::{ingest_patient, redactor_for, IngestOptions, Redactor, UploadedDocument};
use trialmatch_core::matching::Matcher;
use trialmatch_core::model::{
    validate_trial, CriterionAssessment, FeedbackEvent, PatientRecord, RedactionPolicy, RetrievalStrategy, Trial,
    Verdict,
};
use trialmatch_core::par;
use trialmatch_core::prep::prepare_trial;
use trialmatch_core::record;
use trialmatch_core::store::VectorStore;
use trialmatch_core::workspace::{check_id, Workspace};

use crate::{
    AblationArgs, CliError, CliResult, DataArgs, Format, GatewayArgs, GroundTruthArgs, GroupBy, IngestArgs,
    MatchRunArgs, ProfileArgs, ReportArgs, ReviewTimesArgs, ServeArgs, TrialPrepArgs, UsageArgs,
};

/// Writes to standard output. A closed pipe (`| head`) ends output quietly.
pub fn emit(text: &str) -> CliResult {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|()| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => {
            Err(anyhow::Error::new(e).context("writing output").into())
        }
        _ => Ok(()),
    }
}

pub fn print_json<T: Serialize>(value: &T) -> CliResult {
    let mut text = serde_json::to_string_pretty(value).context("serializing output")?;
    text.push('\n');
    emit(&text)
}

fn usage_error(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

pub fn workers(args: &GatewayArgs) -> usize {
    args.workers.unwrap_or_else(par::default_workers).max(1)
}

/// Loads the gateway configuration. A missing or invalid configuration is
/// a usage error.
pub fn load_config(args: &GatewayArgs) -> Result<GatewayConfig, CliError> {
    if !args.config.is_file() {
        return Err(CliError::Usage(format!("config file {} not found", args.config.display())));
    }
    GatewayConfig::load(&args.config).map_err(usage_error)
}

pub fn gateway(args: &GatewayArgs, usage_path: PathBuf) -> Result<(Gateway, GatewayConfig), CliError> {
    let config = load_config(args)?;
    let gateway = config.build(args.seed, Arc::new(UsageLog::with_file(usage_path))).map_err(|e| match e {
        ConfigError::Io { .. } => CliError::Runtime(e.into()),
        other => usage_error(other),
    })?;
    Ok((gateway, config))
}

fn checked_id(id: &str) -> Result<(), CliError> {
    check_id(id).map_err(usage_error)
}

pub fn trial_prep(a: TrialPrepArgs) -> CliResult {
    let ws = Workspace::new(&a.data.data);
    let (gw, _) = gateway(&a.gateway, ws.usage_path())?;
    let mut trial: Trial = match (&a.input, &a.trial) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing trial {}", path.display()))?
        }
        (None, Some(id)) => {
            checked_id(id)?;
            ws.load_trial(id)?
        }
        (None, None) => return Err(CliError::Usage("either --input or --trial is required".into())),
    };
    checked_id(&trial.trial_id)?;
    let result = prepare_trial(&gw, &mut trial, workers(&a.gateway));
    // Partial progress is kept so that a rerun resumes.
    ws.save_trial(&trial)?;
    let summary = result.with_context(|| format!("preparing trial {}", trial.trial_id))?;
    let violations = validate_trial(&trial);
    if !violations.is_empty() {
        let list: Vec<String> = violations.iter().map(ToString::to_string).collect();
        return Err(
            anyhow::anyhow!("trial {} is invalid after preparation: {}", trial.trial_id, list.join("; ")).into()
        );
    }
    print_json(&json!({
        "trial_id": trial.trial_id,
        "criteria": trial.criteria.len(),
        "prepared": trial.prepared,
        "split": summary.split,
        "relevance_generated": summary.relevance_generated,
        "guidelines_generated": summary.guidelines_generated,
        "facets_classified": summary.facets_classified,
        "usage": summary.usage,
    }))
}

pub fn patient_ingest(a: IngestArgs) -> CliResult {
    checked_id(&a.patient)?;
    let ws = Workspace::new(&a.data.data);
    let (gw, _) = gateway(&a.gateway, ws.usage_path())?;
    let uploads = a
        .files
        .iter()
        .map(|path| {
            UploadedDocument::read(path).map_err(|e| match e.kind() {
                std::io::ErrorKind::InvalidInput => CliError::Usage(format!("{}: {e}", path.display())),
                _ => CliError::Runtime(anyhow::Error::new(e).context(format!("reading {}", path.display()))),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let store = VectorStore::open_or_empty(&ws.store_path())?;
    let mut record = ws.load_patient_or_new(&a.patient)?;
    let redactor: Box<dyn Redactor> = match &a.redactor {
        Some(target) => redactor_for(&RedactionPolicy::Plugin { target: target.clone() }),
        None => Box::new(Passthrough),
    };
    let options = IngestOptions { pdf_dpi: a.pdf_dpi, text_dpi: a.text_dpi, workers: workers(&a.gateway) };
    let report = ingest_patient(&gw, &store, &mut record, &uploads, redactor.as_ref(), &options)?;
    store.persist(&ws.store_path())?;
    ws.save_patient(&record)?;
    print_json(&report)
}

/// Inputs and settings of one `match run`, written next to its outputs.
#[derive(Serialize)]
struct RunManifest<'a> {
    config: &'a Path,
    mode: Mode,
    seed: Option<u64>,
    trial_id: &'a str,
    patients: Vec<&'a str>,
    strategy: RetrievalStrategy,
    as_of_date: chrono::NaiveDate,
    data: &'a Path,
    out: &'a Path,
}

#[derive(Serialize)]
struct PairOutcome {
    patient_id: String,
    relevant: Option<bool>,
    assessments: usize,
    failed_criteria: Vec<String>,
    verdicts: BTreeMap<String, usize>,
    average_images_used: Option<f64>,
    usage: UsageRecord,
    error: Option<String>,
}

pub fn match_run(a: MatchRunArgs) -> CliResult {
    checked_id(&a.trial)?;
    for p in &a.patient {
        checked_id(p)?;
    }
    let ws = Workspace::new(&a.data.data);
    let out_root = a.out.clone().unwrap_or_else(|| a.data.data.clone());
    let out = Workspace::new(&out_root);
    let (gw, config) = gateway(&a.gateway, out.usage_path())?;
    let trial = ws.load_trial(&a.trial)?;
    if trial.relevance_criterion.is_none() {
        return Err(
            anyhow::anyhow!("trial {} has no relevance criterion; run `trial prep` first", trial.trial_id).into()
        );
    }
    let patients: Vec<PatientRecord> = if a.patient.is_empty() {
        ws.patients()?
    } else {
        a.patient.iter().map(|p| ws.load_patient(p)).collect::<Result<_, _>>()?
    };
    let store = VectorStore::open_or_empty(&ws.store_path())?;
    let workers = workers(&a.gateway);

    let mut outcomes = Vec::new();
    let mut failed = 0;
    for record in &patients {
        let matcher = Matcher { workers, ..Matcher::new(&gw, &store, record) };
        let outcome = match matcher.assess_patient_trial(&trial, a.strategy, a.as_of) {
            Ok(run) => {
                out.save_assessments(&trial.trial_id, &record.patient_id, &run.assessments)?;
                out.save_run(&run)?;
                let mut usage = run.relevance.usage;
                let mut verdicts = BTreeMap::new();
                for assessment in &run.assessments {
                    usage.add(&assessment.usage);
                    *verdicts.entry(assessment.verdict.as_str().to_string()).or_insert(0) += 1;
                }
                PairOutcome {
                    patient_id: record.patient_id.clone(),
                    relevant: Some(run.relevance.relevant),
                    assessments: run.assessments.len(),
                    failed_criteria: run.failures.iter().map(|f| f.criterion_id.clone()).collect(),
                    verdicts,
                    average_images_used: run.average_images_used(),
                    usage,
                    error: None,
                }
            }
            Err(e) => {
                failed += 1;
                tracing::error!(patient = %record.patient_id, error = %e, "match run failed");
                PairOutcome {
                    patient_id: record.patient_id.clone(),
                    relevant: None,
                    assessments: 0,
                    failed_criteria: Vec::new(),
                    verdicts: BTreeMap::new(),
                    average_images_used: None,
                    usage: UsageRecord::default(),
                    error: Some(e.to_string()),
                }
            }
        };
        outcomes.push(outcome);
    }

    let manifest = RunManifest {
        config: &a.gateway.config,
        mode: config.mode,
        seed: a.gateway.seed.or((config.mode == Mode::Mock).then_some(config.mock.seed)),
        trial_id: &trial.trial_id,
        patients: patients.iter().map(|p| p.patient_id.as_str()).collect(),
        strategy: a.strategy,
        as_of_date: a.as_of,
        data: &a.data.data,
        out: &out_root,
    };
    let manifest_path = out_root.join("manifest.json");
    record::write_atomic(&manifest_path, serde_json::to_string_pretty(&manifest).context("manifest")?.as_bytes())?;
    print_json(&json!({ "manifest": manifest, "pairs": outcomes }))?;
    if failed > 0 {
        return Err(anyhow::anyhow!("{failed} of {} patient(s) could not be matched", patients.len()).into());
    }
    Ok(())
}

fn parse_verdict(s: &str) -> Result<Verdict, CliError> {
    Verdict::ALL
        .into_iter()
        .find(|v| v.as_str().eq_ignore_ascii_case(s.trim()))
        .ok_or_else(|| CliError::Usage(format!("unknown class `{s}`: expected met, unmet or unknown")))
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    Ok(record::read_jsonl(path).with_context(|| format!("reading {}", path.display()))?)
}

fn require_data(data: &Option<PathBuf>, what: &str) -> Result<Workspace, CliError> {
    data.as_ref()
        .map(Workspace::new)
        .ok_or_else(|| CliError::Usage(format!("{what} requires --data when no file is given")))
}

fn labels_or_inferred(
    labels: &Option<PathBuf>,
    ws: Option<&Workspace>,
    trials: &[Trial],
    assessments: &[CriterionAssessment],
) -> Result<Vec<GroundTruthLabel>, CliError> {
    match (labels, ws) {
        (Some(path), _) => read_jsonl(path),
        (None, Some(ws)) => Ok(infer_ground_truth(trials, assessments, &ws.feedback()?).labels),
        (None, None) => Err(CliError::Usage("--labels or --data is required".into())),
    }
}

pub fn eval_report(a: ReportArgs) -> CliResult {
    let classes: Vec<Verdict> = a.classes.iter().map(|c| parse_verdict(c)).collect::<Result<_, _>>()?;
    let subset: Option<Subset> = a.subset.as_deref().map(str::parse).transpose().map_err(CliError::Usage)?;
    let ws = a.data.as_ref().map(Workspace::new);
    let trials = match &ws {
        Some(ws) => ws.trials()?,
        None => Vec::new(),
    };
    let predictions: Vec<CriterionAssessment> = match &a.predictions {
        Some(path) => read_jsonl(path)?,
        None => require_data(&a.data, "eval report")?.assessments()?,
    };
    let labels = labels_or_inferred(&a.labels, ws.as_ref(), &trials, &predictions)?;
    if subset.is_some() && trials.is_empty() {
        return Err(CliError::Usage("--subset needs criterion facets; pass --data".into()));
    }

    let rows: Vec<EvalRow> =
        join_rows(&trials, &predictions, &labels).into_iter().filter(|r| subset.is_none_or(|s| s.matches(r))).collect();
    let (scored, dropped): (Vec<EvalRow>, Vec<EvalRow>) = rows.into_iter().partition(|r| classes.contains(&r.label));
    if !dropped.is_empty() {
        eprintln!("note: {} labeled row(s) with a label outside the reported classes were left out", dropped.len());
    }
    let pairs: Vec<(Verdict, Verdict)> = scored.iter().map(|r| (r.label, r.prediction)).collect();
    let report = classification_report(&pairs, &classes).context("building report")?;
    let groups = a.group_by.map(|g| {
        let groups = group_accuracy(&scored, |r| match g {
            GroupBy::Kind => r.kind.map(|k| k.to_string()),
            GroupBy::Domain => r.domain.map(|d| d.to_string()),
            GroupBy::DataFormat => r.data_format.map(|f| format!("{f:?}")),
            GroupBy::Temporal => r.temporal_constraint.map(|t| format!("{t:?}")),
        });
        (g, groups)
    });
    match a.format {
        Format::Text => {
            emit(&report.render_text())?;
            if let Some((g, groups)) = &groups {
                let heading = match g {
                    GroupBy::Kind => "kind",
                    GroupBy::Domain => "domain",
                    GroupBy::DataFormat => "data format",
                    GroupBy::Temporal => "temporal",
                };
                emit(&format!("\n{}", render_group_accuracy(groups, heading)))?;
            }
        }
        Format::Csv => emit(&report.render_csv())?,
        Format::Json => print_json(&json!({ "report": report, "groups": groups.map(|(_, g)| g) }))?,
    }
    Ok(())
}

pub fn eval_ablation(a: AblationArgs) -> CliResult {
    let ws = Workspace::new(&a.data.data);
    let runs = ws.runs()?;
    if runs.is_empty() {
        return Err(anyhow::anyhow!("no match runs under {}", ws.root().display()).into());
    }
    let assessments: Vec<CriterionAssessment> = runs.iter().flat_map(|r| r.assessments.iter().cloned()).collect();
    let labels = labels_or_inferred(&a.labels, Some(&ws), &ws.trials()?, &assessments)?;
    let rows = ablation::strategy_ablation(&runs, &labels);
    match a.format {
        Format::Json => print_json(&rows),
        Format::Csv | Format::Text => emit(&ablation::render_csv(&rows)),
    }
}

pub fn eval_review_times(a: ReviewTimesArgs) -> CliResult {
    let events: Vec<FeedbackEvent> = match &a.feedback {
        Some(path) => read_jsonl(path)?,
        None => require_data(&a.data, "eval review-times")?.feedback()?,
    };
    print_json(&review_time_stats(&events))
}

pub fn eval_profile(a: ProfileArgs) -> CliResult {
    if a.sample == 0 {
        return Err(CliError::Usage("--sample must be at least 1".into()));
    }
    let ws = Workspace::new(&a.data.data);
    let (gw, config) = gateway(&a.gateway, ws.usage_path())?;
    let patients = ws.patients()?;
    let seed = a.sample_seed.or(a.gateway.seed).unwrap_or(config.mock.seed);
    let record_ids: Vec<String> =
        patients.iter().flat_map(|p| p.documents.iter().map(|d| d.document_id.clone())).collect();
    let sampled = sample_records(&record_ids, a.sample, seed);
    let pages: Vec<ProfilePage> = patients
        .iter()
        .flat_map(|p| &p.pages)
        .filter(|pg| sampled.contains(&pg.document_id))
        .map(|pg| ProfilePage {
            record_id: pg.document_id.clone(),
            page_id: pg.page_id.clone(),
            image: Arc::new(pg.image_bytes.clone()),
        })
        .collect();
    let profile = profile_corpus(&gw, &pages, workers(&a.gateway))?;
    print_json(&json!({ "seed": seed, "records_available": record_ids.len(), "profile": profile }))
}

pub fn eval_ground_truth(a: GroundTruthArgs) -> CliResult {
    let ws = Workspace::new(&a.data.data);
    let truth = infer_ground_truth(&ws.trials()?, &ws.assessments()?, &ws.feedback()?);
    for conflict in &truth.conflicts {
        eprintln!(
            "note: conflicting reviews for {}/{}/{}: {:?}; latest kept",
            conflict.patient_id, conflict.trial_id, conflict.criterion_id, conflict.verdicts
        );
    }
    emit(&record::to_jsonl(&truth.labels).context("serializing labels")?)
}

pub fn eval_usage(a: UsageArgs) -> CliResult {
    let ws = Workspace::new(&a.data.data);
    let filter = match &a.role {
        Some(name) => UsageFilter::role(
            ModelRole::ALL
                .into_iter()
                .find(|r| r.as_str() == name)
                .ok_or_else(|| CliError::Usage(format!("unknown role `{name}`")))?,
        ),
        None => UsageFilter::default(),
    };
    let entries = UsageLog::load(&ws.usage_path()).context("reading usage log")?;
    let summary = usage_totals(&entries, &filter);
    print_json(&json!({ "summary": summary, "total_cost": summary.total.cost.units() }))
}

pub fn serve(a: ServeArgs) -> CliResult {
    let app = trialmatch_review::AppState::load(Workspace::new(&a.data.data), a.token.as_str())?;
    let runtime = tokio::runtime::Runtime::new().context("starting runtime")?;
    runtime.block_on(trialmatch_review::serve(a.addr, app)).context("review service")?;
    Ok(())
}

pub fn store_stats(a: DataArgs) -> CliResult {
    let ws = Workspace::new(&a.data);
    print_json(&VectorStore::open_or_empty(&ws.store_path())?.stats())
}
