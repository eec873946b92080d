//! Patient record ingestion: split uploads into page images, redact,
//! embed and store one vector per page.

pub mod font;
pub mod pdf;
pub mod redact;
pub mod text_render;

use std::sync::Arc;

use serde::Serialize;

use crate::gateway::usage::UsageRecord;
use crate::gateway::{Gateway, GatewayError};
use crate::ids::{derived_id, sha256_hex};
use crate::model::{MediaType, PatientRecord, QuarantinedPage, RecordPage, SourceDocument, MIN_PAGE_DPI};
use crate::par;
use crate::store::{StoreError, StoredVector, VectorStore};

pub use redact::{redact_page, redactor_for, RedactError, Redactor};
pub use text_render::{render_text_note, TextRenderError};

pub const DEFAULT_PDF_DPI: u32 = 150;
pub const DEFAULT_TEXT_DPI: u32 = 72;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IngestOptions {
    /// Rasterization resolution for PDF pages.
    pub pdf_dpi: u32,
    /// Rendering resolution for plain-text notes.
    pub text_dpi: u32,
    pub workers: usize,
}

impl Default for IngestOptions {
    fn default() -> Self {
        IngestOptions { pdf_dpi: DEFAULT_PDF_DPI, text_dpi: DEFAULT_TEXT_DPI, workers: par::default_workers() }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("no documents to ingest")]
    NoDocuments,
    #[error("document {document}: {source}")]
    Pdf {
        document: String,
        #[source]
        source: pdf::PdfError,
    },
    #[error("document {document}: corrupt image: {reason}")]
    CorruptImage { document: String, reason: String },
    #[error("document {document}: {source}")]
    Text {
        document: String,
        #[source]
        source: TextRenderError,
    },
    #[error("document {document}: text notes must be UTF-8")]
    NotUtf8 { document: String },
    #[error("document {document}: unsupported media type (expected .pdf, .png, .jpg or .txt)")]
    UnknownMediaType { document: String },
    #[error("DPI {0} is below the minimum of {MIN_PAGE_DPI}")]
    DpiTooLow(u32),
    #[error("every page of patient {patient_id} was quarantined")]
    AllQuarantined { patient_id: String, quarantined: Vec<QuarantinedPage> },
    #[error("embedding failed: {0}")]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// One uploaded file.
#[derive(Debug, Clone)]
pub struct UploadedDocument {
    pub filename: String,
    pub media_type: MediaType,
    pub bytes: Vec<u8>,
}

impl UploadedDocument {
    pub fn new(filename: impl Into<String>, bytes: Vec<u8>) -> Result<Self, IngestError> {
        let filename = filename.into();
        let media_type = MediaType::from_path(std::path::Path::new(&filename))
            .ok_or_else(|| IngestError::UnknownMediaType { document: filename.clone() })?;
        Ok(UploadedDocument { filename, media_type, bytes })
    }

    pub fn read(path: &std::path::Path) -> Result<Self, std::io::Error> {
        let bytes = std::fs::read(path)?;
        let filename =
            path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned());
        UploadedDocument::new(filename, bytes)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidInput, e.to_string()))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct IngestReport {
    pub patient_id: String,
    pub documents_added: usize,
    /// Documents whose bytes were already ingested for this patient.
    pub documents_skipped: usize,
    pub pages_stored: usize,
    pub quarantined: Vec<QuarantinedPage>,
    pub usage: UsageRecord,
}

pub fn document_id(patient_id: &str, content_hash: &str) -> String {
    derived_id("doc", &[patient_id.as_bytes(), content_hash.as_bytes()])
}

pub fn page_id(document_id: &str, page_number: u32) -> String {
    derived_id("pg", &[document_id.as_bytes(), &page_number.to_le_bytes()])
}

fn encode_png(img: &image::DynamicImage) -> Result<Vec<u8>, String> {
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png).map_err(|e| e.to_string())?;
    Ok(out.into_inner())
}

/// Splits one document into PNG pages numbered from 1.
pub fn split_document(
    doc: &SourceDocument,
    bytes: &[u8],
    options: &IngestOptions,
) -> Result<Vec<RecordPage>, IngestError> {
    let document = doc.filename.clone();
    let (images, dpi): (Vec<Vec<u8>>, u32) = match doc.media_type {
        MediaType::Pdf => {
            if options.pdf_dpi < MIN_PAGE_DPI {
                return Err(IngestError::DpiTooLow(options.pdf_dpi));
            }
            let pdf = pdf::PdfDocument::parse(bytes)
                .map_err(|source| IngestError::Pdf { document: document.clone(), source })?;
            let rendered = par::map(&(0..pdf.page_count()).collect::<Vec<_>>(), options.workers, |i| {
                let img = pdf
                    .render_page(*i, options.pdf_dpi)
                    .map_err(|source| IngestError::Pdf { document: document.clone(), source })?;
                encode_png(&image::DynamicImage::ImageRgb8(img))
                    .map_err(|reason| IngestError::CorruptImage { document: document.clone(), reason })
            });
            (rendered.into_iter().collect::<Result<_, _>>()?, options.pdf_dpi)
        }
        MediaType::Image => {
            let img = image::load_from_memory(bytes)
                .map_err(|e| IngestError::CorruptImage { document: document.clone(), reason: e.to_string() })?;
            let png = if bytes.starts_with(b"\x89PNG\r\n\x1a\n") {
                bytes.to_vec()
            } else {
                encode_png(&img).map_err(|reason| IngestError::CorruptImage { document: document.clone(), reason })?
            };
            // Scans carry no trustworthy resolution; record the PDF default.
            (vec![png], options.pdf_dpi.max(MIN_PAGE_DPI))
        }
        MediaType::PlainText => {
            let text = std::str::from_utf8(bytes).map_err(|_| IngestError::NotUtf8 { document: document.clone() })?;
            let pages = render_text_note(text, options.text_dpi)
                .map_err(|source| IngestError::Text { document: document.clone(), source })?;
            (pages, options.text_dpi)
        }
    };
    Ok(images
        .into_iter()
        .enumerate()
        .map(|(i, image_bytes)| {
            let page_number = i as u32 + 1;
            RecordPage {
                page_id: page_id(&doc.document_id, page_number),
                document_id: doc.document_id.clone(),
                page_number,
                image_bytes,
                dpi,
                redacted: false,
            }
        })
        .collect())
}

/// Adds `uploads` to `record`: splits, redacts and embeds every page, and
/// stores one vector per kept page. Documents already present (same bytes)
/// are skipped, so repeating an ingestion leaves record and store unchanged.
/// Pages that fail redaction or embedding are quarantined; the call fails
/// only if no page of the new documents survives. On failure neither
/// `record` nor `store` is modified.
pub fn ingest_patient(
    gateway: &Gateway,
    store: &VectorStore,
    record: &mut PatientRecord,
    uploads: &[UploadedDocument],
    redactor: &dyn Redactor,
    options: &IngestOptions,
) -> Result<IngestReport, IngestError> {
    if uploads.is_empty() {
        return Err(IngestError::NoDocuments);
    }
    let patient_id = record.patient_id.clone();
    let mut report = IngestReport { patient_id: patient_id.clone(), ..IngestReport::default() };

    let mut new_docs: Vec<(SourceDocument, &UploadedDocument)> = Vec::new();
    for upload in uploads {
        let content_hash = sha256_hex(&upload.bytes);
        let known = record.documents.iter().any(|d| d.content_hash == content_hash)
            || new_docs.iter().any(|(d, _)| d.content_hash == content_hash);
        if known {
            report.documents_skipped += 1;
            continue;
        }
        let doc = SourceDocument {
            document_id: document_id(&patient_id, &content_hash),
            patient_id: patient_id.clone(),
            filename: upload.filename.clone(),
            media_type: upload.media_type,
            page_count: 0,
            content_hash,
        };
        new_docs.push((doc, upload));
    }
    if new_docs.is_empty() {
        return Ok(report);
    }

    let split: Vec<Result<Vec<RecordPage>, IngestError>> =
        par::map(&new_docs, options.workers.min(new_docs.len()).max(1), |(doc, upload)| {
            split_document(doc, &upload.bytes, options)
        });
    let mut pages = Vec::new();
    for ((doc, _), result) in new_docs.iter_mut().zip(split) {
        let doc_pages = result?;
        doc.page_count = doc_pages.len() as u32;
        pages.extend(doc_pages);
    }

    let quarantine = |page: &RecordPage, reason: String| QuarantinedPage {
        patient_id: patient_id.clone(),
        document_id: page.document_id.clone(),
        page_number: page.page_number,
        reason,
    };
    let redacted = par::map(&pages, options.workers, |page| redact_page(page.clone(), redactor));
    let mut kept = Vec::new();
    for (page, result) in pages.iter().zip(redacted) {
        match result {
            Ok(p) => kept.push(p),
            Err(e) => report.quarantined.push(quarantine(page, format!("redaction: {e}"))),
        }
    }

    let mut stored = Vec::new();
    let mut kept_pages = Vec::new();
    if !kept.is_empty() {
        let images: Vec<Arc<Vec<u8>>> = kept.iter().map(|p| Arc::new(p.image_bytes.clone())).collect();
        let batch = gateway.embed_images(&images)?;
        report.usage = batch.usage;
        for (page, item) in kept.into_iter().zip(batch.items) {
            match item {
                Ok(vector) => {
                    stored.push(StoredVector {
                        page_id: page.page_id.clone(),
                        patient_id: patient_id.clone(),
                        vector,
                        content_hash: sha256_hex(&page.image_bytes),
                    });
                    kept_pages.push(page);
                }
                Err(e) => report.quarantined.push(quarantine(&page, format!("embedding: {e}"))),
            }
        }
    }
    if kept_pages.is_empty() {
        return Err(IngestError::AllQuarantined { patient_id, quarantined: report.quarantined });
    }

    report.pages_stored = store.upsert(stored)?;
    report.documents_added = new_docs.len();
    report.quarantined.sort_by(|a, b| (&a.document_id, a.page_number).cmp(&(&b.document_id, b.page_number)));
    record.redaction = redactor.policy();
    record.documents.extend(new_docs.into_iter().map(|(d, _)| d));
    record.pages.extend(kept_pages);
    record.quarantined.extend(report.quarantined.iter().cloned());
    Ok(report)
}
