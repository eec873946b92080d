//! Corpus profiling: page-level record-type and visual-element labels from
//! the classifier role, aggregated per page and per record.
//!
//! A record counts toward a category when at least one of its pages does.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::gateway::schema::{RecordType, RecordTypeResponse, VisualElement, VisualElementsResponse};
use crate::gateway::{Gateway, GatewayError, ModelRequest, ModelRole, StructuredOutput, UsageRecord};
use crate::par;
use crate::prompts;

#[derive(Debug, thiserror::Error)]
pub enum ProfileError {
    #[error("no pages to profile")]
    Empty,
}

/// One page image and the record (document) it belongs to.
#[derive(Debug, Clone)]
pub struct ProfilePage {
    pub record_id: String,
    pub page_id: String,
    pub image: Arc<Vec<u8>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub pages: usize,
    pub records: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProfileFailure {
    pub page_id: String,
    /// `record_type` or `visual_elements`.
    pub task: String,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusProfile {
    pub pages: usize,
    pub records: usize,
    pub record_types: BTreeMap<String, Tally>,
    pub visual_elements: BTreeMap<String, Tally>,
    /// Pages and records with at least one visual element.
    pub any_visual_element: Tally,
    pub failures: Vec<ProfileFailure>,
    pub usage: UsageRecord,
}

/// Picks `n` record ids in a seed-determined order. The same seed and input
/// set always yield the same sample, independent of input order.
pub fn sample_records(record_ids: &[String], n: usize, seed: u64) -> Vec<String> {
    let unique: BTreeSet<&String> = record_ids.iter().collect();
    let mut keyed: Vec<([u8; 32], &String)> = unique
        .into_iter()
        .map(|id| {
            let mut h = Sha256::new();
            h.update(seed.to_le_bytes());
            h.update(id.as_bytes());
            (h.finalize().into(), id)
        })
        .collect();
    keyed.sort();
    keyed.into_iter().take(n).map(|(_, id)| id.clone()).collect()
}

struct PageLabels {
    record_type: Result<(RecordType, UsageRecord), GatewayError>,
    elements: Result<(Vec<VisualElement>, UsageRecord), GatewayError>,
}

fn classify<T: StructuredOutput>(
    gateway: &Gateway,
    prompt: &str,
    image: &Arc<Vec<u8>>,
) -> Result<(T, UsageRecord), GatewayError> {
    let request = ModelRequest::new(ModelRole::Classifier, T::SCHEMA_ID, prompt).image(image.clone());
    gateway.complete::<T>(&request).map(|c| (c.value, c.usage))
}

pub fn profile_corpus(gateway: &Gateway, pages: &[ProfilePage], workers: usize) -> Result<CorpusProfile, ProfileError> {
    if pages.is_empty() {
        return Err(ProfileError::Empty);
    }
    let labels = par::map(pages, workers, |page| PageLabels {
        record_type: classify::<RecordTypeResponse>(gateway, prompts::RECORD_TYPE.text, &page.image)
            .map(|(r, u)| (r.record_type, u)),
        elements: classify::<VisualElementsResponse>(gateway, prompts::VISUAL_ELEMENTS.text, &page.image)
            .map(|(r, u)| (r.visual_elements, u)),
    });

    let mut profile = CorpusProfile { pages: pages.len(), ..Default::default() };
    let mut type_records: BTreeMap<String, BTreeSet<&str>> = BTreeMap::new();
    let mut element_records: BTreeMap<String, BTreeSet<&str>> = BTreeMap::new();
    let mut any_records: BTreeSet<&str> = BTreeSet::new();
    let records: BTreeSet<&str> = pages.iter().map(|p| p.record_id.as_str()).collect();
    profile.records = records.len();

    for (page, label) in pages.iter().zip(labels) {
        match label.record_type {
            Ok((record_type, usage)) => {
                profile.usage.add(&usage);
                let name = record_type.as_str().to_string();
                profile.record_types.entry(name.clone()).or_default().pages += 1;
                type_records.entry(name).or_default().insert(&page.record_id);
            }
            Err(e) => profile.failures.push(ProfileFailure {
                page_id: page.page_id.clone(),
                task: RecordTypeResponse::SCHEMA_ID.into(),
                error: e.to_string(),
            }),
        }
        match label.elements {
            Ok((elements, usage)) => {
                profile.usage.add(&usage);
                let distinct: BTreeSet<VisualElement> = elements.into_iter().collect();
                if !distinct.is_empty() {
                    profile.any_visual_element.pages += 1;
                    any_records.insert(&page.record_id);
                }
                for element in distinct {
                    let name = element.as_str().to_string();
                    profile.visual_elements.entry(name.clone()).or_default().pages += 1;
                    element_records.entry(name).or_default().insert(&page.record_id);
                }
            }
            Err(e) => profile.failures.push(ProfileFailure {
                page_id: page.page_id.clone(),
                task: VisualElementsResponse::SCHEMA_ID.into(),
                error: e.to_string(),
            }),
        }
    }
    for (name, ids) in type_records {
        profile.record_types.entry(name).or_default().records = ids.len();
    }
    for (name, ids) in element_records {
        profile.visual_elements.entry(name).or_default().records = ids.len();
    }
    profile.any_visual_element.records = any_records.len();
    Ok(profile)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampling_is_seeded_and_order_independent() {
        let ids: Vec<String> = (0..50).map(|i| format!("rec-{i}")).collect();
        let mut reversed = ids.clone();
        reversed.reverse();
        let a = sample_records(&ids, 10, 7);
        assert_eq!(a, sample_records(&reversed, 10, 7));
        assert_eq!(a.len(), 10);
        assert_ne!(a, sample_records(&ids, 10, 8));
        assert_eq!(sample_records(&ids, 100, 7).len(), 50);
    }
}
