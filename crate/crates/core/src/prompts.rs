//! Prompt templates shipped as text assets.
//!
//! Placeholders are written `{{name}}` or `{name}` with `name` made of
//! lowercase letters, digits and underscores. Rendering is a single pass:
//! substituted values are never rescanned.

use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TemplateError {
    #[error("template {template}: placeholder `{placeholder}` is not bound")]
    Unbound { template: String, placeholder: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub template_id: &'static str,
    pub version: u32,
    pub text: &'static str,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Segment<'a> {
    Literal(&'a str),
    Placeholder(&'a str),
}

fn is_name_byte(b: u8) -> bool {
    b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_'
}

/// Length of a placeholder name starting at `bytes[0]`, if it is followed by
/// `closing`.
fn name_then(bytes: &[u8], closing: &[u8]) -> Option<usize> {
    let n = bytes.iter().take_while(|b| is_name_byte(**b)).count();
    (n > 0 && bytes[n..].starts_with(closing)).then_some(n)
}

fn segments(text: &str) -> Vec<Segment<'_>> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut literal_start = 0;
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'{' {
            let found = if bytes[i..].starts_with(b"{{") {
                name_then(&bytes[i + 2..], b"}}").map(|n| (i + 2, n, 4))
            } else {
                None
            }
            .or_else(|| name_then(&bytes[i + 1..], b"}").map(|n| (i + 1, n, 2)));
            if let Some((start, n, braces)) = found {
                if literal_start < i {
                    out.push(Segment::Literal(&text[literal_start..i]));
                }
                out.push(Segment::Placeholder(&text[start..start + n]));
                i += n + braces;
                literal_start = i;
                continue;
            }
        }
        i += 1;
    }
    if literal_start < bytes.len() {
        out.push(Segment::Literal(&text[literal_start..]));
    }
    out
}

impl PromptTemplate {
    /// Distinct placeholder names, in order of first appearance.
    pub fn placeholders(&self) -> Vec<&'static str> {
        let mut names: Vec<&'static str> = Vec::new();
        for segment in segments(self.text) {
            if let Segment::Placeholder(name) = segment {
                if !names.contains(&name) {
                    names.push(name);
                }
            }
        }
        names
    }

    pub fn render(&self, bindings: &[(&str, &str)]) -> Result<String, TemplateError> {
        let map: BTreeMap<&str, &str> = bindings.iter().copied().collect();
        let mut out = String::with_capacity(self.text.len());
        for segment in segments(self.text) {
            match segment {
                Segment::Literal(s) => out.push_str(s),
                Segment::Placeholder(name) => match map.get(name) {
                    Some(value) => out.push_str(value),
                    None => {
                        return Err(TemplateError::Unbound {
                            template: self.template_id.to_string(),
                            placeholder: name.to_string(),
                        })
                    }
                },
            }
        }
        Ok(out)
    }
}

macro_rules! template {
    ($name:ident, $id:literal) => {
        pub const $name: PromptTemplate =
            PromptTemplate { template_id: $id, version: 1, text: include_str!(concat!("../prompts/", $id, ".txt")) };
    };
}

template!(SPLIT_CRITERIA, "split_criteria");
template!(RETRIEVAL_GUIDELINES, "retrieval_guidelines");
template!(RELEVANCE_CRITERION, "relevance_criterion");
template!(CRITERION_ASSESSMENT, "criterion_assessment");
template!(CRITERION_DOMAIN, "criterion_domain");
template!(CRITERION_DATA_FORMAT, "criterion_data_format");
template!(CRITERION_TEMPORAL, "criterion_temporal");
template!(VISUAL_ELEMENTS, "visual_elements");
template!(RECORD_TYPE, "record_type");

const INSUFFICIENT_ADDENDUM: &str = include_str!("../prompts/assessment_insufficient.txt");

/// The assessor system prompt for one criterion, with the extra format line
/// for `insufficient_information` placed after the `is_met` line.
pub fn assessment_prompt(criterion_description: &str, as_of: chrono::NaiveDate) -> Result<String, TemplateError> {
    let date = as_of.format("%Y-%m-%d").to_string();
    let rendered = CRITERION_ASSESSMENT
        .render(&[("criterion_description", criterion_description), ("assessment_as_of_date", &date)])?;
    let anchor = "* is_met: bool - Whether the criterion is met or not\n";
    Ok(match rendered.find(anchor) {
        Some(at) => {
            let split = at + anchor.len();
            format!("{}{}{}", &rendered[..split], INSUFFICIENT_ADDENDUM, &rendered[split..])
        }
        None => format!("{rendered}\n{INSUFFICIENT_ADDENDUM}"),
    })
}

pub fn all() -> [PromptTemplate; 9] {
    [
        SPLIT_CRITERIA,
        RETRIEVAL_GUIDELINES,
        RELEVANCE_CRITERION,
        CRITERION_ASSESSMENT,
        CRITERION_DOMAIN,
        CRITERION_DATA_FORMAT,
        CRITERION_TEMPORAL,
        VISUAL_ELEMENTS,
        RECORD_TYPE,
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn shipped_placeholders() {
        assert_eq!(RELEVANCE_CRITERION.placeholders(), vec!["trial_name", "inclusion_criteria"]);
        assert_eq!(CRITERION_ASSESSMENT.placeholders(), vec!["criterion_description", "assessment_as_of_date"]);
        for t in [SPLIT_CRITERIA, RETRIEVAL_GUIDELINES, CRITERION_DOMAIN, VISUAL_ELEMENTS, RECORD_TYPE] {
            assert!(t.placeholders().is_empty(), "{}", t.template_id);
        }
    }

    #[test]
    fn unbound_placeholder_fails() {
        let err = RELEVANCE_CRITERION.render(&[("trial_name", "T")]).unwrap_err();
        assert_eq!(
            err,
            TemplateError::Unbound { template: "relevance_criterion".into(), placeholder: "inclusion_criteria".into() }
        );
    }

    #[test]
    fn values_are_not_rescanned() {
        let t = PromptTemplate { template_id: "t", version: 1, text: "a {x} b {{y}}" };
        assert_eq!(t.render(&[("x", "{y}"), ("y", "Y")]).unwrap(), "a {y} b Y");
    }

    #[test]
    fn non_placeholder_braces_are_literal() {
        let t = PromptTemplate { template_id: "t", version: 1, text: "{\"k\": 1} {Upper} {}" };
        assert!(t.placeholders().is_empty());
        assert_eq!(t.render(&[]).unwrap(), t.text);
    }

    #[test]
    fn assessment_prompt_carries_date_and_addendum() {
        let date = chrono::NaiveDate::from_ymd_opt(2018, 1, 1).unwrap();
        let p = assessment_prompt("MI in the past 6 months", date).unwrap();
        assert!(p.contains("Assume that the current date is: 2018-01-01"));
        assert!(p.contains("MI in the past 6 months"));
        let is_met = p.find("* is_met").unwrap();
        let extra = p.find("* insufficient_information").unwrap();
        assert!(extra > is_met && extra < p.find("# Additional instructions").unwrap());
    }

    proptest! {
        #[test]
        fn assessor_prompt_is_injective(a in "[ -~]{0,40}", b in "[ -~]{0,40}") {
            let date = chrono::NaiveDate::from_ymd_opt(2020, 5, 17).unwrap();
            let pa = assessment_prompt(&a, date).unwrap();
            let pb = assessment_prompt(&b, date).unwrap();
            prop_assert_eq!(pa == pb, a == b);
        }
    }
}
