//! De-identification boundary. A redactor takes a PNG page and returns an
//! image of the same dimensions; the implementation lives outside this
//! crate (an external command or HTTP endpoint).

use std::io::{Read, Write};
use std::process::{Command, Stdio};
use std::time::Duration;

use crate::model::{RecordPage, RedactionPolicy};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RedactError {
    #[error("page image is not decodable: {0}")]
    Undecodable(String),
    #[error("redactor failed: {0}")]
    Plugin(String),
    #[error("redactor returned an undecodable image: {0}")]
    BadOutput(String),
    #[error("redactor changed image dimensions from {expected:?} to {found:?}")]
    DimensionMismatch { expected: (u32, u32), found: (u32, u32) },
}

pub trait Redactor: Send + Sync {
    /// Returns the redacted image bytes for one page.
    fn redact(&self, png: &[u8]) -> Result<Vec<u8>, String>;

    /// Whether pages passing through this redactor count as redacted.
    fn marks_redacted(&self) -> bool {
        true
    }

    fn policy(&self) -> RedactionPolicy;
}

pub struct Passthrough;

impl Redactor for Passthrough {
    fn redact(&self, png: &[u8]) -> Result<Vec<u8>, String> {
        Ok(png.to_vec())
    }

    fn marks_redacted(&self) -> bool {
        false
    }

    fn policy(&self) -> RedactionPolicy {
        RedactionPolicy::Passthrough
    }
}

/// Runs a command with the page PNG on stdin and reads the result from stdout.
pub struct CommandRedactor {
    target: String,
}

impl CommandRedactor {
    pub fn new(target: impl Into<String>) -> Self {
        CommandRedactor { target: target.into() }
    }
}

impl Redactor for CommandRedactor {
    fn redact(&self, png: &[u8]) -> Result<Vec<u8>, String> {
        let mut parts = self.target.split_whitespace();
        let program = parts.next().ok_or("empty redactor command")?;
        let mut child = Command::new(program)
            .args(parts)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| format!("cannot start `{program}`: {e}"))?;
        let mut stdin = child.stdin.take().expect("stdin is piped");
        let input = png.to_vec();
        let writer = std::thread::spawn(move || stdin.write_all(&input));
        let mut output = Vec::new();
        child.stdout.take().expect("stdout is piped").read_to_end(&mut output).map_err(|e| e.to_string())?;
        let mut stderr = String::new();
        if let Some(mut err) = child.stderr.take() {
            let _ = err.read_to_string(&mut stderr);
        }
        let status = child.wait().map_err(|e| e.to_string())?;
        // A redactor may legitimately stop reading early; only its exit status matters.
        let _ = writer.join();
        if !status.success() {
            return Err(format!("`{program}` exited with {status}: {}", stderr.trim()));
        }
        Ok(output)
    }

    fn policy(&self) -> RedactionPolicy {
        RedactionPolicy::Plugin { target: self.target.clone() }
    }
}

/// POSTs the page PNG to an endpoint and reads the image from the response body.
pub struct HttpRedactor {
    endpoint: String,
    agent: ureq::Agent,
}

impl HttpRedactor {
    pub fn new(endpoint: impl Into<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(120)))
            .http_status_as_error(false)
            .build()
            .into();
        HttpRedactor { endpoint: endpoint.into(), agent }
    }
}

impl Redactor for HttpRedactor {
    fn redact(&self, png: &[u8]) -> Result<Vec<u8>, String> {
        let mut response = self
            .agent
            .post(&self.endpoint)
            .header("Content-Type", "image/png")
            .send(png)
            .map_err(|e| format!("{}: {e}", self.endpoint))?;
        let status = response.status();
        let body = response.body_mut().read_to_vec().map_err(|e| e.to_string())?;
        if !status.is_success() {
            return Err(format!("{} returned {status}", self.endpoint));
        }
        Ok(body)
    }

    fn policy(&self) -> RedactionPolicy {
        RedactionPolicy::Plugin { target: self.endpoint.clone() }
    }
}

/// Wraps a closure; used for in-process redactors and tests.
pub struct FnRedactor<F>(pub F);

impl<F> Redactor for FnRedactor<F>
where
    F: Fn(&[u8]) -> Result<Vec<u8>, String> + Send + Sync,
{
    fn redact(&self, png: &[u8]) -> Result<Vec<u8>, String> {
        (self.0)(png)
    }

    fn policy(&self) -> RedactionPolicy {
        RedactionPolicy::Plugin { target: "in-process".into() }
    }
}

pub fn redactor_for(policy: &RedactionPolicy) -> Box<dyn Redactor> {
    match policy {
        RedactionPolicy::Passthrough => Box::new(Passthrough),
        RedactionPolicy::Plugin { target } if target.starts_with("http://") || target.starts_with("https://") => {
            Box::new(HttpRedactor::new(target.clone()))
        }
        RedactionPolicy::Plugin { target } => Box::new(CommandRedactor::new(target.clone())),
    }
}

const PNG_MAGIC: &[u8] = b"\x89PNG\r\n\x1a\n";

/// Applies `redactor` to one page. The result always has the input's
/// dimensions and is stored as PNG.
pub fn redact_page(page: RecordPage, redactor: &dyn Redactor) -> Result<RecordPage, RedactError> {
    let before = image::load_from_memory(&page.image_bytes).map_err(|e| RedactError::Undecodable(e.to_string()))?;
    let output = redactor.redact(&page.image_bytes).map_err(RedactError::Plugin)?;
    let after = image::load_from_memory(&output).map_err(|e| RedactError::BadOutput(e.to_string()))?;
    let expected = (before.width(), before.height());
    let found = (after.width(), after.height());
    if expected != found {
        return Err(RedactError::DimensionMismatch { expected, found });
    }
    let image_bytes = if output.starts_with(PNG_MAGIC) {
        output
    } else {
        let mut out = std::io::Cursor::new(Vec::new());
        after.write_to(&mut out, image::ImageFormat::Png).map_err(|e| RedactError::BadOutput(e.to_string()))?;
        out.into_inner()
    };
    Ok(RecordPage { image_bytes, redacted: redactor.marks_redacted(), ..page })
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{Rgb, RgbImage};

    fn png(img: &RgbImage) -> Vec<u8> {
        let mut out = std::io::Cursor::new(Vec::new());
        img.write_to(&mut out, image::ImageFormat::Png).unwrap();
        out.into_inner()
    }

    fn page(bytes: Vec<u8>) -> RecordPage {
        RecordPage {
            page_id: "pg".into(),
            document_id: "doc".into(),
            page_number: 1,
            image_bytes: bytes,
            dpi: 72,
            redacted: false,
        }
    }

    fn noisy(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| Rgb([(x * 7 + y) as u8, (y * 13) as u8, (x ^ y) as u8]))
    }

    #[test]
    fn passthrough_is_identity() {
        let bytes = png(&noisy(20, 10));
        let out = redact_page(page(bytes.clone()), &Passthrough).unwrap();
        assert_eq!(out.image_bytes, bytes);
        assert!(!out.redacted);
    }

    #[test]
    fn blanking_plugin_changes_only_its_rectangle() {
        let (rx, ry, rw, rh) = (5u32, 2u32, 6u32, 4u32);
        let blank = FnRedactor(move |bytes: &[u8]| {
            let mut img = image::load_from_memory(bytes).map_err(|e| e.to_string())?.to_rgb8();
            for y in ry..ry + rh {
                for x in rx..rx + rw {
                    img.put_pixel(x, y, Rgb([0, 0, 0]));
                }
            }
            Ok(png(&img))
        });
        let original = noisy(20, 10);
        let out = redact_page(page(png(&original)), &blank).unwrap();
        assert!(out.redacted);
        let after = image::load_from_memory(&out.image_bytes).unwrap().to_rgb8();
        for (x, y, p) in original.enumerate_pixels() {
            let inside = (rx..rx + rw).contains(&x) && (ry..ry + rh).contains(&y);
            if inside {
                assert_eq!(after.get_pixel(x, y), &Rgb([0, 0, 0]));
            } else {
                assert_eq!(after.get_pixel(x, y), p, "pixel ({x}, {y}) changed outside the rectangle");
            }
        }
    }

    #[test]
    fn wrong_dimensions_are_rejected() {
        let shrink = FnRedactor(|_: &[u8]| Ok(png(&noisy(5, 5))));
        let err = redact_page(page(png(&noisy(20, 10))), &shrink).unwrap_err();
        assert_eq!(err, RedactError::DimensionMismatch { expected: (20, 10), found: (5, 5) });
    }

    #[cfg(unix)]
    #[test]
    fn command_plugin_round_trips_through_cat() {
        let bytes = png(&noisy(8, 8));
        let out = redact_page(page(bytes.clone()), &CommandRedactor::new("cat")).unwrap();
        assert_eq!(out.image_bytes, bytes);
        assert!(out.redacted);
        let failing = CommandRedactor::new("false");
        assert!(matches!(redact_page(page(bytes), &failing), Err(RedactError::Plugin(_))));
    }
}
