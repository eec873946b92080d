//! Renders plain-text notes as page images with a fixed monospace layout.
//!
//! Geometry is fixed so that the same text and DPI always give the same
//! bytes: US Letter pages, half-inch margins, 60 lines of 80 columns.

use image::{GrayImage, Luma};

use super::font;
use crate::model::MIN_PAGE_DPI;

pub const PAGE_WIDTH_IN: f64 = 8.5;
pub const PAGE_HEIGHT_IN: f64 = 11.0;
pub const MARGIN_IN: f64 = 0.5;
pub const LINES_PER_PAGE: usize = 60;
pub const COLUMNS: usize = 80;
pub const TAB_WIDTH: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TextRenderError {
    #[error("text note is empty")]
    Empty,
    #[error("text DPI {0} is below the minimum of {MIN_PAGE_DPI}")]
    DpiTooLow(u32),
    #[error("PNG encoding failed: {0}")]
    Encode(String),
}

/// Splits `text` into display lines: tabs expanded, long lines hard-wrapped.
pub fn layout_lines(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for line in text.lines() {
        let mut expanded: Vec<char> = Vec::new();
        for c in line.chars() {
            if c == '\t' {
                let pad = TAB_WIDTH - expanded.len() % TAB_WIDTH;
                expanded.extend(std::iter::repeat_n(' ', pad));
            } else if !c.is_control() {
                expanded.push(c);
            }
        }
        if expanded.is_empty() {
            out.push(String::new());
        }
        for chunk in expanded.chunks(COLUMNS) {
            out.push(chunk.iter().collect());
        }
    }
    out
}

/// Renders `text` to one grayscale PNG per page.
pub fn render_text_note(text: &str, dpi: u32) -> Result<Vec<Vec<u8>>, TextRenderError> {
    if dpi < MIN_PAGE_DPI {
        return Err(TextRenderError::DpiTooLow(dpi));
    }
    if text.trim().is_empty() {
        return Err(TextRenderError::Empty);
    }
    let lines = layout_lines(text);
    let dpi_f = dpi as f64;
    let width = (PAGE_WIDTH_IN * dpi_f).round() as u32;
    let height = (PAGE_HEIGHT_IN * dpi_f).round() as u32;
    let margin = MARGIN_IN * dpi_f;
    let cell_w = (PAGE_WIDTH_IN - 2.0 * MARGIN_IN) * dpi_f / COLUMNS as f64;
    let line_h = (PAGE_HEIGHT_IN - 2.0 * MARGIN_IN) * dpi_f / LINES_PER_PAGE as f64;
    // A glyph occupies 5 of 6 cell columns and 7 of 10 line rows.
    let sx = cell_w / (font::GLYPH_WIDTH + 1) as f64;
    let sy = line_h / (font::GLYPH_HEIGHT + 3) as f64;

    lines
        .chunks(LINES_PER_PAGE)
        .map(|page_lines| {
            let mut img = GrayImage::from_pixel(width, height, Luma([255]));
            for (row, line) in page_lines.iter().enumerate() {
                let top = margin + row as f64 * line_h + sy;
                for (col, c) in line.chars().enumerate() {
                    let left = margin + col as f64 * cell_w;
                    font::draw(c, left, top, sx, sy, width, height, |x, y| img.put_pixel(x, y, Luma([0])));
                }
            }
            encode_png(&img)
        })
        .collect()
}

fn encode_png(img: &GrayImage) -> Result<Vec<u8>, TextRenderError> {
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png).map_err(|e| TextRenderError::Encode(e.to_string()))?;
    Ok(out.into_inner())
}
