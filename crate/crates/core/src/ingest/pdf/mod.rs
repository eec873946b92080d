//! PDF page splitting and rasterization.
//!
//! A deliberately small renderer: embedded raster images (the bulk of
//! scanned medical records), filled and stroked paths, and text drawn with
//! a built-in bitmap font at the positions the content stream specifies.
//! Embedded font programs, shadings, clipping and transparency are ignored.

mod object;
mod render;

use object::{Dict, Document, Object};

pub use render::Rgb;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PdfError {
    #[error("corrupt PDF: {0}")]
    Corrupt(String),
    #[error("encrypted PDFs are not supported")]
    Encrypted,
    #[error("unsupported PDF feature: {0}")]
    UnsupportedFeature(String),
    #[error("page {page} is too large to rasterize at {dpi} DPI")]
    PageTooLarge { page: usize, dpi: u32 },
}

/// Largest raster edge produced, in pixels.
pub const MAX_EDGE_PX: f64 = 16_384.0;

pub struct Page<'a> {
    pub dict: &'a Dict,
    pub resources: Option<&'a Dict>,
    /// x0, y0, x1, y1 in points.
    pub bbox: [f64; 4],
    pub rotate: i64,
}

pub struct PdfDocument {
    doc: Document,
    page_refs: Vec<u32>,
}

impl PdfDocument {
    pub fn parse(bytes: &[u8]) -> Result<PdfDocument, PdfError> {
        let doc = Document::parse(bytes)?;
        if doc.is_encrypted() {
            return Err(PdfError::Encrypted);
        }
        let page_refs = collect_pages(&doc);
        if page_refs.is_empty() {
            return Err(PdfError::Corrupt("document has no pages".into()));
        }
        Ok(PdfDocument { doc, page_refs })
    }

    pub fn page_count(&self) -> usize {
        self.page_refs.len()
    }

    fn page(&self, index: usize) -> Option<Page<'_>> {
        let dict = self.doc.objects.get(self.page_refs.get(index)?)?.as_dict()?;
        let inherited = |key: &[u8]| -> Option<&Object> {
            let mut current = dict;
            for _ in 0..64 {
                if let Some(v) = self.doc.get(current, key) {
                    return Some(v);
                }
                current = self.doc.get(current, b"Parent")?.as_dict()?;
            }
            None
        };
        let rect = |key: &[u8]| -> Option<[f64; 4]> {
            let a = inherited(key)?.as_array()?;
            let v: Vec<f64> = a.iter().filter_map(|o| self.doc.resolve(o).as_f64()).collect();
            (v.len() == 4).then(|| [v[0].min(v[2]), v[1].min(v[3]), v[0].max(v[2]), v[1].max(v[3])])
        };
        let media = rect(b"MediaBox").unwrap_or([0.0, 0.0, 612.0, 792.0]);
        let bbox = match rect(b"CropBox") {
            Some(c) => [media[0].max(c[0]), media[1].max(c[1]), media[2].min(c[2]), media[3].min(c[3])],
            None => media,
        };
        let bbox = if bbox[2] - bbox[0] >= 1.0 && bbox[3] - bbox[1] >= 1.0 { bbox } else { media };
        Some(Page {
            dict,
            resources: inherited(b"Resources").and_then(Object::as_dict),
            bbox,
            rotate: inherited(b"Rotate").and_then(Object::as_i64).unwrap_or(0).rem_euclid(360),
        })
    }

    /// Renders page `index` (0-based) as an RGB raster at `dpi`.
    pub fn render_page(&self, index: usize, dpi: u32) -> Result<image::RgbImage, PdfError> {
        let page = self.page(index).ok_or_else(|| PdfError::Corrupt(format!("page {} missing", index + 1)))?;
        let scale = dpi as f64 / 72.0;
        let (w, h) = ((page.bbox[2] - page.bbox[0]) * scale, (page.bbox[3] - page.bbox[1]) * scale);
        if w > MAX_EDGE_PX || h > MAX_EDGE_PX {
            return Err(PdfError::PageTooLarge { page: index + 1, dpi });
        }
        let canvas = render::render(&self.doc, &page, scale, (w.round().max(1.0) as u32, h.round().max(1.0) as u32));
        Ok(match page.rotate {
            90 => image::imageops::rotate90(&canvas),
            180 => image::imageops::rotate180(&canvas),
            270 => image::imageops::rotate270(&canvas),
            _ => canvas,
        })
    }
}

fn collect_pages(doc: &Document) -> Vec<u32> {
    let mut out = Vec::new();
    let root = doc.trailer.get(b"Root".as_slice()).map(|r| doc.resolve(r)).and_then(Object::as_dict);
    if let Some(Object::Ref(n, _)) = root.and_then(|r| r.get(b"Pages".as_slice())) {
        let mut visited = std::collections::HashSet::new();
        walk(doc, *n, &mut out, &mut visited, 0);
    }
    if out.is_empty() {
        // No usable page tree: fall back to every page object by number.
        let mut pages: Vec<u32> = doc
            .objects
            .iter()
            .filter(|(_, o)| {
                o.as_dict().and_then(|d| d.get(b"Type".as_slice())).and_then(Object::as_name) == Some(b"Page")
            })
            .map(|(n, _)| *n)
            .collect();
        pages.sort_unstable();
        out = pages;
    }
    out
}

fn walk(doc: &Document, num: u32, out: &mut Vec<u32>, visited: &mut std::collections::HashSet<u32>, depth: usize) {
    if depth > 64 || !visited.insert(num) {
        return;
    }
    let Some(dict) = doc.objects.get(&num).and_then(Object::as_dict) else { return };
    match dict.get(b"Type".as_slice()).and_then(Object::as_name) {
        Some(b"Pages") | None if dict.contains_key(b"Kids".as_slice()) => {
            if let Some(kids) = doc.get(dict, b"Kids").and_then(Object::as_array) {
                for kid in kids {
                    if let Object::Ref(n, _) = kid {
                        walk(doc, *n, out, visited, depth + 1);
                    }
                }
            }
        }
        Some(b"Page") | None => out.push(num),
        _ => {}
    }
}
