//! Content-stream interpreter and rasterizer.

use std::collections::HashMap;

use image::RgbImage;

use super::object::{Dict, Document, Lexer, Object, Stream};
use super::Page;
use crate::ingest::font;

pub type Rgb = [u8; 3];

const WHITE: Rgb = [255, 255, 255];
const MAX_FORM_DEPTH: usize = 8;

/// Affine matrix `[a b c d e f]` mapping (x, y) to (a x + c y + e, b x + d y + f).
#[derive(Debug, Clone, Copy, PartialEq)]
struct Matrix([f64; 6]);

impl Matrix {
    const IDENTITY: Matrix = Matrix([1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);

    fn from_operands(v: &[f64]) -> Option<Matrix> {
        (v.len() == 6).then(|| Matrix([v[0], v[1], v[2], v[3], v[4], v[5]]))
    }

    /// `self` applied first, then `other`.
    fn then(&self, other: &Matrix) -> Matrix {
        let [a, b, c, d, e, f] = self.0;
        let [a2, b2, c2, d2, e2, f2] = other.0;
        Matrix([
            a * a2 + b * c2,
            a * b2 + b * d2,
            c * a2 + d * c2,
            c * b2 + d * d2,
            e * a2 + f * c2 + e2,
            e * b2 + f * d2 + f2,
        ])
    }

    fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let [a, b, c, d, e, f] = self.0;
        (a * x + c * y + e, b * x + d * y + f)
    }

    fn invert(&self) -> Option<Matrix> {
        let [a, b, c, d, e, f] = self.0;
        let det = a * d - b * c;
        if det.abs() < 1e-12 {
            return None;
        }
        Some(Matrix([d / det, -b / det, -c / det, a / det, (c * f - d * e) / det, (b * e - a * f) / det]))
    }

    fn scale(&self) -> f64 {
        let [a, b, c, d, ..] = self.0;
        (a * d - b * c).abs().sqrt()
    }
}

#[derive(Debug, Clone)]
struct FontInfo {
    two_byte: bool,
    first_char: i64,
    widths: Vec<f64>,
    cid_widths: HashMap<u32, f64>,
    default_width: f64,
    to_unicode: HashMap<u32, char>,
}

impl FontInfo {
    fn fallback() -> FontInfo {
        FontInfo {
            two_byte: false,
            first_char: 0,
            widths: Vec::new(),
            cid_widths: HashMap::new(),
            default_width: 550.0,
            to_unicode: HashMap::new(),
        }
    }

    fn width(&self, code: u32) -> f64 {
        if self.two_byte {
            return self.cid_widths.get(&code).copied().unwrap_or(self.default_width);
        }
        let index = code as i64 - self.first_char;
        usize::try_from(index)
            .ok()
            .and_then(|i| self.widths.get(i).copied())
            .filter(|w| *w > 0.0)
            .unwrap_or(self.default_width)
    }

    fn char_for(&self, code: u32) -> char {
        if let Some(c) = self.to_unicode.get(&code) {
            return *c;
        }
        if self.two_byte {
            return '?';
        }
        match code {
            0x20..=0x7E => code as u8 as char,
            0x91 | 0x92 => '\'',
            0x93 | 0x94 => '"',
            0x96 | 0x97 => '-',
            0xA0 => ' ',
            _ => '?',
        }
    }
}

#[derive(Debug, Clone)]
struct State {
    ctm: Matrix,
    fill: Rgb,
    stroke: Rgb,
    line_width: f64,
    font: Option<std::rc::Rc<FontInfo>>,
    font_size: f64,
    char_space: f64,
    word_space: f64,
    h_scale: f64,
    leading: f64,
    rise: f64,
    render_mode: i64,
}

struct Canvas {
    image: RgbImage,
}

impl Canvas {
    fn put(&mut self, x: i64, y: i64, color: Rgb) {
        if x >= 0 && y >= 0 && (x as u32) < self.image.width() && (y as u32) < self.image.height() {
            self.image.put_pixel(x as u32, y as u32, image::Rgb(color));
        }
    }

    /// Fills polygons with the nonzero winding rule (even-odd when asked).
    fn fill(&mut self, polys: &[Vec<(f64, f64)>], color: Rgb, even_odd: bool) {
        let (w, h) = (self.image.width() as i64, self.image.height() as i64);
        let ys = polys.iter().flatten().map(|p| p.1);
        let (min_y, max_y) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), y| (lo.min(y), hi.max(y)));
        if !min_y.is_finite() {
            return;
        }
        let mut crossings: Vec<(f64, i32)> = Vec::new();
        for py in (min_y.floor().max(0.0) as i64)..(max_y.ceil().min(h as f64) as i64) {
            let sy = py as f64 + 0.5;
            crossings.clear();
            for poly in polys {
                for i in 0..poly.len() {
                    let (x0, y0) = poly[i];
                    let (x1, y1) = poly[(i + 1) % poly.len()];
                    if (y0 <= sy) != (y1 <= sy) {
                        let x = x0 + (sy - y0) / (y1 - y0) * (x1 - x0);
                        crossings.push((x, if y1 > y0 { 1 } else { -1 }));
                    }
                }
            }
            crossings.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut winding = 0;
            for pair in crossings.windows(2) {
                winding += pair[0].1;
                let inside = if even_odd { winding % 2 != 0 } else { winding != 0 };
                if inside {
                    let start = (pair[0].0 - 0.5).ceil().max(0.0) as i64;
                    let end = ((pair[1].0 - 0.5).ceil() as i64).min(w);
                    for px in start..end {
                        self.put(px, py, color);
                    }
                }
            }
        }
    }

    fn stroke(&mut self, polys: &[(Vec<(f64, f64)>, bool)], width: f64, color: Rgb) {
        let half = (width.max(1.0)) / 2.0;
        for (poly, closed) in polys {
            let n = poly.len();
            let segments = if *closed { n } else { n.saturating_sub(1) };
            for i in 0..segments {
                let (x0, y0) = poly[i];
                let (x1, y1) = poly[(i + 1) % n];
                let len = ((x1 - x0).powi(2) + (y1 - y0).powi(2)).sqrt();
                let steps = (len * 2.0).ceil().max(1.0) as usize;
                if steps > 200_000 {
                    continue;
                }
                for s in 0..=steps {
                    let t = s as f64 / steps as f64;
                    let (cx, cy) = (x0 + (x1 - x0) * t, y0 + (y1 - y0) * t);
                    for py in (cy - half).round() as i64..(cy + half).round().max((cy - half).round() + 1.0) as i64 {
                        for px in (cx - half).round() as i64..(cx + half).round().max((cx - half).round() + 1.0) as i64
                        {
                            self.put(px, py, color);
                        }
                    }
                }
            }
        }
    }
}

struct Renderer<'a> {
    doc: &'a Document,
    canvas: Canvas,
    device: Matrix,
    fonts: HashMap<Vec<u8>, std::rc::Rc<FontInfo>>,
}

pub fn render(doc: &Document, page: &Page<'_>, scale: f64, size: (u32, u32)) -> RgbImage {
    let device = Matrix([scale, 0.0, 0.0, -scale, -page.bbox[0] * scale, page.bbox[3] * scale]);
    let mut renderer = Renderer {
        doc,
        canvas: Canvas { image: RgbImage::from_pixel(size.0, size.1, image::Rgb(WHITE)) },
        device,
        fonts: HashMap::new(),
    };
    let content = page_content(doc, page.dict);
    let state = State {
        ctm: Matrix::IDENTITY,
        fill: [0, 0, 0],
        stroke: [0, 0, 0],
        line_width: 1.0,
        font: None,
        font_size: 0.0,
        char_space: 0.0,
        word_space: 0.0,
        h_scale: 1.0,
        leading: 0.0,
        rise: 0.0,
        render_mode: 0,
    };
    renderer.run(&content, page.resources, state, 0);
    renderer.canvas.image
}

fn page_content(doc: &Document, page: &Dict) -> Vec<u8> {
    let mut out = Vec::new();
    let mut push = |obj: &Object| {
        if let Object::Stream(s) = doc.resolve(obj) {
            match doc.decode_stream(s) {
                Ok(data) => {
                    out.extend_from_slice(&data);
                    out.push(b'\n');
                }
                Err(e) => tracing::warn!(%e, "skipping undecodable content stream"),
            }
        }
    };
    if let Some(obj) = page.get(b"Contents".as_slice()) {
        match doc.resolve(obj) {
            Object::Array(items) => items.iter().for_each(&mut push),
            _ => push(obj),
        }
    }
    out
}

fn color_from(ops: &[f64]) -> Option<Rgb> {
    let c = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    match ops.len() {
        1 => Some([c(ops[0]); 3]),
        3 => Some([c(ops[0]), c(ops[1]), c(ops[2])]),
        4 => {
            let k = ops[3];
            Some([c((1.0 - ops[0]) * (1.0 - k)), c((1.0 - ops[1]) * (1.0 - k)), c((1.0 - ops[2]) * (1.0 - k))])
        }
        _ => None,
    }
}

impl<'a> Renderer<'a> {
    fn run(&mut self, content: &[u8], resources: Option<&'a Dict>, initial: State, depth: usize) {
        let mut lexer = Lexer::new(content);
        let mut stack: Vec<State> = Vec::new();
        let mut gs = initial;
        let mut operands: Vec<Object> = Vec::new();
        let mut path: Vec<(Vec<(f64, f64)>, bool)> = Vec::new();
        let mut text_matrix = Matrix::IDENTITY;
        let mut line_matrix = Matrix::IDENTITY;

        loop {
            let obj = match lexer.object() {
                Ok(Some(o)) => o,
                Ok(None) => break,
                Err(e) => {
                    tracing::debug!(%e, "content stream parse stopped");
                    break;
                }
            };
            let Object::Op(op) = obj else {
                operands.push(obj);
                continue;
            };
            let nums: Vec<f64> = operands.iter().filter_map(Object::as_f64).collect();
            let device = self.device;
            let to_device = |ctm: &Matrix, x: f64, y: f64| ctm.then(&device).apply(x, y);
            match op.as_slice() {
                b"q" => stack.push(gs.clone()),
                b"Q" => {
                    if let Some(s) = stack.pop() {
                        gs = s;
                    }
                }
                b"cm" => {
                    if let Some(m) = Matrix::from_operands(&nums) {
                        gs.ctm = m.then(&gs.ctm);
                    }
                }
                b"w" => gs.line_width = nums.first().copied().unwrap_or(1.0),
                b"g" | b"rg" | b"k" | b"sc" | b"scn" => {
                    if let Some(c) = color_from(&nums) {
                        gs.fill = c;
                    }
                }
                b"G" | b"RG" | b"K" | b"SC" | b"SCN" => {
                    if let Some(c) = color_from(&nums) {
                        gs.stroke = c;
                    }
                }
                b"m" if nums.len() >= 2 => path.push((vec![to_device(&gs.ctm, nums[0], nums[1])], false)),
                b"l" if nums.len() >= 2 => {
                    let p = to_device(&gs.ctm, nums[0], nums[1]);
                    match path.last_mut() {
                        Some((poly, _)) => poly.push(p),
                        None => path.push((vec![p], false)),
                    }
                }
                b"c" | b"v" | b"y" if nums.len() >= 4 => {
                    let (x, y) = (nums[nums.len() - 2], nums[nums.len() - 1]);
                    let p = to_device(&gs.ctm, x, y);
                    if let Some((poly, _)) = path.last_mut() {
                        poly.push(p);
                    }
                }
                b"h" => {
                    if let Some((_, closed)) = path.last_mut() {
                        *closed = true;
                    }
                }
                b"re" if nums.len() >= 4 => {
                    let (x, y, w, h) = (nums[0], nums[1], nums[2], nums[3]);
                    let corners = [(x, y), (x + w, y), (x + w, y + h), (x, y + h)];
                    path.push((corners.iter().map(|(cx, cy)| to_device(&gs.ctm, *cx, *cy)).collect(), true));
                }
                b"f" | b"F" | b"f*" | b"B" | b"B*" | b"b" | b"b*" => {
                    let polys: Vec<Vec<(f64, f64)>> = path.iter().map(|(p, _)| p.clone()).collect();
                    let even_odd = op.ends_with(b"*");
                    self.canvas.fill(&polys, gs.fill, even_odd);
                    if op[0] == b'B' || op[0] == b'b' {
                        let width = gs.line_width * gs.ctm.then(&self.device).scale();
                        self.canvas.stroke(&path, width, gs.stroke);
                    }
                    path.clear();
                }
                b"S" | b"s" => {
                    if op == b"s" {
                        if let Some((_, closed)) = path.last_mut() {
                            *closed = true;
                        }
                    }
                    let width = gs.line_width * gs.ctm.then(&self.device).scale();
                    self.canvas.stroke(&path, width, gs.stroke);
                    path.clear();
                }
                b"n" => path.clear(),
                b"BT" => {
                    text_matrix = Matrix::IDENTITY;
                    line_matrix = Matrix::IDENTITY;
                }
                b"Tf" => {
                    if let Some(Object::Name(name)) = operands.first() {
                        gs.font = Some(self.font(resources, name));
                    }
                    gs.font_size = nums.last().copied().unwrap_or(0.0);
                }
                b"Tc" => gs.char_space = nums.first().copied().unwrap_or(0.0),
                b"Tw" => gs.word_space = nums.first().copied().unwrap_or(0.0),
                b"Tz" => gs.h_scale = nums.first().copied().unwrap_or(100.0) / 100.0,
                b"TL" => gs.leading = nums.first().copied().unwrap_or(0.0),
                b"Ts" => gs.rise = nums.first().copied().unwrap_or(0.0),
                b"Tr" => gs.render_mode = nums.first().map_or(0, |v| *v as i64),
                b"Td" | b"TD" if nums.len() >= 2 => {
                    if op == b"TD" {
                        gs.leading = -nums[1];
                    }
                    line_matrix = Matrix([1.0, 0.0, 0.0, 1.0, nums[0], nums[1]]).then(&line_matrix);
                    text_matrix = line_matrix;
                }
                b"Tm" => {
                    if let Some(m) = Matrix::from_operands(&nums) {
                        line_matrix = m;
                        text_matrix = m;
                    }
                }
                b"T*" => {
                    line_matrix = Matrix([1.0, 0.0, 0.0, 1.0, 0.0, -gs.leading]).then(&line_matrix);
                    text_matrix = line_matrix;
                }
                b"Tj" | b"'" | b"\"" => {
                    if op == b"'" || op == b"\"" {
                        if op == b"\"" && nums.len() >= 2 {
                            gs.word_space = nums[0];
                            gs.char_space = nums[1];
                        }
                        line_matrix = Matrix([1.0, 0.0, 0.0, 1.0, 0.0, -gs.leading]).then(&line_matrix);
                        text_matrix = line_matrix;
                    }
                    if let Some(Object::Str(s)) = operands.last() {
                        self.show_text(&gs, &mut text_matrix, s);
                    }
                }
                b"TJ" => {
                    if let Some(Object::Array(items)) = operands.last() {
                        for item in items {
                            match item {
                                Object::Str(s) => self.show_text(&gs, &mut text_matrix, s),
                                other => {
                                    if let Some(adj) = other.as_f64() {
                                        let tx = -adj / 1000.0 * gs.font_size * gs.h_scale;
                                        text_matrix = Matrix([1.0, 0.0, 0.0, 1.0, tx, 0.0]).then(&text_matrix);
                                    }
                                }
                            }
                        }
                    }
                }
                b"Do" => {
                    if let Some(Object::Name(name)) = operands.first() {
                        self.draw_xobject(resources, name, &gs, depth);
                    }
                }
                b"BI" => skip_inline_image(&mut lexer),
                _ => {}
            }
            operands.clear();
        }
    }

    fn font(&mut self, resources: Option<&Dict>, name: &[u8]) -> std::rc::Rc<FontInfo> {
        let dict = resources
            .and_then(|r| self.doc.get(r, b"Font"))
            .and_then(Object::as_dict)
            .and_then(|fonts| self.doc.get(fonts, name))
            .and_then(Object::as_dict);
        let Some(dict) = dict else { return std::rc::Rc::new(FontInfo::fallback()) };
        let key: Vec<u8> = format!("{:p}", dict as *const Dict).into_bytes();
        if let Some(f) = self.fonts.get(&key) {
            return f.clone();
        }
        let info = std::rc::Rc::new(load_font(self.doc, dict));
        self.fonts.insert(key, info.clone());
        info
    }

    fn show_text(&mut self, gs: &State, text_matrix: &mut Matrix, bytes: &[u8]) {
        let font = gs.font.clone().unwrap_or_else(|| std::rc::Rc::new(FontInfo::fallback()));
        let codes: Vec<u32> = if font.two_byte {
            bytes.chunks(2).map(|p| ((p[0] as u32) << 8) | p.get(1).copied().unwrap_or(0) as u32).collect()
        } else {
            bytes.iter().map(|b| *b as u32).collect()
        };
        let visible = !matches!(gs.render_mode, 3 | 7);
        for code in codes {
            let w0 = font.width(code) / 1000.0;
            if visible {
                let params = Matrix([gs.font_size * gs.h_scale, 0.0, 0.0, gs.font_size, 0.0, gs.rise]);
                let trm = params.then(text_matrix).then(&gs.ctm).then(&self.device);
                let (ox, oy) = trm.apply(0.0, 0.0);
                let (ax, _) = trm.apply(w0, 0.0);
                let (_, ty) = trm.apply(0.0, 0.7);
                let advance_px = (ax - ox).abs();
                let cap_px = (oy - ty).abs();
                if advance_px >= 0.5 && cap_px >= 0.5 && advance_px < 2000.0 && cap_px < 2000.0 {
                    let sx = advance_px / (font::GLYPH_WIDTH + 1) as f64;
                    let sy = cap_px / font::GLYPH_HEIGHT as f64;
                    let (w, h) = self.canvas.image.dimensions();
                    let color = gs.fill;
                    let image = &mut self.canvas.image;
                    font::draw(font.char_for(code), ox.min(ax), oy.min(ty), sx, sy, w, h, |x, y| {
                        image.put_pixel(x, y, image::Rgb(color))
                    });
                }
            }
            let word = if !font.two_byte && code == 32 { gs.word_space } else { 0.0 };
            let tx = (w0 * gs.font_size + gs.char_space + word) * gs.h_scale;
            *text_matrix = Matrix([1.0, 0.0, 0.0, 1.0, tx, 0.0]).then(text_matrix);
        }
    }

    fn draw_xobject(&mut self, resources: Option<&'a Dict>, name: &[u8], gs: &State, depth: usize) {
        let Some(Object::Stream(stream)) = resources
            .and_then(|r| self.doc.get(r, b"XObject"))
            .and_then(Object::as_dict)
            .and_then(|x| self.doc.get(x, name))
        else {
            return;
        };
        match self.doc.get(&stream.dict, b"Subtype").and_then(Object::as_name) {
            Some(b"Image") => {
                let m = gs.ctm.then(&self.device);
                match decode_image(self.doc, stream, gs.fill) {
                    Ok(Some(img)) => self.blit(&img, &m),
                    Ok(None) => {}
                    Err(e) => tracing::warn!(%e, "skipping image"),
                }
            }
            Some(b"Form") if depth < MAX_FORM_DEPTH => {
                let Ok(content) = self.doc.decode_stream(stream) else { return };
                let matrix = self
                    .doc
                    .get(&stream.dict, b"Matrix")
                    .and_then(Object::as_array)
                    .and_then(|a| Matrix::from_operands(&a.iter().filter_map(Object::as_f64).collect::<Vec<_>>()))
                    .unwrap_or(Matrix::IDENTITY);
                let form_resources = self.doc.get(&stream.dict, b"Resources").and_then(Object::as_dict).or(resources);
                let mut inner = gs.clone();
                inner.ctm = matrix.then(&gs.ctm);
                self.run(&content, form_resources, inner, depth + 1);
            }
            _ => {}
        }
    }

    /// Draws `img` mapped onto the unit square under `m` (image row 0 at the top).
    fn blit(&mut self, img: &DecodedImage, m: &Matrix) {
        let Some(inv) = m.invert() else { return };
        let corners = [m.apply(0.0, 0.0), m.apply(1.0, 0.0), m.apply(0.0, 1.0), m.apply(1.0, 1.0)];
        let (w, h) = self.canvas.image.dimensions();
        let min_x = corners.iter().map(|c| c.0).fold(f64::INFINITY, f64::min).floor().max(0.0) as u32;
        let max_x = corners.iter().map(|c| c.0).fold(f64::NEG_INFINITY, f64::max).ceil().min(w as f64) as u32;
        let min_y = corners.iter().map(|c| c.1).fold(f64::INFINITY, f64::min).floor().max(0.0) as u32;
        let max_y = corners.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max).ceil().min(h as f64) as u32;
        for py in min_y..max_y {
            for px in min_x..max_x {
                let (u, v) = inv.apply(px as f64 + 0.5, py as f64 + 0.5);
                if !(0.0..1.0).contains(&u) || !(0.0..1.0).contains(&v) {
                    continue;
                }
                let col = ((u * img.width as f64) as usize).min(img.width - 1);
                let row = (((1.0 - v) * img.height as f64) as usize).min(img.height - 1);
                if let Some(c) = img.pixels[row * img.width + col] {
                    self.canvas.image.put_pixel(px, py, image::Rgb(c));
                }
            }
        }
    }
}

fn skip_inline_image(lexer: &mut Lexer<'_>) {
    let data = lexer.data;
    // Skip the parameter dictionary up to "ID", then the binary data up to "EI".
    while let Ok(Some(obj)) = lexer.object() {
        if obj == Object::Op(b"ID".to_vec()) {
            break;
        }
    }
    let mut i = lexer.pos + 1;
    while i + 2 <= data.len() {
        if &data[i..i + 2] == b"EI"
            && data[i - 1].is_ascii_whitespace()
            && data.get(i + 2).is_none_or(|b| b.is_ascii_whitespace())
        {
            lexer.pos = i + 2;
            return;
        }
        i += 1;
    }
    lexer.pos = data.len();
}

fn load_font(doc: &Document, dict: &Dict) -> FontInfo {
    let mut info = FontInfo::fallback();
    let subtype = doc.get(dict, b"Subtype").and_then(Object::as_name).unwrap_or_default().to_vec();
    let base = doc.get(dict, b"BaseFont").and_then(Object::as_name).unwrap_or_default().to_vec();
    if base.windows(7).any(|w| w == b"Courier") {
        info.default_width = 600.0;
    }
    if subtype == b"Type0" {
        info.two_byte = true;
        info.default_width = 1000.0;
        let descendant = doc
            .get(dict, b"DescendantFonts")
            .and_then(Object::as_array)
            .and_then(|a| a.first())
            .map(|d| doc.resolve(d))
            .and_then(Object::as_dict);
        if let Some(cid) = descendant {
            if let Some(dw) = doc.get(cid, b"DW").and_then(Object::as_f64) {
                info.default_width = dw;
            }
            if let Some(w) = doc.get(cid, b"W").and_then(Object::as_array) {
                let items: Vec<&Object> = w.iter().map(|o| doc.resolve(o)).collect();
                let mut i = 0;
                while i < items.len() {
                    match (items[i].as_i64(), items.get(i + 1)) {
                        (Some(start), Some(Object::Array(ws))) => {
                            for (k, wv) in ws.iter().enumerate() {
                                if let Some(wv) = doc.resolve(wv).as_f64() {
                                    info.cid_widths.insert(start as u32 + k as u32, wv);
                                }
                            }
                            i += 2;
                        }
                        (Some(first), Some(last)) => {
                            if let (Some(last), Some(wv)) = (last.as_i64(), items.get(i + 2).and_then(|o| o.as_f64())) {
                                for c in first..=last.min(first + 65_535) {
                                    info.cid_widths.insert(c as u32, wv);
                                }
                            }
                            i += 3;
                        }
                        _ => break,
                    }
                }
            }
        }
    } else {
        info.first_char = doc.get(dict, b"FirstChar").and_then(Object::as_i64).unwrap_or(0);
        if let Some(w) = doc.get(dict, b"Widths").and_then(Object::as_array) {
            info.widths = w.iter().map(|o| doc.resolve(o).as_f64().unwrap_or(0.0)).collect();
        }
    }
    if let Some(Object::Stream(s)) = doc.get(dict, b"ToUnicode") {
        if let Ok(cmap) = doc.decode_stream(s) {
            info.to_unicode = parse_to_unicode(&cmap);
        }
    }
    info
}

fn utf16_char(bytes: &[u8]) -> Option<char> {
    let units: Vec<u16> =
        bytes.chunks(2).map(|p| ((p[0] as u16) << 8) | p.get(1).copied().unwrap_or(0) as u16).collect();
    char::decode_utf16(units).next()?.ok()
}

fn code_of(bytes: &[u8]) -> u32 {
    bytes.iter().take(4).fold(0u32, |acc, b| (acc << 8) | *b as u32)
}

fn parse_to_unicode(cmap: &[u8]) -> HashMap<u32, char> {
    let mut map = HashMap::new();
    let mut lexer = Lexer::new(cmap);
    let mut tokens = Vec::new();
    while let Ok(Some(obj)) = lexer.object() {
        tokens.push(obj);
    }
    let mut i = 0;
    while i < tokens.len() {
        match &tokens[i] {
            Object::Op(op) if op == b"beginbfchar" => {
                i += 1;
                while i + 1 < tokens.len() {
                    match (&tokens[i], &tokens[i + 1]) {
                        (Object::Str(src), Object::Str(dst)) => {
                            if let Some(c) = utf16_char(dst) {
                                map.insert(code_of(src), c);
                            }
                            i += 2;
                        }
                        _ => break,
                    }
                }
            }
            Object::Op(op) if op == b"beginbfrange" => {
                i += 1;
                while i + 2 < tokens.len() {
                    match (&tokens[i], &tokens[i + 1], &tokens[i + 2]) {
                        (Object::Str(lo), Object::Str(hi), Object::Str(dst)) => {
                            let (lo, hi) = (code_of(lo), code_of(hi));
                            if let Some(start) = utf16_char(dst) {
                                for (k, code) in (lo..=hi.min(lo + 65_535)).enumerate() {
                                    if let Some(c) = char::from_u32(start as u32 + k as u32) {
                                        map.insert(code, c);
                                    }
                                }
                            }
                            i += 3;
                        }
                        (Object::Str(lo), Object::Str(_), Object::Array(dsts)) => {
                            let lo = code_of(lo);
                            for (k, d) in dsts.iter().enumerate() {
                                if let Object::Str(d) = d {
                                    if let Some(c) = utf16_char(d) {
                                        map.insert(lo + k as u32, c);
                                    }
                                }
                            }
                            i += 3;
                        }
                        _ => break,
                    }
                }
            }
            _ => i += 1,
        }
    }
    map
}

struct DecodedImage {
    width: usize,
    height: usize,
    /// `None` marks transparent (unpainted) stencil pixels.
    pixels: Vec<Option<Rgb>>,
}

fn decode_image(doc: &Document, stream: &Stream, fill: Rgb) -> Result<Option<DecodedImage>, super::PdfError> {
    let int = |key: &[u8]| doc.get(&stream.dict, key).and_then(Object::as_i64);
    let width = int(b"Width").unwrap_or(0).max(0) as usize;
    let height = int(b"Height").unwrap_or(0).max(0) as usize;
    if width == 0 || height == 0 || width.saturating_mul(height) > 100_000_000 {
        return Ok(None);
    }
    let filter = doc.last_filter(stream);
    let data = doc.decode_stream(stream)?;

    if matches!(filter.as_deref(), Some(b"DCTDecode") | Some(b"DCT")) {
        let img = image::load_from_memory_with_format(&data, image::ImageFormat::Jpeg)
            .map_err(|e| super::PdfError::Corrupt(format!("embedded JPEG: {e}")))?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let pixels = img.pixels().map(|p| Some(p.0)).collect();
        return Ok(Some(DecodedImage { width: w, height: h, pixels }));
    }
    if matches!(filter.as_deref(), Some(b"JPXDecode")) {
        return Err(super::PdfError::UnsupportedFeature("JPEG 2000 image".into()));
    }

    let is_mask = matches!(doc.get(&stream.dict, b"ImageMask"), Some(Object::Bool(true)));
    let bpc = if is_mask { 1 } else { int(b"BitsPerComponent").unwrap_or(8) as usize };
    if !matches!(bpc, 1 | 2 | 4 | 8 | 16) {
        return Err(super::PdfError::UnsupportedFeature(format!("{bpc} bits per component")));
    }
    let decode_inverted = doc
        .get(&stream.dict, b"Decode")
        .and_then(Object::as_array)
        .and_then(|a| Some(a.first()?.as_f64()? > a.get(1)?.as_f64()?))
        .unwrap_or(false);

    let space = if is_mask { ColorSpace::Gray } else { color_space(doc, doc.get(&stream.dict, b"ColorSpace")) };
    let comps = space.components();
    let row_bits = width * comps * bpc;
    let row_bytes = row_bits.div_ceil(8);
    let max = ((1u32 << bpc.min(16)) - 1) as f64;
    let sample = |row: &[u8], index: usize| -> u32 {
        match bpc {
            8 => row.get(index).copied().unwrap_or(0) as u32,
            16 => {
                let hi = row.get(index * 2).copied().unwrap_or(0) as u32;
                let lo = row.get(index * 2 + 1).copied().unwrap_or(0) as u32;
                (hi << 8) | lo
            }
            _ => {
                let bit = index * bpc;
                let byte = row.get(bit / 8).copied().unwrap_or(0) as u32;
                (byte >> (8 - bpc - bit % 8)) & ((1 << bpc) - 1)
            }
        }
    };

    let mut pixels = Vec::with_capacity(width * height);
    for y in 0..height {
        let start = y * row_bytes;
        let row = data.get(start..(start + row_bytes).min(data.len())).unwrap_or(&[]);
        for x in 0..width {
            if is_mask {
                let v = sample(row, x);
                let paint = if decode_inverted { v == 1 } else { v == 0 };
                pixels.push(paint.then_some(fill));
                continue;
            }
            let mut vals = [0f64; 4];
            for (c, val) in vals.iter_mut().enumerate().take(comps) {
                let raw = sample(row, x * comps + c) as f64;
                *val = if decode_inverted { 1.0 - raw / max } else { raw / max };
            }
            pixels.push(Some(space.to_rgb(&vals[..comps], max)));
        }
    }
    Ok(Some(DecodedImage { width, height, pixels }))
}

enum ColorSpace {
    Gray,
    Rgb,
    Cmyk,
    /// Tint (1 = full ink) rendered as gray.
    Separation,
    Indexed {
        base: Box<ColorSpace>,
        lookup: Vec<u8>,
    },
}

impl ColorSpace {
    fn components(&self) -> usize {
        match self {
            ColorSpace::Gray | ColorSpace::Separation | ColorSpace::Indexed { .. } => 1,
            ColorSpace::Rgb => 3,
            ColorSpace::Cmyk => 4,
        }
    }

    fn to_rgb(&self, v: &[f64], max: f64) -> Rgb {
        let c = |x: f64| (x.clamp(0.0, 1.0) * 255.0).round() as u8;
        match self {
            ColorSpace::Gray => [c(v[0]); 3],
            ColorSpace::Separation => [c(1.0 - v[0]); 3],
            ColorSpace::Rgb => [c(v[0]), c(v[1]), c(v[2])],
            ColorSpace::Cmyk => color_from(v).unwrap_or(WHITE),
            ColorSpace::Indexed { base, lookup } => {
                let n = base.components();
                let index = (v[0] * max).round() as usize;
                let entry: Vec<f64> =
                    (0..n).map(|k| lookup.get(index * n + k).copied().unwrap_or(0) as f64 / 255.0).collect();
                base.to_rgb(&entry, 255.0)
            }
        }
    }
}

fn color_space(doc: &Document, obj: Option<&Object>) -> ColorSpace {
    let Some(obj) = obj else { return ColorSpace::Gray };
    match obj {
        Object::Name(n) => match n.as_slice() {
            b"DeviceRGB" | b"CalRGB" | b"RGB" => ColorSpace::Rgb,
            b"DeviceCMYK" | b"CMYK" => ColorSpace::Cmyk,
            _ => ColorSpace::Gray,
        },
        Object::Array(a) => match a.first().and_then(Object::as_name) {
            Some(b"ICCBased") => {
                let n = a
                    .get(1)
                    .map(|s| doc.resolve(s))
                    .and_then(Object::as_dict)
                    .and_then(|d| doc.get(d, b"N"))
                    .and_then(Object::as_i64)
                    .unwrap_or(3);
                match n {
                    1 => ColorSpace::Gray,
                    4 => ColorSpace::Cmyk,
                    _ => ColorSpace::Rgb,
                }
            }
            Some(b"CalRGB") | Some(b"Lab") => ColorSpace::Rgb,
            Some(b"CalGray") => ColorSpace::Gray,
            Some(b"Separation") | Some(b"DeviceN") => ColorSpace::Separation,
            Some(b"Indexed") | Some(b"I") => {
                let base = color_space(doc, a.get(1).map(|b| doc.resolve(b)));
                let lookup = match a.get(3).map(|l| doc.resolve(l)) {
                    Some(Object::Str(s)) => s.clone(),
                    Some(Object::Stream(s)) => doc.decode_stream(s).unwrap_or_default(),
                    _ => Vec::new(),
                };
                ColorSpace::Indexed { base: Box::new(base), lookup }
            }
            _ => ColorSpace::Gray,
        },
        Object::Ref(..) => color_space(doc, Some(doc.resolve(obj))),
        _ => ColorSpace::Gray,
    }
}

#[cfg(test)]
mod tests {
    use super::super::{testpdf, PdfDocument};

    fn dark_pixels(img: &image::RgbImage) -> usize {
        img.pixels().filter(|p| p.0.iter().all(|c| *c < 128)).count()
    }

    #[test]
    fn filled_rectangle_lands_where_expected() {
        // 200x100 pt page, rectangle from (10, 10) size 20x30 in PDF space.
        let pdf = testpdf::build(&["0 0 0 rg 10 10 20 30 re f"], "<< >>", &[]);
        let doc = PdfDocument::parse(&pdf).unwrap();
        let img = doc.render_page(0, 72).unwrap();
        assert_eq!(dark_pixels(&img), 20 * 30);
        // PDF y=10..40 maps to rows 60..90 from the top.
        assert_eq!(img.get_pixel(15, 70).0, [0, 0, 0]);
        assert_eq!(img.get_pixel(15, 50).0, [255, 255, 255]);
    }

    #[test]
    fn text_draws_ink() {
        let pdf = testpdf::build(
            &["BT /F1 24 Tf 20 40 Td (HbA1c 7.2%) Tj ET"],
            "<< /Font << /F1 << /Type /Font /Subtype /Type1 /BaseFont /Courier >> >> >>",
            &[],
        );
        let doc = PdfDocument::parse(&pdf).unwrap();
        let img = doc.render_page(0, 72).unwrap();
        assert!(dark_pixels(&img) > 50);
        let invisible = testpdf::build(&["BT 3 Tr /F1 24 Tf 20 40 Td (HbA1c) Tj ET"], "<< >>", &[]);
        let img = PdfDocument::parse(&invisible).unwrap().render_page(0, 72).unwrap();
        assert_eq!(dark_pixels(&img), 0);
    }

    #[test]
    fn embedded_gray_image_is_scaled_into_place() {
        // 2x2 gray image: black, white / white, black; placed at 0,0 size 100x100.
        let image = "<< /Type /XObject /Subtype /Image /Width 2 /Height 2 /ColorSpace /DeviceGray /BitsPerComponent 8 /Length 4 >>\nstream\n\u{0}\u{ff}\u{ff}\u{0}\nendstream";
        // The literal must be raw bytes; build it by hand below.
        let pdf = testpdf::build(&["q 100 0 0 100 0 0 cm /Im1 Do Q"], "<< /XObject << /Im1 100 0 R >> >>", &[image]);
        let pdf = fix_bytes(pdf);
        let doc = PdfDocument::parse(&pdf).unwrap();
        let img = doc.render_page(0, 72).unwrap();
        // Top-left quadrant of the image (rows 0..50) is black.
        assert_eq!(img.get_pixel(10, 10).0, [0, 0, 0]);
        assert_eq!(img.get_pixel(60, 10).0, [255, 255, 255]);
        assert_eq!(img.get_pixel(60, 60).0, [0, 0, 0]);
        assert_eq!(img.get_pixel(150, 60).0, [255, 255, 255]);
    }

    /// Replaces UTF-8 encodings of U+0000 and U+00FF with single bytes.
    fn fix_bytes(pdf: Vec<u8>) -> Vec<u8> {
        let text = String::from_utf8(pdf).unwrap();
        let mut out = Vec::new();
        for c in text.chars() {
            match c {
                '\u{ff}' => out.push(0xff),
                c => {
                    let mut buf = [0; 4];
                    out.extend_from_slice(c.encode_utf8(&mut buf).as_bytes());
                }
            }
        }
        out
    }

    #[test]
    fn to_unicode_ranges() {
        let cmap = b"begincmap 1 beginbfchar <0003> <0020> endbfchar 1 beginbfrange <0010> <0012> <0041> endbfrange";
        let map = super::parse_to_unicode(cmap);
        assert_eq!(map[&3], ' ');
        assert_eq!(map[&0x11], 'B');
    }
}
