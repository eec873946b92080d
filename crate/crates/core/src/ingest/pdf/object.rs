//! PDF object model and parser.
//!
//! Objects are located by scanning for `N G obj` headers rather than by
//! trusting the cross-reference table, which also copes with files whose
//! xref offsets are stale. Compressed object streams are expanded.

use std::collections::{BTreeMap, HashMap};
use std::io::Read;

use super::PdfError;

pub type Dict = BTreeMap<Vec<u8>, Object>;

#[derive(Debug, Clone, PartialEq)]
pub enum Object {
    Null,
    Bool(bool),
    Int(i64),
    Real(f64),
    Str(Vec<u8>),
    Name(Vec<u8>),
    Array(Vec<Object>),
    Dict(Dict),
    Stream(Stream),
    Ref(u32, u16),
    /// Content-stream operator.
    Op(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stream {
    pub dict: Dict,
    pub raw: Vec<u8>,
}

impl Object {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Object::Int(i) => Some(*i as f64),
            Object::Real(r) => Some(*r),
            _ => None,
        }
    }

    pub fn as_i64(&self) -> Option<i64> {
        match self {
            Object::Int(i) => Some(*i),
            Object::Real(r) => Some(*r as i64),
            _ => None,
        }
    }

    pub fn as_name(&self) -> Option<&[u8]> {
        match self {
            Object::Name(n) => Some(n),
            _ => None,
        }
    }

    pub fn as_dict(&self) -> Option<&Dict> {
        match self {
            Object::Dict(d) => Some(d),
            Object::Stream(s) => Some(&s.dict),
            _ => None,
        }
    }

    pub fn as_array(&self) -> Option<&[Object]> {
        match self {
            Object::Array(a) => Some(a),
            _ => None,
        }
    }
}

pub struct Lexer<'a> {
    pub data: &'a [u8],
    pub pos: usize,
}

fn is_white(b: u8) -> bool {
    matches!(b, b' ' | b'\t' | b'\r' | b'\n' | b'\x0c' | b'\0')
}

fn is_delim(b: u8) -> bool {
    matches!(b, b'(' | b')' | b'<' | b'>' | b'[' | b']' | b'{' | b'}' | b'/' | b'%')
}

impl<'a> Lexer<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        Lexer { data, pos: 0 }
    }

    fn peek(&self) -> Option<u8> {
        self.data.get(self.pos).copied()
    }

    pub fn skip_ws(&mut self) {
        while let Some(b) = self.peek() {
            if is_white(b) {
                self.pos += 1;
            } else if b == b'%' {
                while let Some(c) = self.peek() {
                    if c == b'\n' || c == b'\r' {
                        break;
                    }
                    self.pos += 1;
                }
            } else {
                break;
            }
        }
    }

    fn regular(&mut self) -> &'a [u8] {
        let start = self.pos;
        while let Some(b) = self.peek() {
            if is_white(b) || is_delim(b) {
                break;
            }
            self.pos += 1;
        }
        &self.data[start..self.pos]
    }

    fn literal_string(&mut self) -> Result<Vec<u8>, String> {
        // Opening parenthesis already consumed.
        let mut out = Vec::new();
        let mut depth = 1;
        while let Some(b) = self.peek() {
            self.pos += 1;
            match b {
                b'(' => {
                    depth += 1;
                    out.push(b);
                }
                b')' => {
                    depth -= 1;
                    if depth == 0 {
                        return Ok(out);
                    }
                    out.push(b);
                }
                b'\\' => {
                    let Some(e) = self.peek() else { break };
                    self.pos += 1;
                    match e {
                        b'n' => out.push(b'\n'),
                        b'r' => out.push(b'\r'),
                        b't' => out.push(b'\t'),
                        b'b' => out.push(8),
                        b'f' => out.push(12),
                        b'\r' => {
                            if self.peek() == Some(b'\n') {
                                self.pos += 1;
                            }
                        }
                        b'\n' => {}
                        b'0'..=b'7' => {
                            let mut v = (e - b'0') as u32;
                            for _ in 0..2 {
                                match self.peek() {
                                    Some(d @ b'0'..=b'7') => {
                                        v = v * 8 + (d - b'0') as u32;
                                        self.pos += 1;
                                    }
                                    _ => break,
                                }
                            }
                            out.push(v as u8);
                        }
                        other => out.push(other),
                    }
                }
                _ => out.push(b),
            }
        }
        Err("unterminated string".into())
    }

    fn hex_string(&mut self) -> Result<Vec<u8>, String> {
        let mut digits = Vec::new();
        while let Some(b) = self.peek() {
            self.pos += 1;
            if b == b'>' {
                if digits.len() % 2 == 1 {
                    digits.push(b'0');
                }
                return Ok(digits.chunks(2).map(|p| (hex_val(p[0]) << 4) | hex_val(p[1])).collect());
            }
            if b.is_ascii_hexdigit() {
                digits.push(b);
            }
        }
        Err("unterminated hex string".into())
    }

    fn name(&mut self) -> Vec<u8> {
        let raw = self.regular();
        let mut out = Vec::with_capacity(raw.len());
        let mut i = 0;
        while i < raw.len() {
            if raw[i] == b'#' && i + 2 < raw.len() && raw[i + 1].is_ascii_hexdigit() && raw[i + 2].is_ascii_hexdigit() {
                out.push((hex_val(raw[i + 1]) << 4) | hex_val(raw[i + 2]));
                i += 3;
            } else {
                out.push(raw[i]);
                i += 1;
            }
        }
        out
    }

    /// Next object. References (`N G R`) are folded; unknown keywords are
    /// returned as operators.
    pub fn object(&mut self) -> Result<Option<Object>, String> {
        self.skip_ws();
        let Some(b) = self.peek() else { return Ok(None) };
        let obj = match b {
            b'/' => {
                self.pos += 1;
                Object::Name(self.name())
            }
            b'(' => {
                self.pos += 1;
                Object::Str(self.literal_string()?)
            }
            b'<' => {
                if self.data.get(self.pos + 1) == Some(&b'<') {
                    self.pos += 2;
                    Object::Dict(self.dict_body()?)
                } else {
                    self.pos += 1;
                    Object::Str(self.hex_string()?)
                }
            }
            b'[' => {
                self.pos += 1;
                let mut items = Vec::new();
                loop {
                    self.skip_ws();
                    match self.peek() {
                        Some(b']') => {
                            self.pos += 1;
                            break;
                        }
                        None => return Err("unterminated array".into()),
                        _ => match self.object()? {
                            Some(o) => items.push(o),
                            None => return Err("unterminated array".into()),
                        },
                    }
                }
                Object::Array(items)
            }
            b']' | b'>' | b')' | b'{' | b'}' => {
                self.pos += 1;
                Object::Op(vec![b])
            }
            _ => {
                let word = self.regular();
                if word.is_empty() {
                    self.pos += 1;
                    return self.object();
                }
                match word {
                    b"true" => Object::Bool(true),
                    b"false" => Object::Bool(false),
                    b"null" => Object::Null,
                    _ => parse_number(word).map_or_else(|| Object::Op(word.to_vec()), |n| self.maybe_ref(n)),
                }
            }
        };
        Ok(Some(obj))
    }

    fn maybe_ref(&mut self, first: Object) -> Object {
        let Object::Int(num) = first else { return first };
        let save = self.pos;
        self.skip_ws();
        let gen = self.regular();
        if let Some(Object::Int(g)) = parse_number(gen) {
            self.skip_ws();
            if self.peek() == Some(b'R') && self.data.get(self.pos + 1).is_none_or(|b| is_white(*b) || is_delim(*b)) {
                self.pos += 1;
                if num >= 0 && (0..=u16::MAX as i64).contains(&g) {
                    return Object::Ref(num as u32, g as u16);
                }
            }
        }
        self.pos = save;
        Object::Int(num)
    }

    fn dict_body(&mut self) -> Result<Dict, String> {
        let mut dict = Dict::new();
        loop {
            self.skip_ws();
            if self.data[self.pos..].starts_with(b">>") {
                self.pos += 2;
                return Ok(dict);
            }
            let key = match self.object()? {
                Some(Object::Name(n)) => n,
                Some(_) => continue,
                None => return Err("unterminated dictionary".into()),
            };
            self.skip_ws();
            if self.data[self.pos..].starts_with(b">>") {
                self.pos += 2;
                return Ok(dict);
            }
            match self.object()? {
                Some(v) => {
                    dict.insert(key, v);
                }
                None => return Err("unterminated dictionary".into()),
            }
        }
    }
}

fn hex_val(b: u8) -> u8 {
    match b {
        b'0'..=b'9' => b - b'0',
        b'a'..=b'f' => b - b'a' + 10,
        b'A'..=b'F' => b - b'A' + 10,
        _ => 0,
    }
}

fn parse_number(word: &[u8]) -> Option<Object> {
    let s = std::str::from_utf8(word).ok()?;
    let first = *word.first()?;
    if !(first.is_ascii_digit() || first == b'-' || first == b'+' || first == b'.') {
        return None;
    }
    if let Ok(i) = s.parse::<i64>() {
        return Some(Object::Int(i));
    }
    s.parse::<f64>().ok().filter(|f| f.is_finite()).map(Object::Real)
}

/// A parsed document: every object by number, plus the trailer.
pub struct Document {
    pub objects: HashMap<u32, Object>,
    pub trailer: Dict,
}

fn find(haystack: &[u8], needle: &[u8], from: usize) -> Option<usize> {
    if from >= haystack.len() {
        return None;
    }
    haystack[from..].windows(needle.len()).position(|w| w == needle).map(|p| p + from)
}

impl Document {
    pub fn parse(data: &[u8]) -> Result<Document, PdfError> {
        let header = find(&data[..data.len().min(1024)], b"%PDF-", 0)
            .ok_or_else(|| PdfError::Corrupt("missing %PDF header".into()))?;
        let mut objects = HashMap::new();
        let mut trailer = Dict::new();

        let mut pos = header;
        while let Some(at) = find(data, b"obj", pos) {
            pos = at + 3;
            // Must be "N G obj" with "obj" as a whole word.
            if data.get(at + 3).is_some_and(|b| !is_white(*b) && !is_delim(*b)) {
                continue;
            }
            let Some(num) = object_header(data, at) else { continue };
            let mut lexer = Lexer::new(data);
            lexer.pos = at + 3;
            let Ok(Some(obj)) = lexer.object() else { continue };
            let obj = match obj {
                Object::Dict(dict) => {
                    lexer.skip_ws();
                    if data[lexer.pos..].starts_with(b"stream") {
                        let raw = stream_data(data, lexer.pos + 6, &dict, &objects);
                        pos = lexer.pos + 6 + raw.len();
                        Object::Stream(Stream { dict, raw })
                    } else {
                        pos = lexer.pos;
                        Object::Dict(dict)
                    }
                }
                other => {
                    pos = lexer.pos;
                    other
                }
            };
            if let Object::Stream(s) = &obj {
                if s.dict.get(b"Type".as_slice()).and_then(Object::as_name) == Some(b"XRef") {
                    merge_trailer(&mut trailer, &s.dict);
                }
            }
            // Later definitions (incremental updates) win.
            objects.insert(num, obj);
        }

        let mut search = 0;
        while let Some(at) = find(data, b"trailer", search) {
            search = at + 7;
            let mut lexer = Lexer::new(data);
            lexer.pos = at + 7;
            if let Ok(Some(Object::Dict(d))) = lexer.object() {
                merge_trailer(&mut trailer, &d);
            }
        }
        if objects.is_empty() {
            return Err(PdfError::Corrupt("no objects found".into()));
        }

        let mut doc = Document { objects, trailer };
        doc.expand_object_streams();
        Ok(doc)
    }

    fn expand_object_streams(&mut self) {
        let streams: Vec<Stream> = self
            .objects
            .values()
            .filter_map(|o| match o {
                Object::Stream(s) if s.dict.get(b"Type".as_slice()).and_then(Object::as_name) == Some(b"ObjStm") => {
                    Some(s.clone())
                }
                _ => None,
            })
            .collect();
        for stream in streams {
            let Ok(data) = self.decode_stream(&stream) else { continue };
            let n = stream.dict.get(b"N".as_slice()).and_then(Object::as_i64).unwrap_or(0).max(0) as usize;
            let first = stream.dict.get(b"First".as_slice()).and_then(Object::as_i64).unwrap_or(0).max(0) as usize;
            let mut lexer = Lexer::new(&data);
            let mut entries = Vec::with_capacity(n);
            for _ in 0..n {
                let (Ok(Some(num)), Ok(Some(off))) = (lexer.object(), lexer.object()) else { break };
                if let (Some(num), Some(off)) = (num.as_i64(), off.as_i64()) {
                    entries.push((num as u32, off as usize));
                }
            }
            for (num, off) in entries {
                if self.objects.contains_key(&num) {
                    continue;
                }
                let mut lexer = Lexer::new(&data);
                lexer.pos = first + off;
                if let Ok(Some(obj)) = lexer.object() {
                    self.objects.insert(num, obj);
                }
            }
        }
    }

    pub fn resolve<'a>(&'a self, obj: &'a Object) -> &'a Object {
        let mut current = obj;
        for _ in 0..32 {
            match current {
                Object::Ref(n, _) => match self.objects.get(n) {
                    Some(o) => current = o,
                    None => return &Object::Null,
                },
                other => return other,
            }
        }
        &Object::Null
    }

    pub fn get<'a>(&'a self, dict: &'a Dict, key: &[u8]) -> Option<&'a Object> {
        dict.get(key).map(|o| self.resolve(o)).filter(|o| !matches!(o, Object::Null))
    }

    pub fn is_encrypted(&self) -> bool {
        self.trailer.contains_key(b"Encrypt".as_slice())
    }

    /// Applies the stream's filters. DCT and JPX data are returned as is.
    pub fn decode_stream(&self, stream: &Stream) -> Result<Vec<u8>, PdfError> {
        let filters: Vec<Vec<u8>> = match self.get(&stream.dict, b"Filter") {
            Some(Object::Name(n)) => vec![n.clone()],
            Some(Object::Array(a)) => a.iter().filter_map(|o| self.resolve(o).as_name().map(<[u8]>::to_vec)).collect(),
            _ => Vec::new(),
        };
        let params: Vec<Option<&Dict>> = match self.get(&stream.dict, b"DecodeParms") {
            Some(Object::Dict(d)) => vec![Some(d)],
            Some(Object::Array(a)) => a.iter().map(|o| self.resolve(o).as_dict()).collect(),
            _ => Vec::new(),
        };
        let mut data = stream.raw.clone();
        for (i, filter) in filters.iter().enumerate() {
            data = match filter.as_slice() {
                b"FlateDecode" | b"Fl" => {
                    let inflated = inflate(&data)?;
                    match params.get(i).copied().flatten() {
                        Some(p) => apply_predictor(self, inflated, p)?,
                        None => inflated,
                    }
                }
                b"ASCIIHexDecode" | b"AHx" => {
                    let mut lexer = Lexer::new(&data);
                    lexer.hex_string().map_err(PdfError::Corrupt)?
                }
                b"ASCII85Decode" | b"A85" => ascii85(&data)?,
                b"DCTDecode" | b"DCT" | b"JPXDecode" => return Ok(data),
                other => {
                    return Err(PdfError::UnsupportedFeature(format!(
                        "stream filter {}",
                        String::from_utf8_lossy(other)
                    )))
                }
            };
        }
        Ok(data)
    }

    pub fn last_filter(&self, stream: &Stream) -> Option<Vec<u8>> {
        match self.get(&stream.dict, b"Filter") {
            Some(Object::Name(n)) => Some(n.clone()),
            Some(Object::Array(a)) => a.last().and_then(|o| self.resolve(o).as_name().map(<[u8]>::to_vec)),
            _ => None,
        }
    }
}

fn merge_trailer(trailer: &mut Dict, from: &Dict) {
    for (k, v) in from {
        trailer.entry(k.clone()).or_insert_with(|| v.clone());
    }
}

/// Parses the "N G" preceding an `obj` keyword at `at`.
fn object_header(data: &[u8], at: usize) -> Option<u32> {
    let mut i = at;
    let skip_back_ws = |i: &mut usize| {
        while *i > 0 && is_white(data[*i - 1]) {
            *i -= 1;
        }
    };
    let digits_back = |i: &mut usize| {
        let end = *i;
        while *i > 0 && data[*i - 1].is_ascii_digit() {
            *i -= 1;
        }
        (end > *i).then(|| std::str::from_utf8(&data[*i..end]).ok()?.parse::<u64>().ok()).flatten()
    };
    skip_back_ws(&mut i);
    digits_back(&mut i)?;
    skip_back_ws(&mut i);
    let num = digits_back(&mut i)?;
    if i > 0 && !is_white(data[i - 1]) && !is_delim(data[i - 1]) {
        return None;
    }
    u32::try_from(num).ok()
}

fn stream_data(data: &[u8], mut start: usize, dict: &Dict, objects: &HashMap<u32, Object>) -> Vec<u8> {
    if data.get(start) == Some(&b'\r') {
        start += 1;
    }
    if data.get(start) == Some(&b'\n') {
        start += 1;
    }
    let declared = match dict.get(b"Length".as_slice()) {
        Some(Object::Int(n)) => Some(*n),
        Some(Object::Ref(n, _)) => objects.get(n).and_then(Object::as_i64),
        _ => None,
    };
    if let Some(len) = declared.and_then(|l| usize::try_from(l).ok()) {
        let end = start.saturating_add(len);
        if end <= data.len() {
            let mut after = end;
            while after < data.len() && is_white(data[after]) {
                after += 1;
            }
            if data[after..].starts_with(b"endstream") {
                return data[start..end].to_vec();
            }
        }
    }
    let end = find(data, b"endstream", start).unwrap_or(data.len());
    let mut trimmed = end;
    if trimmed > start && data[trimmed - 1] == b'\n' {
        trimmed -= 1;
    }
    if trimmed > start && data[trimmed - 1] == b'\r' {
        trimmed -= 1;
    }
    data[start..trimmed].to_vec()
}

fn inflate(data: &[u8]) -> Result<Vec<u8>, PdfError> {
    let mut out = Vec::new();
    let mut decoder = flate2::read::ZlibDecoder::new(data);
    match decoder.read_to_end(&mut out) {
        Ok(_) => Ok(out),
        // Truncated streams are common; keep what was recovered.
        Err(_) if !out.is_empty() => Ok(out),
        Err(e) => Err(PdfError::Corrupt(format!("flate stream: {e}"))),
    }
}

fn apply_predictor(doc: &Document, data: Vec<u8>, params: &Dict) -> Result<Vec<u8>, PdfError> {
    let int = |key: &[u8], default: i64| doc.get(params, key).and_then(Object::as_i64).unwrap_or(default);
    let predictor = int(b"Predictor", 1);
    if predictor < 10 {
        if predictor == 2 {
            return Err(PdfError::UnsupportedFeature("TIFF predictor".into()));
        }
        return Ok(data);
    }
    let colors = int(b"Colors", 1).max(1) as usize;
    let bpc = int(b"BitsPerComponent", 8).max(1) as usize;
    let columns = int(b"Columns", 1).max(1) as usize;
    let bpp = (colors * bpc).div_ceil(8);
    let row_len = (colors * bpc * columns).div_ceil(8);
    let mut out = Vec::with_capacity(data.len());
    let mut prev = vec![0u8; row_len];
    for chunk in data.chunks(row_len + 1) {
        if chunk.len() < 2 {
            break;
        }
        let kind = chunk[0];
        let mut row = chunk[1..].to_vec();
        row.resize(row_len, 0);
        for i in 0..row_len {
            let left = if i >= bpp { row[i - bpp] } else { 0 };
            let up = prev[i];
            let up_left = if i >= bpp { prev[i - bpp] } else { 0 };
            row[i] = match kind {
                0 => row[i],
                1 => row[i].wrapping_add(left),
                2 => row[i].wrapping_add(up),
                3 => row[i].wrapping_add(((left as u16 + up as u16) / 2) as u8),
                4 => row[i].wrapping_add(paeth(left, up, up_left)),
                _ => return Err(PdfError::Corrupt(format!("bad PNG predictor {kind}"))),
            };
        }
        out.extend_from_slice(&row);
        prev = row;
    }
    Ok(out)
}

fn paeth(a: u8, b: u8, c: u8) -> u8 {
    let p = a as i16 + b as i16 - c as i16;
    let (pa, pb, pc) = ((p - a as i16).abs(), (p - b as i16).abs(), (p - c as i16).abs());
    if pa <= pb && pa <= pc {
        a
    } else if pb <= pc {
        b
    } else {
        c
    }
}

fn ascii85(data: &[u8]) -> Result<Vec<u8>, PdfError> {
    let mut out = Vec::new();
    let mut group = [0u8; 5];
    let mut n = 0;
    let body = data.strip_prefix(b"<~").unwrap_or(data);
    for &b in body {
        match b {
            b'~' => break,
            b'z' if n == 0 => out.extend_from_slice(&[0; 4]),
            b'!'..=b'u' => {
                group[n] = b - b'!';
                n += 1;
                if n == 5 {
                    let v = group.iter().fold(0u64, |acc, d| acc * 85 + *d as u64);
                    if v > u32::MAX as u64 {
                        return Err(PdfError::Corrupt("ASCII85 group overflow".into()));
                    }
                    out.extend_from_slice(&(v as u32).to_be_bytes());
                    n = 0;
                }
            }
            _ if is_white(b) => {}
            _ => return Err(PdfError::Corrupt("invalid ASCII85 byte".into())),
        }
    }
    if n > 1 {
        for d in group.iter_mut().skip(n) {
            *d = 84;
        }
        let v = group.iter().fold(0u64, |acc, d| acc * 85 + *d as u64) as u32;
        out.extend_from_slice(&v.to_be_bytes()[..n - 1]);
    }
    Ok(out)
}
