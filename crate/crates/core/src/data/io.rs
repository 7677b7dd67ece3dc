//! Patch files (PGM/PPM, plain or raw, 8-bit) and the `id,label,path`
//! manifest.

use std::fs;
use std::path::{Path, PathBuf};

use super::{Dataset, Example, Label, SplitTag};
use crate::error::{Error, Result};
use crate::meta::ArtifactMeta;
use crate::numerics::Tensor;

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const PATCH_DIR: &str = "patches";

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self) -> Option<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos]).ok()?.parse().ok()
    }
}

/// Decodes a P2/P3/P5/P6 image into a `[C, H, W]` tensor scaled by maxval.
pub fn decode_pnm(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let bad = |m: &str| Error::parse(path, m.to_string());
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(bad("not a PGM/PPM file"));
    }
    let (channels, raw) = match bytes[1] {
        b'2' => (1, false),
        b'3' => (3, false),
        b'5' => (1, true),
        b'6' => (3, true),
        _ => return Err(bad("unsupported PNM variant, expected P2, P3, P5 or P6")),
    };
    let mut h = Header { bytes, pos: 2 };
    let width = h.number().ok_or_else(|| bad("missing width"))?;
    let height = h.number().ok_or_else(|| bad("missing height"))?;
    let maxval = h.number().ok_or_else(|| bad("missing maxval"))?;
    if width == 0 || height == 0 {
        return Err(bad("empty image"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(bad(&format!("maxval {maxval} is not 8-bit")));
    }
    let count = width * height * channels;
    let samples: Vec<usize> = if raw {
        // exactly one whitespace byte separates the header from the raster
        let start = h.pos + 1;
        let raster = bytes.get(start..).ok_or_else(|| bad("missing raster"))?;
        if raster.len() != count {
            return Err(bad(&format!("raster has {} bytes, expected {count}", raster.len())));
        }
        raster.iter().map(|&b| b as usize).collect()
    } else {
        let mut out = Vec::with_capacity(count);
        for i in 0..count {
            out.push(h.number().ok_or_else(|| bad(&format!("missing sample {i}")))?);
        }
        h.skip_space_and_comments();
        if h.pos != bytes.len() {
            return Err(bad("trailing data after raster"));
        }
        out
    };
    if let Some(s) = samples.iter().find(|&&s| s > maxval) {
        return Err(bad(&format!("sample {s} exceeds maxval {maxval}")));
    }
    // interleaved HWC to planar CHW
    let mut data = vec![0.0; count];
    for y in 0..height {
        for x in 0..width {
            for c in 0..channels {
                data[(c * height + y) * width + x] = samples[(y * width + x) * channels + c] as f64 / maxval as f64;
            }
        }
    }
    Ok(Tensor::from_parts(vec![channels, height, width], data))
}

/// Raw P5 (one channel) or P6 (three channels) with maxval 255.
pub fn encode_pnm(patch: &Tensor, comment: Option<&str>) -> Result<Vec<u8>> {
    let s = patch.shape();
    if s.len() != 3 || (s[0] != 1 && s[0] != 3) {
        return Err(Error::Shape(format!("cannot encode patch of shape {s:?} as PGM/PPM")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut out = format!("P{}\n", if c == 1 { 5 } else { 6 }).into_bytes();
    if let Some(line) = comment {
        out.extend_from_slice(line.as_bytes());
        out.push(b'\n');
    }
    out.extend_from_slice(format!("{w} {h}\n255\n").as_bytes());
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let v = patch.data()[(ch * h + y) * w + x];
                out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    Ok(out)
}

pub fn read_patch(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pnm(&bytes, path)
}

pub fn write_patch(path: &Path, patch: &Tensor, comment: Option<&str>) -> Result<()> {
    fs::write(path, encode_pnm(patch, comment)?).map_err(|e| Error::io(path, e))
}

fn parse_label(s: &str) -> Option<Label> {
    match s.trim() {
        "1" => Some(Label::Positive),
        "0" => Some(Label::Negative),
        "unlabeled" => Some(Label::Unlabeled),
        _ => None,
    }
}

fn label_field(label: Label) -> Result<&'static str> {
    match label {
        Label::Positive => Ok("1"),
        Label::Negative => Ok("0"),
        Label::Unlabeled => Ok("unlabeled"),
        _ => Err(Error::Validation("pseudo labels are never written to manifests".into())),
    }
}

/// Loads a manifest. Paths are relative to the manifest's directory; lines
/// starting with `#` are comments. When `expected` is given every patch must
/// have that `[C, H, W]` shape, otherwise all patches must match the first.
pub fn load_dataset(manifest: &Path, expected: Option<[usize; 3]>) -> Result<Dataset> {
    let base = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(manifest)
        .map_err(|e| Error::parse(manifest, e.to_string()))?;
    let headers = reader.headers().map_err(|e| Error::parse(manifest, e.to_string()))?;
    if headers.iter().collect::<Vec<_>>() != ["id", "label", "path"] {
        return Err(Error::parse(manifest, format!("header must be `id,label,path`, got `{}`", headers.iter().collect::<Vec<_>>().join(","))));
    }
    let mut expected = expected.map(|e| e.to_vec());
    let mut examples = Vec::new();
    let mut seen = std::collections::HashMap::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let err = |m: String| Error::parse(manifest, format!("row {row}: {m}"));
        let record = record.map_err(|e| err(e.to_string()))?;
        if record.len() != 3 {
            return Err(err(format!("expected 3 fields, got {}", record.len())));
        }
        let id = record[0].to_string();
        if id.is_empty() {
            return Err(err("empty id".into()));
        }
        if let Some(prev) = seen.insert(id.clone(), row) {
            return Err(err(format!("duplicate id {id} (first seen on row {prev})")));
        }
        let label = parse_label(&record[1])
            .ok_or_else(|| err(format!("label `{}` is not one of 0, 1, unlabeled", &record[1])))?;
        let path: PathBuf = base.join(&record[2]);
        if !path.is_file() {
            return Err(err(format!("missing patch file {}", path.display())));
        }
        let patch = read_patch(&path).map_err(|e| err(e.to_string()))?;
        match &expected {
            Some(shape) if shape.as_slice() != patch.shape() => {
                return Err(err(format!("patch shape {:?} does not match expected {shape:?}", patch.shape())));
            }
            Some(_) => {}
            None => expected = Some(patch.shape().to_vec()),
        }
        examples.push(Example::new(id, patch, label).map_err(|e| err(e.to_string()))?);
    }
    Dataset::new(examples, SplitTag::Train)
}

/// Writes `<dir>/patches/<id>.pgm|ppm` and `<dir>/manifest.csv`, each
/// stamped with `meta`. Returns the manifest path.
pub fn save_dataset(d: &Dataset, dir: &Path, meta: &ArtifactMeta) -> Result<PathBuf> {
    let patch_dir = dir.join(PATCH_DIR);
    fs::create_dir_all(&patch_dir).map_err(|e| Error::io(&patch_dir, e))?;
    let comment = meta.comment_line();
    let mut manifest = format!("{comment}\nid,label,path\n");
    for e in d.examples() {
        let ext = if e.patch().shape()[0] == 1 { "pgm" } else { "ppm" };
        let rel = format!("{PATCH_DIR}/{}.{ext}", e.id());
        write_patch(&dir.join(&rel), e.patch(), Some(&comment))?;
        manifest.push_str(&format!("{},{},{rel}\n", e.id(), label_field(e.label())?));
    }
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
