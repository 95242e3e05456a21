//! Line-delimited dataset manifests.
//!
//! A manifest file is a JSON header line (version, kind, classes) followed
//! by one JSON record per line. Records reference images either inline
//! (raw float arrays) or through `scene:` strings rendered on demand, so
//! manifests stay small, diffable, and free of image-codec dependencies.

use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{DataError, Result};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Captions,
    SingleLabel,
    MultiLabel,
    Vqa,
    PairReasoning,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// Image reference: a renderable string (`scene:...`) or an inline array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ImageRef {
    Ref(String),
    Inline { h: usize, w: usize, c: usize, data: Vec<f64> },
}

impl ImageRef {
    /// Identity used for ITM negative sampling and image counting.
    pub fn id(&self) -> String {
        match self {
            ImageRef::Ref(s) => s.clone(),
            ImageRef::Inline { h, w, c, data } => {
                // cheap content fingerprint; inline images are toy-sized
                let mut acc: u64 = (*h as u64) << 40 ^ (*w as u64) << 20 ^ *c as u64;
                for v in data {
                    acc = acc.rotate_left(7) ^ v.to_bits();
                }
                format!("inline:{acc:016x}")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExampleRecord {
    pub id: String,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<ImageRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_left: Option<ImageRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_right: Option<ImageRef>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub texts: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidences: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_class: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    kind: DatasetKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    classes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub kind: DatasetKind,
    /// Class names for vqa / pair_reasoning tasks; empty otherwise.
    pub classes: Vec<String>,
    pub records: Vec<ExampleRecord>,
}

impl Manifest {
    pub fn new(kind: DatasetKind, classes: Vec<String>, records: Vec<ExampleRecord>) -> Result<Self> {
        let m = Manifest { kind, classes, records };
        m.validate()?;
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ExampleRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Same kind and classes, a different record list (for subset ops).
    pub fn with_records(&self, records: Vec<ExampleRecord>) -> Manifest {
        Manifest { kind: self.kind, classes: self.classes.clone(), records }
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(r.id.clone()) {
                return Err(DataError::DuplicateId(r.id.clone()));
            }
            let fail = |field: &'static str, msg: &str| {
                Err(DataError::Schema { id: r.id.clone(), field, msg: msg.to_string() })
            };
            match self.kind {
                DatasetKind::Captions => {
                    if r.image.is_none() {
                        return fail("image", "captions records need an image");
                    }
                    if r.texts.is_empty() {
                        return fail("texts", "captions records need at least one text");
                    }
                }
                DatasetKind::SingleLabel => {
                    if r.image.is_none() {
                        return fail("image", "single_label records need an image");
                    }
                    if r.class_label.is_none() {
                        return fail("class_label", "single_label records need a class label");
                    }
                }
                DatasetKind::MultiLabel => {
                    if r.image.is_none() {
                        return fail("image", "multi_label records need an image");
                    }
                    if r.texts.is_empty() {
                        return fail("texts", "multi_label records need label texts");
                    }
                    match &r.confidences {
                        None => return fail("confidences", "multi_label records need confidences"),
                        Some(c) if c.len() != r.texts.len() => {
                            return fail("confidences", "confidences must parallel texts")
                        }
                        _ => {}
                    }
                }
                DatasetKind::Vqa => {
                    if r.image.is_none() {
                        return fail("image", "vqa records need an image");
                    }
                    if r.texts.is_empty() {
                        return fail("texts", "vqa records need a question");
                    }
                    match r.gold_class {
                        None => return fail("gold_class", "vqa records need a gold class"),
                        Some(g) if g >= self.classes.len() => {
                            return fail("gold_class", "gold class out of range")
                        }
                        _ => {}
                    }
                }
                DatasetKind::PairReasoning => {
                    if r.image_left.is_none() || r.image_right.is_none() {
                        return fail("image_left", "pair records need two images");
                    }
                    if r.texts.is_empty() {
                        return fail("texts", "pair records need a statement");
                    }
                    match r.gold_class {
                        None => return fail("gold_class", "pair records need a gold class"),
                        Some(g) if g >= 2 => return fail("gold_class", "pair gold class must be binary"),
                        _ => {}
                    }
                }
            }
            if let Some(c) = &r.confidences {
                if c.len() != r.texts.len() {
                    return fail("confidences", "confidences must parallel texts");
                }
            }
        }
        Ok(())
    }
}

pub fn save_manifest(m: &Manifest, path: &Path) -> Result<()> {
    let io_err = |e: std::io::Error| DataError::Io { path: path.display().to_string(), source: e };
    let file = std::fs::File::create(path).map_err(io_err)?;
    let mut w = std::io::BufWriter::new(file);
    let header = Header {
        version: MANIFEST_VERSION,
        kind: m.kind,
        classes: m.classes.clone(),
    };
    let mut line = serde_json::to_string(&header).expect("header serializes");
    line.push('\n');
    w.write_all(line.as_bytes()).map_err(io_err)?;
    for r in &m.records {
        let mut line = serde_json::to_string(r).expect("record serializes");
        line.push('\n');
        w.write_all(line.as_bytes()).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let io_err = |e: std::io::Error| DataError::Io { path: path.display().to_string(), source: e };
    let file = std::fs::File::open(path).map_err(io_err)?;
    let reader = std::io::BufReader::new(file);
    let mut lines = reader.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| DataError::Header("empty manifest file".into()))?
        .map_err(io_err)?;
    let header: Header = serde_json::from_str(&header_line)
        .map_err(|e| DataError::Header(format!("bad header: {e}")))?;
    if header.version != MANIFEST_VERSION {
        return Err(DataError::Header(format!(
            "unsupported manifest version {} (expected {MANIFEST_VERSION})",
            header.version
        )));
    }
    let mut records = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        // parse loosely first so schema errors can name the record id
        let value: serde_json::Value = serde_json::from_str(&line)
            .map_err(|e| DataError::Header(format!("line {}: invalid json: {e}", lineno + 2)))?;
        let id = value
            .get("id")
            .and_then(|v| v.as_str())
            .unwrap_or("<missing id>")
            .to_string();
        let record: ExampleRecord = serde_json::from_value(value).map_err(|e| DataError::Schema {
            id,
            field: "record",
            msg: e.to_string(),
        })?;
        records.push(record);
    }
    Manifest::new(header.kind, header.classes, records)
}
