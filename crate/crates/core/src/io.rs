//! File formats: prediction and ground-truth JSON, f32 mask sidecars,
//! versioned JSON outputs and CSV tables.
//!
//! Every JSON document carries a top-level `"format_version": 1`.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::correction::{Distribution, PrecomputedClassifier};
use crate::error::{Error, Result};
use crate::eval::Taxonomy;
use crate::instance::{rle_decode, rle_encode, ClassLogits, GroundTruthInstance, InstancePrediction, MaskLogitGrid, RunLengthCounts};

pub const FORMAT_VERSION: u32 = 1;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Reads a JSON document, checks its version and deserializes it. Failures
/// name the offending field.
pub fn read_versioned<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::format(path, "<document>", e.to_string()))?;
    match value.get("format_version") {
        Some(v) if v.as_u64() == Some(FORMAT_VERSION as u64) => {}
        Some(v) => {
            return Err(Error::format(path, "format_version", format!("unsupported version {v}")));
        }
        None => return Err(Error::format(path, "format_version", "missing")),
    }
    serde_path_to_error::deserialize(value).map_err(|e| {
        let field = e.path().to_string();
        Error::format(path, field, e.into_inner().to_string())
    })
}

#[derive(Serialize)]
struct Versioned<'a, T: Serialize> {
    format_version: u32,
    #[serde(flatten)]
    body: &'a T,
}

/// Pretty-printed JSON of `body` with `format_version` prepended. `body` must
/// serialize as a map.
pub fn to_versioned_json<T: Serialize>(body: &T) -> Result<String> {
    let doc = Versioned {
        format_version: FORMAT_VERSION,
        body,
    };
    let mut s = serde_json::to_string_pretty(&doc).map_err(|e| Error::invalid(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub fn write_versioned<T: Serialize>(path: &Path, body: &T) -> Result<()> {
    let text = to_versioned_json(body)?;
    write_file(path, text.as_bytes())
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

/// Little-endian f32 raster, row-major. Values are narrowed to f32.
pub fn encode_sidecar(grid: &MaskLogitGrid) -> Vec<u8> {
    grid.values().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect()
}

pub fn decode_sidecar(bytes: &[u8], height: usize, width: usize) -> Result<MaskLogitGrid> {
    if bytes.len() != 4 * height * width {
        return Err(Error::LengthMismatch {
            expected: 4 * height * width,
            actual: bytes.len(),
        });
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    MaskLogitGrid::new(height, width, values)
}

/// How an instance's mask logits are stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MaskSource {
    /// Relative path of an f32 sidecar raster.
    Sidecar { sidecar: String },
    /// Binary mask plus one confidence `c` in `(0.5, 1)`; foreground pixels get
    /// logit `ln(c / (1 - c))`, background pixels its negation.
    Rle { rle: RunLengthCounts, confidence: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct InstanceRecord {
    id: String,
    class_logits: Vec<f64>,
    mask_logits: MaskSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PredictionRecord {
    image_id: String,
    height: usize,
    width: usize,
    num_classes: usize,
    class_names: Vec<String>,
    instances: Vec<InstanceRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedPrediction {
    pub id: String,
    pub prediction: InstancePrediction,
}

/// Predictions of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionFile {
    pub image_id: String,
    pub height: usize,
    pub width: usize,
    pub class_names: Vec<String>,
    pub instances: Vec<NamedPrediction>,
}

impl PredictionFile {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn predictions(&self) -> Vec<InstancePrediction> {
        self.instances.iter().map(|i| i.prediction.clone()).collect()
    }

    pub fn read(path: &Path) -> Result<Self> {
        let record: PredictionRecord = read_versioned(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let (h, w) = (record.height, record.width);
        if h == 0 || w == 0 {
            return Err(Error::format(path, "height", "grid dimensions must be positive"));
        }
        if record.class_names.len() != record.num_classes {
            return Err(Error::format(
                path,
                "class_names",
                format!("{} names for {} classes", record.class_names.len(), record.num_classes),
            ));
        }
        let mut instances = Vec::with_capacity(record.instances.len());
        for (k, inst) in record.instances.into_iter().enumerate() {
            let field = |name: &str| format!("instances[{k}].{name}");
            if inst.class_logits.len() != record.num_classes {
                return Err(Error::format(
                    path,
                    field("class_logits"),
                    format!("expected {} logits, found {}", record.num_classes, inst.class_logits.len()),
                ));
            }
            let class_logits =
                ClassLogits::new(inst.class_logits).map_err(|e| Error::format(path, field("class_logits"), e.to_string()))?;
            let mask_logits = match inst.mask_logits {
                MaskSource::Sidecar { sidecar } => {
                    let rel = Path::new(&sidecar);
                    if rel.is_absolute() {
                        return Err(Error::format(path, field("mask_logits.sidecar"), "path must be relative"));
                    }
                    let full = base.join(rel);
                    let bytes = fs::read(&full).map_err(io_err(&full))?;
                    decode_sidecar(&bytes, h, w)
                        .map_err(|e| Error::format(path, field("mask_logits.sidecar"), format!("{}: {e}", full.display())))?
                }
                MaskSource::Rle { rle, confidence } => {
                    if !(confidence > 0.5 && confidence < 1.0) {
                        return Err(Error::format(path, field("mask_logits.confidence"), "must lie in (0.5, 1)"));
                    }
                    let mask =
                        rle_decode(&rle, h, w).map_err(|e| Error::format(path, field("mask_logits.rle"), e.to_string()))?;
                    let z = (confidence / (1.0 - confidence)).ln();
                    let values = mask.bits().iter().map(|&b| if b { z } else { -z }).collect();
                    MaskLogitGrid::new(h, w, values)?
                }
            };
            instances.push(NamedPrediction {
                id: inst.id,
                prediction: InstancePrediction::new(class_logits, mask_logits),
            });
        }
        Ok(Self {
            image_id: record.image_id,
            height: h,
            width: w,
            class_names: record.class_names,
            instances,
        })
    }

    /// Writes the JSON and one sidecar per instance, named
    /// `<json stem>.<index>.f32` next to the JSON. Mask logits are narrowed to f32.
    pub fn write(&self, path: &Path) -> Result<()> {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::invalid(format!("bad output path {}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let mut instances = Vec::with_capacity(self.instances.len());
        for (k, inst) in self.instances.iter().enumerate() {
            if inst.prediction.shape() != (self.height, self.width) {
                return Err(Error::ShapeMismatch {
                    expected: (self.height, self.width),
                    actual: inst.prediction.shape(),
                });
            }
            let name = format!("{stem}.{k}.f32");
            write_file(&base.join(&name), &encode_sidecar(&inst.prediction.mask_logits))?;
            instances.push(InstanceRecord {
                id: inst.id.clone(),
                class_logits: inst.prediction.class_logits.values().to_vec(),
                mask_logits: MaskSource::Sidecar { sidecar: name },
            });
        }
        write_versioned(
            path,
            &PredictionRecord {
                image_id: self.image_id.clone(),
                height: self.height,
                width: self.width,
                num_classes: self.num_classes(),
                class_names: self.class_names.clone(),
                instances,
            },
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct GroundTruthRecord {
    class_id: usize,
    rle: RunLengthCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct GroundTruthDoc {
    image_id: String,
    height: usize,
    width: usize,
    num_classes: usize,
    instances: Vec<GroundTruthRecord>,
}

/// Ground-truth instances of one image, masks stored as RLE.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthFile {
    pub image_id: String,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub instances: Vec<GroundTruthInstance>,
}

impl GroundTruthFile {
    pub fn read(path: &Path) -> Result<Self> {
        let doc: GroundTruthDoc = read_versioned(path)?;
        let instances = doc
            .instances
            .into_iter()
            .enumerate()
            .map(|(k, rec)| {
                let mask = rle_decode(&rec.rle, doc.height, doc.width)
                    .map_err(|e| Error::format(path, format!("instances[{k}].rle"), e.to_string()))?;
                GroundTruthInstance::new(rec.class_id, mask, doc.num_classes)
                    .map_err(|e| Error::format(path, format!("instances[{k}]"), e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            image_id: doc.image_id,
            height: doc.height,
            width: doc.width,
            num_classes: doc.num_classes,
            instances,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_versioned(
            path,
            &GroundTruthDoc {
                image_id: self.image_id.clone(),
                height: self.height,
                width: self.width,
                num_classes: self.num_classes,
                instances: self
                    .instances
                    .iter()
                    .map(|g| GroundTruthRecord {
                        class_id: g.class_id,
                        rle: rle_encode(&g.mask),
                    })
                    .collect(),
            },
        )
    }
}

#[derive(Debug, Deserialize)]
struct ResponsesDoc {
    responses: HashMap<String, Distribution>,
}

/// External classifier responses keyed by instance id.
pub fn read_external_responses(path: &Path) -> Result<PrecomputedClassifier> {
    let doc: ResponsesDoc = read_versioned(path)?;
    Ok(PrecomputedClassifier::new(doc.responses))
}

#[derive(Debug, Deserialize)]
struct TaxonomyDoc {
    superclass: Vec<usize>,
}

pub fn read_taxonomy(path: &Path, num_classes: usize) -> Result<Taxonomy> {
    let doc: TaxonomyDoc = read_versioned(path)?;
    Taxonomy::new(doc.superclass, num_classes).map_err(|e| Error::format(path, "superclass", e.to_string()))
}

/// C-style `%.9g`: nine significant digits, trailing zeros trimmed,
/// exponent form outside `1e-4 <= |x| < 1e9`.
pub fn format_g9(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').unwrap_or((&sci, "0"));
    let exp: i32 = exp.parse().unwrap_or(0);
    if !(-4..9).contains(&exp) {
        let m = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (8 - exp).max(0) as usize;
        trim_zeros(&format!("{x:.decimals$}")).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// CSV text with a header row and `\n` line endings.
pub fn csv_string<S: AsRef<str>>(header: &[&str], rows: &[Vec<S>]) -> String {
    let mut out = String::new();
    let line = |fields: Vec<String>| fields.join(",") + "\n";
    out.push_str(&line(header.iter().map(|h| csv_field(h)).collect()));
    for row in rows {
        out.push_str(&line(row.iter().map(|f| csv_field(f.as_ref())).collect()));
    }
    out
}

pub fn write_csv<S: AsRef<str>>(path: &Path, header: &[&str], rows: &[Vec<S>]) -> Result<()> {
    write_file(path, csv_string(header, rows).as_bytes())
}

/// Resolves `name` inside `dir`.
pub fn output_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}
