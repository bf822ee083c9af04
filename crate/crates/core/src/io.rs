//! File formats: adapter checkpoints, model weight stores, and the float
//! formatting they share.
//!
//! Checkpoints are single JSON documents. Every float in them is written
//! with 17 significant digits, which is enough to reproduce the exact
//! `f64` bit pattern on parse, so save → load is lossless. Model weights
//! are a JSON manifest plus one raw little-endian `f64` blob per matrix,
//! which keeps large weights compact and the manifest diff-able.

use crate::adapters::{AdapterKind, LinearLayer};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use serde::Deserialize;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

/// Formats a finite `f64` with 17 significant digits. Parsing the result
/// recovers the original bit pattern exactly.
pub fn fmt_f64(v: f64) -> String {
    debug_assert!(v.is_finite());
    format!("{v:.16e}")
}

fn push_f64_array(out: &mut String, values: &[f64]) {
    out.push('[');
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str(&fmt_f64(*v));
    }
    out.push(']');
}

fn json_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            c if (c as u32) < 0x20 => {
                let _ = write!(out, "\\u{:04x}", c as u32);
            }
            c => out.push(c),
        }
    }
    out
}

/// Reads a whole file, attaching the path to any I/O error.
pub fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

pub fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|e| Error::io(format!("creating {}", parent.display()), e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Converts a serde_json error position to a byte offset in `input`.
pub fn parse_error(input: &str, err: serde_json::Error) -> Error {
    let (line, column) = (err.line(), err.column());
    let mut offset = 0usize;
    for (idx, l) in input.split('\n').enumerate() {
        if idx + 1 == line {
            offset += column.saturating_sub(1).min(l.len());
            break;
        }
        offset += l.len() + 1;
    }
    Error::Parse {
        message: err.to_string(),
        offset,
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        let _ = write!(out, "{b:02x}");
    }
    out
}

/// Content hash of a matrix: dimensions plus little-endian entry bytes.
pub fn matrix_sha256(m: &Matrix) -> String {
    let mut bytes = Vec::with_capacity(16 + m.data().len() * 8);
    bytes.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    bytes.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    for v in m.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    sha256_hex(&bytes)
}

// --- Adapter checkpoints -------------------------------------------------

/// Trainable state of one adapted layer.
#[derive(Debug, Clone, PartialEq)]
pub enum CheckpointParams {
    Full { w: Vec<f64> },
    Hyper { a: Vec<f64>, b: Vec<f64> },
    LoRA { b: Vec<f64>, a: Vec<f64>, alpha: f64, r: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerCheckpoint {
    pub kind: AdapterKind,
    /// (n, m) of the underlying weight.
    pub shape: (usize, usize),
    pub params: CheckpointParams,
    /// Present only when the bias was trainable.
    pub bias: Option<Vec<f64>>,
}

/// One checkpoint file: every trainable layer of a model, keyed by layer
/// name. Frozen layers carry no state and are omitted.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub layers: BTreeMap<String, LayerCheckpoint>,
}

impl Checkpoint {
    pub fn from_layers<'a>(layers: impl IntoIterator<Item = &'a LinearLayer>) -> Checkpoint {
        let mut out = BTreeMap::new();
        for layer in layers {
            let kind = layer.kind();
            let params = match kind {
                AdapterKind::Frozen => continue,
                AdapterKind::Full => CheckpointParams::Full {
                    w: layer.full_weight().expect("kind checked").data().to_vec(),
                },
                AdapterKind::Hyper => {
                    let (a, b) = layer.hyper_vectors().expect("kind checked");
                    CheckpointParams::Hyper {
                        a: a.to_vec(),
                        b: b.to_vec(),
                    }
                }
                AdapterKind::LoRA { r } => {
                    let (b_mat, a_mat) = layer.lora_factors().expect("kind checked");
                    let (alpha, _) = layer.lora_hyperparams().expect("kind checked");
                    CheckpointParams::LoRA {
                        b: b_mat.data().to_vec(),
                        a: a_mat.data().to_vec(),
                        alpha,
                        r,
                    }
                }
            };
            let bias = layer
                .train_bias()
                .then(|| layer.bias().expect("trainable bias exists").to_vec());
            out.insert(
                layer.name().to_string(),
                LayerCheckpoint {
                    kind,
                    shape: (layer.out_dim(), layer.in_dim()),
                    params,
                    bias,
                },
            );
        }
        Checkpoint { layers: out }
    }

    /// Serializes with 17-significant-digit floats; key order is the
    /// BTreeMap order, so output is deterministic.
    pub fn to_json(&self) -> String {
        let mut out = String::new();
        out.push_str("{\n  \"version\": 1,\n  \"layers\": {");
        for (i, (name, layer)) in self.layers.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            out.push_str("\n    \"");
            out.push_str(&json_escape(name));
            out.push_str("\": {\"kind\": \"");
            let _ = write!(out, "{}", layer.kind);
            out.push_str("\", \"shape\": [");
            let _ = write!(out, "{}, {}", layer.shape.0, layer.shape.1);
            out.push_str("], \"params\": ");
            match &layer.params {
                CheckpointParams::Full { w } => {
                    out.push_str("{\"w\": ");
                    push_f64_array(&mut out, w);
                    out.push('}');
                }
                CheckpointParams::Hyper { a, b } => {
                    out.push_str("{\"a\": ");
                    push_f64_array(&mut out, a);
                    out.push_str(", \"b\": ");
                    push_f64_array(&mut out, b);
                    out.push('}');
                }
                CheckpointParams::LoRA { b, a, alpha, r } => {
                    out.push_str("{\"B\": ");
                    push_f64_array(&mut out, b);
                    out.push_str(", \"A\": ");
                    push_f64_array(&mut out, a);
                    let _ = write!(out, ", \"alpha\": {}, \"r\": {r}", fmt_f64(*alpha));
                    out.push('}');
                }
            }
            if let Some(bias) = &layer.bias {
                out.push_str(", \"bias\": ");
                push_f64_array(&mut out, bias);
            }
            out.push('}');
        }
        out.push_str("\n  }\n}\n");
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_json().as_bytes())
    }

    pub fn parse(input: &str) -> Result<Checkpoint> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Doc {
            version: u32,
            layers: BTreeMap<String, LayerDoc>,
        }
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct LayerDoc {
            kind: AdapterKind,
            shape: [usize; 2],
            params: serde_json::Value,
            bias: Option<Vec<f64>>,
        }

        let doc: Doc = serde_json::from_str(input).map_err(|e| parse_error(input, e))?;
        if doc.version != 1 {
            return Err(Error::Structure(format!(
                "unsupported checkpoint version {}",
                doc.version
            )));
        }
        let mut layers = BTreeMap::new();
        for (name, raw) in doc.layers {
            let (n, m) = (raw.shape[0], raw.shape[1]);
            let params = match raw.kind {
                AdapterKind::Frozen => {
                    return Err(Error::Structure(format!(
                        "layer {name}: frozen layers cannot appear in a checkpoint"
                    )))
                }
                AdapterKind::Full => {
                    #[derive(Deserialize)]
                    #[serde(deny_unknown_fields)]
                    struct P {
                        w: Vec<f64>,
                    }
                    let p: P = from_value(&name, raw.params)?;
                    expect_len(&name, "w", p.w.len(), n * m)?;
                    CheckpointParams::Full { w: p.w }
                }
                AdapterKind::Hyper => {
                    #[derive(Deserialize)]
                    #[serde(deny_unknown_fields)]
                    struct P {
                        a: Vec<f64>,
                        b: Vec<f64>,
                    }
                    let p: P = from_value(&name, raw.params)?;
                    expect_len(&name, "a", p.a.len(), n)?;
                    expect_len(&name, "b", p.b.len(), m)?;
                    CheckpointParams::Hyper { a: p.a, b: p.b }
                }
                AdapterKind::LoRA { r } => {
                    #[derive(Deserialize)]
                    #[serde(deny_unknown_fields)]
                    struct P {
                        #[serde(rename = "B")]
                        b: Vec<f64>,
                        #[serde(rename = "A")]
                        a: Vec<f64>,
                        alpha: f64,
                        r: usize,
                    }
                    let p: P = from_value(&name, raw.params)?;
                    if p.r != r {
                        return Err(Error::Structure(format!(
                            "layer {name}: kind says rank {r} but params say {}",
                            p.r
                        )));
                    }
                    expect_len(&name, "B", p.b.len(), n * r)?;
                    expect_len(&name, "A", p.a.len(), r * m)?;
                    CheckpointParams::LoRA {
                        b: p.b,
                        a: p.a,
                        alpha: p.alpha,
                        r,
                    }
                }
            };
            if let Some(bias) = &raw.bias {
                expect_len(&name, "bias", bias.len(), n)?;
            }
            layers.insert(
                name,
                LayerCheckpoint {
                    kind: raw.kind,
                    shape: (n, m),
                    params,
                    bias: raw.bias,
                },
            );
        }
        Ok(Checkpoint { layers })
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        Checkpoint::parse(&read_file(path)?)
    }

    /// Total trainable scalars stored, per layer closed forms.
    pub fn param_count(&self) -> usize {
        self.layers
            .values()
            .map(|l| {
                let base = l.kind.trainable_count(l.shape.0, l.shape.1);
                base + l.bias.as_ref().map_or(0, Vec::len)
            })
            .sum()
    }
}

fn from_value<T: serde::de::DeserializeOwned>(layer: &str, v: serde_json::Value) -> Result<T> {
    serde_json::from_value(v).map_err(|e| Error::Structure(format!("layer {layer} params: {e}")))
}

fn expect_len(layer: &str, field: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Structure(format!(
            "layer {layer}: field {field} has {got} values, expected {want}"
        )));
    }
    Ok(())
}

/// Rebuilds a layer from its frozen base plus a checkpoint record. Used by
/// merge and by checkpoint round-trip tests. Dropout is irrelevant after
/// training, so the restored LoRA layer runs with dropout off.
pub fn layer_from_checkpoint(
    name: &str,
    w0: Matrix,
    frozen_bias: Option<Vec<f64>>,
    record: &LayerCheckpoint,
) -> Result<LinearLayer> {
    if (w0.rows(), w0.cols()) != record.shape {
        return Err(Error::Structure(format!(
            "layer {name}: checkpoint shape {:?} vs base weight {}x{}",
            record.shape,
            w0.rows(),
            w0.cols()
        )));
    }
    let train_bias = record.bias.is_some();
    let bias = record.bias.clone().or(frozen_bias);
    let mut layer = match &record.params {
        CheckpointParams::Full { .. } => LinearLayer::full(name, w0, bias, train_bias)?,
        CheckpointParams::Hyper { .. } => LinearLayer::hyper(name, w0, bias, train_bias)?,
        CheckpointParams::LoRA { alpha, r, .. } => {
            let hp = crate::adapters::LoraHyperparams {
                alpha: Some(*alpha),
                dropout_p: 0.0,
            };
            // The init RNG draw is immediately overwritten below.
            let mut rng = crate::rng::stream(0, "checkpoint-restore", &[]);
            LinearLayer::lora(name, w0, bias, *r, hp, train_bias, &mut rng)?
        }
    };
    let mut flat = Vec::with_capacity(layer.param_count());
    match &record.params {
        CheckpointParams::Full { w } => flat.extend_from_slice(w),
        CheckpointParams::Hyper { a, b } => {
            flat.extend_from_slice(a);
            flat.extend_from_slice(b);
        }
        CheckpointParams::LoRA { b, a, .. } => {
            flat.extend_from_slice(b);
            flat.extend_from_slice(a);
        }
    }
    if let Some(bias) = &record.bias {
        flat.extend_from_slice(bias);
    }
    layer.set_params(&flat)?;
    Ok(layer)
}

// --- Model weight stores --------------------------------------------------

/// A named collection of dense matrices plus free-form architecture
/// metadata, stored as `manifest.json` and one `.f64` blob per matrix.
#[derive(Debug, Clone)]
pub struct WeightStore {
    pub matrices: Vec<(String, Matrix)>,
    pub meta: serde_json::Value,
}

impl WeightStore {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)
            .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        let mut manifest = serde_json::Map::new();
        manifest.insert("version".into(), 1u32.into());
        manifest.insert("meta".into(), self.meta.clone());
        let mut entries = Vec::new();
        for (name, matrix) in &self.matrices {
            let file = format!("{name}.f64");
            let mut blob = Vec::with_capacity(matrix.data().len() * 8);
            for v in matrix.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            write_file(&dir.join(&file), &blob)?;
            entries.push(serde_json::json!({
                "name": name,
                "rows": matrix.rows(),
                "cols": matrix.cols(),
                "file": file,
            }));
        }
        manifest.insert("matrices".into(), entries.into());
        let text = serde_json::to_string_pretty(&serde_json::Value::Object(manifest))
            .expect("manifest is valid JSON");
        write_file(&dir.join("manifest.json"), text.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<WeightStore> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Manifest {
            version: u32,
            meta: serde_json::Value,
            matrices: Vec<Entry>,
        }
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Entry {
            name: String,
            rows: usize,
            cols: usize,
            file: String,
        }

        let manifest_path = dir.join("manifest.json");
        let text = read_file(&manifest_path)?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| parse_error(&text, e))?;
        if manifest.version != 1 {
            return Err(Error::Structure(format!(
                "unsupported weight-store version {}",
                manifest.version
            )));
        }
        let mut matrices = Vec::with_capacity(manifest.matrices.len());
        for entry in manifest.matrices {
            let blob_path = dir.join(&entry.file);
            let bytes = std::fs::read(&blob_path)
                .map_err(|e| Error::io(format!("reading {}", blob_path.display()), e))?;
            let want = entry.rows * entry.cols * 8;
            if bytes.len() != want {
                return Err(Error::Structure(format!(
                    "weight blob {}: {} bytes, expected {want}",
                    entry.file,
                    bytes.len()
                )));
            }
            let data: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            matrices.push((entry.name, Matrix::from_vec(entry.rows, entry.cols, data)?));
        }
        Ok(WeightStore {
            matrices,
            meta: manifest.meta,
        })
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.matrices
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
    }
}
