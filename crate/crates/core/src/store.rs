//! Parameter sets, curvature weights and pruning masks, with the on-disk
//! model directory format.
//!
//! A model directory holds:
//!
//! | file              | contents                                        |
//! |-------------------|-------------------------------------------------|
//! | `manifest.json`   | model name, sizes, span table, SHA-256 per file |
//! | `params.f32le`    | parameters, little-endian IEEE-754 binary32     |
//! | `curvature.f32le` | optional per-parameter curvature                |
//! | `mask.u8`         | optional pruning mask, one byte (0/1) per entry |
//!
//! Values are held as `f64` in memory and stored as `f32`, so a save/load
//! roundtrip is bit-exact for every value representable in binary32.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::refnet::MlpSpec;
use crate::{Error, Result};

/// Lower bound applied to every curvature entry at construction.
pub const CURVATURE_FLOOR: f64 = 1e-12;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.f32le";
pub const CURVATURE_FILE: &str = "curvature.f32le";
pub const MASK_FILE: &str = "mask.u8";

/// A named contiguous range of the flat parameter vector (one layer tensor).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub name: String,
    pub offset: usize,
    pub length: usize,
}

impl Span {
    pub fn new(name: impl Into<String>, offset: usize, length: usize) -> Self {
        Span {
            name: name.into(),
            offset,
            length,
        }
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.length
    }
}

/// All trainable parameters of a network as one flat vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    values: Vec<f64>,
    spans: Vec<Span>,
    source_bits: u32,
}

impl ParamSet {
    pub fn new(values: Vec<f64>, spans: Vec<Span>, source_bits: u32) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("parameter set is empty".into()));
        }
        if source_bits == 0 {
            return Err(Error::InvalidArgument("source bits must be positive".into()));
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        let mut next = 0;
        for span in &spans {
            if span.offset != next {
                return Err(Error::Format(format!(
                    "span `{}` starts at {} but previous span ended at {}",
                    span.name, span.offset, next
                )));
            }
            next += span.length;
        }
        if next != values.len() {
            return Err(Error::Format(format!(
                "spans cover {} entries but there are {} values",
                next,
                values.len()
            )));
        }
        Ok(ParamSet {
            values,
            spans,
            source_bits,
        })
    }

    /// Parameter set covered by a single span, stored at 32 bits.
    pub fn single(name: &str, values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        Self::new(values, vec![Span::new(name, 0, n)], 32)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn spans(&self) -> &[Span] {
        &self.spans
    }

    pub fn source_bits(&self) -> u32 {
        self.source_bits
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Same layout, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.values.len() {
            return Err(Error::LengthMismatch {
                what: "values",
                expected: self.values.len(),
                got: values.len(),
            });
        }
        Self::new(values, self.spans.clone(), self.source_bits)
    }

    /// Values rounded to the 32-bit storage precision.
    pub fn rounded_to_storage(&self) -> Self {
        ParamSet {
            values: self.values.iter().map(|&v| v as f32 as f64).collect(),
            spans: self.spans.clone(),
            source_bits: self.source_bits,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurvatureSource {
    ExactHessian,
    GaussNewton,
    AdamSqrtMoment,
    Identity,
}

/// Per-parameter nonnegative curvature weights `h_ii`.
#[derive(Clone, Debug, PartialEq)]
pub struct CurvatureDiag {
    values: Vec<f64>,
    source: CurvatureSource,
    clamped: usize,
}

impl CurvatureDiag {
    /// Builds a curvature vector, raising every entry below
    /// [`CURVATURE_FLOOR`] (including negative raw second derivatives) to the
    /// floor. The number of raised entries is kept in [`Self::clamped`].
    pub fn new(values: Vec<f64>, source: CurvatureSource) -> Result<Self> {
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        let mut clamped = 0;
        let values = values
            .into_iter()
            .map(|v| {
                if v < CURVATURE_FLOOR {
                    clamped += 1;
                    CURVATURE_FLOOR
                } else {
                    v
                }
            })
            .collect();
        Ok(CurvatureDiag {
            values,
            source,
            clamped,
        })
    }

    pub fn identity(n: usize) -> Self {
        CurvatureDiag {
            values: vec![1.0; n],
            source: CurvatureSource::Identity,
            clamped: 0,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn source(&self) -> CurvatureSource {
        self.source
    }

    pub fn clamped(&self) -> usize {
        self.clamped
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// `kept[i] == false` marks parameter `i` as pruned.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PruneMask {
    kept: Vec<bool>,
}

impl PruneMask {
    pub fn new(kept: Vec<bool>) -> Result<Self> {
        if !kept.iter().any(|&k| k) {
            return Err(Error::InvalidArgument(
                "pruning mask keeps no parameters".into(),
            ));
        }
        Ok(PruneMask { kept })
    }

    pub fn all_kept(n: usize) -> Self {
        PruneMask {
            kept: vec![true; n],
        }
    }

    pub fn kept(&self) -> &[bool] {
        &self.kept
    }

    pub fn len(&self) -> usize {
        self.kept.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kept.is_empty()
    }

    pub fn popcount(&self) -> usize {
        self.kept.iter().filter(|&&k| k).count()
    }

    /// Indices of kept parameters, strictly increasing.
    pub fn positions(&self) -> Vec<usize> {
        self.kept
            .iter()
            .enumerate()
            .filter_map(|(i, &k)| k.then_some(i))
            .collect()
    }
}

/// Everything a model directory can hold.
#[derive(Clone, Debug, PartialEq)]
pub struct SavedModel {
    pub name: String,
    pub params: ParamSet,
    pub curvature: Option<CurvatureDiag>,
    pub mask: Option<PruneMask>,
    /// Architecture of the reference network that produced the parameters.
    pub network: Option<MlpSpec>,
}

impl SavedModel {
    pub fn new(name: impl Into<String>, params: ParamSet) -> Self {
        SavedModel {
            name: name.into(),
            params,
            curvature: None,
            mask: None,
            network: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub model_name: String,
    pub n_params: usize,
    pub bits_per_param: u32,
    pub spans: Vec<Span>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub curvature_source: Option<CurvatureSource>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub network: Option<MlpSpec>,
    /// Hex SHA-256 of each payload file, keyed by file name.
    pub sha256: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn encode_f32le(values: &[f64]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for (index, &v) in values.iter().enumerate() {
        let x = v as f32;
        if !x.is_finite() {
            return Err(Error::NonFinite { index });
        }
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

fn decode_f32le(bytes: &[u8], file: &str) -> Result<Vec<f64>> {
    if bytes.len() % 4 != 0 {
        return Err(Error::Format(format!(
            "{file}: {} bytes is not a whole number of f32 values",
            bytes.len()
        )));
    }
    bytes
        .chunks_exact(4)
        .enumerate()
        .map(|(index, c)| {
            let x = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            if x.is_finite() {
                Ok(x as f64)
            } else {
                Err(Error::NonFinite { index })
            }
        })
        .collect()
}

/// Writes `model` into `dir` (created if missing) and returns the manifest.
pub fn save_model(model: &SavedModel, dir: &Path) -> Result<Manifest> {
    let n = model.params.len();
    if let Some(cv) = &model.curvature {
        if cv.len() != n {
            return Err(Error::LengthMismatch {
                what: "curvature",
                expected: n,
                got: cv.len(),
            });
        }
    }
    if let Some(mask) = &model.mask {
        if mask.len() != n {
            return Err(Error::LengthMismatch {
                what: "mask",
                expected: n,
                got: mask.len(),
            });
        }
    }
    if let Some(net) = &model.network {
        if net.param_count() != n {
            return Err(Error::LengthMismatch {
                what: "network parameters",
                expected: n,
                got: net.param_count(),
            });
        }
    }

    let mut payloads: Vec<(&str, Vec<u8>)> =
        vec![(PARAMS_FILE, encode_f32le(model.params.values())?)];
    if let Some(cv) = &model.curvature {
        payloads.push((CURVATURE_FILE, encode_f32le(cv.values())?));
    }
    if let Some(mask) = &model.mask {
        payloads.push((MASK_FILE, mask.kept().iter().map(|&k| k as u8).collect()));
    }

    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut sha256 = BTreeMap::new();
    for (file, bytes) in &payloads {
        let path = dir.join(file);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        sha256.insert(file.to_string(), sha256_hex(bytes));
    }

    let manifest = Manifest {
        model_name: model.name.clone(),
        n_params: n,
        bits_per_param: model.params.source_bits(),
        spans: model.params.spans().to_vec(),
        curvature_source: model.curvature.as_ref().map(|c| c.source()),
        network: model.network.clone(),
        sha256,
    };
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Format(format!("manifest serialization: {e}")))?;
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

fn read_payload(dir: &Path, file: &str, manifest: &Manifest) -> Result<Option<Vec<u8>>> {
    let Some(expected) = manifest.sha256.get(file) else {
        return Ok(None);
    };
    let path = dir.join(file);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if &sha256_hex(&bytes) != expected {
        return Err(Error::Checksum {
            file: file.to_string(),
        });
    }
    Ok(Some(bytes))
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{MANIFEST_FILE}: {e}")))
}

/// Exact inverse of [`save_model`].
pub fn load_model(dir: &Path) -> Result<SavedModel> {
    let manifest = load_manifest(dir)?;
    let n = manifest.n_params;

    let params_bytes = read_payload(dir, PARAMS_FILE, &manifest)?
        .ok_or_else(|| Error::Format(format!("manifest has no entry for {PARAMS_FILE}")))?;
    let values = decode_f32le(&params_bytes, PARAMS_FILE)?;
    if values.len() != n {
        return Err(Error::Format(format!(
            "manifest declares {n} parameters but {PARAMS_FILE} holds {}",
            values.len()
        )));
    }
    let params = ParamSet::new(values, manifest.spans.clone(), manifest.bits_per_param)?;

    let curvature = match read_payload(dir, CURVATURE_FILE, &manifest)? {
        Some(bytes) => {
            let values = decode_f32le(&bytes, CURVATURE_FILE)?;
            if values.len() != n {
                return Err(Error::Format(format!(
                    "{CURVATURE_FILE} holds {} values, expected {n}",
                    values.len()
                )));
            }
            let source = manifest.curvature_source.unwrap_or(CurvatureSource::Identity);
            Some(CurvatureDiag::new(values, source)?)
        }
        None => None,
    };

    let mask = match read_payload(dir, MASK_FILE, &manifest)? {
        Some(bytes) => {
            if bytes.len() != n {
                return Err(Error::Format(format!(
                    "{MASK_FILE} holds {} entries, expected {n}",
                    bytes.len()
                )));
            }
            let kept = bytes
                .iter()
                .map(|&b| match b {
                    0 => Ok(false),
                    1 => Ok(true),
                    other => Err(Error::Format(format!("mask byte {other} is not 0 or 1"))),
                })
                .collect::<Result<Vec<_>>>()?;
            Some(PruneMask::new(kept)?)
        }
        None => None,
    };

    if let Some(net) = &manifest.network {
        if net.param_count() != n {
            return Err(Error::Format(format!(
                "network expects {} parameters, manifest declares {n}",
                net.param_count()
            )));
        }
    }

    Ok(SavedModel {
        name: manifest.model_name,
        params,
        curvature,
        mask,
        network: manifest.network,
    })
}

/// Unpruned entries of a parameter set and its curvature.
#[derive(Clone, Debug, PartialEq)]
pub struct Compacted {
    pub params: ParamSet,
    pub curvature: CurvatureDiag,
    /// Original index of every kept entry, strictly increasing.
    pub positions: Vec<usize>,
}

/// Keeps only the entries where the mask is set, preserving order. Spans
/// shrink to their kept counts; spans with nothing left are dropped.
pub fn compact_unpruned(
    ps: &ParamSet,
    cv: &CurvatureDiag,
    mask: &PruneMask,
) -> Result<Compacted> {
    let n = ps.len();
    if cv.len() != n {
        return Err(Error::LengthMismatch {
            what: "curvature",
            expected: n,
            got: cv.len(),
        });
    }
    if mask.len() != n {
        return Err(Error::LengthMismatch {
            what: "mask",
            expected: n,
            got: mask.len(),
        });
    }
    let positions = mask.positions();
    if positions.is_empty() {
        return Err(Error::InvalidArgument("every parameter is pruned".into()));
    }

    let values = positions.iter().map(|&i| ps.values()[i]).collect();
    let curv = positions.iter().map(|&i| cv.values()[i]).collect();

    let mut spans = Vec::new();
    let mut offset = 0;
    for span in ps.spans() {
        let length = mask.kept()[span.range()].iter().filter(|&&k| k).count();
        if length > 0 {
            spans.push(Span::new(span.name.clone(), offset, length));
            offset += length;
        }
    }

    Ok(Compacted {
        params: ParamSet::new(values, spans, ps.source_bits())?,
        curvature: CurvatureDiag {
            values: curv,
            source: cv.source(),
            clamped: 0,
        },
        positions,
    })
}
