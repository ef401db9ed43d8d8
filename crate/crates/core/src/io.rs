//! On-disk formats.
//!
//! # Matrix files
//!
//! ```text
//! offset  size  field
//! 0       4     magic "TMX1"
//! 4       1     dtype, 2 = little-endian f64 (the only accepted value)
//! 5       3     reserved, zero
//! 8       8     rows, u64 little-endian
//! 16      8     cols, u64 little-endian
//! 24      8·rows·cols  values, row-major
//! ```
//!
//! Readers reject non-finite values.
//!
//! # Kernel files
//!
//! JSON `{"S", "H", "L", "d_k", "kernels": [{"layer", "head", "s", "a", "b", "c"}]}`
//! with kernels sorted by `(layer, head, s)`.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::introspect::{EmbeddingBundle, Projection};
use crate::kernel::{Kernel, KernelParams, TisaStack};
use crate::matrix::Matrix;
use crate::model::{kernel_name, ModelParams, ToyModel, ToyModelConfig};

pub const MATRIX_MAGIC: &[u8; 4] = b"TMX1";
pub const DTYPE_F64: u8 = 2;
const HEADER_LEN: usize = 24;

pub fn encode_matrix(m: &Matrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * m.as_slice().len());
    out.extend_from_slice(MATRIX_MAGIC);
    out.push(DTYPE_F64);
    out.extend_from_slice(&[0, 0, 0]);
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    for v in m.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_matrix(bytes: &[u8]) -> Result<Matrix> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!(
            "matrix file is {} bytes, shorter than the {HEADER_LEN}-byte header",
            bytes.len()
        )));
    }
    if &bytes[0..4] != MATRIX_MAGIC {
        return Err(Error::Format("bad magic, expected TMX1".into()));
    }
    if bytes[4] != DTYPE_F64 {
        return Err(Error::Format(format!("unsupported dtype {}", bytes[4])));
    }
    if bytes[5..8] != [0, 0, 0] {
        return Err(Error::Format("reserved header bytes must be zero".into()));
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let cols = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes"));
    if rows == 0 || cols == 0 {
        return Err(Error::Format(format!("invalid shape {rows}x{cols}")));
    }
    let expected = rows
        .checked_mul(cols)
        .and_then(|c| c.checked_mul(8))
        .ok_or_else(|| Error::Format(format!("shape {rows}x{cols} overflows")))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() as u64 != expected {
        return Err(Error::Format(format!(
            "payload is {} bytes, expected {expected} for {rows}x{cols}",
            payload.len()
        )));
    }
    let data: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::Format(format!(
            "non-finite value at index {pos} (row {}, col {})",
            pos as u64 / cols,
            pos as u64 % cols
        )));
    }
    Matrix::from_vec(rows as usize, cols as usize, data)
}

pub fn write_matrix(path: impl AsRef<Path>, m: &Matrix) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_matrix(m)).map_err(|e| Error::io(path, e))
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<Matrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_matrix(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelRecord {
    pub layer: usize,
    pub head: usize,
    pub s: usize,
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelFile {
    #[serde(rename = "S")]
    pub s: usize,
    #[serde(rename = "H")]
    pub h: usize,
    #[serde(rename = "L")]
    pub l: usize,
    pub d_k: usize,
    pub kernels: Vec<KernelRecord>,
}

impl KernelFile {
    pub fn from_stack(stack: &TisaStack) -> Self {
        let mut kernels: Vec<KernelRecord> = stack
            .iter()
            .flat_map(|p| {
                p.kernels.iter().enumerate().map(move |(s, k)| KernelRecord {
                    layer: p.layer,
                    head: p.head,
                    s,
                    a: k.amplitude,
                    b: k.width,
                    c: k.center,
                })
            })
            .collect();
        kernels.sort_by_key(|k| (k.layer, k.head, k.s));
        Self {
            s: stack.kernels_per_head().unwrap_or(0),
            h: stack.heads,
            l: stack.layers,
            d_k: stack.d_k,
            kernels,
        }
    }

    pub fn to_stack(&self) -> Result<TisaStack> {
        let mut sets: BTreeMap<(usize, usize), Vec<(usize, Kernel)>> = BTreeMap::new();
        for l in 0..self.l {
            for h in 0..self.h {
                sets.insert((l, h), Vec::new());
            }
        }
        for r in &self.kernels {
            let slot = sets.get_mut(&(r.layer, r.head)).ok_or_else(|| {
                Error::Format(format!(
                    "kernel for layer {}, head {} outside {} layers x {} heads",
                    r.layer, r.head, self.l, self.h
                ))
            })?;
            slot.push((r.s, Kernel::new(r.a, r.b, r.c)));
        }
        let mut params = Vec::with_capacity(sets.len());
        for ((layer, head), mut ks) in sets {
            ks.sort_by_key(|k| k.0);
            if ks.iter().enumerate().any(|(i, k)| k.0 != i) {
                return Err(Error::Format(format!(
                    "kernel indices for layer {layer}, head {head} must be 0..S without gaps"
                )));
            }
            if ks.len() != self.s {
                return Err(Error::Format(format!(
                    "layer {layer}, head {head} has {} kernels, header says S = {}",
                    ks.len(),
                    self.s
                )));
            }
            params.push(KernelParams::new(ks.into_iter().map(|k| k.1).collect(), layer, head));
        }
        TisaStack::new(self.h, self.l, self.d_k, params)
    }
}

pub fn kernel_json(stack: &TisaStack) -> Result<String> {
    let mut s = serde_json::to_string_pretty(&KernelFile::from_stack(stack))?;
    s.push('\n');
    Ok(s)
}

pub fn write_kernels(path: impl AsRef<Path>, stack: &TisaStack) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, kernel_json(stack)?).map_err(|e| Error::io(path, e))
}

pub fn read_kernels(path: impl AsRef<Path>) -> Result<TisaStack> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: KernelFile = serde_json::from_str(&text)?;
    file.to_stack()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionRecord {
    pub layer: usize,
    pub head: usize,
    pub w_q: PathBuf,
    pub w_k: PathBuf,
}

/// Bundle manifest. Relative paths resolve against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub n: usize,
    pub d: usize,
    pub d_k: usize,
    #[serde(rename = "H")]
    pub h: usize,
    #[serde(rename = "L")]
    pub l: usize,
    pub e_p: PathBuf,
    pub e_w: PathBuf,
    pub projections: Vec<ProjectionRecord>,
}

/// Loads a bundle. A file referenced more than once is read once and shared.
pub fn read_bundle(manifest_path: impl AsRef<Path>) -> Result<EmbeddingBundle> {
    let manifest_path = manifest_path.as_ref();
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: BundleManifest = serde_json::from_str(&text)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));

    let mut cache: HashMap<PathBuf, Arc<Matrix>> = HashMap::new();
    let mut load = |rel: &Path| -> Result<Arc<Matrix>> {
        let full = base.join(rel);
        if let Some(m) = cache.get(&full) {
            return Ok(Arc::clone(m));
        }
        let m = Arc::new(read_matrix(&full)?);
        cache.insert(full, Arc::clone(&m));
        Ok(m)
    };

    let e_p = load(&manifest.e_p)?;
    let e_w = load(&manifest.e_w)?;
    if e_p.shape() != (manifest.n, manifest.d) {
        return Err(Error::Format(format!(
            "e_p is {}x{}, manifest says n = {}, d = {}",
            e_p.rows(),
            e_p.cols(),
            manifest.n,
            manifest.d
        )));
    }
    if e_w.cols() != manifest.d {
        return Err(Error::Format(format!(
            "e_w has {} columns, manifest says d = {}",
            e_w.cols(),
            manifest.d
        )));
    }
    let mut projections = BTreeMap::new();
    for p in &manifest.projections {
        let proj = Projection {
            w_q: load(&p.w_q)?,
            w_k: load(&p.w_k)?,
        };
        if projections.insert((p.layer, p.head), proj).is_some() {
            return Err(Error::Format(format!(
                "duplicate projection for layer {}, head {}",
                p.layer, p.head
            )));
        }
    }
    EmbeddingBundle::new(e_p, e_w, manifest.d_k, manifest.h, manifest.l, projections).map_err(|e| match e {
        Error::Shape { .. } | Error::Domain(_) => Error::Format(e.to_string()),
        other => other,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub config: ToyModelConfig,
    pub tensors: Vec<TensorRecord>,
    /// Kernel JSON, present when the model uses kernels.
    pub kernels: Option<String>,
}

pub const CHECKPOINT_MANIFEST: &str = "manifest.json";
pub const CHECKPOINT_KERNELS: &str = "kernels.json";

/// Writes every non-kernel tensor as a matrix file plus the kernel JSON and a
/// manifest tying them together.
pub fn save_checkpoint(dir: impl AsRef<Path>, model: &ToyModel) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let stack = model.tisa_stack();
    let kernel_names: Vec<String> = stack
        .iter()
        .flat_map(|s| s.iter().map(|p| kernel_name(p.layer, p.head)))
        .collect();

    let mut tensors = Vec::new();
    for (name, m) in model.params.iter() {
        if kernel_names.iter().any(|k| k == name) {
            continue;
        }
        let file = format!("{name}.tmx");
        write_matrix(dir.join(&file), m)?;
        tensors.push(TensorRecord {
            name: name.to_string(),
            file,
        });
    }
    let kernels = match &stack {
        Some(s) => {
            write_kernels(dir.join(CHECKPOINT_KERNELS), s)?;
            Some(CHECKPOINT_KERNELS.to_string())
        }
        None => None,
    };
    let manifest = CheckpointManifest {
        config: model.config.clone(),
        tensors,
        kernels,
    };
    let path = dir.join(CHECKPOINT_MANIFEST);
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<ToyModel> {
    let dir = dir.as_ref();
    let path = dir.join(CHECKPOINT_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;

    // Start from a fresh model for names and order, then fill in values.
    let mut model = ToyModel::init(manifest.config.clone())?;
    let mut loaded = Vec::new();
    for t in &manifest.tensors {
        loaded.push((t.name.clone(), read_matrix(dir.join(&t.file))?));
    }
    for (name, m) in loaded {
        let slot = model
            .params
            .get_mut(&name)
            .ok_or_else(|| Error::Format(format!("checkpoint tensor {name:?} is not a model parameter")))?;
        if slot.shape() != m.shape() {
            return Err(Error::Format(format!(
                "checkpoint tensor {name:?} is {:?}, expected {:?}",
                m.shape(),
                slot.shape()
            )));
        }
        *slot = m;
    }
    if let Some(k) = &manifest.kernels {
        model.set_tisa_stack(&read_kernels(dir.join(k))?)?;
    }
    let params: ModelParams = model.params.clone();
    ToyModel::from_params(manifest.config, params)
}

/// Fixed-format number for CSV output: 17 significant digits in scientific
/// notation, independent of locale.
pub fn format_value(v: f64) -> String {
    format!("{v:.16e}")
}
