//! Binary artifact formats.
//!
//! Every file is `MAGIC | u64 header length | JSON header | f64 payload`.
//! The header lists the arrays (name, rows, cols) stored row-major in
//! little-endian order after it.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::condense::{CondensedMoment, CondensedProblem};
use crate::dictionary::{Dense, Dictionary};
use crate::error::{Error, Result};
use crate::model::{Coefficients, Dataset, ModelMeta, PpkoModel, Snapshot};
use crate::pce::{PceBasis, PolyFamily, DEFAULT_TERM_CAP};

const MAGIC: &[u8; 8] = b"PPKOBIN1";
const ORDERING: &str = "graded-lex-descending";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of a JSON value's canonical (sorted-key) serialization.
pub fn json_hash(value: &Value) -> String {
    sha256_hex(value.to_string().as_bytes())
}

/// Write through a temporary sibling and rename into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Envelope {
    kind: String,
    meta: Value,
    arrays: Vec<ArrayEntry>,
}

/// Named matrices in payload order.
pub struct Arrays(Vec<(String, DMatrix<f64>)>);

impl Arrays {
    fn new() -> Self {
        Self(Vec::new())
    }

    fn push(&mut self, name: impl Into<String>, m: DMatrix<f64>) {
        self.0.push((name.into(), m));
    }

    fn push_vec(&mut self, name: impl Into<String>, v: &DVector<f64>) {
        self.push(name, DMatrix::from_column_slice(v.len(), 1, v.as_slice()));
    }

    fn take(&mut self, name: &str) -> Result<DMatrix<f64>> {
        let pos = self
            .0
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::Format(format!("missing array `{name}`")))?;
        Ok(self.0.remove(pos).1)
    }

    fn take_vec(&mut self, name: &str) -> Result<DVector<f64>> {
        let m = self.take(name)?;
        Ok(DVector::from_column_slice(m.as_slice()))
    }
}

fn encode(kind: &str, meta: Value, arrays: &Arrays) -> Vec<u8> {
    let envelope = Envelope {
        kind: kind.to_string(),
        meta,
        arrays: arrays
            .0
            .iter()
            .map(|(name, m)| ArrayEntry { name: name.clone(), rows: m.nrows(), cols: m.ncols() })
            .collect(),
    };
    let header = serde_json::to_vec(&envelope).expect("header serializes");
    let payload: usize = arrays.0.iter().map(|(_, m)| m.len() * 8).sum();
    let mut out = Vec::with_capacity(16 + header.len() + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, m) in &arrays.0 {
        for row in m.row_iter() {
            for v in row.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

fn decode(bytes: &[u8], expected_kind: &str) -> Result<(Value, Arrays)> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Format("not a ppko binary file".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let header = bytes.get(16..16 + len).ok_or_else(|| Error::Format("truncated header".into()))?;
    let envelope: Envelope = serde_json::from_slice(header).map_err(|e| Error::Format(format!("bad header: {e}")))?;
    if envelope.kind != expected_kind {
        return Err(Error::Format(format!("expected a {expected_kind} file, found {}", envelope.kind)));
    }
    let mut offset = 16 + len;
    let mut arrays = Arrays::new();
    for entry in envelope.arrays {
        let count = entry.rows * entry.cols;
        let end = offset + count * 8;
        let chunk = bytes.get(offset..end).ok_or_else(|| Error::Format(format!("truncated array `{}`", entry.name)))?;
        let values: Vec<f64> = chunk.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        arrays.push(entry.name, DMatrix::from_row_slice(entry.rows, entry.cols, &values));
        offset = end;
    }
    if offset != bytes.len() {
        return Err(Error::Format("trailing bytes after payload".into()));
    }
    Ok((envelope.meta, arrays))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn field<T: for<'de> Deserialize<'de>>(meta: &Value, key: &str) -> Result<T> {
    let v = meta.get(key).ok_or_else(|| Error::Format(format!("header lacks `{key}`")))?;
    serde_json::from_value(v.clone()).map_err(|e| Error::Format(format!("header field `{key}`: {e}")))
}

#[derive(Serialize, Deserialize)]
struct BasisDescriptor {
    families: Vec<PolyFamily>,
    dim: usize,
    degree: usize,
    ordering: String,
}

pub fn model_to_bytes(model: &PpkoModel) -> Vec<u8> {
    let basis = BasisDescriptor {
        families: model.basis().families().to_vec(),
        dim: model.basis().dim(),
        degree: model.basis().degree(),
        ordering: ORDERING.into(),
    };
    let dict = model.dictionary();
    let meta = serde_json::json!({
        "basis": basis,
        "n_x": model.n_x(),
        "n_u": model.n_u(),
        "n_psi": model.n_psi(),
        "n_learn": dict.n_learn(),
        "hidden": dict.hidden_widths(),
        "layers": dict.layers().len(),
        "training": model.meta,
    });
    let mut arrays = Arrays::new();
    for (i, layer) in dict.layers().iter().enumerate() {
        arrays.push(format!("layer{i}.weight"), layer.weight.clone());
        arrays.push_vec(format!("layer{i}.bias"), &layer.bias);
    }
    let coeffs = model.coefficients();
    for k in 0..coeffs.n_terms() {
        arrays.push(format!("A{k}"), coeffs.a[k].clone());
        arrays.push(format!("B{k}"), coeffs.b[k].clone());
    }
    arrays.push("C", model.output_matrix().clone());
    encode("model", meta, &arrays)
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<PpkoModel> {
    let (meta, mut arrays) = decode(bytes, "model")?;
    let desc: BasisDescriptor = field(&meta, "basis")?;
    if desc.ordering != ORDERING || desc.dim != desc.families.len() {
        return Err(Error::Format(format!("unsupported basis ordering `{}`", desc.ordering)));
    }
    let basis = PceBasis::total_degree_capped(desc.families, desc.degree, DEFAULT_TERM_CAP.max(1 << 20))?;
    let n_x: usize = field(&meta, "n_x")?;
    let n_layers: usize = field(&meta, "layers")?;
    let mut layers = Vec::with_capacity(n_layers);
    for i in 0..n_layers {
        layers.push(Dense {
            weight: arrays.take(&format!("layer{i}.weight"))?,
            bias: arrays.take_vec(&format!("layer{i}.bias"))?,
        });
    }
    let dict = Dictionary::from_layers(n_x, layers)?;
    let mut a = Vec::with_capacity(basis.len());
    let mut b = Vec::with_capacity(basis.len());
    for k in 0..basis.len() {
        a.push(arrays.take(&format!("A{k}"))?);
        b.push(arrays.take(&format!("B{k}"))?);
    }
    let stored_c = arrays.take("C")?;
    let training: ModelMeta = field(&meta, "training")?;
    let model = PpkoModel::new(basis, dict, Coefficients { a, b })?;
    if &stored_c != model.output_matrix() {
        return Err(Error::Format("stored output matrix does not select the coordinate block".into()));
    }
    let mut model = model;
    model.meta = training;
    Ok(model)
}

pub fn save_model(path: &Path, model: &PpkoModel) -> Result<String> {
    let bytes = model_to_bytes(model);
    write_atomic(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

/// Loaded model together with the hash of its file contents.
pub fn load_model(path: &Path) -> Result<(PpkoModel, String)> {
    let bytes = read(path)?;
    Ok((model_from_bytes(&bytes)?, sha256_hex(&bytes)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub plant: String,
    pub plant_hash: String,
    pub seed: u64,
    pub snapshots: usize,
    pub trajectories: usize,
    pub dropped_trajectories: usize,
    pub n_x: usize,
    pub n_u: usize,
    pub n_theta: usize,
}

pub fn dataset_to_bytes(dataset: &Dataset, manifest: &DatasetManifest) -> Vec<u8> {
    let m = dataset.len();
    let mut arrays = Arrays::new();
    let rows = |f: &dyn Fn(&Snapshot) -> &[f64], width: usize| {
        DMatrix::from_fn(m, width, |j, i| f(&dataset.snapshots[j])[i])
    };
    arrays.push("x", rows(&|s| &s.x, dataset.n_x));
    arrays.push("u", rows(&|s| &s.u, dataset.n_u));
    arrays.push("x_plus", rows(&|s| &s.x_plus, dataset.n_x));
    arrays.push("theta", rows(&|s| &s.theta, dataset.n_theta));
    arrays.push("trajectory", DMatrix::from_fn(m, 1, |j, _| dataset.snapshots[j].trajectory as f64));
    encode("dataset", serde_json::to_value(manifest).expect("manifest serializes"), &arrays)
}

pub fn dataset_from_bytes(bytes: &[u8]) -> Result<(Dataset, DatasetManifest)> {
    let (meta, mut arrays) = decode(bytes, "dataset")?;
    let manifest: DatasetManifest = serde_json::from_value(meta).map_err(|e| Error::Format(format!("dataset manifest: {e}")))?;
    let x = arrays.take("x")?;
    let u = arrays.take("u")?;
    let x_plus = arrays.take("x_plus")?;
    let theta = arrays.take("theta")?;
    let traj = arrays.take("trajectory")?;
    let m = x.nrows();
    if [u.nrows(), x_plus.nrows(), theta.nrows(), traj.nrows()].iter().any(|&r| r != m) || m != manifest.snapshots {
        return Err(Error::Format("dataset arrays disagree on the snapshot count".into()));
    }
    let row = |mat: &DMatrix<f64>, j: usize| mat.row(j).iter().copied().collect::<Vec<f64>>();
    let snapshots = (0..m)
        .map(|j| Snapshot {
            x: row(&x, j),
            u: row(&u, j),
            x_plus: row(&x_plus, j),
            theta: row(&theta, j),
            trajectory: traj[(j, 0)] as usize,
        })
        .collect();
    let ds = Dataset::new(manifest.n_x, manifest.n_u, manifest.n_theta, snapshots)?;
    Ok((ds, manifest))
}

pub fn save_dataset(path: &Path, dataset: &Dataset, manifest: &DatasetManifest) -> Result<String> {
    let bytes = dataset_to_bytes(dataset, manifest);
    write_atomic(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

pub fn load_dataset(path: &Path) -> Result<(Dataset, DatasetManifest)> {
    dataset_from_bytes(&read(path)?)
}

/// Manifest of a cached condensed problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CondensedManifest {
    pub model_hash: String,
    pub spec_hash: String,
    pub quad_hash: String,
    pub horizon: usize,
    pub n_x: usize,
    pub n_u: usize,
    pub n_psi: usize,
    pub quad_nodes: usize,
    pub moments: Vec<(usize, f64, f64)>,
    pub x_min: Vec<Vec<f64>>,
    pub x_max: Vec<Vec<f64>>,
    pub u_min: Vec<f64>,
    pub u_max: Vec<f64>,
}

impl CondensedManifest {
    /// Cache key combining the three input hashes.
    pub fn key(model_hash: &str, spec_hash: &str, quad_hash: &str) -> String {
        sha256_hex(format!("{model_hash}:{spec_hash}:{quad_hash}").as_bytes())
    }
}

fn bounds_to_json(b: &[Vec<f64>]) -> Value {
    // JSON has no infinities; encode them as strings
    let enc = |v: f64| -> Value {
        if v.is_finite() {
            serde_json::json!(v)
        } else if v > 0.0 {
            Value::String("inf".into())
        } else {
            Value::String("-inf".into())
        }
    };
    Value::Array(b.iter().map(|row| Value::Array(row.iter().map(|&v| enc(v)).collect())).collect())
}

fn bounds_from_json(v: &Value) -> Result<Vec<Vec<f64>>> {
    let bad = || Error::Format("malformed bound array".into());
    v.as_array()
        .ok_or_else(bad)?
        .iter()
        .map(|row| {
            row.as_array()
                .ok_or_else(bad)?
                .iter()
                .map(|x| match x {
                    Value::String(s) if s == "inf" => Ok(f64::INFINITY),
                    Value::String(s) if s == "-inf" => Ok(f64::NEG_INFINITY),
                    other => other.as_f64().ok_or_else(bad),
                })
                .collect()
        })
        .collect()
}

pub fn condensed_to_bytes(cp: &CondensedProblem, model_hash: &str, spec_hash: &str, quad_hash: &str) -> Vec<u8> {
    let meta = serde_json::json!({
        "model_hash": model_hash,
        "spec_hash": spec_hash,
        "quad_hash": quad_hash,
        "horizon": cp.horizon,
        "n_x": cp.n_x,
        "n_u": cp.n_u,
        "n_psi": cp.n_psi,
        "quad_nodes": cp.quad_nodes,
        "moments": cp.moments.iter().map(|m| (m.t, m.b, m.bound)).collect::<Vec<_>>(),
        "x_min": bounds_to_json(&cp.x_min),
        "x_max": bounds_to_json(&cp.x_max),
        "u_min": bounds_to_json(std::slice::from_ref(&cp.u_min)),
        "u_max": bounds_to_json(std::slice::from_ref(&cp.u_max)),
    });
    let mut arrays = Arrays::new();
    arrays.push("H", cp.h.clone());
    arrays.push("W_gE", cp.w_ge.clone());
    arrays.push("W_EE", cp.w_ee.clone());
    for t in 0..cp.horizon {
        arrays.push(format!("E{}", t + 1), cp.e_bar[t].clone());
        arrays.push(format!("F{}", t + 1), cp.f_bar[t].clone());
    }
    for (k, m) in cp.moments.iter().enumerate() {
        arrays.push(format!("M{k}"), m.m.clone());
        arrays.push_vec(format!("c{k}"), &m.c);
    }
    encode("condensed", meta, &arrays)
}

pub fn condensed_from_bytes(bytes: &[u8]) -> Result<(CondensedProblem, CondensedManifest)> {
    let (meta, mut arrays) = decode(bytes, "condensed")?;
    let x_min = bounds_from_json(meta.get("x_min").unwrap_or(&Value::Null))?;
    let x_max = bounds_from_json(meta.get("x_max").unwrap_or(&Value::Null))?;
    let u_min = bounds_from_json(meta.get("u_min").unwrap_or(&Value::Null))?.pop().unwrap_or_default();
    let u_max = bounds_from_json(meta.get("u_max").unwrap_or(&Value::Null))?.pop().unwrap_or_default();
    let manifest = CondensedManifest {
        model_hash: field(&meta, "model_hash")?,
        spec_hash: field(&meta, "spec_hash")?,
        quad_hash: field(&meta, "quad_hash")?,
        horizon: field(&meta, "horizon")?,
        n_x: field(&meta, "n_x")?,
        n_u: field(&meta, "n_u")?,
        n_psi: field(&meta, "n_psi")?,
        quad_nodes: field(&meta, "quad_nodes")?,
        moments: field(&meta, "moments")?,
        x_min,
        x_max,
        u_min,
        u_max,
    };
    let h = arrays.take("H")?;
    let w_ge = arrays.take("W_gE")?;
    let w_ee = arrays.take("W_EE")?;
    let mut e_bar = Vec::new();
    let mut f_bar = Vec::new();
    for t in 1..=manifest.horizon {
        e_bar.push(arrays.take(&format!("E{t}"))?);
        f_bar.push(arrays.take(&format!("F{t}"))?);
    }
    let mut moments = Vec::new();
    for (k, &(t, b, bound)) in manifest.moments.iter().enumerate() {
        moments.push(CondensedMoment {
            t,
            m: arrays.take(&format!("M{k}"))?,
            c: arrays.take_vec(&format!("c{k}"))?,
            b,
            bound,
        });
    }
    let cp = CondensedProblem {
        horizon: manifest.horizon,
        n_x: manifest.n_x,
        n_u: manifest.n_u,
        n_psi: manifest.n_psi,
        h,
        w_ge,
        w_ee,
        e_bar,
        f_bar,
        moments,
        x_min: manifest.x_min.clone(),
        x_max: manifest.x_max.clone(),
        u_min: manifest.u_min.clone(),
        u_max: manifest.u_max.clone(),
        quad_nodes: manifest.quad_nodes,
        provenance: CondensedManifest::key(&manifest.model_hash, &manifest.spec_hash, &manifest.quad_hash),
    };
    Ok((cp, manifest))
}

/// Hash of a quadrature rule's nodes and weights.
pub fn quad_hash(rule: &crate::pce::QuadratureRule) -> String {
    let mut h = Sha256::new();
    for (x, w) in rule.iter() {
        for v in x {
            h.update(v.to_le_bytes());
        }
        h.update(w.to_le_bytes());
    }
    hex::encode(h.finalize())
}
