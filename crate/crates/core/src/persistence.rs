//! On-disk formats. Everything is little-endian and written in a fixed
//! field order, so saving the same value twice yields identical bytes.
//!
//! * STPM: the deployable sparse ternary projection.
//!   `"STPM"`, version, n, m, k (u32 each), then per column `k` records of
//!   `(row: u32, sign: u8)` with `0x00 = -1`, `0x01 = +1`.
//! * TCSM: a model checkpoint. Header, network config, normalization
//!   statistics, then named tensor blocks. The ternary projection and mask
//!   are not stored; they are re-derived from the sensing weights on load.
//! * TCSY: per-patch measurement vectors of one image.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

use crate::error::Result;
use crate::imaging::{positions_along, NormalizationStats};
use crate::model::Model;
use crate::network::{BatchNormLayer, DenseLayer, HiddenLayer, NetworkConfig, ReconstructionNet, ScalingLayer};
use crate::numerics::{DenseMatrix, Sign, SparseTernaryMatrix};
use crate::projection::SensingWeights;

pub const STP_MAGIC: &[u8; 4] = b"STPM";
pub const STP_VERSION: u32 = 1;
pub const STP_HEADER_LEN: usize = 20;
pub const STP_RECORD_LEN: usize = 5;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TCSM";
pub const CHECKPOINT_VERSION: u32 = 1;

pub const MEASUREMENT_MAGIC: &[u8; 4] = b"TCSY";
pub const MEASUREMENT_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: String },
    #[error("unsupported version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("truncated file")]
    Truncated,
    #[error("{0} trailing bytes after the last record")]
    TrailingBytes(usize),
    #[error("column {column}: row index {index} out of range for n = {n}")]
    IndexOutOfRange { column: usize, index: u32, n: u32 },
    #[error("column {column}: duplicate or decreasing row index {index}")]
    DuplicateIndex { column: usize, index: u32 },
    #[error("column {column}: invalid sign byte {byte:#04x}")]
    InvalidSign { column: usize, byte: u8 },
    #[error("missing tensor {0:?}")]
    MissingTensor(String),
    #[error("dimension inconsistency: {0}")]
    DimensionInconsistency(String),
    #[error("invalid content: {0}")]
    Invalid(String),
}

type FResult<T> = std::result::Result<T, FormatError>;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, len: usize) -> FResult<&'a [u8]> {
        let end = self.pos.checked_add(len).ok_or(FormatError::Truncated)?;
        if end > self.buf.len() {
            return Err(FormatError::Truncated);
        }
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> FResult<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> FResult<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> FResult<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn magic(&mut self, expected: &[u8; 4]) -> FResult<()> {
        if self.take(4)? != expected {
            return Err(FormatError::BadMagic {
                expected: String::from_utf8_lossy(expected).into_owned(),
            });
        }
        Ok(())
    }

    fn version(&mut self, expected: u32) -> FResult<()> {
        let found = self.u32()?;
        if found != expected {
            return Err(FormatError::VersionMismatch { found, expected });
        }
        Ok(())
    }

    fn finish(&self) -> FResult<()> {
        match self.buf.len() - self.pos {
            0 => Ok(()),
            extra => Err(FormatError::TrailingBytes(extra)),
        }
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn dim_u32(v: usize, what: &str) -> FResult<u32> {
    u32::try_from(v).map_err(|_| FormatError::DimensionInconsistency(format!("{what} = {v} exceeds u32")))
}

/// Predicted STPM size: `20 + 5 m k` bytes.
pub fn stp_file_len(m: usize, k: usize) -> usize {
    STP_HEADER_LEN + STP_RECORD_LEN * m * k
}

pub fn encode_stp(t: &SparseTernaryMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(stp_file_len(t.m(), t.k()));
    out.extend_from_slice(STP_MAGIC);
    put_u32(&mut out, STP_VERSION);
    put_u32(&mut out, t.n() as u32);
    put_u32(&mut out, t.m() as u32);
    put_u32(&mut out, t.k() as u32);
    for j in 0..t.m() {
        for (i, s) in t.column(j) {
            put_u32(&mut out, i as u32);
            out.push(match s {
                Sign::Minus => 0x00,
                Sign::Plus => 0x01,
            });
        }
    }
    out
}

pub fn decode_stp(bytes: &[u8]) -> FResult<SparseTernaryMatrix> {
    let mut r = Reader::new(bytes);
    r.magic(STP_MAGIC)?;
    r.version(STP_VERSION)?;
    let n = r.u32()?;
    let m = r.u32()?;
    let k = r.u32()?;
    if k > n {
        return Err(FormatError::DimensionInconsistency(format!("k = {k} exceeds n = {n}")));
    }
    let expected = (m as u64) * (k as u64) * STP_RECORD_LEN as u64;
    if ((bytes.len() - STP_HEADER_LEN) as u64) < expected {
        return Err(FormatError::Truncated);
    }
    let mut columns = Vec::with_capacity(m as usize);
    for column in 0..m as usize {
        let mut col = Vec::with_capacity(k as usize);
        let mut prev: Option<u32> = None;
        for _ in 0..k {
            let index = r.u32()?;
            let byte = r.u8()?;
            if index >= n {
                return Err(FormatError::IndexOutOfRange { column, index, n });
            }
            if prev.is_some_and(|p| index <= p) {
                return Err(FormatError::DuplicateIndex { column, index });
            }
            prev = Some(index);
            let sign = match byte {
                0x00 => Sign::Minus,
                0x01 => Sign::Plus,
                _ => return Err(FormatError::InvalidSign { column, byte }),
            };
            col.push((index as usize, sign));
        }
        columns.push(col);
    }
    r.finish()?;
    SparseTernaryMatrix::new(n as usize, m as usize, k as usize, columns)
        .map_err(|e| FormatError::Invalid(e.to_string()))
}

pub fn save_stp(path: impl AsRef<Path>, t: &SparseTernaryMatrix) -> Result<()> {
    std::fs::write(path, encode_stp(t))?;
    Ok(())
}

pub fn load_stp(path: impl AsRef<Path>) -> Result<SparseTernaryMatrix> {
    let bytes = std::fs::read(path)?;
    Ok(decode_stp(&bytes)?)
}

/// A named tensor block inside a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

impl Tensor {
    fn vector(values: &[f64]) -> Self {
        Self {
            dims: vec![values.len()],
            values: values.to_vec(),
        }
    }

    fn matrix(m: &DenseMatrix) -> Self {
        Self {
            dims: vec![m.rows(), m.cols()],
            values: m.as_slice().to_vec(),
        }
    }
}

/// Tensor names in file order.
pub fn tensor_names(hidden_layers: usize) -> Vec<String> {
    let mut names = vec!["sensing.theta".to_string(), "scaling.alpha".to_string()];
    for l in 0..hidden_layers {
        for part in ["weight", "bias", "bn.gamma", "bn.beta", "bn.running_mean", "bn.running_var"] {
            names.push(format!("hidden.{l}.{part}"));
        }
    }
    names.push("output.weight".into());
    names.push("output.bias".into());
    names
}

fn model_tensors(model: &Model) -> Vec<(String, Tensor)> {
    let mut out = vec![
        ("sensing.theta".to_string(), Tensor::matrix(model.sensing.theta())),
        ("scaling.alpha".to_string(), Tensor::vector(&model.net.scaling.alpha)),
    ];
    for (l, h) in model.net.hidden.iter().enumerate() {
        out.push((format!("hidden.{l}.weight"), Tensor::matrix(&h.dense.weights)));
        out.push((format!("hidden.{l}.bias"), Tensor::vector(&h.dense.bias)));
        out.push((format!("hidden.{l}.bn.gamma"), Tensor::vector(&h.bn.gamma)));
        out.push((format!("hidden.{l}.bn.beta"), Tensor::vector(&h.bn.beta)));
        out.push((format!("hidden.{l}.bn.running_mean"), Tensor::vector(&h.bn.running_mean)));
        out.push((format!("hidden.{l}.bn.running_var"), Tensor::vector(&h.bn.running_var)));
    }
    out.push(("output.weight".into(), Tensor::matrix(&model.net.output.weights)));
    out.push(("output.bias".into(), Tensor::vector(&model.net.output.bias)));
    out
}

pub fn encode_checkpoint(model: &Model) -> Vec<u8> {
    let tensors = model_tensors(model);
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    let c = &model.config;
    put_u32(&mut out, c.patch_side as u32);
    put_f64(&mut out, c.sensing_rate);
    put_f64(&mut out, c.sparsity_ratio);
    put_u32(&mut out, c.hidden_layers as u32);
    put_u32(&mut out, c.hidden_units as u32);
    put_f64(&mut out, model.stats.mean);
    put_f64(&mut out, model.stats.std);
    put_u32(&mut out, tensors.len() as u32);
    for (name, t) in &tensors {
        put_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.dims.len() as u32);
        for &d in &t.dims {
            put_u32(&mut out, d as u32);
        }
        for &v in &t.values {
            put_f64(&mut out, v);
        }
    }
    out
}

/// Reads every tensor block without interpreting it.
pub fn decode_checkpoint_raw(
    bytes: &[u8],
) -> FResult<(NetworkConfig, NormalizationStats, BTreeMap<String, Tensor>)> {
    let mut r = Reader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    r.version(CHECKPOINT_VERSION)?;
    let config = NetworkConfig {
        patch_side: r.u32()? as usize,
        sensing_rate: r.f64()?,
        sparsity_ratio: r.f64()?,
        hidden_layers: r.u32()? as usize,
        hidden_units: r.u32()? as usize,
    };
    config
        .validate()
        .map_err(|e| FormatError::Invalid(format!("network config: {e}")))?;
    let stats = NormalizationStats::new(r.f64()?, r.f64()?)
        .map_err(|e| FormatError::Invalid(e.to_string()))?;
    let count = r.u32()?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| FormatError::Invalid("tensor name is not UTF-8".into()))?;
        let ndims = r.u32()? as usize;
        let mut dims = Vec::with_capacity(ndims.min(8));
        for _ in 0..ndims {
            dims.push(r.u32()? as usize);
        }
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| FormatError::DimensionInconsistency(format!("{name}: size overflow")))?;
        if numel.saturating_mul(8) > bytes.len() - r.pos {
            return Err(FormatError::Truncated);
        }
        let values = (0..numel).map(|_| r.f64()).collect::<FResult<Vec<_>>>()?;
        if tensors.insert(name.clone(), Tensor { dims, values }).is_some() {
            return Err(FormatError::Invalid(format!("tensor {name:?} appears twice")));
        }
    }
    r.finish()?;
    Ok((config, stats, tensors))
}

fn take_tensor(map: &mut BTreeMap<String, Tensor>, name: &str, dims: &[usize]) -> FResult<Tensor> {
    let t = map
        .remove(name)
        .ok_or_else(|| FormatError::MissingTensor(name.to_string()))?;
    if t.dims != dims {
        return Err(FormatError::DimensionInconsistency(format!(
            "{name} has dims {:?}, expected {dims:?}",
            t.dims
        )));
    }
    if t.values.iter().any(|v| !v.is_finite()) {
        return Err(FormatError::Invalid(format!("{name} holds non-finite values")));
    }
    Ok(t)
}

fn take_matrix(map: &mut BTreeMap<String, Tensor>, name: &str, rows: usize, cols: usize) -> FResult<DenseMatrix> {
    let t = take_tensor(map, name, &[rows, cols])?;
    DenseMatrix::from_vec(rows, cols, t.values).map_err(|e| FormatError::Invalid(e.to_string()))
}

fn take_vector(map: &mut BTreeMap<String, Tensor>, name: &str, len: usize) -> FResult<Vec<f64>> {
    Ok(take_tensor(map, name, &[len])?.values)
}

pub fn decode_checkpoint(bytes: &[u8]) -> FResult<Model> {
    let (config, stats, mut map) = decode_checkpoint_raw(bytes)?;
    let (n, m, h) = (config.n(), config.m(), config.hidden_units);
    let theta = take_matrix(&mut map, "sensing.theta", n, m)?;
    let alpha = take_vector(&mut map, "scaling.alpha", m)?;
    if alpha.iter().any(|&a| a < 0.0) {
        return Err(FormatError::Invalid("negative scale factor".into()));
    }
    let mut hidden = Vec::with_capacity(config.hidden_layers);
    let mut fan_in = m;
    for l in 0..config.hidden_layers {
        let weights = take_matrix(&mut map, &format!("hidden.{l}.weight"), fan_in, h)?;
        let bias = take_vector(&mut map, &format!("hidden.{l}.bias"), h)?;
        let mut bn = BatchNormLayer::new(h);
        bn.gamma = take_vector(&mut map, &format!("hidden.{l}.bn.gamma"), h)?;
        bn.beta = take_vector(&mut map, &format!("hidden.{l}.bn.beta"), h)?;
        bn.running_mean = take_vector(&mut map, &format!("hidden.{l}.bn.running_mean"), h)?;
        bn.running_var = take_vector(&mut map, &format!("hidden.{l}.bn.running_var"), h)?;
        if bn.running_var.iter().any(|&v| v < 0.0) {
            return Err(FormatError::Invalid(format!("hidden.{l}.bn.running_var is negative")));
        }
        hidden.push(HiddenLayer {
            dense: DenseLayer { weights, bias },
            bn,
        });
        fan_in = h;
    }
    let output = DenseLayer {
        weights: take_matrix(&mut map, "output.weight", fan_in, n)?,
        bias: take_vector(&mut map, "output.bias", n)?,
    };
    if let Some(extra) = map.keys().next() {
        return Err(FormatError::Invalid(format!("unexpected tensor {extra:?}")));
    }
    let sensing = SensingWeights::new(theta, config.k()).map_err(|e| FormatError::Invalid(e.to_string()))?;
    Ok(Model {
        config,
        stats,
        sensing,
        net: ReconstructionNet {
            scaling: ScalingLayer { alpha },
            hidden,
            output,
        },
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &Model) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let bytes = std::fs::read(path)?;
    Ok(decode_checkpoint(&bytes)?)
}

/// Measurements of every window of one image on a regular grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementSet {
    pub width: usize,
    pub height: usize,
    pub patch_side: usize,
    pub stride: usize,
    /// One row per patch, grid order (rows outer).
    pub vectors: DenseMatrix,
}

impl MeasurementSet {
    pub fn expected_patches(&self) -> usize {
        positions_along(self.width, self.patch_side, self.stride)
            * positions_along(self.height, self.patch_side, self.stride)
    }
}

/// `"TCSY"`, version, width, height, patch side, stride, m, patch count
/// (u32 each), then `count * m` f64 values.
pub fn encode_measurements(set: &MeasurementSet) -> FResult<Vec<u8>> {
    let mut out = Vec::with_capacity(32 + set.vectors.as_slice().len() * 8);
    out.extend_from_slice(MEASUREMENT_MAGIC);
    put_u32(&mut out, MEASUREMENT_VERSION);
    for (v, what) in [
        (set.width, "width"),
        (set.height, "height"),
        (set.patch_side, "patch side"),
        (set.stride, "stride"),
        (set.vectors.cols(), "m"),
        (set.vectors.rows(), "patch count"),
    ] {
        put_u32(&mut out, dim_u32(v, what)?);
    }
    for &v in set.vectors.as_slice() {
        put_f64(&mut out, v);
    }
    Ok(out)
}

pub fn decode_measurements(bytes: &[u8]) -> FResult<MeasurementSet> {
    let mut r = Reader::new(bytes);
    r.magic(MEASUREMENT_MAGIC)?;
    r.version(MEASUREMENT_VERSION)?;
    let width = r.u32()? as usize;
    let height = r.u32()? as usize;
    let patch_side = r.u32()? as usize;
    let stride = r.u32()? as usize;
    let m = r.u32()? as usize;
    let count = r.u32()? as usize;
    if (count as u64) * (m as u64) * 8 > (bytes.len() - r.pos) as u64 {
        return Err(FormatError::Truncated);
    }
    let values = (0..count * m).map(|_| r.f64()).collect::<FResult<Vec<_>>>()?;
    r.finish()?;
    let vectors = DenseMatrix::from_vec(count, m, values).map_err(|e| FormatError::Invalid(e.to_string()))?;
    let set = MeasurementSet {
        width,
        height,
        patch_side,
        stride,
        vectors,
    };
    if stride == 0 || patch_side == 0 || set.expected_patches() != count {
        return Err(FormatError::DimensionInconsistency(format!(
            "{count} patches recorded, {} expected for a {width}x{height} image with side {patch_side} and stride {stride}",
            set.expected_patches()
        )));
    }
    Ok(set)
}

pub fn save_measurements(path: impl AsRef<Path>, set: &MeasurementSet) -> Result<()> {
    std::fs::write(path, encode_measurements(set)?)?;
    Ok(())
}

pub fn load_measurements(path: impl AsRef<Path>) -> Result<MeasurementSet> {
    let bytes = std::fs::read(path)?;
    Ok(decode_measurements(&bytes)?)
}
