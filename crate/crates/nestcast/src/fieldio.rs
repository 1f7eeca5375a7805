//! Physical fields on lat-lon grids and their on-disk format.
//!
//! A field file is a single JSON header line followed by a raw little-endian
//! payload, row-major `[T?, C, H, W]`. The header carries dims, dtype,
//! channel names, grid registration, provenance, and a SHA-256 of the
//! payload; readers verify the hash.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, FormatError, Result};
use crate::tensorcore::{Real, Tensor2};

/// Cell-center registration of a lat-lon grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lat0: f64,
    pub dlat: f64,
    pub lon0: f64,
    pub dlon: f64,
}

impl GridSpec {
    /// Global equiangular grid with `h × w` cells.
    pub fn global(h: usize, w: usize) -> Self {
        let dlat = 180.0 / h as f64;
        let dlon = 360.0 / w as f64;
        GridSpec {
            lat0: -90.0 + 0.5 * dlat,
            dlat,
            lon0: -180.0 + 0.5 * dlon,
            dlon,
        }
    }

    pub fn lat(&self, i: usize) -> f64 {
        self.lat0 + i as f64 * self.dlat
    }

    pub fn lon(&self, j: usize) -> f64 {
        self.lon0 + j as f64 * self.dlon
    }
}

/// A dense `[C, H, W]` field of physical values.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldTensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
    pub grid: GridSpec,
}

impl FieldTensor {
    pub fn zeros(c: usize, h: usize, w: usize, grid: GridSpec) -> Self {
        FieldTensor {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
            grid,
        }
    }

    #[inline]
    pub fn get(&self, c: usize, i: usize, j: usize) -> f64 {
        self.data[(c * self.h + i) * self.w + j]
    }

    #[inline]
    pub fn set(&mut self, c: usize, i: usize, j: usize, v: f64) {
        self.data[(c * self.h + i) * self.w + j] = v;
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.data[c * self.h * self.w..(c + 1) * self.h * self.w]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        &mut self.data[c * self.h * self.w..(c + 1) * self.h * self.w]
    }

    pub fn same_shape(&self, other: &FieldTensor) -> bool {
        self.c == other.c && self.h == other.h && self.w == other.w
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reshape to the network's node layout: `[H·W × C]`, node index
    /// `i·W + j`.
    pub fn to_node_matrix<T: Real>(&self) -> Tensor2<T> {
        Tensor2::from_fn(self.h * self.w, self.c, |node, c| {
            T::from_f64(self.get(c, node / self.w, node % self.w))
        })
    }

    /// Inverse of [`Self::to_node_matrix`].
    pub fn from_node_matrix<T: Real>(m: &Tensor2<T>, h: usize, w: usize, grid: GridSpec) -> Self {
        assert_eq!(m.rows(), h * w, "node matrix rows must equal H·W");
        let c = m.cols();
        let mut f = FieldTensor::zeros(c, h, w, grid);
        for node in 0..h * w {
            for ch in 0..c {
                f.set(ch, node / w, node % w, m.get(node, ch).as_f64());
            }
        }
        f
    }
}

/// A time sequence of equally shaped fields with named channels.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSeries {
    pub channels: Vec<String>,
    pub steps: Vec<FieldTensor>,
}

impl FieldSeries {
    pub fn new(channels: Vec<String>, steps: Vec<FieldTensor>) -> Self {
        if let Some(first) = steps.first() {
            assert_eq!(first.c, channels.len(), "channel names must match C");
            assert!(steps.iter().all(|s| s.same_shape(first)));
        }
        FieldSeries { channels, steps }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn channel_index(&self, name: &str) -> Option<usize> {
        self.channels.iter().position(|c| c == name)
    }
}

/// JSON header of a field file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FieldHeader {
    /// `[C, H, W]` or `[T, C, H, W]`.
    pub dims: Vec<usize>,
    pub dtype: String,
    pub channels: Vec<String>,
    pub lat0: f64,
    pub dlat: f64,
    pub lon0: f64,
    pub dlon: f64,
    #[serde(default)]
    pub units: Option<Vec<String>>,
    /// Seed, generator name, and anything else the producer wants recorded.
    #[serde(default)]
    pub provenance: serde_json::Value,
    pub payload_sha256: String,
}

impl FieldHeader {
    /// Enforce the stored dtype, honoring an explicit conversion opt-in.
    pub fn require_dtype(&self, requested: &str, allow_convert: bool) -> Result<()> {
        if self.dtype == requested || allow_convert {
            Ok(())
        } else {
            Err(FormatError::DtypeNeedsConversion {
                stored: self.dtype.clone(),
                requested: requested.to_string(),
            }
            .into())
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    format!("{:x}", hasher.finalize())
}

fn dtype_size(path: &Path, tag: &str) -> Result<usize> {
    match tag {
        "f32le" => Ok(4),
        "f64le" => Ok(8),
        other => Err(FormatError::UnknownDtype {
            path: path.to_path_buf(),
            tag: other.to_string(),
        }
        .into()),
    }
}

fn encode_payload(series: &FieldSeries, dtype: &str) -> Vec<u8> {
    let per = if dtype == "f64le" { 8 } else { 4 };
    let n: usize = series.steps.iter().map(|s| s.data.len()).sum();
    let mut out = Vec::with_capacity(n * per);
    for step in &series.steps {
        for &v in &step.data {
            if dtype == "f64le" {
                out.extend_from_slice(&v.to_le_bytes());
            } else {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    out
}

/// Write a `[T, C, H, W]` field file.
pub fn write_series(
    path: &Path,
    series: &FieldSeries,
    dtype: &str,
    provenance: serde_json::Value,
) -> Result<()> {
    dtype_size(path, dtype)?;
    assert!(!series.is_empty(), "cannot write an empty series");
    let first = &series.steps[0];
    let payload = encode_payload(series, dtype);
    let header = FieldHeader {
        dims: vec![series.len(), first.c, first.h, first.w],
        dtype: dtype.to_string(),
        channels: series.channels.clone(),
        lat0: first.grid.lat0,
        dlat: first.grid.dlat,
        lon0: first.grid.lon0,
        dlon: first.grid.dlon,
        units: None,
        provenance,
        payload_sha256: sha256_hex(&payload),
    };
    let mut bytes = serde_json::to_string(&header)?.into_bytes();
    bytes.push(b'\n');
    bytes.extend_from_slice(&payload);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Write a single `[C, H, W]` field file.
pub fn write_field(
    path: &Path,
    field: &FieldTensor,
    channels: &[String],
    dtype: &str,
    provenance: serde_json::Value,
) -> Result<()> {
    dtype_size(path, dtype)?;
    let series = FieldSeries::new(channels.to_vec(), vec![field.clone()]);
    let payload = encode_payload(&series, dtype);
    let header = FieldHeader {
        dims: vec![field.c, field.h, field.w],
        dtype: dtype.to_string(),
        channels: channels.to_vec(),
        lat0: field.grid.lat0,
        dlat: field.grid.dlat,
        lon0: field.grid.lon0,
        dlon: field.grid.dlon,
        units: None,
        provenance,
        payload_sha256: sha256_hex(&payload),
    };
    let mut bytes = serde_json::to_string(&header)?.into_bytes();
    bytes.push(b'\n');
    bytes.extend_from_slice(&payload);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// A parsed field file: header plus the decoded steps (a single `[C,H,W]`
/// file loads as a one-step series).
#[derive(Debug, Clone)]
pub struct LoadedField {
    pub header: FieldHeader,
    pub series: FieldSeries,
    pub has_time_dim: bool,
}

/// Read and verify a field file.
pub fn read_field(path: &Path) -> Result<LoadedField> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let newline = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| {
        FormatError::MalformedHeader {
            path: path.to_path_buf(),
            detail: "no header line".into(),
        }
    })?;
    let header: FieldHeader =
        serde_json::from_slice(&bytes[..newline]).map_err(|e| FormatError::MalformedHeader {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
    let payload = &bytes[newline + 1..];

    let per = dtype_size(path, &header.dtype)?;
    let (t, c, h, w, has_time_dim) = match header.dims.len() {
        3 => (1, header.dims[0], header.dims[1], header.dims[2], false),
        4 => (
            header.dims[0],
            header.dims[1],
            header.dims[2],
            header.dims[3],
            true,
        ),
        n => {
            return Err(FormatError::MalformedHeader {
                path: path.to_path_buf(),
                detail: format!("dims must have 3 or 4 entries, got {n}"),
            }
            .into())
        }
    };
    let expected = t * c * h * w * per;
    if payload.len() != expected {
        return Err(FormatError::TruncatedPayload {
            path: path.to_path_buf(),
            expected,
            actual: payload.len(),
        }
        .into());
    }
    let actual_hash = sha256_hex(payload);
    if actual_hash != header.payload_sha256 {
        return Err(FormatError::HashMismatch {
            path: path.to_path_buf(),
            expected: header.payload_sha256.clone(),
            actual: actual_hash,
        }
        .into());
    }

    let grid = GridSpec {
        lat0: header.lat0,
        dlat: header.dlat,
        lon0: header.lon0,
        dlon: header.dlon,
    };
    let step_len = c * h * w;
    let mut steps = Vec::with_capacity(t);
    for ti in 0..t {
        let mut data = Vec::with_capacity(step_len);
        let base = ti * step_len * per;
        for k in 0..step_len {
            let off = base + k * per;
            let v = if per == 8 {
                f64::from_le_bytes(payload[off..off + 8].try_into().unwrap())
            } else {
                f32::from_le_bytes(payload[off..off + 4].try_into().unwrap()) as f64
            };
            data.push(v);
        }
        steps.push(FieldTensor { c, h, w, data, grid });
    }
    let channels = if header.channels.len() == c {
        header.channels.clone()
    } else {
        (0..c).map(|i| format!("ch{i}")).collect()
    };
    Ok(LoadedField {
        header,
        series: FieldSeries::new(channels, steps),
        has_time_dim,
    })
}
