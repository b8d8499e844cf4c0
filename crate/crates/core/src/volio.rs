//! The BVOL volume container, checkpoints, datasets on disk and reports.
//!
//! BVOL layout, all integers little-endian:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "BVOL"
//! 4       1     format version, 1
//! 5       4     header length n (u32)
//! 9       n     header, UTF-8 JSON {"dims","dtype","name","spacing"}
//! 9+n     ...   payload, product(dims) scalars, row-major, last axis fastest
//! ```
//!
//! `dtype` is one of `f32`, `f64`, `u8`. The payload must be exactly
//! `product(dims) * size_of(dtype)` bytes.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::engine::{ExperimentReport, RunConfig};
use crate::losses::LossReport;
use crate::net::{DualNet, NetConfig, Param};
use crate::synth::{Dataset, Manifest, SynthVolume};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"BVOL";
pub const VERSION: u8 = 1;
const PREFIX: usize = 9;

#[derive(Debug, thiserror::Error)]
pub enum VolError {
    #[error("not a BVOL file (bad magic)")]
    BadMagic,
    #[error("unsupported BVOL version {0}")]
    UnsupportedVersion(u8),
    #[error("payload has {found} bytes, header implies {expected}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("unknown dtype {0:?}")]
    UnknownDtype(String),
    #[error("malformed header: {0}")]
    BadHeader(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
}

pub type VolResult<T> = std::result::Result<T, VolError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
    U8,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
            Dtype::U8 => 1,
        }
    }

    fn parse(s: &str) -> VolResult<Self> {
        match s {
            "f32" => Ok(Dtype::F32),
            "f64" => Ok(Dtype::F64),
            "u8" => Ok(Dtype::U8),
            other => Err(VolError::UnknownDtype(other.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolHeader {
    pub dims: Vec<usize>,
    pub dtype: Dtype,
    pub name: String,
    pub spacing: [f64; 3],
}

#[derive(Deserialize)]
struct RawHeader {
    dims: Vec<usize>,
    dtype: String,
    name: String,
    spacing: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub enum VolData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

impl VolData {
    pub fn dtype(&self) -> Dtype {
        match self {
            VolData::F32(_) => Dtype::F32,
            VolData::F64(_) => Dtype::F64,
            VolData::U8(_) => Dtype::U8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            VolData::F32(v) => v.len(),
            VolData::F64(v) => v.len(),
            VolData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A decoded BVOL file. The header text is kept verbatim so that a read
/// followed by a write reproduces the input bytes.
#[derive(Clone, Debug, PartialEq)]
pub struct VolContainer {
    header: VolHeader,
    header_text: String,
    data: VolData,
}

impl VolContainer {
    pub fn new(name: &str, dims: &[usize], data: VolData) -> VolResult<Self> {
        if !(3..=4).contains(&dims.len()) {
            return Err(VolError::BadHeader(format!("dims must have 3 or 4 entries, got {dims:?}")));
        }
        let expected: usize = dims.iter().product();
        if data.len() != expected {
            return Err(VolError::TruncatedPayload {
                expected: expected * data.dtype().size(),
                found: data.len() * data.dtype().size(),
            });
        }
        let header = VolHeader {
            dims: dims.to_vec(),
            dtype: data.dtype(),
            name: name.to_string(),
            spacing: [1.0; 3],
        };
        let header_text = serde_json::to_string(&header).expect("header serializes");
        Ok(Self {
            header,
            header_text,
            data,
        })
    }

    pub fn from_f32(name: &str, t: &Tensor<f32>) -> VolResult<Self> {
        Self::new(name, t.shape(), VolData::F32(t.data().to_vec()))
    }

    pub fn from_f64(name: &str, t: &Tensor<f64>) -> VolResult<Self> {
        Self::new(name, t.shape(), VolData::F64(t.data().to_vec()))
    }

    pub fn from_mask(name: &str, t: &Tensor<bool>) -> VolResult<Self> {
        Self::new(name, t.shape(), VolData::U8(t.data().iter().map(|&b| b as u8).collect()))
    }

    pub fn header(&self) -> &VolHeader {
        &self.header
    }

    pub fn data(&self) -> &VolData {
        &self.data
    }

    pub fn dims(&self) -> &[usize] {
        &self.header.dims
    }

    /// Values widened to `f64`.
    pub fn to_f64(&self) -> Tensor<f64> {
        let v: Vec<f64> = match &self.data {
            VolData::F32(d) => d.iter().map(|&x| x as f64).collect(),
            VolData::F64(d) => d.clone(),
            VolData::U8(d) => d.iter().map(|&x| x as f64).collect(),
        };
        Tensor::new(&self.header.dims, v).expect("validated on construction")
    }

    pub fn to_f32(&self) -> Tensor<f32> {
        match &self.data {
            VolData::F32(d) => Tensor::new(&self.header.dims, d.clone()).expect("validated on construction"),
            _ => self.to_f64().cast(),
        }
    }

    /// Nonzero voxels.
    pub fn to_mask(&self) -> Tensor<bool> {
        self.to_f64().map(|&v| v != 0.0)
    }

    pub fn encode(&self) -> Vec<u8> {
        let h = self.header_text.as_bytes();
        let mut out = Vec::with_capacity(PREFIX + h.len() + self.data.len() * self.data.dtype().size());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(h.len() as u32).to_le_bytes());
        out.extend_from_slice(h);
        match &self.data {
            VolData::F32(d) => d.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            VolData::F64(d) => d.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            VolData::U8(d) => out.extend_from_slice(d),
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> VolResult<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(VolError::BadMagic);
        }
        if bytes.len() < PREFIX {
            return Err(VolError::BadHeader("file ends inside the prefix".into()));
        }
        if bytes[4] != VERSION {
            return Err(VolError::UnsupportedVersion(bytes[4]));
        }
        let n = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
        let body = &bytes[PREFIX..];
        if body.len() < n {
            return Err(VolError::BadHeader(format!("header length {n} exceeds file")));
        }
        let header_text =
            std::str::from_utf8(&body[..n]).map_err(|e| VolError::BadHeader(e.to_string()))?.to_string();
        let raw: RawHeader = serde_json::from_str(&header_text).map_err(|e| VolError::BadHeader(e.to_string()))?;
        let dtype = Dtype::parse(&raw.dtype)?;
        if !(3..=4).contains(&raw.dims.len()) {
            return Err(VolError::BadHeader(format!("dims must have 3 or 4 entries, got {:?}", raw.dims)));
        }
        let count = raw
            .dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| VolError::BadHeader("dims overflow".into()))?;
        let payload = &body[n..];
        let expected = count * dtype.size();
        if payload.len() != expected {
            return Err(VolError::TruncatedPayload {
                expected,
                found: payload.len(),
            });
        }
        let data = match dtype {
            Dtype::F32 => VolData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            ),
            Dtype::F64 => VolData::F64(
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            ),
            Dtype::U8 => VolData::U8(payload.to_vec()),
        };
        Ok(Self {
            header: VolHeader {
                dims: raw.dims,
                dtype,
                name: raw.name,
                spacing: raw.spacing,
            },
            header_text,
            data,
        })
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> VolError + '_ {
    move |source| VolError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn format_err(path: &Path, msg: impl ToString) -> VolError {
    VolError::Format {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    }
}

/// Reads the whole file, then decodes; nothing is returned on failure.
pub fn read_vol(path: &Path) -> VolResult<VolContainer> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io_err(path))?;
    VolContainer::decode(&bytes)
}

pub fn write_vol(path: &Path, vol: &VolContainer) -> VolResult<()> {
    fs::File::create(path)
        .and_then(|mut f| f.write_all(&vol.encode()))
        .map_err(io_err(path))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> VolResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| format_err(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> VolResult<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| format_err(path, e))
}

pub fn create_dir(path: &Path) -> VolResult<()> {
    fs::create_dir_all(path).map_err(io_err(path))
}

/// Parses and validates a run configuration. Unknown keys are rejected and
/// missing keys take their defaults.
pub fn parse_run_config(text: &str) -> std::result::Result<RunConfig, String> {
    let cfg: RunConfig = serde_json::from_str(text).map_err(|e| e.to_string())?;
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub net: NetConfig,
    pub iteration: usize,
    pub params: Vec<CheckpointEntry>,
}

/// Parameter tensors as flat BVOL files under `dir`, indexed by
/// `manifest.json`.
pub fn save_checkpoint(dir: &Path, net: &DualNet, iteration: usize) -> VolResult<()> {
    create_dir(dir)?;
    let mut entries = Vec::with_capacity(net.params().len());
    for (i, p) in net.params().iter().enumerate() {
        let file = format!("{i:03}_{}.bvol", p.name);
        // BVOL holds 3 or 4 axes; the true shape is kept in the manifest
        let flat = [1, 1, p.value.numel()];
        let vol = VolContainer::new(&p.name, &flat, VolData::F32(p.value.data().to_vec()))?;
        write_vol(&dir.join(&file), &vol)?;
        entries.push(CheckpointEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            file,
        });
    }
    write_json(
        &dir.join("manifest.json"),
        &CheckpointManifest {
            net: net.config().clone(),
            iteration,
            params: entries,
        },
    )
}

pub fn load_checkpoint(dir: &Path) -> VolResult<(DualNet, usize)> {
    let path = dir.join("manifest.json");
    let m: CheckpointManifest = read_json(&path)?;
    let mut params = Vec::with_capacity(m.params.len());
    for e in &m.params {
        let vol = read_vol(&dir.join(&e.file))?;
        let data = match vol.data() {
            VolData::F32(d) => d.clone(),
            other => return Err(format_err(&path, format!("{} has dtype {:?}", e.file, other.dtype()))),
        };
        let value = Tensor::new(&e.shape, data).map_err(|err| format_err(&path, err))?;
        params.push(Param {
            name: e.name.clone(),
            value,
        });
    }
    let net = DualNet::from_params(m.net, params).map_err(|e| format_err(&path, e))?;
    Ok((net, m.iteration))
}

/// `manifest.json` plus `NNN_image.bvol` (f32) and `NNN_mask.bvol` (u8)
/// per volume.
pub fn save_dataset(dir: &Path, data: &Dataset) -> VolResult<()> {
    create_dir(dir)?;
    write_json(&dir.join("manifest.json"), &data.manifest)?;
    for (i, v) in data.volumes.iter().enumerate() {
        write_vol(&dir.join(format!("{i:03}_image.bvol")), &VolContainer::from_f32("image", &v.image)?)?;
        write_vol(&dir.join(format!("{i:03}_mask.bvol")), &VolContainer::from_mask("mask", &v.mask)?)?;
    }
    Ok(())
}

/// Reads a dataset written by [`save_dataset`]. Shape parameters are not
/// stored, so `lobes` is left empty.
pub fn load_dataset(dir: &Path) -> VolResult<Dataset> {
    let manifest: Manifest = read_json(&dir.join("manifest.json"))?;
    let mut volumes = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let image = read_vol(&dir.join(format!("{:03}_image.bvol", e.id)))?;
        let mask = read_vol(&dir.join(format!("{:03}_mask.bvol", e.id)))?;
        volumes.push(SynthVolume {
            seed: e.seed,
            kind: e.kind,
            lobes: Vec::new(),
            image: image.to_f32(),
            mask: mask.to_mask(),
        });
    }
    Ok(Dataset { manifest, volumes })
}

/// Writes the header row and one row per report.
pub fn write_loss_csv(path: &Path, rows: &[LossReport]) -> VolResult<()> {
    let mut text = String::from(LossReport::CSV_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(&r.csv_row());
        text.push('\n');
    }
    fs::write(path, text).map_err(io_err(path))
}

pub fn write_report(path: &Path, report: &ExperimentReport) -> VolResult<()> {
    write_json(path, report)
}
