//! Binary checkpoints: a JSON header describing named arrays, followed by the
//! raw little-endian `f64` data.
//!
//! Layout: `b"HOICKPT\0"`, `u32` format version, `u64` header length, header
//! bytes, data. All integers little-endian.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use hoi_tensor::optim::{AdamW, Moments};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::model::HoiModel;

const MAGIC: &[u8; 8] = b"HOICKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("not a checkpoint file (bad magic)")]
    Magic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    rows: usize,
    cols: usize,
    offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct MomentEntry {
    name: String,
    steps: u64,
    m: ArrayEntry,
    v: ArrayEntry,
}

/// Training progress stored alongside the parameters.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainProgress {
    /// Number of completed epochs.
    pub epoch: usize,
    /// Number of completed optimizer steps.
    pub step: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    config: Config,
    progress: TrainProgress,
    params: Vec<ArrayEntry>,
    moments: Vec<MomentEntry>,
    total_values: usize,
}

/// Everything a checkpoint holds, decoded.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: Config,
    pub progress: TrainProgress,
    pub params: Vec<(String, Array2<f64>)>,
    /// Optimizer moments keyed by parameter name.
    pub moments: HashMap<String, Moments>,
}

impl Checkpoint {
    /// Snapshot of a model and (optionally) its optimizer.
    pub fn capture(model: &HoiModel, config: Config, optim: Option<&AdamW>, progress: TrainProgress) -> Self {
        let params = model.store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect();
        let moments = optim
            .map(|o| {
                o.state
                    .iter()
                    .map(|(id, m)| (model.store.get(*id).name.clone(), m.clone()))
                    .collect()
            })
            .unwrap_or_default();
        Checkpoint { config, progress, params, moments }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut data: Vec<f64> = Vec::new();
        let mut push = |name: &str, a: &Array2<f64>| {
            let e = ArrayEntry { name: name.to_string(), rows: a.nrows(), cols: a.ncols(), offset: data.len() };
            data.extend(a.iter());
            e
        };
        let params = self.params.iter().map(|(n, a)| push(n, a)).collect();
        let mut names: Vec<&String> = self.moments.keys().collect();
        names.sort();
        let moments = names
            .into_iter()
            .map(|n| {
                let m = &self.moments[n];
                MomentEntry { name: n.clone(), steps: m.steps, m: push(n, &m.m), v: push(n, &m.v) }
            })
            .collect();
        let header = Header {
            config: self.config.clone(),
            progress: self.progress.clone(),
            params,
            moments,
            total_values: data.len(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + header.len() + data.len() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self, CheckpointError> {
        let corrupt = |m: &str| CheckpointError::Corrupt(m.to_string());
        let mut magic = [0u8; 8];
        bytes.read_exact(&mut magic).map_err(|_| CheckpointError::Magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::Magic);
        }
        let mut b4 = [0u8; 4];
        bytes.read_exact(&mut b4).map_err(|_| corrupt("truncated version"))?;
        let version = u32::from_le_bytes(b4);
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let mut b8 = [0u8; 8];
        bytes.read_exact(&mut b8).map_err(|_| corrupt("truncated header length"))?;
        let hlen = u64::from_le_bytes(b8) as usize;
        if bytes.len() < hlen {
            return Err(corrupt("truncated header"));
        }
        let header: Header =
            serde_json::from_slice(&bytes[..hlen]).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        let body = &bytes[hlen..];
        if body.len() != header.total_values * 8 {
            return Err(corrupt("data length does not match header"));
        }
        let value = |i: usize| f64::from_le_bytes(body[i * 8..i * 8 + 8].try_into().unwrap());
        let read = |e: &ArrayEntry| -> Result<Array2<f64>, CheckpointError> {
            if e.offset + e.rows * e.cols > header.total_values {
                return Err(CheckpointError::Corrupt(format!("array `{}` out of bounds", e.name)));
            }
            Ok(Array2::from_shape_fn((e.rows, e.cols), |(r, c)| value(e.offset + r * e.cols + c)))
        };
        let params = header
            .params
            .iter()
            .map(|e| Ok((e.name.clone(), read(e)?)))
            .collect::<Result<Vec<_>, CheckpointError>>()?;
        let mut moments = HashMap::new();
        for e in &header.moments {
            moments.insert(e.name.clone(), Moments { m: read(&e.m)?, v: read(&e.v)?, steps: e.steps });
        }
        Ok(Checkpoint { config: header.config, progress: header.progress, params, moments })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io = |e| CheckpointError::Io { path: path.to_path_buf(), source: e };
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(io)?;
        f.write_all(&self.to_bytes()).map_err(io)?;
        f.sync_all().map_err(io)?;
        fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|e| CheckpointError::Io { path: path.to_path_buf(), source: e })?;
        Self::from_bytes(&bytes)
    }

    /// Rebuilds the model described by the stored config with the stored
    /// parameter values.
    pub fn restore_model(&self) -> Result<HoiModel, CheckpointError> {
        let cfg = self.config.clone().validate()?;
        let mut model = HoiModel::new(cfg.model, 0);
        if model.store.len() != self.params.len() {
            return Err(CheckpointError::Corrupt(format!(
                "checkpoint has {} arrays, model expects {}",
                self.params.len(),
                model.store.len()
            )));
        }
        for (name, value) in &self.params {
            model.store.set(name, value.clone()).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        }
        Ok(model)
    }

    /// Optimizer state keyed by the model's parameter ids.
    pub fn restore_optimizer(&self, model: &HoiModel) -> Result<AdamW, CheckpointError> {
        let mut opt = AdamW::default();
        for (name, m) in &self.moments {
            let id = model
                .store
                .id(name)
                .ok_or_else(|| CheckpointError::Corrupt(format!("moments for unknown parameter `{name}`")))?;
            opt.state.insert(id, m.clone());
        }
        Ok(opt)
    }
}
