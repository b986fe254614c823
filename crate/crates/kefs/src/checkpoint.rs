//! Named-array checkpoints in JSON or a compact binary layout.
//!
//! Binary layout, all integers little-endian:
//!
//! ```text
//! magic   8 bytes  "KEFSCKPT"
//! version u32
//! count   u32
//! count × entry:
//!     name_len u32, name (UTF-8, name_len bytes)
//!     ndim     u32, dims (ndim × u64)
//!     data     product(dims) × f64
//! ```
//!
//! Entries appear in ascending name order in both encodings.

use std::collections::BTreeMap;
use std::path::Path;

use kefs_core::graphs::GraphKind;
use kefs_core::msgf::MsgfShape;
use kefs_core::rfdm::DiffusionSchedule;
use kefs_core::training::{KefsModel, TrainConfig};
use kefs_core::Matrix;
use serde::{Deserialize, Serialize};

use crate::error::{KefsError, Result};
use crate::formats::write_atomic;

pub const FORMAT: &str = "kefs-checkpoint";
pub const VERSION: u32 = 1;
pub const MAGIC: &[u8; 8] = b"KEFSCKPT";

const SHAPE_KEY: &str = "meta.shape";
const GRAPHS_KEY: &str = "meta.graphs";
const GAMMA_KEY: &str = "schedule.gamma";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointFormat {
    #[default]
    Json,
    Binary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedArray {
    pub fn from_matrix(m: &Matrix) -> Self {
        Self { shape: vec![m.rows(), m.cols()], data: m.data().to_vec() }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    fn expected_len(&self) -> Option<usize> {
        self.shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
    }

    /// 2-D arrays only.
    pub fn to_matrix(&self) -> Option<Matrix> {
        match self.shape[..] {
            [r, c] if self.expected_len() == Some(self.data.len()) => Some(Matrix::from_vec(r, c, self.data.clone())),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub arrays: BTreeMap<String, NamedArray>,
}

#[derive(Serialize, Deserialize)]
struct JsonDoc {
    format: String,
    version: u32,
    arrays: BTreeMap<String, NamedArray>,
}

impl Checkpoint {
    /// Every parameter plus the diffusion schedule and the model shape.
    pub fn from_model(model: &KefsModel) -> Self {
        let mut arrays: BTreeMap<String, NamedArray> = model
            .store
            .iter()
            .map(|(_, name, m)| (name.to_string(), NamedArray::from_matrix(m)))
            .collect();
        arrays.insert(GAMMA_KEY.into(), NamedArray::vector(model.schedule.gammas().to_vec()));
        let s = model.shape;
        let shape = [s.classes, s.word_dim, s.attr_dim, s.feature_dim].map(|x| x as f64);
        arrays.insert(SHAPE_KEY.into(), NamedArray::vector(shape.to_vec()));
        let present = GraphKind::ALL.map(|k| f64::from(u8::from(model.msgf.uses(k))));
        arrays.insert(GRAPHS_KEY.into(), NamedArray::vector(present.to_vec()));
        Self { arrays }
    }

    fn meta(&self, key: &str, len: usize) -> std::result::Result<Vec<usize>, String> {
        let a = self.arrays.get(key).ok_or_else(|| format!("missing {key}"))?;
        if a.data.len() != len || a.data.iter().any(|x| x.fract() != 0.0 || *x < 0.0) {
            return Err(format!("{key} must hold {len} non-negative integers"));
        }
        Ok(a.data.iter().map(|&x| x as usize).collect())
    }

    /// Rebuilds a model for `config` and overwrites every parameter. Names
    /// and shapes must match exactly.
    pub fn restore(&self, config: &TrainConfig) -> std::result::Result<KefsModel, String> {
        let s = self.meta(SHAPE_KEY, 4)?;
        let shape = MsgfShape { classes: s[0], word_dim: s[1], attr_dim: s[2], feature_dim: s[3] };
        let graphs = self.meta(GRAPHS_KEY, 3)?;
        let available: Vec<GraphKind> = GraphKind::ALL.into_iter().filter(|k| graphs[k.index()] == 1).collect();
        let mut model = KefsModel::new(config, shape, &available).map_err(|e| e.to_string())?;
        let gamma = self.arrays.get(GAMMA_KEY).ok_or("missing schedule.gamma")?;
        model.schedule = DiffusionSchedule::from_gamma(gamma.data.clone()).map_err(|e| e.to_string())?;
        if model.schedule.steps() != config.schedule.steps {
            return Err(format!(
                "checkpoint has {} diffusion steps, config asks for {}",
                model.schedule.steps(),
                config.schedule.steps
            ));
        }
        let names = model.store.to_name_list();
        for name in &names {
            let array = self.arrays.get(name).ok_or_else(|| format!("missing parameter {name}"))?;
            let m = array.to_matrix().ok_or_else(|| format!("parameter {name} is not a valid 2-D array"))?;
            model.store.assign(name, m)?;
        }
        let known = names.len() + 3;
        if self.arrays.len() != known {
            let extra = self
                .arrays
                .keys()
                .find(|k| !names.contains(k) && ![SHAPE_KEY, GRAPHS_KEY, GAMMA_KEY].contains(&k.as_str()));
            return Err(format!("unexpected array {}", extra.map(String::as_str).unwrap_or("?")));
        }
        Ok(model)
    }

    pub fn to_json(&self) -> Vec<u8> {
        let doc = JsonDoc { format: FORMAT.into(), version: VERSION, arrays: self.arrays.clone() };
        crate::formats::to_json_bytes(&doc)
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, String> {
        let doc: JsonDoc = serde_json::from_str(text).map_err(|e| e.to_string())?;
        if doc.format != FORMAT {
            return Err(format!("format is {:?}, expected {FORMAT:?}", doc.format));
        }
        if doc.version != VERSION {
            return Err(format!("version {} is not supported (expected {VERSION})", doc.version));
        }
        for (name, a) in &doc.arrays {
            if a.expected_len() != Some(a.data.len()) {
                return Err(format!("array {name}: shape {:?} does not match {} values", a.shape, a.data.len()));
            }
        }
        Ok(Self { arrays: doc.arrays })
    }

    pub fn to_binary(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, a) in &self.arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(a.shape.len() as u32).to_le_bytes());
            for &d in &a.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in &a.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_binary(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err("bad magic, not a binary checkpoint".into());
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format!("version {version} is not supported (expected {VERSION})"));
        }
        let count = r.u32()?;
        let mut arrays = BTreeMap::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| "array name is not UTF-8".to_string())?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().and_then(|d| usize::try_from(d).map_err(|_| "dimension overflows".to_string())))
                .collect::<std::result::Result<Vec<usize>, String>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| format!("array {name}: size overflows"))?;
            if n.checked_mul(8).is_none_or(|b| b > r.remaining()) {
                return Err(format!("truncated in array {name} ({n} values declared)"));
            }
            let data = (0..n).map(|_| r.f64()).collect::<std::result::Result<Vec<f64>, String>>()?;
            if arrays.insert(name.clone(), NamedArray { shape, data }).is_some() {
                return Err(format!("array {name} appears twice"));
            }
        }
        if r.pos != bytes.len() {
            return Err(format!("{} trailing bytes", bytes.len() - r.pos));
        }
        Ok(Self { arrays })
    }

    pub fn encode(&self, format: CheckpointFormat) -> Vec<u8> {
        match format {
            CheckpointFormat::Json => self.to_json(),
            CheckpointFormat::Binary => self.to_binary(),
        }
    }

    pub fn save(&self, path: &Path, format: CheckpointFormat) -> Result<()> {
        write_atomic(path, &self.encode(format))
    }

    /// Detects the encoding from the leading bytes.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| KefsError::io(path, e))?;
        let parsed = if bytes.starts_with(MAGIC) {
            Self::from_binary(&bytes)
        } else {
            String::from_utf8(bytes)
                .map_err(|_| "neither a binary checkpoint nor UTF-8 JSON".to_string())
                .and_then(|text| Self::from_json(&text))
        };
        parsed.map_err(|m| KefsError::checkpoint(path, m))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated at byte {} (needed {n} more)", self.pos))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
