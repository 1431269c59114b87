//! Tensor container for base weights and adapters.
//!
//! Layout: magic `PLLM`, format version as u32 little-endian, then a
//! sequence of named tensors. Each tensor is: name length (u32 LE), UTF-8
//! name, rank (u32 LE), dims (u64 LE each), then row-major IEEE-754 f64 LE
//! data. Base weights and adapters share the container under the `base.`
//! and `adapter.` name prefixes.

use std::io::Read;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{BaseWeights, LayerWeights, LoraAdapter, LoraTarget, ModelConfig, ProjRole};
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 4] = b"PLLM";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported format version {0}")]
    BadVersion(u32),
    #[error("container truncated while reading {0}")]
    Truncated(String),
    #[error("malformed container: {0}")]
    Malformed(String),
    #[error("missing tensor {0}")]
    Missing(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<u64>,
    pub data: Vec<f64>,
}

impl NamedTensor {
    pub fn vector(name: impl Into<String>, data: Vec<f64>) -> Self {
        Self { name: name.into(), dims: vec![data.len() as u64], data }
    }

    pub fn matrix(name: impl Into<String>, m: &Matrix) -> Self {
        Self { name: name.into(), dims: vec![m.rows as u64, m.cols as u64], data: m.data.clone() }
    }

    pub fn to_matrix(&self) -> Result<Matrix, CheckpointError> {
        if self.dims.len() != 2 {
            return Err(CheckpointError::Malformed(format!(
                "tensor {} has rank {}, expected 2",
                self.name,
                self.dims.len()
            )));
        }
        Ok(Matrix {
            rows: self.dims[0] as usize,
            cols: self.dims[1] as usize,
            data: self.data.clone(),
        })
    }
}

pub fn encode(tensors: &[NamedTensor]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for t in tensors {
        let name = t.name.as_bytes();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
        for d in &t.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        let expect: u64 = t.dims.iter().product();
        assert_eq!(expect as usize, t.data.len(), "tensor {} dims/data mismatch", t.name);
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Vec<NamedTensor>, CheckpointError> {
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize, what: &str| -> Result<&[u8], CheckpointError> {
        if *pos + n > bytes.len() {
            return Err(CheckpointError::Truncated(what.to_string()));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 4, "magic")? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u32::from_le_bytes(take(&mut pos, 4, "version")?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let mut tensors = Vec::new();
    while pos < bytes.len() {
        let name_len = u32::from_le_bytes(take(&mut pos, 4, "name length")?.try_into().unwrap());
        let name = String::from_utf8(take(&mut pos, name_len as usize, "name")?.to_vec())
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        let rank = u32::from_le_bytes(take(&mut pos, 4, "rank")?.try_into().unwrap());
        let mut dims = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            dims.push(u64::from_le_bytes(take(&mut pos, 8, "dims")?.try_into().unwrap()));
        }
        let count: u64 = dims.iter().product();
        let raw = take(&mut pos, count as usize * 8, &name)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(NamedTensor { name, dims, data });
    }
    Ok(tensors)
}

pub fn write_container(path: &Path, tensors: &[NamedTensor]) -> Result<(), CheckpointError> {
    crate::fsutil::write_atomic(path, &encode(tensors))?;
    Ok(())
}

pub fn read_container(path: &Path) -> Result<Vec<NamedTensor>, CheckpointError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}

fn split_u64(v: u64) -> [f64; 2] {
    [f64::from((v >> 32) as u32), f64::from(v as u32)]
}

fn join_u64(hi: f64, lo: f64) -> u64 {
    ((hi as u64) << 32) | (lo as u64 & 0xffff_ffff)
}

pub fn base_to_tensors(base: &BaseWeights) -> Vec<NamedTensor> {
    let c = &base.config;
    let seed = split_u64(c.seed);
    let mut out = vec![
        NamedTensor::vector(
            "base.hyperparams",
            vec![
                c.vocab_size as f64,
                c.d_model as f64,
                c.n_layers as f64,
                c.n_heads as f64,
                c.context_len as f64,
                c.lora_rank as f64,
                c.lora_alpha,
                seed[0],
                seed[1],
            ],
        ),
        NamedTensor::matrix("base.embed", &base.embed),
        NamedTensor::matrix("base.pos", &base.pos),
        NamedTensor::matrix("base.unembed", &base.unembed),
    ];
    for (l, lw) in base.layers.iter().enumerate() {
        out.push(NamedTensor::matrix(format!("base.layer{l}.wq"), &lw.wq));
        out.push(NamedTensor::matrix(format!("base.layer{l}.wk"), &lw.wk));
        out.push(NamedTensor::matrix(format!("base.layer{l}.wv"), &lw.wv));
        out.push(NamedTensor::matrix(format!("base.layer{l}.wo"), &lw.wo));
        out.push(NamedTensor::matrix(format!("base.layer{l}.w1"), &lw.w1));
        out.push(NamedTensor::matrix(format!("base.layer{l}.w2"), &lw.w2));
    }
    out
}

pub fn base_from_tensors(tensors: &[NamedTensor]) -> Result<BaseWeights, CheckpointError> {
    let find = |name: &str| -> Result<&NamedTensor, CheckpointError> {
        tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| CheckpointError::Missing(name.to_string()))
    };
    let hp = find("base.hyperparams")?;
    if hp.data.len() != 9 {
        return Err(CheckpointError::Malformed("base.hyperparams length".into()));
    }
    let config = ModelConfig {
        vocab_size: hp.data[0] as usize,
        d_model: hp.data[1] as usize,
        n_layers: hp.data[2] as usize,
        n_heads: hp.data[3] as usize,
        context_len: hp.data[4] as usize,
        lora_rank: hp.data[5] as usize,
        lora_alpha: hp.data[6],
        seed: join_u64(hp.data[7], hp.data[8]),
    };
    let mut layers = Vec::with_capacity(config.n_layers);
    for l in 0..config.n_layers {
        layers.push(LayerWeights {
            wq: find(&format!("base.layer{l}.wq"))?.to_matrix()?,
            wk: find(&format!("base.layer{l}.wk"))?.to_matrix()?,
            wv: find(&format!("base.layer{l}.wv"))?.to_matrix()?,
            wo: find(&format!("base.layer{l}.wo"))?.to_matrix()?,
            w1: find(&format!("base.layer{l}.w1"))?.to_matrix()?,
            w2: find(&format!("base.layer{l}.w2"))?.to_matrix()?,
        });
    }
    Ok(BaseWeights {
        config,
        embed: find("base.embed")?.to_matrix()?,
        pos: find("base.pos")?.to_matrix()?,
        layers,
        unembed: find("base.unembed")?.to_matrix()?,
    })
}

pub fn adapter_to_tensors(adapter: &LoraAdapter) -> Vec<NamedTensor> {
    assert!(
        !adapter.id.contains('.'),
        "adapter ids must not contain '.' (container name separator)"
    );
    let mut out = vec![NamedTensor::vector(
        format!("adapter.{}.meta", adapter.id),
        vec![adapter.rank as f64, adapter.alpha],
    )];
    for t in &adapter.targets {
        let stem = format!("adapter.{}.layer{}.{}", adapter.id, t.layer, t.role.tag());
        out.push(NamedTensor::matrix(format!("{stem}.a"), &t.a));
        out.push(NamedTensor::matrix(format!("{stem}.b"), &t.b));
    }
    out
}

/// Reconstructs every adapter stored in the container, sorted by id.
pub fn adapters_from_tensors(tensors: &[NamedTensor]) -> Result<Vec<LoraAdapter>, CheckpointError> {
    use std::collections::BTreeMap;
    let mut ids: Vec<String> = Vec::new();
    for t in tensors {
        if let Some(rest) = t.name.strip_prefix("adapter.") {
            if let Some(id) = rest.strip_suffix(".meta") {
                ids.push(id.to_string());
            }
        }
    }
    ids.sort();
    ids.dedup();
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let meta = tensors
            .iter()
            .find(|t| t.name == format!("adapter.{id}.meta"))
            .ok_or_else(|| CheckpointError::Missing(format!("adapter.{id}.meta")))?;
        if meta.data.len() != 2 {
            return Err(CheckpointError::Malformed(format!("adapter.{id}.meta length")));
        }
        let mut targets: BTreeMap<(usize, u8), (Option<Matrix>, Option<Matrix>)> = BTreeMap::new();
        let prefix = format!("adapter.{id}.layer");
        for t in tensors {
            let Some(rest) = t.name.strip_prefix(&prefix) else { continue };
            // rest = "<layer>.<role>.<a|b>"
            let parts: Vec<&str> = rest.split('.').collect();
            if parts.len() != 3 {
                return Err(CheckpointError::Malformed(format!("tensor name {}", t.name)));
            }
            let layer: usize = parts[0]
                .parse()
                .map_err(|_| CheckpointError::Malformed(format!("layer in {}", t.name)))?;
            let role = match parts[1] {
                "q" => 0u8,
                "v" => 1u8,
                other => {
                    return Err(CheckpointError::Malformed(format!("role {other} in {}", t.name)))
                }
            };
            let slot = targets.entry((layer, role)).or_insert((None, None));
            match parts[2] {
                "a" => slot.0 = Some(t.to_matrix()?),
                "b" => slot.1 = Some(t.to_matrix()?),
                other => {
                    return Err(CheckpointError::Malformed(format!("factor {other} in {}", t.name)))
                }
            }
        }
        let mut target_vec = Vec::with_capacity(targets.len());
        for ((layer, role), (a, b)) in targets {
            let a = a.ok_or_else(|| CheckpointError::Missing(format!("adapter.{id} A[{layer}]")))?;
            let b = b.ok_or_else(|| CheckpointError::Missing(format!("adapter.{id} B[{layer}]")))?;
            target_vec.push(LoraTarget {
                layer,
                role: if role == 0 { ProjRole::Query } else { ProjRole::Value },
                a,
                b,
            });
        }
        out.push(LoraAdapter {
            id,
            rank: meta.data[0] as usize,
            alpha: meta.data[1],
            targets: target_vec,
        });
    }
    Ok(out)
}

pub fn save_base(path: &Path, base: &BaseWeights) -> Result<(), CheckpointError> {
    write_container(path, &base_to_tensors(base))
}

pub fn load_base(path: &Path) -> Result<BaseWeights, CheckpointError> {
    base_from_tensors(&read_container(path)?)
}

pub fn save_adapters(path: &Path, adapters: &[LoraAdapter]) -> Result<(), CheckpointError> {
    let mut tensors = Vec::new();
    for a in adapters {
        tensors.extend(adapter_to_tensors(a));
    }
    write_container(path, &tensors)
}

pub fn load_adapters(path: &Path) -> Result<Vec<LoraAdapter>, CheckpointError> {
    adapters_from_tensors(&read_container(path)?)
}

/// Hex SHA-256 of a file, for report provenance.
pub fn digest_file(path: &Path) -> Result<String, CheckpointError> {
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    let out = hasher.finalize();
    Ok(out.iter().map(|b| format!("{b:02x}")).collect())
}
