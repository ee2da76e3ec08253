//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | content |
//! |-------|---------|
//! | 5     | magic `VSEQ1` |
//! | 8     | manifest length `L`, u64 |
//! | L     | manifest, UTF-8 JSON ([`Manifest`]) |
//! | 8·P   | parameters as f64, in [`HybridModel::tensors`] order, each row-major |
//! | 8·S   | batchnorm running statistics as f64: per layer in graph order, means then variances |
//!
//! `P` and `S` are recorded in the manifest. Files with trailing or missing
//! bytes are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Imputer, ScalerParams};
use crate::error::{Error, Result};
use crate::model::{Census, HybridModel, ModelConfig};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 5] = b"VSEQ1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    /// Scalar type of the saved model, `f32` or `f64`.
    pub scalar: String,
    pub config: ModelConfig,
    pub census: Census,
    pub seed: u64,
    pub param_count: usize,
    pub running_stat_count: usize,
    pub batchnorm_momentum: f64,
    pub batchnorm_epsilon: f64,
    pub tensors: Vec<TensorEntry>,
    pub scaler: Option<ScalerParams>,
    pub imputer: Option<Imputer>,
}

impl Manifest {
    fn describe<T: Scalar>(model: &HybridModel<T>) -> Self {
        let (momentum, epsilon) = model.batchnorm_constants();
        Manifest {
            version: FORMAT_VERSION,
            scalar: T::NAME.to_string(),
            config: model.config().clone(),
            census: model.census(),
            seed: model.config().seed,
            param_count: model.num_scalars(),
            running_stat_count: model.running_stats().len(),
            batchnorm_momentum: momentum.as_f64(),
            batchnorm_epsilon: epsilon.as_f64(),
            tensors: model
                .param_names()
                .into_iter()
                .zip(model.tensors())
                .map(|(name, t)| TensorEntry {
                    name,
                    shape: t.shape().to_vec(),
                })
                .collect(),
            scaler: model.scaler.clone(),
            imputer: model.imputer.clone(),
        }
    }
}

pub fn to_bytes<T: Scalar>(model: &HybridModel<T>) -> Result<Vec<u8>> {
    let manifest = serde_json::to_vec_pretty(&Manifest::describe(model))
        .map_err(|e| Error::Format(format!("cannot encode manifest: {e}")))?;
    let params = model.flatten_params();
    let stats = model.running_stats();
    let mut out =
        Vec::with_capacity(MAGIC.len() + 8 + manifest.len() + 8 * (params.len() + stats.len()));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    for v in params.iter().chain(&stats) {
        out.extend_from_slice(&v.as_f64().to_le_bytes());
    }
    Ok(out)
}

/// Reads the manifest without building a model.
pub fn read_manifest(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    let header = MAGIC.len() + 8;
    if bytes.len() < header || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Format(
            "not a checkpoint: missing VSEQ1 header".into(),
        ));
    }
    let len = u64::from_le_bytes(bytes[MAGIC.len()..header].try_into().unwrap());
    let len =
        usize::try_from(len).map_err(|_| Error::Format("manifest length overflows".into()))?;
    let body = &bytes[header..];
    if body.len() < len {
        return Err(Error::Format(format!(
            "truncated checkpoint: manifest needs {len} bytes, {} present",
            body.len()
        )));
    }
    let manifest: Manifest = serde_json::from_slice(&body[..len])
        .map_err(|e| Error::Format(format!("unreadable manifest: {e}")))?;
    if manifest.version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {} is not supported (expected {FORMAT_VERSION})",
            manifest.version
        )));
    }
    Ok((manifest, &body[len..]))
}

/// Rebuilds a model from checkpoint bytes. The scalar type must match the
/// saved one. Any inconsistency is a format error and yields no model.
pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<HybridModel<T>> {
    let (manifest, blob) = read_manifest(bytes)?;
    if manifest.scalar != T::NAME {
        return Err(Error::Format(format!(
            "checkpoint holds {} weights, requested {}",
            manifest.scalar,
            T::NAME
        )));
    }
    if !manifest.census.is_valid() {
        return Err(Error::Format(format!(
            "checkpoint census {} is not the hybrid topology",
            manifest.census
        )));
    }
    let mut model = HybridModel::<T>::build(&manifest.config)
        .map_err(|e| Error::Format(format!("bad config: {e}")))?;
    if model.census() != manifest.census {
        return Err(Error::Format(format!(
            "census mismatch: checkpoint {}, rebuilt {}",
            manifest.census,
            model.census()
        )));
    }
    let expected: Vec<TensorEntry> = Manifest::describe(&model).tensors;
    if manifest.tensors != expected
        || manifest.param_count != model.num_scalars()
        || manifest.running_stat_count != model.running_stats().len()
    {
        return Err(Error::Format(
            "tensor layout does not match the configured model".into(),
        ));
    }
    let total = manifest.param_count + manifest.running_stat_count;
    if blob.len() != 8 * total {
        return Err(Error::Format(format!(
            "{} checkpoint: expected {} weight bytes, found {}",
            if blob.len() < 8 * total {
                "truncated"
            } else {
                "oversized"
            },
            8 * total,
            blob.len()
        )));
    }
    let values: Vec<T> = blob
        .chunks_exact(8)
        .map(|c| T::lit(f64::from_le_bytes(c.try_into().unwrap())))
        .collect();
    let (params, stats) = values.split_at(manifest.param_count);
    model.set_flat_params(params)?;
    model.set_running_stats(stats)?;
    model.set_batchnorm_constants(
        T::lit(manifest.batchnorm_momentum),
        T::lit(manifest.batchnorm_epsilon),
    );
    model.scaler = manifest.scaler;
    model.imputer = manifest.imputer;
    Ok(model)
}

/// Writes through a sibling temporary file so a failed save never leaves a
/// partial checkpoint at `path`.
pub fn save<T: Scalar>(model: &HybridModel<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes(model)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<HybridModel<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
