//! Binary checkpoint format: a magic tag, a self-describing JSON header
//! (model config, seed, split ratios, variate names, parameter layout),
//! then raw little-endian f64 payloads for every parameter and every BN
//! running-statistics site, in declaration order.

use crate::config::ModelConfig;
use crate::error::Error;
use crate::model::{ModelState, Mtst};
use crate::params::ParamStore;
use crate::Result;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"MTSTCKP\x01";

/// Everything about a run that evaluation and forecasting need besides the
/// weights themselves.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub seed: u64,
    pub ratios: (f64, f64, f64),
    pub variates: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamDesc {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    meta: CheckpointMeta,
    params: Vec<ParamDesc>,
    /// Feature width of each BN running-statistics site, in order.
    bn_features: Vec<usize>,
}

pub fn save(
    path: &Path,
    meta: &CheckpointMeta,
    params: &ParamStore,
    state: &ModelState,
) -> Result<()> {
    let header = Header {
        meta: meta.clone(),
        params: params
            .iter()
            .map(|e| ParamDesc { name: e.name.clone(), shape: e.tensor.shape().to_vec() })
            .collect(),
        bn_features: state.bn.iter().map(|b| b.mean.len()).collect(),
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(format!("encode header: {e}")))?;

    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header_json);
    for e in params.iter() {
        for v in e.tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    for site in &state.bn {
        for v in site.mean.iter().chain(&site.var) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    file.write_all(&buf)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

fn read_f64s(reader: &mut impl Read, n: usize, what: &str) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; n * 8];
    reader
        .read_exact(&mut bytes)
        .map_err(|e| Error::Checkpoint(format!("truncated {what} payload: {e}")))?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Load a checkpoint: the model layout is rebuilt from the stored config
/// and seed, then every stored tensor overwrites its named parameter after
/// a name/shape cross-check.
pub fn load(path: &Path) -> Result<(CheckpointMeta, Mtst, ParamStore, ModelState)> {
    let mut file =
        std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a model checkpoint (bad magic)",
            path.display()
        )));
    }
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_json = vec![0u8; header_len];
    file.read_exact(&mut header_json)
        .map_err(|e| Error::Checkpoint(format!("{}: truncated header: {e}", path.display())))?;
    let header: Header = serde_json::from_slice(&header_json)
        .map_err(|e| Error::Checkpoint(format!("{}: bad header: {e}", path.display())))?;

    let (model, mut params, mut state) =
        Mtst::init(header.meta.config.clone(), header.meta.seed)?;
    if params.len() != header.params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint stores {} parameters, rebuilt model has {}",
            header.params.len(),
            params.len()
        )));
    }
    for (entry, desc) in params.iter_mut().zip(&header.params) {
        if entry.name != desc.name || entry.tensor.shape() != desc.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "parameter mismatch: checkpoint has {} {:?}, model has {} {:?}",
                desc.name,
                desc.shape,
                entry.name,
                entry.tensor.shape()
            )));
        }
        let data = read_f64s(&mut file, entry.tensor.numel(), &desc.name)?;
        entry.tensor.data_mut().copy_from_slice(&data);
    }
    if state.bn.len() != header.bn_features.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint stores {} BN sites, rebuilt model has {}",
            header.bn_features.len(),
            state.bn.len()
        )));
    }
    for (site, &features) in state.bn.iter_mut().zip(&header.bn_features) {
        if site.mean.len() != features {
            return Err(Error::Checkpoint(format!(
                "BN site width mismatch: checkpoint {features}, model {}",
                site.mean.len()
            )));
        }
        site.mean = read_f64s(&mut file, features, "bn mean")?;
        site.var = read_f64s(&mut file, features, "bn var")?;
    }
    let mut rest = Vec::new();
    file.read_to_end(&mut rest)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if !rest.is_empty() {
        return Err(Error::Checkpoint(format!(
            "{}: {} trailing bytes after payload",
            path.display(),
            rest.len()
        )));
    }
    Ok((header.meta, model, params, state))
}
