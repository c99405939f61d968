//! Checkpoint container shared by both trained models: one safetensors file
//! holding every parameter plus a metadata map with the format version, the
//! model kind, the serialized config, and the training rng provenance.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use candle_nn::VarMap;
use safetensors::tensor::TensorView;
use safetensors::{Dtype as StDtype, SafeTensors};

use crate::aux_encoder::{AuxConfig, AuxModel};
use crate::diffusion::{DenoiserConfig, DiffusionModel};
use crate::error::{Error, Result};

pub const CKPT_FORMAT_VERSION: u32 = 1;

const KIND_AUX: &str = "aux";
const KIND_DIFFUSION: &str = "diffusion";

/// Everything stored beside the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub kind: String,
    pub config_json: String,
    pub seed: u64,
    pub step: u64,
}

fn stek(e: safetensors::SafeTensorError) -> Error {
    Error::Checkpoint(format!("safetensors: {e}"))
}

/// Writes all parameters of `varmap` with the metadata map. Tensors are
/// stored as f32 regardless of compute dtype.
pub fn save_checkpoint(
    path: &Path,
    varmap: &VarMap,
    kind: &str,
    config_json: &str,
    seed: u64,
    step: u64,
) -> Result<()> {
    let data = varmap.data().lock().unwrap();
    let mut names: Vec<String> = data.keys().cloned().collect();
    names.sort();
    let mut buffers: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::with_capacity(names.len());
    for name in names {
        let t = data[&name].as_tensor().to_dtype(DType::F32)?;
        let shape = t.dims().to_vec();
        let vals = t.flatten_all()?.to_vec1::<f32>()?;
        let mut bytes = Vec::with_capacity(vals.len() * 4);
        for v in vals {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        buffers.push((name, shape, bytes));
    }
    drop(data);
    let views: Vec<(&str, TensorView)> = buffers
        .iter()
        .map(|(name, shape, bytes)| {
            TensorView::new(StDtype::F32, shape.clone(), bytes).map(|v| (name.as_str(), v))
        })
        .collect::<std::result::Result<_, _>>()
        .map_err(stek)?;
    let meta = HashMap::from([
        ("format_version".to_string(), CKPT_FORMAT_VERSION.to_string()),
        ("kind".to_string(), kind.to_string()),
        ("config".to_string(), config_json.to_string()),
        ("seed".to_string(), seed.to_string()),
        ("step".to_string(), step.to_string()),
    ]);
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    safetensors::serialize_to_file(views, Some(meta), path).map_err(stek)
}

pub fn load_metadata(path: &Path) -> Result<CheckpointMeta> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = std::fs::read(path)?;
    let (_n, meta) = SafeTensors::read_metadata(&bytes).map_err(stek)?;
    let map = meta
        .metadata()
        .as_ref()
        .ok_or_else(|| Error::Checkpoint("checkpoint carries no metadata".into()))?;
    let get = |key: &str| -> Result<&String> {
        map.get(key).ok_or_else(|| Error::Checkpoint(format!("metadata key {key} missing")))
    };
    let version: u32 = get("format_version")?
        .parse()
        .map_err(|_| Error::Checkpoint("unreadable format_version".into()))?;
    if version != CKPT_FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version}, this build reads {CKPT_FORMAT_VERSION}"
        )));
    }
    Ok(CheckpointMeta {
        kind: get("kind")?.clone(),
        config_json: get("config")?.clone(),
        seed: get("seed")?.parse().map_err(|_| Error::Checkpoint("unreadable seed".into()))?,
        step: get("step")?.parse().map_err(|_| Error::Checkpoint("unreadable step".into()))?,
    })
}

/// Overwrites every variable of `varmap` from the file; the stored names and
/// shapes must match the model exactly.
pub fn load_into(path: &Path, varmap: &VarMap) -> Result<()> {
    let bytes = std::fs::read(path)?;
    let st = SafeTensors::deserialize(&bytes).map_err(stek)?;
    let data = varmap.data().lock().unwrap();
    let mut missing: Vec<&String> = data.keys().filter(|n| !st.names().contains(&n.as_str())).collect();
    missing.sort();
    if !missing.is_empty() {
        return Err(Error::Checkpoint(format!("parameters absent from file: {missing:?}")));
    }
    if st.names().len() != data.len() {
        return Err(Error::Checkpoint(format!(
            "file holds {} tensors, model has {}",
            st.names().len(),
            data.len()
        )));
    }
    for (name, var) in data.iter() {
        let view = st.tensor(name).map_err(stek)?;
        if view.dtype() != StDtype::F32 {
            return Err(Error::Checkpoint(format!("{name}: stored dtype {:?}", view.dtype())));
        }
        if view.shape() != var.shape().dims() {
            return Err(Error::Checkpoint(format!(
                "{name}: stored shape {:?}, model wants {:?}",
                view.shape(),
                var.shape().dims()
            )));
        }
        let t = Tensor::from_raw_buffer(view.data(), DType::F32, view.shape(), var.device())?
            .to_dtype(var.dtype())?;
        var.set(&t)?;
    }
    Ok(())
}

pub fn save_aux(path: &Path, model: &AuxModel, step: u64) -> Result<()> {
    let config_json = serde_json::to_string(model.config())?;
    save_checkpoint(path, model.varmap(), KIND_AUX, &config_json, model.config().seed, step)
}

pub fn load_aux(path: &Path, device: &Device) -> Result<AuxModel> {
    let meta = load_metadata(path)?;
    if meta.kind != KIND_AUX {
        return Err(Error::Checkpoint(format!("expected an aux checkpoint, found {}", meta.kind)));
    }
    let cfg: AuxConfig = serde_json::from_str(&meta.config_json)?;
    let model = AuxModel::new(&cfg, device)?;
    load_into(path, model.varmap())?;
    Ok(model)
}

pub fn save_diffusion(path: &Path, model: &DiffusionModel, step: u64) -> Result<()> {
    let config_json = serde_json::to_string(model.config())?;
    save_checkpoint(
        path,
        model.varmap(),
        KIND_DIFFUSION,
        &config_json,
        model.config().seed,
        step,
    )
}

pub fn load_diffusion(path: &Path, device: &Device) -> Result<DiffusionModel> {
    let meta = load_metadata(path)?;
    if meta.kind != KIND_DIFFUSION {
        return Err(Error::Checkpoint(format!(
            "expected a diffusion checkpoint, found {}",
            meta.kind
        )));
    }
    let cfg: DenoiserConfig = serde_json::from_str(&meta.config_json)?;
    let model = DiffusionModel::new(&cfg, device)?;
    load_into(path, model.varmap())?;
    Ok(model)
}
