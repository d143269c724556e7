//! Safetensors checkpoints with an embedded model configuration and
//! optional run metadata.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, QMaxVitUnet};

const CONFIG_KEY: &str = "model_config";

/// Metadata stored next to the weights.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CheckpointMeta {
    /// Free-form string entries, e.g. training config or generator state.
    pub extra: BTreeMap<String, String>,
}

fn to_bytes(t: &Tensor) -> Result<(Dtype, Vec<u8>)> {
    Ok(match t.dtype() {
        DType::F64 => (
            Dtype::F64,
            t.flatten_all()?.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        ),
        _ => (
            Dtype::F32,
            t.to_dtype(DType::F32)?
                .flatten_all()?
                .to_vec1::<f32>()?
                .iter()
                .flat_map(|v| v.to_le_bytes())
                .collect(),
        ),
    })
}

/// Writes every named tensor of `model` and its configuration to `path`.
pub fn save(path: &Path, model: &QMaxVitUnet, meta: &CheckpointMeta) -> Result<()> {
    let snapshot = model.store().snapshot()?;
    let mut buffers = Vec::with_capacity(snapshot.len());
    for (name, t) in &snapshot {
        let (dtype, bytes) = to_bytes(t)?;
        buffers.push((name.clone(), dtype, t.dims().to_vec(), bytes));
    }
    let views = buffers
        .iter()
        .map(|(n, d, s, b)| {
            TensorView::new(*d, s.clone(), b)
                .map(|v| (n.clone(), v))
                .map_err(|e| Error::Checkpoint(format!("{n}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut info: HashMap<String, String> = meta.extra.clone().into_iter().collect();
    info.insert(CONFIG_KEY.into(), serde_json::to_string(model.config())?);
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    safetensors::serialize_to_file(views, Some(info), path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

/// Reads tensors and metadata.
pub fn read(path: &Path) -> Result<(ModelConfig, BTreeMap<String, Tensor>, CheckpointMeta)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |e: safetensors::SafeTensorError| Error::Checkpoint(format!("{}: {e}", path.display()));
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(bad)?;
    let mut extra: BTreeMap<String, String> = header
        .metadata()
        .clone()
        .map(|m| m.into_iter().collect())
        .unwrap_or_default();
    let cfg_json = extra
        .remove(CONFIG_KEY)
        .ok_or_else(|| Error::Checkpoint(format!("{}: no model configuration", path.display())))?;
    let cfg: ModelConfig = serde_json::from_str(&cfg_json)?;
    let st = SafeTensors::deserialize(&bytes).map_err(bad)?;
    let mut tensors = BTreeMap::new();
    for (name, view) in st.tensors() {
        let dtype = match view.dtype() {
            Dtype::F32 => DType::F32,
            Dtype::F64 => DType::F64,
            other => return Err(Error::Checkpoint(format!("{name}: unsupported dtype {other:?}"))),
        };
        let t = Tensor::from_raw_buffer(view.data(), dtype, view.shape(), &Device::Cpu)?;
        tensors.insert(name, t);
    }
    Ok((cfg, tensors, CheckpointMeta { extra }))
}

/// Rebuilds the model described by the checkpoint and loads its weights.
pub fn load(path: &Path, dtype: DType) -> Result<(QMaxVitUnet, CheckpointMeta)> {
    let (cfg, tensors, meta) = read(path)?;
    let model = QMaxVitUnet::new(&cfg, dtype, 0)?;
    model.store().load(&tensors)?;
    Ok((model, meta))
}

/// Sum of element counts over every stored array.
pub fn parameter_count(path: &Path) -> Result<usize> {
    let (_, tensors, _) = read(path)?;
    Ok(tensors.values().map(|t| t.elem_count()).sum())
}
