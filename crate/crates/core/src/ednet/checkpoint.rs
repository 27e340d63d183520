//! Weight checkpoints in the safetensors container. The header metadata
//! carries the model spec, build seed and epoch so a file is self-contained.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use super::model::{EdNet, ModelSpec};
use super::tensor::Element;
use crate::{Error, Result};

/// `{root}/{experiment}/{fold}/epoch_{NN}.ckpt`
pub fn checkpoint_path(root: &Path, experiment: &str, fold: usize, epoch: usize) -> PathBuf {
    root.join(experiment).join(fold.to_string()).join(format!("epoch_{epoch:02}.ckpt"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub spec: ModelSpec,
    pub seed: u64,
    pub epoch: usize,
}

fn dtype_of<T: Element>() -> Dtype {
    match T::DTYPE {
        "f64" => Dtype::F64,
        _ => Dtype::F32,
    }
}

fn ckpt_err(path: &Path, reason: impl ToString) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

/// Serializes weights and buffers. The write goes through a temporary file
/// so an interrupted save never leaves a truncated checkpoint behind.
pub fn save_checkpoint<T: Element>(model: &EdNet<T>, epoch: usize, path: &Path) -> Result<()> {
    let mut named: Vec<(String, Vec<usize>, Vec<u8>)> = model
        .params()
        .into_iter()
        .map(|p| (p.name.clone(), p.shape.clone(), T::to_le_bytes_vec(&p.value)))
        .collect();
    for (name, values) in model.buffers() {
        let len = values.len();
        named.push((name, vec![len], T::to_le_bytes_vec(&values)));
    }
    let views = named
        .iter()
        .map(|(n, shape, bytes)| {
            TensorView::new(dtype_of::<T>(), shape.clone(), bytes)
                .map(|v| (n.clone(), v))
                .map_err(|e| ckpt_err(path, e))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut meta = HashMap::new();
    meta.insert("spec".to_string(), serde_json::to_string(model.spec())?);
    meta.insert("seed".to_string(), model.seed().to_string());
    meta.insert("epoch".to_string(), epoch.to_string());
    let bytes = safetensors::tensor::serialize(views, &Some(meta)).map_err(|e| ckpt_err(path, e))?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("ckpt.partial");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_checkpoint_meta(bytes: &[u8], path: &Path) -> Result<CheckpointMeta> {
    let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| ckpt_err(path, e))?;
    let meta = header
        .metadata()
        .as_ref()
        .ok_or_else(|| ckpt_err(path, "no metadata"))?;
    let get = |k: &str| meta.get(k).ok_or_else(|| ckpt_err(path, format!("metadata lacks `{k}`")));
    Ok(CheckpointMeta {
        spec: serde_json::from_str(get("spec")?)?,
        seed: get("seed")?.parse().map_err(|e| ckpt_err(path, e))?,
        epoch: get("epoch")?.parse().map_err(|e| ckpt_err(path, e))?,
    })
}

pub fn load_checkpoint<T: Element>(path: &Path) -> Result<(EdNet<T>, CheckpointMeta)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let meta = read_checkpoint_meta(&bytes, path)?;
    let tensors = SafeTensors::deserialize(&bytes).map_err(|e| ckpt_err(path, e))?;
    let mut model = EdNet::<T>::build(&meta.spec, meta.seed)?;
    let mut failure = None;
    model.visit_params_mut(|p| {
        if failure.is_some() {
            return;
        }
        match tensors.tensor(&p.name) {
            Ok(view) if view.dtype() == dtype_of::<T>() && view.shape() == p.shape.as_slice() => {
                p.value = T::from_le_bytes_slice(view.data());
            }
            Ok(_) => failure = Some(format!("{}: dtype or shape differs", p.name)),
            Err(e) => failure = Some(format!("{}: {e}", p.name)),
        }
    });
    if let Some(reason) = failure {
        return Err(ckpt_err(path, reason));
    }
    for (name, _) in model.buffers() {
        let view = tensors.tensor(&name).map_err(|e| ckpt_err(path, format!("{name}: {e}")))?;
        model.set_buffer(&name, T::from_le_bytes_slice(view.data()))?;
    }
    Ok((model, meta))
}
