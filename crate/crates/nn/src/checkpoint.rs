//! Checkpoints: parameters (and optimizer moments) as a safetensors archive
//! next to a JSON manifest with the run configuration and progress.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use charformer_core::config::{OptimizerName, RunConfig};
use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::LossBreakdown;
use crate::net::CharFormer;
use crate::optim::Optimizer;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
const MOMENT_PREFIX: [&str; 2] = ["optim.m.", "optim.v."];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: u32,
    pub fingerprint: String,
    pub config: RunConfig,
    /// Completed training iterations.
    pub iteration: u64,
    pub seed: u64,
    pub optimizer: OptimizerName,
    pub optimizer_step: u64,
    pub has_moments: bool,
    pub last_loss: Option<LossBreakdown>,
    pub best_psnr: Option<f64>,
    pub num_parameters: usize,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: CharFormer,
    pub optimizer: Option<Optimizer>,
    pub meta: CheckpointMeta,
}

/// The JSON manifest that accompanies `archive`.
pub fn manifest_path(archive: &Path) -> PathBuf {
    archive.with_extension("json")
}

fn to_bytes(data: &[f64]) -> Vec<u8> {
    data.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn save(path: &Path, model: &CharFormer, optimizer: Option<&Optimizer>, meta: &CheckpointMeta) -> Result<()> {
    let mut named: Vec<(String, Vec<usize>, Vec<u8>)> = model
        .params
        .iter()
        .map(|(_, name, t)| (name.to_string(), t.shape().to_vec(), to_bytes(t.data())))
        .collect();
    if let Some(opt) = optimizer {
        for (prefix, slots) in MOMENT_PREFIX.iter().zip([&opt.m, &opt.v]) {
            for ((_, name, t), s) in model.params.iter().zip(slots.iter()) {
                named.push((format!("{prefix}{name}"), t.shape().to_vec(), to_bytes(s)));
            }
        }
    }
    let views: Vec<(String, TensorView)> = named
        .iter()
        .map(|(n, shape, bytes)| {
            let view = TensorView::new(Dtype::F64, shape.clone(), bytes).expect("consistent view");
            (n.clone(), view)
        })
        .collect();
    let bytes = safetensors::serialize(views, None).map_err(|e| Error::checkpoint(path, e))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| charformer_core::Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| charformer_core::Error::io(path, e))?;
    let manifest = manifest_path(path);
    let text = serde_json::to_string_pretty(meta).expect("meta serializes");
    std::fs::write(&manifest, text + "\n").map_err(|e| charformer_core::Error::io(&manifest, e))?;
    Ok(())
}

fn read_tensor(st: &SafeTensors, name: &str, path: &Path) -> Result<(Vec<usize>, Vec<f64>)> {
    let t = st
        .tensor(name)
        .map_err(|_| Error::checkpoint(path, format!("missing tensor {name}")))?;
    if t.dtype() != Dtype::F64 {
        return Err(Error::checkpoint(path, format!("{name} is {:?}, expected F64", t.dtype())));
    }
    let data = t
        .data()
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((t.shape().to_vec(), data))
}

pub fn load_meta(path: &Path) -> Result<CheckpointMeta> {
    let manifest = manifest_path(path);
    let text = std::fs::read_to_string(&manifest).map_err(|e| charformer_core::Error::io(&manifest, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| Error::checkpoint(&manifest, e))?;
    if meta.format != FORMAT_VERSION {
        return Err(Error::checkpoint(&manifest, format!("unsupported format {}", meta.format)));
    }
    Ok(meta)
}

/// Rebuild the model from the stored configuration and overwrite every
/// parameter with the archived values.
pub fn load(path: &Path) -> Result<Checkpoint> {
    let meta = load_meta(path)?;
    let bytes = std::fs::read(path).map_err(|e| charformer_core::Error::io(path, e))?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::checkpoint(path, e))?;
    let mut model = CharFormer::new(&meta.config.model, meta.seed)?;
    let expected = model.params.len() * if meta.has_moments { 3 } else { 1 };
    if st.len() != expected {
        return Err(Error::checkpoint(
            path,
            format!("holds {} tensors, configuration needs {expected}", st.len()),
        ));
    }
    let ids: Vec<_> = model.params.ids().collect();
    for &id in &ids {
        let name = model.params.name(id).to_string();
        let (shape, data) = read_tensor(&st, &name, path)?;
        if shape != model.params.get(id).shape() {
            return Err(Error::checkpoint(path, format!("{name} has shape {shape:?}")));
        }
        *model.params.get_mut(id) = Tensor::new(&shape, data)?;
    }
    let optimizer = if meta.has_moments {
        let mut opt = Optimizer::new(meta.optimizer, &model.params);
        opt.step = meta.optimizer_step;
        let mut moments: HashMap<&str, Vec<Vec<f64>>> = HashMap::new();
        for prefix in MOMENT_PREFIX {
            let mut slots = Vec::with_capacity(ids.len());
            for &id in &ids {
                let (_, data) = read_tensor(&st, &format!("{prefix}{}", model.params.name(id)), path)?;
                slots.push(data);
            }
            moments.insert(prefix, slots);
        }
        opt.m = moments.remove(MOMENT_PREFIX[0]).expect("m slots");
        opt.v = moments.remove(MOMENT_PREFIX[1]).expect("v slots");
        Some(opt)
    } else {
        None
    };
    Ok(Checkpoint { model, optimizer, meta })
}
