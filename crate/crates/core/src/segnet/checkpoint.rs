//! Checkpoints: a safetensors archive keyed by parameter name plus a JSON
//! sidecar (same stem, `.json`) with training metadata.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use super::arch::Architecture;
use super::model::{Network, Param, Stage};
use super::train::EpochRecord;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub stage: Stage,
    /// Epoch whose parameters were kept (0 = untrained).
    pub epoch: usize,
    pub seed: u64,
    pub loss_history: Vec<EpochRecord>,
    pub parameter_count: usize,
    pub architecture: Architecture,
}

impl CheckpointMeta {
    pub fn new(net: &Network, epoch: usize, seed: u64, loss_history: Vec<EpochRecord>) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            stage: net.stage(),
            epoch,
            seed,
            loss_history,
            parameter_count: net.parameter_count(),
            architecture: net.arch().clone(),
        }
    }
}

/// A network together with the metadata it was produced under.
#[derive(Debug, Clone)]
pub struct NetworkParams {
    pub network: Network,
    pub meta: CheckpointMeta,
}

impl NetworkParams {
    pub fn untrained(network: Network, seed: u64) -> Self {
        let meta = CheckpointMeta::new(&network, 0, seed, Vec::new());
        Self { network, meta }
    }

    pub fn sidecar_path(path: &Path) -> PathBuf {
        path.with_extension("json")
    }

    /// Writes `path` (tensors) and its `.json` sidecar.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let bytes: Vec<(String, Vec<usize>, Vec<u8>)> = self
            .network
            .params()
            .iter()
            .map(|p| {
                let b = p.value.iter().flat_map(|v| v.to_le_bytes()).collect();
                (p.name.clone(), p.shape.clone(), b)
            })
            .collect();
        let views = bytes
            .iter()
            .map(|(n, s, b)| {
                TensorView::new(Dtype::F32, s.clone(), b)
                    .map(|v| (n.clone(), v))
                    .map_err(|e| Error::Checkpoint(format!("tensor {n}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let info = Some(
            [("stage".to_string(), self.meta.stage.to_string())]
                .into_iter()
                .collect(),
        );
        safetensors::serialize_to_file(views, &info, path)
            .map_err(|e| Error::Checkpoint(format!("writing {}: {e}", path.display())))?;
        let side = Self::sidecar_path(path);
        let mut f = fs::File::create(&side).map_err(|e| Error::io(&side, e))?;
        serde_json::to_writer_pretty(&mut f, &self.meta)?;
        f.write_all(b"\n").map_err(|e| Error::io(&side, e))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let side = Self::sidecar_path(path);
        let meta: CheckpointMeta = serde_json::from_slice(&fs::read(&side).map_err(|e| Error::io(&side, e))?)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", side.display())))?;
        if meta.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "{}: unsupported format version {}",
                side.display(),
                meta.format_version
            )));
        }
        let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
        let st = SafeTensors::deserialize(&raw).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let mut tensors = Vec::new();
        for (name, view) in st.tensors() {
            if view.dtype() != Dtype::F32 {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} is {:?}, expected F32",
                    view.dtype()
                )));
            }
            let value = view
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push(Param {
                name,
                shape: view.shape().to_vec(),
                value,
            });
        }
        let network = Network::from_tensors(&meta.architecture, meta.stage, tensors)?;
        if network.parameter_count() != meta.parameter_count {
            return Err(Error::Checkpoint(format!(
                "parameter count {} does not match metadata {}",
                network.parameter_count(),
                meta.parameter_count
            )));
        }
        Ok(Self { network, meta })
    }
}
