//! Single-file binary checkpoints: a magic tag, a JSON header describing the
//! run and every tensor's shape, then all tensor data as little-endian f64.
//! Parameters round-trip bit-exactly, so a resumed run continues on the same
//! arithmetic trajectory as an uninterrupted one.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{PccError, Result};
use crate::nn::{AdamConfig, ParamSet, Tensor};

const MAGIC: &[u8; 8] = b"PCCKPT01";

/// Optimizer state carried across a resume.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moment: BTreeMap<String, Tensor>,
    pub second_moment: BTreeMap<String, Tensor>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// Completed epochs (training resumes at this epoch index).
    pub epoch: usize,
    /// Foreground class names, in mask-index order.
    pub classes: Vec<String>,
    /// Length of the cluster vector the model was built for (0 when fusion
    /// does not use one).
    pub num_clusters: usize,
    pub params: ParamSet,
    pub optimizer: Option<OptimizerState>,
}

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct OptimizerMeta {
    config: AdamConfig,
    step: u64,
    first_moment: Vec<TensorMeta>,
    second_moment: Vec<TensorMeta>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: RunConfig,
    epoch: usize,
    classes: Vec<String>,
    num_clusters: usize,
    params: Vec<TensorMeta>,
    optimizer: Option<OptimizerMeta>,
}

fn meta_of<'a>(tensors: impl Iterator<Item = (&'a String, &'a Tensor)>) -> Vec<TensorMeta> {
    tensors
        .map(|(name, t)| TensorMeta { name: name.clone(), rows: t.rows(), cols: t.cols() })
        .collect()
}

fn write_tensor(out: &mut Vec<u8>, t: &Tensor) {
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_tensor(blob: &[u8], offset: &mut usize, meta: &TensorMeta, path: &Path) -> Result<Tensor> {
    let n = meta.rows * meta.cols;
    let end = *offset + n * 8;
    if end > blob.len() {
        return Err(PccError::format(format!(
            "{}: truncated tensor data for {}",
            path.display(),
            meta.name
        )));
    }
    let data: Vec<f64> = blob[*offset..end]
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
        .collect();
    *offset = end;
    Ok(Tensor::from_vec(meta.rows, meta.cols, data))
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            config: self.config.clone(),
            epoch: self.epoch,
            classes: self.classes.clone(),
            num_clusters: self.num_clusters,
            params: meta_of(self.params.iter()),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerMeta {
                config: o.config,
                step: o.step,
                first_moment: meta_of(o.first_moment.iter()),
                second_moment: meta_of(o.second_moment.iter()),
            }),
        };
        let header_json = serde_json::to_vec(&header)?;

        let mut blob = Vec::new();
        for (_, t) in self.params.iter() {
            write_tensor(&mut blob, t);
        }
        if let Some(o) = &self.optimizer {
            for t in o.first_moment.values() {
                write_tensor(&mut blob, t);
            }
            for t in o.second_moment.values() {
                write_tensor(&mut blob, t);
            }
        }

        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        // write-then-rename so a crash mid-save never leaves a torn file at
        // the published path
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(MAGIC)?;
            f.write_all(&(header_json.len() as u64).to_le_bytes())?;
            f.write_all(&header_json)?;
            f.write_all(&blob)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = fs::File::open(path)
            .map_err(|e| PccError::format(format!("{}: {e}", path.display())))?;
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic)
            .map_err(|e| PccError::format(format!("{}: {e}", path.display())))?;
        if &magic != MAGIC {
            return Err(PccError::format(format!(
                "{}: not a checkpoint file (bad magic)",
                path.display()
            )));
        }
        let mut len_bytes = [0u8; 8];
        f.read_exact(&mut len_bytes)
            .map_err(|e| PccError::format(format!("{}: {e}", path.display())))?;
        let header_len = u64::from_le_bytes(len_bytes) as usize;
        let mut header_json = vec![0u8; header_len];
        f.read_exact(&mut header_json)
            .map_err(|e| PccError::format(format!("{}: {e}", path.display())))?;
        let header: Header = serde_json::from_slice(&header_json)?;
        let mut blob = Vec::new();
        f.read_to_end(&mut blob)?;

        let mut offset = 0;
        let mut params = ParamSet::new();
        for meta in &header.params {
            params.insert(meta.name.clone(), read_tensor(&blob, &mut offset, meta, path)?);
        }
        let optimizer = match header.optimizer {
            Some(om) => {
                let mut first = BTreeMap::new();
                for meta in &om.first_moment {
                    first.insert(meta.name.clone(), read_tensor(&blob, &mut offset, meta, path)?);
                }
                let mut second = BTreeMap::new();
                for meta in &om.second_moment {
                    second.insert(meta.name.clone(), read_tensor(&blob, &mut offset, meta, path)?);
                }
                Some(OptimizerState {
                    config: om.config,
                    step: om.step,
                    first_moment: first,
                    second_moment: second,
                })
            }
            None => None,
        };
        if offset != blob.len() {
            return Err(PccError::format(format!(
                "{}: {} trailing bytes after tensor data",
                path.display(),
                blob.len() - offset
            )));
        }
        Ok(Checkpoint {
            config: header.config,
            epoch: header.epoch,
            classes: header.classes,
            num_clusters: header.num_clusters,
            params,
            optimizer,
        })
    }
}
