//! Checkpoint directories: `manifest.json` plus `params.bin`, a flat
//! little-endian f32 blob whose layout the manifest lists.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::optim::{Adam, AdamMeta};
use super::{DatasetRef, TrainConfig, TrainState};
use crate::error::{Error, Result};
use crate::graph::{Group, ParamId};
use crate::networks::{ArchSpec, ModelBundle};
use crate::objectives::IcpHyperparams;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorRole {
    Param,
    AdamM,
    AdamV,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub group: Group,
    pub role: TensorRole,
    pub shape: [usize; 2],
    /// Offset into `params.bin`, in f32 elements.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    /// The architecture actually trained (after variant widening).
    pub arch: ArchSpec,
    pub hp: IcpHyperparams,
    pub seed: u64,
    pub step: u64,
    pub dataset: DatasetRef,
    pub optimizers: Vec<AdamMeta>,
    pub tensors: Vec<TensorEntry>,
    pub total_len: usize,
}

impl CheckpointManifest {
    /// Errors unless this checkpoint can continue a run of `config`.
    pub fn check_compatible(&self, config: &TrainConfig, path: &Path) -> Result<()> {
        let bad = |what: &str| {
            Err(Error::Checkpoint {
                path: path.to_path_buf(),
                message: format!("{what} differs from the current configuration"),
            })
        };
        if self.arch != config.effective_arch() {
            return bad("architecture");
        }
        if self.hp != config.hp {
            return bad("hyperparameters");
        }
        if self.seed != config.seed {
            return bad("seed");
        }
        if self.dataset != config.dataset {
            return bad("dataset");
        }
        Ok(())
    }
}

pub fn checkpoint_dir(output_dir: &Path, step: u64) -> PathBuf {
    output_dir.join("checkpoints").join(format!("step_{step:08}"))
}

fn optimizers(state: &TrainState) -> [&Adam<f32>; 3] {
    [&state.opt_main, &state.opt_d, &state.opt_h]
}

/// Tensor layout for a bundle: parameters in registration order, then the
/// first and second moments of each optimizer.
fn layout(bundle: &ModelBundle<f32>, opts: [&Adam<f32>; 3]) -> Vec<TensorEntry> {
    let mut entries = Vec::new();
    let mut offset = 0;
    let mut push = |id: ParamId, role: TensorRole| {
        let p = bundle.params.get(id);
        let (r, c) = p.value.dim();
        entries.push(TensorEntry {
            name: p.name.clone(),
            group: p.group,
            role,
            shape: [r, c],
            offset,
        });
        offset += r * c;
    };
    for (id, _) in bundle.params.iter() {
        push(id, TensorRole::Param);
    }
    for opt in opts {
        for &id in &opt.ids {
            push(id, TensorRole::AdamM);
        }
        for &id in &opt.ids {
            push(id, TensorRole::AdamV);
        }
    }
    entries
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io("cannot write checkpoint file", path, e))
}

/// Writes a checkpoint directory, replacing any previous one at `dir`.
/// Files go to a sibling staging directory that is renamed into place.
pub fn save_checkpoint(state: &TrainState, config: &TrainConfig, dir: &Path) -> Result<()> {
    let opts = optimizers(state);
    let tensors = layout(&state.bundle, opts);
    let mut blob: Vec<u8> = Vec::new();
    for (_, p) in state.bundle.params.iter() {
        blob.extend(p.value.iter().flat_map(|v| v.to_le_bytes()));
    }
    for opt in opts {
        for m in opt.m.iter().chain(&opt.v) {
            blob.extend(m.iter().flat_map(|v| v.to_le_bytes()));
        }
    }
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        arch: state.bundle.arch.clone(),
        hp: config.hp,
        seed: state.seed,
        step: state.step,
        dataset: config.dataset.clone(),
        optimizers: opts.iter().map(|o| o.meta()).collect(),
        total_len: blob.len() / 4,
        tensors,
    };

    let parent = dir.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(|e| Error::io("cannot create checkpoint directory", parent, e))?;
    let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or("checkpoint");
    let staging = parent.join(format!(".{name}.partial"));
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| Error::io("cannot clear staging directory", &staging, e))?;
    }
    fs::create_dir(&staging).map_err(|e| Error::io("cannot create staging directory", &staging, e))?;
    write_file(&staging.join("params.bin"), &blob)?;
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    write_file(&staging.join("manifest.json"), &json)?;
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io("cannot replace checkpoint", dir, e))?;
    }
    fs::rename(&staging, dir).map_err(|e| Error::io("cannot move checkpoint into place", dir, e))
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join("manifest.json");
    let text = fs::read(&path).map_err(|e| Error::io("cannot read checkpoint manifest", &path, e))?;
    let value: serde_json::Value = serde_json::from_slice(&text).map_err(|e| Error::Checkpoint {
        path: dir.to_path_buf(),
        message: format!("corrupted manifest: {e}"),
    })?;
    let version = value.get("format_version").and_then(|v| v.as_u64());
    if version != Some(FORMAT_VERSION as u64) {
        return Err(Error::Checkpoint {
            path: dir.to_path_buf(),
            message: format!("unsupported format version {version:?} (expected {FORMAT_VERSION})"),
        });
    }
    serde_json::from_value(value).map_err(|e| Error::Checkpoint {
        path: dir.to_path_buf(),
        message: format!("corrupted manifest: {e}"),
    })
}

/// Loads a checkpoint; nothing is returned unless every tensor matches the
/// manifest's architecture.
pub fn load_checkpoint(dir: &Path) -> Result<(TrainState, CheckpointManifest)> {
    let fail = |message: String| Error::Checkpoint {
        path: dir.to_path_buf(),
        message,
    };
    let manifest = read_manifest(dir)?;
    let bundle = ModelBundle::<f32>::build(&manifest.arch, manifest.seed).map_err(|e| fail(format!("invalid architecture: {e}")))?;
    let meta = |group: Group| {
        manifest
            .optimizers
            .iter()
            .find(|m| m.group == group)
            .copied()
            .ok_or_else(|| fail(format!("no optimizer entry for group {group:?}")))
    };
    let (mm, md, mh) = (meta(Group::Main)?, meta(Group::Discriminator)?, meta(Group::Predictor)?);
    let mut state = TrainState {
        opt_main: Adam::new(&bundle.params, Group::Main, mm.lr),
        opt_d: Adam::new(&bundle.params, Group::Discriminator, md.lr),
        opt_h: Adam::new(&bundle.params, Group::Predictor, mh.lr),
        bundle,
        step: manifest.step,
        seed: manifest.seed,
    };
    (state.opt_main.t, state.opt_d.t, state.opt_h.t) = (mm.t, md.t, mh.t);

    let expected = layout(&state.bundle, optimizers(&state));
    if expected.len() != manifest.tensors.len() {
        return Err(fail(format!(
            "manifest lists {} tensors, architecture has {}",
            manifest.tensors.len(),
            expected.len()
        )));
    }
    if let Some((e, m)) = expected.iter().zip(&manifest.tensors).find(|(e, m)| e != m) {
        return Err(fail(format!(
            "tensor `{}` ({:?}) has shape {:?} at offset {}, architecture expects {:?} at {}",
            m.name, m.role, m.shape, m.offset, e.shape, e.offset
        )));
    }
    let total: usize = expected.iter().map(|e| e.shape[0] * e.shape[1]).sum();
    let bin_path = dir.join("params.bin");
    let bytes = fs::read(&bin_path).map_err(|e| Error::io("cannot read checkpoint parameters", &bin_path, e))?;
    if bytes.len() != total * 4 || manifest.total_len != total {
        return Err(fail(format!(
            "params.bin holds {} bytes, manifest layout needs {}",
            bytes.len(),
            total * 4
        )));
    }
    let floats: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    let tensor = |e: &TensorEntry| {
        Array2::from_shape_vec((e.shape[0], e.shape[1]), floats[e.offset..e.offset + e.shape[0] * e.shape[1]].to_vec())
            .expect("shape checked")
    };

    let mut entries = expected.iter();
    let ids: Vec<ParamId> = state.bundle.params.iter().map(|(id, _)| id).collect();
    for id in ids {
        *state.bundle.params.value_mut(id) = tensor(entries.next().expect("counted"));
    }
    for opt in [&mut state.opt_main, &mut state.opt_d, &mut state.opt_h] {
        for k in 0..opt.ids.len() {
            opt.m[k] = tensor(entries.next().expect("counted"));
        }
        for k in 0..opt.ids.len() {
            opt.v[k] = tensor(entries.next().expect("counted"));
        }
    }
    Ok((state, manifest))
}
