//! Checkpoints on disk: network weights, a `key = value` sidecar with the
//! architecture and schedule position, and the optimizer moments.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::fields::{ModelConfig, NeuralGif, WeightMode};
use crate::geometry::Vec3;
use crate::kv::{join, KeyValues};
use crate::nets::{read_checkpoint, write_checkpoint, Activation, AdamState, EncodingConfig, Head, Mlp};
use crate::skeleton::Skeleton;

/// Where training stood when a checkpoint was written.
#[derive(Clone, Debug, PartialEq)]
pub struct Progress {
    pub stage: u32,
    /// Epoch within the stage, from 1.
    pub epoch: usize,
    /// Epochs completed over all stages.
    pub global_epoch: usize,
    pub normal_active: bool,
    /// Validation SDF loss after this epoch.
    pub val_sdf: Option<f64>,
    pub train_hash: String,
    pub dataset_hash: String,
}

pub fn checkpoint_name(stage: u32, epoch: usize) -> String {
    format!("stage{stage}_epoch{epoch}.ckpt")
}

pub fn meta_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("meta")
}

fn adam_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("adam")
}

const META_FORMAT: &str = "ngif-checkpoint-1";

fn meta_text(model: &NeuralGif<f32>, p: &Progress) -> String {
    let c = &model.config;
    let parents: Vec<i64> = model
        .skeleton
        .parents()
        .iter()
        .map(|p| p.map_or(-1, |v| v as i64))
        .collect();
    let joints: Vec<f64> = model.skeleton.rest_joints().iter().flat_map(|j| j.to_f64()).collect();
    let mut s = String::new();
    let mut put = |k: &str, v: String| {
        s.push_str(&format!("{k} = {v}\n"));
    };
    put("format", META_FORMAT.into());
    put("parents", join(&parents));
    put("rest_joints", join(&joints));
    put("frequencies", c.encoding.frequencies.to_string());
    put("include_input", c.encoding.include_input.to_string());
    put("weight_hidden", join(&c.weight_hidden));
    put("displacement_hidden", join(&c.displacement_hidden));
    put("sdf_hidden", join(&c.sdf_hidden));
    put("normal_hidden", join(&c.normal_hidden));
    put("shape_hidden", join(&c.shape_hidden));
    put("softplus_beta", c.softplus_beta.to_string());
    put("sdf_init_bias", c.sdf_init_bias.to_string());
    put("shape_dim", c.shape_dim.to_string());
    put("weight_mode", model.weight_mode.as_str().into());
    put("stage", p.stage.to_string());
    put("epoch", p.epoch.to_string());
    put("global_epoch", p.global_epoch.to_string());
    put("normal_active", p.normal_active.to_string());
    put("val_sdf", p.val_sdf.map_or("none".into(), |v| format!("{v:?}")));
    put("train_hash", p.train_hash.clone());
    put("dataset_hash", p.dataset_hash.clone());
    s
}

/// Writes weights and sidecar; `adam` adds the optimizer moments.
pub fn save_checkpoint(path: &Path, model: &NeuralGif<f32>, progress: &Progress, adam: Option<&[(&str, &AdamState<f32>)]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    if let Some(states) = adam {
        let mut nets = Vec::new();
        let mut steps = Vec::new();
        for (name, st) in states {
            let (m, v) = st.moments();
            nets.push((format!("{name}.m"), Mlp::from_layers(m.to_vec(), Activation::Identity, Head::Linear)?));
            nets.push((format!("{name}.v"), Mlp::from_layers(v.to_vec(), Activation::Identity, Head::Linear)?));
            steps.push(format!("{name}:{}", st.step_count()));
        }
        let refs: Vec<(&str, &Mlp<f32>)> = nets.iter().map(|(n, m)| (n.as_str(), m)).collect();
        let ap = adam_path(path);
        write_checkpoint(&ap, &refs)?;
        fs::write(ap.with_extension("steps"), steps.join("\n")).map_err(|e| Error::io(path, e))?;
    }
    write_checkpoint(path, &model.named_nets())?;
    let mp = meta_path(path);
    fs::write(&mp, meta_text(model, progress)).map_err(|e| Error::io(&mp, e))
}

/// Removes a checkpoint and its companions.
pub fn remove_checkpoint(path: &Path) {
    for p in [path.to_path_buf(), meta_path(path), adam_path(path), adam_path(path).with_extension("steps")] {
        let _ = fs::remove_file(p);
    }
}

fn parse_meta(kv: &KeyValues) -> Result<(Skeleton<f32>, ModelConfig, WeightMode, Progress)> {
    if kv.raw("format") != Some(META_FORMAT) {
        return Err(Error::config("format", "not a checkpoint sidecar"));
    }
    let parents: Vec<i64> = kv.list("parents")?.unwrap_or_default();
    let joints: Vec<f64> = kv.list("rest_joints")?.unwrap_or_default();
    if joints.len() != 3 * parents.len() {
        return Err(Error::config("rest_joints", "expected three coordinates per joint"));
    }
    let skeleton = Skeleton::new(
        parents.iter().map(|p| usize::try_from(*p).ok()).collect(),
        joints.chunks(3).map(|c| Vec3::from_f64([c[0], c[1], c[2]])).collect(),
    )?;
    let config = ModelConfig {
        encoding: EncodingConfig {
            frequencies: kv.require("frequencies")?,
            include_input: kv.require("include_input")?,
        },
        weight_hidden: kv.list("weight_hidden")?.unwrap_or_default(),
        displacement_hidden: kv.list("displacement_hidden")?.unwrap_or_default(),
        sdf_hidden: kv.list("sdf_hidden")?.unwrap_or_default(),
        normal_hidden: kv.list("normal_hidden")?.unwrap_or_default(),
        shape_hidden: kv.list("shape_hidden")?.unwrap_or_default(),
        softplus_beta: kv.require("softplus_beta")?,
        sdf_init_bias: kv.require("sdf_init_bias")?,
        shape_dim: kv.require("shape_dim")?,
    };
    let mode_s: String = kv.require("weight_mode")?;
    let mode = WeightMode::parse(&mode_s).ok_or_else(|| Error::config("weight_mode", mode_s.clone()))?;
    let val: String = kv.require("val_sdf")?;
    let progress = Progress {
        stage: kv.require("stage")?,
        epoch: kv.require("epoch")?,
        global_epoch: kv.require("global_epoch")?,
        normal_active: kv.require("normal_active")?,
        val_sdf: if val == "none" {
            None
        } else {
            Some(val.parse().map_err(|_| Error::config("val_sdf", val.clone()))?)
        },
        train_hash: kv.require("train_hash")?,
        dataset_hash: kv.require("dataset_hash")?,
    };
    Ok((skeleton, config, mode, progress))
}

/// Loads a model from a checkpoint and its sidecar.
pub fn load_checkpoint(path: &Path) -> Result<(NeuralGif<f32>, Progress)> {
    let kv = KeyValues::read(&meta_path(path))?;
    let (skeleton, config, mode, progress) = parse_meta(&kv)?;
    let nets = read_checkpoint::<f32>(path)?;
    Ok((NeuralGif::from_parts(skeleton, config, mode, nets)?, progress))
}

/// Optimizer state saved next to a checkpoint, per network name.
pub fn load_adam(path: &Path, model: &NeuralGif<f32>) -> Result<Vec<(String, AdamState<f32>)>> {
    let ap = adam_path(path);
    let mut nets = read_checkpoint::<f32>(&ap)?;
    let sp = ap.with_extension("steps");
    let steps = fs::read_to_string(&sp).map_err(|e| Error::io(&sp, e))?;
    let mut out = Vec::new();
    for line in steps.lines().filter(|l| !l.is_empty()) {
        let (name, step) = line
            .split_once(':')
            .ok_or_else(|| Error::invalid(format!("bad optimizer step line `{line}`")))?;
        let step: u64 = step.parse().map_err(|_| Error::invalid(format!("bad step count `{step}`")))?;
        let mut take = |suffix: &str| -> Result<Mlp<f32>> {
            let key = format!("{name}.{suffix}");
            let i = nets
                .iter()
                .position(|(n, _)| *n == key)
                .ok_or_else(|| Error::invalid(format!("optimizer state lacks `{key}`")))?;
            Ok(nets.swap_remove(i).1)
        };
        let (m, v) = (take("m")?, take("v")?);
        let net = model
            .named_nets()
            .into_iter()
            .find(|(n, _)| *n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::invalid(format!("optimizer state for unknown network `{name}`")))?;
        out.push((name.to_string(), AdamState::from_moments(net, m.layers().to_vec(), v.layers().to_vec(), step)?));
    }
    Ok(out)
}

/// The checkpoint in `dir` furthest along the schedule.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<PathBuf>> {
    let mut best: Option<((u32, usize), PathBuf)> = None;
    let entries = match fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(Error::io(dir, e)),
    };
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
        let Some(rest) = name.strip_prefix("stage").and_then(|r| r.strip_suffix(".ckpt")) else { continue };
        let Some((s, e)) = rest.split_once("_epoch") else { continue };
        let (Ok(s), Ok(e)) = (s.parse::<u32>(), e.parse::<usize>()) else { continue };
        if !meta_path(&path).exists() {
            continue;
        }
        if best.as_ref().map_or(true, |(k, _)| (s, e) > *k) {
            best = Some(((s, e), path));
        }
    }
    Ok(best.map(|(_, p)| p))
}

/// Accepts a checkpoint file or a training directory.
pub fn resolve_checkpoint(path: &Path) -> Result<PathBuf> {
    if path.is_dir() {
        latest_checkpoint(path)?.ok_or_else(|| Error::invalid(format!("no checkpoint in {}", path.display())))
    } else if path.exists() {
        Ok(path.to_path_buf())
    } else {
        Err(Error::io(path, std::io::Error::from(std::io::ErrorKind::NotFound)))
    }
}
