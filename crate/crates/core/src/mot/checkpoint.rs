//! Binary checkpoint: magic, version, a JSON header, then every tensor as raw
//! little-endian f64 in header order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LatentCodec, ModelConfig, MotModel};
use crate::error::{Error, Result};
use crate::nn::{AdamW, Param, ParamStore, Tensor};
use crate::tokenstream::Vocabulary;
use crate::util::TOOL_VERSION;

pub const MAGIC: &[u8; 8] = b"EMCOTCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub group: String,
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub frozen: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecMeta {
    pub image_size: usize,
    pub grid: usize,
    pub channels: usize,
    pub hidden: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimMeta {
    pub lr: f64,
    pub warmup: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
}

/// Run bookkeeping stored alongside the weights.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config_hash: String,
    pub stage: String,
    /// Optimizer steps completed.
    pub step: u64,
    /// Seed the per-step data and noise streams derive from.
    pub seed: u64,
    /// Reasoning mode the checkpoint was trained under, if fine-tuned.
    pub mode: Option<String>,
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub tool_version: String,
    pub model_config: ModelConfig,
    pub vocab_fingerprint: String,
    pub meta: CheckpointMeta,
    pub codec: CodecMeta,
    pub optimizer: Option<OptimMeta>,
    pub tensors: Vec<TensorEntry>,
}

fn entries(group: &str, store: &ParamStore) -> Vec<TensorEntry> {
    store
        .params
        .iter()
        .map(|p| TensorEntry {
            group: group.into(),
            name: p.name.clone(),
            rows: p.value.rows,
            cols: p.value.cols,
            frozen: p.frozen,
        })
        .collect()
}

pub fn save(path: &Path, model: &MotModel, optimizer: Option<&AdamW>, meta: &CheckpointMeta) -> Result<()> {
    let mut tensors = entries("model", &model.params);
    tensors.extend(entries("codec", &model.codec.params));
    let mut data: Vec<&Tensor> = model
        .params
        .params
        .iter()
        .chain(&model.codec.params.params)
        .map(|p| &p.value)
        .collect();
    if let Some(o) = optimizer {
        for (group, moments) in [("adam_m", &o.m), ("adam_v", &o.v)] {
            for (p, t) in model.params.params.iter().zip(moments.iter()) {
                tensors.push(TensorEntry {
                    group: group.into(),
                    name: p.name.clone(),
                    rows: t.rows,
                    cols: t.cols,
                    frozen: false,
                });
                data.push(t);
            }
        }
    }
    let c = &model.codec;
    let header = CheckpointHeader {
        tool_version: TOOL_VERSION.into(),
        model_config: model.config.clone(),
        vocab_fingerprint: Vocabulary::standard().fingerprint(),
        meta: meta.clone(),
        codec: CodecMeta {
            image_size: c.image_size,
            grid: c.grid,
            channels: c.channels,
            hidden: c.hidden,
            mean: c.mean.clone(),
            std: c.std.clone(),
        },
        optimizer: optimizer.map(|o| OptimMeta {
            lr: o.lr,
            warmup: o.warmup,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            weight_decay: o.weight_decay,
            step: o.step,
        }),
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(json.len() + 8 * data.iter().map(|t| t.data.len()).sum::<usize>() + 20);
    buf.extend_from_slice(MAGIC);
    buf.extend(VERSION.to_le_bytes());
    buf.extend((json.len() as u64).to_le_bytes());
    buf.extend(&json);
    for t in data {
        for v in &t.data {
            buf.extend(v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    fs::File::create(&tmp)?.write_all(&buf)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    let mut f = fs::File::open(path)?;
    let mut head = [0u8; 20];
    f.read_exact(&mut head)
        .map_err(|_| Error::Input(format!("{}: not a checkpoint", path.display())))?;
    let len = check_prefix(&head, path)?;
    let mut json = vec![0u8; len];
    f.read_exact(&mut json)?;
    Ok(serde_json::from_slice(&json)?)
}

fn check_prefix(head: &[u8], path: &Path) -> Result<usize> {
    if head.len() < 20 || &head[..8] != MAGIC {
        return Err(Error::Input(format!("{}: not a checkpoint", path.display())));
    }
    let version = u32::from_le_bytes(head[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Input(format!(
            "{}: checkpoint version {version}, expected {VERSION}",
            path.display()
        )));
    }
    Ok(u64::from_le_bytes(head[12..20].try_into().unwrap()) as usize)
}

/// Loads a checkpoint. With `expect`, a differing model configuration is
/// rejected.
pub fn load(path: &Path, expect: Option<&ModelConfig>) -> Result<(MotModel, Option<AdamW>, CheckpointMeta)> {
    let bytes = fs::read(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    let len = check_prefix(&bytes, path)?;
    let header: CheckpointHeader = serde_json::from_slice(
        bytes
            .get(20..20 + len)
            .ok_or_else(|| Error::Input(format!("{}: truncated header", path.display())))?,
    )?;
    if let Some(cfg) = expect {
        if cfg != &header.model_config {
            return Err(Error::Config(format!(
                "{}: checkpoint model config differs from the requested one",
                path.display()
            )));
        }
    }
    if header.vocab_fingerprint != Vocabulary::standard().fingerprint() {
        return Err(Error::Config(format!(
            "{}: vocabulary fingerprint mismatch",
            path.display()
        )));
    }
    let mut offset = 20 + len;
    let mut groups: [Vec<Param>; 4] = Default::default();
    for e in &header.tensors {
        let n = e.rows * e.cols;
        let raw = bytes
            .get(offset..offset + 8 * n)
            .ok_or_else(|| Error::Input(format!("{}: truncated tensor data", path.display())))?;
        offset += 8 * n;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let k = match e.group.as_str() {
            "model" => 0,
            "codec" => 1,
            "adam_m" => 2,
            "adam_v" => 3,
            other => return Err(Error::Input(format!("unknown tensor group '{other}'"))),
        };
        groups[k].push(Param {
            name: e.name.clone(),
            value: Tensor::from_vec(e.rows, e.cols, data),
            frozen: e.frozen,
        });
    }
    if offset != bytes.len() {
        return Err(Error::Input(format!(
            "{}: trailing bytes after tensor data",
            path.display()
        )));
    }
    let [model_p, codec_p, m, v] = groups;
    let cm = &header.codec;
    let codec = LatentCodec {
        image_size: cm.image_size,
        grid: cm.grid,
        channels: cm.channels,
        hidden: cm.hidden,
        params: ParamStore::from_params(codec_p),
        mean: cm.mean.clone(),
        std: cm.std.clone(),
    };
    let fresh = MotModel::new(header.model_config.clone(), codec)?;
    let names_match = fresh.params.params.len() == model_p.len()
        && fresh
            .params
            .params
            .iter()
            .zip(&model_p)
            .all(|(a, b)| a.name == b.name && a.value.shape() == b.value.shape());
    if !names_match {
        return Err(Error::Input(format!(
            "{}: parameter layout does not match its config",
            path.display()
        )));
    }
    let model = MotModel {
        config: fresh.config,
        params: ParamStore::from_params(model_p),
        codec: fresh.codec,
    };
    let optimizer = header.optimizer.as_ref().map(|o| AdamW {
        lr: o.lr,
        warmup: o.warmup,
        beta1: o.beta1,
        beta2: o.beta2,
        eps: o.eps,
        weight_decay: o.weight_decay,
        step: o.step,
        m: m.into_iter().map(|p| p.value).collect(),
        v: v.into_iter().map(|p| p.value).collect(),
    });
    Ok((model, optimizer, header.meta))
}
