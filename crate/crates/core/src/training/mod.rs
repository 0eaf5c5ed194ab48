//! Two-stage training: mixed pre-training (VQA, future-frame prediction,
//! action prediction) and EM-CoT fine-tuning with VQA co-training.

pub mod data;
pub mod vqa;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use data::{DatasetManifest, SampleKind, TrainingData, VqaSpec, MANIFEST_FORMAT};
pub use vqa::{generate_vqa, scene_questions, VqaItem};

use crate::error::{Error, Result};
use crate::mot::checkpoint::{self, CheckpointMeta};
use crate::mot::{noise_batch, weighted_total, ForwardOptions, MotModel};
use crate::nn::{AdamW, Grads};
use crate::tokenstream::{pack_samples, CotMode, Vocabulary};
use crate::util::{rng_for, TOOL_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        }
    }
}

/// Multipliers on the text, subgoal and action losses. VQA text shares the
/// text weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub ce: f64,
    pub mse: f64,
    pub l1: f64,
}

impl LossWeights {
    pub const PRETRAIN: LossWeights = LossWeights {
        ce: 0.25,
        mse: 0.5,
        l1: 1.0,
    };
    pub const FINETUNE: LossWeights = LossWeights {
        ce: 1.0,
        mse: 1.0,
        l1: 1.0,
    };

    pub fn validate(&self) -> Result<()> {
        if [self.ce, self.mse, self.l1].iter().all(|w| *w > 0.0 && w.is_finite()) {
            Ok(())
        } else {
            Err(Error::Config("loss weights must be positive".into()))
        }
    }

    /// Order matches [`Components::as_array`].
    pub fn as_array(&self) -> [f64; 4] {
        [self.ce, self.ce, self.mse, self.l1]
    }

    /// Weighted total; absent components contribute 0.
    pub fn total(&self, c: &Components) -> f64 {
        c.as_array()
            .iter()
            .zip(self.as_array())
            .filter_map(|(v, w)| v.map(|v| w * v))
            .sum()
    }
}

/// Component loss values of one step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Components {
    pub ce: Option<f64>,
    pub ce_vqa: Option<f64>,
    pub mse: Option<f64>,
    pub l1: Option<f64>,
}

impl Components {
    pub fn as_array(&self) -> [Option<f64>; 4] {
        [self.ce, self.ce_vqa, self.mse, self.l1]
    }

    fn names() -> [&'static str; 4] {
        ["ce", "ce_vqa", "mse", "l1"]
    }
}

/// Relative frequency of each sample kind in a batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Mixture {
    pub vqa: f64,
    pub vg: f64,
    pub ap: f64,
    pub emcot: f64,
}

impl Default for Mixture {
    fn default() -> Self {
        Self::PRETRAIN
    }
}

impl Mixture {
    pub const PRETRAIN: Mixture = Mixture {
        vqa: 1.0,
        vg: 1.0,
        ap: 2.0,
        emcot: 0.0,
    };
    pub const FINETUNE: Mixture = Mixture {
        vqa: 1.0,
        vg: 0.0,
        ap: 0.0,
        emcot: 4.0,
    };

    pub fn weight(&self, kind: SampleKind) -> f64 {
        match kind {
            SampleKind::Vqa => self.vqa,
            SampleKind::Vg => self.vg,
            SampleKind::Ap => self.ap,
            SampleKind::Emcot => self.emcot,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ws: Vec<f64> = SampleKind::ALL.iter().map(|&k| self.weight(k)).collect();
        if ws.iter().any(|w| *w < 0.0 || !w.is_finite()) || ws.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config(
                "mixture weights must be non-negative with a positive sum".into(),
            ));
        }
        Ok(())
    }

    pub fn draw(&self, rng: &mut impl Rng) -> SampleKind {
        let total: f64 = SampleKind::ALL.iter().map(|&k| self.weight(k)).sum();
        let mut u = rng.random::<f64>() * total;
        for k in SampleKind::ALL {
            let w = self.weight(k);
            if u < w {
                return k;
            }
            u -= w;
        }
        *SampleKind::ALL.iter().rev().find(|&&k| self.weight(k) > 0.0).unwrap()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageConfig {
    pub stage: Stage,
    pub lr: f64,
    pub warmup: u64,
    pub steps: u64,
    /// Sequences per optimizer step.
    pub batch: usize,
    pub weights: LossWeights,
    pub mixture: Mixture,
    /// Which spans EM-CoT samples keep (ablation regimes).
    pub mode: CotMode,
    pub weight_decay: f64,
    pub seed: u64,
    /// Save an intermediate checkpoint every this many steps (0 = only at the end).
    pub checkpoint_every: u64,
    pub log_every: u64,
    /// Abort when the loss stays above this multiple of the initial loss...
    pub divergence_factor: f64,
    /// ...for this many consecutive steps.
    pub divergence_window: u64,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self::pretrain()
    }
}

impl StageConfig {
    pub fn pretrain() -> Self {
        Self {
            stage: Stage::Pretrain,
            lr: 1e-4,
            warmup: 100,
            steps: 2000,
            batch: 16,
            weights: LossWeights::PRETRAIN,
            mixture: Mixture::PRETRAIN,
            mode: CotMode::Full,
            weight_decay: 0.0,
            seed: 0,
            checkpoint_every: 0,
            log_every: 50,
            divergence_factor: 10.0,
            divergence_window: 100,
        }
    }

    pub fn finetune() -> Self {
        Self {
            stage: Stage::Finetune,
            lr: 5e-5,
            warmup: 25,
            weights: LossWeights::FINETUNE,
            mixture: Mixture::FINETUNE,
            seed: 1,
            ..Self::pretrain()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            errs.push("lr must be positive".to_string());
        }
        if self.batch == 0 {
            errs.push("batch must be >= 1".into());
        }
        if self.weight_decay < 0.0 {
            errs.push("weight_decay must be >= 0".into());
        }
        if self.divergence_factor <= 1.0 || self.divergence_window == 0 {
            errs.push("divergence_factor must exceed 1 and divergence_window must be >= 1".into());
        }
        for r in [self.weights.validate(), self.mixture.validate()] {
            if let Err(e) = r {
                errs.push(e.to_string());
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errs))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub step: u64,
    pub lr: f64,
    pub total: f64,
    pub components: Components,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub tool_version: String,
    pub config_hash: String,
    pub stage: Stage,
    pub mode: CotMode,
    pub start_step: u64,
    pub steps: u64,
    pub batch: usize,
    pub losses: Vec<StepLoss>,
    pub mixture_counts: BTreeMap<SampleKind, u64>,
    pub wall_clock_secs: f64,
    pub checkpoints: Vec<String>,
}

impl TrainReport {
    /// Mean total loss over the `window` steps ending at index `end` (exclusive).
    pub fn moving_average(&self, end: usize, window: usize) -> Option<f64> {
        let end = end.min(self.losses.len());
        let start = end.checked_sub(window)?;
        (window > 0).then(|| self.losses[start..end].iter().map(|l| l.total).sum::<f64>() / window as f64)
    }

    /// Fractional decrease of the final 50-step moving average relative to
    /// the one ending at step 50.
    pub fn loss_decrease(&self) -> Option<f64> {
        let early = self.moving_average(50, 50)?;
        let late = self.moving_average(self.losses.len(), 50)?;
        Some(1.0 - late / early)
    }
}

/// Result of one forward/backward pass over a batch.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub total: f64,
    pub components: Components,
    pub grads: Grads,
    pub counts: BTreeMap<SampleKind, u64>,
}

/// Draws the batch of `step` and computes weighted loss and gradients.
/// Everything random derives from `(seed, stage, step)`.
pub fn train_step(
    model: &MotModel,
    data: &TrainingData,
    cfg: &StageConfig,
    vocab: &Vocabulary,
    step: u64,
) -> Result<StepOutput> {
    let mut rng = rng_for(cfg.seed, &format!("{}/step/{step}", cfg.stage.name()));
    let mut sequences = Vec::with_capacity(cfg.batch);
    let mut vqa_ids = BTreeSet::new();
    let mut counts = BTreeMap::new();
    for i in 0..cfg.batch {
        let kind = cfg.mixture.draw(&mut rng);
        *counts.entry(kind).or_insert(0) += 1;
        if kind == SampleKind::Vqa {
            vqa_ids.insert(i as u32);
        }
        sequences.push(data.draw(model, kind, cfg.mode, vocab, i as u32, &mut rng)?);
    }
    let (total, components, grads) = batch_loss(
        model,
        sequences,
        &vqa_ids,
        &cfg.weights,
        &data.layout.mask,
        data.layout.max_len,
        &mut rng,
    )?;
    Ok(StepOutput {
        total,
        components,
        grads,
        counts,
    })
}

/// Weighted loss and gradients of a batch of sequences. Sequences are packed;
/// each component is averaged over all loss-flagged records of the batch
/// regardless of how they were packed.
pub fn batch_loss(
    model: &MotModel,
    sequences: Vec<Vec<crate::tokenstream::TokenRecord>>,
    vqa_ids: &BTreeSet<u32>,
    weights: &LossWeights,
    mask: &crate::tokenstream::MaskOptions,
    max_len: usize,
    rng: &mut impl Rng,
) -> Result<(f64, Components, Grads)> {
    use crate::tokenstream::Role;
    let packs = pack_samples(sequences, max_len, mask)?;
    // loss-bearing units per component per pack
    let unit_counts: Vec<[usize; 4]> = packs
        .iter()
        .map(|p| {
            let mut c = [0usize; 4];
            for r in p.records.iter().filter(|r| r.loss) {
                let k = match r.role {
                    Role::Text if vqa_ids.contains(&r.sample) => 1,
                    Role::Text => 0,
                    Role::VisNoise => 2,
                    Role::ActNoise => 3,
                    _ => continue,
                };
                c[k] += 1;
            }
            c
        })
        .collect();
    let totals: [usize; 4] = std::array::from_fn(|k| unit_counts.iter().map(|c| c[k]).sum());
    let base = weights.as_array();
    let mut grads = Grads(vec![None; model.params.len()]);
    let mut sums = [0.0f64; 4];
    for (pack, counts) in packs.into_iter().zip(&unit_counts) {
        let batch = noise_batch(pack, rng)?;
        let mut f = model.forward(&batch.packed, &batch.times, ForwardOptions::default())?;
        let nodes = model.losses(&mut f, &batch, vqa_ids)?;
        let share: [f64; 4] = std::array::from_fn(|k| {
            if totals[k] == 0 {
                0.0
            } else {
                counts[k] as f64 / totals[k] as f64
            }
        });
        let w: [f64; 4] = std::array::from_fn(|k| base[k] * share[k]);
        for (k, n) in [nodes.ce, nodes.ce_vqa, nodes.mse, nodes.l1].into_iter().enumerate() {
            if let Some(n) = n {
                let v = f.graph.value(n).item();
                if !v.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        component: Components::names()[k].into(),
                    });
                }
                sums[k] += share[k] * v;
            }
        }
        if let Some(total) = weighted_total(&mut f.graph, &nodes, w) {
            grads.accumulate(f.graph.backward(total));
        }
    }
    let present = |k: usize| (totals[k] > 0).then_some(sums[k]);
    let components = Components {
        ce: present(0),
        ce_vqa: present(1),
        mse: present(2),
        l1: present(3),
    };
    Ok((weights.total(&components), components, grads))
}

/// Where and how a stage runs.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
    pub config_hash: String,
    /// Optimizer state and completed steps of an interrupted run.
    pub resume: Option<(AdamW, u64)>,
    /// Stop after this many total steps (for interruption tests).
    pub stop_at: Option<u64>,
}

pub fn checkpoint_path(dir: &Path, stage: Stage, step: Option<u64>) -> PathBuf {
    match step {
        Some(s) => dir.join(format!("{}-step{s:06}.ckpt", stage.name())),
        None => dir.join(format!("{}.ckpt", stage.name())),
    }
}

/// Runs a stage from step 0 (or the resume point) to `cfg.steps`.
pub fn run_stage(
    model: &mut MotModel,
    data: &TrainingData,
    cfg: &StageConfig,
    opts: RunOptions,
) -> Result<TrainReport> {
    cfg.validate()?;
    let vocab = Vocabulary::standard();
    let kinds: Vec<SampleKind> = SampleKind::ALL
        .into_iter()
        .filter(|&k| cfg.mixture.weight(k) > 0.0)
        .collect();
    for k in &kinds {
        if data.available(*k) == 0 {
            return Err(Error::Input(format!(
                "mixture asks for {} samples but the dataset has none",
                k.name()
            )));
        }
    }
    let (mut opt, start) = match opts.resume {
        Some((o, s)) => (o, s),
        None => (AdamW::new(&model.params, cfg.lr, cfg.warmup, cfg.weight_decay), 0),
    };
    let end = opts.stop_at.unwrap_or(cfg.steps).min(cfg.steps);
    let clock = Instant::now();
    let mut report = TrainReport {
        tool_version: TOOL_VERSION.into(),
        config_hash: opts.config_hash.clone(),
        stage: cfg.stage,
        mode: cfg.mode,
        start_step: start,
        steps: end.saturating_sub(start),
        batch: cfg.batch,
        losses: Vec::new(),
        mixture_counts: BTreeMap::new(),
        wall_clock_secs: 0.0,
        checkpoints: Vec::new(),
    };
    let mut initial: Option<f64> = None;
    let mut above = 0u64;
    let meta = |step: u64| CheckpointMeta {
        config_hash: opts.config_hash.clone(),
        stage: cfg.stage.name().into(),
        step,
        seed: cfg.seed,
        mode: Some(cfg.mode.name().into()),
        extra: serde_json::Value::Null,
    };
    for step in start..end {
        let out = train_step(model, data, cfg, &vocab, step)?;
        for (k, c) in out.counts {
            *report.mixture_counts.entry(k).or_insert(0) += c;
        }
        let lr = opt.lr_at(opt.step);
        let grad_norm = AdamW::grad_norm(&out.grads);
        opt.update(&mut model.params, &out.grads);
        report.losses.push(StepLoss {
            step,
            lr,
            total: out.total,
            components: out.components,
            grad_norm,
        });
        if cfg.log_every > 0 && step % cfg.log_every == 0 {
            log::info!("{} step {step}: loss {:.4} lr {lr:.2e}", cfg.stage.name(), out.total);
        }
        let init = *initial.get_or_insert(out.total);
        if out.total > cfg.divergence_factor * init {
            above += 1;
            if above >= cfg.divergence_window {
                return Err(Error::Diverged(format!(
                    "loss {:.4} stayed above {}x the initial {init:.4} for {above} steps (step {step})",
                    out.total, cfg.divergence_factor
                )));
            }
        } else {
            above = 0;
        }
        if let Some(dir) = &opts.out_dir {
            if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 && step + 1 < end {
                let p = checkpoint_path(dir, cfg.stage, Some(step + 1));
                checkpoint::save(&p, model, Some(&opt), &meta(step + 1))?;
                report.checkpoints.push(p.display().to_string());
            }
        }
    }
    if let Some(dir) = &opts.out_dir {
        let p = if end < cfg.steps {
            checkpoint_path(dir, cfg.stage, Some(end))
        } else {
            checkpoint_path(dir, cfg.stage, None)
        };
        checkpoint::save(&p, model, Some(&opt), &meta(end))?;
        report.checkpoints.push(p.display().to_string());
        report.wall_clock_secs = clock.elapsed().as_secs_f64();
        std::fs::write(
            dir.join(format!("{}-report.json", cfg.stage.name())),
            serde_json::to_string_pretty(&report)? + "\n",
        )?;
    }
    report.wall_clock_secs = clock.elapsed().as_secs_f64();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weighting_is_exact() {
        let ones = Components {
            ce: Some(1.0),
            ce_vqa: None,
            mse: Some(1.0),
            l1: Some(1.0),
        };
        assert_eq!(LossWeights::PRETRAIN.total(&ones), 1.75);
        let vqa_only = Components {
            ce_vqa: Some(0.8),
            ..Default::default()
        };
        assert_eq!(LossWeights::PRETRAIN.total(&vqa_only), 0.25 * 0.8);
        let ft = Components {
            ce: Some(0.5),
            ce_vqa: None,
            mse: Some(0.2),
            l1: Some(0.3),
        };
        assert_eq!(LossWeights::FINETUNE.total(&ft), 1.0);
    }

    #[test]
    fn mixture_frequencies() {
        let mut rng = rng_for(0, "mix");
        let mut counts = BTreeMap::new();
        let n = 20_000;
        for _ in 0..n {
            *counts.entry(Mixture::PRETRAIN.draw(&mut rng)).or_insert(0) += 1;
        }
        let f = |k| *counts.get(&k).unwrap_or(&0) as f64 / n as f64;
        assert!((f(SampleKind::Vqa) - 0.25).abs() < 0.02);
        assert!((f(SampleKind::Vg) - 0.25).abs() < 0.02);
        assert!((f(SampleKind::Ap) - 0.5).abs() < 0.02);
        assert_eq!(f(SampleKind::Emcot), 0.0);
    }
}
