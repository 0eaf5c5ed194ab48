//! Mixture-of-transformers policy: three expert parameter groups that share
//! one masked self-attention, plus the modality encoders and flow heads.

pub mod checkpoint;
pub mod codec;
pub mod flow;

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::envsim::{Image, ACTION_DIM};
use crate::error::{Error, Result};
use crate::nn::{Graph, NodeId, ParamStore, Route, Tensor};
use crate::tokenstream::{
    build_attention_mask, AttentionMask, FrameTokens, MaskOptions, PackedSequence, Payload, Role, TokenRecord,
    Vocabulary,
};
use crate::util::rng_for;

pub use codec::{CodecConfig, CodecReport, LatentCodec};
pub use flow::{euler, noise_batch, FlowTimes, NoisedBatch};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub vocab_size: usize,
    pub image_size: usize,
    /// Side of the square patches fed to the understanding path.
    pub und_patch: usize,
    pub action_dim: usize,
    pub chunk: usize,
    pub flow_steps: usize,
    pub context_frames: usize,
    pub ffn_mult: usize,
    pub seed: u64,
    pub codec: CodecConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            head_dim: 32,
            vocab_size: Vocabulary::standard().len(),
            image_size: 64,
            und_patch: 16,
            action_dim: ACTION_DIM,
            chunk: 16,
            flow_steps: 10,
            context_frames: 3,
            ffn_mult: 4,
            seed: 0,
            codec: CodecConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.n_heads == 0 || self.d_model != self.n_heads * self.head_dim {
            errs.push(format!(
                "d_model {} must equal n_heads {} x head_dim {}",
                self.d_model, self.n_heads, self.head_dim
            ));
        }
        if !self.head_dim.is_multiple_of(2) {
            errs.push("head_dim must be even for rotary positions".into());
        }
        if self.n_layers == 0 {
            errs.push("n_layers must be >= 1".into());
        }
        if self.und_patch == 0 || !self.image_size.is_multiple_of(self.und_patch) {
            errs.push(format!(
                "und_patch {} must divide image_size {}",
                self.und_patch, self.image_size
            ));
        }
        if self.codec.grid == 0 || !self.image_size.is_multiple_of(self.codec.grid) {
            errs.push(format!(
                "latent grid {} must divide image_size {}",
                self.codec.grid, self.image_size
            ));
        }
        if self.action_dim != ACTION_DIM {
            errs.push(format!("action_dim must be {ACTION_DIM}"));
        }
        if self.chunk == 0 || self.flow_steps == 0 || self.context_frames == 0 || self.ffn_mult == 0 {
            errs.push("chunk, flow_steps, context_frames and ffn_mult must be >= 1".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errs))
        }
    }

    pub fn und_patches(&self) -> usize {
        (self.image_size / self.und_patch).pow(2)
    }

    pub fn latent_cells(&self) -> usize {
        self.codec.grid * self.codec.grid
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Expert {
    Und,
    Gen,
    Act,
}

impl Expert {
    pub const ALL: [Expert; 3] = [Expert::Und, Expert::Gen, Expert::Act];

    pub fn name(self) -> &'static str {
        match self {
            Expert::Und => "und",
            Expert::Gen => "gen",
            Expert::Act => "act",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn of(role: Role) -> Expert {
        match role {
            Role::Text | Role::VisUnd => Expert::Und,
            Role::VisClean | Role::VisNoise => Expert::Gen,
            Role::ActNoise => Expert::Act,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowKind {
    Vis,
    Act,
}

const LAYER_PARAMS: [&str; 10] = ["attn_norm", "wq", "wk", "wv", "wo", "ffn_norm", "w1", "b1", "w2", "b2"];

/// Floor on 1 − t when converting an endpoint estimate to a velocity.
pub const MIN_REMAINING: f64 = 0.05;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Replace attention with the identity map (each record sees only itself).
    pub attention_identity: bool,
}

/// A finished forward pass; heads and losses extend its graph.
pub struct Forward<'a> {
    pub graph: Graph<'a>,
    pub hidden: NodeId,
    pub attention: Vec<NodeId>,
    pub blocks: Arc<Vec<(usize, usize)>>,
    /// (t, x_t) of each noise record.
    pub noise_state: Vec<Option<(f64, Vec<f64>)>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LossNodes {
    /// Cross entropy over supervised text outside VQA samples.
    pub ce: Option<NodeId>,
    pub ce_vqa: Option<NodeId>,
    pub mse: Option<NodeId>,
    pub l1: Option<NodeId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MotModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub codec: LatentCodec,
}

impl MotModel {
    pub fn new(config: ModelConfig, codec: LatentCodec) -> Result<Self> {
        config.validate()?;
        if codec.image_size != config.image_size
            || codec.grid != config.codec.grid
            || codec.channels != config.codec.channels
        {
            return Err(Error::Config(
                "codec does not match the model's image size, latent grid or channels".into(),
            ));
        }
        let d = config.d_model;
        let c = config.codec.channels;
        let p = config.und_patch * config.und_patch * 3;
        let ff = d * config.ffn_mult;
        let mut rng = rng_for(config.seed, "model-init");
        let mut normal = |rows: usize, cols: usize, std: f64| {
            let n = Normal::new(0.0, std).unwrap();
            Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| n.sample(&mut rng)).collect())
        };
        let fan = |rows: usize| 1.0 / (rows as f64).sqrt();
        let out_scale = 1.0 / ((2 * config.n_layers) as f64).sqrt();
        let mut ps = ParamStore::new();
        ps.add("text.embed", normal(config.vocab_size, d, 0.1));
        ps.add("und.patch.w", normal(p, d, fan(p)));
        ps.add("und.patch.b", Tensor::zeros(1, d));
        ps.add("und.patch.pos", normal(config.und_patches(), d, 0.1));
        ps.add("gen.latent.w", normal(c, d, fan(c)));
        ps.add("gen.latent.b", Tensor::zeros(1, d));
        ps.add("gen.latent.pos", normal(config.latent_cells(), d, 0.1));
        ps.add("act.in.w", normal(ACTION_DIM, d, fan(ACTION_DIM)));
        ps.add("act.in.b", Tensor::zeros(1, d));
        ps.add("act.in.pos", normal(config.chunk, d, 0.1));
        ps.add("role.embed", normal(Role::ALL.len(), d, 0.1));
        for l in 0..config.n_layers {
            for e in Expert::ALL {
                let pre = format!("layers.{l}.{}", e.name());
                ps.add(&format!("{pre}.attn_norm"), Tensor::from_vec(1, d, vec![1.0; d]));
                for w in ["wq", "wk", "wv"] {
                    ps.add(&format!("{pre}.{w}"), normal(d, d, fan(d)));
                }
                ps.add(&format!("{pre}.wo"), normal(d, d, fan(d) * out_scale));
                ps.add(&format!("{pre}.ffn_norm"), Tensor::from_vec(1, d, vec![1.0; d]));
                ps.add(&format!("{pre}.w1"), normal(d, ff, fan(d)));
                ps.add(&format!("{pre}.b1"), Tensor::zeros(1, ff));
                ps.add(&format!("{pre}.w2"), normal(ff, d, fan(ff) * out_scale));
                ps.add(&format!("{pre}.b2"), Tensor::zeros(1, d));
            }
        }
        for e in Expert::ALL {
            ps.add(
                &format!("final.{}.norm", e.name()),
                Tensor::from_vec(1, d, vec![1.0; d]),
            );
        }
        ps.add("gen.head.w", normal(d, c, 0.1 * fan(d)));
        ps.add("gen.head.b", Tensor::zeros(1, c));
        ps.add("act.head.w", normal(d, ACTION_DIM, 0.1 * fan(d)));
        ps.add("act.head.b", Tensor::zeros(1, ACTION_DIM));
        Ok(Self {
            config,
            params: ps,
            codec,
        })
    }

    /// Names of the per-layer parameters owned by `expert`.
    pub fn expert_params(&self, expert: Expert) -> Vec<String> {
        (0..self.config.n_layers)
            .flat_map(|l| {
                LAYER_PARAMS
                    .iter()
                    .map(move |p| format!("layers.{l}.{}.{p}", expert.name()))
            })
            .collect()
    }

    /// Semantic patches and codec latents of one frame.
    pub fn encode_observation(&self, image: &Image) -> Result<FrameTokens> {
        let mut ft = self.encode_observation_und(image)?;
        ft.clean = self.codec.encode(image)?;
        Ok(ft)
    }

    /// Semantic path only; `clean` is left empty.
    pub fn encode_observation_und(&self, image: &Image) -> Result<FrameTokens> {
        if image.width != self.config.image_size || image.height != self.config.image_size {
            return Err(Error::Input(format!(
                "observation is {}x{}, model expects {}x{}",
                image.width, image.height, self.config.image_size, self.config.image_size
            )));
        }
        let patches = codec::patchify(image, self.config.und_patch);
        // centred on the frame's mean colour so the table background cancels
        let mut mean = [0.0f64; 3];
        for (k, v) in patches.data.iter().enumerate() {
            mean[k % 3] += v;
        }
        let per = (patches.data.len() / 3).max(1) as f64;
        mean.iter_mut().for_each(|m| *m /= per);
        let und = (0..patches.rows)
            .map(|r| {
                patches
                    .row(r)
                    .iter()
                    .enumerate()
                    .map(|(k, v)| 2.0 * (v - mean[k % 3]))
                    .collect()
            })
            .collect();
        Ok(FrameTokens { und, clean: Vec::new() })
    }

    pub fn forward<'a>(
        &'a self,
        packed: &PackedSequence,
        times: &FlowTimes,
        opts: ForwardOptions,
    ) -> Result<Forward<'a>> {
        let records = &packed.records;
        let n = records.len();
        if packed.mask.n != n {
            return Err(Error::Input(format!(
                "mask is {}x{} but the sequence has {n} records",
                packed.mask.n, packed.mask.n
            )));
        }
        let cfg = &self.config;
        let d = cfg.d_model;
        let c = cfg.codec.channels;
        let pdim = cfg.und_patch * cfg.und_patch * 3;

        let mut text = (Vec::new(), Vec::new());
        let mut und = (Vec::new(), Vec::new(), Vec::new());
        let mut lat = (Vec::new(), Vec::new(), Vec::new());
        let mut act = (Vec::new(), Vec::new(), Vec::new());
        let mut extra = Tensor::zeros(n, d);
        let mut role_idx = Vec::with_capacity(n);
        let mut owner = Vec::with_capacity(n);
        let mut positions = Vec::with_capacity(n);
        let mut slot = 0usize;
        let mut noise_state = vec![None; n];
        for (i, r) in records.iter().enumerate() {
            let key = |r: &TokenRecord| (r.sample, r.role, r.frame, r.group);
            slot = if i > 0 && key(&records[i - 1]) == key(r) {
                slot + 1
            } else {
                0
            };
            role_idx.push(Role::ALL.iter().position(|&x| x == r.role).unwrap());
            owner.push(Expert::of(r.role).index());
            positions.push(r.position as f64);
            let vector = |dim: usize, limit: usize, what: &str| -> Result<Vec<f64>> {
                match &r.payload {
                    Payload::Vector(v) if v.len() == dim && slot < limit => Ok(v.clone()),
                    Payload::Vector(v) if v.len() != dim => Err(Error::Input(format!(
                        "record {i}: {what} payload has {} values, expected {dim}",
                        v.len()
                    ))),
                    Payload::Vector(_) => Err(Error::Input(format!("record {i}: {what} index {slot} exceeds {limit}"))),
                    Payload::Token(_) => Err(Error::Input(format!("record {i}: {what} record holds a token"))),
                }
            };
            match r.role {
                Role::Text => match r.payload {
                    Payload::Token(id) if (id as usize) < cfg.vocab_size => {
                        text.0.push(i);
                        text.1.push(id as usize);
                    }
                    _ => {
                        return Err(Error::Input(format!(
                            "record {i}: text record needs a token id below {}",
                            cfg.vocab_size
                        )))
                    }
                },
                Role::VisUnd => {
                    und.1.extend(vector(pdim, cfg.und_patches(), "semantic patch")?);
                    und.0.push(i);
                    und.2.push(slot);
                }
                Role::VisClean | Role::VisNoise => {
                    lat.1.extend(vector(c, cfg.latent_cells(), "latent")?);
                    lat.0.push(i);
                    lat.2.push(slot);
                }
                Role::ActNoise => {
                    act.1.extend(vector(ACTION_DIM, cfg.chunk, "action")?);
                    act.0.push(i);
                    act.2.push(slot);
                }
            }
            if r.role.is_noise() {
                let t = r
                    .group
                    .and_then(|g| times.get(&(r.sample, g)))
                    .ok_or_else(|| Error::Input(format!("record {i}: no flow time for its noise group")))?;
                extra.row_mut(i).copy_from_slice(&flow::time_embedding(*t, d));
                if let Payload::Vector(x) = &r.payload {
                    noise_state[i] = Some((*t, x.clone()));
                }
            }
        }

        let mut g = Graph::new(&self.params);
        let mut parts = Vec::new();
        if !text.0.is_empty() {
            let e = g.param_named("text.embed");
            let x = g.gather(e, Arc::new(text.1));
            parts.push(g.place(x, Arc::new(text.0), n));
        }
        for (rows, data, slots, name, dim) in [
            (und.0, und.1, und.2, "und.patch", pdim),
            (lat.0, lat.1, lat.2, "gen.latent", c),
            (act.0, act.1, act.2, "act.in", ACTION_DIM),
        ] {
            if rows.is_empty() {
                continue;
            }
            let x = g.input(Tensor::from_vec(rows.len(), dim, data));
            let w = g.param_named(&format!("{name}.w"));
            let b = g.param_named(&format!("{name}.b"));
            let pos = g.param_named(&format!("{name}.pos"));
            let h = g.matmul(x, w);
            let h = g.add_row(h, b);
            let p = g.gather(pos, Arc::new(slots));
            let h = g.add(h, p);
            parts.push(g.place(h, Arc::new(rows), n));
        }
        let re = g.param_named("role.embed");
        let mut x = g.gather(re, Arc::new(role_idx));
        for p in parts {
            x = g.add(x, p);
        }
        let extra = g.input(extra);
        x = g.add(x, extra);

        let route = Arc::new(Route::new(n, &owner, Expert::ALL.len()));
        let positions = Arc::new(positions);
        let blocks = Arc::new(packed.samples.iter().map(|&(_, s, l)| (s, l)).collect::<Vec<_>>());
        let identity;
        let mask: &AttentionMask = if opts.attention_identity {
            identity = AttentionMask::identity(n);
            &identity
        } else {
            &packed.mask
        };
        let mut attention = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let p = |g: &mut Graph<'a>, name: &str| -> Vec<NodeId> {
                Expert::ALL
                    .iter()
                    .map(|e| g.param_named(&format!("layers.{l}.{}.{name}", e.name())))
                    .collect()
            };
            let none = vec![None; Expert::ALL.len()];
            let norm = p(&mut g, "attn_norm");
            let h = g.routed_rms(x, route.clone(), norm);
            let wq = p(&mut g, "wq");
            let wk = p(&mut g, "wk");
            let wv = p(&mut g, "wv");
            let q = g.routed_linear(h, route.clone(), wq, none.clone());
            let k = g.routed_linear(h, route.clone(), wk, none.clone());
            let v = g.routed_linear(h, route.clone(), wv, none.clone());
            let q = g.rope(q, positions.clone(), cfg.n_heads);
            let k = g.rope(k, positions.clone(), cfg.n_heads);
            let a = g.attention(q, k, v, cfg.n_heads, blocks.clone(), mask);
            attention.push(a);
            let wo = p(&mut g, "wo");
            let o = g.routed_linear(a, route.clone(), wo, none);
            x = g.add(x, o);
            let norm = p(&mut g, "ffn_norm");
            let h = g.routed_rms(x, route.clone(), norm);
            let w1 = p(&mut g, "w1");
            let b1 = p(&mut g, "b1").into_iter().map(Some).collect();
            let h = g.routed_linear(h, route.clone(), w1, b1);
            let h = g.gelu(h);
            let w2 = p(&mut g, "w2");
            let b2 = p(&mut g, "b2").into_iter().map(Some).collect();
            let f = g.routed_linear(h, route.clone(), w2, b2);
            x = g.add(x, f);
        }
        let fin: Vec<NodeId> = Expert::ALL
            .iter()
            .map(|e| g.param_named(&format!("final.{}.norm", e.name())))
            .collect();
        let hidden = g.routed_rms(x, route, fin);
        Ok(Forward {
            graph: g,
            hidden,
            attention,
            blocks,
            noise_state,
        })
    }

    /// Tied-head vocabulary logits for `rows`.
    pub fn text_logits(&self, f: &mut Forward, rows: &[usize]) -> NodeId {
        let h = f.graph.gather(f.hidden, Arc::new(rows.to_vec()));
        let e = f.graph.param_named("text.embed");
        f.graph.matmul_nt(h, e)
    }

    /// Predicted velocity for noise `rows`. The head estimates the clean
    /// endpoint x̂₁ and the velocity follows from the path:
    /// v̂ = (x̂₁ − x_t) / (1 − t), with 1 − t floored at [`MIN_REMAINING`].
    pub fn velocity(&self, f: &mut Forward, rows: &[usize], kind: FlowKind) -> Result<NodeId> {
        let (name, dim) = match kind {
            FlowKind::Vis => ("gen.head", self.config.codec.channels),
            FlowKind::Act => ("act.head", ACTION_DIM),
        };
        let mut neg_x = Vec::with_capacity(rows.len() * dim);
        let mut inv = Vec::with_capacity(rows.len());
        for &i in rows {
            let (t, x) = f.noise_state[i]
                .as_ref()
                .ok_or_else(|| Error::Input(format!("record {i} is not a noise record")))?;
            neg_x.extend(x.iter().map(|v| -v));
            inv.push(1.0 / (1.0 - t).max(MIN_REMAINING));
        }
        let h = f.graph.gather(f.hidden, Arc::new(rows.to_vec()));
        let w = f.graph.param_named(&format!("{name}.w"));
        let b = f.graph.param_named(&format!("{name}.b"));
        let y = f.graph.matmul(h, w);
        let x1 = f.graph.add_row(y, b);
        let xt = f.graph.input(Tensor::from_vec(rows.len(), dim, neg_x));
        let diff = f.graph.add(x1, xt);
        Ok(f.graph.scale_rows(diff, Arc::new(inv)))
    }

    /// Component losses over loss-flagged records: mean CE on text (split by
    /// whether the sample is VQA), MSE on subgoal velocities, L1 on action
    /// velocities. Absent components are `None`.
    pub fn losses(&self, f: &mut Forward, batch: &NoisedBatch, vqa_samples: &BTreeSet<u32>) -> Result<LossNodes> {
        let records = &batch.packed.records;
        let mut text: [(Vec<usize>, Vec<usize>); 2] = Default::default();
        let mut vis = (Vec::new(), Vec::new());
        let mut act = (Vec::new(), Vec::new());
        for (i, r) in records.iter().enumerate().filter(|(_, r)| r.loss) {
            match r.role {
                Role::Text => {
                    let Some(Payload::Token(t)) = r.target else {
                        return Err(Error::Input(format!(
                            "record {i}: supervised text needs a token target"
                        )));
                    };
                    let k = usize::from(vqa_samples.contains(&r.sample));
                    text[k].0.push(i);
                    text[k].1.push(t as usize);
                }
                Role::VisNoise | Role::ActNoise => {
                    let v = batch.velocity[i]
                        .as_ref()
                        .ok_or_else(|| Error::Input(format!("record {i}: noise record without a velocity target")))?;
                    let dst = if r.role == Role::VisNoise { &mut vis } else { &mut act };
                    dst.0.push(i);
                    dst.1.extend_from_slice(v);
                }
                _ => {}
            }
        }
        let mut out = LossNodes::default();
        for (k, (rows, targets)) in text.into_iter().enumerate() {
            if rows.is_empty() {
                continue;
            }
            let logits = self.text_logits(f, &rows);
            let l = f.graph.cross_entropy(logits, Arc::new(targets));
            if k == 0 {
                out.ce = Some(l);
            } else {
                out.ce_vqa = Some(l);
            }
        }
        if !vis.0.is_empty() {
            let pred = self.velocity(f, &vis.0, FlowKind::Vis)?;
            let t = Tensor::from_vec(vis.0.len(), self.config.codec.channels, vis.1);
            out.mse = Some(f.graph.mse(pred, Arc::new(t)));
        }
        if !act.0.is_empty() {
            let pred = self.velocity(f, &act.0, FlowKind::Act)?;
            let t = Tensor::from_vec(act.0.len(), ACTION_DIM, act.1);
            out.l1 = Some(f.graph.l1(pred, Arc::new(t)));
        }
        Ok(out)
    }

    /// Logits for the record after `row` of a single-sample sequence.
    pub fn next_token_logits(&self, records: &[TokenRecord], opts: &MaskOptions, row: usize) -> Result<Vec<f64>> {
        let packed = PackedSequence::single(records.to_vec(), opts);
        let mut f = self.forward(&packed, &FlowTimes::new(), ForwardOptions::default())?;
        let l = self.text_logits(&mut f, &[row]);
        Ok(f.graph.value(l).data.clone())
    }

    /// Euler-integrates noise group `group` of a single-sample sequence from
    /// ε ~ N(0, I). Returns the sampled payloads in record order.
    pub fn sample_group(
        &self,
        records: &[TokenRecord],
        opts: &MaskOptions,
        group: u32,
        kind: FlowKind,
        steps: usize,
        rng: &mut impl Rng,
    ) -> Result<Vec<Vec<f64>>> {
        let rows: Vec<usize> = records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.role.is_noise() && r.group == Some(group))
            .map(|(i, _)| i)
            .collect();
        if rows.is_empty() {
            return Err(Error::Input(format!("no noise records in group {group}")));
        }
        let dim = match kind {
            FlowKind::Vis => self.config.codec.channels,
            FlowKind::Act => ACTION_DIM,
        };
        let sample = records[rows[0]].sample;
        let mask = build_attention_mask(records, opts);
        let template = PackedSequence {
            records: records.to_vec(),
            mask,
            samples: vec![(sample, 0, records.len())],
        };
        let x0: Vec<Vec<f64>> = rows.iter().map(|_| flow::standard_normal(rng, dim)).collect();
        euler(x0, steps, |x, t| {
            let mut packed = template.clone();
            for (&i, v) in rows.iter().zip(x) {
                packed.records[i].payload = Payload::Vector(v.clone());
            }
            // groups sampled earlier sit at their clean endpoint
            let mut times: FlowTimes = records
                .iter()
                .filter(|r| r.role.is_noise())
                .filter_map(|r| r.group.map(|gid| ((sample, gid), 1.0)))
                .collect();
            times.insert((sample, group), t);
            let mut f = self.forward(&packed, &times, ForwardOptions::default())?;
            let v = self.velocity(&mut f, &rows, kind)?;
            let out = f.graph.value(v);
            Ok((0..out.rows).map(|r| out.row(r).to_vec()).collect())
        })
    }
}

/// Total loss of one step as a graph node, using `weights` = (ce, ce_vqa,
/// mse, l1).
pub fn weighted_total(g: &mut Graph, nodes: &LossNodes, weights: [f64; 4]) -> Option<NodeId> {
    let terms: Vec<(NodeId, f64)> = [nodes.ce, nodes.ce_vqa, nodes.mse, nodes.l1]
        .into_iter()
        .zip(weights)
        .filter_map(|(n, w)| n.map(|n| (n, w)))
        .collect();
    (!terms.is_empty()).then(|| g.weighted_sum(terms))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn routing_table_is_total() {
        let expect = [Expert::Und, Expert::Und, Expert::Gen, Expert::Gen, Expert::Act];
        for (r, e) in Role::ALL.iter().zip(expect) {
            assert_eq!(Expert::of(*r), e);
        }
    }

    #[test]
    fn config_checks() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig {
            head_dim: 31,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
