#![allow(dead_code)]

use emcot::mot::{CodecConfig, ForwardOptions, LatentCodec, ModelConfig, MotModel};
use emcot::nn::Tensor;
use emcot::tokenstream::{FrameTokens, MaskOptions, PackedSequence, Role, SequenceBuilder, TokenRecord};
use emcot::util::rng_for;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub const ACT_DIM: usize = 8;

/// 2-layer, d=32 model over 16x16 frames with a 2x2 latent grid.
pub fn small_model(seed: u64) -> MotModel {
    let config = ModelConfig {
        d_model: 32,
        n_layers: 2,
        n_heads: 2,
        head_dim: 16,
        image_size: 16,
        und_patch: 8,
        chunk: 4,
        context_frames: 1,
        ffn_mult: 2,
        seed,
        codec: CodecConfig {
            grid: 2,
            channels: 4,
            hidden: 8,
            ..CodecConfig::default()
        },
        ..ModelConfig::default()
    };
    let codec = LatentCodec::new(config.image_size, &config.codec).unwrap();
    MotModel::new(config, codec).unwrap()
}

fn gaussian(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Text, one observed frame, a subgoal noise group, an action noise group
/// and trailing text, with random payloads and targets.
pub fn mixed_sample(model: &MotModel, sample: u32, seed: u64) -> Vec<TokenRecord> {
    let cfg = &model.config;
    let mut rng = rng_for(seed, "mixed-sample");
    let vocab = cfg.vocab_size as u32;
    let ids =
        |n: usize, rng: &mut dyn rand::RngCore| -> Vec<u32> { (0..n).map(|_| rng.random_range(0..vocab)).collect() };
    let pdim = cfg.und_patch * cfg.und_patch * 3;
    let c = cfg.codec.channels;
    let frame = FrameTokens {
        und: (0..cfg.und_patches()).map(|_| gaussian(&mut rng, pdim)).collect(),
        clean: (0..cfg.latent_cells()).map(|_| gaussian(&mut rng, c)).collect(),
    };
    let mut b = SequenceBuilder::new(sample);
    let head = ids(3, &mut rng);
    b.text(&head);
    b.frame(&frame, 0);
    let sup = ids(4, &mut rng);
    let next = ids(1, &mut rng)[0];
    b.supervised_text(&sup, next);
    let vis: Vec<Vec<f64>> = (0..cfg.latent_cells()).map(|_| gaussian(&mut rng, c)).collect();
    b.noise(Role::VisNoise, 0, &vis, c, true);
    let act: Vec<Vec<f64>> = (0..cfg.chunk).map(|_| gaussian(&mut rng, ACT_DIM)).collect();
    b.noise(Role::ActNoise, 1, &act, ACT_DIM, true);
    let tail = ids(2, &mut rng);
    b.supervised_text(&tail, next);
    b.finish()
}

/// Concatenates samples into one pack in the given order.
pub fn pack_in_order(samples: &[Vec<TokenRecord>]) -> PackedSequence {
    let mut records = Vec::new();
    let mut spans = Vec::new();
    for s in samples {
        spans.push((s[0].sample, records.len(), s.len()));
        records.extend(s.iter().cloned());
    }
    let mask = emcot::tokenstream::build_attention_mask(&records, &MaskOptions::default());
    PackedSequence {
        records,
        mask,
        samples: spans,
    }
}

/// Hidden states of every record.
pub fn hidden(
    model: &MotModel,
    packed: &PackedSequence,
    times: &emcot::mot::FlowTimes,
    opts: ForwardOptions,
) -> Tensor {
    let f = model.forward(packed, times, opts).unwrap();
    f.graph.value(f.hidden).clone()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Two packed mixed samples with noise drawn from `seed`.
pub fn fixed_batch(model: &MotModel, seed: u64) -> emcot::mot::NoisedBatch {
    let samples = vec![mixed_sample(model, 0, seed), mixed_sample(model, 1, seed + 1)];
    let packed = pack_in_order(&samples);
    emcot::mot::noise_batch(packed, &mut rng_for(seed, "fixed-noise")).unwrap()
}

/// Weighted loss with weights (ce, ce_vqa, mse, l1), plus its analytic
/// gradient when asked.
pub fn loss_and_grad(
    model: &MotModel,
    batch: &emcot::mot::NoisedBatch,
    weights: [f64; 4],
    want_grad: bool,
) -> (f64, Option<emcot::nn::Grads>) {
    let mut f = model
        .forward(&batch.packed, &batch.times, ForwardOptions::default())
        .unwrap();
    let nodes = model.losses(&mut f, batch, &Default::default()).unwrap();
    let total = emcot::mot::weighted_total(&mut f.graph, &nodes, weights).unwrap();
    let v = f.graph.value(total).item();
    (v, want_grad.then(|| f.graph.backward(total)))
}

/// Worst relative error between central differences and the analytic
/// gradient along `directions` random unit directions over all parameters.
pub fn directional_fd(model: &MotModel, weights: [f64; 4], directions: usize, seed: u64) -> f64 {
    let batch = fixed_batch(model, seed);
    let (_, grads) = loss_and_grad(model, &batch, weights, true);
    let grads = grads.unwrap();
    let mut rng = rng_for(seed, "fd-directions");
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..directions {
        let dir: Vec<Vec<f64>> = model
            .params
            .params
            .iter()
            .map(|p| gaussian(&mut rng, p.value.data.len()))
            .collect();
        let norm = dir.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
        let analytic: f64 = dir
            .iter()
            .enumerate()
            .filter_map(|(i, d)| {
                grads
                    .get(i)
                    .map(|g| g.data.iter().zip(d).map(|(a, b)| a * b).sum::<f64>())
            })
            .sum::<f64>()
            / norm;
        let shifted = |s: f64| {
            let mut m = model.clone();
            for (p, d) in m.params.params.iter_mut().zip(&dir) {
                p.value.data.iter_mut().zip(d).for_each(|(v, dv)| *v += s * dv / norm);
            }
            loss_and_grad(&m, &batch, weights, false).0
        };
        let numeric = (shifted(h) - shifted(-h)) / (2.0 * h);
        let rel = (numeric - analytic).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    worst
}

/// With identity attention, perturbs the feed-forward weights of `expert`
/// and returns (max change at other experts' rows, max change at its own).
pub fn ffn_locality(model: &MotModel, expert: emcot::mot::Expert) -> (f64, f64) {
    let batch = fixed_batch(model, 7);
    let opts = ForwardOptions {
        attention_identity: true,
    };
    let before = hidden(model, &batch.packed, &batch.times, opts);
    let mut m = model.clone();
    let mut rng = rng_for(3, "locality");
    for l in 0..m.config.n_layers {
        for name in ["w1", "b1", "w2", "b2"] {
            let id = m.params.id(&format!("layers.{l}.{}.{name}", expert.name())).unwrap();
            for v in m.params.params[id].value.data.iter_mut() {
                *v += 0.1 * gaussian(&mut rng, 1)[0];
            }
        }
    }
    let after = hidden(&m, &batch.packed, &batch.times, opts);
    let (mut other, mut own) = (0.0f64, 0.0f64);
    for (i, r) in batch.packed.records.iter().enumerate() {
        let d = max_abs_diff(before.row(i), after.row(i));
        if emcot::mot::Expert::of(r.role) == expert {
            own = own.max(d);
        } else {
            other = other.max(d);
        }
    }
    (other, own)
}

/// Pairwise attention rules written out one by one, independent of the
/// library's mask builder.
pub fn oracle_allowed(records: &[TokenRecord], i: usize, j: usize, inter_group_noise: bool) -> bool {
    let (q, k) = (&records[i], &records[j]);
    let noise = |r: &TokenRecord| matches!(r.role, Role::VisNoise | Role::ActNoise);
    let framed = |r: &TokenRecord| matches!(r.role, Role::VisUnd | Role::VisClean);
    // packing isolation
    if q.sample != k.sample {
        return false;
    }
    // records of one frame see each other in both directions
    if framed(q) && framed(k) && q.frame.is_some() && q.frame == k.frame {
        return true;
    }
    // records of one noise group see each other in both directions
    if noise(q) && noise(k) && q.group == k.group {
        return true;
    }
    // nothing outside a noise group reads noise, except earlier groups when enabled
    if noise(k) {
        return noise(q) && inter_group_noise && j < i;
    }
    // a noise group never reads its own ground truth
    if noise(q) && k.target_of.is_some() && k.target_of == q.group {
        return false;
    }
    // everything else is causal
    j <= i
}

/// Random well-formed layout of up to `max_len` records over a few samples.
pub fn random_layout(seed: u64, max_len: usize) -> Vec<TokenRecord> {
    let mut rng = rng_for(seed, "layout");
    let n = rng.random_range(1..=max_len);
    let mut out: Vec<TokenRecord> = Vec::with_capacity(n);
    let mut sample = 0u32;
    let mut position = 0u32;
    while out.len() < n {
        if !out.is_empty() && rng.random_bool(0.02) {
            sample += 1;
            position = 0;
        }
        let role = Role::ALL[rng.random_range(0..Role::ALL.len())];
        // short runs so frames and groups span several records
        let run = rng.random_range(1..=6).min(n - out.len());
        let frame = rng.random_range(0..4u32);
        let group = rng.random_range(0..3u32);
        let target_of = (role == Role::VisClean && rng.random_bool(0.5)).then(|| rng.random_range(0..3u32));
        for _ in 0..run {
            out.push(TokenRecord {
                sample,
                position,
                role,
                frame: matches!(role, Role::VisUnd | Role::VisClean).then_some(frame),
                group: role.is_noise().then_some(group),
                target_of,
                payload: emcot::tokenstream::Payload::Token(0),
                loss: false,
                target: None,
            });
            position += 1;
        }
    }
    out
}
