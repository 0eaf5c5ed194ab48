mod common;

use std::collections::BTreeSet;

use common::*;
use emcot::mot::checkpoint::{self, CheckpointMeta};
use emcot::mot::{Expert, FlowTimes, ForwardOptions};
use emcot::nn::AdamW;
use emcot::tokenstream::{MaskOptions, SequenceBuilder};
use emcot::training::{batch_loss, LossWeights};
use emcot::util::rng_for;
use rand::Rng;

#[test]
fn gradients_match_central_differences() {
    let model = small_model(1);
    for (name, w) in [
        ("ce", [1.0, 0.0, 0.0, 0.0]),
        ("mse", [0.0, 0.0, 1.0, 0.0]),
        ("l1", [0.0, 0.0, 0.0, 1.0]),
        ("all", [0.25, 0.25, 0.5, 1.0]),
    ] {
        let rel = directional_fd(&model, w, 4, 11);
        assert!(rel <= 1e-4, "{name}: relative error {rel:e}");
    }
}

#[test]
fn feed_forward_perturbation_stays_in_its_expert() {
    let model = small_model(2);
    for e in Expert::ALL {
        let (other, own) = ffn_locality(&model, e);
        assert_eq!(other, 0.0, "{} leaked", e.name());
        assert!(own > 1e-6, "{} perturbation had no effect", e.name());
    }
}

#[test]
fn expert_parameter_groups_partition_layer_parameters() {
    let model = small_model(0);
    let groups: Vec<BTreeSet<String>> = Expert::ALL
        .iter()
        .map(|&e| model.expert_params(e).into_iter().collect())
        .collect();
    for i in 0..3 {
        for j in i + 1..3 {
            assert!(groups[i].is_disjoint(&groups[j]));
        }
    }
    let union: BTreeSet<String> = groups.iter().flatten().cloned().collect();
    let layer: BTreeSet<String> = model
        .params
        .params
        .iter()
        .map(|p| p.name.clone())
        .filter(|n| n.starts_with("layers."))
        .collect();
    assert_eq!(union, layer);
    for g in &groups {
        for n in g {
            assert!(model.params.id(n).is_some(), "{n} not registered");
        }
    }
}

#[test]
fn packing_order_does_not_change_outputs() {
    let model = small_model(4);
    let a = mixed_sample(&model, 0, 20);
    let b = mixed_sample(&model, 1, 21);
    let mut times = FlowTimes::new();
    for (s, g, t) in [(0, 0, 0.3), (0, 1, 0.7), (1, 0, 0.1), (1, 1, 0.9)] {
        times.insert((s, g), t);
    }
    let ab = hidden(
        &model,
        &pack_in_order(&[a.clone(), b.clone()]),
        &times,
        ForwardOptions::default(),
    );
    let ba = hidden(
        &model,
        &pack_in_order(&[b.clone(), a.clone()]),
        &times,
        ForwardOptions::default(),
    );
    let (na, nb) = (a.len(), b.len());
    let mut worst: f64 = 0.0;
    for i in 0..na {
        worst = worst.max(max_abs_diff(ab.row(i), ba.row(nb + i)));
    }
    for i in 0..nb {
        worst = worst.max(max_abs_diff(ab.row(na + i), ba.row(i)));
    }
    assert!(worst <= 1e-12, "max deviation {worst:e}");
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let model = small_model(5);
    let batch = fixed_batch(&model, 3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let opt = AdamW::new(&model.params, 1e-3, 10, 0.0);
    checkpoint::save(&path, &model, Some(&opt), &CheckpointMeta::default()).unwrap();
    let (back, opt_back, _) = checkpoint::load(&path, Some(&model.config)).unwrap();
    assert_eq!(back, model);
    assert_eq!(opt_back.unwrap(), opt);
    let h0 = hidden(&model, &batch.packed, &batch.times, ForwardOptions::default());
    let h1 = hidden(&back, &batch.packed, &batch.times, ForwardOptions::default());
    assert!(h0.data.iter().zip(&h1.data).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn teacher_forced_copy_task() {
    let mut model = small_model(6);
    let symbols = 6u32;
    let sep = symbols;
    let sample = |rng: &mut rand_chacha::ChaCha8Rng, id: u32| {
        let s: Vec<u32> = (0..4).map(|_| rng.random_range(0..symbols)).collect();
        let mut b = SequenceBuilder::new(id);
        b.text(&s);
        // from the separator on, each record predicts the next copied symbol
        b.supervised_text(&[sep, s[0], s[1], s[2]], s[3]);
        b.finish()
    };
    let mut opt = AdamW::new(&model.params, 3e-3, 50, 0.0);
    let weights = LossWeights {
        ce: 1.0,
        mse: 1.0,
        l1: 1.0,
    };
    let mask = MaskOptions::default();
    let mut last = f64::INFINITY;
    for step in 0..1500u64 {
        let mut rng = rng_for(9, &format!("copy/{step}"));
        let seqs: Vec<_> = (0..16).map(|i| sample(&mut rng, i)).collect();
        let (total, _, grads) = batch_loss(&model, seqs, &BTreeSet::new(), &weights, &mask, 4096, &mut rng).unwrap();
        opt.update(&mut model.params, &grads);
        last = total;
    }
    let mut rng = rng_for(10, "copy/eval");
    let seqs: Vec<_> = (0..64).map(|i| sample(&mut rng, i)).collect();
    let (ce, _, _) = batch_loss(&model, seqs, &BTreeSet::new(), &weights, &mask, 4096, &mut rng).unwrap();
    assert!(ce < 0.1, "held-out copy CE {ce} (last train {last})");
}
