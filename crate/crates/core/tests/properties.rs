mod common;

use std::collections::BTreeMap;

use common::*;
use emcot::annotator::{extract_subgoals, GoalKeying};
use emcot::envsim::{Arm, EnvConfig, Level, Simulator, TaskId, TaskSpec};
use emcot::primitives::{extract_from_traces, ArmTrace, PrimitiveKind, Thresholds};
use emcot::tokenstream::{build_attention_mask, pack_samples, MaskOptions, Role, SequenceBuilder, Special, Vocabulary};
use emcot::training::{Components, LossWeights};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn mask_matches_pairwise_oracle(seed in any::<u64>(), inter in any::<bool>()) {
        let r = random_layout(seed, 256);
        let m = build_attention_mask(&r, &MaskOptions { inter_group_noise: inter });
        for i in 0..r.len() {
            for j in 0..r.len() {
                prop_assert_eq!(m.allowed(i, j), oracle_allowed(&r, i, j, inter), "({}, {})", i, j);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn no_leakage_and_text_causality(seed in any::<u64>()) {
        let r = random_layout(seed, 128);
        let m = build_attention_mask(&r, &MaskOptions::default());
        for i in 0..r.len() {
            for j in 0..r.len() {
                if !m.allowed(i, j) {
                    continue;
                }
                if r[i].role.is_noise() {
                    prop_assert!(r[j].target_of.is_none() || r[j].target_of != r[i].group);
                } else {
                    prop_assert!(!r[j].role.is_noise());
                }
                if r[i].role == Role::Text {
                    prop_assert!(j <= i);
                }
            }
        }
    }

    #[test]
    fn packs_respect_capacity(lens in proptest::collection::vec(1usize..300, 1..12)) {
        let seqs: Vec<_> = lens.iter().map(|&n| { let mut b = SequenceBuilder::new(0); b.text(&vec![1; n]); b.finish() }).collect();
        let packs = pack_samples(seqs, 512, &MaskOptions::default()).unwrap();
        let mut seen: Vec<usize> = packs.iter().flat_map(|p| p.samples.iter().map(|s| s.2)).collect();
        for p in &packs {
            prop_assert!(p.samples.iter().map(|s| s.2).sum::<usize>() <= 512);
            prop_assert_eq!(p.records.len(), p.mask.n);
        }
        let mut want = lens.clone();
        seen.sort();
        want.sort();
        prop_assert_eq!(seen, want);
    }

    #[test]
    fn tokenize_round_trips(text in "[ -~\n]{0,80}") {
        prop_assume!(!text.contains("<visual_"));
        let v = Vocabulary::standard();
        let ids = v.tokenize(&text).unwrap();
        prop_assert_eq!(v.detokenize(&ids).unwrap(), text);
    }

    #[test]
    fn weighting_is_linear_per_component(vals in proptest::array::uniform4(0.0f64..10.0), k in 0usize..4, lambda in 0.0f64..5.0) {
        for w in [LossWeights::PRETRAIN, LossWeights::FINETUNE] {
            let c = Components { ce: Some(vals[0]), ce_vqa: Some(vals[1]), mse: Some(vals[2]), l1: Some(vals[3]) };
            let mut scaled = vals;
            scaled[k] *= lambda;
            let s = Components { ce: Some(scaled[0]), ce_vqa: Some(scaled[1]), mse: Some(scaled[2]), l1: Some(scaled[3]) };
            let expect = w.total(&c) + w.as_array()[k] * vals[k] * (lambda - 1.0);
            prop_assert!((w.total(&s) - expect).abs() <= 1e-12 * (1.0 + expect.abs()));
        }
    }

    #[test]
    fn every_cell_labelled_and_idle_grows_with_velocity_threshold(
        steps in proptest::collection::vec(proptest::array::uniform3(-0.4f64..0.4), 4..60),
        vel in 0.02f64..0.3,
        bump in 0.0f64..0.3,
    ) {
        let mut pos = vec![[5.0f64, 5.0, 2.0]];
        for d in &steps {
            let p = *pos.last().unwrap();
            pos.push([p[0] + d[0], p[1] + d[1], p[2] + d[2]]);
        }
        let n = pos.len();
        let trace = ArmTrace { positions: pos.clone(), gripper: vec![1.0; n] };
        let still = ArmTrace { positions: vec![[1.0, 1.0, 1.0]; n], gripper: vec![1.0; n] };
        let traces: BTreeMap<Arm, ArmTrace> = [(Arm::Left, trace), (Arm::Right, still)].into_iter().collect();
        let idle_count = |v: f64| {
            let th = Thresholds { vel: v, ..Thresholds::default() };
            let t = extract_from_traces(&traces, &th).unwrap();
            assert_eq!(t.len(), n);
            (0..n).filter(|&f| t.get(f, Arm::Left).kind == PrimitiveKind::Idle).count()
        };
        prop_assert!(idle_count(vel + bump) >= idle_count(vel));
    }

    #[test]
    fn goal_frames_follow_runs(labels in proptest::collection::vec(0u8..4, 1..40)) {
        let names: Vec<String> = labels.iter().map(|l| format!("s{l}")).collect();
        let goals = extract_subgoals(&names, GoalKeying::ByOccurrence, false);
        prop_assert_eq!(goals.len(), names.len());
        let n = names.len();
        let mut start = 0;
        while start < n {
            let mut end = start;
            while end + 1 < n && names[end + 1] == names[start] {
                end += 1;
            }
            let want = if end + 1 < n { end + 1 } else { n - 1 };
            for t in start..=end {
                prop_assert_eq!(goals[t], want);
            }
            start = end + 1;
        }
    }

    #[test]
    fn world_stays_physical_under_random_actions(seed in 0u64..1000, acts in proptest::collection::vec(proptest::array::uniform8(-1.5f64..1.5), 1..40)) {
        let sim = Simulator::new(EnvConfig::default()).unwrap();
        let task = TaskSpec::new(TaskId::ALL[(seed % 5) as usize], Level::Hard);
        let (mut state, _) = sim.reset(&task, seed).unwrap();
        for mut a in acts {
            a[3] = (a[3] + 1.5) / 3.0;
            a[7] = (a[7] + 1.5) / 3.0;
            let (next, _, _) = sim.step(&task, &state, &a, seed).unwrap();
            for arm in Arm::BOTH {
                let (p, q) = (state.arm(arm).ee, next.arm(arm).ee);
                let d = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt();
                prop_assert!(d <= sim.config.max_speed + 1e-12);
                if let Some(id) = next.arm(arm).held {
                    let o = next.object(id).unwrap();
                    let g = o.grasp_point();
                    prop_assert!((0..3).all(|k| (g[k] - q[k]).abs() < 1e-12));
                }
            }
            state = next;
        }
    }
}

#[test]
fn special_tokens_round_trip_and_are_disjoint_from_text() {
    let v = Vocabulary::standard();
    for s in Special::ALL {
        let ids = v.tokenize(s.text()).unwrap();
        assert_eq!(ids, vec![v.special(s)]);
        assert!(!v.base_ids().contains(&ids[0]));
        assert_eq!(v.detokenize(&ids).unwrap(), s.text());
    }
}
