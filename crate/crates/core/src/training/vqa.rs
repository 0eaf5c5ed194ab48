//! Scene questions answerable from the world state, rendered alongside the
//! image they ask about.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::envsim::{dist2, Arm, Image, Level, ScriptedExpert, ShapeTag, Simulator, TaskId, TaskSpec, WorldState};
use crate::error::Result;
use crate::util::rng_for;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqaItem {
    pub image: Image,
    pub question: String,
    pub answer: String,
}

const NUMBERS: [&str; 6] = ["zero", "one", "two", "three", "four", "five"];

fn yes_no(b: bool) -> String {
    if b { "yes" } else { "no" }.to_string()
}

/// Every question the generator can ask about `state`, with answers.
pub fn scene_questions(state: &WorldState, table_size: f64) -> Vec<(String, String)> {
    let mid = table_size / 2.0;
    let mut out = Vec::new();
    let blocks: Vec<_> = state.objects.iter().filter(|o| o.shape == ShapeTag::Block).collect();
    if blocks.len() < NUMBERS.len() {
        out.push((
            "How many blocks are there?".to_string(),
            NUMBERS[blocks.len()].to_string(),
        ));
    }
    for o in &state.objects {
        let name = o.name();
        out.push((
            format!("Is the {name} in the left half of the table?"),
            yes_no(o.pos[1] > mid),
        ));
        out.push((
            format!("Is the {name} in the front half of the table?"),
            yes_no(o.pos[0] > mid),
        ));
        if o.shape == ShapeTag::Button {
            out.push((format!("Is the {name} pressed?"), yes_no(o.pressed)));
        }
    }
    for arm in Arm::BOTH {
        let a = state.arm(arm);
        let held = a
            .held
            .and_then(|id| state.object(id))
            .map_or("nothing".to_string(), |o| format!("the {}", o.name()));
        out.push((format!("What is held by the {} arm?", arm.name()), held));
        let ee = [a.ee[0], a.ee[1]];
        if let Some(o) = blocks
            .iter()
            .filter(|o| Some(o.id) != a.held)
            .min_by(|x, y| dist2(x.pos, ee).total_cmp(&dist2(y.pos, ee)))
        {
            out.push((
                format!("What color is the block nearest the {} arm?", arm.name()),
                o.color.name().to_string(),
            ));
        }
    }
    out
}

/// `count` questions over scenes drawn from every task at both levels,
/// with the scripted expert advanced a random number of steps so that held
/// and pressed states appear.
pub fn generate_vqa(sim: &Simulator, count: usize, seed: u64) -> Result<Vec<VqaItem>> {
    let mut items = Vec::with_capacity(count);
    for k in 0..count {
        let mut rng = rng_for(seed, &format!("vqa/{k}"));
        let task = TaskId::ALL[rng.random_range(0..TaskId::ALL.len())];
        let level = if rng.random_bool(0.5) { Level::Easy } else { Level::Hard };
        let spec = TaskSpec::new(task, level);
        let ep_seed = rng.random_range(0..1_000_000u64);
        let (mut state, mut obs) = sim.reset(&spec, ep_seed)?;
        let mut expert = ScriptedExpert::new(&sim.config, &spec, &state)?;
        let steps = rng.random_range(0..60);
        for _ in 0..steps {
            let action = expert.act(&state);
            let (next, o, done) = sim.step(&spec, &state, &action, ep_seed)?;
            state = next;
            obs = o;
            if done {
                break;
            }
        }
        let qs = scene_questions(&state, sim.config.table_size);
        let (q, a) = qs.choose(&mut rng).expect("every scene has questions").clone();
        items.push(VqaItem {
            image: obs.image,
            question: q,
            answer: a,
        });
    }
    Ok(items)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envsim::EnvConfig;
    use crate::tokenstream::Vocabulary;

    #[test]
    fn questions_are_tokenizable_and_deterministic() {
        let sim = Simulator::new(EnvConfig::default()).unwrap();
        let a = generate_vqa(&sim, 12, 5).unwrap();
        let b = generate_vqa(&sim, 12, 5).unwrap();
        assert_eq!(a, b);
        let v = Vocabulary::standard();
        for it in &a {
            v.tokenize(&it.question).unwrap();
            v.tokenize(&it.answer).unwrap();
        }
    }

    #[test]
    fn held_answer() {
        let sim = Simulator::new(EnvConfig::default()).unwrap();
        let spec = TaskSpec::new(TaskId::StackTwo, Level::Easy);
        let (mut state, _) = sim.reset(&spec, 1).unwrap();
        state.arms[0].held = Some(state.objects[0].id);
        let qs = scene_questions(&state, 16.0);
        let held = qs.iter().find(|(q, _)| q == "What is held by the left arm?").unwrap();
        assert_eq!(held.1, "the red block");
        assert!(qs.contains(&("How many blocks are there?".into(), "two".into())));
    }
}
