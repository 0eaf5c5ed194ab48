use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::world::{dist2, ArmState, ColorTag, EnvConfig, Level, Object, ShapeTag, WorldState};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskId {
    StackTwo,
    HandoverBlock,
    PlaceA2b,
    PressButton,
    SweepToZone,
}

impl TaskId {
    pub const ALL: [TaskId; 5] = [
        TaskId::StackTwo,
        TaskId::HandoverBlock,
        TaskId::PlaceA2b,
        TaskId::PressButton,
        TaskId::SweepToZone,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskId::StackTwo => "stack_two",
            TaskId::HandoverBlock => "handover_block",
            TaskId::PlaceA2b => "place_a2b",
            TaskId::PressButton => "press_button",
            TaskId::SweepToZone => "sweep_to_zone",
        }
    }

    pub fn parse(s: &str) -> Result<TaskId> {
        TaskId::ALL
            .into_iter()
            .find(|t| t.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown task id '{s}'")))
    }

    /// Object roles, in spawn order. Predicates refer to objects by index here.
    pub fn required_objects(self) -> &'static [(ColorTag, ShapeTag)] {
        match self {
            TaskId::StackTwo => &[(ColorTag::Red, ShapeTag::Block), (ColorTag::Blue, ShapeTag::Block)],
            TaskId::HandoverBlock => &[(ColorTag::Green, ShapeTag::Block)],
            TaskId::PlaceA2b => &[(ColorTag::Yellow, ShapeTag::Block), (ColorTag::Purple, ShapeTag::Block)],
            TaskId::PressButton => &[(ColorTag::Red, ShapeTag::Button)],
            TaskId::SweepToZone => &[(ColorTag::Blue, ShapeTag::Block), (ColorTag::Green, ShapeTag::Zone)],
        }
    }

    pub fn instruction_template(self) -> &'static str {
        match self {
            TaskId::StackTwo => "stack the {0} on the {1}",
            TaskId::HandoverBlock => "hand the {0} from the left arm to the right arm",
            TaskId::PlaceA2b => "place the {0} to the left of the {1}",
            TaskId::PressButton => "press the {0}",
            TaskId::SweepToZone => "sweep the {0} into the {1}",
        }
    }

    pub fn predicate(self) -> Predicate {
        match self {
            TaskId::StackTwo => Predicate::OnTop { top: 0, bottom: 1 },
            TaskId::HandoverBlock => Predicate::HeldByRight { object: 0 },
            TaskId::PlaceA2b => Predicate::LeftOf { object: 0, anchor: 1 },
            TaskId::PressButton => Predicate::Pressed { object: 0 },
            TaskId::SweepToZone => Predicate::InZone { object: 0, zone: 1 },
        }
    }
}

/// Success predicates over task-object indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Predicate {
    OnTop { top: usize, bottom: usize },
    HeldByRight { object: usize },
    LeftOf { object: usize, anchor: usize },
    Pressed { object: usize },
    InZone { object: usize, zone: usize },
}

/// Lateral offset of the "left of" placement target, in cell units.
pub const LEFT_OF_OFFSET: f64 = 2.0;
pub const ZONE_RADIUS: f64 = 1.0;

impl Predicate {
    pub fn id(&self) -> String {
        match *self {
            Predicate::OnTop { top, bottom } => format!("on_top({top},{bottom})"),
            Predicate::HeldByRight { object } => format!("held_by_right({object})"),
            Predicate::LeftOf { object, anchor } => format!("left_of({object},{anchor})"),
            Predicate::Pressed { object } => format!("pressed({object})"),
            Predicate::InZone { object, zone } => format!("in_zone({object},{zone})"),
        }
    }

    pub fn referenced(&self) -> Vec<usize> {
        match *self {
            Predicate::OnTop { top, bottom } => vec![top, bottom],
            Predicate::HeldByRight { object } | Predicate::Pressed { object } => vec![object],
            Predicate::LeftOf { object, anchor } => vec![object, anchor],
            Predicate::InZone { object, zone } => vec![object, zone],
        }
    }

    pub fn holds(&self, state: &WorldState) -> bool {
        let obj = |i: usize| &state.objects[i];
        let held = |i: usize| state.holder_of(obj(i).id).is_some();
        match *self {
            Predicate::OnTop { top, bottom } => {
                !held(top)
                    && !held(bottom)
                    && (obj(top).z - obj(bottom).top()).abs() < 1e-9
                    && dist2(obj(top).pos, obj(bottom).pos) < 1.0
            }
            Predicate::HeldByRight { object } => {
                let l = &state.arms[0];
                state.arms[1].held == Some(obj(object).id) && l.held.is_none() && l.gripper >= 0.5
            }
            Predicate::LeftOf { object, anchor } => {
                let a = obj(anchor).pos;
                let target = [a[0], a[1] + LEFT_OF_OFFSET];
                !held(object) && obj(object).z == 0.0 && dist2(obj(object).pos, target) < 0.75
            }
            Predicate::Pressed { object } => obj(object).pressed,
            Predicate::InZone { object, zone } => !held(object) && dist2(obj(object).pos, obj(zone).pos) < ZONE_RADIUS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task: TaskId,
    pub template: String,
    pub instruction: String,
    pub predicate: String,
    pub level: Level,
}

impl TaskSpec {
    pub fn new(task: TaskId, level: Level) -> Self {
        let mut instruction = task.instruction_template().to_string();
        for (i, (color, shape)) in task.required_objects().iter().enumerate() {
            instruction = instruction.replace(&format!("{{{i}}}"), &format!("{} {}", color.name(), shape.name()));
        }
        Self {
            task,
            template: task.instruction_template().to_string(),
            instruction,
            predicate: task.predicate().id(),
            level,
        }
    }

    pub fn parse(name: &str, level: Level) -> Result<Self> {
        Ok(Self::new(TaskId::parse(name)?, level))
    }

    pub fn success(&self, state: &WorldState) -> bool {
        self.task.predicate().holds(state)
    }
}

pub const LEFT_HOME: [f64; 3] = [2.0, 12.0, 3.0];
pub const RIGHT_HOME: [f64; 3] = [2.0, 4.0, 3.0];
pub const HANDOVER_POINT: [f64; 3] = [8.0, 8.0, 3.0];
pub const EASY_BACKGROUND: [u8; 3] = [200, 180, 140];

fn sample_point(rng: &mut ChaCha8Rng, x: (f64, f64), y: (f64, f64), keep_out: &[[f64; 2]], min_dist: f64) -> [f64; 2] {
    for _ in 0..1000 {
        let p = [rng.random_range(x.0..x.1), rng.random_range(y.0..y.1)];
        if keep_out.iter().all(|k| dist2(*k, p) >= min_dist) {
            return p;
        }
    }
    // The sampling boxes are large relative to the keep-out radii; this is
    // effectively unreachable but keeps generation total.
    [(x.0 + x.1) / 2.0, (y.0 + y.1) / 2.0]
}

fn object(id: u32, color: ColorTag, shape: ShapeTag, pos: [f64; 2]) -> Object {
    Object {
        id,
        color,
        shape,
        pos,
        z: 0.0,
        height: shape.height(),
        pressed: false,
        distractor: false,
    }
}

/// Task objects for a clean scene, plus points distractors must avoid.
pub(crate) fn spawn_task_objects(task: TaskId, rng: &mut ChaCha8Rng) -> (Vec<Object>, Vec<[f64; 2]>) {
    let roles = task.required_objects();
    let mut keep_out = vec![[LEFT_HOME[0], LEFT_HOME[1]], [RIGHT_HOME[0], RIGHT_HOME[1]]];
    let positions: Vec<[f64; 2]> = match task {
        TaskId::StackTwo => {
            let a = sample_point(rng, (4.0, 13.0), (3.0, 13.0), &keep_out, 2.5);
            let b = sample_point(
                rng,
                (4.0, 13.0),
                (3.0, 13.0),
                &[keep_out.clone(), vec![a]].concat(),
                3.0,
            );
            vec![a, b]
        }
        TaskId::HandoverBlock => {
            let a = sample_point(rng, (4.0, 11.0), (10.5, 13.5), &keep_out, 2.5);
            keep_out.push([HANDOVER_POINT[0], HANDOVER_POINT[1]]);
            vec![a]
        }
        TaskId::PlaceA2b => {
            let anchor = sample_point(rng, (4.0, 12.0), (3.0, 11.0), &keep_out, 2.5);
            let target = [anchor[0], anchor[1] + LEFT_OF_OFFSET];
            let a = sample_point(
                rng,
                (4.0, 13.0),
                (3.0, 13.0),
                &[keep_out.clone(), vec![anchor, target]].concat(),
                3.0,
            );
            keep_out.push(target);
            vec![a, anchor]
        }
        TaskId::PressButton => vec![sample_point(rng, (4.0, 12.0), (3.5, 12.5), &keep_out, 2.5)],
        TaskId::SweepToZone => {
            let b = sample_point(rng, (3.5, 7.0), (4.0, 12.0), &keep_out, 2.5);
            let z = [
                (b[0] + rng.random_range(4.0..6.0)).min(14.0),
                (b[1] + rng.random_range(-2.0..2.0)).clamp(2.0, 14.0),
            ];
            for k in 0..=10 {
                let t = k as f64 / 10.0;
                keep_out.push([b[0] + (z[0] - b[0]) * t, b[1] + (z[1] - b[1]) * t]);
            }
            vec![b, z]
        }
    };
    let objects = roles
        .iter()
        .zip(positions)
        .enumerate()
        .map(|(i, ((c, s), p))| object(i as u32, *c, *s, p))
        .collect::<Vec<_>>();
    keep_out.extend(objects.iter().map(|o| o.pos));
    (objects, keep_out)
}

pub(crate) fn build_state(
    config: &EnvConfig,
    task: &TaskSpec,
    base_rng: &mut ChaCha8Rng,
    hard_rng: &mut ChaCha8Rng,
) -> WorldState {
    let (mut objects, keep_out) = spawn_task_objects(task.task, base_rng);
    let mut arms = [
        ArmState {
            ee: LEFT_HOME,
            gripper: 1.0,
            held: None,
        },
        ArmState {
            ee: RIGHT_HOME,
            gripper: 1.0,
            held: None,
        },
    ];
    let mut background = EASY_BACKGROUND;

    if task.level == Level::Hard {
        let n = hard_rng.random_range(1..=config.hard_max_distractors.max(1));
        let palette = [ColorTag::Orange, ColorTag::Cyan];
        let mut avoid = keep_out.clone();
        for k in 0..n {
            let p = sample_point(hard_rng, (2.5, 13.5), (2.5, 13.5), &avoid, 2.5);
            avoid.push(p);
            let mut o = object(
                objects.len() as u32,
                palette[k as usize % palette.len()],
                ShapeTag::Block,
                p,
            );
            o.distractor = true;
            objects.push(o);
        }
        let s = config.hard_background_shift;
        let mut shift = [0i32; 3];
        for v in shift.iter_mut() {
            *v = hard_rng.random_range(-s..=s);
        }
        if shift.iter().sum::<i32>() == 0 {
            shift[0] += 15;
        }
        for i in 0..3 {
            background[i] = (background[i] as i32 + shift[i]).clamp(0, 255) as u8;
        }
        let j = config.hard_pose_jitter;
        for arm in arms.iter_mut() {
            for v in arm.ee.iter_mut() {
                *v += hard_rng.random_range(-j..=j);
            }
        }
    }

    WorldState {
        objects,
        arms,
        step: 0,
        background,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn instructions_mention_every_referenced_object() {
        for task in TaskId::ALL {
            let spec = TaskSpec::new(task, Level::Easy);
            for i in task.predicate().referenced() {
                let (c, s) = task.required_objects()[i];
                let name = format!("{} {}", c.name(), s.name());
                assert!(spec.instruction.contains(&name), "{}: {}", spec.instruction, name);
            }
        }
    }

    #[test]
    fn unknown_task_is_config_error() {
        assert!(matches!(TaskId::parse("juggle"), Err(Error::Config(_))));
        assert_eq!(TaskId::parse("stack_two").unwrap(), TaskId::StackTwo);
    }
}
