use serde::{Deserialize, Serialize};

use super::tasks::{TaskId, TaskSpec, HANDOVER_POINT, LEFT_OF_OFFSET};
use super::world::{Action, Arm, EnvConfig, WorldState, ACTION_DIM};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
enum Phase {
    Subtask(usize),
    Move { arm: Arm, target: [f64; 3] },
    Hold(u32),
    Gripper { arm: Arm, open: bool },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Grasp,
    Release,
}

/// A gripper command issued by the expert at a given frame.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertEvent {
    pub frame: usize,
    pub arm: Arm,
    pub kind: EventKind,
}

/// Waypoint-following controller. Every movement phase is followed by an idle
/// hold of `EnvConfig::expert_hold` frames so motion segments stay separable.
#[derive(Debug, Clone)]
pub struct ScriptedExpert {
    phases: Vec<Phase>,
    cursor: usize,
    hold_left: Option<u32>,
    plan: Vec<String>,
    starts: Vec<(usize, usize)>,
    events: Vec<ExpertEvent>,
    max_speed: f64,
}

fn arm_for(y: f64) -> Arm {
    if y >= 8.0 {
        Arm::Left
    } else {
        Arm::Right
    }
}

impl ScriptedExpert {
    pub fn new(config: &EnvConfig, task: &TaskSpec, state: &WorldState) -> Result<Self> {
        if task.success(state) {
            return Err(Error::ExpertRefused("task already satisfied".into()));
        }
        let n_required = task.task.required_objects().len();
        if state.objects.len() < n_required {
            return Err(Error::ExpertRefused("scene is missing task objects".into()));
        }
        for o in &state.objects[..n_required] {
            if state.holder_of(o.id).is_some() || o.z != 0.0 {
                return Err(Error::ExpertRefused(format!(
                    "{} is not resting on the table",
                    o.name()
                )));
            }
        }
        for a in &state.arms {
            if a.held.is_some() || a.gripper < 0.5 {
                return Err(Error::ExpertRefused("arms must start empty and open".into()));
            }
        }

        let hold = Phase::Hold(config.expert_hold);
        let tz = config.travel_z;
        let obj = |i: usize| &state.objects[i];
        let mut p = Vec::new();
        let plan: Vec<String>;

        let pick = |p: &mut Vec<Phase>, arm: Arm, i: usize| {
            let o = obj(i);
            p.push(Phase::Move {
                arm,
                target: [o.pos[0], o.pos[1], tz],
            });
            p.push(hold.clone());
            p.push(Phase::Move {
                arm,
                target: o.grasp_point(),
            });
            p.push(hold.clone());
            p.push(Phase::Gripper { arm, open: false });
            p.push(hold.clone());
            p.push(Phase::Move {
                arm,
                target: [o.pos[0], o.pos[1], tz],
            });
            p.push(hold.clone());
        };

        match task.task {
            TaskId::StackTwo => {
                let (red, blue) = (obj(0), obj(1));
                let arm = arm_for(red.pos[1]);
                plan = vec!["Pick up the red block".into(), "Stack it on the blue block".into()];
                p.push(Phase::Subtask(0));
                pick(&mut p, arm, 0);
                p.push(Phase::Subtask(1));
                p.push(Phase::Move {
                    arm,
                    target: [blue.pos[0], blue.pos[1], tz],
                });
                p.push(hold.clone());
                p.push(Phase::Move {
                    arm,
                    target: [blue.pos[0], blue.pos[1], blue.top() + red.height],
                });
                p.push(hold.clone());
                p.push(Phase::Gripper { arm, open: true });
            }
            TaskId::HandoverBlock => {
                plan = vec![
                    "Pick up the green block with the left arm".into(),
                    "Pass the green block to the right arm".into(),
                ];
                p.push(Phase::Subtask(0));
                pick(&mut p, Arm::Left, 0);
                p.push(Phase::Subtask(1));
                p.push(Phase::Move {
                    arm: Arm::Left,
                    target: HANDOVER_POINT,
                });
                p.push(hold.clone());
                p.push(Phase::Move {
                    arm: Arm::Right,
                    target: HANDOVER_POINT,
                });
                p.push(hold.clone());
                p.push(Phase::Gripper {
                    arm: Arm::Right,
                    open: false,
                });
                p.push(hold.clone());
                p.push(Phase::Gripper {
                    arm: Arm::Left,
                    open: true,
                });
            }
            TaskId::PlaceA2b => {
                let (a, anchor) = (obj(0), obj(1));
                let arm = arm_for(a.pos[1]);
                let target = [anchor.pos[0], anchor.pos[1] + LEFT_OF_OFFSET];
                plan = vec![
                    "Pick up the yellow block".into(),
                    "Place it to the left of the purple block".into(),
                ];
                p.push(Phase::Subtask(0));
                pick(&mut p, arm, 0);
                p.push(Phase::Subtask(1));
                p.push(Phase::Move {
                    arm,
                    target: [target[0], target[1], tz],
                });
                p.push(hold.clone());
                p.push(Phase::Move {
                    arm,
                    target: [target[0], target[1], a.height],
                });
                p.push(hold.clone());
                p.push(Phase::Gripper { arm, open: true });
            }
            TaskId::PressButton => {
                let b = obj(0);
                let arm = arm_for(b.pos[1]);
                plan = vec!["Reach above the red button".into(), "Press the red button".into()];
                p.push(Phase::Subtask(0));
                p.push(Phase::Move {
                    arm,
                    target: [b.pos[0], b.pos[1], tz],
                });
                p.push(hold.clone());
                p.push(Phase::Gripper { arm, open: false });
                p.push(hold.clone());
                p.push(Phase::Subtask(1));
                p.push(Phase::Move {
                    arm,
                    target: [b.pos[0], b.pos[1], b.top()],
                });
                p.push(hold.clone());
            }
            TaskId::SweepToZone => {
                let (b, zone) = (obj(0), obj(1));
                let arm = arm_for(b.pos[1]);
                let dir = [zone.pos[0] - b.pos[0], zone.pos[1] - b.pos[1]];
                let len = (dir[0] * dir[0] + dir[1] * dir[1]).sqrt();
                if len < 1e-6 {
                    return Err(Error::ExpertRefused("block already at the zone centre".into()));
                }
                let u = [dir[0] / len, dir[1] / len];
                let standoff = 1.2;
                let behind = [b.pos[0] - u[0] * standoff, b.pos[1] - u[1] * standoff];
                let goal = [zone.pos[0] - u[0] * standoff, zone.pos[1] - u[1] * standoff];
                let low = 0.5 * b.height;
                plan = vec![
                    "Lower the arm behind the blue block".into(),
                    "Push the blue block into the green zone".into(),
                ];
                p.push(Phase::Subtask(0));
                p.push(Phase::Move {
                    arm,
                    target: [behind[0], behind[1], tz],
                });
                p.push(hold.clone());
                p.push(Phase::Gripper { arm, open: false });
                p.push(hold.clone());
                p.push(Phase::Move {
                    arm,
                    target: [behind[0], behind[1], low],
                });
                p.push(hold.clone());
                p.push(Phase::Subtask(1));
                p.push(Phase::Move {
                    arm,
                    target: [goal[0], goal[1], low],
                });
                p.push(hold.clone());
            }
        }

        Ok(Self {
            phases: p,
            cursor: 0,
            hold_left: None,
            plan,
            starts: Vec::new(),
            events: Vec::new(),
            max_speed: config.max_speed,
        })
    }

    pub fn plan(&self) -> &[String] {
        &self.plan
    }

    /// `(subtask index, first frame)` for every subtask entered so far.
    pub fn subtask_starts(&self) -> &[(usize, usize)] {
        &self.starts
    }

    pub fn events(&self) -> &[ExpertEvent] {
        &self.events
    }

    pub fn finished(&self) -> bool {
        self.cursor >= self.phases.len()
    }

    fn hold_action(state: &WorldState) -> Action {
        let mut a = [0.0; ACTION_DIM];
        a[3] = if state.arms[0].gripper >= 0.5 { 1.0 } else { 0.0 };
        a[7] = if state.arms[1].gripper >= 0.5 { 1.0 } else { 0.0 };
        a
    }

    /// Next action for the given state. Frame indices come from `state.step`.
    pub fn act(&mut self, state: &WorldState) -> Action {
        let frame = state.step as usize;
        let mut action = Self::hold_action(state);
        while self.cursor < self.phases.len() {
            match self.phases[self.cursor].clone() {
                Phase::Subtask(i) => {
                    self.starts.push((i, frame));
                    self.cursor += 1;
                }
                Phase::Move { arm, target } => {
                    let ee = state.arm(arm).ee;
                    let d = [target[0] - ee[0], target[1] - ee[1], target[2] - ee[2]];
                    let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                    if norm < 1e-9 {
                        self.cursor += 1;
                        continue;
                    }
                    let s = if norm > self.max_speed {
                        self.max_speed / norm
                    } else {
                        1.0
                    };
                    let base = arm.index() * 4;
                    for k in 0..3 {
                        action[base + k] = d[k] * s;
                    }
                    return action;
                }
                Phase::Hold(n) => {
                    let left = self.hold_left.get_or_insert(n);
                    if *left == 0 {
                        self.hold_left = None;
                        self.cursor += 1;
                        continue;
                    }
                    *left -= 1;
                    return action;
                }
                Phase::Gripper { arm, open } => {
                    action[arm.index() * 4 + 3] = if open { 1.0 } else { 0.0 };
                    self.events.push(ExpertEvent {
                        frame,
                        arm,
                        kind: if open { EventKind::Release } else { EventKind::Grasp },
                    });
                    self.cursor += 1;
                    return action;
                }
            }
        }
        action
    }
}
