use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Physical and rendering constants for the tabletop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    /// Side length of the square table, in cell units.
    pub table_size: f64,
    pub z_max: f64,
    /// Cruise height used by the scripted expert between objects.
    pub travel_z: f64,
    pub image_size: usize,
    pub step_limit: u32,
    pub grasp_radius: f64,
    /// Maximum end-effector displacement per step (Euclidean).
    pub max_speed: f64,
    pub push_radius: f64,
    /// Frames the scripted expert holds still between movement phases.
    pub expert_hold: u32,
    pub hard_max_distractors: u32,
    pub hard_background_shift: i32,
    pub hard_pose_jitter: f64,
    /// Amplitude of per-pixel render noise driven by the render seed.
    pub pixel_noise: u8,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            table_size: 16.0,
            z_max: 6.0,
            travel_z: 3.0,
            image_size: 64,
            step_limit: 200,
            grasp_radius: 1.5,
            max_speed: 0.5,
            push_radius: 0.9,
            expert_hold: 4,
            hard_max_distractors: 2,
            hard_background_shift: 40,
            hard_pose_jitter: 0.5,
            pixel_noise: 0,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.table_size <= 0.0 || self.z_max <= 0.0 {
            return Err(Error::Config("table dimensions must be positive".into()));
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(16) {
            return Err(Error::Config("image_size must be a positive multiple of 16".into()));
        }
        if self.max_speed <= 0.0 || self.grasp_radius <= 0.0 {
            return Err(Error::Config("max_speed and grasp_radius must be positive".into()));
        }
        if self.step_limit < 2 {
            return Err(Error::Config("step_limit must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColorTag {
    Red,
    Blue,
    Green,
    Yellow,
    Purple,
    Orange,
    Cyan,
}

impl ColorTag {
    pub fn rgb(self) -> [u8; 3] {
        match self {
            ColorTag::Red => [220, 40, 40],
            ColorTag::Blue => [40, 70, 220],
            ColorTag::Green => [40, 170, 60],
            ColorTag::Yellow => [230, 210, 40],
            ColorTag::Purple => [140, 50, 170],
            ColorTag::Orange => [240, 130, 20],
            ColorTag::Cyan => [40, 200, 210],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ColorTag::Red => "red",
            ColorTag::Blue => "blue",
            ColorTag::Green => "green",
            ColorTag::Yellow => "yellow",
            ColorTag::Purple => "purple",
            ColorTag::Orange => "orange",
            ColorTag::Cyan => "cyan",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeTag {
    Block,
    Button,
    Zone,
}

impl ShapeTag {
    pub fn name(self) -> &'static str {
        match self {
            ShapeTag::Block => "block",
            ShapeTag::Button => "button",
            ShapeTag::Zone => "zone",
        }
    }

    pub fn height(self) -> f64 {
        match self {
            ShapeTag::Block => 1.0,
            ShapeTag::Button => 0.5,
            ShapeTag::Zone => 0.0,
        }
    }

    pub fn graspable(self) -> bool {
        matches!(self, ShapeTag::Block)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Object {
    pub id: u32,
    pub color: ColorTag,
    pub shape: ShapeTag,
    /// Table-plane position (x forward, y left).
    pub pos: [f64; 2],
    /// Height of the object's bottom face above the table.
    pub z: f64,
    pub height: f64,
    #[serde(default)]
    pub pressed: bool,
    /// Task objects come first; distractors are only added at the hard level.
    #[serde(default)]
    pub distractor: bool,
}

impl Object {
    pub fn top(&self) -> f64 {
        self.z + self.height
    }

    pub fn name(&self) -> String {
        format!("{} {}", self.color.name(), self.shape.name())
    }

    pub fn grasp_point(&self) -> [f64; 3] {
        [self.pos[0], self.pos[1], self.top()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Left,
    Right,
}

impl Arm {
    pub const BOTH: [Arm; 2] = [Arm::Left, Arm::Right];

    pub fn index(self) -> usize {
        match self {
            Arm::Left => 0,
            Arm::Right => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Arm::Left => "left",
            Arm::Right => "right",
        }
    }

    pub fn other(self) -> Arm {
        match self {
            Arm::Left => Arm::Right,
            Arm::Right => Arm::Left,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmState {
    pub ee: [f64; 3],
    /// 1 is fully open, 0 is closed.
    pub gripper: f64,
    pub held: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Easy,
    Hard,
}

impl Level {
    pub fn name(self) -> &'static str {
        match self {
            Level::Easy => "easy",
            Level::Hard => "hard",
        }
    }

    pub fn parse(s: &str) -> Result<Level> {
        match s.trim() {
            "easy" => Ok(Level::Easy),
            "hard" => Ok(Level::Hard),
            other => Err(Error::Config(format!("unknown randomization level '{other}'"))),
        }
    }
}

/// Dimension of the per-step action: per arm (dx, dy, dz, gripper target).
pub const ACTION_DIM: usize = 8;
/// Proprioception layout: (P^l, G^l, P^r, G^r).
pub const PROPRIO_DIM: usize = 8;

pub type Action = [f64; ACTION_DIM];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub objects: Vec<Object>,
    pub arms: [ArmState; 2],
    pub step: u32,
    pub background: [u8; 3],
}

impl WorldState {
    pub fn arm(&self, arm: Arm) -> &ArmState {
        &self.arms[arm.index()]
    }

    pub fn object(&self, id: u32) -> Option<&Object> {
        self.objects.iter().find(|o| o.id == id)
    }

    pub fn holder_of(&self, id: u32) -> Option<Arm> {
        Arm::BOTH.into_iter().find(|a| self.arm(*a).held == Some(id))
    }

    pub fn proprio(&self) -> [f64; PROPRIO_DIM] {
        let l = &self.arms[0];
        let r = &self.arms[1];
        [
            l.ee[0], l.ee[1], l.ee[2], l.gripper, r.ee[0], r.ee[1], r.ee[2], r.gripper,
        ]
    }
}

pub fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

pub fn dist3(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Height an object released at `pos` comes to rest at.
fn support_height(objects: &[Object], pos: [f64; 2], exclude: u32, held: &[u32]) -> f64 {
    objects
        .iter()
        .filter(|o| o.id != exclude && !held.contains(&o.id) && o.shape == ShapeTag::Block)
        .filter(|o| (o.pos[0] - pos[0]).abs() < 1.0 && (o.pos[1] - pos[1]).abs() < 1.0)
        .map(Object::top)
        .fold(0.0, f64::max)
}

/// Advances the world by one action. Success and step-limit checks are left to
/// the caller, which knows the task.
pub(crate) fn apply_action(config: &EnvConfig, state: &WorldState, action: &Action) -> Result<WorldState> {
    if action.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("action contains a non-finite value".into()));
    }
    let mut next = state.clone();
    let lim = config.table_size;
    let mut deltas = [[0.0f64; 2]; 2];

    for arm in Arm::BOTH {
        let i = arm.index();
        let base = i * 4;
        let mut d = [action[base], action[base + 1], action[base + 2]];
        let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        if norm > config.max_speed {
            let s = config.max_speed / norm;
            d.iter_mut().for_each(|v| *v *= s);
        }
        let old = next.arms[i].ee;
        let ee = [
            (old[0] + d[0]).clamp(0.0, lim),
            (old[1] + d[1]).clamp(0.0, lim),
            (old[2] + d[2]).clamp(0.0, config.z_max),
        ];
        deltas[i] = [ee[0] - old[0], ee[1] - old[1]];
        next.arms[i].ee = ee;

        let old_g = next.arms[i].gripper;
        let new_g = action[base + 3].clamp(0.0, 1.0);
        next.arms[i].gripper = new_g;

        if old_g >= 0.5 && new_g < 0.5 && next.arms[i].held.is_none() {
            let candidate = next
                .objects
                .iter()
                .filter(|o| o.shape.graspable())
                .filter(|o| dist2(o.pos, [ee[0], ee[1]]) <= config.grasp_radius)
                .filter(|o| ee[2] <= o.top() + 0.5 && ee[2] >= o.z)
                .min_by(|a, b| dist2(a.pos, [ee[0], ee[1]]).total_cmp(&dist2(b.pos, [ee[0], ee[1]])))
                .map(|o| o.id);
            if let Some(id) = candidate {
                let other = arm.other().index();
                if next.arms[other].held == Some(id) {
                    next.arms[other].held = None;
                }
                next.arms[i].held = Some(id);
            }
        } else if old_g < 0.5 && new_g >= 0.5 {
            if let Some(id) = next.arms[i].held.take() {
                let held: Vec<u32> = next.arms.iter().filter_map(|a| a.held).collect();
                let z = support_height(&next.objects, [ee[0], ee[1]], id, &held);
                if let Some(o) = next.objects.iter_mut().find(|o| o.id == id) {
                    o.pos = [ee[0], ee[1]];
                    o.z = z;
                }
            }
        }
    }

    // Held objects hang from their end-effector (grasp point == ee).
    for arm in Arm::BOTH {
        let a = next.arms[arm.index()].clone();
        if let Some(id) = a.held {
            if let Some(o) = next.objects.iter_mut().find(|o| o.id == id) {
                o.pos = [a.ee[0], a.ee[1]];
                o.z = a.ee[2] - o.height;
            }
        }
    }

    let held: Vec<u32> = next.arms.iter().filter_map(|a| a.held).collect();
    for arm in Arm::BOTH {
        let a = next.arms[arm.index()].clone();
        let d = deltas[arm.index()];
        for o in next.objects.iter_mut() {
            if held.contains(&o.id) {
                continue;
            }
            match o.shape {
                ShapeTag::Button => {
                    if a.gripper < 0.5 && dist2(o.pos, [a.ee[0], a.ee[1]]) <= 1.0 && a.ee[2] <= o.top() + 0.25 {
                        o.pressed = true;
                    }
                }
                ShapeTag::Block => {
                    let moving = d[0] != 0.0 || d[1] != 0.0;
                    if moving && a.ee[2] < o.top() && dist2(o.pos, [a.ee[0], a.ee[1]]) < config.push_radius {
                        o.pos = [(o.pos[0] + d[0]).clamp(0.0, lim), (o.pos[1] + d[1]).clamp(0.0, lim)];
                    }
                }
                ShapeTag::Zone => {}
            }
        }
    }

    next.step += 1;
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_block_world() -> WorldState {
        WorldState {
            objects: vec![
                Object {
                    id: 0,
                    color: ColorTag::Red,
                    shape: ShapeTag::Block,
                    pos: [6.0, 10.0],
                    z: 0.0,
                    height: 1.0,
                    pressed: false,
                    distractor: false,
                },
                Object {
                    id: 1,
                    color: ColorTag::Blue,
                    shape: ShapeTag::Block,
                    pos: [10.0, 6.0],
                    z: 0.0,
                    height: 1.0,
                    pressed: false,
                    distractor: false,
                },
            ],
            arms: [
                ArmState {
                    ee: [2.0, 12.0, 3.0],
                    gripper: 1.0,
                    held: None,
                },
                ArmState {
                    ee: [2.0, 4.0, 3.0],
                    gripper: 1.0,
                    held: None,
                },
            ],
            step: 0,
            background: [200, 180, 140],
        }
    }

    #[test]
    fn zero_action_only_advances_step() {
        let cfg = EnvConfig::default();
        let s = two_block_world();
        let mut a = [0.0; ACTION_DIM];
        a[3] = 1.0;
        a[7] = 1.0;
        let n = apply_action(&cfg, &s, &a).unwrap();
        let mut expected = s.clone();
        expected.step = 1;
        assert_eq!(n, expected);
    }

    #[test]
    fn closing_far_from_objects_attaches_nothing() {
        let cfg = EnvConfig::default();
        let s = two_block_world();
        let mut a = [0.0; ACTION_DIM];
        a[7] = 1.0;
        let n = apply_action(&cfg, &s, &a).unwrap();
        assert_eq!(n.arms[0].gripper, 0.0);
        assert_eq!(n.arms[0].held, None);
    }

    #[test]
    fn grasp_lift_and_release_on_stack() {
        let cfg = EnvConfig::default();
        let mut s = two_block_world();
        s.arms[0].ee = [6.0, 10.0, 1.0];
        let mut a = [0.0; ACTION_DIM];
        a[7] = 1.0;
        s = apply_action(&cfg, &s, &a).unwrap();
        assert_eq!(s.arms[0].held, Some(0));
        // teleport-free: walk to above the blue block
        s.arms[0].ee = [10.0, 6.0, 2.0];
        s = apply_action(&cfg, &s, &a).unwrap();
        assert_eq!(s.objects[0].grasp_point(), s.arms[0].ee);
        a[3] = 1.0;
        s = apply_action(&cfg, &s, &a).unwrap();
        assert_eq!(s.arms[0].held, None);
        assert_eq!(s.objects[0].z, 1.0);
    }

    #[test]
    fn nan_action_rejected() {
        let cfg = EnvConfig::default();
        let mut a = [0.0; ACTION_DIM];
        a[2] = f64::NAN;
        assert!(matches!(
            apply_action(&cfg, &two_block_world(), &a),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn displacement_is_clipped_to_max_speed() {
        let cfg = EnvConfig::default();
        let s = two_block_world();
        let a = [3.0, 4.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let n = apply_action(&cfg, &s, &a).unwrap();
        let d = dist3(n.arms[0].ee, s.arms[0].ee);
        assert!((d - cfg.max_speed).abs() < 1e-12);
    }
}
