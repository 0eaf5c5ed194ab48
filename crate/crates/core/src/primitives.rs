//! Rule-based translation of proprioception into per-frame, per-arm motion
//! primitives (idle / move+direction / grasp / release).

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::envsim::{Arm, Trajectory};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Thresholds {
    /// Largest per-frame end-effector displacement still counted as idle.
    pub vel: f64,
    /// Smallest gripper change counted as a gripper action.
    pub dg: f64,
    /// Idle runs shorter than this are absorbed into the surrounding segment.
    pub min_idle: usize,
    /// Axis ratio (relative to the dominant axis) for inclusion in a direction.
    pub dir: f64,
    /// Label idle sub-runs as moves, as the algorithm listing literally reads.
    pub literal_idle_subsegments: bool,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            vel: 0.1,
            dg: 0.2,
            min_idle: 3,
            dir: 0.7,
            literal_idle_subsegments: false,
        }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<()> {
        if !(self.vel > 0.0 && self.dg > 0.0 && self.dir > 0.0) {
            return Err(Error::Config("thresholds must be strictly positive".into()));
        }
        if self.min_idle < 1 {
            return Err(Error::Config("min_idle must be at least 1".into()));
        }
        if self.dir > 1.0 {
            return Err(Error::Config("dir ratio must be in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrimitiveKind {
    Idle,
    Move,
    Grasp,
    Release,
}

impl PrimitiveKind {
    pub fn name(self) -> &'static str {
        match self {
            PrimitiveKind::Idle => "idle",
            PrimitiveKind::Move => "move",
            PrimitiveKind::Grasp => "grasp",
            PrimitiveKind::Release => "release",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArmLabel {
    pub kind: PrimitiveKind,
    pub direction: String,
    pub sentence: String,
}

impl ArmLabel {
    pub fn new(kind: PrimitiveKind, direction: &str) -> Self {
        Self {
            kind,
            direction: direction.to_string(),
            sentence: lookup_sentence(kind, direction),
        }
    }

    pub fn idle() -> Self {
        Self::new(PrimitiveKind::Idle, "")
    }
}

/// Labels for every frame, indexed `[t][arm.index()]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrimitiveTable {
    pub frames: Vec<[ArmLabel; 2]>,
}

impl PrimitiveTable {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn get(&self, t: usize, arm: Arm) -> &ArmLabel {
        &self.frames[t][arm.index()]
    }

    /// True when neither arm does anything at frame `t`.
    pub fn all_idle_at(&self, t: usize) -> bool {
        self.frames[t].iter().all(|l| l.kind == PrimitiveKind::Idle)
    }
}

/// Fixed sentence templates for each label.
pub fn lookup_sentence(kind: PrimitiveKind, direction: &str) -> String {
    match kind {
        PrimitiveKind::Idle => "keep the arm still".into(),
        PrimitiveKind::Grasp => "close the gripper to grasp".into(),
        PrimitiveKind::Release => "open the gripper to release".into(),
        PrimitiveKind::Move if direction == "stationary" || direction.is_empty() => "hold the arm in place".into(),
        PrimitiveKind::Move => format!("move the arm {}", direction.replace('-', " and ")),
    }
}

fn check_finite(values: &[f64]) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("non-finite proprioception value".into()));
    }
    Ok(())
}

fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

/// Idle iff the end-effector moved less than `vel` AND the gripper changed
/// less than `dg` (both strict).
pub fn is_idle(p_t: [f64; 3], p_prev: [f64; 3], g_t: f64, g_prev: f64, th: &Thresholds) -> Result<bool> {
    check_finite(&[p_t[0], p_t[1], p_t[2], p_prev[0], p_prev[1], p_prev[2], g_t, g_prev])?;
    Ok(norm(sub(p_t, p_prev)) < th.vel && (g_t - g_prev).abs() < th.dg)
}

/// Inclusive `(start, end)` motion segments. Idle runs shorter than
/// `min_idle` between two motions are absorbed; leading and trailing idle
/// frames never belong to a segment.
pub fn segment_actions(idle: &[bool], min_idle: usize) -> Vec<(usize, usize)> {
    let mut runs: Vec<(usize, usize)> = Vec::new();
    let mut t = 0;
    while t < idle.len() {
        if idle[t] {
            t += 1;
            continue;
        }
        let s = t;
        while t < idle.len() && !idle[t] {
            t += 1;
        }
        runs.push((s, t - 1));
    }
    let mut merged: Vec<(usize, usize)> = Vec::with_capacity(runs.len());
    for (s, e) in runs {
        match merged.last_mut() {
            Some(last) if s - last.1 - 1 < min_idle => last.1 = e,
            _ => merged.push((s, e)),
        }
    }
    merged
}

const AXES: [(&str, &str); 3] = [("forward", "backward"), ("left", "right"), ("up", "down")];

/// Names of the dominant signed axes of `dp`, joined with '-' in x, y, z
/// order; "stationary" when the largest component is below `vel`.
pub fn get_direction(dp: [f64; 3], th: &Thresholds) -> String {
    let m = dp.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    if m < th.vel {
        return "stationary".into();
    }
    AXES.iter()
        .zip(dp)
        .filter(|(_, v)| v.abs() >= th.dir * m)
        .map(|((pos, neg), v)| if v > 0.0 { *pos } else { *neg })
        .collect::<Vec<_>>()
        .join("-")
}

/// Per-arm proprioception trace: end-effector positions and gripper openings.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ArmTrace {
    pub positions: Vec<[f64; 3]>,
    pub gripper: Vec<f64>,
}

impl ArmTrace {
    pub fn from_trajectory(traj: &Trajectory, arm: Arm) -> Self {
        let (positions, gripper) = (0..traj.len()).map(|t| traj.arm_pose(t, arm)).unzip();
        Self { positions, gripper }
    }
}

fn maximal_runs(flags: impl Iterator<Item = (usize, bool)>) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut open: Option<(usize, usize)> = None;
    for (t, f) in flags {
        match (&mut open, f) {
            (Some(run), true) if run.1 + 1 == t => run.1 = t,
            (_, true) => {
                if let Some(r) = open.take() {
                    out.push(r);
                }
                open = Some((t, t));
            }
            (_, false) => {
                if let Some(r) = open.take() {
                    out.push(r);
                }
            }
        }
    }
    out.extend(open);
    out
}

fn label_arm(trace: &ArmTrace, th: &Thresholds, out: &mut [[ArmLabel; 2]], arm: Arm) -> Result<()> {
    let n = trace.positions.len();
    let mut idle = vec![true; n];
    for t in 1..n {
        idle[t] = is_idle(
            trace.positions[t],
            trace.positions[t - 1],
            trace.gripper[t],
            trace.gripper[t - 1],
            th,
        )?;
    }
    let a = arm.index();
    for (s, e) in segment_actions(&idle, th.min_idle) {
        for t in s.max(1)..=e {
            let dg = trace.gripper[t] - trace.gripper[t - 1];
            if dg <= -th.dg {
                out[t][a] = ArmLabel::new(PrimitiveKind::Grasp, "");
            } else if dg >= th.dg {
                out[t][a] = ArmLabel::new(PrimitiveKind::Release, "");
            }
        }

        let subsegments = if th.literal_idle_subsegments {
            maximal_runs((s..=e).map(|t| (t, idle[t])))
        } else {
            maximal_runs((s..=e).map(|t| {
                (
                    t,
                    t >= 1 && norm(sub(trace.positions[t], trace.positions[t - 1])) >= th.vel,
                )
            }))
        };
        for (s2, e2) in subsegments {
            // Net displacement over the run. A moving frame's own step is its
            // incoming displacement, so non-literal runs start one frame back.
            let from = if th.literal_idle_subsegments { s2 } else { s2 - 1 };
            let dp = sub(trace.positions[e2], trace.positions[from]);
            let d = get_direction(dp, th);
            for row in out.iter_mut().take(e2 + 1).skip(s2) {
                row[a] = ArmLabel::new(PrimitiveKind::Move, &d);
            }
        }
    }
    Ok(())
}

/// Labels every frame of both arms. Both `Arm::Left` and `Arm::Right` must be
/// present with equal, non-trivial lengths.
pub fn extract_from_traces(traces: &BTreeMap<Arm, ArmTrace>, th: &Thresholds) -> Result<PrimitiveTable> {
    th.validate()?;
    let left = traces
        .get(&Arm::Left)
        .ok_or_else(|| Error::Input("missing trace for the left arm".into()))?;
    let right = traces
        .get(&Arm::Right)
        .ok_or_else(|| Error::Input("missing trace for the right arm".into()))?;
    let n = left.positions.len();
    for tr in [left, right] {
        if tr.positions.len() != n || tr.gripper.len() != n {
            return Err(Error::Input("arm traces must have equal lengths".into()));
        }
    }
    if n < 2 {
        return Err(Error::Input("need at least two frames".into()));
    }
    let mut frames = vec![[ArmLabel::idle(), ArmLabel::idle()]; n];
    label_arm(left, th, &mut frames, Arm::Left)?;
    label_arm(right, th, &mut frames, Arm::Right)?;
    Ok(PrimitiveTable { frames })
}

pub fn extract_primitives(traj: &Trajectory, th: &Thresholds) -> Result<PrimitiveTable> {
    let mut traces = BTreeMap::new();
    for arm in Arm::BOTH {
        traces.insert(arm, ArmTrace::from_trajectory(traj, arm));
    }
    extract_from_traces(&traces, th)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelLine {
    pub trajectory: String,
    pub frame: usize,
    pub arm: Arm,
    pub kind: PrimitiveKind,
    pub direction: String,
    pub sentence: String,
}

/// Appends one JSON line per (frame, arm) cell.
pub fn write_label_lines<W: Write>(out: &mut W, trajectory_id: &str, table: &PrimitiveTable) -> Result<()> {
    for (t, row) in table.frames.iter().enumerate() {
        for arm in Arm::BOTH {
            let l = &row[arm.index()];
            let line = LabelLine {
                trajectory: trajectory_id.to_string(),
                frame: t,
                arm,
                kind: l.kind,
                direction: l.direction.clone(),
                sentence: l.sentence.clone(),
            };
            serde_json::to_writer(&mut *out, &line)?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

/// Rebuilds per-trajectory tables from label lines.
pub fn read_label_lines(text: &str) -> Result<BTreeMap<String, PrimitiveTable>> {
    let mut cells: BTreeMap<String, BTreeMap<(usize, usize), ArmLabel>> = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let l: LabelLine = serde_json::from_str(line)?;
        cells.entry(l.trajectory.clone()).or_default().insert(
            (l.frame, l.arm.index()),
            ArmLabel {
                kind: l.kind,
                direction: l.direction,
                sentence: l.sentence,
            },
        );
    }
    let mut out = BTreeMap::new();
    for (id, map) in cells {
        let n = map.keys().map(|(t, _)| t + 1).max().unwrap_or(0);
        let mut frames = Vec::with_capacity(n);
        for t in 0..n {
            let get = |a: usize| {
                map.get(&(t, a))
                    .cloned()
                    .ok_or_else(|| Error::Input(format!("{id}: missing label for frame {t}")))
            };
            frames.push([get(0)?, get(1)?]);
        }
        out.insert(id, PrimitiveTable { frames });
    }
    Ok(out)
}
