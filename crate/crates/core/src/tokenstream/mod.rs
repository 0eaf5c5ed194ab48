//! Typed token sequences for VQA, future-frame generation, action prediction
//! and full reasoning samples; attention masks and sequence packing.

mod mask;
mod vocab;

use serde::{Deserialize, Serialize};

pub use mask::{
    build_attention_mask, mask_to_csv, mask_to_pgm, pack_samples, AttentionMask, MaskOptions, PackedSequence,
};
pub use vocab::{Special, Vocabulary, MAX_VOCAB};

use crate::annotator::EMCoTRecord;
use crate::envsim::{Action, Trajectory, ACTION_DIM, PROPRIO_DIM};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Text,
    VisUnd,
    VisClean,
    VisNoise,
    ActNoise,
}

impl Role {
    pub const ALL: [Role; 5] = [Role::Text, Role::VisUnd, Role::VisClean, Role::VisNoise, Role::ActNoise];

    pub fn is_noise(self) -> bool {
        matches!(self, Role::VisNoise | Role::ActNoise)
    }

    pub fn is_visual(self) -> bool {
        matches!(self, Role::VisUnd | Role::VisClean)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Payload {
    Token(u32),
    Vector(Vec<f64>),
}

impl Payload {
    pub fn token(&self) -> Option<u32> {
        match self {
            Payload::Token(t) => Some(*t),
            Payload::Vector(_) => None,
        }
    }

    pub fn vector(&self) -> Option<&[f64]> {
        match self {
            Payload::Vector(v) => Some(v),
            Payload::Token(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub sample: u32,
    /// Position within its own sample.
    pub position: u32,
    pub role: Role,
    /// Frame slot for visual records.
    pub frame: Option<u32>,
    /// Noise group for noise records.
    pub group: Option<u32>,
    /// Set on clean records that are the ground truth of a noise group.
    pub target_of: Option<u32>,
    pub payload: Payload,
    pub loss: bool,
    pub target: Option<Payload>,
}

impl TokenRecord {
    pub fn validate(&self) -> Result<()> {
        if self.role.is_noise() != self.group.is_some() {
            return Err(Error::Input(format!(
                "record {}: group id iff noise role",
                self.position
            )));
        }
        if self.loss && self.target.is_none() {
            return Err(Error::Input(format!(
                "record {}: loss flag without target",
                self.position
            )));
        }
        if self.role.is_visual() && self.frame.is_none() {
            return Err(Error::Input(format!(
                "record {}: visual record without frame id",
                self.position
            )));
        }
        Ok(())
    }
}

/// Encoded tokens of one observation: semantic patches and latent cells.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FrameTokens {
    pub und: Vec<Vec<f64>>,
    pub clean: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CotMode {
    #[default]
    Full,
    /// Without the reasoning span.
    NoText,
    /// Without the subgoal span.
    NoVis,
    /// Neither: plain action prediction.
    None,
}

impl CotMode {
    pub const ALL: [CotMode; 4] = [CotMode::Full, CotMode::NoText, CotMode::NoVis, CotMode::None];

    pub fn has_text(self) -> bool {
        matches!(self, CotMode::Full | CotMode::NoVis)
    }

    pub fn has_vis(self) -> bool {
        matches!(self, CotMode::Full | CotMode::NoText)
    }

    pub fn name(self) -> &'static str {
        match self {
            CotMode::Full => "full",
            CotMode::NoText => "no_text",
            CotMode::NoVis => "no_vis",
            CotMode::None => "none",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        CotMode::ALL
            .into_iter()
            .find(|m| m.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown mode '{s}' (full, no_text, no_vis, none)")))
    }
}

pub const VIS_GROUP: u32 = 0;
pub const ACT_GROUP: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LayoutConfig {
    pub context_frames: usize,
    pub chunk: usize,
    pub vg_context: usize,
    pub vg_horizon: usize,
    pub max_len: usize,
    /// Divides position deltas so normalized actions sit in [-1, 1].
    pub action_scale: f64,
    pub mask: MaskOptions,
}

impl Default for LayoutConfig {
    fn default() -> Self {
        Self {
            context_frames: 3,
            chunk: 16,
            vg_context: 2,
            vg_horizon: 4,
            max_len: 2048,
            action_scale: 0.5,
            mask: MaskOptions::default(),
        }
    }
}

impl LayoutConfig {
    pub fn validate(&self) -> Result<()> {
        if self.context_frames < 1 || self.chunk < 1 || self.vg_context < 1 || self.vg_horizon < 1 {
            return Err(Error::Config(
                "context frames, chunk, vg_context and vg_horizon must be >= 1".into(),
            ));
        }
        if self.max_len < 16 || self.action_scale <= 0.0 {
            return Err(Error::Config("max_len must be >= 16 and action_scale > 0".into()));
        }
        Ok(())
    }

    /// Actions in model space: deltas scaled to unit range, gripper to ±1.
    pub fn normalize_action(&self, a: &Action) -> Vec<f64> {
        let mut v = vec![0.0; ACTION_DIM];
        for arm in 0..2 {
            for k in 0..3 {
                v[arm * 4 + k] = a[arm * 4 + k] / self.action_scale;
            }
            v[arm * 4 + 3] = 2.0 * a[arm * 4 + 3] - 1.0;
        }
        v
    }

    pub fn denormalize_action(&self, v: &[f64]) -> Action {
        let mut a = [0.0; ACTION_DIM];
        for arm in 0..2 {
            for k in 0..3 {
                a[arm * 4 + k] = v[arm * 4 + k] * self.action_scale;
            }
            a[arm * 4 + 3] = ((v[arm * 4 + 3] + 1.0) / 2.0).clamp(0.0, 1.0);
        }
        a
    }
}

/// Compact text form of the arm state, e.g. " left 2.0 12.0 3.0 open right ...".
pub fn proprio_text(p: &[f64; PROPRIO_DIM]) -> String {
    let mut s = String::new();
    for (arm, name) in [(0, "left"), (1, "right")] {
        s.push(' ');
        s.push_str(name);
        for k in 0..3 {
            let v = (p[arm * 4 + k] * 2.0).round().clamp(0.0, 32.0) / 2.0;
            s.push_str(&format!(" {v:.1}"));
        }
        s.push_str(if p[arm * 4 + 3] >= 0.5 { " open" } else { " close" });
    }
    s
}

/// Appends records for one sample, tracking positions.
#[derive(Debug, Clone)]
pub struct SequenceBuilder {
    pub records: Vec<TokenRecord>,
    sample: u32,
}

impl SequenceBuilder {
    pub fn new(sample: u32) -> Self {
        Self {
            records: Vec::new(),
            sample,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn push(&mut self, role: Role, payload: Payload) -> &mut TokenRecord {
        let position = self.records.len() as u32;
        self.records.push(TokenRecord {
            sample: self.sample,
            position,
            role,
            frame: None,
            group: None,
            target_of: None,
            payload,
            loss: false,
            target: None,
        });
        self.records.last_mut().unwrap()
    }

    pub fn text(&mut self, ids: &[u32]) {
        for &id in ids {
            self.push(Role::Text, Payload::Token(id));
        }
    }

    /// Text whose every record predicts the next id; the last one predicts
    /// `next`.
    pub fn supervised_text(&mut self, ids: &[u32], next: u32) {
        for (k, &id) in ids.iter().enumerate() {
            let target = ids.get(k + 1).copied().unwrap_or(next);
            let r = self.push(Role::Text, Payload::Token(id));
            r.loss = true;
            r.target = Some(Payload::Token(target));
        }
    }

    /// Semantic patches then latent cells of one frame.
    pub fn frame(&mut self, tokens: &FrameTokens, frame: u32) {
        for v in &tokens.und {
            self.push(Role::VisUnd, Payload::Vector(v.clone())).frame = Some(frame);
        }
        self.clean(tokens, frame, None);
    }

    pub fn clean(&mut self, tokens: &FrameTokens, frame: u32, target_of: Option<u32>) {
        for v in &tokens.clean {
            let r = self.push(Role::VisClean, Payload::Vector(v.clone()));
            r.frame = Some(frame);
            r.target_of = target_of;
        }
    }

    /// Noise records with zero payload; training and sampling fill them.
    pub fn noise(&mut self, role: Role, group: u32, targets: &[Vec<f64>], dim: usize, loss: bool) {
        for t in targets {
            let r = self.push(role, Payload::Vector(vec![0.0; dim]));
            r.group = Some(group);
            r.loss = loss;
            r.target = Some(Payload::Vector(t.clone()));
        }
    }

    pub fn finish(self) -> Vec<TokenRecord> {
        self.records
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assembled {
    pub records: Vec<TokenRecord>,
    /// The action chunk ran past the trajectory end and was padded.
    pub padded_chunk: bool,
}

pub fn context_indices(t: usize, c: usize) -> Vec<usize> {
    (0..c).map(|k| (t + k + 1).saturating_sub(c)).collect()
}

/// Chunk `a_{t..t+K}`, repeating the final action past the end.
pub fn action_chunk(actions: &[Action], t: usize, k: usize) -> (Vec<Action>, bool) {
    let last = *actions.last().expect("non-empty actions");
    let chunk = (t..t + k).map(|i| actions.get(i).copied().unwrap_or(last)).collect();
    (chunk, t + k > actions.len())
}

/// Context frames, instruction and state line; shared by every action-bearing
/// layout and by rollouts.
pub fn push_observation_prefix(
    b: &mut SequenceBuilder,
    vocab: &Vocabulary,
    context: &[&FrameTokens],
    instruction: &str,
    proprio: &[f64; PROPRIO_DIM],
) -> Result<()> {
    for (k, f) in context.iter().enumerate() {
        b.frame(f, k as u32);
    }
    b.text(&[vocab.special(Special::Bos)]);
    b.text(&vocab.tokenize(instruction)?);
    b.text(&vocab.tokenize(&proprio_text(proprio))?);
    Ok(())
}

/// Reasoning sample at frame `t`: context frames, instruction, reasoning span,
/// subgoal span and action span, with spans dropped according to `mode`.
#[allow(clippy::too_many_arguments)]
pub fn assemble_emcot_sequence(
    record: &EMCoTRecord,
    traj: &Trajectory,
    frames: &[FrameTokens],
    t: usize,
    layout: &LayoutConfig,
    mode: CotMode,
    vocab: &Vocabulary,
    sample: u32,
) -> Result<Assembled> {
    let n = traj.len();
    if t >= n || frames.len() != n || record.frames.len() != n {
        return Err(Error::Input(format!(
            "frame {t} invalid for a trajectory of {n} frames"
        )));
    }
    let mut b = SequenceBuilder::new(sample);
    let context: Vec<&FrameTokens> = context_indices(t, layout.context_frames)
        .into_iter()
        .map(|i| &frames[i])
        .collect();
    push_observation_prefix(
        &mut b,
        vocab,
        &context,
        &record.instruction,
        &traj.frames[t].observation.proprio,
    )?;

    let after_think = if mode.has_vis() {
        Special::VisionStart
    } else {
        Special::ActionStart
    };
    if mode.has_text() {
        let mut ids = vec![vocab.special(Special::ThinkStart)];
        ids.extend(vocab.tokenize(&format!(" {}", record.frames[t].reasoning))?);
        ids.push(vocab.special(Special::ThinkEnd));
        b.supervised_text(&ids, vocab.special(after_think));
    }
    if mode.has_vis() {
        let goal = &frames[record.frames[t].goal];
        let dim = goal.clean.first().map_or(0, |v| v.len());
        b.text(&[vocab.special(Special::VisionStart)]);
        b.noise(Role::VisNoise, VIS_GROUP, &goal.clean, dim, true);
        b.text(&[vocab.special(Special::VisionEnd)]);
        b.clean(goal, layout.context_frames as u32, Some(VIS_GROUP));
    }
    let actions: Vec<Action> = traj.frames.iter().map(|f| f.action).collect();
    let (chunk, padded_chunk) = action_chunk(&actions, t, layout.chunk);
    let targets: Vec<Vec<f64>> = chunk.iter().map(|a| layout.normalize_action(a)).collect();
    b.text(&[vocab.special(Special::ActionStart)]);
    b.noise(Role::ActNoise, ACT_GROUP, &targets, ACTION_DIM, true);
    b.text(&[vocab.special(Special::ActionEnd)]);
    Ok(Assembled {
        records: b.finish(),
        padded_chunk,
    })
}

/// Pre-training samples.
#[derive(Debug, Clone, PartialEq)]
pub enum PretrainSample {
    Vqa {
        frame: FrameTokens,
        question: String,
        answer: String,
    },
    /// Future-frame prediction from `context` frames.
    Vg {
        instruction: String,
        context: Vec<FrameTokens>,
        future: FrameTokens,
    },
    /// Action prediction without reasoning or subgoal.
    Ap {
        instruction: String,
        context: Vec<FrameTokens>,
        proprio: [f64; PROPRIO_DIM],
        chunk: Vec<Action>,
    },
}

impl PretrainSample {
    pub fn kind(&self) -> &'static str {
        match self {
            PretrainSample::Vqa { .. } => "vqa",
            PretrainSample::Vg { .. } => "vg",
            PretrainSample::Ap { .. } => "ap",
        }
    }
}

pub fn assemble_pretrain_sequence(
    sample: &PretrainSample,
    layout: &LayoutConfig,
    vocab: &Vocabulary,
    sample_id: u32,
) -> Result<Vec<TokenRecord>> {
    let mut b = SequenceBuilder::new(sample_id);
    match sample {
        PretrainSample::Vqa {
            frame,
            question,
            answer,
        } => {
            if frame.und.is_empty() || question.is_empty() || answer.is_empty() {
                return Err(Error::Input(
                    "VQA sample needs an image, a question and an answer".into(),
                ));
            }
            for v in &frame.und {
                b.push(Role::VisUnd, Payload::Vector(v.clone())).frame = Some(0);
            }
            b.text(&[vocab.special(Special::Bos)]);
            let mut q = vocab.tokenize(&format!("Q: {question} A:"))?;
            let a = vocab.tokenize(&format!(" {answer}"))?;
            // the last question token predicts the first answer token
            let last = q.pop().unwrap();
            b.text(&q);
            let mut ids = vec![last];
            ids.extend(&a);
            b.supervised_text(&ids[..ids.len() - 1], *ids.last().unwrap());
            b.text(&[*ids.last().unwrap()]);
        }
        PretrainSample::Vg {
            instruction,
            context,
            future,
        } => {
            if context.is_empty() || future.clean.is_empty() {
                return Err(Error::Input("VG sample needs context frames and a future frame".into()));
            }
            for (k, f) in context.iter().enumerate() {
                b.frame(f, k as u32);
            }
            b.text(&[vocab.special(Special::Bos)]);
            b.text(&vocab.tokenize(instruction)?);
            let dim = future.clean[0].len();
            b.text(&[vocab.special(Special::VisionStart)]);
            b.noise(Role::VisNoise, VIS_GROUP, &future.clean, dim, true);
            b.text(&[vocab.special(Special::VisionEnd)]);
        }
        PretrainSample::Ap {
            instruction,
            context,
            proprio,
            chunk,
        } => {
            if context.is_empty() || chunk.is_empty() {
                return Err(Error::Input(
                    "AP sample needs context frames and an action chunk".into(),
                ));
            }
            let ctx: Vec<&FrameTokens> = context.iter().collect();
            push_observation_prefix(&mut b, vocab, &ctx, instruction, proprio)?;
            let targets: Vec<Vec<f64>> = chunk.iter().map(|a| layout.normalize_action(a)).collect();
            b.text(&[vocab.special(Special::ActionStart)]);
            b.noise(Role::ActNoise, ACT_GROUP, &targets, ACTION_DIM, true);
            b.text(&[vocab.special(Special::ActionEnd)]);
        }
    }
    Ok(b.finish())
}

/// Future-frame sample at frame `t` of a trajectory: `k` context frames
/// ending at `t` (left-padded with frame 0) and the frame `h` steps ahead
/// (clamped to the last frame).
pub fn vg_sample(traj: &Trajectory, frames: &[FrameTokens], t: usize, layout: &LayoutConfig) -> PretrainSample {
    let context = context_indices(t, layout.vg_context)
        .into_iter()
        .map(|i| frames[i].clone())
        .collect();
    let future = frames[(t + layout.vg_horizon).min(frames.len() - 1)].clone();
    PretrainSample::Vg {
        instruction: traj.task.instruction.clone(),
        context,
        future,
    }
}

pub fn ap_sample(traj: &Trajectory, frames: &[FrameTokens], t: usize, layout: &LayoutConfig) -> PretrainSample {
    let context = context_indices(t, layout.context_frames)
        .into_iter()
        .map(|i| frames[i].clone())
        .collect();
    let actions: Vec<Action> = traj.frames.iter().map(|f| f.action).collect();
    PretrainSample::Ap {
        instruction: traj.task.instruction.clone(),
        context,
        proprio: traj.frames[t].observation.proprio,
        chunk: action_chunk(&actions, t, layout.chunk).0,
    }
}

/// The 8-record layout used in documentation and `inspect-mask --demo emcot`:
/// two text tokens, a two-patch frame, a two-record subgoal noise group, its
/// clean target and one action noise record.
pub fn canonical_toy_sequence() -> Vec<TokenRecord> {
    let mut b = SequenceBuilder::new(0);
    b.text(&[1, 2]);
    let f = FrameTokens {
        und: vec![vec![0.0], vec![0.0]],
        clean: vec![],
    };
    for v in &f.und {
        b.push(Role::VisUnd, Payload::Vector(v.clone())).frame = Some(0);
    }
    b.noise(Role::VisNoise, VIS_GROUP, &[vec![0.0], vec![0.0]], 1, true);
    b.clean(
        &FrameTokens {
            und: vec![],
            clean: vec![vec![0.0]],
        },
        1,
        Some(VIS_GROUP),
    );
    b.noise(Role::ActNoise, ACT_GROUP, &[vec![0.0]], 1, true);
    b.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn context_is_left_padded() {
        assert_eq!(context_indices(0, 3), vec![0, 0, 0]);
        assert_eq!(context_indices(1, 3), vec![0, 0, 1]);
        assert_eq!(context_indices(5, 3), vec![3, 4, 5]);
    }

    #[test]
    fn chunk_padding() {
        let acts: Vec<Action> = (0..5).map(|i| [i as f64; ACTION_DIM]).collect();
        let (c, padded) = action_chunk(&acts, 3, 4);
        assert!(padded);
        assert_eq!(c.iter().map(|a| a[0]).collect::<Vec<_>>(), vec![3.0, 4.0, 4.0, 4.0]);
        assert!(!action_chunk(&acts, 0, 5).1);
    }

    #[test]
    fn action_normalization_round_trips() {
        let l = LayoutConfig::default();
        let a = [0.5, -0.25, 0.0, 1.0, 0.1, 0.2, -0.5, 0.0];
        let n = l.normalize_action(&a);
        assert_eq!(n[0], 1.0);
        assert_eq!(n[3], 1.0);
        assert_eq!(n[7], -1.0);
        assert_eq!(l.denormalize_action(&n), a);
    }

    #[test]
    fn proprio_line_uses_vocab_numbers() {
        let v = Vocabulary::standard();
        let line = proprio_text(&[2.0, 12.0, 3.0, 1.0, 2.26, 4.0, 3.0, 0.0]);
        assert_eq!(line, " left 2.0 12.0 3.0 open right 2.5 4.0 3.0 close");
        assert_eq!(v.tokenize(&line).unwrap().len(), 10);
    }

    #[test]
    fn vqa_has_no_noise_and_supervises_answer() {
        let v = Vocabulary::standard();
        let s = PretrainSample::Vqa {
            frame: FrameTokens {
                und: vec![vec![0.0; 4]; 3],
                clean: vec![],
            },
            question: "What color is the block?".into(),
            answer: "red".into(),
        };
        let recs = assemble_pretrain_sequence(&s, &LayoutConfig::default(), &v, 0).unwrap();
        assert!(recs.iter().all(|r| !r.role.is_noise()));
        let sup: Vec<_> = recs.iter().filter(|r| r.loss).collect();
        assert_eq!(sup.len(), 1);
        assert_eq!(sup[0].target, Some(Payload::Token(v.tokenize(" red").unwrap()[0])));
        assert_eq!(v.piece(sup[0].payload.token().unwrap()), Some(" A:"));
    }
}
