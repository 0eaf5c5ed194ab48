//! Closed-loop rollouts: reasoning text, a generated subgoal frame, then an
//! action chunk, repeated until the episode ends.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::envsim::{Action, Env, Image, Level, Observation, Simulator, TaskId, TaskSpec, ACTION_DIM, PROPRIO_DIM};
use crate::error::{Error, Result};
use crate::mot::{FlowKind, MotModel};
use crate::tokenstream::{
    context_indices, push_observation_prefix, CotMode, FrameTokens, LayoutConfig, Role, SequenceBuilder, Special,
    Vocabulary, ACT_GROUP, VIS_GROUP,
};
use crate::util::{par_map, rng_for, TOOL_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Replan {
    /// Regenerate reasoning, subgoal and actions before every chunk.
    EveryChunk,
    /// Reuse the last reasoning and subgoal until a gripper opens or closes
    /// during a chunk; actions are still resampled every chunk.
    GripperEvent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RolloutConfig {
    pub mode: CotMode,
    pub context_frames: usize,
    pub chunk: usize,
    pub replan: Replan,
    pub flow_steps: usize,
    pub max_text_tokens: usize,
    pub step_limit: u32,
    /// 0 means greedy decoding.
    pub temperature: f64,
    pub seed: u64,
    /// Keep subgoal images in episode records.
    pub keep_images: bool,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            mode: CotMode::Full,
            context_frames: 3,
            chunk: 16,
            replan: Replan::EveryChunk,
            flow_steps: 10,
            max_text_tokens: 96,
            step_limit: 200,
            temperature: 0.0,
            seed: 0,
            keep_images: false,
        }
    }
}

impl RolloutConfig {
    pub fn validate(&self, model: &MotModel) -> Result<()> {
        let mut errs = Vec::new();
        if self.chunk == 0 || self.chunk > model.config.chunk {
            errs.push(format!("chunk must be in 1..={}", model.config.chunk));
        }
        if self.context_frames == 0 {
            errs.push("context_frames must be >= 1".into());
        }
        if self.flow_steps == 0 {
            errs.push("flow_steps must be >= 1".into());
        }
        if self.temperature < 0.0 {
            errs.push("temperature must be >= 0".into());
        }
        if self.step_limit == 0 {
            errs.push("step_limit must be >= 1".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errs))
        }
    }

    pub fn layout(&self) -> LayoutConfig {
        LayoutConfig {
            context_frames: self.context_frames,
            chunk: self.chunk,
            ..LayoutConfig::default()
        }
    }
}

/// Output of one reasoning step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub reasoning: String,
    pub subgoal: Option<Image>,
    pub subgoal_latents: Option<Vec<Vec<f64>>>,
    /// K actions in environment units.
    pub actions: Vec<Action>,
    /// The text budget ran out before the reasoning span closed.
    pub forced_transition: bool,
    /// Control tokens of the emitted sequence, in order.
    pub structure: Vec<Special>,
}

impl StepOutput {
    /// Spans appear in think → vision → action order as the mode requires,
    /// and the chunk is K×8.
    pub fn well_formed(&self, mode: CotMode, k: usize) -> bool {
        let mut expect = Vec::new();
        if mode.has_text() {
            expect.extend([Special::ThinkStart, Special::ThinkEnd]);
        }
        if mode.has_vis() {
            expect.extend([Special::VisionStart, Special::VisionEnd]);
        }
        expect.extend([Special::ActionStart, Special::ActionEnd]);
        self.structure == expect && self.actions.len() == k && mode.has_vis() == self.subgoal.is_some()
    }
}

fn choose_token(logits: &[f64], allowed: &[u32], temperature: f64, rng: &mut impl Rng) -> u32 {
    if temperature <= 0.0 {
        // first maximum wins, so ties break toward lower ids
        let mut best = allowed[0];
        for &id in allowed {
            if logits[id as usize] > logits[best as usize] {
                best = id;
            }
        }
        return best;
    }
    let mx = allowed
        .iter()
        .map(|&i| logits[i as usize])
        .fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = allowed
        .iter()
        .map(|&i| ((logits[i as usize] - mx) / temperature).exp())
        .collect();
    let mut u = rng.random::<f64>() * w.iter().sum::<f64>();
    for (&id, wi) in allowed.iter().zip(&w) {
        if u < *wi {
            return id;
        }
        u -= wi;
    }
    *allowed.last().unwrap()
}

/// Reasoning, subgoal and action chunk for the current observation.
/// `history` holds encoded frames, oldest first; it is left-padded to the
/// configured context length.
#[allow(clippy::too_many_arguments)]
pub fn emcot_step(
    model: &MotModel,
    vocab: &Vocabulary,
    cfg: &RolloutConfig,
    instruction: &str,
    history: &[FrameTokens],
    proprio: &[f64; PROPRIO_DIM],
    reuse: Option<(&str, Option<&Vec<Vec<f64>>>)>,
    rng: &mut impl Rng,
) -> Result<StepOutput> {
    if history.is_empty() {
        return Err(Error::Input("emcot_step needs at least one observation".into()));
    }
    let layout = cfg.layout();
    let t = history.len() - 1;
    let context: Vec<&FrameTokens> = context_indices(t, cfg.context_frames)
        .into_iter()
        .map(|i| &history[i])
        .collect();
    let mut b = SequenceBuilder::new(0);
    push_observation_prefix(&mut b, vocab, &context, instruction, proprio)?;
    let mut structure = Vec::new();
    let mut reasoning_ids = Vec::new();
    let mut forced = false;

    if cfg.mode.has_text() {
        b.text(&[vocab.special(Special::ThinkStart)]);
        structure.push(Special::ThinkStart);
        if let Some((text, _)) = reuse {
            reasoning_ids = vocab.tokenize(text)?;
            b.text(&reasoning_ids);
        } else {
            let think_end = vocab.special(Special::ThinkEnd);
            let allowed: Vec<u32> = vocab.base_ids().chain([think_end]).collect();
            let mut closed = false;
            for _ in 0..cfg.max_text_tokens {
                let records = b.records.clone();
                let logits = model.next_token_logits(&records, &layout.mask, records.len() - 1)?;
                let id = choose_token(&logits, &allowed, cfg.temperature, rng);
                if id == think_end {
                    closed = true;
                    break;
                }
                b.text(&[id]);
                reasoning_ids.push(id);
            }
            forced = !closed;
        }
        b.text(&[vocab.special(Special::ThinkEnd)]);
        structure.push(Special::ThinkEnd);
    }

    let mut subgoal = None;
    let mut subgoal_latents = None;
    if cfg.mode.has_vis() {
        let cells = model.config.latent_cells();
        let dim = model.config.codec.channels;
        b.text(&[vocab.special(Special::VisionStart)]);
        structure.push(Special::VisionStart);
        let latents = match reuse.and_then(|r| r.1) {
            Some(l) => l.clone(),
            None => {
                let mut probe = b.clone();
                probe.noise(Role::VisNoise, VIS_GROUP, &vec![vec![0.0; dim]; cells], dim, false);
                model.sample_group(
                    &probe.records,
                    &layout.mask,
                    VIS_GROUP,
                    FlowKind::Vis,
                    cfg.flow_steps,
                    rng,
                )?
            }
        };
        b.noise(Role::VisNoise, VIS_GROUP, &latents, dim, false);
        b.text(&[vocab.special(Special::VisionEnd)]);
        structure.push(Special::VisionEnd);
        let goal = FrameTokens {
            und: vec![],
            clean: latents.clone(),
        };
        b.clean(&goal, cfg.context_frames as u32, Some(VIS_GROUP));
        subgoal = Some(model.codec.decode(&latents)?);
        subgoal_latents = Some(latents);
    }

    b.text(&[vocab.special(Special::ActionStart)]);
    structure.push(Special::ActionStart);
    b.noise(
        Role::ActNoise,
        ACT_GROUP,
        &vec![vec![0.0; ACTION_DIM]; cfg.chunk],
        ACTION_DIM,
        false,
    );
    b.text(&[vocab.special(Special::ActionEnd)]);
    structure.push(Special::ActionEnd);
    let raw = model.sample_group(&b.records, &layout.mask, ACT_GROUP, FlowKind::Act, cfg.flow_steps, rng)?;
    let actions = raw.iter().map(|v| layout.denormalize_action(v)).collect();
    Ok(StepOutput {
        reasoning: vocab.detokenize(&reasoning_ids)?.trim().to_string(),
        subgoal,
        subgoal_latents,
        actions,
        forced_transition: forced,
        structure,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkRecord {
    pub start_step: u32,
    pub executed: u32,
    pub reasoning: String,
    pub forced_transition: bool,
    pub well_formed: bool,
    pub replanned: bool,
    #[serde(skip)]
    pub observation: Option<Image>,
    #[serde(skip)]
    pub subgoal: Option<Image>,
    #[serde(skip)]
    pub last_frame: Option<Image>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub task: TaskId,
    pub level: Level,
    pub seed: u64,
    pub mode: CotMode,
    pub success: bool,
    pub steps: u32,
    pub valid: bool,
    pub error: Option<String>,
    pub chunks: Vec<ChunkRecord>,
}

fn gripper_changed(a: &[f64; PROPRIO_DIM], b: &[f64; PROPRIO_DIM]) -> bool {
    (a[3] >= 0.5) != (b[3] >= 0.5) || (a[7] >= 0.5) != (b[7] >= 0.5)
}

/// One closed-loop episode. Environment errors mark the episode invalid
/// instead of failing the call.
pub fn run_episode(
    sim: &Simulator,
    model: &MotModel,
    cfg: &RolloutConfig,
    task: &TaskSpec,
    seed: u64,
) -> Result<EpisodeRecord> {
    cfg.validate(model)?;
    let vocab = Vocabulary::standard();
    let mut rng = rng_for(
        cfg.seed,
        &format!("rollout/{}/{}/{seed}", task.task.name(), task.level.name()),
    );
    let mut record = EpisodeRecord {
        task: task.task,
        level: task.level,
        seed,
        mode: cfg.mode,
        success: false,
        steps: 0,
        valid: true,
        error: None,
        chunks: Vec::new(),
    };
    let mut sim = sim.clone();
    sim.config.step_limit = cfg.step_limit;
    let (mut env, obs) = match Env::new(sim, task.clone(), seed) {
        Ok(x) => x,
        Err(e) => {
            record.valid = false;
            record.error = Some(e.to_string());
            return Ok(record);
        }
    };
    let mut obs: Observation = obs;
    let mut history = vec![model.encode_observation(&obs.image)?];
    let mut cached: Option<(String, Option<Vec<Vec<f64>>>)> = None;
    let mut need_plan = true;
    while !env.done && record.steps < cfg.step_limit {
        let reuse = if need_plan || cfg.replan == Replan::EveryChunk {
            None
        } else {
            cached.as_ref().map(|(r, l)| (r.as_str(), l.as_ref()))
        };
        let replanned = reuse.is_none();
        let out = emcot_step(
            model,
            &vocab,
            cfg,
            &task.instruction,
            &history,
            &obs.proprio,
            reuse,
            &mut rng,
        )?;
        cached = Some((out.reasoning.clone(), out.subgoal_latents.clone()));
        let remaining = (cfg.step_limit - record.steps) as usize;
        let n = cfg.chunk.min(remaining);
        let start_obs = obs.clone();
        let mut executed = 0;
        for a in out.actions.iter().take(n) {
            match env.step(a) {
                Ok((o, done)) => {
                    obs = o;
                    executed += 1;
                    record.steps += 1;
                    history.push(model.encode_observation(&obs.image)?);
                    if done {
                        break;
                    }
                }
                Err(e) => {
                    record.valid = false;
                    record.error = Some(e.to_string());
                    break;
                }
            }
        }
        need_plan = gripper_changed(&start_obs.proprio, &obs.proprio);
        record.chunks.push(ChunkRecord {
            start_step: record.steps - executed,
            executed,
            reasoning: out.reasoning.clone(),
            forced_transition: out.forced_transition,
            well_formed: out.well_formed(cfg.mode, cfg.chunk),
            replanned,
            observation: cfg.keep_images.then(|| start_obs.image.clone()),
            subgoal: if cfg.keep_images { out.subgoal.clone() } else { None },
            last_frame: cfg.keep_images.then(|| obs.image.clone()),
        });
        if !record.valid {
            break;
        }
    }
    record.success = record.valid && env.success();
    Ok(record)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rate {
    pub successes: usize,
    pub episodes: usize,
    pub invalid: usize,
    pub rate: f64,
}

impl Rate {
    pub fn from_episodes<'a>(eps: impl Iterator<Item = &'a EpisodeRecord>) -> Self {
        let (mut s, mut n, mut bad) = (0, 0, 0);
        for e in eps {
            if !e.valid {
                bad += 1;
                continue;
            }
            n += 1;
            s += usize::from(e.success);
        }
        Self {
            successes: s,
            episodes: n,
            invalid: bad,
            rate: if n == 0 { 0.0 } else { s as f64 / n as f64 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutReport {
    pub tool_version: String,
    pub config_hash: String,
    pub mode: CotMode,
    pub seeds: Vec<u64>,
    /// task → level → rate
    pub per_task: BTreeMap<String, BTreeMap<String, Rate>>,
    /// level → mean of per-task rates
    pub mean: BTreeMap<String, f64>,
    pub episodes: Vec<EpisodeRecord>,
    pub structurally_valid_chunks: usize,
    pub total_chunks: usize,
    pub forced_transitions: usize,
    pub wall_clock_secs: f64,
}

/// Paired seed schedule: the same `episodes` seeds for every task and level.
pub fn seed_schedule(base: u64, episodes: usize) -> Vec<u64> {
    (0..episodes as u64).map(|k| base + k).collect()
}

/// Evaluates every (task, level) pair on the shared seed schedule, running
/// up to `workers` episodes at once.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    sim: &Simulator,
    model: &MotModel,
    cfg: &RolloutConfig,
    tasks: &[TaskId],
    episodes: usize,
    levels: &[Level],
    base_seed: u64,
    workers: usize,
    config_hash: &str,
) -> Result<RolloutReport> {
    if tasks.is_empty() || episodes == 0 || levels.is_empty() {
        return Err(Error::Input(
            "evaluation needs at least one task, level and episode".into(),
        ));
    }
    cfg.validate(model)?;
    let clock = Instant::now();
    let seeds = seed_schedule(base_seed, episodes);
    let jobs: Vec<(TaskSpec, u64)> = tasks
        .iter()
        .flat_map(|&t| levels.iter().map(move |&l| TaskSpec::new(t, l)))
        .flat_map(|spec| seeds.iter().map(move |&s| (spec.clone(), s)))
        .collect();
    let results = par_map(&jobs, workers.max(1), |(spec, seed)| {
        run_episode(sim, model, cfg, spec, *seed)
    })?;

    let mut per_task: BTreeMap<String, BTreeMap<String, Rate>> = BTreeMap::new();
    let mut mean = BTreeMap::new();
    for &level in levels {
        let mut rates = Vec::new();
        for &task in tasks {
            let r = Rate::from_episodes(results.iter().filter(|e| e.task == task && e.level == level));
            rates.push(r.rate);
            per_task
                .entry(task.name().into())
                .or_default()
                .insert(level.name().into(), r);
        }
        mean.insert(level.name().into(), rates.iter().sum::<f64>() / rates.len() as f64);
    }
    let chunks = results.iter().flat_map(|e| &e.chunks);
    let total_chunks = chunks.clone().count();
    Ok(RolloutReport {
        tool_version: TOOL_VERSION.into(),
        config_hash: config_hash.into(),
        mode: cfg.mode,
        seeds,
        per_task,
        mean,
        structurally_valid_chunks: chunks.clone().filter(|c| c.well_formed).count(),
        forced_transitions: chunks.filter(|c| c.forced_transition).count(),
        total_chunks,
        episodes: results,
        wall_clock_secs: clock.elapsed().as_secs_f64(),
    })
}

impl RolloutReport {
    pub fn table(&self) -> String {
        let levels: Vec<&String> = self.mean.keys().collect();
        let mut s = format!("{:<16}", "task");
        for l in &levels {
            s.push_str(&format!("{:>14}", l));
        }
        s.push('\n');
        for (task, by_level) in &self.per_task {
            s.push_str(&format!("{task:<16}"));
            for l in &levels {
                let cell = by_level.get(*l).map_or("-".to_string(), |r| {
                    format!("{}/{} {:.2}", r.successes, r.episodes, r.rate)
                });
                s.push_str(&format!("{cell:>14}"));
            }
            s.push('\n');
        }
        s.push_str(&format!("{:<16}", "mean"));
        for l in &levels {
            s.push_str(&format!("{:>14.3}", self.mean[*l]));
        }
        s.push('\n');
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: CotMode,
    /// `None` when the row's checkpoint is missing.
    pub easy: Option<f64>,
    pub hard: Option<f64>,
    pub wall_clock_secs: f64,
    pub checkpoint: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub tool_version: String,
    pub config_hash: String,
    pub tasks: Vec<TaskId>,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn table(&self) -> String {
        let row_name = |m: CotMode| match m {
            CotMode::Full => "full",
            CotMode::NoText => "w/o T",
            CotMode::NoVis => "w/o V",
            CotMode::None => "w/o V & T",
        };
        let cell = |v: Option<f64>| v.map_or("missing".to_string(), |r| format!("{r:.3}"));
        let mut s = format!("{:<12}{:>10}{:>10}{:>10}\n", "row", "easy", "hard", "secs");
        for r in &self.rows {
            s.push_str(&format!(
                "{:<12}{:>10}{:>10}{:>10.1}\n",
                row_name(r.mode),
                cell(r.easy),
                cell(r.hard),
                r.wall_clock_secs
            ));
        }
        s
    }
}

/// Evaluates one model per reasoning mode (full, w/o text, w/o vision, w/o
/// both) on the same seeds. Rows whose model is `None` are marked missing.
#[allow(clippy::too_many_arguments)]
pub fn ablation_suite(
    sim: &Simulator,
    models: &[(CotMode, Option<(&MotModel, String)>)],
    base: &RolloutConfig,
    tasks: &[TaskId],
    episodes: usize,
    base_seed: u64,
    workers: usize,
    config_hash: &str,
) -> Result<AblationTable> {
    let mut rows = Vec::new();
    for mode in CotMode::ALL {
        let entry = models.iter().find(|(m, _)| *m == mode).and_then(|(_, x)| x.as_ref());
        let Some((model, name)) = entry else {
            rows.push(AblationRow {
                mode,
                easy: None,
                hard: None,
                wall_clock_secs: 0.0,
                checkpoint: None,
            });
            continue;
        };
        let clock = Instant::now();
        let cfg = RolloutConfig { mode, ..base.clone() };
        let rep = evaluate(
            sim,
            model,
            &cfg,
            tasks,
            episodes,
            &[Level::Easy, Level::Hard],
            base_seed,
            workers,
            config_hash,
        )?;
        rows.push(AblationRow {
            mode,
            easy: rep.mean.get("easy").copied(),
            hard: rep.mean.get("hard").copied(),
            wall_clock_secs: clock.elapsed().as_secs_f64(),
            checkpoint: Some(name.clone()),
        });
    }
    Ok(AblationTable {
        tool_version: TOOL_VERSION.into(),
        config_hash: config_hash.into(),
        tasks: tasks.to_vec(),
        seeds: seed_schedule(base_seed, episodes),
        rows,
    })
}

/// Writes a PNG grid with one row per chunk: observation, subgoal (grey when
/// absent) and the last executed frame; reasoning goes to a sidecar text file.
pub fn dump_episode_grid(ep: &EpisodeRecord, dir: &Path, stem: &str) -> Result<()> {
    let rows: Vec<[Option<&Image>; 3]> = ep
        .chunks
        .iter()
        .map(|c| [c.observation.as_ref(), c.subgoal.as_ref(), c.last_frame.as_ref()])
        .collect();
    let Some(size) = rows.iter().flatten().flatten().next().map(|im| im.width) else {
        return Err(Error::Input(
            "episode has no stored images; run with keep_images".into(),
        ));
    };
    let (w, h) = (3 * size, rows.len().max(1) * size);
    let mut grid = Image::filled(w, h, [128, 128, 128]);
    for (r, cells) in rows.iter().enumerate() {
        for (c, im) in cells.iter().enumerate() {
            if let Some(im) = im {
                for y in 0..size {
                    let dst = ((r * size + y) * w + c * size) * 3;
                    let src = y * size * 3;
                    grid.data[dst..dst + size * 3].copy_from_slice(&im.data[src..src + size * 3]);
                }
            }
        }
    }
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(format!("{stem}.png")), grid.encode_png()?)?;
    let text: Vec<String> = ep
        .chunks
        .iter()
        .map(|c| {
            format!(
                "step {}: {}",
                c.start_step,
                if c.reasoning.is_empty() { "-" } else { &c.reasoning }
            )
        })
        .collect();
    std::fs::write(dir.join(format!("{stem}.txt")), text.join("\n") + "\n")?;
    Ok(())
}

/// A freshly initialized model sharing `model`'s configuration and codec,
/// used as the untrained reference row.
pub fn untrained_like(model: &MotModel) -> Result<MotModel> {
    MotModel::new(model.config.clone(), model.codec.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ep(valid: bool, success: bool) -> EpisodeRecord {
        EpisodeRecord {
            task: TaskId::StackTwo,
            level: Level::Easy,
            seed: 0,
            mode: CotMode::Full,
            success,
            steps: 1,
            valid,
            error: None,
            chunks: vec![],
        }
    }

    #[test]
    fn rate_accounting() {
        let mut eps: Vec<EpisodeRecord> = (0..20).map(|i| ep(true, i < 3)).collect();
        assert_eq!(Rate::from_episodes(eps.iter()).rate, 0.15);
        eps.push(ep(false, false));
        let r = Rate::from_episodes(eps.iter());
        assert_eq!((r.episodes, r.invalid, r.rate), (20, 1, 0.15));
    }

    #[test]
    fn greedy_choice_respects_allowed_set() {
        let logits = vec![0.0, 5.0, 9.0, 1.0];
        let mut rng = rng_for(0, "t");
        assert_eq!(choose_token(&logits, &[0, 1, 3], 0.0, &mut rng), 1);
        assert_eq!(choose_token(&logits, &[0, 1, 2, 3], 0.0, &mut rng), 2);
    }
}
