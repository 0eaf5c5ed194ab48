//! Three-stage trajectory annotation (narrative, subtask plan, frame-aligned
//! reasoning) plus per-frame visual subgoal indices.

pub mod client;
pub mod prompts;

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::envsim::{Arm, Level, TaskId, Trajectory};
use crate::error::{Error, Result};
use crate::primitives::{PrimitiveKind, PrimitiveTable};
use crate::util::{sha256_hex, TOOL_VERSION};

pub use client::{ExternalConfig, HttpCompletion, ScriptedCompletion, TextCompletion};

pub const MAX_SUBTASKS: usize = 8;
pub const MAX_REASONING_WORDS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Template,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnnotatorConfig {
    pub backend: BackendKind,
    /// Assign each subtask the last frame of its own span instead of the
    /// first frame of the next one.
    pub goal_shift_back: bool,
    pub goal_keying: GoalKeying,
    pub external: ExternalConfig,
}

impl Default for AnnotatorConfig {
    fn default() -> Self {
        Self {
            backend: BackendKind::Template,
            goal_shift_back: false,
            goal_keying: GoalKeying::ByString,
            external: ExternalConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Narrative(pub String);

impl Narrative {
    pub fn validate(&self) -> Result<()> {
        let t = self.0.trim();
        if t.is_empty() {
            return Err(Error::validation("narrative is empty"));
        }
        if t.lines().any(|l| l.trim().is_empty()) {
            return Err(Error::validation("narrative must be a single paragraph"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SubtaskPlan(pub Vec<String>);

impl SubtaskPlan {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.0.is_empty() || self.0.len() > MAX_SUBTASKS {
            errs.push(format!(
                "plan has {} subtasks, expected 1..={MAX_SUBTASKS}",
                self.0.len()
            ));
        }
        for (i, s) in self.0.iter().enumerate() {
            if s.trim().is_empty() {
                errs.push(format!("subtask {i} is empty"));
            }
            if i > 0 && self.0[i - 1] == *s {
                errs.push(format!("subtask {i} repeats its predecessor '{s}'"));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errs))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignmentEntry {
    pub subtask: String,
    /// Inclusive `[start, end]`.
    pub frame: [usize; 2],
    pub reasoning: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SubtaskAlignment(pub Vec<AlignmentEntry>);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameAnnotation {
    pub subtask: String,
    /// Index of the alignment entry this frame belongs to.
    pub occurrence: usize,
    pub reasoning: String,
    pub goal: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Provenance {
    pub backend: String,
    pub tool_version: String,
    pub config_hash: String,
    pub prompt_hashes: BTreeMap<String, String>,
    pub fallbacks: Vec<String>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EMCoTRecord {
    pub trajectory_id: String,
    pub task: TaskId,
    pub level: Level,
    pub seed: u64,
    pub instruction: String,
    pub length: usize,
    pub narrative: Narrative,
    pub plan: SubtaskPlan,
    pub alignment: SubtaskAlignment,
    pub frames: Vec<FrameAnnotation>,
    pub provenance: Provenance,
}

fn word_count(s: &str) -> usize {
    s.split_whitespace().count()
}

/// Cuts `text` to at most `max_words`, preferring the longest prefix of whole
/// sentences. Falls back to a hard word cut when the first sentence is
/// already too long.
pub fn truncate_reasoning(text: &str, max_words: usize) -> String {
    if word_count(text) <= max_words {
        return text.to_string();
    }
    let mut kept = String::new();
    let mut words = 0;
    let mut rest = text.trim();
    while !rest.is_empty() {
        let cut = rest
            .char_indices()
            .find(|&(i, c)| matches!(c, '.' | '!' | '?') && rest[i + 1..].starts_with(char::is_whitespace))
            .map(|(i, _)| i + 1)
            .unwrap_or(rest.len());
        let sentence = &rest[..cut];
        let n = word_count(sentence);
        if words + n > max_words {
            break;
        }
        if !kept.is_empty() {
            kept.push(' ');
        }
        kept.push_str(sentence.trim());
        words += n;
        rest = rest[cut..].trim_start();
    }
    if kept.is_empty() {
        let mut s = text.split_whitespace().take(max_words).collect::<Vec<_>>().join(" ");
        s.push('.');
        return s;
    }
    kept
}

/// Truncates over-long reasoning in place and returns one warning per entry
/// touched.
pub fn enforce_reasoning_length(alignment: &mut SubtaskAlignment) -> Vec<String> {
    let mut warnings = Vec::new();
    for (k, e) in alignment.0.iter_mut().enumerate() {
        let n = word_count(&e.reasoning);
        if n > MAX_REASONING_WORDS {
            warnings.push(format!("entry {k}: reasoning has {n} words, truncated"));
            e.reasoning = truncate_reasoning(&e.reasoning, MAX_REASONING_WORDS);
        }
    }
    warnings
}

/// Checks ordering, coverage of `[0, len-1]`, plan membership and physical
/// alignment. All problems are reported together.
pub fn validate_alignment(
    alignment: &SubtaskAlignment,
    plan: &SubtaskPlan,
    labels: &PrimitiveTable,
    len: usize,
) -> Result<()> {
    let entries = &alignment.0;
    let mut errs = Vec::new();
    if entries.is_empty() {
        errs.push("alignment has no entries".to_string());
    }
    for (k, e) in entries.iter().enumerate() {
        let [s, t] = e.frame;
        if !plan.0.contains(&e.subtask) {
            errs.push(format!("entry {k}: subtask '{}' is not in the plan", e.subtask));
        }
        if s > t {
            errs.push(format!("entry {k}: start {s} after end {t}"));
        }
        if t >= len {
            errs.push(format!("entry {k}: frame {t} out of range (length {len})"));
        }
        if e.reasoning.trim().is_empty() {
            errs.push(format!("entry {k}: empty reasoning"));
        }
    }
    let mut expected = 0usize;
    for (k, e) in entries.iter().enumerate() {
        let [s, t] = e.frame;
        if s < expected && k > 0 {
            let prev = &entries[k - 1];
            if s <= prev.frame[1] && s >= prev.frame[0] {
                errs.push(format!("entries {} and {k} overlap at frame {s}", k - 1));
            } else {
                errs.push(format!("entry {k} is out of chronological order"));
            }
        } else if s > expected {
            errs.push(format!("frames {expected}..={} are not covered", s - 1));
        }
        expected = expected.max(t.saturating_add(1));
    }
    if !entries.is_empty() && expected < len {
        errs.push(format!("frames {expected}..={} are not covered", len - 1));
    }

    // A subtask may not start while the arms are idle throughout its range;
    // only a trailing all-idle span belonging to the last subtask is allowed.
    if labels.len() == len && errs.is_empty() {
        for (k, e) in entries.iter().enumerate() {
            let [s, t] = e.frame;
            let active = (s..=t).any(|f| !labels.all_idle_at(f));
            let tail = k + 1 == entries.len() && t + 1 == len;
            if !active && !tail {
                errs.push(format!("entry {k}: '{}' covers only idle frames {s}..={t}", e.subtask));
            }
        }
    }
    if errs.is_empty() {
        Ok(())
    } else {
        Err(Error::Validation(errs))
    }
}

/// Per-frame subtask names from a validated alignment.
pub fn frame_subtasks(alignment: &SubtaskAlignment, len: usize) -> Vec<String> {
    let mut out = vec![String::new(); len];
    for e in &alignment.0 {
        for slot in out.iter_mut().take(e.frame[1] + 1).skip(e.frame[0]) {
            *slot = e.subtask.clone();
        }
    }
    out
}

/// How the goal map is keyed when a subtask name occurs in several runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GoalKeying {
    /// One entry per subtask string; a revisited name keeps only its last
    /// assignment for every run.
    #[default]
    ByString,
    /// One entry per contiguous run.
    ByOccurrence,
}

/// Goal frame per frame: each subtask maps to the first frame of whatever
/// follows it (or its own last frame with `shift_back`), and the final
/// subtask maps to the last frame.
pub fn extract_subgoals(subtasks: &[String], keying: GoalKeying, shift_back: bool) -> Vec<usize> {
    let n = subtasks.len();
    if n == 0 {
        return Vec::new();
    }
    // run id per frame
    let mut run = vec![0usize; n];
    for t in 1..n {
        run[t] = run[t - 1] + usize::from(subtasks[t] != subtasks[t - 1]);
    }
    let key = |t: usize| match keying {
        GoalKeying::ByString => (subtasks[t].as_str(), 0),
        GoalKeying::ByOccurrence => ("", run[t]),
    };
    let mut goal: BTreeMap<(&str, usize), usize> = BTreeMap::new();
    for t in 1..n {
        if subtasks[t] != subtasks[t - 1] {
            goal.insert(key(t - 1), if shift_back { t - 1 } else { t });
        }
    }
    goal.insert(key(n - 1), n - 1);
    (0..n).map(|t| goal[&key(t)]).collect()
}

/// Warnings for subtask names that occur in more than one contiguous run.
pub fn revisit_warnings(subtasks: &[String]) -> Vec<String> {
    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    for (t, s) in subtasks.iter().enumerate() {
        if t == 0 || subtasks[t - 1] != *s {
            *seen.entry(s.as_str()).or_default() += 1;
        }
    }
    seen.into_iter()
        .filter(|&(_, runs)| runs > 1)
        .map(|(s, runs)| format!("subtask '{s}' occurs in {runs} separate runs; earlier goal frames are overwritten"))
        .collect()
}

// ---------------------------------------------------------------------------
// Template backend

fn lower_first(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_lowercase().collect::<String>() + c.as_str(),
        None => String::new(),
    }
}

fn upper_first(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().collect::<String>() + c.as_str(),
        None => String::new(),
    }
}

fn object_names(task: TaskId) -> Vec<String> {
    task.required_objects()
        .iter()
        .map(|(c, s)| format!("the {} {}", c.name(), s.name()))
        .collect()
}

fn active_arms(labels: &PrimitiveTable, range: std::ops::RangeInclusive<usize>) -> Vec<Arm> {
    Arm::BOTH
        .into_iter()
        .filter(|&a| range.clone().any(|t| labels.get(t, a).kind != PrimitiveKind::Idle))
        .collect()
}

/// Distinct consecutive primitive phrases of one arm over a frame range.
fn motion_phrases(labels: &PrimitiveTable, arm: Arm, range: std::ops::RangeInclusive<usize>) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for t in range {
        let l = labels.get(t, arm);
        let phrase = match l.kind {
            PrimitiveKind::Idle => continue,
            PrimitiveKind::Move => format!("move {} arm {}", "my", l.direction.replace('-', " and ")),
            PrimitiveKind::Grasp => "close the gripper".to_string(),
            PrimitiveKind::Release => "open the gripper".to_string(),
        };
        if out.last() != Some(&phrase) {
            out.push(phrase);
        }
    }
    out
}

fn join_and(items: &[String]) -> String {
    match items.len() {
        0 => String::new(),
        1 => items[0].clone(),
        n => format!("{} and {}", items[..n - 1].join(", "), items[n - 1]),
    }
}

/// 2-4 sentence chronological summary built from the expert plan and the
/// primitive table.
pub fn template_narrative(traj: &Trajectory, labels: &PrimitiveTable) -> Narrative {
    let steps: Vec<String> = traj.plan.iter().map(|s| lower_first(s)).collect();
    let mut sentences = vec![format!("I {}.", steps.join(", then "))];
    let all = 0..=labels.len().saturating_sub(1);
    match active_arms(labels, all).as_slice() {
        [a] => sentences.push(format!(
            "The {} arm does all of the work while the {} arm stays still.",
            a.name(),
            a.other().name()
        )),
        [_, _] => sentences.push(
            "Both arms take part, with one arm holding the object steady while the other one receives it.".into(),
        ),
        _ => {}
    }
    sentences.push(format!("This leaves the scene so that I {}.", traj.task.instruction));
    Narrative(sentences.join(" "))
}

fn template_reasoning(traj: &Trajectory, labels: &PrimitiveTable, subtask: &str, s: usize, e: usize) -> String {
    let objects = join_and(&object_names(traj.task.task));
    let mut parts = vec![
        format!("I see {objects} on the table."),
        format!("To {}, I now need to {}.", traj.task.instruction, lower_first(subtask)),
    ];
    for arm in active_arms(labels, s..=e) {
        let phrases = motion_phrases(labels, arm, s..=e);
        let shown: Vec<String> = phrases.into_iter().take(3).collect();
        let line = shown
            .join(", then ")
            .replace("my arm", &format!("my {} arm", arm.name()));
        parts.push(format!("{}.", upper_first(&format!("I {line}"))));
    }
    if parts.len() == 2 {
        parts.push("I keep both arms still.".into());
    }
    truncate_reasoning(&parts.join(" "), MAX_REASONING_WORDS)
}

/// Converts the expert's recorded subtask spans into alignment entries.
pub fn template_alignment(traj: &Trajectory, plan: &SubtaskPlan, labels: &PrimitiveTable) -> Result<SubtaskAlignment> {
    if plan.0 != traj.plan {
        return Err(Error::validation("template alignment needs the expert plan"));
    }
    Ok(SubtaskAlignment(
        traj.boundaries
            .iter()
            .map(|b| AlignmentEntry {
                subtask: b.subtask.clone(),
                frame: [b.start, b.end],
                reasoning: template_reasoning(traj, labels, &b.subtask, b.start, b.end),
            })
            .collect(),
    ))
}

// ---------------------------------------------------------------------------
// Reply parsing

/// Removes a surrounding markdown code fence, if any.
fn strip_fence(reply: &str) -> &str {
    let t = reply.trim();
    if let Some(inner) = t.strip_prefix("```") {
        let inner = inner.trim_start_matches(|c: char| c.is_ascii_alphabetic());
        if let Some(body) = inner.trim_end().strip_suffix("```") {
            return body.trim();
        }
    }
    t
}

pub fn parse_narrative_reply(reply: &str) -> Result<Narrative> {
    let n = Narrative(reply.trim().to_string());
    n.validate()?;
    Ok(n)
}

/// Accepts only a JSON list of strings.
pub fn parse_plan_reply(reply: &str) -> Result<SubtaskPlan> {
    let list: Vec<String> = serde_json::from_str(strip_fence(reply)).map_err(|e| Error::Parse {
        message: format!("expected a JSON list of strings: {e}"),
        raw: reply.to_string(),
    })?;
    let plan = SubtaskPlan(list.into_iter().map(|s| s.trim().to_string()).collect());
    plan.validate()?;
    Ok(plan)
}

pub fn parse_alignment_reply(reply: &str) -> Result<SubtaskAlignment> {
    serde_json::from_str(strip_fence(reply)).map_err(|e| Error::Parse {
        message: format!("expected a JSON list of {{subtask, frame, reasoning}} objects: {e}"),
        raw: reply.to_string(),
    })
}

// ---------------------------------------------------------------------------
// Record assembly

/// Validates the pieces and assembles the per-frame view.
pub fn build_emcot_record(
    traj: &Trajectory,
    narrative: Narrative,
    plan: SubtaskPlan,
    alignment: SubtaskAlignment,
    goals: &[usize],
    provenance: Provenance,
) -> Result<EMCoTRecord> {
    narrative.validate()?;
    plan.validate()?;
    let n = traj.len();
    if goals.len() != n {
        return Err(Error::validation(format!(
            "{} goal indices for {n} frames",
            goals.len()
        )));
    }
    if let Some(g) = goals.iter().find(|&&g| g >= n) {
        return Err(Error::validation(format!("goal index {g} out of range")));
    }
    let mut frames = Vec::with_capacity(n);
    for (k, e) in alignment.0.iter().enumerate() {
        for (t, &goal) in goals.iter().enumerate().take(e.frame[1] + 1).skip(e.frame[0]) {
            frames.push(FrameAnnotation {
                subtask: e.subtask.clone(),
                occurrence: k,
                reasoning: e.reasoning.clone(),
                goal,
            });
            debug_assert_eq!(frames.len(), t + 1);
        }
    }
    if frames.len() != n {
        return Err(Error::validation("alignment does not cover the trajectory"));
    }
    Ok(EMCoTRecord {
        trajectory_id: traj.id.clone(),
        task: traj.task.task,
        level: traj.task.level,
        seed: traj.seed,
        instruction: traj.task.instruction.clone(),
        length: n,
        narrative,
        plan,
        alignment,
        frames,
        provenance,
    })
}

// ---------------------------------------------------------------------------
// Pipeline

#[derive(Clone)]
enum Backend {
    Template,
    External(Arc<dyn TextCompletion>),
}

/// Runs the three stages for one trajectory at a time.
#[derive(Clone)]
pub struct Annotator {
    pub config: AnnotatorConfig,
    pub config_hash: String,
    backend: Backend,
}

impl Annotator {
    pub fn template(config: AnnotatorConfig, config_hash: &str) -> Self {
        Self {
            config,
            config_hash: config_hash.into(),
            backend: Backend::Template,
        }
    }

    pub fn with_completion(config: AnnotatorConfig, config_hash: &str, completion: Arc<dyn TextCompletion>) -> Self {
        Self {
            config,
            config_hash: config_hash.into(),
            backend: Backend::External(completion),
        }
    }

    /// Picks the backend named in the config; the external one talks HTTP.
    pub fn from_config(config: AnnotatorConfig, config_hash: &str) -> Self {
        match config.backend {
            BackendKind::Template => Self::template(config, config_hash),
            BackendKind::External => {
                let http = Arc::new(HttpCompletion::from_config(&config.external));
                Self::with_completion(config, config_hash, http)
            }
        }
    }

    pub fn backend_name(&self) -> String {
        match &self.backend {
            Backend::Template => "template".into(),
            Backend::External(c) => c.name(),
        }
    }

    /// Calls the external model up to `1 + max_retries` times until `parse`
    /// accepts a reply.
    fn ask<T>(&self, c: &dyn TextCompletion, prompt: &str, parse: impl Fn(&str) -> Result<T>) -> Result<T> {
        let attempts = self.config.external.max_retries + 1;
        let mut last = Error::Backend("no attempts made".into());
        for attempt in 0..attempts {
            match c.complete(prompt).and_then(|r| parse(&r)) {
                Ok(v) => return Ok(v),
                Err(e) => {
                    log::warn!("annotator attempt {}/{attempts} failed: {e}", attempt + 1);
                    last = e;
                }
            }
        }
        Err(last)
    }

    pub fn generate_narrative(
        &self,
        traj: &Trajectory,
        labels: &PrimitiveTable,
        prov: &mut Provenance,
    ) -> Result<Narrative> {
        if labels.is_empty() {
            return Err(Error::Input("empty primitive table".into()));
        }
        let prompt = prompts::narrative_prompt(&traj.task.instruction, labels);
        prov.prompt_hashes
            .insert("narrative".into(), sha256_hex(prompt.as_bytes()));
        if let Backend::External(c) = &self.backend {
            match self.ask(c.as_ref(), &prompt, parse_narrative_reply) {
                Ok(n) => return Ok(n),
                Err(e) => prov.fallbacks.push(format!("narrative: {e}")),
            }
        }
        Ok(template_narrative(traj, labels))
    }

    pub fn extract_subtasks(
        &self,
        traj: &Trajectory,
        narrative: &Narrative,
        prov: &mut Provenance,
    ) -> Result<SubtaskPlan> {
        narrative.validate()?;
        let prompt = prompts::subtask_prompt(&narrative.0);
        prov.prompt_hashes
            .insert("subtasks".into(), sha256_hex(prompt.as_bytes()));
        if let Backend::External(c) = &self.backend {
            match self.ask(c.as_ref(), &prompt, parse_plan_reply) {
                Ok(p) => return Ok(p),
                Err(e) => prov.fallbacks.push(format!("subtasks: {e}")),
            }
        }
        let plan = SubtaskPlan(traj.plan.clone());
        plan.validate()?;
        Ok(plan)
    }

    /// Returns the alignment together with the plan it is valid against,
    /// which differs from `plan` only when the template fallback had to
    /// substitute the expert plan.
    pub fn align_subtasks(
        &self,
        traj: &Trajectory,
        plan: &SubtaskPlan,
        labels: &PrimitiveTable,
        prov: &mut Provenance,
    ) -> Result<(SubtaskPlan, SubtaskAlignment)> {
        plan.validate()?;
        let n = traj.len();
        let prompt = prompts::alignment_prompt(&traj.task.instruction, &plan.0, labels);
        prov.prompt_hashes
            .insert("alignment".into(), sha256_hex(prompt.as_bytes()));
        if let Backend::External(c) = &self.backend {
            let parse = |r: &str| {
                let mut a = parse_alignment_reply(r)?;
                let warnings = enforce_reasoning_length(&mut a);
                validate_alignment(&a, plan, labels, n)?;
                Ok((a, warnings))
            };
            match self.ask(c.as_ref(), &prompt, parse) {
                Ok((a, warnings)) => {
                    prov.warnings.extend(warnings);
                    return Ok((plan.clone(), a));
                }
                Err(e) => prov.fallbacks.push(format!("alignment: {e}")),
            }
        }
        let plan = if plan.0 == traj.plan {
            plan.clone()
        } else {
            prov.fallbacks
                .push("alignment: replaced plan with the expert plan".into());
            SubtaskPlan(traj.plan.clone())
        };
        let mut a = template_alignment(traj, &plan, labels)?;
        prov.warnings.extend(enforce_reasoning_length(&mut a));
        validate_alignment(&a, &plan, labels, n)?;
        Ok((plan, a))
    }

    pub fn annotate(&self, traj: &Trajectory, labels: &PrimitiveTable) -> Result<EMCoTRecord> {
        if labels.len() != traj.len() {
            return Err(Error::Input(format!(
                "{}: {} label frames for {} trajectory frames",
                traj.id,
                labels.len(),
                traj.len()
            )));
        }
        let mut prov = Provenance {
            backend: self.backend_name(),
            tool_version: TOOL_VERSION.into(),
            config_hash: self.config_hash.clone(),
            ..Default::default()
        };
        let narrative = self.generate_narrative(traj, labels, &mut prov)?;
        let plan = self.extract_subtasks(traj, &narrative, &mut prov)?;
        let (plan, alignment) = self.align_subtasks(traj, &plan, labels, &mut prov)?;
        let subtasks = frame_subtasks(&alignment, traj.len());
        prov.warnings.extend(revisit_warnings(&subtasks));
        let goals = extract_subgoals(&subtasks, self.config.goal_keying, self.config.goal_shift_back);
        build_emcot_record(traj, narrative, plan, alignment, &goals, prov)
    }

    /// Annotates many trajectories on up to `workers` threads (further capped
    /// by the in-flight limit for external backends). Output order follows
    /// input order.
    pub fn annotate_many(&self, items: &[(&Trajectory, &PrimitiveTable)], workers: usize) -> Vec<Result<EMCoTRecord>> {
        let mut cap = workers.max(1);
        if matches!(self.backend, Backend::External(_)) {
            cap = cap.min(self.config.external.max_in_flight.max(1));
        }
        let next = std::sync::atomic::AtomicUsize::new(0);
        let slots: Vec<std::sync::Mutex<Option<Result<EMCoTRecord>>>> =
            items.iter().map(|_| std::sync::Mutex::new(None)).collect();
        std::thread::scope(|s| {
            for _ in 0..cap.min(items.len()) {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                    let Some((traj, labels)) = items.get(i) else { break };
                    *slots[i].lock().unwrap() = Some(self.annotate(traj, labels));
                });
            }
        });
        slots
            .into_iter()
            .map(|m| m.into_inner().unwrap().expect("every slot filled"))
            .collect()
    }
}

pub fn write_records<W: Write>(out: &mut W, records: &[EMCoTRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut *out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_records(text: &str) -> Result<Vec<EMCoTRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envsim::{EnvConfig, Simulator, TaskSpec};
    use crate::primitives::{extract_primitives, ArmLabel, Thresholds};

    fn seq(s: &str) -> Vec<String> {
        s.chars().map(|c| c.to_string()).collect()
    }

    #[test]
    fn subgoal_examples() {
        let lit = |s: &str| extract_subgoals(&seq(s), GoalKeying::ByString, false);
        assert_eq!(lit("AABB"), vec![2, 2, 3, 3]);
        assert_eq!(lit("AAA"), vec![2, 2, 2]);
        // the final assignment overwrites the first run's entry
        assert_eq!(lit("ABA"), vec![2, 2, 2]);
        assert_eq!(
            extract_subgoals(&seq("ABA"), GoalKeying::ByOccurrence, false),
            vec![1, 2, 2]
        );
        assert_eq!(
            extract_subgoals(&seq("AABB"), GoalKeying::ByString, true),
            vec![1, 1, 3, 3]
        );
        assert_eq!(revisit_warnings(&seq("ABA")).len(), 1);
        assert!(revisit_warnings(&seq("AABB")).is_empty());
    }

    fn busy_labels(n: usize) -> PrimitiveTable {
        PrimitiveTable {
            frames: vec![[ArmLabel::new(PrimitiveKind::Move, "forward"), ArmLabel::idle()]; n],
        }
    }

    fn entry(s: &str, a: usize, b: usize) -> AlignmentEntry {
        AlignmentEntry {
            subtask: s.into(),
            frame: [a, b],
            reasoning: "I move.".into(),
        }
    }

    #[test]
    fn overlap_is_reported_at_frame() {
        let plan = SubtaskPlan(vec!["A".into(), "B".into()]);
        let a = SubtaskAlignment(vec![entry("A", 0, 9), entry("B", 9, 19)]);
        let err = validate_alignment(&a, &plan, &busy_labels(20), 20).unwrap_err();
        assert!(err.to_string().contains("overlap at frame 9"), "{err}");
        let ok = SubtaskAlignment(vec![entry("A", 0, 9), entry("B", 10, 19)]);
        validate_alignment(&ok, &plan, &busy_labels(20), 20).unwrap();
        let gap = SubtaskAlignment(vec![entry("A", 0, 8), entry("B", 10, 19)]);
        assert!(validate_alignment(&gap, &plan, &busy_labels(20), 20).is_err());
    }

    #[test]
    fn idle_only_range_rejected_unless_tail() {
        let plan = SubtaskPlan(vec!["A".into(), "B".into()]);
        let mut labels = busy_labels(10);
        for t in 0..4 {
            labels.frames[t] = [ArmLabel::idle(), ArmLabel::idle()];
        }
        let a = SubtaskAlignment(vec![entry("A", 0, 3), entry("B", 4, 9)]);
        assert!(validate_alignment(&a, &plan, &labels, 10).is_err());
        let mut tail = busy_labels(10);
        for t in 6..10 {
            tail.frames[t] = [ArmLabel::idle(), ArmLabel::idle()];
        }
        let a = SubtaskAlignment(vec![entry("A", 0, 5), entry("B", 6, 9)]);
        validate_alignment(&a, &plan, &tail, 10).unwrap();
    }

    #[test]
    fn long_reasoning_truncated_at_sentence() {
        let first = "I see the red block near my left gripper on the table.";
        let long = format!("{first} {}", "word ".repeat(60).trim_end());
        let mut a = SubtaskAlignment(vec![AlignmentEntry {
            subtask: "A".into(),
            frame: [0, 1],
            reasoning: long,
        }]);
        let w = enforce_reasoning_length(&mut a);
        assert_eq!(w.len(), 1);
        assert_eq!(a.0[0].reasoning, first);
    }

    #[test]
    fn plan_reply_shapes() {
        assert!(matches!(parse_plan_reply("Pick up cup"), Err(Error::Parse { .. })));
        let nine: Vec<String> = (0..9).map(|i| format!("step {i}")).collect();
        let reply = serde_json::to_string(&nine).unwrap();
        assert!(matches!(parse_plan_reply(&reply), Err(Error::Validation(_))));
        assert_eq!(
            parse_plan_reply("```json\n[\"a\", \"b\"]\n```").unwrap().0,
            vec!["a", "b"]
        );
    }

    #[test]
    fn template_stack_two_record() {
        let sim = Simulator::new(EnvConfig::default()).unwrap();
        let traj = sim
            .collect_trajectory(&TaskSpec::new(TaskId::StackTwo, Level::Easy), 3)
            .unwrap();
        let labels = extract_primitives(&traj, &Thresholds::default()).unwrap();
        let ann = Annotator::template(AnnotatorConfig::default(), "cfg");
        let rec = ann.annotate(&traj, &labels).unwrap();
        assert!(rec
            .narrative
            .0
            .starts_with("I pick up the red block, then stack it on the blue block."));
        let sentences = rec.narrative.0.matches(". ").count() + 1;
        assert!((2..=4).contains(&sentences));
        assert_eq!(rec.plan.0, vec!["Pick up the red block", "Stack it on the blue block"]);
        assert_eq!(rec.frames.len(), traj.len());
        assert!(rec.provenance.fallbacks.is_empty());
        assert_eq!(rec.provenance.prompt_hashes.len(), 3);
        // goal of the first subtask is the first frame of the second
        let b = &traj.boundaries;
        assert_eq!(rec.frames[0].goal, b[1].start);
        assert_eq!(rec.frames[traj.len() - 1].goal, traj.len() - 1);
        assert_eq!(ann.annotate(&traj, &labels).unwrap(), rec);
    }

    #[test]
    fn external_falls_back_after_retries() {
        let sim = Simulator::new(EnvConfig::default()).unwrap();
        let traj = sim
            .collect_trajectory(&TaskSpec::new(TaskId::PressButton, Level::Easy), 1)
            .unwrap();
        let labels = extract_primitives(&traj, &Thresholds::default()).unwrap();
        let scripted = Arc::new(ScriptedCompletion::ok(&["\n\n"]));
        let ann = Annotator::with_completion(AnnotatorConfig::default(), "cfg", scripted.clone());
        let rec = ann.annotate(&traj, &labels).unwrap();
        assert_eq!(scripted.calls(), 9);
        assert_eq!(rec.provenance.fallbacks.len(), 3);
        assert_eq!(rec.plan.0, traj.plan);
    }
}
