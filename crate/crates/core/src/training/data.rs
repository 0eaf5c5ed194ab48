//! Training corpus: trajectories, their annotations, a VQA pool and cached
//! codec latents, plus the manifest that ties the shards together.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::vqa::{generate_vqa, VqaItem};
use crate::annotator::{read_records, EMCoTRecord};
use crate::envsim::io::read_trajectory;
use crate::envsim::{Action, Simulator, Trajectory};
use crate::error::{Error, Result};
use crate::mot::MotModel;
use crate::tokenstream::{
    action_chunk, assemble_emcot_sequence, assemble_pretrain_sequence, context_indices, CotMode, FrameTokens,
    LayoutConfig, PretrainSample, TokenRecord, Vocabulary,
};
use crate::util::TOOL_VERSION;

pub const MANIFEST_FORMAT: &str = "emcot-dataset/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VqaSpec {
    pub count: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub tool_version: String,
    pub config_hash: String,
    /// Trajectory files, relative to the manifest's directory.
    pub trajectories: Vec<String>,
    /// EM-CoT annotation shards (JSONL), relative to the manifest's directory.
    pub annotations: Vec<String>,
    pub vqa: VqaSpec,
    pub layout: LayoutConfig,
}

impl DatasetManifest {
    pub fn validate(&self, base: &Path) -> Result<()> {
        let mut errs = Vec::new();
        if self.format != MANIFEST_FORMAT {
            errs.push(format!("manifest format '{}' is not {MANIFEST_FORMAT}", self.format));
        }
        if self.trajectories.is_empty() {
            errs.push("manifest lists no trajectories".into());
        }
        for f in self.trajectories.iter().chain(&self.annotations) {
            if !base.join(f).is_file() {
                errs.push(format!("missing shard {f}"));
            }
        }
        if let Err(e) = self.layout.validate() {
            errs.push(e.to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errs))
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&crate::util::read_input(path)?)?)
    }

    /// Reads every shard the manifest at `path` lists and regenerates the VQA pool.
    pub fn load(path: &Path, sim: &Simulator) -> Result<DatasetContents> {
        let manifest = DatasetManifest::read(path)?;
        let base: PathBuf = path.parent().map(Path::to_path_buf).unwrap_or_default();
        manifest.validate(&base)?;
        let mut trajectories = Vec::new();
        for f in &manifest.trajectories {
            trajectories.push(read_trajectory(&base.join(f))?.1);
        }
        let mut records = Vec::new();
        for f in &manifest.annotations {
            records.extend(read_records(&crate::util::read_input(&base.join(f))?)?);
        }
        let vqa = generate_vqa(sim, manifest.vqa.count, manifest.vqa.seed)?;
        Ok(DatasetContents {
            trajectories,
            records,
            vqa,
            layout: manifest.layout,
        })
    }

    pub fn new(
        config_hash: &str,
        trajectories: Vec<String>,
        annotations: Vec<String>,
        vqa: VqaSpec,
        layout: LayoutConfig,
    ) -> Self {
        Self {
            format: MANIFEST_FORMAT.into(),
            tool_version: TOOL_VERSION.into(),
            config_hash: config_hash.into(),
            trajectories,
            annotations,
            vqa,
            layout,
        }
    }
}

pub struct DatasetContents {
    pub trajectories: Vec<Trajectory>,
    pub records: Vec<EMCoTRecord>,
    pub vqa: Vec<VqaItem>,
    pub layout: LayoutConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleKind {
    Vqa,
    Vg,
    Ap,
    Emcot,
}

impl SampleKind {
    pub const ALL: [SampleKind; 4] = [SampleKind::Vqa, SampleKind::Vg, SampleKind::Ap, SampleKind::Emcot];

    pub fn name(self) -> &'static str {
        match self {
            SampleKind::Vqa => "vqa",
            SampleKind::Vg => "vg",
            SampleKind::Ap => "ap",
            SampleKind::Emcot => "emcot",
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainingData {
    pub trajectories: Vec<Trajectory>,
    /// Annotation of each trajectory, when present.
    pub annotations: Vec<Option<EMCoTRecord>>,
    pub vqa: Vec<VqaItem>,
    pub layout: LayoutConfig,
    /// Codec latents per trajectory per frame.
    latents: Vec<Vec<Vec<Vec<f64>>>>,
}

impl TrainingData {
    /// Joins annotations to trajectories by id and caches latents with the
    /// model's codec.
    pub fn new(
        model: &MotModel,
        trajectories: Vec<Trajectory>,
        records: Vec<EMCoTRecord>,
        vqa: Vec<VqaItem>,
        layout: LayoutConfig,
    ) -> Result<Self> {
        layout.validate()?;
        if layout.context_frames != model.config.context_frames || layout.chunk != model.config.chunk {
            return Err(Error::Config(format!(
                "layout (context {}, chunk {}) disagrees with the model (context {}, chunk {})",
                layout.context_frames, layout.chunk, model.config.context_frames, model.config.chunk
            )));
        }
        let mut by_id: HashMap<String, EMCoTRecord> =
            records.into_iter().map(|r| (r.trajectory_id.clone(), r)).collect();
        let annotations = trajectories.iter().map(|t| by_id.remove(&t.id)).collect();
        let latents = trajectories
            .iter()
            .map(|t| {
                t.frames
                    .iter()
                    .map(|f| model.codec.encode(&f.observation.image))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            trajectories,
            annotations,
            vqa,
            layout,
            latents,
        })
    }

    pub fn from_manifest(path: &Path, sim: &Simulator, model: &MotModel) -> Result<Self> {
        let c = DatasetManifest::load(path, sim)?;
        Self::new(model, c.trajectories, c.records, c.vqa, c.layout)
    }

    pub fn annotated(&self) -> Vec<usize> {
        (0..self.trajectories.len())
            .filter(|&i| self.annotations[i].is_some())
            .collect()
    }

    pub fn frame_tokens(&self, model: &MotModel, traj: usize, frame: usize) -> Result<FrameTokens> {
        let image = &self.trajectories[traj].frames[frame].observation.image;
        let mut ft = model.encode_observation_und(image)?;
        ft.clean = self.latents[traj][frame].clone();
        Ok(ft)
    }

    /// Number of samples of `kind` available; zero means the kind cannot be drawn.
    pub fn available(&self, kind: SampleKind) -> usize {
        match kind {
            SampleKind::Vqa => self.vqa.len(),
            SampleKind::Vg | SampleKind::Ap => self.trajectories.len(),
            SampleKind::Emcot => self.annotated().len(),
        }
    }

    /// Draws one sequence of `kind`.
    pub fn draw(
        &self,
        model: &MotModel,
        kind: SampleKind,
        mode: CotMode,
        vocab: &Vocabulary,
        sample_id: u32,
        rng: &mut impl Rng,
    ) -> Result<Vec<TokenRecord>> {
        let layout = &self.layout;
        if self.available(kind) == 0 {
            return Err(Error::Input(format!("no {} samples in the dataset", kind.name())));
        }
        match kind {
            SampleKind::Vqa => {
                let it = &self.vqa[rng.random_range(0..self.vqa.len())];
                let frame = model.encode_observation_und(&it.image)?;
                let s = PretrainSample::Vqa {
                    frame,
                    question: it.question.clone(),
                    answer: it.answer.clone(),
                };
                assemble_pretrain_sequence(&s, layout, vocab, sample_id)
            }
            SampleKind::Vg | SampleKind::Ap => {
                let ti = rng.random_range(0..self.trajectories.len());
                let traj = &self.trajectories[ti];
                let t = rng.random_range(0..traj.len());
                let s = if kind == SampleKind::Vg {
                    let context = context_indices(t, layout.vg_context)
                        .into_iter()
                        .map(|i| self.frame_tokens(model, ti, i))
                        .collect::<Result<_>>()?;
                    let future = self.frame_tokens(model, ti, (t + layout.vg_horizon).min(traj.len() - 1))?;
                    PretrainSample::Vg {
                        instruction: traj.task.instruction.clone(),
                        context,
                        future,
                    }
                } else {
                    let context = context_indices(t, layout.context_frames)
                        .into_iter()
                        .map(|i| self.frame_tokens(model, ti, i))
                        .collect::<Result<_>>()?;
                    let actions: Vec<Action> = traj.frames.iter().map(|f| f.action).collect();
                    PretrainSample::Ap {
                        instruction: traj.task.instruction.clone(),
                        context,
                        proprio: traj.frames[t].observation.proprio,
                        chunk: action_chunk(&actions, t, layout.chunk).0,
                    }
                };
                assemble_pretrain_sequence(&s, layout, vocab, sample_id)
            }
            SampleKind::Emcot => {
                let annotated = self.annotated();
                let ti = annotated[rng.random_range(0..annotated.len())];
                let traj = &self.trajectories[ti];
                let record = self.annotations[ti].as_ref().unwrap();
                let t = rng.random_range(0..traj.len());
                self.emcot_sequence(model, ti, record, t, mode, vocab, sample_id)
            }
        }
    }

    /// EM-CoT sequence at frame `t`; only the frames the layout reads are encoded.
    #[allow(clippy::too_many_arguments)]
    pub fn emcot_sequence(
        &self,
        model: &MotModel,
        ti: usize,
        record: &EMCoTRecord,
        t: usize,
        mode: CotMode,
        vocab: &Vocabulary,
        sample_id: u32,
    ) -> Result<Vec<TokenRecord>> {
        let traj = &self.trajectories[ti];
        let mut frames = vec![
            FrameTokens {
                und: vec![],
                clean: vec![]
            };
            traj.len()
        ];
        let mut needed = context_indices(t, self.layout.context_frames);
        if let Some(f) = record.frames.get(t) {
            needed.push(f.goal);
        }
        for i in needed {
            if i < frames.len() && frames[i].clean.is_empty() {
                frames[i] = self.frame_tokens(model, ti, i)?;
            }
        }
        Ok(assemble_emcot_sequence(record, traj, &frames, t, &self.layout, mode, vocab, sample_id)?.records)
    }
}
