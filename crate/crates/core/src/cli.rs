//! Command-line front end. Every subcommand loads a [`RunConfig`], does one
//! pipeline stage and writes artifacts stamped with the config hash.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use crate::annotator::{write_records, Annotator};
use crate::config::RunConfig;
use crate::envsim::io::{read_trajectory, write_trajectory, ImageEncoding};
use crate::envsim::{Image, Level, Simulator, TaskId, TaskSpec, Trajectory};
use crate::error::{Error, Result};
use crate::inference::{ablation_suite, dump_episode_grid, evaluate, run_episode, untrained_like};
use crate::mot::{checkpoint, CodecConfig, LatentCodec, MotModel};
use crate::primitives::{extract_primitives, write_label_lines};
use crate::tokenstream::{
    build_attention_mask, canonical_toy_sequence, mask_to_csv, mask_to_pgm, CotMode, TokenRecord,
};
use crate::training::{run_stage, DatasetManifest, RunOptions, StageConfig, TrainingData, VqaSpec};
use crate::util::{par_map, read_input, TOOL_VERSION};

#[derive(Debug, Parser)]
#[command(
    name = "emcot",
    version,
    about = "Embodied chain-of-thought policy: data, training and evaluation"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration (TOML); defaults apply to anything it omits.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Dotted override, e.g. `--set pretrain.steps=500`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Maximum parallel episodes or annotation calls.
    #[arg(long, global = true, default_value_t = 1)]
    pub workers: usize,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Collect scripted-expert trajectories and their primitive labels.
    SynthEnvData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Annotate trajectories with reasoning, subtasks and subgoal indices.
    Annotate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a dataset manifest over trajectory and annotation shards.
    BuildDataset {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        annotations: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the latent codec and run the pre-training stage.
    Pretrain {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue an interrupted run from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Fine-tune a pre-trained checkpoint on EM-CoT samples.
    Finetune {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Reasoning regime; overrides `finetune.mode`.
        #[arg(long)]
        mode: Option<String>,
    },
    /// Run one closed-loop episode.
    Rollout {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "stack_two")]
        task: String,
        #[arg(long, default_value = "easy")]
        level: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write an image grid and reasoning text here.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Success rates over a paired seed schedule.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        episodes: Option<usize>,
        /// Comma-separated, e.g. `easy,hard`.
        #[arg(long)]
        levels: Option<String>,
        #[arg(long)]
        tasks: Option<String>,
        #[arg(long)]
        out: PathBuf,
        /// Also evaluate an untrained model with the same configuration.
        #[arg(long)]
        baseline: bool,
    },
    /// The four-row reasoning ablation on shared seeds.
    Ablate {
        /// `mode=path` pairs; modes are full, no_text, no_vis, none.
        #[arg(long = "checkpoint", value_name = "MODE=PATH")]
        checkpoints: Vec<String>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        tasks: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump an attention mask as PGM or CSV.
    InspectMask {
        /// Built-in sequence; `emcot` is the canonical eight-record layout.
        #[arg(long)]
        demo: Option<String>,
        /// A JSON array of token records.
        #[arg(long)]
        sequence: Option<PathBuf>,
        #[arg(long, default_value = "csv")]
        format: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parses `argv`, runs the command and returns the process exit code:
/// 0 on success, 1 on usage or validation errors, 2 on runtime failures.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(std::io::stdout(), "{e}");
                return 0;
            }
            eprint!("{e}");
            eprintln!("{}", json!({"error": "usage", "message": e.kind().to_string()}));
            return 1;
        }
    };
    match run(cli) {
        Ok(summary) => {
            // a null summary means the command already wrote its payload to stdout
            if !summary.is_null() {
                let _ = writeln!(std::io::stdout(), "{summary}");
            }
            0
        }
        Err(e) => {
            eprintln!("{}", json!({"error": e.kind(), "message": e.to_string()}));
            if e.is_user_error() {
                1
            } else {
                2
            }
        }
    }
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(v)? + "\n")?;
    Ok(())
}

fn parse_list<T>(raw: &str, parse: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    raw.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse(s.trim()))
        .collect()
}

pub fn run(cli: Cli) -> Result<serde_json::Value> {
    let cfg = RunConfig::load(cli.common.config.as_deref(), &cli.common.overrides)?;
    let workers = cli.common.workers.max(1);
    match cli.command {
        Command::SynthEnvData { out } => synth_env_data(&cfg, &out, workers),
        Command::Annotate { data, out } => annotate(&cfg, &data, &out, workers),
        Command::BuildDataset { data, annotations, out } => build_dataset(&cfg, &data, &annotations, &out),
        Command::Pretrain { dataset, out, resume } => {
            let r = train(&cfg, &cfg.pretrain, &dataset, None, resume.as_deref(), &out)?;
            Ok(r)
        }
        Command::Finetune {
            dataset,
            init,
            out,
            resume,
            mode,
        } => {
            let mut stage = cfg.finetune.clone();
            if let Some(m) = mode {
                stage.mode = CotMode::parse(&m)?;
            }
            train(&cfg, &stage, &dataset, Some(&init), resume.as_deref(), &out)
        }
        Command::Rollout {
            checkpoint: ckpt,
            task,
            level,
            seed,
            out,
            dump,
        } => {
            let (model, _, _) = checkpoint::load(&ckpt, None)?;
            let sim = Simulator::new(cfg.env.clone())?;
            let spec = TaskSpec::new(TaskId::parse(&task)?, Level::parse(&level)?);
            let mut rc = cfg.rollout.clone();
            rc.keep_images |= dump.is_some();
            let ep = run_episode(&sim, &model, &rc, &spec, seed)?;
            if let Some(dir) = &dump {
                dump_episode_grid(&ep, dir, &format!("{}-{}-{seed}", spec.task.name(), spec.level.name()))?;
            }
            let v = json!({"tool_version": TOOL_VERSION, "config_hash": cfg.hash(), "episode": ep});
            if let Some(p) = &out {
                write_json(p, &v)?;
            }
            Ok(json!({"success": ep.success, "steps": ep.steps, "valid": ep.valid}))
        }
        Command::Evaluate {
            checkpoint: ckpt,
            episodes,
            levels,
            tasks,
            out,
            baseline,
        } => {
            let (model, _, _) = checkpoint::load(&ckpt, None)?;
            let sim = Simulator::new(cfg.env.clone())?;
            let levels = match levels {
                Some(l) => parse_list(&l, Level::parse)?,
                None => cfg.eval.levels.clone(),
            };
            let tasks = match tasks {
                Some(t) => parse_list(&t, TaskId::parse)?,
                None => cfg.eval.tasks.clone(),
            };
            let n = episodes.unwrap_or(cfg.eval.episodes);
            let hash = cfg.hash();
            let rep = evaluate(
                &sim,
                &model,
                &cfg.rollout,
                &tasks,
                n,
                &levels,
                cfg.eval.base_seed,
                workers,
                &hash,
            )?;
            let mut summary = json!({"report": out.display().to_string(), "mean": rep.mean});
            let mut doc = json!({"trained": rep});
            if baseline {
                let base = untrained_like(&model)?;
                let b = evaluate(
                    &sim,
                    &base,
                    &cfg.rollout,
                    &tasks,
                    n,
                    &levels,
                    cfg.eval.base_seed,
                    workers,
                    &hash,
                )?;
                summary["baseline_mean"] = json!(b.mean);
                doc["untrained"] = json!(b);
            }
            write_json(&out, &doc)?;
            Ok(summary)
        }
        Command::Ablate {
            checkpoints,
            episodes,
            tasks,
            out,
        } => {
            let mut models: Vec<(CotMode, Option<(MotModel, String)>)> = Vec::new();
            for spec in &checkpoints {
                let (m, p) = spec
                    .split_once('=')
                    .ok_or_else(|| Error::Input(format!("--checkpoint expects MODE=PATH, got '{spec}'")))?;
                let mode = CotMode::parse(m)?;
                let path = PathBuf::from(p);
                // a missing file leaves a gap in the table rather than failing
                let loaded = if path.is_file() {
                    Some((checkpoint::load(&path, None)?.0, p.to_string()))
                } else {
                    None
                };
                models.push((mode, loaded));
            }
            let refs: Vec<(CotMode, Option<(&MotModel, String)>)> = models
                .iter()
                .map(|(m, x)| (*m, x.as_ref().map(|(mm, p)| (mm, p.clone()))))
                .collect();
            let sim = Simulator::new(cfg.env.clone())?;
            let tasks = match tasks {
                Some(t) => parse_list(&t, TaskId::parse)?,
                None => cfg.eval.tasks.clone(),
            };
            let n = episodes.unwrap_or(cfg.eval.episodes);
            let table = ablation_suite(
                &sim,
                &refs,
                &cfg.rollout,
                &tasks,
                n,
                cfg.eval.base_seed,
                workers,
                &cfg.hash(),
            )?;
            write_json(&out, &table)?;
            eprint!("{}", table.table());
            Ok(json!({"report": out.display().to_string(), "rows": table.rows}))
        }
        Command::InspectMask {
            demo,
            sequence,
            format,
            out,
        } => {
            let records: Vec<TokenRecord> = match (demo.as_deref(), sequence) {
                (Some("emcot"), None) => canonical_toy_sequence(),
                (Some(other), None) => return Err(Error::Input(format!("unknown demo '{other}'; known: emcot"))),
                (None, Some(p)) => serde_json::from_str(&read_input(&p)?)?,
                _ => return Err(Error::Input("give exactly one of --demo or --sequence".into())),
            };
            let mask = build_attention_mask(&records, &cfg.layout.mask);
            let bytes = match format.as_str() {
                "csv" => mask_to_csv(&mask).into_bytes(),
                "pgm" => mask_to_pgm(&mask),
                other => return Err(Error::Input(format!("unknown format '{other}'; use csv or pgm"))),
            };
            match out {
                Some(p) => {
                    fs::write(&p, &bytes)?;
                    Ok(json!({"records": records.len(), "allowed": mask.count(), "out": p.display().to_string()}))
                }
                None => {
                    let mut o = std::io::stdout().lock();
                    match o.write_all(&bytes).and_then(|_| o.flush()) {
                        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => return Err(e.into()),
                        _ => {}
                    }
                    Ok(serde_json::Value::Null)
                }
            }
        }
    }
}

const TRAJ_DIR: &str = "trajectories";

/// Collects every (task, level, episode) the data config asks for. Episodes
/// where the scripted expert fails are skipped and counted.
pub fn synth_env_data(cfg: &RunConfig, out: &Path, workers: usize) -> Result<serde_json::Value> {
    let sim = Simulator::new(cfg.env.clone())?;
    let hash = cfg.hash();
    let dir = out.join(TRAJ_DIR);
    fs::create_dir_all(&dir)?;
    let jobs: Vec<(TaskSpec, u64)> = cfg
        .data
        .tasks
        .iter()
        .flat_map(|&t| cfg.data.levels.iter().map(move |&l| TaskSpec::new(t, l)))
        .flat_map(|s| (0..cfg.data.episodes as u64).map(move |k| (s.clone(), cfg.data.seed + k)))
        .collect();
    let results = par_map(&jobs, workers, |(spec, seed)| Ok(sim.collect_trajectory(spec, *seed)))?;
    let mut kept = Vec::new();
    let mut failed = Vec::new();
    for ((spec, seed), r) in jobs.iter().zip(results) {
        match r {
            Ok(t) => kept.push(t),
            Err(e) => failed.push(
                json!({"task": spec.task.name(), "level": spec.level.name(), "seed": seed, "error": e.to_string()}),
            ),
        }
    }
    let mut labels = Vec::new();
    for t in &kept {
        write_trajectory(&dir.join(format!("{}.jsonl", t.id)), t, &hash, ImageEncoding::PngBase64)?;
        write_label_lines(&mut labels, &t.id, &extract_primitives(t, &cfg.thresholds)?)?;
    }
    fs::write(out.join("labels.jsonl"), labels)?;
    let summary = json!({
        "tool_version": TOOL_VERSION,
        "config_hash": hash,
        "trajectories": kept.len(),
        "failed": failed,
    });
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Trajectory files under `data`, sorted by name.
pub fn trajectory_files(data: &Path) -> Result<Vec<PathBuf>> {
    let dir = data.join(TRAJ_DIR);
    let mut files: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| Error::Input(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Input(format!("no trajectories under {}", dir.display())));
    }
    Ok(files)
}

pub fn load_trajectories(data: &Path) -> Result<Vec<Trajectory>> {
    trajectory_files(data)?
        .iter()
        .map(|p| Ok(read_trajectory(p)?.1))
        .collect()
}

pub fn annotate(cfg: &RunConfig, data: &Path, out: &Path, workers: usize) -> Result<serde_json::Value> {
    let trajs = load_trajectories(data)?;
    let labels = trajs
        .iter()
        .map(|t| extract_primitives(t, &cfg.thresholds))
        .collect::<Result<Vec<_>>>()?;
    let annotator = Annotator::from_config(cfg.annotator.clone(), &cfg.hash());
    let items: Vec<_> = trajs.iter().zip(&labels).collect();
    let mut records = Vec::new();
    let mut failed = BTreeMap::new();
    for (t, r) in trajs.iter().zip(annotator.annotate_many(&items, workers)) {
        match r {
            Ok(rec) => records.push(rec),
            Err(e) => {
                log::warn!("{}: {e}", t.id);
                failed.insert(t.id.clone(), e.to_string());
            }
        }
    }
    let mut buf = Vec::new();
    write_records(&mut buf, &records)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(out, buf)?;
    Ok(
        json!({"config_hash": cfg.hash(), "backend": annotator.backend_name(), "records": records.len(), "failed": failed}),
    )
}

fn relative_to(path: &Path, base: &Path) -> String {
    let abs = |p: &Path| fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf());
    let (p, b) = (abs(path), abs(base));
    p.strip_prefix(&b)
        .map(Path::to_path_buf)
        .unwrap_or(p)
        .display()
        .to_string()
}

pub fn build_dataset(cfg: &RunConfig, data: &Path, annotations: &[PathBuf], out: &Path) -> Result<serde_json::Value> {
    let base = out
        .parent()
        .filter(|d| !d.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(base)?;
    let trajs: Vec<String> = trajectory_files(data)?.iter().map(|p| relative_to(p, base)).collect();
    let anns: Vec<String> = annotations.iter().map(|p| relative_to(p, base)).collect();
    let manifest = DatasetManifest::new(
        &cfg.hash(),
        trajs,
        anns,
        VqaSpec {
            count: cfg.data.vqa_count,
            seed: cfg.data.vqa_seed,
        },
        cfg.layout.clone(),
    );
    manifest.validate(base)?;
    manifest.write(out)?;
    Ok(
        json!({"manifest": out.display().to_string(), "trajectories": manifest.trajectories.len(), "annotations": manifest.annotations.len()}),
    )
}

/// Fits the codec on every `stride`-th frame of `trajs`.
pub fn fit_codec(trajs: &[Trajectory], image_size: usize, codec: &CodecConfig, stride: usize) -> Result<LatentCodec> {
    let images: Vec<Image> = trajs
        .iter()
        .flat_map(|t| {
            t.frames
                .iter()
                .step_by(stride.max(1))
                .map(|f| f.observation.image.clone())
        })
        .collect();
    let (codec, report) = LatentCodec::fit(&images, image_size, codec)?;
    log::info!(
        "codec: held-out PSNR {:.2} dB on {} images",
        report.heldout_psnr,
        report.images
    );
    Ok(codec)
}

/// Runs one training stage. Without `init` or `resume` a fresh model is
/// built and its codec fitted on the dataset's frames.
pub fn train(
    cfg: &RunConfig,
    stage: &StageConfig,
    dataset: &Path,
    init: Option<&Path>,
    resume: Option<&Path>,
    out: &Path,
) -> Result<serde_json::Value> {
    let sim = Simulator::new(cfg.env.clone())?;
    let contents = DatasetManifest::load(dataset, &sim)?;
    let (mut model, resume_state) = match (resume, init) {
        (Some(p), _) => {
            let (m, opt, meta) = checkpoint::load(p, None)?;
            if meta.stage != stage.stage.name() {
                return Err(Error::Input(format!(
                    "{} is a {} checkpoint, not {}",
                    p.display(),
                    meta.stage,
                    stage.stage.name()
                )));
            }
            let opt = opt.ok_or_else(|| Error::Input(format!("{} has no optimizer state", p.display())))?;
            (m, Some((opt, meta.step)))
        }
        (None, Some(p)) => (checkpoint::load(p, None)?.0, None),
        (None, None) => {
            let codec = fit_codec(
                &contents.trajectories,
                cfg.model.image_size,
                &cfg.model.codec,
                cfg.data.codec_frame_stride,
            )?;
            (MotModel::new(cfg.model.clone(), codec)?, None)
        }
    };
    let data = TrainingData::new(
        &model,
        contents.trajectories,
        contents.records,
        contents.vqa,
        contents.layout,
    )?;
    fs::create_dir_all(out)?;
    let opts = RunOptions {
        out_dir: Some(out.to_path_buf()),
        config_hash: cfg.hash(),
        resume: resume_state,
        stop_at: None,
    };
    let report = run_stage(&mut model, &data, stage, opts)?;
    Ok(json!({
        "stage": stage.stage.name(),
        "steps": report.steps,
        "final_loss": report.losses.last().map(|l| l.total),
        "loss_decrease": report.loss_decrease(),
        "checkpoints": report.checkpoints,
    }))
}
