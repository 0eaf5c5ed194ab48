//! Pre-trains and fine-tunes a small mixture-of-transformers policy on a few
//! expert demonstrations, entirely in memory, then saves a checkpoint.
//!
//!     cargo run --release --example train_tiny -- [steps] [out.ckpt]

use emcot::annotator::{Annotator, AnnotatorConfig};
use emcot::envsim::{EnvConfig, Image, Level, Simulator, TaskId, TaskSpec};
use emcot::mot::checkpoint::{self, CheckpointMeta};
use emcot::mot::{CodecConfig, LatentCodec, ModelConfig, MotModel};
use emcot::primitives::{extract_primitives, Thresholds};
use emcot::tokenstream::LayoutConfig;
use emcot::training::{generate_vqa, run_stage, RunOptions, StageConfig, TrainingData};

fn main() -> emcot::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let steps = args.first().and_then(|s| s.parse().ok()).unwrap_or(200);
    let out = args
        .get(1)
        .map(Into::into)
        .unwrap_or_else(|| std::env::temp_dir().join("emcot-tiny.ckpt"));

    let sim = Simulator::new(EnvConfig::default())?;
    let spec = TaskSpec::new(TaskId::StackTwo, Level::Easy);
    let trajs = (0..24)
        .map(|s| sim.collect_trajectory(&spec, s))
        .collect::<emcot::Result<Vec<_>>>()?;

    let codec_cfg = CodecConfig {
        channels: 16,
        steps: 300,
        min_images: 100,
        psnr_floor: 0.0,
        ..CodecConfig::default()
    };
    let images: Vec<Image> = trajs
        .iter()
        .flat_map(|t| t.frames.iter().step_by(3).map(|f| f.observation.image.clone()))
        .collect();
    let (codec, report) = LatentCodec::fit(&images, images[0].width, &codec_cfg)?;
    println!("codec held-out psnr {:.1} dB", report.heldout_psnr);

    let config = ModelConfig {
        d_model: 32,
        n_layers: 2,
        n_heads: 2,
        head_dim: 16,
        codec: codec_cfg,
        ..ModelConfig::default()
    };
    let mut model = MotModel::new(config, codec)?;
    println!("{} parameters", model.params.count());

    let annotator = Annotator::template(AnnotatorConfig::default(), "example");
    let records = trajs
        .iter()
        .map(|t| annotator.annotate(t, &extract_primitives(t, &Thresholds::default())?))
        .collect::<emcot::Result<Vec<_>>>()?;
    let vqa = generate_vqa(&sim, 200, 0)?;
    let layout = LayoutConfig {
        context_frames: model.config.context_frames,
        chunk: model.config.chunk,
        ..LayoutConfig::default()
    };
    let data = TrainingData::new(&model, trajs, records, vqa, layout)?;

    for base in [StageConfig::pretrain(), StageConfig::finetune()] {
        let stage = StageConfig {
            steps,
            batch: 8,
            lr: 1e-3,
            warmup: steps / 10,
            log_every: (steps / 10).max(1),
            ..base
        };
        let r = run_stage(&mut model, &data, &stage, RunOptions::default())?;
        let first = &r.losses[0];
        let last = &r.losses[r.losses.len() - 1];
        println!("{}: loss {:.4} -> {:.4}", stage.stage.name(), first.total, last.total);
        if let Some(d) = r.loss_decrease() {
            println!("  moving-average decrease {:.0}%", 100.0 * d);
        }
    }

    let meta = CheckpointMeta {
        stage: "finetune".into(),
        step: steps,
        ..CheckpointMeta::default()
    };
    checkpoint::save(&out, &model, None, &meta)?;
    println!("saved {}", out.display());
    Ok(())
}
