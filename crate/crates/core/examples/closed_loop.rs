//! Runs one closed-loop episode and prints the reasoning emitted at each
//! chunk. Loads a checkpoint when given one (for example the output of the
//! train_tiny example); otherwise uses a randomly initialised model, which
//! still produces well-formed output thanks to constrained decoding.
//!
//!     cargo run --release --example closed_loop -- [model.ckpt]

use emcot::envsim::{EnvConfig, Level, Simulator, TaskId, TaskSpec};
use emcot::inference::{dump_episode_grid, run_episode, RolloutConfig};
use emcot::mot::checkpoint;
use emcot::mot::{CodecConfig, LatentCodec, ModelConfig, MotModel};

fn main() -> emcot::Result<()> {
    let model = match std::env::args().nth(1) {
        Some(path) => checkpoint::load(path.as_ref(), None)?.0,
        None => {
            let config = ModelConfig {
                d_model: 32,
                n_layers: 2,
                n_heads: 2,
                head_dim: 16,
                codec: CodecConfig {
                    channels: 16,
                    ..CodecConfig::default()
                },
                ..ModelConfig::default()
            };
            let codec = LatentCodec::new(config.image_size, &config.codec)?;
            MotModel::new(config, codec)?
        }
    };
    let sim = Simulator::new(EnvConfig::default())?;
    let task = TaskSpec::new(TaskId::StackTwo, Level::Easy);
    let cfg = RolloutConfig {
        step_limit: 96,
        keep_images: true,
        chunk: model.config.chunk,
        ..RolloutConfig::default()
    };
    let ep = run_episode(&sim, &model, &cfg, &task, 1000)?;

    println!(
        "\"{}\": success {}, {} steps, valid {}",
        task.instruction, ep.success, ep.steps, ep.valid
    );
    for c in &ep.chunks {
        let flag = if c.forced_transition { " (forced)" } else { "" };
        println!("  step {:>3}: {}{flag}", c.start_step, c.reasoning);
    }
    let dir = std::env::temp_dir().join("emcot-closed-loop");
    std::fs::create_dir_all(&dir)?;
    dump_episode_grid(&ep, &dir, "episode")?;
    println!("observation / subgoal grid under {}", dir.display());
    Ok(())
}
