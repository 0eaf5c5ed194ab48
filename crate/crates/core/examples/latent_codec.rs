//! Fits the patch autoencoder on rendered frames and writes an original and
//! reconstructed frame side by side.

use emcot::envsim::{EnvConfig, Image, Level, Simulator, TaskId, TaskSpec};
use emcot::mot::{CodecConfig, LatentCodec};

fn main() -> emcot::Result<()> {
    let sim = Simulator::new(EnvConfig::default())?;
    let mut images: Vec<Image> = Vec::new();
    for seed in 0..12 {
        let t = sim.collect_trajectory(&TaskSpec::new(TaskId::StackTwo, Level::Hard), seed)?;
        images.extend(t.frames.iter().step_by(4).map(|f| f.observation.image.clone()));
    }
    let cfg = CodecConfig {
        channels: 16,
        steps: 400,
        min_images: 100,
        psnr_floor: 0.0,
        ..CodecConfig::default()
    };
    let size = images[0].width;
    let (codec, report) = LatentCodec::fit(&images, size, &cfg)?;
    println!(
        "{} images, {} latent cells of {} channels",
        report.images,
        codec.cells(),
        codec.channels
    );
    println!(
        "psnr train {:.2} dB, held out {:.2} dB",
        report.train_psnr, report.heldout_psnr
    );
    let curve = &report.loss_curve;
    println!("loss {:.5} -> {:.5}", curve[0], curve[curve.len() - 1]);

    let original = &images[images.len() - 1];
    let back = codec.round_trip(original)?;
    let mut data = Vec::with_capacity(original.data.len() * 2);
    for r in 0..size {
        let row = r * size * 3..(r + 1) * size * 3;
        data.extend_from_slice(&original.data[row.clone()]);
        data.extend_from_slice(&back.data[row]);
    }
    let both = Image {
        width: 2 * size,
        height: size,
        data,
    };
    let path = std::env::temp_dir().join("emcot-codec.png");
    std::fs::write(&path, both.encode_png()?)?;
    println!("wrote {}", path.display());
    Ok(())
}
