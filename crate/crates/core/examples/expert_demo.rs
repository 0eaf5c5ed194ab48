//! Runs the scripted expert on one task and writes the first, middle and
//! last frames as PNGs.
//!
//!     cargo run --example expert_demo -- [task] [level] [seed]

use emcot::envsim::{EnvConfig, Level, Simulator, TaskId, TaskSpec};

fn main() -> emcot::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let task = args
        .first()
        .map(|s| TaskId::parse(s))
        .transpose()?
        .unwrap_or(TaskId::StackTwo);
    let level = args.get(1).map(|s| Level::parse(s)).transpose()?.unwrap_or(Level::Easy);
    let seed = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0);

    let sim = Simulator::new(EnvConfig::default())?;
    let spec = TaskSpec::new(task, level);
    let traj = sim.collect_trajectory(&spec, seed)?;
    println!("{}: \"{}\"", traj.id, spec.instruction);
    println!("{} frames, success {}", traj.len(), traj.success);
    for span in &traj.boundaries {
        println!("  [{:>3}, {:>3}] {}", span.start, span.end, span.subtask);
    }
    for e in &traj.events {
        println!("  frame {:>3}: {:?} {:?}", e.frame, e.arm, e.kind);
    }

    let out = std::env::temp_dir().join("emcot-expert-demo");
    std::fs::create_dir_all(&out)?;
    for t in [0, traj.len() / 2, traj.len() - 1] {
        let path = out.join(format!("frame{t:03}.png"));
        std::fs::write(&path, traj.frames[t].observation.image.encode_png()?)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}
