//! Labels an expert trajectory with per-arm motion primitives and prints the
//! runs of identical labels.

use emcot::envsim::{Arm, EnvConfig, Level, Simulator, TaskId, TaskSpec};
use emcot::primitives::{extract_primitives, Thresholds};

fn main() -> emcot::Result<()> {
    let sim = Simulator::new(EnvConfig::default())?;
    let traj = sim.collect_trajectory(&TaskSpec::new(TaskId::HandoverBlock, Level::Easy), 3)?;
    let table = extract_primitives(&traj, &Thresholds::default())?;
    println!("{} ({} frames)", traj.id, table.len());

    for arm in [Arm::Left, Arm::Right] {
        println!("{arm:?} arm:");
        let mut start = 0;
        for t in 1..=table.len() {
            if t == table.len() || table.get(t, arm) != table.get(start, arm) {
                let l = table.get(start, arm);
                println!(
                    "  [{start:>3}, {:>3}] {:<8} {:<14} {}",
                    t - 1,
                    l.kind.name(),
                    l.direction,
                    l.sentence
                );
                start = t;
            }
        }
    }
    let idle = (0..table.len()).filter(|&t| table.all_idle_at(t)).count();
    println!("{idle} frames with both arms idle");
    Ok(())
}
