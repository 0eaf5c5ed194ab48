//! Builds an embodied chain-of-thought record for one trajectory with the
//! offline template backend and prints the plan, per-subtask reasoning and
//! the subgoal frame of every frame.

use emcot::annotator::{Annotator, AnnotatorConfig};
use emcot::envsim::{EnvConfig, Level, Simulator, TaskId, TaskSpec};
use emcot::primitives::{extract_primitives, Thresholds};

fn main() -> emcot::Result<()> {
    let sim = Simulator::new(EnvConfig::default())?;
    let traj = sim.collect_trajectory(&TaskSpec::new(TaskId::StackTwo, Level::Hard), 1)?;
    let labels = extract_primitives(&traj, &Thresholds::default())?;
    let annotator = Annotator::template(AnnotatorConfig::default(), "example");
    let record = annotator.annotate(&traj, &labels)?;

    println!("instruction: {}", record.instruction);
    println!("narrative:   {}", record.narrative.0);
    println!("plan:");
    for (i, s) in record.plan.0.iter().enumerate() {
        println!("  {i}. {s}");
    }
    println!("alignment:");
    for e in &record.alignment.0 {
        println!(
            "  [{:>3}, {:>3}] {}: {}",
            e.frame[0], e.frame[1], e.subtask, e.reasoning
        );
    }
    let goals: Vec<String> = record.frames.iter().map(|f| f.goal.to_string()).collect();
    println!("goal frame per frame: {}", goals.join(" "));
    if !record.provenance.warnings.is_empty() {
        println!("warnings: {:?}", record.provenance.warnings);
    }
    println!("\n{}", serde_json::to_string(&record.alignment).unwrap());
    Ok(())
}
