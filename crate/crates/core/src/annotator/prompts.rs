//! The three annotation prompts, rendered as plain text with slot substitution.

use crate::envsim::Arm;
use crate::primitives::PrimitiveTable;

fn frame_lines(labels: &PrimitiveTable, indent: &str) -> String {
    let mut out = String::new();
    for t in 0..labels.len() {
        out.push_str(&format!(
            "{indent}{}. Frame_id:{t}, Left arm action:{}, Right arm action:{}\n",
            t + 1,
            labels.get(t, Arm::Left).sentence,
            labels.get(t, Arm::Right).sentence,
        ));
    }
    out
}

pub fn narrative_prompt(instruction: &str, labels: &PrimitiveTable) -> String {
    format!(
        "You are an expert roboticist analyzing a human or robot demonstration. Your task is to write a SINGLE, COHERENT, HIGH-LEVEL NARRATIVE paragraph that STRICTLY follows the TEMPORAL ORDER.\n\
\n\
- Overall Goal: {instruction}\n\
- Per-frame low-level actions are provided for context only\u{2014}DO NOT copy or list them.\n\
- Low-level Arm Actions:\n\
{frames}\
\n\
Instructions:\n\
1. Describe the task step by step in exact chronological order.\n\
2. Explicitly state simultaneous bimanual actions (e.g., \"At the same time, the left hand stabilizes... while the right hand unscrews...\").\n\
3. Focus on purpose: explain what each action achieves toward the goal.\n\
4. Use specific object names when identifiable.\n\
\n\
Output Rules: Produce exactly one fluent paragraph (2\u{2013}4 sentences). Output ONLY the narrative. No markdown, bullets, or extra text.\n",
        frames = frame_lines(labels, "  "),
    )
}

pub fn subtask_prompt(narrative: &str) -> String {
    format!(
        "You are an expert in robotic task analysis. Based on the task narrative below, decompose the task into a sequence of HIGH-SEMANTIC, GOAL-ORIENTED SUBTASKS.\n\
\n\
- Task Narrative: {narrative}\n\
\n\
Instructions:\n\
1. Split the narrative into discrete subtasks in strict chronological order.\n\
2. Represent coordinated bimanual actions as ONE subtask (never split).\n\
3. Express high-level intent (e.g., \"Assemble the lid onto the container\"), not low-level motions (e.g., \"move\", \"grab\").\n\
4. Use imperative, active voice; keep the list short (typically 2\u{2013}5 subtasks).\n\
\n\
Output Format: Return ONLY a JSON list of strings. Example: [\"Pick up red cup\", \"Pour water into cup\"]\n"
    )
}

pub fn alignment_prompt(instruction: &str, plan: &[String], labels: &PrimitiveTable) -> String {
    let subtasks: String = plan
        .iter()
        .enumerate()
        .map(|(i, s)| format!("  {}. {s}\n", i + 1))
        .collect();
    format!(
        "You are the autonomous onboard controller of a robot. You are currently executing a task. Describe your reasoning in the FIRST PERSON (\"I\", \"me\").\n\
\n\
- Overall Goal: {instruction}\n\
- Planned Subtask Sequence:\n\
{subtasks}\
- Low-level Arm Actions:\n\
{frames}\
\n\
Instructions:\n\
1. For each segment, explain your internal decision-making logic from a first-person view.\n\
2. Include: (a) visual observation, (b) goal-driven inference, (c) movement logic.\n\
3. Ensure physical alignment: do not claim a subtask has started if low-level logs show idle.\n\
4. Keep reasoning under 50 words per segment; account for every frame.\n\
\n\
Output Format: Return ONLY a JSON list of objects with keys: \"subtask\", \"frame\" (as [start, end]), and \"reasoning\".\n",
        frames = frame_lines(labels, "  "),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::primitives::{ArmLabel, PrimitiveKind};

    fn toy_labels() -> PrimitiveTable {
        PrimitiveTable {
            frames: vec![
                [ArmLabel::idle(), ArmLabel::idle()],
                [ArmLabel::new(PrimitiveKind::Move, "forward"), ArmLabel::idle()],
                [ArmLabel::new(PrimitiveKind::Grasp, ""), ArmLabel::idle()],
            ],
        }
    }

    #[test]
    fn narrative_prompt_renders_three_frame_toy_input() {
        let p = narrative_prompt("stack the red block on the blue block", &toy_labels());
        let expected = "You are an expert roboticist analyzing a human or robot demonstration. Your task is to write a SINGLE, COHERENT, HIGH-LEVEL NARRATIVE paragraph that STRICTLY follows the TEMPORAL ORDER.

- Overall Goal: stack the red block on the blue block
- Per-frame low-level actions are provided for context only\u{2014}DO NOT copy or list them.
- Low-level Arm Actions:
  1. Frame_id:0, Left arm action:keep the arm still, Right arm action:keep the arm still
  2. Frame_id:1, Left arm action:move the arm forward, Right arm action:keep the arm still
  3. Frame_id:2, Left arm action:close the gripper to grasp, Right arm action:keep the arm still

Instructions:
1. Describe the task step by step in exact chronological order.
2. Explicitly state simultaneous bimanual actions (e.g., \"At the same time, the left hand stabilizes... while the right hand unscrews...\").
3. Focus on purpose: explain what each action achieves toward the goal.
4. Use specific object names when identifiable.

Output Rules: Produce exactly one fluent paragraph (2\u{2013}4 sentences). Output ONLY the narrative. No markdown, bullets, or extra text.
";
        assert_eq!(p, expected);
        assert!(p.contains("Overall Goal:"));
        assert_eq!(p.matches("Frame_id:").count(), 3);
    }

    #[test]
    fn alignment_prompt_lists_plan() {
        let plan = vec![
            "Pick up the red block".to_string(),
            "Stack it on the blue block".to_string(),
        ];
        let p = alignment_prompt("stack", &plan, &toy_labels());
        assert!(p.contains("  1. Pick up the red block\n  2. Stack it on the blue block\n"));
        assert!(p.contains("keys: \"subtask\", \"frame\""));
    }
}
