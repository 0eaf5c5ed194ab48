//! Character-plus-wordlist tokenizer with the control tokens used to delimit
//! reasoning, subgoal and action spans.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::short_hash;

pub const MAX_VOCAB: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Special {
    ThinkStart,
    ThinkEnd,
    VisionStart,
    VisionEnd,
    ActionStart,
    ActionEnd,
    SubtaskStart,
    SubtaskEnd,
    PlanStart,
    PlanEnd,
    MoveStart,
    MoveEnd,
    Bos,
    Pad,
}

impl Special {
    pub const ALL: [Special; 14] = [
        Special::ThinkStart,
        Special::ThinkEnd,
        Special::VisionStart,
        Special::VisionEnd,
        Special::ActionStart,
        Special::ActionEnd,
        Special::SubtaskStart,
        Special::SubtaskEnd,
        Special::PlanStart,
        Special::PlanEnd,
        Special::MoveStart,
        Special::MoveEnd,
        Special::Bos,
        Special::Pad,
    ];

    pub fn text(self) -> &'static str {
        match self {
            Special::ThinkStart => "<think_start>",
            Special::ThinkEnd => "<think_end>",
            Special::VisionStart => "<vision_start>",
            Special::VisionEnd => "<vision_end>",
            Special::ActionStart => "<action_start>",
            Special::ActionEnd => "<action_end>",
            Special::SubtaskStart => "<subtask_start>",
            Special::SubtaskEnd => "<subtask_end>",
            Special::PlanStart => "<plan_start>",
            Special::PlanEnd => "<plan_end>",
            Special::MoveStart => "<move_start>",
            Special::MoveEnd => "<move_end>",
            Special::Bos => "<bos>",
            Special::Pad => "<pad>",
        }
    }
}

/// Accepted on input, never produced.
const ALIASES: [(&str, Special); 2] = [
    ("<visual_start>", Special::VisionStart),
    ("<visual_end>", Special::VisionEnd),
];

/// Words that get a single id, both bare and with a leading space.
const WORDS: &[&str] = &[
    // objects and scene
    "red", "blue", "green", "yellow", "purple", "orange", "cyan", "block", "blocks", "button", "buttons", "zone",
    "table", "scene", "object", "objects", "gripper", "arm", "arms", "left", "right", "both",
    // task and plan phrasing
    "stack", "Stack", "pick", "Pick", "up", "place", "Place", "put", "hand", "from", "the", "The", "to", "To", "on",
    "of", "it", "into", "in", "with", "press", "Press", "sweep", "Push", "push", "Pass", "pass", "Reach", "reach",
    "above", "behind", "Lower", "lower", "this", "This", // narrative and reasoning
    "I", "see", "now", "need", "then", "move", "my", "forward", "backward", "down", "and", "close", "open", "keep",
    "still", "does", "all", "work", "while", "stays", "take", "part", "one", "holding", "steady", "other", "receives",
    "leaves", "so", "that", "next", "goal", "state", // visual question answering
    "What", "what", "color", "is", "How", "how", "many", "are", "there", "Is", "which", "Which", "side", "held", "by",
    "anything", "nothing", "yes", "no", "zero", "two", "three", "four", "five", "pressed", "not", "closer", "closest",
    "nearest", "half", "top", "bottom", "front", "back", "Q:", "A:",
];

/// Table coordinates in half-unit steps, emitted with a leading space.
fn number_tokens() -> Vec<String> {
    (0..=32).map(|i| format!(" {:.1}", i as f64 * 0.5)).collect()
}

#[derive(Debug, Clone)]
pub struct Vocabulary {
    pieces: Vec<String>,
    lookup: HashMap<String, u32>,
    special_base: u32,
    max_piece: usize,
}

impl Vocabulary {
    /// The fixed desk-scale vocabulary: printable ASCII characters, the word
    /// list, coordinate numbers, then control tokens.
    pub fn standard() -> Self {
        let mut pieces: Vec<String> = (0x20u8..0x7f).map(|b| (b as char).to_string()).collect();
        pieces.push("\n".into());
        let add = |p: String, pieces: &mut Vec<String>| {
            if !pieces.contains(&p) {
                pieces.push(p);
            }
        };
        for w in WORDS {
            add(w.to_string(), &mut pieces);
            add(format!(" {w}"), &mut pieces);
        }
        for n in number_tokens() {
            add(n, &mut pieces);
        }
        let special_base = pieces.len() as u32;
        for s in Special::ALL {
            pieces.push(s.text().to_string());
        }
        assert!(pieces.len() <= MAX_VOCAB, "vocabulary has {} entries", pieces.len());
        let lookup = pieces.iter().enumerate().map(|(i, p)| (p.clone(), i as u32)).collect();
        let max_piece = pieces.iter().map(|p| p.len()).max().unwrap_or(1);
        Self {
            pieces,
            lookup,
            special_base,
            max_piece,
        }
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn special(&self, s: Special) -> u32 {
        self.special_base + Special::ALL.iter().position(|&x| x == s).unwrap() as u32
    }

    pub fn is_special(&self, id: u32) -> bool {
        id >= self.special_base && (id as usize) < self.pieces.len()
    }

    pub fn as_special(&self, id: u32) -> Option<Special> {
        self.is_special(id)
            .then(|| Special::ALL[(id - self.special_base) as usize])
    }

    /// Ids of plain text pieces (everything that is not a control token).
    pub fn base_ids(&self) -> std::ops::Range<u32> {
        0..self.special_base
    }

    pub fn piece(&self, id: u32) -> Option<&str> {
        self.pieces.get(id as usize).map(|s| s.as_str())
    }

    /// Identifies the vocabulary in checkpoints.
    pub fn fingerprint(&self) -> String {
        short_hash(self.pieces.join("\u{1}").as_bytes())
    }

    /// Greedy longest match. Control tokens (and their aliases) are matched
    /// as literal text.
    pub fn tokenize(&self, text: &str) -> Result<Vec<u32>> {
        let bytes = text.as_bytes();
        let mut out = Vec::new();
        let mut i = 0;
        'outer: while i < bytes.len() {
            if bytes[i] == b'<' {
                for (alias, s) in ALIASES {
                    if text[i..].starts_with(alias) {
                        out.push(self.special(s));
                        i += alias.len();
                        continue 'outer;
                    }
                }
            }
            let c = text[i..].chars().next().unwrap();
            if !(c.is_ascii_graphic() || c == ' ' || c == '\n') {
                return Err(Error::Input(format!("unsupported character {c:?} in text")));
            }
            let longest = self.max_piece.min(bytes.len() - i);
            for len in (1..=longest).rev() {
                if let Some(piece) = text.get(i..i + len) {
                    if let Some(&id) = self.lookup.get(piece) {
                        out.push(id);
                        i += len;
                        continue 'outer;
                    }
                }
            }
            unreachable!("every printable ASCII character is a piece");
        }
        Ok(out)
    }

    pub fn detokenize(&self, ids: &[u32]) -> Result<String> {
        let mut s = String::new();
        for &id in ids {
            s.push_str(
                self.piece(id)
                    .ok_or_else(|| Error::Input(format!("token id {id} outside vocabulary")))?,
            );
        }
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn size_and_disjointness() {
        let v = Vocabulary::standard();
        assert!(v.len() <= MAX_VOCAB);
        for s in Special::ALL {
            assert!(v.is_special(v.special(s)));
            assert!(!v.base_ids().contains(&v.special(s)));
        }
    }

    #[test]
    fn round_trip_and_alias() {
        let v = Vocabulary::standard();
        let text = "I pick up the red block, then stack it on the blue block. x=3.5 {weird}~";
        let ids = v.tokenize(text).unwrap();
        assert_eq!(v.detokenize(&ids).unwrap(), text);
        assert!(ids.len() < text.len() / 2);
        let alias = v.tokenize("<visual_start>").unwrap();
        assert_eq!(alias, vec![v.special(Special::VisionStart)]);
        assert!(v.tokenize("caf\u{e9}").is_err());
    }
}
