//! Closed token vocabulary shared by instructions, queries, answers, and
//! actions. Action tokens live in the same id space as words so one head
//! can emit either.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use crate::gridworld::{Action, Category, Color, RoomType};

/// Every non-special word the templates can produce.
const WORDS: &[&str] = &[
    // Instruction templates.
    "walk", "to", "into", "the", "pass", "and", "stop", "then", "turn", "around",
    // Query templates.
    "what", "color", "was", "you", "passed", "recall", "of", "saw", "did", "see",
    "before", "after", "or", "seen", "type", "room", "are", "in", "now", "which",
    "is", "on", "your", "left", "right", "does", "sit", "adjacent", "this", "can",
    "enter", "directly", "from", "comes", "next", "route", "will",
    // Answers not covered above.
    "yes", "no",
];

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const MAP: u32 = 3;
pub const QRY: u32 = 4;
pub const ANS: u32 = 5;
/// First action token id; the four actions are contiguous.
pub const ACTION_BASE: u32 = 6;

const SPECIALS: &[&str] = &["<PAD>", "<BOS>", "<EOS>", "<MAP>", "<QRY>", "<ANS>"];
const ACTION_TOKENS: &[&str] = &["<FWD>", "<LEFT>", "<RIGHT>", "<STOP>"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnknownToken(pub String);

impl fmt::Display for UnknownToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "token not in vocabulary: {}", self.0)
    }
}

impl core::error::Error for UnknownToken {}

/// Fixed id assignment: specials, then action tokens, then room types,
/// categories, colors, then the word list.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: BTreeMap<String, u32>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Vocabulary::standard()
    }
}

impl Vocabulary {
    pub fn standard() -> Vocabulary {
        let mut tokens: Vec<String> = Vec::new();
        tokens.extend(SPECIALS.iter().map(|s| s.to_string()));
        tokens.extend(ACTION_TOKENS.iter().map(|s| s.to_string()));
        tokens.extend(RoomType::ALL.iter().map(|r| r.name().to_string()));
        tokens.extend(Category::ALL.iter().map(|c| c.name().to_string()));
        tokens.extend(Color::ALL.iter().map(|c| c.name().to_string()));
        tokens.extend(WORDS.iter().map(|s| s.to_string()));
        let mut ids = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            let prev = ids.insert(t.clone(), i as u32);
            debug_assert!(prev.is_none(), "duplicate token {t}");
        }
        Vocabulary { tokens, ids }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Result<u32, UnknownToken> {
        self.ids
            .get(token)
            .copied()
            .ok_or_else(|| UnknownToken(token.to_string()))
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, words: &[String]) -> Result<Vec<u32>, UnknownToken> {
        words.iter().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Result<Vec<String>, UnknownToken> {
        ids.iter()
            .map(|&i| {
                self.token(i)
                    .map(|s| s.to_string())
                    .ok_or_else(|| UnknownToken(alloc::format!("#{i}")))
            })
            .collect()
    }

    pub fn action_token(&self, action: Action) -> u32 {
        ACTION_BASE
            + match action {
                Action::Forward => 0,
                Action::TurnLeft => 1,
                Action::TurnRight => 2,
                Action::Stop => 3,
            }
    }

    pub fn action_from_index(&self, index: usize) -> Action {
        [Action::Forward, Action::TurnLeft, Action::TurnRight, Action::Stop][index]
    }

    /// The four action token ids in fixed order.
    pub fn action_ids(&self) -> [u32; 4] {
        [ACTION_BASE, ACTION_BASE + 1, ACTION_BASE + 2, ACTION_BASE + 3]
    }
}
