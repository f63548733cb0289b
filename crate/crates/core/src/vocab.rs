//! Token vocabulary.
//!
//! Ids `0..=9` are the digit tokens, so a digit token's id is its value.
//! Operators and markers follow; every id from [`FIRST_FREE`] up to the
//! vocabulary size is a free "scratch" token with no task meaning.

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PLUS: TokenId = 10;
pub const TIMES: TokenId = 11;
pub const BOS: TokenId = 12;
pub const EOS: TokenId = 13;
pub const ANSWER_MARK: TokenId = 14;
pub const HINT_MARK: TokenId = 15;
pub const PERTURB_MARK: TokenId = 16;
pub const FIRST_FREE: TokenId = 17;

/// Smallest vocabulary holding every reserved id plus one free token.
pub const MIN_VOCAB_SIZE: usize = FIRST_FREE as usize + 1;

pub const DEFAULT_VOCAB_SIZE: usize = 32;

pub fn is_digit(t: TokenId) -> bool {
    t <= 9
}

pub fn digit(d: u32) -> TokenId {
    debug_assert!(d <= 9);
    d
}

pub fn is_operator(t: TokenId) -> bool {
    t == PLUS || t == TIMES
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocabulary {
    size: usize,
}

impl Vocabulary {
    pub fn new(size: usize) -> Result<Self> {
        if size < MIN_VOCAB_SIZE {
            return Err(Error::invalid(format!(
                "vocabulary size {size} is below the minimum {MIN_VOCAB_SIZE}"
            )));
        }
        Ok(Self { size })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn contains(&self, t: TokenId) -> bool {
        (t as usize) < self.size
    }

    pub fn reserved() -> [TokenId; FIRST_FREE as usize] {
        std::array::from_fn(|i| i as TokenId)
    }

    /// Short human-readable name, used by the `select` demo output.
    pub fn name(t: TokenId) -> String {
        match t {
            0..=9 => t.to_string(),
            PLUS => "+".into(),
            TIMES => "*".into(),
            BOS => "<bos>".into(),
            EOS => "<eos>".into(),
            ANSWER_MARK => "<ans>".into(),
            HINT_MARK => "<hint>".into(),
            PERTURB_MARK => "<perturb>".into(),
            other => format!("<f{}>", other - FIRST_FREE),
        }
    }
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self {
            size: DEFAULT_VOCAB_SIZE,
        }
    }
}

pub fn render(tokens: &[TokenId]) -> String {
    tokens
        .iter()
        .map(|&t| Vocabulary::name(t))
        .collect::<Vec<_>>()
        .join(" ")
}
