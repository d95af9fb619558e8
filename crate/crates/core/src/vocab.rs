//! Fixed symbolic vocabulary shared by the toy model and the dataset builders.
//!
//! Text is whitespace-separated token names; there is no subword tokenizer.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{input_err, Result};

pub type TokenId = u32;

const NAMES: &[&str] = &[
    "<pad>", "<bos>", "<eos>", "<unknown>", //
    "0", "1", "2", "3", "4", "5", "6", "7", "8", "9", //
    "+", "-", "*", "=", "?", ":", //
    "Is", "the", "answer", "or", "You", "MUST", "given", "question", "shortly", "asked",
    "demands", "clear", "a", "and", "are", "you", "that", //
    "Yes", "No", "True", "False", "Correct", "Wrong", //
    "Question:", "Answer:", //
    "A", "B", "C", "D", "E", "F", "G", "H",
];

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
/// Emitted by a model that declines to answer a short-answer prompt.
pub const ABSTAIN: TokenId = 3;
pub const DIGIT_ZERO: TokenId = 4;

/// Number of ids with a fixed meaning; `vocab_size` must be at least this.
pub const RESERVED: usize = NAMES.len();

/// The three (positive, negative) candidate pairs the templates can use.
pub const CANDIDATE_PAIRS: [(&str, &str); 3] =
    [("Yes", "No"), ("True", "False"), ("Correct", "Wrong")];

pub fn id(name: &str) -> Option<TokenId> {
    NAMES.iter().position(|n| *n == name).map(|p| p as TokenId)
}

pub fn name(id: TokenId) -> &'static str {
    NAMES.get(id as usize).copied().unwrap_or("<unused>")
}

pub fn digit(d: u32) -> TokenId {
    debug_assert!(d < 10);
    DIGIT_ZERO + d
}

/// Inverse of [`digit`].
pub fn as_digit(id: TokenId) -> Option<u32> {
    (DIGIT_ZERO..DIGIT_ZERO + 10)
        .contains(&id)
        .then(|| id - DIGIT_ZERO)
}

pub fn is_positive_candidate(id: TokenId) -> bool {
    CANDIDATE_PAIRS
        .iter()
        .any(|(p, _)| self::id(p) == Some(id))
}

pub fn is_negative_candidate(id: TokenId) -> bool {
    CANDIDATE_PAIRS
        .iter()
        .any(|(_, n)| self::id(n) == Some(id))
}

pub fn encode(text: &str) -> Result<Vec<TokenId>> {
    text.split_whitespace()
        .map(|w| id(w).ok_or_else(|| input_err!("token {w:?} is not in the vocabulary")))
        .collect()
}

/// Looks up a string that must be exactly one token.
pub fn single(text: &str) -> Result<TokenId> {
    let toks = encode(text)?;
    match toks.as_slice() {
        [t] => Ok(*t),
        _ => Err(input_err!("{text:?} is not a single token")),
    }
}

pub fn decode(tokens: &[TokenId]) -> String {
    let mut out = String::new();
    for (i, t) in tokens.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(name(*t));
    }
    out
}
