//! Binary-decision samples and head identifiers.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{input_err, Result};
use crate::vocab::{self, TokenId};

/// A (layer, head) pair. Orders layer-major, then head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HeadId {
    pub layer: usize,
    pub head: usize,
}

impl HeadId {
    pub fn new(layer: usize, head: usize) -> Self {
        Self { layer, head }
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.layer >= cfg.num_layers || self.head >= cfg.num_heads {
            return Err(input_err!(
                "head {self} is outside a {}x{} model",
                cfg.num_layers,
                cfg.num_heads
            ));
        }
        Ok(())
    }

    /// All heads of a model in layer-major order.
    pub fn all(cfg: &ModelConfig) -> Vec<HeadId> {
        (0..cfg.num_layers)
            .flat_map(|l| (0..cfg.num_heads).map(move |h| HeadId::new(l, h)))
            .collect()
    }

    pub fn flat_index(&self, cfg: &ModelConfig) -> usize {
        self.layer * cfg.num_heads + self.head
    }
}

impl fmt::Display for HeadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.layer, self.head)
    }
}

/// A head and its negative attention score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadScore {
    #[serde(flatten)]
    pub head: HeadId,
    pub nas: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "pos")]
    Positive,
    #[serde(rename = "neg")]
    Negative,
}

/// Which transformation produced a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Positive,
    Negative,
}

/// One yes/no decision instance.
///
/// `tokens[..instr_len]` is the instruction, which contains the positive
/// candidate at `t_yes` and the negative candidate at `t_no`. The model's
/// answer is read at the position right after the last token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BinarySample {
    pub id: String,
    pub tokens: Vec<TokenId>,
    pub instr_len: usize,
    pub t_yes: usize,
    pub t_no: usize,
    pub label: Label,
    pub origin: Origin,
    pub question: String,
    pub gold: String,
    pub wrong: Option<String>,
}

impl BinarySample {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn positive_token(&self) -> TokenId {
        self.tokens[self.t_yes]
    }

    pub fn negative_token(&self) -> TokenId {
        self.tokens[self.t_no]
    }

    /// Checks the positional invariants and that the candidate slots hold
    /// a positive and a negative candidate token.
    pub fn validate(&self) -> Result<()> {
        let n = self.tokens.len();
        if self.instr_len >= n {
            return Err(input_err!(
                "sample {}: instruction length {} must be below sequence length {n}",
                self.id,
                self.instr_len
            ));
        }
        if self.t_yes >= self.instr_len || self.t_no >= self.instr_len {
            return Err(input_err!(
                "sample {}: candidate positions ({}, {}) must lie inside the instruction",
                self.id,
                self.t_yes,
                self.t_no
            ));
        }
        if self.t_yes == self.t_no {
            return Err(input_err!("sample {}: t_yes equals t_no", self.id));
        }
        if !vocab::is_positive_candidate(self.positive_token()) {
            return Err(input_err!(
                "sample {}: token {:?} at t_yes is not a positive candidate",
                self.id,
                vocab::name(self.positive_token())
            ));
        }
        if !vocab::is_negative_candidate(self.negative_token()) {
            return Err(input_err!(
                "sample {}: token {:?} at t_no is not a negative candidate",
                self.id,
                vocab::name(self.negative_token())
            ));
        }
        Ok(())
    }
}
