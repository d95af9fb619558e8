//! Negative Attention Score.
//!
//! For one head and one sample,
//! `NAS = Σ_{i ≥ instr_len} (A[i,yes] + A[i,no]) · ln(A[i,no] / A[i,yes])`
//! over the prompt positions at or after the end of the instruction, with
//! both attention operands floored at 1e-12. A head scores high when it puts
//! a lot of attention on the two answer candidates and prefers the negative
//! one. The single-head score averages over a sample set; the model score
//! sums single-head scores over every head.

use alloc::vec::Vec;

use crate::error::{input_err, Result};
use crate::model::{AttentionStack, ModelState};
use crate::sample::{BinarySample, HeadId, HeadScore};
use crate::scalar::PROB_FLOOR;

#[inline]
fn floor(a: f64) -> f64 {
    if a < PROB_FLOOR {
        PROB_FLOOR
    } else {
        a
    }
}

/// NAS of one `seq_len × seq_len` attention matrix on `sample`.
pub fn nas_sample_head(attn: &[f64], sample: &BinarySample) -> Result<f64> {
    let n = sample.tokens.len();
    if attn.len() != n * n {
        return Err(input_err!(
            "attention matrix has {} entries, sample {} needs {n}x{n}",
            attn.len(),
            sample.id
        ));
    }
    sample.validate()?;
    let mut total = 0.0;
    for i in sample.instr_len..n {
        let yes = floor(attn[i * n + sample.t_yes]);
        let no = floor(attn[i * n + sample.t_no]);
        total += (yes + no) * libm::log(no / yes);
    }
    Ok(total)
}

/// Per-sample NAS of every head, computed from one forward pass per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct NasMatrix {
    /// Column order: layer-major, then head.
    pub heads: Vec<HeadId>,
    /// One row per sample.
    pub rows: Vec<Vec<f64>>,
}

impl NasMatrix {
    pub fn compute(model: &ModelState, samples: &[BinarySample]) -> Result<Self> {
        let heads = HeadId::all(model.config());
        let rows = samples
            .iter()
            .map(|s| {
                let stack = model.attention(&s.tokens)?;
                stack_scores(&stack, s)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { heads, rows })
    }

    /// Single-head NAS of every head over the sample set.
    pub fn head_means(&self) -> Result<Vec<f64>> {
        if self.rows.is_empty() {
            return Err(input_err!("NAS needs a non-empty sample set"));
        }
        let n = self.rows.len() as f64;
        Ok((0..self.heads.len())
            .map(|h| self.rows.iter().map(|r| r[h]).sum::<f64>() / n)
            .collect())
    }

    /// Model NAS of each sample on its own.
    pub fn per_sample_model(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn table(&self) -> Result<Vec<HeadScore>> {
        Ok(self
            .heads
            .iter()
            .zip(self.head_means()?)
            .map(|(&head, nas)| HeadScore { head, nas })
            .collect())
    }

    pub fn model(&self) -> Result<f64> {
        Ok(self.head_means()?.iter().sum())
    }
}

/// NAS of every head of one stack, layer-major.
pub fn stack_scores(stack: &AttentionStack, sample: &BinarySample) -> Result<Vec<f64>> {
    stack.heads().map(|(_, a)| nas_sample_head(a, sample)).collect()
}

fn non_empty(samples: &[BinarySample]) -> Result<()> {
    if samples.is_empty() {
        return Err(input_err!("NAS needs a non-empty sample set"));
    }
    Ok(())
}

/// Mean NAS of one head over `samples`.
pub fn single_head_nas(samples: &[BinarySample], model: &ModelState, head: HeadId) -> Result<f64> {
    non_empty(samples)?;
    head.validate(model.config())?;
    let mut total = 0.0;
    for s in samples {
        let stack = model.attention(&s.tokens)?;
        total += nas_sample_head(stack.head(head), s)?;
    }
    Ok(total / samples.len() as f64)
}

/// Sum of single-head NAS over every head.
pub fn model_nas(samples: &[BinarySample], model: &ModelState) -> Result<f64> {
    non_empty(samples)?;
    NasMatrix::compute(model, samples)?.model()
}

/// One score per head, layer-major.
pub fn nas_table(samples: &[BinarySample], model: &ModelState) -> Result<Vec<HeadScore>> {
    non_empty(samples)?;
    NasMatrix::compute(model, samples)?.table()
}

/// `layer,head,nas` CSV with six decimals.
pub fn nas_table_csv(table: &[HeadScore]) -> alloc::string::String {
    use core::fmt::Write;
    let mut s = alloc::string::String::from("layer,head,nas\n");
    for h in table {
        let _ = writeln!(s, "{},{},{:.6}", h.head.layer, h.head.head, h.nas);
    }
    s
}
