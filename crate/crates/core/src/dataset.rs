//! Binary-decision dataset construction.
//!
//! Short-answer records are turned into positive samples (the gold answer in
//! the verification slot) and negative samples (a wrong answer in the slot).
//! A modular-addition generator supplies the records, wrong answers come from
//! deterministic rules, and "does the model know this?" is an exact-match
//! oracle over the model's greedy short answer.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{input_err, Error, Result};
use crate::model::ModelState;
use crate::sample::{BinarySample, Label, Origin};
use crate::vocab::{self, TokenId};

/// A short-answer question with its gold answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaRecord {
    pub id: String,
    pub question: String,
    pub gold: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wrong: Option<String>,
    pub task_tag: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BodyFormat {
    /// The question is already a yes/no question.
    YesNo,
    /// `<question> Is the answer <x> ?`
    AnswerVerification,
}

/// A solved exemplar shown before the question in few-shot prompts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exemplar {
    pub question: String,
    /// Answer placed in the verification slot (ignored for yes/no bodies).
    pub shown: String,
    pub label: Label,
}

/// Instruction text with `{pos}` and `{neg}` slots, the candidate pair, and
/// optional few-shot exemplars.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub name: String,
    pub instruction: String,
    pub positive_candidate: String,
    pub negative_candidate: String,
    pub body_format: BodyFormat,
    #[serde(default)]
    pub few_shot: Vec<Exemplar>,
}

/// Instruction wordings.
pub const INSTRUCTION_A: &str = "You MUST answer {pos} or {neg} :";
pub const INSTRUCTION_B: &str =
    "You are asked a question that demands a clear {pos} or {neg} answer :";
/// Prompt used to elicit a short answer.
pub const SHORT_ANSWER_INSTRUCTION: &str = "You MUST answer shortly :";

impl PromptTemplate {
    /// Builds one of the bundled templates.
    ///
    /// Names look like `a-yes-no`, `b-true-false` or `a-correct-wrong-rev`;
    /// the letter picks the instruction wording, the middle the candidate
    /// pair, and `-rev` lists the negative candidate first.
    pub fn builtin(name: &str) -> Result<Self> {
        let (base, reversed) = match name.strip_suffix("-rev") {
            Some(b) => (b, true),
            None => (name, false),
        };
        let (instr, pair) = base
            .split_once('-')
            .ok_or_else(|| Error::Template(format!("unknown template {name:?}")))?;
        let instruction = match instr {
            "a" => INSTRUCTION_A,
            "b" => INSTRUCTION_B,
            _ => return Err(Error::Template(format!("unknown instruction in {name:?}"))),
        };
        let (pos, neg) = match pair {
            "yes-no" => ("Yes", "No"),
            "true-false" => ("True", "False"),
            "correct-wrong" => ("Correct", "Wrong"),
            _ => return Err(Error::Template(format!("unknown candidate pair in {name:?}"))),
        };
        let instruction = if reversed {
            instruction
                .replace("{pos}", "{tmp}")
                .replace("{neg}", "{pos}")
                .replace("{tmp}", "{neg}")
        } else {
            instruction.to_string()
        };
        let t = Self {
            name: name.to_string(),
            instruction,
            positive_candidate: pos.to_string(),
            negative_candidate: neg.to_string(),
            body_format: BodyFormat::AnswerVerification,
            few_shot: Vec::new(),
        };
        t.validate()?;
        Ok(t)
    }

    /// The plain zero-shot template (`a-yes-no`).
    pub fn default_yes_no() -> Self {
        Self::builtin("a-yes-no").expect("bundled template")
    }

    /// Names of every bundled template.
    pub fn builtin_names() -> Vec<String> {
        let mut out = Vec::new();
        for instr in ["a", "b"] {
            for pair in ["yes-no", "true-false", "correct-wrong"] {
                for rev in ["", "-rev"] {
                    out.push(format!("{instr}-{pair}{rev}"));
                }
            }
        }
        out
    }

    pub fn with_few_shot(mut self, exemplars: Vec<Exemplar>) -> Self {
        self.few_shot = exemplars;
        self
    }

    fn candidates(&self) -> Result<(TokenId, TokenId)> {
        let single = |s: &str| {
            vocab::single(s)
                .map_err(|_| Error::Template(format!("candidate {s:?} is not a single vocabulary token")))
        };
        let pos = single(&self.positive_candidate)?;
        let neg = single(&self.negative_candidate)?;
        if !vocab::is_positive_candidate(pos) || !vocab::is_negative_candidate(neg) {
            return Err(Error::Template(format!(
                "{:?}/{:?} is not a known positive/negative candidate pair",
                self.positive_candidate, self.negative_candidate
            )));
        }
        Ok((pos, neg))
    }

    /// Renders the instruction and reports the candidate positions.
    pub fn render_instruction(&self) -> Result<(Vec<TokenId>, usize, usize)> {
        let (pos, neg) = self.candidates()?;
        let mut tokens = Vec::new();
        let mut t_yes = None;
        let mut t_no = None;
        for word in self.instruction.split_whitespace() {
            let tok = match word {
                "{pos}" => {
                    if t_yes.replace(tokens.len()).is_some() {
                        return Err(Error::Template("{pos} slot appears twice".into()));
                    }
                    pos
                }
                "{neg}" => {
                    if t_no.replace(tokens.len()).is_some() {
                        return Err(Error::Template("{neg} slot appears twice".into()));
                    }
                    neg
                }
                w => {
                    let t = vocab::single(w).map_err(|e| Error::Template(e.to_string()))?;
                    if t == pos || t == neg {
                        return Err(Error::Template(format!(
                            "candidate {w:?} appears outside its slot"
                        )));
                    }
                    t
                }
            };
            tokens.push(tok);
        }
        match (t_yes, t_no) {
            (Some(y), Some(n)) => Ok((tokens, y, n)),
            _ => Err(Error::Template("instruction needs both {pos} and {neg} slots".into())),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.render_instruction().map(|_| ())
    }
}

/// Question tokens plus the answer shown in the verification slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleParts {
    pub question: Vec<TokenId>,
    pub shown: Option<TokenId>,
}

/// An assembled prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assembled {
    pub tokens: Vec<TokenId>,
    pub instr_len: usize,
    pub t_yes: usize,
    pub t_no: usize,
    /// Index of the first token of the final question.
    pub question_start: usize,
}

fn body_tokens(format: BodyFormat, question: &[TokenId], shown: Option<TokenId>) -> Result<Vec<TokenId>> {
    let mut out = question.to_vec();
    if format == BodyFormat::AnswerVerification {
        let shown = shown.ok_or_else(|| input_err!("answer-verification body needs a shown answer"))?;
        out.extend(vocab::encode("Is the answer").expect("static text"));
        out.push(shown);
        out.push(vocab::single("?").expect("static text"));
    }
    Ok(out)
}

/// Lays out `[instruction][exemplars][question]`.
pub fn assemble_prompt(parts: &SampleParts, template: &PromptTemplate, max_len: usize) -> Result<Assembled> {
    let (mut tokens, t_yes, t_no) = template.render_instruction()?;
    let instr_len = tokens.len();
    let check = |section: &'static str, len: usize| {
        if len > max_len {
            Err(Error::Length {
                section,
                len,
                max: max_len,
            })
        } else {
            Ok(())
        }
    };
    check("instruction", tokens.len())?;
    let (pos, neg) = template.candidates()?;
    for ex in &template.few_shot {
        let q = vocab::encode(&ex.question)?;
        let shown = match template.body_format {
            BodyFormat::AnswerVerification => Some(vocab::single(&ex.shown)?),
            BodyFormat::YesNo => None,
        };
        tokens.push(vocab::single("Question:").expect("static text"));
        tokens.extend(body_tokens(template.body_format, &q, shown)?);
        tokens.push(vocab::single("Answer:").expect("static text"));
        tokens.push(match ex.label {
            Label::Positive => pos,
            Label::Negative => neg,
        });
    }
    check("few-shot exemplars", tokens.len())?;
    let question_start = tokens.len();
    tokens.extend(body_tokens(template.body_format, &parts.question, parts.shown)?);
    check("question", tokens.len())?;
    Ok(Assembled {
        tokens,
        instr_len,
        t_yes,
        t_no,
        question_start,
    })
}

fn build_sample(
    record: &QaRecord,
    template: &PromptTemplate,
    shown: &str,
    label: Label,
    max_len: usize,
) -> Result<BinarySample> {
    template.candidates()?;
    let question = vocab::encode(&record.question)?;
    let shown_tok = vocab::single(shown)?;
    let a = assemble_prompt(
        &SampleParts {
            question,
            shown: Some(shown_tok),
        },
        template,
        max_len,
    )?;
    let (origin, suffix) = match label {
        Label::Positive => (Origin::Positive, "pos"),
        Label::Negative => (Origin::Negative, "neg"),
    };
    let sample = BinarySample {
        id: format!("{}-{suffix}", record.id),
        tokens: a.tokens,
        instr_len: a.instr_len,
        t_yes: a.t_yes,
        t_no: a.t_no,
        label,
        origin,
        question: record.question.clone(),
        gold: record.gold.clone(),
        wrong: match label {
            Label::Positive => None,
            Label::Negative => Some(shown.to_string()),
        },
    };
    sample.validate()?;
    Ok(sample)
}

/// Confirmatory query with the gold answer; label Positive.
pub fn make_positive(record: &QaRecord, template: &PromptTemplate, max_len: usize) -> Result<BinarySample> {
    build_sample(record, template, &record.gold, Label::Positive, max_len)
}

/// Confirmatory query with the wrong answer; label Negative.
pub fn make_negative(record: &QaRecord, template: &PromptTemplate, max_len: usize) -> Result<BinarySample> {
    let wrong = record
        .wrong
        .as_deref()
        .ok_or_else(|| input_err!("record {} has no wrong answer", record.id))?;
    if wrong == record.gold {
        return Err(input_err!(
            "record {}: wrong answer equals the gold answer {wrong:?}",
            record.id
        ));
    }
    build_sample(record, template, wrong, Label::Negative, max_len)
}

/// Deterministic wrong-answer rules.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WrongLabelRule {
    /// `(gold + 1) mod modulus`.
    NumericNext { modulus: u32 },
    /// `(gold + k) mod modulus` with `k ∈ 1..modulus` drawn from a hash of
    /// the record id and the seed.
    NumericSeeded { modulus: u32 },
    /// The option following the gold answer in lexicographic order, wrapping.
    CategoricalNext { options: Vec<String> },
}

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

pub fn derive_wrong_label(record: &QaRecord, rule: &WrongLabelRule, seed: u64) -> Result<String> {
    let numeric = |modulus: u32| -> Result<u32> {
        if modulus < 2 {
            return Err(Error::Generation(format!(
                "modulus {modulus} leaves no alternative answer"
            )));
        }
        let g: u32 = record.gold.parse().map_err(|_| {
            Error::Generation(format!("gold answer {:?} is not numeric", record.gold))
        })?;
        if g >= modulus {
            return Err(Error::Generation(format!(
                "gold answer {g} is outside 0..{modulus}"
            )));
        }
        Ok(g)
    };
    match rule {
        WrongLabelRule::NumericNext { modulus } => {
            let g = numeric(*modulus)?;
            Ok(((g + 1) % modulus).to_string())
        }
        WrongLabelRule::NumericSeeded { modulus } => {
            let g = numeric(*modulus)?;
            let k = 1 + (mix64(fnv1a(&record.id) ^ mix64(seed)) % (*modulus as u64 - 1)) as u32;
            Ok(((g + k) % modulus).to_string())
        }
        WrongLabelRule::CategoricalNext { options } => {
            let sorted: BTreeSet<&str> = options.iter().map(String::as_str).collect();
            if sorted.len() < 2 {
                return Err(Error::Generation(format!(
                    "task has {} distinct options; no alternative exists",
                    sorted.len()
                )));
            }
            if !sorted.contains(record.gold.as_str()) {
                return Err(Error::Generation(format!(
                    "gold answer {:?} is not among the options",
                    record.gold
                )));
            }
            let next = sorted
                .range::<str, _>((
                    core::ops::Bound::Excluded(record.gold.as_str()),
                    core::ops::Bound::Unbounded,
                ))
                .next()
                .or_else(|| sorted.iter().next())
                .expect("non-empty");
            Ok(next.to_string())
        }
    }
}

/// Outcome of checking a short answer against the gold answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShortAnswerOutcome {
    Correct,
    Incorrect,
    Abstain,
}

/// Judges a model's short answer to a record.
pub trait AnswerOracle {
    fn judge(&self, record: &QaRecord, answer: &str) -> ShortAnswerOutcome;
}

/// Exact string match; the abstain marker counts as abstention.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExactMatch;

impl AnswerOracle for ExactMatch {
    fn judge(&self, record: &QaRecord, answer: &str) -> ShortAnswerOutcome {
        if answer == vocab::name(vocab::ABSTAIN) {
            ShortAnswerOutcome::Abstain
        } else if answer == record.gold {
            ShortAnswerOutcome::Correct
        } else {
            ShortAnswerOutcome::Incorrect
        }
    }
}

/// `You MUST answer shortly : <question>`; the answer is the next token.
pub fn short_answer_prompt(question: &str) -> Result<Vec<TokenId>> {
    let mut toks = vocab::encode(SHORT_ANSWER_INSTRUCTION).expect("static text");
    toks.extend(vocab::encode(question)?);
    Ok(toks)
}

/// The model's greedy short answer, its first-token entropy, and the oracle's verdict.
pub fn short_answer(
    model: &ModelState,
    record: &QaRecord,
    oracle: &dyn AnswerOracle,
) -> Result<(String, f64, ShortAnswerOutcome)> {
    let prompt = short_answer_prompt(&record.question)?;
    let ft = model.first_token_distribution(&prompt)?;
    let answer = vocab::name(crate::model::argmax(&ft.probs) as TokenId).to_string();
    let outcome = oracle.judge(record, &answer);
    Ok((answer, ft.entropy, outcome))
}

/// Records whose greedy short answer the oracle marks correct.
pub fn select_parametric(
    model: &ModelState,
    qa_set: &[QaRecord],
    oracle: &dyn AnswerOracle,
) -> Result<Vec<QaRecord>> {
    let mut out = Vec::new();
    for r in qa_set {
        if short_answer(model, r, oracle)?.2 == ShortAnswerOutcome::Correct {
            out.push(r.clone());
        }
    }
    Ok(out)
}

/// Modular-addition verification task `a + b = c ?` over single digits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub modulus: u32,
    /// Each sample uses one of these, chosen by the seeded stream.
    pub templates: Vec<PromptTemplate>,
    pub max_seq_len: usize,
}

impl TaskSpec {
    pub fn add_mod(modulus: u32, templates: Vec<PromptTemplate>) -> Self {
        Self {
            modulus,
            templates,
            max_seq_len: 64,
        }
    }

    pub fn tag(&self) -> String {
        format!("add-mod{}", self.modulus)
    }

    /// One record per operand pair, in `(a, b)` order.
    pub fn records(&self) -> Vec<QaRecord> {
        let m = self.modulus;
        let tag = self.tag();
        (0..m)
            .flat_map(|a| (0..m).map(move |b| (a, b)))
            .map(|(a, b)| QaRecord {
                id: format!("{tag}-{a}-{b}"),
                question: format!("{a} + {b} ="),
                gold: ((a + b) % m).to_string(),
                wrong: None,
                task_tag: tag.clone(),
            })
            .collect()
    }

    fn validate(&self) -> Result<()> {
        if !(2..=10).contains(&self.modulus) {
            return Err(input_err!("modulus must be in 2..=10, got {}", self.modulus));
        }
        if self.templates.is_empty() {
            return Err(input_err!("task needs at least one template"));
        }
        for t in &self.templates {
            t.validate()?;
        }
        Ok(())
    }
}

/// Both forms emitted by [`gen_synthetic`].
#[derive(Debug, Clone, PartialEq)]
pub struct Synthetic {
    pub qa: Vec<QaRecord>,
    pub samples: Vec<BinarySample>,
}

/// Seeded synthetic binary-decision set with exactly `round(n·yes_ratio)`
/// positive samples. Operand pairs are visited in a shuffled cycle so every
/// pair appears `⌊n/m²⌋` or `⌈n/m²⌉` times.
pub fn gen_synthetic(task: &TaskSpec, n: usize, yes_ratio: f64, seed: u64) -> Result<Synthetic> {
    if n < 2 {
        return Err(input_err!("n must be at least 2, got {n}"));
    }
    if !(0.0..=1.0).contains(&yes_ratio) {
        return Err(input_err!("yes_ratio must be in [0, 1], got {yes_ratio}"));
    }
    task.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let records = task.records();
    let n_pos = libm::round(n as f64 * yes_ratio) as usize;
    let mut is_pos: Vec<bool> = (0..n).map(|i| i < n_pos).collect();
    is_pos.shuffle(&mut rng);

    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut qa: Vec<QaRecord> = Vec::new();
    let mut seen = BTreeSet::new();
    let mut samples = Vec::with_capacity(n);
    let rule = WrongLabelRule::NumericSeeded {
        modulus: task.modulus,
    };
    let tag = task.tag();
    for (i, &pos) in is_pos.iter().enumerate() {
        if i % records.len() == 0 {
            order.shuffle(&mut rng);
        }
        let rec = &records[order[i % records.len()]];
        let template = &task.templates[rng.random_range(0..task.templates.len())];
        let mut sample = if pos {
            make_positive(rec, template, task.max_seq_len)?
        } else {
            let mut r = rec.clone();
            r.wrong = Some(derive_wrong_label(rec, &rule, seed.wrapping_add(i as u64))?);
            make_negative(&r, template, task.max_seq_len)?
        };
        sample.id = format!("{tag}-{i:05}");
        samples.push(sample);
        if seen.insert(rec.id.clone()) {
            qa.push(rec.clone());
        }
    }
    Ok(Synthetic { qa, samples })
}

/// Positive samples for every record under every template.
pub fn positive_set(records: &[QaRecord], templates: &[PromptTemplate], max_len: usize) -> Result<Vec<BinarySample>> {
    let mut out = Vec::with_capacity(records.len() * templates.len());
    for t in templates {
        for r in records {
            let mut s = make_positive(r, t, max_len)?;
            s.id = format!("{}@{}", r.id, t.name);
            out.push(s);
        }
    }
    Ok(out)
}
