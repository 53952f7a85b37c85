//! Synthetic text-to-text tasks, the character tokenizer, few-shot
//! sampling and evaluation.
//!
//! Tasks are small deterministic sequence transforms over a 64-symbol
//! character alphabet: every example is a pure function of
//! `(family, params, seed, split, index)`, so datasets reproduce bit-exactly
//! across runs and platforms. Relatedness between tasks is controllable:
//! two `token_map` tasks whose substitution tables agree on a prefix overlap
//! on exactly those symbols.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompts::TaskDescription;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;

/// The fixed 64-symbol alphabet: PAD/BOS/EOS, space, a-z, A-Z and eight
/// punctuation marks. Task data uses lowercase letters; descriptions may
/// use the full set.
const ALPHABET: &str = " abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ.,-'?!:;";

/// Character-level tokenizer over the fixed alphabet.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    chars: Vec<char>,
    ids: HashMap<char, usize>,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Self::new()
    }
}

impl Tokenizer {
    pub fn new() -> Self {
        let mut chars = vec!['\u{0}', '\u{1}', '\u{2}'];
        chars.extend(ALPHABET.chars());
        debug_assert_eq!(chars.len(), 64);
        let ids = chars
            .iter()
            .enumerate()
            .skip(3)
            .map(|(i, &c)| (c, i))
            .collect();
        Self { chars, ids }
    }

    pub fn vocab_size(&self) -> usize {
        self.chars.len()
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| {
                self.ids
                    .get(&c)
                    .copied()
                    .ok_or_else(|| Error::Task(format!("character {c:?} not in alphabet")))
            })
            .collect()
    }

    /// Inverse of `tokenize`. PAD/BOS/EOS produce no characters; ids beyond
    /// the alphabet are an error.
    pub fn detokenize(&self, ids: &[usize]) -> Result<String> {
        let mut out = String::with_capacity(ids.len());
        for &id in ids {
            if id >= self.chars.len() {
                return Err(Error::Task(format!("token id {id} out of alphabet")));
            }
            if id >= 3 {
                out.push(self.chars[id]);
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFamily {
    Copy,
    Reverse,
    TokenMap,
    Sort,
    ModularAdd,
}

impl TaskFamily {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Copy => "copy",
            Self::Reverse => "reverse",
            Self::TokenMap => "token_map",
            Self::Sort => "sort",
            Self::ModularAdd => "modular_add",
        }
    }
}

/// Family-specific knobs. `permutation` is the substitution image for
/// `token_map` (same length as the vocab subset); `modulus` is the base for
/// `modular_add` running sums.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskParams {
    pub min_len: usize,
    pub max_len: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub permutation: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modulus: Option<usize>,
}

impl Default for TaskParams {
    fn default() -> Self {
        Self { min_len: 2, max_len: 4, permutation: None, modulus: None }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub task_id: String,
    pub family: TaskFamily,
    /// Data symbols for this task, e.g. "abcdefgh".
    pub vocab_subset: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    #[serde(default)]
    pub params: TaskParams,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    fn index_base(self) -> u64 {
        match self {
            Self::Train => 0,
            Self::Dev => 1 << 20,
            Self::Test => 2 << 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub pairs: Vec<(Vec<usize>, Vec<usize>)>,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

impl SyntheticTask {
    /// The per-family default description sentence; every task carries one
    /// so prompt initialization is exercised end to end. `token_map`
    /// includes its substitution table so related tables read as related
    /// descriptions.
    pub fn description(&self) -> TaskDescription {
        let text = match &self.description {
            Some(t) => t.clone(),
            None => match self.family {
                TaskFamily::Copy => "repeat the input symbols exactly in order.".to_string(),
                TaskFamily::Reverse => "write the input symbols in reverse order.".to_string(),
                TaskFamily::TokenMap => {
                    let perm = self.params.permutation.as_deref().unwrap_or("");
                    format!("replace each symbol using the table {perm}.")
                }
                TaskFamily::Sort => "sort the input symbols into ascending order.".to_string(),
                TaskFamily::ModularAdd => {
                    "output running totals of the values modulo the base.".to_string()
                }
            },
        };
        TaskDescription { task_id: self.task_id.clone(), text }
    }

    fn subset_ids(&self, tok: &Tokenizer) -> Result<Vec<usize>> {
        let ids = tok.tokenize(&self.vocab_subset)?;
        if ids.is_empty() {
            return Err(Error::Task(format!("task {}: empty vocab_subset", self.task_id)));
        }
        Ok(ids)
    }

    fn validate(&self, tok: &Tokenizer) -> Result<Vec<usize>> {
        let subset = self.subset_ids(tok)?;
        if self.params.min_len == 0 || self.params.min_len > self.params.max_len {
            return Err(Error::Task(format!(
                "task {}: bad length range [{}, {}]",
                self.task_id, self.params.min_len, self.params.max_len
            )));
        }
        // inputs are sampled without replacement, so the subset must cover
        // the longest requested example
        if subset.len() < self.params.max_len {
            return Err(Error::Task(format!(
                "task {}: vocab_subset of {} symbols too small for requested lengths up to {}",
                self.task_id,
                subset.len(),
                self.params.max_len
            )));
        }
        match self.family {
            TaskFamily::TokenMap => {
                let perm = self.params.permutation.as_deref().ok_or_else(|| {
                    Error::Task(format!("task {}: token_map needs a permutation", self.task_id))
                })?;
                let perm_ids = tok.tokenize(perm)?;
                let mut sorted_perm = perm_ids.clone();
                let mut sorted_sub = subset.clone();
                sorted_perm.sort_unstable();
                sorted_sub.sort_unstable();
                if sorted_perm != sorted_sub {
                    return Err(Error::Task(format!(
                        "task {}: permutation must rearrange the vocab_subset",
                        self.task_id
                    )));
                }
            }
            TaskFamily::ModularAdd => {
                let m = self.params.modulus.unwrap_or(subset.len());
                if m < 2 || m > subset.len() {
                    return Err(Error::Task(format!(
                        "task {}: modulus {m} incompatible with subset of {}",
                        self.task_id,
                        subset.len()
                    )));
                }
            }
            _ => {}
        }
        Ok(subset)
    }

    fn example(&self, tok: &Tokenizer, subset: &[usize], index: u64, split: Split) -> (Vec<usize>, Vec<usize>) {
        // one independent stream per example keeps generation order-free
        let mut rng = ChaCha8Rng::seed_from_u64(
            self.seed
                .wrapping_mul(0x9e3779b97f4a7c15)
                .wrapping_add(split.index_base() + index),
        );
        let len = rng.gen_range(self.params.min_len..=self.params.max_len);
        // distinct symbols per example (sampling without replacement)
        let mut pool: Vec<usize> = match self.family {
            TaskFamily::ModularAdd => {
                let m = self.params.modulus.unwrap_or(subset.len());
                subset[..m].to_vec()
            }
            _ => subset.to_vec(),
        };
        pool.shuffle(&mut rng);
        let input: Vec<usize> = pool.into_iter().take(len).collect();
        let target = self.apply(tok, subset, &input);
        (input, target)
    }

    /// The task's ground-truth transform.
    pub fn apply(&self, tok: &Tokenizer, subset: &[usize], input: &[usize]) -> Vec<usize> {
        match self.family {
            TaskFamily::Copy => input.to_vec(),
            TaskFamily::Reverse => input.iter().rev().copied().collect(),
            TaskFamily::Sort => {
                let mut out = input.to_vec();
                out.sort_unstable();
                out
            }
            TaskFamily::TokenMap => {
                let perm = self.params.permutation.as_deref().unwrap_or("");
                let perm_ids = tok.tokenize(perm).unwrap_or_default();
                input
                    .iter()
                    .map(|t| {
                        let pos = subset.iter().position(|s| s == t).unwrap_or(0);
                        perm_ids[pos]
                    })
                    .collect()
            }
            TaskFamily::ModularAdd => {
                let m = self.params.modulus.unwrap_or(subset.len());
                let mut acc = 0usize;
                input
                    .iter()
                    .map(|t| {
                        let v = subset.iter().position(|s| s == t).unwrap_or(0);
                        acc = (acc + v) % m;
                        subset[acc]
                    })
                    .collect()
            }
        }
    }
}

/// Generate `n` deterministic examples of the given split.
pub fn gen_examples(task: &SyntheticTask, tok: &Tokenizer, n: usize, split: Split) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Task(format!("task {}: requested zero examples", task.task_id)));
    }
    let subset = task.validate(tok)?;
    let pairs = (0..n as u64)
        .map(|i| task.example(tok, &subset, i, split))
        .collect();
    Ok(Dataset { pairs, split })
}

/// Seeded few-shot subset: the first `k` entries of one fixed shuffle, so
/// subsets for growing k are nested and every arm sharing the seed sees the
/// same examples.
pub fn few_shot_sample(d: &Dataset, k: usize, seed: u64) -> Result<Dataset> {
    if k > d.len() {
        return Err(Error::Task(format!(
            "few-shot k = {k} exceeds dataset size {}",
            d.len()
        )));
    }
    let mut order: Vec<usize> = (0..d.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let pairs = order[..k].iter().map(|&i| d.pairs[i].clone()).collect();
    Ok(Dataset { pairs, split: d.split })
}

/// Anything that can decode greedily and produce teacher-forced logits.
pub trait Seq2Seq {
    fn greedy_decode(&mut self, input_ids: &[usize]) -> Result<Vec<usize>>;
    /// One logit row per target position (teacher forcing).
    fn teacher_logits(&mut self, input_ids: &[usize], target_ids: &[usize]) -> Result<Vec<Vec<f64>>>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalMetrics {
    pub exact_match: f64,
    pub token_accuracy: f64,
}

/// Exact-match rate under greedy decoding plus per-position argmax accuracy
/// on teacher-forced logits (EOS included). The two are reported
/// independently; neither bounds the other in general.
pub fn evaluate(model: &mut dyn Seq2Seq, data: &Dataset) -> Result<EvalMetrics> {
    let mut exact = 0usize;
    let mut tok_hits = 0usize;
    let mut tok_total = 0usize;
    for (input, target) in &data.pairs {
        let mut gold = target.clone();
        gold.push(EOS);
        let decoded = model.greedy_decode(input)?;
        if decoded == gold {
            exact += 1;
        }
        let logits = model.teacher_logits(input, &gold)?;
        for (row, &t) in logits.iter().zip(&gold) {
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap_or(0);
            if argmax == t {
                tok_hits += 1;
            }
            tok_total += 1;
        }
    }
    Ok(EvalMetrics {
        exact_match: exact as f64 / data.len().max(1) as f64,
        token_accuracy: tok_hits as f64 / tok_total.max(1) as f64,
    })
}

/// Render a dataset as `input<TAB>target` lines.
pub fn dataset_to_tsv(d: &Dataset, tok: &Tokenizer) -> Result<String> {
    let mut out = String::new();
    for (input, target) in &d.pairs {
        let _ = writeln!(out, "{}\t{}", tok.detokenize(input)?, tok.detokenize(target)?);
    }
    Ok(out)
}
