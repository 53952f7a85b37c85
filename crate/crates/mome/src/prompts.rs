//! Task prompts: description-initialized trainable prefixes and the
//! correlation-attention construction of the target prompt.
//!
//! A prompt starts life as the token embeddings of a short natural-language
//! task description and trains from there. During target adaptation the
//! target prompt is augmented with attention over every frozen source
//! prompt, so the prefix fed to the encoder carries task-correlation
//! information; all transformer layers share that one matrix.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{NodeId, ParamTensor, Tape};

/// A task definition sentence (task plus input-output format), used to
/// initialize the prompt for that task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskDescription {
    pub task_id: String,
    pub text: String,
}

/// A trainable `m x d` prompt matrix.
#[derive(Debug, Clone)]
pub struct TaskPrompt {
    pub matrix: ParamTensor,
    pub task_id: String,
}

impl TaskPrompt {
    pub fn len(&self) -> usize {
        self.matrix.shape[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.matrix.shape[1]
    }
}

/// Frozen source prompts plus the single trainable target prompt.
#[derive(Debug, Clone)]
pub struct PromptBank {
    pub source_prompts: Vec<TaskPrompt>,
    pub target_prompt: TaskPrompt,
}

/// Build a prompt whose rows are the embeddings of the description tokens.
/// `tokenize` maps text to token ids, `embed_rows` looks the ids up in the
/// frozen embedding table; the result is an independent trainable copy.
pub fn init_prompt_from_description(
    desc: &TaskDescription,
    tokenize: impl Fn(&str) -> Result<Vec<usize>>,
    embed_rows: impl Fn(&[usize]) -> Result<ParamTensor>,
) -> Result<TaskPrompt> {
    let ids = tokenize(&desc.text)?;
    if ids.is_empty() {
        return Err(Error::Task(format!(
            "task {}: description tokenizes to zero tokens",
            desc.task_id
        )));
    }
    let matrix = embed_rows(&ids)?;
    Ok(TaskPrompt { matrix, task_id: desc.task_id.clone() })
}

/// Single-head attention with query = target prompt and key = value =
/// one source prompt. Scaling by `1/sqrt(d)` is on by default; the
/// unscaled variant is kept behind the flag for comparison.
pub fn correlation_attention(
    tape: &mut Tape,
    p_new: NodeId,
    p_i: NodeId,
    scale: bool,
) -> Result<NodeId> {
    let src_rows = match tape.shape(p_i) {
        [r, _] => *r,
        s => return Err(Error::Shape(format!("source prompt must be 2-D, got {s:?}"))),
    };
    if src_rows == 0 {
        return Err(Error::Shape("correlation attention over empty source prompt".into()));
    }
    let d = tape.shape(p_new)[1];
    let kt = tape.transpose(p_i)?;
    let mut scores = tape.matmul(p_new, kt)?;
    if scale {
        scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
    }
    let weights = tape.softmax_lastdim(scores)?;
    tape.matmul(weights, p_i)
}

/// Correlation prompt: the target prompt plus the sum of the per-source
/// attention outputs. Source prompt nodes are expected to be frozen
/// leaves, so gradients reach the target prompt only.
pub fn build_correlation_prompt(
    tape: &mut Tape,
    p_new: NodeId,
    source_prompts: &[NodeId],
    scale: bool,
) -> Result<NodeId> {
    if source_prompts.is_empty() {
        return Err(Error::Task("correlation prompt needs at least one source prompt".into()));
    }
    let mut acc = p_new;
    for &p_i in source_prompts {
        let att = correlation_attention(tape, p_new, p_i, scale)?;
        acc = tape.add(acc, att)?;
    }
    Ok(acc)
}

/// Parse a task-description manifest: one `task_id<TAB>description` line
/// per task. Blank lines and `#` comments are skipped.
pub fn parse_description_manifest(text: &str) -> Result<Vec<TaskDescription>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((task_id, desc)) = line.split_once('\t') else {
            return Err(Error::Task(format!(
                "description manifest line {}: expected task_id<TAB>description",
                lineno + 1
            )));
        };
        if desc.trim().is_empty() {
            return Err(Error::Task(format!(
                "description manifest line {}: empty description",
                lineno + 1
            )));
        }
        out.push(TaskDescription { task_id: task_id.to_string(), text: desc.to_string() });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::tensor::rng_from_seed;
    use rand::Rng;

    fn randmat(rows: usize, cols: usize, seed: u64) -> ParamTensor {
        let mut rng = rng_from_seed(seed);
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        ParamTensor::new(vec![rows, cols], data)
    }

    fn char_tokenize(s: &str) -> Result<Vec<usize>> {
        Ok(s.bytes().map(|b| b as usize % 16).collect())
    }

    fn toy_embed(table: &ParamTensor) -> impl Fn(&[usize]) -> Result<ParamTensor> + '_ {
        move |ids| {
            let d = table.shape[1];
            let mut data = Vec::with_capacity(ids.len() * d);
            for &id in ids {
                data.extend_from_slice(&table.data[id * d..(id + 1) * d]);
            }
            Ok(ParamTensor::new(vec![ids.len(), d], data))
        }
    }

    #[test]
    fn one_token_description_copies_the_embedding() {
        let table = randmat(16, 4, 1);
        let desc = TaskDescription { task_id: "t".into(), text: "a".into() };
        let p = init_prompt_from_description(&desc, char_tokenize, toy_embed(&table)).unwrap();
        assert_eq!(p.len(), 1);
        let id = (b'a' as usize) % 16;
        assert_eq!(p.matrix.data, table.data[id * 4..(id + 1) * 4].to_vec());
    }

    #[test]
    fn identical_descriptions_give_identical_prompts() {
        let table = randmat(16, 4, 2);
        let mk = |tid: &str| {
            let desc = TaskDescription { task_id: tid.into(), text: "same words".into() };
            init_prompt_from_description(&desc, char_tokenize, toy_embed(&table)).unwrap()
        };
        let a = mk("a");
        let b = mk("b");
        assert_eq!(a.matrix.data, b.matrix.data);
    }

    #[test]
    fn empty_description_is_rejected() {
        let table = randmat(16, 4, 3);
        let desc = TaskDescription { task_id: "t".into(), text: "".into() };
        assert!(init_prompt_from_description(&desc, char_tokenize, toy_embed(&table)).is_err());
    }

    #[test]
    fn single_source_row_dominates_every_output_row() {
        let mut tape = Tape::new();
        let q = tape.leaf_from(&randmat(3, 4, 4), false);
        let v = randmat(1, 4, 5);
        let k = tape.leaf_from(&v, false);
        let out = correlation_attention(&mut tape, q, k, true).unwrap();
        for row in tape.data(out).chunks(4) {
            for (a, b) in row.iter().zip(&v.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_keys_give_uniform_average() {
        let mut tape = Tape::new();
        let q = tape.leaf_from(&randmat(2, 4, 6), false);
        let row = randmat(1, 4, 7);
        let mut data = row.data.clone();
        data.extend_from_slice(&row.data);
        data.extend_from_slice(&row.data);
        let k = tape.leaf(vec![3, 4], data, false);
        let out = correlation_attention(&mut tape, q, k, true).unwrap();
        for orow in tape.data(out).chunks(4) {
            for (a, b) in orow.iter().zip(&row.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matches_dense_softmax_oracle() {
        // brute-force softmax(Q K^T / sqrt(d)) K computed with plain loops
        let q = randmat(2, 3, 8);
        let k = randmat(2, 3, 9);
        let d = 3usize;
        let mut expect = vec![0.0; 2 * 3];
        for i in 0..2 {
            let mut scores = [0.0f64; 2];
            for (j, srow) in scores.iter_mut().enumerate() {
                for c in 0..d {
                    *srow += q.data[i * d + c] * k.data[j * d + c];
                }
                *srow /= (d as f64).sqrt();
            }
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            for c in 0..d {
                for j in 0..2 {
                    expect[i * d + c] += exps[j] / z * k.data[j * d + c];
                }
            }
        }
        let mut tape = Tape::new();
        let qn = tape.leaf_from(&q, false);
        let kn = tape.leaf_from(&k, false);
        let out = correlation_attention(&mut tape, qn, kn, true).unwrap();
        for (a, b) in tape.data(out).iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_bank_is_rejected_and_zero_source_passes_through() {
        let mut tape = Tape::new();
        let p_new = tape.leaf_from(&randmat(2, 4, 10), false);
        assert!(build_correlation_prompt(&mut tape, p_new, &[], true).is_err());

        let zero_src = tape.leaf(vec![3, 4], vec![0.0; 12], false);
        let out = build_correlation_prompt(&mut tape, p_new, &[zero_src], true).unwrap();
        assert_eq!(tape.data(out), tape.data(p_new));
    }

    #[test]
    fn identical_sources_add_k_times() {
        let mut tape = Tape::new();
        let p_new = tape.leaf_from(&randmat(2, 4, 11), false);
        let src = tape.leaf_from(&randmat(3, 4, 12), false);
        let once = correlation_attention(&mut tape, p_new, src, true).unwrap();
        let combined = build_correlation_prompt(&mut tape, p_new, &[src, src, src], true).unwrap();
        for i in 0..8 {
            let expect = tape.data(p_new)[i] + 3.0 * tape.data(once)[i];
            assert!((tape.data(combined)[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn permuting_source_order_leaves_result_unchanged() {
        let srcs = [randmat(2, 4, 13), randmat(3, 4, 14), randmat(1, 4, 15)];
        let p_new = randmat(2, 4, 16);
        let build = |order: &[usize]| {
            let mut tape = Tape::new();
            let q = tape.leaf_from(&p_new, false);
            let ids: Vec<NodeId> =
                order.iter().map(|&i| tape.leaf_from(&srcs[i], false)).collect();
            let out = build_correlation_prompt(&mut tape, q, &ids, true).unwrap();
            tape.data(out).to_vec()
        };
        let a = build(&[0, 1, 2]);
        let b = build(&[2, 0, 1]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn rows_stay_in_source_convex_hull() {
        let src = randmat(4, 3, 17);
        let mut tape = Tape::new();
        let q = tape.leaf_from(&randmat(5, 3, 18), false);
        let k = tape.leaf_from(&src, false);
        let out = correlation_attention(&mut tape, q, k, true).unwrap();
        for col in 0..3 {
            let lo = (0..4).map(|r| src.data[r * 3 + col]).fold(f64::INFINITY, f64::min);
            let hi = (0..4)
                .map(|r| src.data[r * 3 + col])
                .fold(f64::NEG_INFINITY, f64::max);
            for row in 0..5 {
                let v = tape.data(out)[row * 3 + col];
                assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn gradient_flows_into_target_prompt_only() {
        let sources = [randmat(3, 4, 19), randmat(2, 4, 20)];
        let params = vec![("p_new".to_string(), randmat(2, 4, 21))];
        let report = grad_check(
            &params,
            |t, ids| {
                let src_ids: Vec<NodeId> =
                    sources.iter().map(|s| t.leaf_from(s, false)).collect();
                let corr = build_correlation_prompt(t, ids[0], &src_ids, true)?;
                let w = t.leaf_from(&randmat(2, 4, 22), false);
                let prod = t.mul(corr, w)?;
                Ok(t.sum(prod))
            },
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "rel err {}", report.max_rel_error);

        // and the frozen sources really receive nothing
        let mut tape = Tape::new();
        let p_new = tape.leaf_from(&params[0].1, true);
        let src = tape.leaf_from(&sources[0], false);
        let corr = build_correlation_prompt(&mut tape, p_new, &[src], true).unwrap();
        let loss = tape.sum(corr);
        tape.backward(loss).unwrap();
        assert!(tape.grad(src).is_none());
        assert!(tape.grad(p_new).is_some());
    }

    #[test]
    fn manifest_parses_tab_separated_lines() {
        let text = "# comment\ncopy\trepeat the input.\n\nrev\treverse it.\n";
        let descs = parse_description_manifest(text).unwrap();
        assert_eq!(descs.len(), 2);
        assert_eq!(descs[0].task_id, "copy");
        assert_eq!(descs[1].text, "reverse it.");
        assert!(parse_description_manifest("no tab here").is_err());
    }
}
