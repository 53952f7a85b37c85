//! Losses, the AdamW optimizer, the freezing policy and the two training
//! stages.
//!
//! Stage 1 trains one prompt and one expert per layer on a source task with
//! plain NLL; everything in the backbone stays frozen. Stage 2 freezes the
//! source prompts and experts too, and trains the target prompt, the
//! per-layer gates, the target adapters and (deliberately) the backbone's
//! LayerNorm parameters, on NLL minus the weighted expert-balance term.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{
    is_layernorm_param, ActivationRecord, Backbone, BlockKind, NoHook,
};
use crate::error::{Error, Result};
use crate::experts::{
    bind_expert, ExpertAdapter, ExpertBind, ExpertKind, SingleExpertHook, SourceArtifact,
};
use crate::gating::{AdapterOnlyHook, GateLayer, MixtureRecord, MoeHook};
use crate::prompts::{build_correlation_prompt, init_prompt_from_description, TaskPrompt};
use crate::tasks::{Dataset, Seq2Seq, SyntheticTask, Tokenizer, EOS, PAD};
use crate::tensor::{rng_from_seed, NodeId, ParamTensor, Tape};

// ── losses ───────────────────────────────────────────────────────────

/// Mean `-log softmax(logits)[y]` over target tokens; PAD targets are
/// masked out of the mean.
pub fn nll_loss(tape: &mut Tape, logits: NodeId, target_ids: &[usize]) -> Result<NodeId> {
    let targets: Vec<i64> = target_ids
        .iter()
        .map(|&t| if t == PAD { -1 } else { t as i64 })
        .collect();
    tape.cross_entropy_rows(logits, &targets)
}

/// The expert-balance term: gate-weighted cosine similarity between each
/// expert's output and the layer's final output, averaged over layers and
/// experts, then over the batch. Sequence positions are mean-pooled before
/// the cosine. Zero expert outputs contribute exactly zero.
pub fn moe_balance_loss(
    tape: &mut Tape,
    examples: &[Vec<(MixtureRecord, NodeId)>],
) -> Result<NodeId> {
    let mut batch_acc: Option<NodeId> = None;
    for records in examples {
        let mut acc: Option<NodeId> = None;
        let mut n_terms = 0usize;
        for (rec, layer_output) in records {
            let pooled_h = tape.mean_pool_rows(*layer_output)?;
            for (i, &e_out) in rec.expert_outputs.iter().enumerate() {
                let pooled_e = tape.mean_pool_rows(e_out)?;
                let cos = tape.cosine_sim(pooled_e, pooled_h)?;
                let w_i = tape.index(rec.weights, i)?;
                let term = tape.mul_scalar(cos, w_i)?;
                acc = Some(match acc {
                    Some(a) => tape.add(a, term)?,
                    None => term,
                });
                n_terms += 1;
            }
        }
        let per_example = match acc {
            Some(a) => tape.scale(a, 1.0 / n_terms.max(1) as f64),
            None => tape.scalar(0.0),
        };
        batch_acc = Some(match batch_acc {
            Some(b) => tape.add(b, per_example)?,
            None => per_example,
        });
    }
    let b = examples.len().max(1) as f64;
    let total = batch_acc.unwrap_or_else(|| tape.scalar(0.0));
    Ok(tape.scale(total, 1.0 / b))
}

/// `nll + balance_sign * alpha * l_moe`. The default sign is -1: weight on
/// the expert most similar to the layer output is rewarded. With alpha = 0
/// the balance subgraph is left out entirely, so it receives no gradient.
pub fn total_loss(
    tape: &mut Tape,
    nll: NodeId,
    l_moe: Option<NodeId>,
    alpha: f64,
    balance_sign: f64,
) -> Result<NodeId> {
    match l_moe {
        Some(m) if alpha != 0.0 => {
            let term = tape.scale(m, balance_sign * alpha);
            tape.add(nll, term)
        }
        _ => Ok(nll),
    }
}

// ── optimizer ────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    LinearDecay,
    Constant,
}

/// AdamW with decoupled weight decay and linear warmup then linear decay
/// to zero at the final step.
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub schedule: Schedule,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(
        lr: f64,
        warmup_steps: usize,
        total_steps: usize,
        schedule: Schedule,
    ) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_steps,
            total_steps,
            schedule,
            moments: BTreeMap::new(),
        }
    }

    /// Learning rate at 1-based step: ramps to exactly `lr` at
    /// `warmup_steps`, then decays linearly to zero at `total_steps`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps > 0 && step <= self.warmup_steps {
            return self.lr * step as f64 / self.warmup_steps as f64;
        }
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::LinearDecay => {
                if self.total_steps <= self.warmup_steps {
                    return self.lr;
                }
                let remaining = self.total_steps.saturating_sub(step) as f64;
                let span = (self.total_steps - self.warmup_steps) as f64;
                self.lr * (remaining / span).max(0.0)
            }
        }
    }

    pub fn step(
        &mut self,
        step: usize,
        name: &str,
        param: &mut ParamTensor,
        grad: &[f64],
    ) -> Result<()> {
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGrad { param: name.to_string() });
        }
        let lr_t = self.lr_at(step);
        let (m, v) = self
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
        let bc1 = 1.0 - self.beta1.powi(step as i32);
        let bc2 = 1.0 - self.beta2.powi(step as i32);
        for i in 0..grad.len() {
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            param.data[i] -=
                lr_t * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * param.data[i]);
        }
        Ok(())
    }
}

// ── configuration ────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub warmup_steps: usize,
    /// Step budget; when `epochs` is set it wins and the step count is
    /// derived from the training-pool size.
    pub max_steps: usize,
    pub epochs: Option<usize>,
    /// Balance-loss factor.
    pub alpha: f64,
    pub seed: u64,
    pub expert_rank: usize,
    pub kind: ExpertKind,
    pub schedule: Schedule,
    /// Synthetic training pool size.
    pub train_examples: usize,
    pub weight_decay: f64,
}

impl TrainConfig {
    /// Desk-size stage-1 recipe (the reference recipe scaled down ~10x:
    /// lr up, batch and warmup down, 500 optimizer steps).
    pub fn stage1_default() -> Self {
        Self {
            learning_rate: 5e-3,
            batch_size: 16,
            warmup_steps: 50,
            max_steps: 500,
            epochs: None,
            alpha: 0.0,
            seed: 42,
            expert_rank: 4,
            kind: ExpertKind::Lora,
            schedule: Schedule::LinearDecay,
            train_examples: 1024,
            weight_decay: 0.01,
        }
    }

    /// Desk-size stage-2 recipe.
    pub fn stage2_default() -> Self {
        Self {
            learning_rate: 1e-2,
            batch_size: 8,
            warmup_steps: 30,
            max_steps: 300,
            epochs: None,
            alpha: 0.1,
            seed: 42,
            expert_rank: 4,
            kind: ExpertKind::Adapter,
            schedule: Schedule::LinearDecay,
            train_examples: 512,
            weight_decay: 0.01,
        }
    }

    pub fn steps(&self, pool: usize) -> usize {
        match self.epochs {
            Some(e) => e * pool.div_ceil(self.batch_size.max(1)),
            None => self.max_steps,
        }
    }

    pub fn validate(&self, prefix: &str) -> Vec<String> {
        let mut issues = Vec::new();
        if self.learning_rate <= 0.0 {
            issues.push(format!("{prefix}.learning_rate: must be positive"));
        }
        if self.alpha < 0.0 {
            issues.push(format!("{prefix}.alpha: must be nonnegative"));
        }
        if self.batch_size == 0 {
            issues.push(format!("{prefix}.batch_size: must be at least 1"));
        }
        if self.expert_rank == 0 {
            issues.push(format!("{prefix}.expert_rank: must be at least 1"));
        }
        if self.train_examples == 0 {
            issues.push(format!("{prefix}.train_examples: must be at least 1"));
        }
        issues
    }

    fn optimizer(&self, total_steps: usize) -> AdamW {
        let mut opt = AdamW::new(self.learning_rate, self.warmup_steps, total_steps, self.schedule);
        opt.weight_decay = self.weight_decay;
        opt
    }
}

/// Behaviour switches that are not ablation arms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunFlags {
    pub scale_correlation_attention: bool,
    pub adapter_residual: bool,
    /// -1 rewards weight on the most similar expert; +1 is the literal
    /// penalizing reading.
    pub balance_sign: f64,
}

impl Default for RunFlags {
    fn default() -> Self {
        Self {
            scale_correlation_attention: true,
            adapter_residual: true,
            balance_sign: -1.0,
        }
    }
}

/// The three ablation switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    pub use_description: bool,
    pub use_correlation: bool,
    pub use_moe: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self { use_description: true, use_correlation: true, use_moe: true }
    }
}

impl AblationFlags {
    /// Prompt policy implied by the switches: no prompts at all without
    /// correlation; random-vocab initialization without descriptions.
    pub fn prompt_init(&self) -> PromptInit {
        if !self.use_correlation {
            PromptInit::Disabled
        } else if self.use_description {
            PromptInit::FromDescription
        } else {
            PromptInit::RandomVocab
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptInit {
    FromDescription,
    RandomVocab,
    Disabled,
}

// ── metrics ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub nll: f64,
    pub l_moe: f64,
    pub total: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateStepRow {
    pub step: usize,
    pub block: BlockKind,
    pub layer: usize,
    pub expert: usize,
    pub weight: f64,
}

#[derive(Debug, Default, Clone)]
pub struct TrainLog {
    pub metrics: Vec<StepMetrics>,
    pub gates: Vec<GateStepRow>,
}

// ── trainable sets ───────────────────────────────────────────────────

/// Stage-1 trainables: the source prompt (when present) and every expert.
pub fn stage1_trainable_names(prompt_present: bool, n_slots: usize) -> Vec<String> {
    let mut names = Vec::new();
    if prompt_present {
        names.push("prompt".to_string());
    }
    for slot in 0..n_slots {
        names.push(format!("expert.{slot}.w_down"));
        names.push(format!("expert.{slot}.w_up"));
    }
    names
}

/// Stage-2 trainables: target prompt, gates, target adapters, and exactly
/// the backbone's LayerNorm parameters. Source prompts and experts are
/// absent by construction: they bind frozen.
pub fn stage2_trainable_names(
    backbone: &Backbone,
    prompt_present: bool,
    use_moe: bool,
    n_slots: usize,
) -> Vec<String> {
    let mut names = Vec::new();
    if prompt_present {
        names.push("target_prompt".to_string());
    }
    for slot in 0..n_slots {
        if use_moe {
            names.push(format!("gate.{slot}"));
        }
        names.push(format!("adapter.{slot}.w_down"));
        names.push(format!("adapter.{slot}.w_up"));
    }
    names.extend(
        backbone
            .param_names()
            .into_iter()
            .filter(|n| is_layernorm_param(n)),
    );
    names
}

// ── batching ─────────────────────────────────────────────────────────

struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    rng: rand_chacha::ChaCha8Rng,
}

impl BatchSampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed ^ 0x5ba7c4);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Self { order, pos: 0, rng }
    }

    fn next_batch(&mut self, b: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(b);
        for _ in 0..b {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn make_prompt(
    init: PromptInit,
    task: &SyntheticTask,
    backbone: &Backbone,
    tok: &Tokenizer,
    seed: u64,
) -> Result<Option<TaskPrompt>> {
    match init {
        PromptInit::Disabled => Ok(None),
        PromptInit::FromDescription => {
            let desc = task.description();
            let p = init_prompt_from_description(
                &desc,
                |s| tok.tokenize(s),
                |ids| backbone.embed_rows(ids),
            )?;
            Ok(Some(p))
        }
        PromptInit::RandomVocab => {
            // same length as the description, uniformly sampled data tokens
            let m = tok.tokenize(&task.description().text)?.len().max(1);
            let mut rng = rng_from_seed(seed ^ 0xdec0de);
            let ids: Vec<usize> = (0..m)
                .map(|_| rng.gen_range(3..backbone.config.vocab_size))
                .collect();
            let matrix = backbone.embed_rows(&ids)?;
            Ok(Some(TaskPrompt { matrix, task_id: task.task_id.clone() }))
        }
    }
}

// ── stage 1 ──────────────────────────────────────────────────────────

struct Stage1State {
    prompt: Option<TaskPrompt>,
    experts: Vec<ExpertAdapter>,
}

impl Stage1State {
    fn param_mut(&mut self, name: &str) -> Option<&mut ParamTensor> {
        if name == "prompt" {
            return self.prompt.as_mut().map(|p| &mut p.matrix);
        }
        let rest = name.strip_prefix("expert.")?;
        let (slot, field) = rest.split_once('.')?;
        let slot: usize = slot.parse().ok()?;
        let e = self.experts.get_mut(slot)?;
        match field {
            "w_down" => Some(&mut e.w_down),
            "w_up" => Some(&mut e.w_up),
            _ => None,
        }
    }
}

/// Train one source task: prompt + per-layer experts on NLL, backbone
/// frozen throughout. Deterministic in `(task, cfg)`.
pub fn train_stage1(
    backbone: &Backbone,
    task: &SyntheticTask,
    data: &Dataset,
    tok: &Tokenizer,
    cfg: &TrainConfig,
    prompt_init: PromptInit,
) -> Result<(SourceArtifact, TrainLog)> {
    let n_slots = backbone.config.n_slots();
    if data.is_empty() {
        return Err(Error::Train("stage 1 requires a nonempty training set".into()));
    }
    let total_steps = cfg.steps(data.len());

    let mut rng = rng_from_seed(cfg.seed);
    let mut state = Stage1State {
        prompt: make_prompt(prompt_init, task, backbone, tok, cfg.seed)?,
        experts: (0..n_slots)
            .map(|slot| {
                ExpertAdapter::init(
                    backbone.config.d_model,
                    cfg.expert_rank,
                    cfg.kind,
                    slot,
                    &task.task_id,
                    &mut rng,
                )
            })
            .collect(),
    };

    let mut opt = cfg.optimizer(total_steps);
    let mut sampler = BatchSampler::new(data.len(), cfg.seed);
    let mut log = TrainLog::default();

    for step in 1..=total_steps {
        let mut tape = Tape::new();
        let mut entries: Vec<(String, NodeId)> = Vec::new();
        let bound = backbone.bind(&mut tape, &|_| false, &mut entries);
        let prompt_node = state.prompt.as_ref().map(|p| {
            let id = tape.leaf_from(&p.matrix, true);
            entries.push(("prompt".to_string(), id));
            id
        });
        let expert_binds: Vec<ExpertBind> = state
            .experts
            .iter()
            .enumerate()
            .map(|(slot, e)| bind_expert(&mut tape, e, &format!("expert.{slot}"), true, &mut entries))
            .collect();

        let batch = sampler.next_batch(cfg.batch_size);
        let mut batch_nll: Option<NodeId> = None;
        for &idx in &batch {
            let (input, target) = &data.pairs[idx];
            let mut gold = target.clone();
            gold.push(EOS);
            let tb = crate::backbone::TokenBatch::new(input.clone(), gold.clone());
            let mut hook = SingleExpertHook { experts: expert_binds.clone() };
            let (logits, _) =
                backbone.seq2seq_forward(&mut tape, &bound, prompt_node, &tb, &mut hook)?;
            let ex_nll = nll_loss(&mut tape, logits, &gold)?;
            batch_nll = Some(match batch_nll {
                Some(acc) => tape.add(acc, ex_nll)?,
                None => ex_nll,
            });
        }
        let nll = tape.scale(batch_nll.expect("nonempty batch"), 1.0 / batch.len() as f64);
        let loss_val = tape.data(nll)[0];
        if !loss_val.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        tape.backward(nll)?;

        for (name, node) in &entries {
            let grad = tape
                .grad(*node)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; tape.node(*node).numel()]);
            let param = state
                .param_mut(name)
                .ok_or_else(|| Error::Train(format!("unknown trainable {name}")))?;
            opt.step(step, name, param, &grad)?;
        }
        log.metrics.push(StepMetrics {
            step,
            nll: loss_val,
            l_moe: 0.0,
            total: loss_val,
            lr: opt.lr_at(step),
        });
    }

    let prompt = state.prompt.unwrap_or(TaskPrompt {
        matrix: ParamTensor::zeros(vec![0, backbone.config.d_model]),
        task_id: task.task_id.clone(),
    });
    let artifact = SourceArtifact {
        task_id: task.task_id.clone(),
        prompt,
        experts: state.experts,
        description_text: task.description().text,
    };
    Ok((artifact, log))
}

// ── stage 2 ──────────────────────────────────────────────────────────

/// Everything stage 2 produces for one target task. LayerNorm values are
/// snapshots of the backbone's (possibly updated) parameters.
#[derive(Debug, Clone)]
pub struct TargetArtifact {
    pub task_id: String,
    pub target_prompt: Option<TaskPrompt>,
    pub gates: Vec<GateLayer>,
    pub adapters: Vec<ExpertAdapter>,
    pub layer_norms: Vec<(String, ParamTensor)>,
    pub source_task_ids: Vec<String>,
    pub use_correlation: bool,
    pub use_moe: bool,
    pub scale_correlation_attention: bool,
    pub adapter_residual: bool,
    /// Mean gate weight per slot per expert at the final training step.
    pub final_gate_means: Vec<Vec<f64>>,
}

impl TargetArtifact {
    /// Write the artifact's LayerNorm snapshot back into a backbone.
    pub fn apply_layer_norms(&self, backbone: &mut Backbone) -> Result<()> {
        for (name, value) in &self.layer_norms {
            let p = backbone
                .param_mut(name)
                .ok_or_else(|| Error::Train(format!("unknown layer norm {name}")))?;
            *p = value.clone();
        }
        Ok(())
    }
}

struct Stage2State {
    target_prompt: Option<TaskPrompt>,
    gates: Vec<GateLayer>,
    adapters: Vec<ExpertAdapter>,
}

impl Stage2State {
    fn param_mut(&mut self, name: &str) -> Option<&mut ParamTensor> {
        if name == "target_prompt" {
            return self.target_prompt.as_mut().map(|p| &mut p.matrix);
        }
        if let Some(slot) = name.strip_prefix("gate.") {
            let slot: usize = slot.parse().ok()?;
            return self.gates.get_mut(slot).map(|g| &mut g.w_gate);
        }
        let rest = name.strip_prefix("adapter.")?;
        let (slot, field) = rest.split_once('.')?;
        let slot: usize = slot.parse().ok()?;
        let a = self.adapters.get_mut(slot)?;
        match field {
            "w_down" => Some(&mut a.w_down),
            "w_up" => Some(&mut a.w_up),
            _ => None,
        }
    }
}

/// Bind frozen sources and build the encoder prompt node for one step.
fn stage2_prompt_node(
    tape: &mut Tape,
    state: &Stage2State,
    sources: &[SourceArtifact],
    flags: &RunFlags,
    entries: &mut Vec<(String, NodeId)>,
) -> Result<Option<NodeId>> {
    let Some(tp) = &state.target_prompt else { return Ok(None) };
    let p_new = tape.leaf_from(&tp.matrix, true);
    entries.push(("target_prompt".to_string(), p_new));
    let source_nodes: Vec<NodeId> = sources
        .iter()
        .map(|s| tape.leaf_from(&s.prompt.matrix, false))
        .collect();
    let corr = build_correlation_prompt(
        tape,
        p_new,
        &source_nodes,
        flags.scale_correlation_attention,
    )?;
    Ok(Some(corr))
}

/// Adapt to a target task on top of frozen source artifacts.
///
/// With `ablation.use_moe` off the mixture path disappears and only the
/// target adapters (plus LayerNorm) train; with `ablation.use_correlation`
/// off there is no prompt at all and gates pool the whole sequence.
pub fn train_stage2(
    backbone: &mut Backbone,
    sources: &[SourceArtifact],
    target_task: &SyntheticTask,
    data: &Dataset,
    tok: &Tokenizer,
    cfg: &TrainConfig,
    flags: &RunFlags,
    ablation: &AblationFlags,
) -> Result<(TargetArtifact, TrainLog)> {
    let n_slots = backbone.config.n_slots();
    let d = backbone.config.d_model;
    if ablation.use_moe {
        if sources.is_empty() {
            return Err(Error::Train("target adaptation requires at least one source artifact".into()));
        }
        for s in sources {
            s.validate(n_slots)?;
            for e in &s.experts {
                if e.dim() != d {
                    return Err(Error::Train(format!(
                        "source {} expert dim {} incompatible with backbone d_model {d}",
                        s.task_id,
                        e.dim()
                    )));
                }
            }
            if ablation.use_correlation && s.prompt.is_empty() {
                return Err(Error::Train(format!(
                    "source {} has no prompt but correlation is enabled",
                    s.task_id
                )));
            }
        }
    }

    if data.is_empty() {
        return Err(Error::Train("stage 2 requires a nonempty training set".into()));
    }
    let total_steps = cfg.steps(data.len());
    let n_experts = sources.len();

    let mut rng = rng_from_seed(cfg.seed ^ 0x57a6e2);
    let mut state = Stage2State {
        target_prompt: make_prompt(ablation.prompt_init(), target_task, backbone, tok, cfg.seed)?,
        gates: if ablation.use_moe {
            (0..n_slots)
                .map(|slot| {
                    let (block, layer) = slot_block(backbone, slot);
                    GateLayer::zero_init(d, n_experts, layer, block)
                })
                .collect()
        } else {
            Vec::new()
        },
        adapters: (0..n_slots)
            .map(|slot| {
                ExpertAdapter::init(
                    d,
                    cfg.expert_rank,
                    ExpertKind::Adapter,
                    slot,
                    &target_task.task_id,
                    &mut rng,
                )
            })
            .collect(),
    };

    let mut opt = cfg.optimizer(total_steps);
    let mut sampler = BatchSampler::new(data.len(), cfg.seed);
    let mut log = TrainLog::default();
    let mut final_gate_means = vec![vec![0.0; n_experts]; n_slots];

    for step in 1..=total_steps {
        let mut tape = Tape::new();
        let mut entries: Vec<(String, NodeId)> = Vec::new();
        let bound = backbone.bind(&mut tape, &is_layernorm_param_fn, &mut entries);
        let prompt_node = stage2_prompt_node(&mut tape, &state, sources, flags, &mut entries)?;

        // frozen source experts, per slot
        let experts_per_slot: Vec<Vec<ExpertBind>> = (0..n_slots)
            .map(|slot| {
                sources
                    .iter()
                    .map(|s| bind_expert(&mut tape, &s.experts[slot], "src", false, &mut entries))
                    .collect()
            })
            .collect();
        let gate_nodes: Vec<NodeId> = state
            .gates
            .iter()
            .enumerate()
            .map(|(slot, g)| {
                let id = tape.leaf_from(&g.w_gate, true);
                entries.push((format!("gate.{slot}"), id));
                id
            })
            .collect();
        let adapter_binds: Vec<ExpertBind> = state
            .adapters
            .iter()
            .enumerate()
            .map(|(slot, a)| {
                bind_expert(&mut tape, a, &format!("adapter.{slot}"), true, &mut entries)
            })
            .collect();

        let batch = sampler.next_batch(cfg.batch_size);
        let mut batch_nll: Option<NodeId> = None;
        let mut moe_examples: Vec<Vec<(MixtureRecord, NodeId)>> = Vec::new();
        let mut gate_sums = vec![vec![0.0; n_experts]; n_slots];

        for &idx in &batch {
            let (input, target) = &data.pairs[idx];
            let mut gold = target.clone();
            gold.push(EOS);
            let tb = crate::backbone::TokenBatch::new(input.clone(), gold.clone());

            let (logits, acts, records) = if ablation.use_moe {
                let mut hook = MoeHook {
                    experts_per_slot: experts_per_slot.clone(),
                    gates: gate_nodes.clone(),
                    adapters: adapter_binds.clone(),
                    use_prompt_prefix: ablation.use_correlation,
                    adapter_residual: flags.adapter_residual,
                    records: Vec::new(),
                };
                let (logits, acts) =
                    backbone.seq2seq_forward(&mut tape, &bound, prompt_node, &tb, &mut hook)?;
                (logits, acts, hook.take_records())
            } else {
                let mut hook = AdapterOnlyHook {
                    adapters: adapter_binds.clone(),
                    adapter_residual: flags.adapter_residual,
                };
                let (logits, acts) =
                    backbone.seq2seq_forward(&mut tape, &bound, prompt_node, &tb, &mut hook)?;
                (logits, acts, Vec::new())
            };

            let ex_nll = nll_loss(&mut tape, logits, &gold)?;
            batch_nll = Some(match batch_nll {
                Some(acc) => tape.add(acc, ex_nll)?,
                None => ex_nll,
            });

            if ablation.use_moe {
                for rec in &records {
                    for (k, w) in tape.data(rec.weights).iter().enumerate() {
                        gate_sums[rec.slot][k] += w;
                    }
                }
                let paired = pair_records_with_layers(records, &acts);
                moe_examples.push(paired);
            }
        }

        let nll = tape.scale(batch_nll.expect("nonempty batch"), 1.0 / batch.len() as f64);
        let l_moe = if ablation.use_moe {
            Some(moe_balance_loss(&mut tape, &moe_examples)?)
        } else {
            None
        };
        let loss = total_loss(&mut tape, nll, l_moe, cfg.alpha, flags.balance_sign)?;
        let (nll_val, total_val) = (tape.data(nll)[0], tape.data(loss)[0]);
        let moe_val = l_moe.map(|m| tape.data(m)[0]).unwrap_or(0.0);
        if !total_val.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        tape.backward(loss)?;

        for (name, node) in &entries {
            let grad = tape
                .grad(*node)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; tape.node(*node).numel()]);
            let param = match state.param_mut(name) {
                Some(p) => p,
                None => backbone
                    .param_mut(name)
                    .ok_or_else(|| Error::Train(format!("unknown trainable {name}")))?,
            };
            opt.step(step, name, param, &grad)?;
        }

        log.metrics.push(StepMetrics {
            step,
            nll: nll_val,
            l_moe: moe_val,
            total: total_val,
            lr: opt.lr_at(step),
        });
        if ablation.use_moe {
            for (slot, sums) in gate_sums.iter().enumerate() {
                let (block, layer) = slot_block(backbone, slot);
                for (k, s) in sums.iter().enumerate() {
                    let weight = s / batch.len() as f64;
                    log.gates.push(GateStepRow { step, block, layer, expert: k, weight });
                    final_gate_means[slot][k] = weight;
                }
            }
        }
    }

    let layer_norms = backbone
        .params()
        .filter(|(n, _)| is_layernorm_param(n))
        .map(|(n, p)| (n.to_string(), p.clone()))
        .collect();
    let artifact = TargetArtifact {
        task_id: target_task.task_id.clone(),
        target_prompt: state.target_prompt,
        gates: state.gates,
        adapters: state.adapters,
        layer_norms,
        source_task_ids: sources.iter().map(|s| s.task_id.clone()).collect(),
        use_correlation: ablation.use_correlation,
        use_moe: ablation.use_moe,
        scale_correlation_attention: flags.scale_correlation_attention,
        adapter_residual: flags.adapter_residual,
        final_gate_means,
    };
    Ok((artifact, log))
}

fn is_layernorm_param_fn(name: &str) -> bool {
    is_layernorm_param(name)
}

fn slot_block(backbone: &Backbone, slot: usize) -> (BlockKind, usize) {
    if slot < backbone.config.n_layers_enc {
        (BlockKind::Encoder, slot)
    } else {
        (BlockKind::Decoder, slot - backbone.config.n_layers_enc)
    }
}

fn pair_records_with_layers(
    records: Vec<MixtureRecord>,
    acts: &ActivationRecord,
) -> Vec<(MixtureRecord, NodeId)> {
    records
        .into_iter()
        .map(|rec| {
            let layer_output = acts
                .layers
                .iter()
                .find(|l| l.slot == rec.slot)
                .map(|l| l.layer_output)
                .expect("record for unknown slot");
            (rec, layer_output)
        })
        .collect()
}

// ── inference runtimes ───────────────────────────────────────────────

/// How a forward pass is assembled for evaluation.
pub enum RuntimeMode<'a> {
    Vanilla,
    Source(&'a SourceArtifact),
    Target {
        sources: &'a [SourceArtifact],
        artifact: &'a TargetArtifact,
    },
}

/// Greedy-decoding view over a backbone plus artifacts; also accumulates
/// gate weights seen during inference for the gate-export analysis.
pub struct Runtime<'a> {
    pub backbone: &'a Backbone,
    pub mode: RuntimeMode<'a>,
    pub flags: RunFlags,
    gate_sums: Vec<Vec<f64>>,
    gate_count: usize,
}

impl<'a> Runtime<'a> {
    pub fn new(backbone: &'a Backbone, mode: RuntimeMode<'a>, flags: RunFlags) -> Self {
        let n_slots = backbone.config.n_slots();
        let n_experts = match &mode {
            RuntimeMode::Target { sources, .. } => sources.len(),
            _ => 0,
        };
        Self {
            backbone,
            mode,
            flags,
            gate_sums: vec![vec![0.0; n_experts]; n_slots],
            gate_count: 0,
        }
    }

    /// Mean observed gate weight per slot per expert since construction.
    pub fn gate_means(&self) -> Vec<Vec<f64>> {
        let n = self.gate_count.max(1) as f64;
        self.gate_sums
            .iter()
            .map(|row| row.iter().map(|s| s / n).collect())
            .collect()
    }

    fn forward(
        &mut self,
        input_ids: &[usize],
        target_ids: &[usize],
    ) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let mut entries = Vec::new();
        let bound = self.backbone.bind(&mut tape, &|_| false, &mut entries);
        let tb = crate::backbone::TokenBatch::new(input_ids.to_vec(), target_ids.to_vec());
        let logits = match &self.mode {
            RuntimeMode::Vanilla => {
                let (logits, _) =
                    self.backbone
                        .seq2seq_forward(&mut tape, &bound, None, &tb, &mut NoHook)?;
                logits
            }
            RuntimeMode::Source(artifact) => {
                let prompt = if artifact.prompt.is_empty() {
                    None
                } else {
                    Some(tape.leaf_from(&artifact.prompt.matrix, false))
                };
                let experts = artifact
                    .experts
                    .iter()
                    .map(|e| bind_expert(&mut tape, e, "e", false, &mut Vec::new()))
                    .collect();
                let mut hook = SingleExpertHook { experts };
                let (logits, _) =
                    self.backbone
                        .seq2seq_forward(&mut tape, &bound, prompt, &tb, &mut hook)?;
                logits
            }
            RuntimeMode::Target { sources, artifact } => {
                let prompt = match &artifact.target_prompt {
                    Some(tp) if artifact.use_correlation => {
                        let p_new = tape.leaf_from(&tp.matrix, false);
                        let src_nodes: Vec<NodeId> = sources
                            .iter()
                            .map(|s| tape.leaf_from(&s.prompt.matrix, false))
                            .collect();
                        Some(build_correlation_prompt(
                            &mut tape,
                            p_new,
                            &src_nodes,
                            artifact.scale_correlation_attention,
                        )?)
                    }
                    Some(tp) => Some(tape.leaf_from(&tp.matrix, false)),
                    None => None,
                };
                let adapters: Vec<ExpertBind> = artifact
                    .adapters
                    .iter()
                    .map(|a| bind_expert(&mut tape, a, "a", false, &mut Vec::new()))
                    .collect();
                if artifact.use_moe {
                    let experts_per_slot: Vec<Vec<ExpertBind>> = (0..self.backbone.config.n_slots())
                        .map(|slot| {
                            sources
                                .iter()
                                .map(|s| {
                                    bind_expert(&mut tape, &s.experts[slot], "s", false, &mut Vec::new())
                                })
                                .collect()
                        })
                        .collect();
                    let gates: Vec<NodeId> = artifact
                        .gates
                        .iter()
                        .map(|g| tape.leaf_from(&g.w_gate, false))
                        .collect();
                    let mut hook = MoeHook {
                        experts_per_slot,
                        gates,
                        adapters,
                        use_prompt_prefix: artifact.use_correlation,
                        adapter_residual: artifact.adapter_residual,
                        records: Vec::new(),
                    };
                    let (logits, _) = self.backbone.seq2seq_forward(
                        &mut tape,
                        &bound,
                        prompt,
                        &tb,
                        &mut hook,
                    )?;
                    for rec in hook.take_records() {
                        for (k, w) in tape.data(rec.weights).iter().enumerate() {
                            self.gate_sums[rec.slot][k] += w;
                        }
                    }
                    self.gate_count += 1;
                    logits
                } else {
                    let mut hook = AdapterOnlyHook {
                        adapters,
                        adapter_residual: artifact.adapter_residual,
                    };
                    let (logits, _) = self.backbone.seq2seq_forward(
                        &mut tape,
                        &bound,
                        prompt,
                        &tb,
                        &mut hook,
                    )?;
                    logits
                }
            }
        };
        let v = self.backbone.config.vocab_size;
        Ok(tape
            .data(logits)
            .chunks(v)
            .map(|row| row.to_vec())
            .collect())
    }
}

impl Seq2Seq for Runtime<'_> {
    fn greedy_decode(&mut self, input_ids: &[usize]) -> Result<Vec<usize>> {
        let max_new = (input_ids.len() + 4).min(self.backbone.config.max_len - 1);
        let mut generated: Vec<usize> = Vec::new();
        for _ in 0..max_new {
            let mut probe = generated.clone();
            probe.push(PAD); // placeholder for the position being predicted
            let logits = self.forward(input_ids, &probe)?;
            let last = logits.last().expect("at least one target position");
            let next = last
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap_or(0);
            generated.push(next);
            if next == EOS {
                break;
            }
        }
        Ok(generated)
    }

    fn teacher_logits(
        &mut self,
        input_ids: &[usize],
        target_ids: &[usize],
    ) -> Result<Vec<Vec<f64>>> {
        self.forward(input_ids, target_ids)
    }
}

/// FNV checksums of a parameter collection, for freeze audits.
pub fn checksum_map<'p>(
    params: impl Iterator<Item = (&'p str, &'p ParamTensor)>,
) -> BTreeMap<String, u64> {
    params.map(|(n, p)| (n.to_string(), p.checksum())).collect()
}
