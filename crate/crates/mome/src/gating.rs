//! The per-layer expert gate, the weighted expert mixture and the
//! task-specific adapter that follows it.
//!
//! Each transformer layer owns one zero-initialized `d x N` gate, so at
//! step 0 every source expert carries exactly weight 1/N. The gate input
//! is the pooled prompt region of the hidden states: in encoder layers the
//! prefix of that layer's FFN input, in decoder layers the prefix of the
//! final encoder states. Encoder and decoder gates of the same depth stay
//! independent.

use crate::backbone::{BlockKind, FfnCtx, FfnHook, FfnSite};
use crate::error::{Error, Result};
use crate::experts::{expert_forward, ExpertBind};
use crate::tensor::{NodeId, ParamTensor, Tape};

/// Zero-initialized gate for one layer slot.
#[derive(Debug, Clone)]
pub struct GateLayer {
    pub w_gate: ParamTensor,
    pub layer_index: usize,
    pub block_kind: BlockKind,
}

impl GateLayer {
    pub fn zero_init(d: usize, n_experts: usize, layer_index: usize, block_kind: BlockKind) -> Self {
        Self {
            w_gate: ParamTensor::zeros(vec![d, n_experts]),
            layer_index,
            block_kind,
        }
    }

    pub fn n_experts(&self) -> usize {
        self.w_gate.shape[1]
    }
}

/// Which hidden positions feed the gate. The prompt prefix is the normal
/// path; the full-sequence pool is the fallback when the prompt module is
/// ablated away.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateSpan {
    PromptPrefix(usize),
    FullSequence,
}

/// Pool the gate's input vector out of the running activations: the FFN
/// input for encoder layers, the final encoder states for decoder layers.
pub fn gate_input(
    tape: &mut Tape,
    block: BlockKind,
    ffn_input: NodeId,
    encoder_final: Option<NodeId>,
    span: GateSpan,
) -> Result<NodeId> {
    let src = match block {
        BlockKind::Encoder => ffn_input,
        BlockKind::Decoder => encoder_final.ok_or_else(|| {
            Error::Train("decoder gate input requires encoder final states".to_string())
        })?,
    };
    match span {
        GateSpan::PromptPrefix(0) => {
            Err(Error::Train("gate input over an empty prompt prefix".to_string()))
        }
        GateSpan::PromptPrefix(l) => {
            let prefix = tape.slice_rows(src, 0, l)?;
            tape.mean_pool_rows(prefix)
        }
        GateSpan::FullSequence => tape.mean_pool_rows(src),
    }
}

/// softmax(h . W_gate) over the N experts.
pub fn gate_weights(tape: &mut Tape, w_gate: NodeId, h: NodeId) -> Result<NodeId> {
    let logits = tape.vecmat(h, w_gate)?;
    tape.softmax_lastdim(logits)
}

/// One layer's mixture result, with the ingredients the balance loss needs.
#[derive(Debug, Clone)]
pub struct MixtureOutput {
    pub h_e: NodeId,
    pub weights: NodeId,
    pub expert_outputs: Vec<NodeId>,
}

/// `H_e = H_origin + sum_i weight_i . expert_i(ffn_input)`.
pub fn moe_forward(
    tape: &mut Tape,
    ffn_input: NodeId,
    experts: &[ExpertBind],
    weights: NodeId,
    h_origin: NodeId,
) -> Result<MixtureOutput> {
    let n = match tape.shape(weights) {
        [n] => *n,
        s => return Err(Error::Shape(format!("gate weights must be 1-D, got {s:?}"))),
    };
    if n != experts.len() {
        return Err(Error::Train(format!(
            "gate emits {n} weights for {} experts at this layer",
            experts.len()
        )));
    }
    let mut expert_outputs = Vec::with_capacity(n);
    let mut h_e = h_origin;
    for (i, e) in experts.iter().enumerate() {
        let out = expert_forward(tape, e, ffn_input)?;
        let w_i = tape.index(weights, i)?;
        let scaled = tape.mul_scalar(out, w_i)?;
        h_e = tape.add(h_e, scaled)?;
        expert_outputs.push(out);
    }
    Ok(MixtureOutput { h_e, weights, expert_outputs })
}

/// The post-mixture task adapter. In residual mode (the default) the block
/// output is `H_e + bottleneck(H_e)`, so a zero-initialized adapter is an
/// exact identity; the literal non-residual bottleneck stays available
/// behind the flag.
pub fn target_adapter_forward(
    tape: &mut Tape,
    adapter: &ExpertBind,
    h_e: NodeId,
    residual: bool,
) -> Result<NodeId> {
    let bottleneck = expert_forward(tape, adapter, h_e)?;
    if residual {
        tape.add(h_e, bottleneck)
    } else {
        Ok(bottleneck)
    }
}

/// What one hook invocation recorded, for the balance loss and gate CSVs.
#[derive(Debug, Clone)]
pub struct MixtureRecord {
    pub slot: usize,
    pub block: BlockKind,
    pub weights: NodeId,
    pub expert_outputs: Vec<NodeId>,
}

/// Stage-2 hook: gate, frozen source experts, then the target adapter.
pub struct MoeHook {
    /// experts_per_slot[slot][k] is source k's expert at that layer.
    pub experts_per_slot: Vec<Vec<ExpertBind>>,
    pub gates: Vec<NodeId>,
    pub adapters: Vec<ExpertBind>,
    pub use_prompt_prefix: bool,
    pub adapter_residual: bool,
    pub records: Vec<MixtureRecord>,
}

impl MoeHook {
    fn span(&self, ctx: &FfnCtx) -> GateSpan {
        if self.use_prompt_prefix {
            GateSpan::PromptPrefix(ctx.prompt_len)
        } else {
            GateSpan::FullSequence
        }
    }

    pub fn take_records(&mut self) -> Vec<MixtureRecord> {
        std::mem::take(&mut self.records)
    }
}

impl FfnHook for MoeHook {
    fn ffn_block(
        &mut self,
        tape: &mut Tape,
        site: FfnSite,
        ffn_input: NodeId,
        h_origin: NodeId,
        ctx: &FfnCtx,
    ) -> Result<NodeId> {
        let h = gate_input(tape, site.block, ffn_input, ctx.encoder_final, self.span(ctx))?;
        let weights = gate_weights(tape, self.gates[site.slot], h)?;
        let mix = moe_forward(
            tape,
            ffn_input,
            &self.experts_per_slot[site.slot],
            weights,
            h_origin,
        )?;
        let out = target_adapter_forward(
            tape,
            &self.adapters[site.slot],
            mix.h_e,
            self.adapter_residual,
        )?;
        self.records.push(MixtureRecord {
            slot: site.slot,
            block: site.block,
            weights: mix.weights,
            expert_outputs: mix.expert_outputs,
        });
        Ok(out)
    }
}

/// Ablated stage-2 hook: no experts, no gate, just the target adapter on
/// top of the vanilla FFN output.
pub struct AdapterOnlyHook {
    pub adapters: Vec<ExpertBind>,
    pub adapter_residual: bool,
}

impl FfnHook for AdapterOnlyHook {
    fn ffn_block(
        &mut self,
        tape: &mut Tape,
        site: FfnSite,
        _ffn_input: NodeId,
        h_origin: NodeId,
        _ctx: &FfnCtx,
    ) -> Result<NodeId> {
        target_adapter_forward(tape, &self.adapters[site.slot], h_origin, self.adapter_residual)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{Backbone, ModelConfig, NoHook, TokenBatch};
    use crate::experts::{bind_expert, ExpertAdapter, ExpertKind};
    use crate::gradcheck::grad_check;
    use crate::tasks::EOS;
    use crate::tensor::rng_from_seed;
    use rand::Rng;

    fn randv(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = rng_from_seed(seed);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn prefix_of_one_is_the_first_row() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![3, 4], randv(12, 1), false);
        let h = gate_input(
            &mut tape,
            BlockKind::Encoder,
            x,
            None,
            GateSpan::PromptPrefix(1),
        )
        .unwrap();
        assert_eq!(tape.data(h), &tape.data(x)[..4]);
    }

    #[test]
    fn constant_sequence_pools_to_the_constant() {
        let mut tape = Tape::new();
        let row = randv(4, 2);
        let mut data = Vec::new();
        for _ in 0..5 {
            data.extend_from_slice(&row);
        }
        let x = tape.leaf(vec![5, 4], data, false);
        for l in 1..=5 {
            let h = gate_input(
                &mut tape,
                BlockKind::Encoder,
                x,
                None,
                GateSpan::PromptPrefix(l),
            )
            .unwrap();
            for (a, b) in tape.data(h).iter().zip(&row) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn empty_prefix_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![3, 4], randv(12, 3), false);
        assert!(gate_input(
            &mut tape,
            BlockKind::Encoder,
            x,
            None,
            GateSpan::PromptPrefix(0)
        )
        .is_err());
    }

    #[test]
    fn encoder_and_decoder_selectors_differ_on_a_real_forward_pass() {
        let cfg = ModelConfig {
            d_model: 8,
            n_layers_enc: 1,
            n_layers_dec: 1,
            n_heads: 2,
            d_ff: 16,
            vocab_size: 64,
            max_len: 16,
            backbone_seed: 2,
        };
        let bb = Backbone::new(cfg).unwrap();
        let mut tape = Tape::new();
        let bound = bb.bind(&mut tape, &|_| false, &mut Vec::new());
        let prompt = tape.leaf(vec![2, 8], randv(16, 4), false);
        let batch = TokenBatch::new(vec![5, 9, 30], vec![7, EOS]);
        let (_, acts) = bb
            .seq2seq_forward(&mut tape, &bound, Some(prompt), &batch, &mut NoHook)
            .unwrap();
        let enc_act = acts.layers.iter().find(|a| a.block == BlockKind::Encoder).unwrap();
        let span = GateSpan::PromptPrefix(2);
        let enc_h = gate_input(
            &mut tape,
            BlockKind::Encoder,
            enc_act.ffn_input,
            Some(acts.encoder_final),
            span,
        )
        .unwrap();
        let dec_h = gate_input(
            &mut tape,
            BlockKind::Decoder,
            enc_act.ffn_input,
            Some(acts.encoder_final),
            span,
        )
        .unwrap();
        assert_ne!(tape.data(enc_h), tape.data(dec_h));
    }

    #[test]
    fn zero_initialized_gate_is_exactly_uniform() {
        for n in [1usize, 2, 6] {
            let gate = GateLayer::zero_init(5, n, 0, BlockKind::Encoder);
            let mut tape = Tape::new();
            let g = tape.leaf_from(&gate.w_gate, false);
            let h = tape.leaf(vec![5], randv(5, 5), false);
            let w = gate_weights(&mut tape, g, h).unwrap();
            for v in tape.data(w) {
                assert_eq!(*v, 1.0 / n as f64);
            }
        }
    }

    #[test]
    fn random_gate_matches_exp_normalize_oracle() {
        let mut rng = rng_from_seed(6);
        let w_gate = ParamTensor::randn(vec![4, 3], 0.7, &mut rng);
        let h = randv(4, 7);
        // brute force: o = h . W, w = exp(o) / sum exp(o)
        let mut o = [0.0f64; 3];
        for (j, oj) in o.iter_mut().enumerate() {
            for i in 0..4 {
                *oj += h[i] * w_gate.data[i * 3 + j];
            }
        }
        let z: f64 = o.iter().map(|v| v.exp()).sum();
        let expect: Vec<f64> = o.iter().map(|v| v.exp() / z).collect();

        let mut tape = Tape::new();
        let g = tape.leaf_from(&w_gate, false);
        let hn = tape.leaf(vec![4], h, false);
        let w = gate_weights(&mut tape, g, hn).unwrap();
        for (a, b) in tape.data(w).iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_shift_invariance_on_gate_logits() {
        let mut tape = Tape::new();
        let o = randv(6, 8);
        let shifted: Vec<f64> = o.iter().map(|v| v + 3.25).collect();
        let a = tape.leaf(vec![6], o, false);
        let b = tape.leaf(vec![6], shifted, false);
        let wa = tape.softmax_lastdim(a).unwrap();
        let wb = tape.softmax_lastdim(b).unwrap();
        for (x, y) in tape.data(wa).iter().zip(tape.data(wb)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    fn rand_expert_bind(tape: &mut Tape, d: usize, r: usize, seed: u64) -> ExpertBind {
        let mut rng = rng_from_seed(seed);
        let e = ExpertAdapter {
            w_down: ParamTensor::randn(vec![d, r], 0.5, &mut rng),
            w_up: ParamTensor::randn(vec![r, d], 0.5, &mut rng),
            kind: ExpertKind::Lora,
            layer_index: 0,
            task_id: "t".into(),
        };
        bind_expert(tape, &e, "e", false, &mut Vec::new())
    }

    #[test]
    fn all_zero_experts_reduce_to_h_origin() {
        let mut tape = Tape::new();
        let mut rng = rng_from_seed(9);
        let binds: Vec<ExpertBind> = (0..3)
            .map(|i| {
                let e = ExpertAdapter::init(4, 2, ExpertKind::Lora, 0, &format!("t{i}"), &mut rng);
                bind_expert(&mut tape, &e, "e", false, &mut Vec::new())
            })
            .collect();
        let x = tape.leaf(vec![2, 4], randv(8, 10), false);
        let ho = tape.leaf(vec![2, 4], randv(8, 11), false);
        let w = tape.leaf(vec![3], vec![0.2, 0.5, 0.3], false);
        let mix = moe_forward(&mut tape, x, &binds, w, ho).unwrap();
        assert_eq!(tape.data(mix.h_e), tape.data(ho));
    }

    #[test]
    fn uniform_weights_over_identical_experts_equal_one_expert() {
        let mut tape = Tape::new();
        let e = rand_expert_bind(&mut tape, 4, 2, 12);
        let x = tape.leaf(vec![2, 4], randv(8, 13), false);
        let ho = tape.leaf(vec![2, 4], randv(8, 14), false);
        let w = tape.leaf(vec![2], vec![0.5, 0.5], false);
        let mix = moe_forward(&mut tape, x, &[e, e], w, ho).unwrap();
        let single = expert_forward(&mut tape, &e, x).unwrap();
        let expect = tape.add(ho, single).unwrap();
        for (a, b) in tape.data(mix.h_e).iter().zip(tape.data(expect)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn two_expert_mixture_matches_hand_computation() {
        let mut tape = Tape::new();
        let e1 = rand_expert_bind(&mut tape, 4, 2, 15);
        let e2 = rand_expert_bind(&mut tape, 4, 3, 16);
        let x = tape.leaf(vec![2, 4], randv(8, 17), false);
        let ho = tape.leaf(vec![2, 4], randv(8, 18), false);
        let weights = [0.73, 0.27];
        let w = tape.leaf(vec![2], weights.to_vec(), false);
        let mix = moe_forward(&mut tape, x, &[e1, e2], w, ho).unwrap();

        let o1 = expert_forward(&mut tape, &e1, x).unwrap();
        let o2 = expert_forward(&mut tape, &e2, x).unwrap();
        for i in 0..8 {
            let expect = tape.data(ho)[i]
                + weights[0] * tape.data(o1)[i]
                + weights[1] * tape.data(o2)[i];
            assert!((tape.data(mix.h_e)[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn weight_count_must_match_expert_count() {
        let mut tape = Tape::new();
        let e = rand_expert_bind(&mut tape, 4, 2, 19);
        let x = tape.leaf(vec![2, 4], randv(8, 20), false);
        let ho = tape.leaf(vec![2, 4], randv(8, 21), false);
        let w = tape.leaf(vec![3], vec![0.3, 0.3, 0.4], false);
        assert!(moe_forward(&mut tape, x, &[e], w, ho).is_err());
    }

    #[test]
    fn zero_init_adapter_is_identity_in_residual_mode() {
        let mut tape = Tape::new();
        let mut rng = rng_from_seed(22);
        let a = ExpertAdapter::init(4, 2, ExpertKind::Adapter, 0, "target", &mut rng);
        let ab = bind_expert(&mut tape, &a, "a", false, &mut Vec::new());
        let h_e = tape.leaf(vec![3, 4], randv(12, 23), false);
        let out = target_adapter_forward(&mut tape, &ab, h_e, true).unwrap();
        assert_eq!(tape.data(out), tape.data(h_e));
    }

    #[test]
    fn literal_mode_matches_dense_two_matmul_oracle() {
        let mut rng = rng_from_seed(24);
        let d = 4;
        let r = 2;
        let w_down = ParamTensor::randn(vec![d, r], 0.5, &mut rng);
        let w_up = ParamTensor::randn(vec![r, d], 0.5, &mut rng);
        let h = randv(d, 25);
        // dense oracle: relu(h . w_down) . w_up
        let mut mid = vec![0.0; r];
        for j in 0..r {
            for i in 0..d {
                mid[j] += h[i] * w_down.data[i * r + j];
            }
            mid[j] = mid[j].max(0.0);
        }
        let mut expect = vec![0.0; d];
        for j in 0..d {
            for i in 0..r {
                expect[j] += mid[i] * w_up.data[i * d + j];
            }
        }
        let mut tape = Tape::new();
        let ab = ExpertBind {
            w_down: tape.leaf_from(&w_down, false),
            w_up: tape.leaf_from(&w_up, false),
            kind: ExpertKind::Adapter,
        };
        let hn = tape.leaf(vec![1, d], h, false);
        let out = target_adapter_forward(&mut tape, &ab, hn, false).unwrap();
        for (a, b) in tape.data(out).iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_reach_gate_and_adapter_weights() {
        let mut rng = rng_from_seed(26);
        let d = 5;
        let n = 2;
        let params = vec![
            ("w_gate".to_string(), ParamTensor::randn(vec![d, n], 0.3, &mut rng)),
            ("a_down".to_string(), ParamTensor::randn(vec![d, 2], 0.4, &mut rng)),
            ("a_up".to_string(), ParamTensor::randn(vec![2, d], 0.4, &mut rng)),
        ];
        let e_down: Vec<ParamTensor> = (0..n)
            .map(|_| ParamTensor::randn(vec![d, 2], 0.5, &mut rng))
            .collect();
        let e_up: Vec<ParamTensor> = (0..n)
            .map(|_| ParamTensor::randn(vec![2, d], 0.5, &mut rng))
            .collect();
        let report = grad_check(
            &params,
            |t, ids| {
                let experts: Vec<ExpertBind> = (0..n)
                    .map(|k| ExpertBind {
                        w_down: t.leaf_from(&e_down[k], false),
                        w_up: t.leaf_from(&e_up[k], false),
                        kind: ExpertKind::Lora,
                    })
                    .collect();
                let x = t.leaf(vec![3, d], randv(15, 27), false);
                let ho = t.leaf(vec![3, d], randv(15, 28), false);
                let h = gate_input(t, BlockKind::Encoder, x, None, GateSpan::PromptPrefix(2))?;
                let w = gate_weights(t, ids[0], h)?;
                let mix = moe_forward(t, x, &experts, w, ho)?;
                let ab = ExpertBind { w_down: ids[1], w_up: ids[2], kind: ExpertKind::Adapter };
                let out = target_adapter_forward(t, &ab, mix.h_e, true)?;
                let probe = t.leaf(vec![3, d], randv(15, 29), false);
                let p = t.mul(out, probe)?;
                Ok(t.sum(p))
            },
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "rel err {}", report.max_rel_error);
    }
}
