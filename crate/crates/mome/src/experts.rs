//! Source-task experts: low-rank bottlenecks parallel to each FFN.
//!
//! An expert is a `d x r` down-projection and an `r x d` up-projection with
//! an optional relu between them; with the relu it is an adapter, without
//! it a LoRA whose product can be folded back into the host layer as one
//! dense bypass matrix. The up-projection starts at zero, so a fresh expert
//! leaves the backbone's function untouched.

use serde::{Deserialize, Serialize};

use crate::backbone::{FfnCtx, FfnHook, FfnSite};
use crate::error::{Error, Result};
use crate::prompts::TaskPrompt;
use crate::tensor::{matmul_raw, NodeId, ParamTensor, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertKind {
    /// Linear bottleneck; mergeable into the host FFN.
    Lora,
    /// relu between the projections; cannot merge.
    Adapter,
}

impl ExpertKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Lora => "lora",
            Self::Adapter => "adapter",
        }
    }
}

/// One expert at one layer slot.
#[derive(Debug, Clone)]
pub struct ExpertAdapter {
    pub w_down: ParamTensor,
    pub w_up: ParamTensor,
    pub kind: ExpertKind,
    pub layer_index: usize,
    pub task_id: String,
}

const DOWN_STD: f64 = 0.2;

impl ExpertAdapter {
    /// W_down ~ N(0, 0.02), W_up = 0: the expert starts as an exact
    /// identity perturbation.
    pub fn init(
        d: usize,
        rank: usize,
        kind: ExpertKind,
        layer_index: usize,
        task_id: &str,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Self {
        assert!(rank < d, "expert rank must be below the model dim");
        Self {
            w_down: ParamTensor::randn(vec![d, rank], DOWN_STD, rng),
            w_up: ParamTensor::zeros(vec![rank, d]),
            kind,
            layer_index,
            task_id: task_id.to_string(),
        }
    }

    pub fn rank(&self) -> usize {
        self.w_down.shape[1]
    }

    pub fn dim(&self) -> usize {
        self.w_down.shape[0]
    }

    /// Trainable parameter count; 2 d r per layer.
    pub fn param_count(&self) -> usize {
        self.w_down.numel() + self.w_up.numel()
    }
}

/// Tape-bound expert weights.
#[derive(Debug, Clone, Copy)]
pub struct ExpertBind {
    pub w_down: NodeId,
    pub w_up: NodeId,
    pub kind: ExpertKind,
}

pub fn bind_expert(
    tape: &mut Tape,
    e: &ExpertAdapter,
    name_prefix: &str,
    trainable: bool,
    entries: &mut Vec<(String, NodeId)>,
) -> ExpertBind {
    let w_down = tape.leaf_from(&e.w_down, trainable);
    let w_up = tape.leaf_from(&e.w_up, trainable);
    if trainable {
        entries.push((format!("{name_prefix}.w_down"), w_down));
        entries.push((format!("{name_prefix}.w_up"), w_up));
    }
    ExpertBind { w_down, w_up, kind: e.kind }
}

/// `h . W_down (relu?) . W_up` for row-vector inputs.
pub fn expert_forward(tape: &mut Tape, e: &ExpertBind, h: NodeId) -> Result<NodeId> {
    let mid = tape.matmul(h, e.w_down)?;
    let mid = match e.kind {
        ExpertKind::Adapter => tape.relu(mid),
        ExpertKind::Lora => mid,
    };
    tape.matmul(mid, e.w_up)
}

/// The residual combination: expert output plus the untouched FFN output,
/// preserving the host's pretrained behaviour.
pub fn expert_residual_forward(
    tape: &mut Tape,
    e: &ExpertBind,
    h: NodeId,
    h_origin: NodeId,
) -> Result<NodeId> {
    let out = expert_forward(tape, e, h)?;
    tape.add(out, h_origin)
}

/// Everything stage 1 produces for one source task.
#[derive(Debug, Clone)]
pub struct SourceArtifact {
    pub task_id: String,
    pub prompt: TaskPrompt,
    /// One expert per layer slot (encoder layers then decoder layers).
    pub experts: Vec<ExpertAdapter>,
    pub description_text: String,
}

impl SourceArtifact {
    pub fn validate(&self, n_slots: usize) -> Result<()> {
        if self.experts.len() != n_slots {
            return Err(Error::Train(format!(
                "source {} has {} experts for {} layer slots",
                self.task_id,
                self.experts.len(),
                n_slots
            )));
        }
        for (i, e) in self.experts.iter().enumerate() {
            if e.layer_index != i {
                return Err(Error::Train(format!(
                    "source {} expert at slot {i} labelled {}",
                    self.task_id, e.layer_index
                )));
            }
        }
        Ok(())
    }
}

/// Stage-1 hook: one expert in parallel with each FFN.
pub struct SingleExpertHook {
    pub experts: Vec<ExpertBind>,
}

impl FfnHook for SingleExpertHook {
    fn ffn_block(
        &mut self,
        tape: &mut Tape,
        site: FfnSite,
        ffn_input: NodeId,
        h_origin: NodeId,
        _ctx: &FfnCtx,
    ) -> Result<NodeId> {
        let e = self.experts.get(site.slot).copied().ok_or_else(|| {
            Error::Train(format!("no expert bound for layer slot {}", site.slot))
        })?;
        expert_residual_forward(tape, &e, ffn_input, h_origin)
    }
}

/// An FFN with an explicit dense bypass: `ffn(h) + h . bypass`. Folding
/// several weighted LoRA experts into `bypass` replaces N bottleneck
/// matmuls with one dense one at inference time.
#[derive(Debug, Clone)]
pub struct MergedFfn {
    pub w1: ParamTensor,
    pub b1: ParamTensor,
    pub w2: ParamTensor,
    pub b2: ParamTensor,
    pub bypass: ParamTensor,
}

impl MergedFfn {
    pub fn forward(&self, h: &[f64], rows: usize) -> Vec<f64> {
        let d = self.w1.shape[0];
        let d_ff = self.w1.shape[1];
        let mut mid = matmul_raw(h, &self.w1.data, rows, d, d_ff);
        for (i, v) in mid.iter_mut().enumerate() {
            *v = (*v + self.b1.data[i % d_ff]).max(0.0);
        }
        let mut out = matmul_raw(&mid, &self.w2.data, rows, d_ff, d);
        for (i, v) in out.iter_mut().enumerate() {
            *v += self.b2.data[i % d];
        }
        let by = matmul_raw(h, &self.bypass.data, rows, d, d);
        for (o, b) in out.iter_mut().zip(&by) {
            *o += b;
        }
        out
    }
}

/// Fold weighted LoRA experts into the host FFN's linear path. Experts
/// with weight exactly 0 are skipped so a zero-weight merge is bitwise
/// the original. Adapter-kind experts cannot merge.
pub fn merge_lora(
    ffn: (&ParamTensor, &ParamTensor, &ParamTensor, &ParamTensor),
    experts: &[&ExpertAdapter],
    weights: &[f64],
) -> Result<MergedFfn> {
    if experts.len() != weights.len() {
        return Err(Error::Train(format!(
            "merge_lora: {} experts but {} weights",
            experts.len(),
            weights.len()
        )));
    }
    let (w1, b1, w2, b2) = ffn;
    let d = w1.shape[0];
    let mut bypass = vec![0.0; d * d];
    for (e, &w) in experts.iter().zip(weights) {
        if e.kind != ExpertKind::Lora {
            return Err(Error::Train(format!(
                "nonlinear expert cannot merge (task {}, layer {})",
                e.task_id, e.layer_index
            )));
        }
        if w == 0.0 {
            continue;
        }
        let r = e.rank();
        let prod = matmul_raw(&e.w_down.data, &e.w_up.data, d, r, d);
        for (acc, p) in bypass.iter_mut().zip(&prod) {
            *acc += w * p;
        }
    }
    Ok(MergedFfn {
        w1: w1.clone(),
        b1: b1.clone(),
        w2: w2.clone(),
        b2: b2.clone(),
        bypass: ParamTensor::new(vec![d, d], bypass),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::tensor::rng_from_seed;
    use rand::Rng;

    fn rand_expert(d: usize, r: usize, kind: ExpertKind, seed: u64) -> ExpertAdapter {
        let mut rng = rng_from_seed(seed);
        ExpertAdapter {
            w_down: ParamTensor::randn(vec![d, r], 0.5, &mut rng),
            w_up: ParamTensor::randn(vec![r, d], 0.5, &mut rng),
            kind,
            layer_index: 0,
            task_id: "t".into(),
        }
    }

    fn randv(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = rng_from_seed(seed);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn zero_up_projection_gives_zero_output_for_both_kinds() {
        for kind in [ExpertKind::Lora, ExpertKind::Adapter] {
            let mut rng = rng_from_seed(1);
            let e = ExpertAdapter::init(6, 2, kind, 0, "t", &mut rng);
            let mut tape = Tape::new();
            let eb = bind_expert(&mut tape, &e, "e", false, &mut Vec::new());
            let h = tape.leaf(vec![3, 6], randv(18, 2), false);
            let out = expert_forward(&mut tape, &eb, h).unwrap();
            assert!(tape.data(out).iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn lora_kind_is_linear_in_the_input() {
        let e = rand_expert(5, 2, ExpertKind::Lora, 3);
        let mut tape = Tape::new();
        let eb = bind_expert(&mut tape, &e, "e", false, &mut Vec::new());
        let x = randv(10, 4);
        let h = tape.leaf(vec![2, 5], x.clone(), false);
        let h2 = tape.scale(h, 2.0);
        let o1 = expert_forward(&mut tape, &eb, h).unwrap();
        let o2 = expert_forward(&mut tape, &eb, h2).unwrap();
        for (a, b) in tape.data(o1).iter().zip(tape.data(o2)) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rank_one_lora_matches_outer_product_oracle() {
        let e = rand_expert(4, 1, ExpertKind::Lora, 5);
        let x = randv(4, 6);
        // dense rank-1 map: out = (x . down) * up
        let dot: f64 = x.iter().zip(&e.w_down.data).map(|(a, b)| a * b).sum();
        let expect: Vec<f64> = e.w_up.data.iter().map(|u| dot * u).collect();
        let mut tape = Tape::new();
        let eb = bind_expert(&mut tape, &e, "e", false, &mut Vec::new());
        let h = tape.leaf(vec![1, 4], x, false);
        let out = expert_forward(&mut tape, &eb, h).unwrap();
        for (a, b) in tape.data(out).iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_expert_residual_passes_h_origin_through() {
        let mut rng = rng_from_seed(7);
        let e = ExpertAdapter::init(4, 2, ExpertKind::Adapter, 0, "t", &mut rng);
        let mut tape = Tape::new();
        let eb = bind_expert(&mut tape, &e, "e", false, &mut Vec::new());
        let h = tape.leaf(vec![2, 4], randv(8, 8), false);
        let ho = tape.leaf(vec![2, 4], randv(8, 9), false);
        let out = expert_residual_forward(&mut tape, &eb, h, ho).unwrap();
        assert_eq!(tape.data(out), tape.data(ho));
    }

    #[test]
    fn contrived_expert_cancels_h_origin() {
        // rank-1 expert realizing -(h . e1 e1^T); picking h_origin = h . e1 e1^T
        // makes the residual vanish exactly
        let d = 4;
        let e = ExpertAdapter {
            w_down: ParamTensor::new(vec![d, 1], vec![1.0, 0.0, 0.0, 0.0]),
            w_up: ParamTensor::new(vec![1, d], vec![-1.0, 0.0, 0.0, 0.0]),
            kind: ExpertKind::Lora,
            layer_index: 0,
            task_id: "t".into(),
        };
        let h = vec![0.7, -0.3, 0.2, 0.9];
        let h_origin = vec![0.7, 0.0, 0.0, 0.0];
        let mut tape = Tape::new();
        let eb = bind_expert(&mut tape, &e, "e", false, &mut Vec::new());
        let hn = tape.leaf(vec![1, 4], h, false);
        let on = tape.leaf(vec![1, 4], h_origin, false);
        let out = expert_residual_forward(&mut tape, &eb, hn, on).unwrap();
        for v in tape.data(out) {
            assert!(v.abs() < 1e-15);
        }
    }

    #[test]
    fn gradients_flow_to_both_projections_through_the_residual() {
        for kind in [ExpertKind::Lora, ExpertKind::Adapter] {
            let e = rand_expert(5, 2, kind, 10);
            let params = vec![
                ("w_down".to_string(), e.w_down.clone()),
                ("w_up".to_string(), e.w_up.clone()),
            ];
            let report = grad_check(
                &params,
                |t, ids| {
                    let eb = ExpertBind { w_down: ids[0], w_up: ids[1], kind };
                    let h = t.leaf(vec![2, 5], randv(10, 11), false);
                    let ho = t.leaf(vec![2, 5], randv(10, 12), false);
                    let out = expert_residual_forward(t, &eb, h, ho)?;
                    let w = t.leaf(vec![2, 5], randv(10, 13), false);
                    let p = t.mul(out, w)?;
                    Ok(t.sum(p))
                },
                1e-5,
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "rel err {}", report.max_rel_error);
        }
    }

    fn rand_ffn(
        d: usize,
        d_ff: usize,
        seed: u64,
    ) -> (ParamTensor, ParamTensor, ParamTensor, ParamTensor) {
        let mut rng = rng_from_seed(seed);
        (
            ParamTensor::randn(vec![d, d_ff], 0.4, &mut rng),
            ParamTensor::randn(vec![d_ff], 0.1, &mut rng),
            ParamTensor::randn(vec![d_ff, d], 0.4, &mut rng),
            ParamTensor::randn(vec![d], 0.1, &mut rng),
        )
    }

    /// Unmerged oracle: ffn(h) + sum_i w_i expert_i(h) via the tape path.
    fn unmerged_forward(
        ffn: &(ParamTensor, ParamTensor, ParamTensor, ParamTensor),
        experts: &[&ExpertAdapter],
        weights: &[f64],
        h: &[f64],
        rows: usize,
        d: usize,
    ) -> Vec<f64> {
        let mut tape = Tape::new();
        let fb = crate::backbone::FfnBind {
            w1: tape.leaf_from(&ffn.0, false),
            b1: tape.leaf_from(&ffn.1, false),
            w2: tape.leaf_from(&ffn.2, false),
            b2: tape.leaf_from(&ffn.3, false),
        };
        let hn = tape.leaf(vec![rows, d], h.to_vec(), false);
        let mut acc = crate::backbone::ffn_forward(&mut tape, &fb, hn).unwrap();
        for (e, &w) in experts.iter().zip(weights) {
            let eb = bind_expert(&mut tape, e, "e", false, &mut Vec::new());
            let out = expert_forward(&mut tape, &eb, hn).unwrap();
            let scaled = tape.scale(out, w);
            acc = tape.add(acc, scaled).unwrap();
        }
        tape.data(acc).to_vec()
    }

    #[test]
    fn merge_with_zero_weight_is_bitwise_original() {
        let ffn = rand_ffn(4, 8, 20);
        let e = rand_expert(4, 2, ExpertKind::Lora, 21);
        let merged = merge_lora((&ffn.0, &ffn.1, &ffn.2, &ffn.3), &[&e], &[0.0]).unwrap();
        assert_eq!(merged.w1.data, ffn.0.data);
        assert_eq!(merged.b1.data, ffn.1.data);
        assert_eq!(merged.w2.data, ffn.2.data);
        assert_eq!(merged.b2.data, ffn.3.data);
        assert!(merged
            .bypass
            .data
            .iter()
            .all(|v| v.to_bits() == 0.0f64.to_bits()));
    }

    #[test]
    fn merged_forward_equals_unmerged_for_one_and_three_experts() {
        let d = 6;
        let ffn = rand_ffn(d, 12, 22);
        let e1 = rand_expert(d, 2, ExpertKind::Lora, 23);
        let e2 = rand_expert(d, 3, ExpertKind::Lora, 24);
        let e3 = rand_expert(d, 1, ExpertKind::Lora, 25);

        // second weight set is a softmax output (sums to 1)
        for (experts, weights) in [
            (vec![&e1], vec![1.0]),
            (
                vec![&e1, &e2, &e3],
                vec![0.6590011388859679, 0.0899122161076281, 0.251086645006404],
            ),
        ] {
            let merged =
                merge_lora((&ffn.0, &ffn.1, &ffn.2, &ffn.3), &experts, &weights).unwrap();
            for trial in 0..100 {
                let h = randv(d, 1000 + trial);
                let got = merged.forward(&h, 1);
                let expect = unmerged_forward(&ffn, &experts, &weights, &h, 1, d);
                for (a, b) in got.iter().zip(&expect) {
                    assert!((a - b).abs() < 1e-10, "trial {trial}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn adapter_kind_refuses_to_merge() {
        let ffn = rand_ffn(4, 8, 26);
        let e = rand_expert(4, 2, ExpertKind::Adapter, 27);
        let err = merge_lora((&ffn.0, &ffn.1, &ffn.2, &ffn.3), &[&e], &[1.0]).unwrap_err();
        assert!(err.to_string().contains("nonlinear expert cannot merge"));
    }

    #[test]
    fn parameter_count_is_2dr_per_layer() {
        let mut rng = rng_from_seed(28);
        let e = ExpertAdapter::init(64, 4, ExpertKind::Lora, 0, "t", &mut rng);
        assert_eq!(e.param_count(), 2 * 64 * 4);
    }
}
