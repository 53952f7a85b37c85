// Scratch pilot for the stage-2 gate-dominance experiment.

use mome::backbone::{Backbone, ModelConfig};
use mome::tasks::{evaluate, gen_examples, Split, SyntheticTask, TaskFamily, TaskParams, Tokenizer};
use mome::training::{
    train_stage1, train_stage2, AblationFlags, PromptInit, RunFlags, Runtime, RuntimeMode,
    TrainConfig,
};

fn suite() -> Vec<SyntheticTask> {
    let base = TaskParams { min_len: 2, max_len: 4, permutation: None, modulus: None };
    let mk = |id: &str, family, params: TaskParams, seed| SyntheticTask {
        task_id: id.into(),
        family,
        vocab_subset: "abcd".into(),
        description: None,
        params,
        seed,
    };
    vec![
        mk("copy_src", TaskFamily::Copy, base.clone(), 101),
        mk("reverse_src", TaskFamily::Reverse, base.clone(), 102),
        mk(
            "map_rot_src",
            TaskFamily::TokenMap,
            TaskParams { permutation: Some("bcda".into()), ..base.clone() },
            103,
        ),
        mk(
            "map_swap_src",
            TaskFamily::TokenMap,
            TaskParams { permutation: Some("dabc".into()), ..base.clone() },
            104,
        ),
        mk("sort_src", TaskFamily::Sort, base.clone(), 105),
        mk(
            "modsum_src",
            TaskFamily::ModularAdd,
            TaskParams { modulus: Some(4), ..base.clone() },
            106,
        ),
    ]
}

fn main() {
    let t0 = std::time::Instant::now();
    let mut s1_steps = 300usize;
    let mut s2_steps = 300usize;
    let mut s2_lr = 1e-2f64;
    let mut alpha = 0.1f64;
    let mut seed = 42u64;
    for arg in std::env::args().skip(1) {
        let (k, v) = arg.split_once('=').unwrap();
        match k {
            "s1" => s1_steps = v.parse().unwrap(),
            "s2" => s2_steps = v.parse().unwrap(),
            "lr" => s2_lr = v.parse().unwrap(),
            "alpha" => alpha = v.parse().unwrap(),
            "seed" => seed = v.parse().unwrap(),
            _ => panic!("unknown arg {k}"),
        }
    }
    eprintln!("s1={s1_steps} s2={s2_steps} lr={s2_lr} alpha={alpha} seed={seed}");

    let mut backbone = Backbone::new(ModelConfig::default()).unwrap();
    let tok = Tokenizer::new();

    let mut cfg1 = TrainConfig::stage1_default();
    cfg1.max_steps = s1_steps;
    let mut sources = Vec::new();
    for task in suite() {
        let (artifact, _) =
            train_stage1(&backbone, &task, &tok, &cfg1, PromptInit::FromDescription).unwrap();
        let test = gen_examples(&task, &tok, 64, Split::Test).unwrap();
        let mut rt = Runtime::new(&backbone, RuntimeMode::Source(&artifact), RunFlags::default());
        let m = evaluate(&mut rt, &test).unwrap();
        eprintln!(
            "source {:14} em {:.3} tok {:.3}  ({:.0}s)",
            artifact.task_id,
            m.exact_match,
            m.token_accuracy,
            t0.elapsed().as_secs_f64()
        );
        sources.push(artifact);
    }

    // target: same family+params as copy_src, fresh data seed
    let target = SyntheticTask {
        task_id: "map_rot_tgt".into(),
        family: TaskFamily::TokenMap,
        vocab_subset: "abcd".into(),
        description: None,
        params: TaskParams {
            min_len: 2,
            max_len: 4,
            permutation: Some("bcda".into()),
            modulus: None,
        },
        seed: 900,
    };
    let _ = (alpha, seed);
    for a in [0.1, 0.0] {
        for s in [42u64, 1024, 4096] {
            let mut bb = Backbone::new(ModelConfig::default()).unwrap();
            let mut cfg2 = TrainConfig::stage2_default();
            cfg2.max_steps = s2_steps;
            cfg2.learning_rate = s2_lr;
            cfg2.alpha = a;
            cfg2.seed = s;
            let (artifact, _) = train_stage2(
                &mut bb,
                &sources,
                &target,
                &tok,
                &cfg2,
                &RunFlags::default(),
                &AblationFlags::default(),
            )
            .unwrap();
            let mut overall = vec![0.0; sources.len()];
            for row in &artifact.final_gate_means {
                for (k, w) in row.iter().enumerate() {
                    overall[k] += w / artifact.final_gate_means.len() as f64;
                }
            }
            let ent: f64 = overall
                .iter()
                .map(|&w| if w > 0.0 { -w * w.ln() } else { 0.0 })
                .sum();
            let test = gen_examples(&target, &tok, 64, Split::Test).unwrap();
            let mut rt = Runtime::new(
                &bb,
                RuntimeMode::Target { sources: &sources, artifact: &artifact },
                RunFlags::default(),
            );
            let m = evaluate(&mut rt, &test).unwrap();
            // eval-time gate capture: per-layer entropy averaged over layers
            let eval_means = rt.gate_means();
            let per_layer_ent: f64 = eval_means
                .iter()
                .map(|row| {
                    row.iter()
                        .map(|&w| if w > 0.0 { -w * w.ln() } else { 0.0 })
                        .sum::<f64>()
                })
                .sum::<f64>()
                / eval_means.len() as f64;
            let eval_overall: Vec<f64> = (0..sources.len())
                .map(|k| {
                    eval_means.iter().map(|row| row[k]).sum::<f64>() / eval_means.len() as f64
                })
                .collect();
            let ws: Vec<String> = eval_overall.iter().map(|w| format!("{w:.3}")).collect();
            eprintln!(
                "alpha {a:.1} seed {s:4}: eval weights [{}] train-ent {ent:.4} eval-layer-ent {per_layer_ent:.4} em {:.3} ({:.0}s)",
                ws.join(" "),
                m.exact_match,
                t0.elapsed().as_secs_f64()
            );
        }
    }
    eprintln!("total time: {:.0}s", t0.elapsed().as_secs_f64());
}
