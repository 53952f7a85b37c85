// Scratch pilot for tuning the desk-scale stage-1 recipe.

use mome::backbone::{Backbone, ModelConfig};
use mome::tasks::{evaluate, gen_examples, Split, SyntheticTask, TaskFamily, TaskParams, Tokenizer};
use mome::training::{train_stage1, PromptInit, Runtime, RuntimeMode, RunFlags, TrainConfig};

fn main() {
    let t0 = std::time::Instant::now();
    let cfg_model = ModelConfig::default();
    let backbone = Backbone::new(cfg_model).unwrap();
    let tok = Tokenizer::new();

    let mut task = SyntheticTask {
        task_id: "copy_a".into(),
        family: TaskFamily::Copy,
        vocab_subset: "abcdefgh".into(),
        description: None,
        params: TaskParams { min_len: 3, max_len: 6, permutation: None, modulus: None },
        seed: 101,
    };

    let mut cfg = TrainConfig::stage1_default();
    for arg in std::env::args().skip(1) {
        let (k, v) = arg.split_once('=').unwrap();
        match k {
            "lr" => cfg.learning_rate = v.parse().unwrap(),
            "steps" => cfg.max_steps = v.parse().unwrap(),
            "batch" => cfg.batch_size = v.parse().unwrap(),
            "rank" => cfg.expert_rank = v.parse().unwrap(),
            "warmup" => cfg.warmup_steps = v.parse().unwrap(),
            "wd" => cfg.weight_decay = v.parse().unwrap(),
            "subset" => task.vocab_subset = v.to_string(),
            "minlen" => task.params.min_len = v.parse().unwrap(),
            "maxlen" => task.params.max_len = v.parse().unwrap(),
            "family" => {
                task.family = match v {
                    "copy" => TaskFamily::Copy,
                    "reverse" => TaskFamily::Reverse,
                    "sort" => TaskFamily::Sort,
                    "modular_add" => TaskFamily::ModularAdd,
                    _ => TaskFamily::TokenMap,
                };
                if v == "token_map" {
                    task.params.permutation = Some("bcda".into());
                }
                if v == "modular_add" {
                    task.params.modulus = Some(4);
                }
            }
            _ => panic!("unknown arg {k}"),
        }
    }
    eprintln!(
        "lr={} steps={} batch={} rank={}",
        cfg.learning_rate, cfg.max_steps, cfg.batch_size, cfg.expert_rank
    );

    let (artifact, log) = train_stage1(&backbone, &task, &tok, &cfg, PromptInit::FromDescription).unwrap();
    let window = 25;
    for chunk in log.metrics.chunks(window) {
        let avg: f64 = chunk.iter().map(|m| m.nll).sum::<f64>() / chunk.len() as f64;
        eprintln!("steps ..{:4}  nll(avg) {:.4}  lr {:.5}", chunk.last().unwrap().step, avg, chunk.last().unwrap().lr);
    }
    eprintln!("train time: {:.1}s", t0.elapsed().as_secs_f64());

    let test = gen_examples(&task, &tok, 64, Split::Test).unwrap();
    let mut rt = Runtime::new(&backbone, RuntimeMode::Source(&artifact), RunFlags::default());
    let m = evaluate(&mut rt, &test).unwrap();
    eprintln!("exact_match {:.3}  token_accuracy {:.3}", m.exact_match, m.token_accuracy);
    eprintln!("total time: {:.1}s", t0.elapsed().as_secs_f64());
}
