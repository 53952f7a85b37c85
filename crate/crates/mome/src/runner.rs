//! Experiment driver: the six commands behind the `mome` binary, artifact
//! caching, and the CSV emission everything downstream analyses.
//!
//! CSV schemas (column order is part of the interface):
//! - `metrics.csv`: `step,nll,l_moe,total,lr`
//! - `gates.csv`: `step,block,layer,expert,weight`
//! - `summary.csv` (ablate): `arm,seed,exact_match,token_accuracy,trainable_params`
//! - `fewshot.csv`: `k,seed,exact_match,token_accuracy`
//! - `eval.csv`: `artifact,stage,task_id,split,exact_match,token_accuracy`
//! - `gates_export.csv`: `target_task,block,layer,expert_task,mean_weight`

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::backbone::Backbone;
use crate::checkpoint::{
    load_source, load_target, manifest_digest, save_source, save_target, SourceRef,
};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::experts::SourceArtifact;
use crate::tasks::{
    evaluate, few_shot_sample, gen_examples, EvalMetrics, Split, SyntheticTask, Tokenizer,
};
use crate::training::{
    train_stage1, train_stage2, AblationFlags, PromptInit, Runtime, RuntimeMode,
    TargetArtifact, TrainConfig, TrainLog,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    TrainSource,
    TrainTarget,
    Evaluate,
    Ablate,
    Fewshot,
    ExportGates,
}

impl Command {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train-source" => Some(Self::TrainSource),
            "train-target" => Some(Self::TrainTarget),
            "evaluate" => Some(Self::Evaluate),
            "ablate" => Some(Self::Ablate),
            "fewshot" => Some(Self::Fewshot),
            "export-gates" => Some(Self::ExportGates),
            _ => None,
        }
    }
}

/// Entry point used by the binary: dispatch a command against a config.
pub fn run(cmd: Command, cfg: &ExperimentConfig, artifact: Option<&Path>) -> Result<()> {
    let out = prepare_output_dir(cfg)?;
    match cmd {
        Command::TrainSource => {
            let paths = run_train_source(cfg, &out)?;
            for p in paths {
                println!("wrote {}", p.display());
            }
        }
        Command::TrainTarget => {
            let (path, metrics) = run_train_target(cfg, &out)?;
            println!("wrote {}", path.display());
            println!(
                "target {}: exact_match {:.4} token_accuracy {:.4}",
                cfg.target.task_id, metrics.exact_match, metrics.token_accuracy
            );
        }
        Command::Evaluate => {
            let (task_id, stage, metrics) = run_evaluate(cfg, &out, artifact)?;
            println!(
                "stage-{stage} artifact for {task_id}: exact_match {:.4} token_accuracy {:.4}",
                metrics.exact_match, metrics.token_accuracy
            );
        }
        Command::Ablate => {
            let path = run_ablate(cfg, &out)?;
            println!("wrote {}", path.display());
        }
        Command::Fewshot => {
            let path = run_fewshot(cfg, &out)?;
            println!("wrote {}", path.display());
        }
        Command::ExportGates => {
            let path = run_export_gates(cfg, &out, artifact)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

/// Create the output directory and echo the resolved config into it.
pub fn prepare_output_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let out = PathBuf::from(cfg.resolved_output_dir());
    fs::create_dir_all(&out)?;
    fs::write(out.join("config.json"), cfg.to_json_pretty())?;
    Ok(out)
}

fn fnv64(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Relative path from `from_dir` to `to_file`, so checkpoints can
/// reference sources portably wherever the output tree lives.
fn relative_path(from_dir: &Path, to_file: &Path) -> Result<String> {
    let from = fs::canonicalize(from_dir)?;
    let to = fs::canonicalize(to_file)?;
    let from_parts: Vec<_> = from.components().collect();
    let to_parts: Vec<_> = to.components().collect();
    let common = from_parts
        .iter()
        .zip(&to_parts)
        .take_while(|(a, b)| a == b)
        .count();
    let mut rel = PathBuf::new();
    for _ in common..from_parts.len() {
        rel.push("..");
    }
    for part in &to_parts[common..] {
        rel.push(part);
    }
    Ok(rel.to_string_lossy().into_owned())
}

fn write_csv(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    let mut text = String::with_capacity(rows.len() * 32 + header.len() + 1);
    text.push_str(header);
    text.push('\n');
    for row in rows {
        text.push_str(row);
        text.push('\n');
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn metrics_csv_rows(log: &TrainLog) -> Vec<String> {
    log.metrics
        .iter()
        .map(|m| format!("{},{},{},{},{}", m.step, m.nll, m.l_moe, m.total, m.lr))
        .collect()
}

pub fn gates_csv_rows(log: &TrainLog) -> Vec<String> {
    log.gates
        .iter()
        .map(|g| {
            format!(
                "{},{},{},{},{}",
                g.step,
                g.block.name(),
                g.layer,
                g.expert,
                g.weight
            )
        })
        .collect()
}

fn stage1_snapshot(
    cfg: &TrainConfig,
    task: &SyntheticTask,
    init: PromptInit,
    seed: u64,
) -> serde_json::Value {
    serde_json::json!({
        "stage1": cfg,
        "task": task,
        "prompt_init": match init {
            PromptInit::FromDescription => "description",
            PromptInit::RandomVocab => "random_vocab",
            PromptInit::Disabled => "disabled",
        },
        "seed": seed,
    })
}

/// Train (or reuse a cached) stage-1 artifact for one task. The cache key
/// is the config snapshot embedded in the checkpoint.
pub fn ensure_source(
    cfg: &ExperimentConfig,
    task: &SyntheticTask,
    init: PromptInit,
    dir: &Path,
) -> Result<(SourceArtifact, PathBuf, String)> {
    let tok = Tokenizer::new();
    let path = dir.join(format!("source_{}.ckpt", task.task_id));
    let seed = cfg.stage1.seed ^ fnv64(&task.task_id);
    let snapshot = stage1_snapshot(&cfg.stage1, task, init, seed);
    if path.exists() {
        if let Ok((artifact, manifest)) = load_source(&path) {
            if manifest.model == cfg.model && manifest.config_snapshot == snapshot {
                let digest = manifest_digest(&manifest);
                return Ok((artifact, path, digest));
            }
        }
    }
    let backbone = Backbone::new(cfg.model.clone())?;
    let mut train_cfg = cfg.stage1.clone();
    train_cfg.seed = seed;
    let data = gen_examples(task, &tok, train_cfg.train_examples, Split::Train)?;
    let (artifact, log) = train_stage1(&backbone, task, &data, &tok, &train_cfg, init)?;
    save_source(&path, &artifact, &cfg.model, seed, snapshot)?;
    write_csv(
        &dir.join(format!("metrics_source_{}.csv", task.task_id)),
        "step,nll,l_moe,total,lr",
        &metrics_csv_rows(&log),
    )?;
    let (_, manifest) = load_source(&path)?;
    Ok((artifact, path, manifest_digest(&manifest)))
}

/// Train every configured source task; one checkpoint per task.
pub fn run_train_source(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let tok = Tokenizer::new();
    let init = cfg.ablation.prompt_init();
    let mut paths = Vec::new();
    for task in &cfg.sources {
        let (artifact, path, _) = ensure_source(cfg, task, init, out)?;
        let backbone = Backbone::new(cfg.model.clone())?;
        let test = gen_examples(task, &tok, cfg.eval_examples, Split::Test)?;
        let mut rt = Runtime::new(&backbone, RuntimeMode::Source(&artifact), cfg.flags);
        let m = evaluate(&mut rt, &test)?;
        println!(
            "source {}: exact_match {:.4} token_accuracy {:.4}",
            task.task_id, m.exact_match, m.token_accuracy
        );
        paths.push(path);
    }
    Ok(paths)
}

fn load_sources_for_target(
    cfg: &ExperimentConfig,
    dir: &Path,
) -> Result<(Vec<SourceArtifact>, Vec<SourceRef>)> {
    let mut artifacts = Vec::new();
    let mut refs = Vec::new();
    let mut missing = Vec::new();
    for task in &cfg.sources {
        let file_name = format!("source_{}.ckpt", task.task_id);
        let path = dir.join(&file_name);
        if !path.exists() {
            missing.push(file_name);
            continue;
        }
        let (artifact, manifest) = load_source(&path)?;
        if manifest.model != cfg.model {
            return Err(Error::Train(format!(
                "source {} was trained with an incompatible model config",
                task.task_id
            )));
        }
        refs.push(SourceRef {
            task_id: task.task_id.clone(),
            file_name,
            digest: manifest_digest(&manifest),
        });
        artifacts.push(artifact);
    }
    if !missing.is_empty() {
        return Err(Error::Train(format!(
            "missing source checkpoints: {} (run train-source first)",
            missing.join(", ")
        )));
    }
    Ok((artifacts, refs))
}

fn stage2_train_data(cfg: &ExperimentConfig, tok: &Tokenizer) -> Result<crate::tasks::Dataset> {
    let full = gen_examples(&cfg.target, tok, cfg.stage2.train_examples, Split::Train)?;
    match cfg.few_shot_k {
        Some(k) => few_shot_sample(&full, k, cfg.few_shot_data_seed),
        None => Ok(full),
    }
}

/// Stage 2 against previously trained sources; emits the target
/// checkpoint, metrics.csv and gates.csv.
pub fn run_train_target(cfg: &ExperimentConfig, out: &Path) -> Result<(PathBuf, EvalMetrics)> {
    let tok = Tokenizer::new();
    let needs_sources = cfg.ablation.use_moe;
    let (sources, refs) = if needs_sources {
        load_sources_for_target(cfg, out)?
    } else {
        (Vec::new(), Vec::new())
    };
    let mut backbone = Backbone::new(cfg.model.clone())?;
    let data = stage2_train_data(cfg, &tok)?;
    let (artifact, log) = train_stage2(
        &mut backbone,
        &sources,
        &cfg.target,
        &data,
        &tok,
        &cfg.stage2,
        &cfg.flags,
        &cfg.ablation,
    )?;
    let path = out.join(format!("target_{}.ckpt", cfg.target.task_id));
    let snapshot = serde_json::to_value(cfg).unwrap_or(serde_json::Value::Null);
    save_target(&path, &artifact, &cfg.model, cfg.stage2.seed, refs, snapshot)?;
    write_csv(&out.join("metrics.csv"), "step,nll,l_moe,total,lr", &metrics_csv_rows(&log))?;
    write_csv(
        &out.join("gates.csv"),
        "step,block,layer,expert,weight",
        &gates_csv_rows(&log),
    )?;

    let test = gen_examples(&cfg.target, &tok, cfg.eval_examples, Split::Test)?;
    let mut rt = Runtime::new(
        &backbone,
        RuntimeMode::Target { sources: &sources, artifact: &artifact },
        cfg.flags,
    );
    let metrics = evaluate(&mut rt, &test)?;
    write_csv(
        &out.join("eval.csv"),
        "artifact,stage,task_id,split,exact_match,token_accuracy",
        &[format!(
            "{},2,{},test,{},{}",
            path.file_name().unwrap().to_string_lossy(),
            cfg.target.task_id,
            metrics.exact_match,
            metrics.token_accuracy
        )],
    )?;
    Ok((path, metrics))
}

/// Load a stage-2 artifact plus its referenced sources, verifying the
/// recorded source digests.
pub fn load_target_with_sources(
    path: &Path,
) -> Result<(TargetArtifact, Vec<SourceArtifact>, Backbone)> {
    let (artifact, manifest) = load_target(path)?;
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut sources = Vec::new();
    for r in &manifest.source_refs {
        let sp = dir.join(&r.file_name);
        let (src, sm) = load_source(&sp)?;
        let digest = manifest_digest(&sm);
        if digest != r.digest {
            return Err(Error::Checkpoint(format!(
                "source {} content changed since the target artifact was trained",
                r.task_id
            )));
        }
        sources.push(src);
    }
    let mut backbone = Backbone::new(manifest.model.clone())?;
    artifact.apply_layer_norms(&mut backbone)?;
    Ok((artifact, sources, backbone))
}

/// Evaluate a saved artifact (stage 1 or 2) on its task's test split.
pub fn run_evaluate(
    cfg: &ExperimentConfig,
    out: &Path,
    artifact: Option<&Path>,
) -> Result<(String, u32, EvalMetrics)> {
    let tok = Tokenizer::new();
    let default_path = out.join(format!("target_{}.ckpt", cfg.target.task_id));
    let path = artifact.map(Path::to_path_buf).unwrap_or(default_path);
    if !path.exists() {
        return Err(Error::Train(format!(
            "no artifact at {} (train first or pass --artifact)",
            path.display()
        )));
    }
    let (manifest, _) = crate::checkpoint::read_file(&path)?;
    let (task_id, stage, metrics) = if manifest.stage == 1 {
        let (artifact, manifest) = load_source(&path)?;
        let task = cfg
            .sources
            .iter()
            .find(|t| t.task_id == manifest.task_id)
            .ok_or_else(|| {
                Error::Train(format!("task {} not in this config", manifest.task_id))
            })?;
        let backbone = Backbone::new(manifest.model.clone())?;
        let test = gen_examples(task, &tok, cfg.eval_examples, Split::Test)?;
        let mut rt = Runtime::new(&backbone, RuntimeMode::Source(&artifact), cfg.flags);
        (manifest.task_id.clone(), 1, evaluate(&mut rt, &test)?)
    } else {
        let (artifact, sources, backbone) = load_target_with_sources(&path)?;
        if artifact.task_id != cfg.target.task_id {
            return Err(Error::Train(format!(
                "artifact is for {} but config target is {}",
                artifact.task_id, cfg.target.task_id
            )));
        }
        let test = gen_examples(&cfg.target, &tok, cfg.eval_examples, Split::Test)?;
        let mut rt = Runtime::new(
            &backbone,
            RuntimeMode::Target { sources: &sources, artifact: &artifact },
            cfg.flags,
        );
        (artifact.task_id.clone(), 2, evaluate(&mut rt, &test)?)
    };
    write_csv(
        &out.join("eval.csv"),
        "artifact,stage,task_id,split,exact_match,token_accuracy",
        &[format!(
            "{},{},{},test,{},{}",
            path.file_name().unwrap().to_string_lossy(),
            stage,
            task_id,
            metrics.exact_match,
            metrics.token_accuracy
        )],
    )?;
    Ok((task_id, stage, metrics))
}

/// The four ablation arms.
pub fn ablation_arms() -> Vec<(&'static str, AblationFlags)> {
    vec![
        ("full", AblationFlags { use_description: true, use_correlation: true, use_moe: true }),
        (
            "no_description",
            AblationFlags { use_description: false, use_correlation: true, use_moe: true },
        ),
        (
            "no_correlation",
            AblationFlags { use_description: true, use_correlation: false, use_moe: true },
        ),
        (
            "no_correlation_no_moe",
            AblationFlags { use_description: true, use_correlation: false, use_moe: false },
        ),
    ]
}

fn source_variant_dir(init: PromptInit) -> &'static str {
    match init {
        PromptInit::FromDescription => "sources_desc",
        PromptInit::RandomVocab => "sources_rand",
        PromptInit::Disabled => "sources_noprompt",
    }
}

/// One stage-2 run for the given flags/seed against prepared sources.
fn ablation_run(
    cfg: &ExperimentConfig,
    sources: &[(SourceArtifact, PathBuf, String)],
    ablation: &AblationFlags,
    seed: u64,
    dir: &Path,
) -> Result<(EvalMetrics, usize)> {
    let tok = Tokenizer::new();
    let mut backbone = Backbone::new(cfg.model.clone())?;
    let mut cfg2 = cfg.stage2.clone();
    cfg2.seed = seed;
    let data = stage2_train_data(cfg, &tok)?;
    let artifacts: Vec<SourceArtifact> = sources.iter().map(|(a, _, _)| a.clone()).collect();
    let (artifact, log) = train_stage2(
        &mut backbone,
        &artifacts,
        &cfg.target,
        &data,
        &tok,
        &cfg2,
        &cfg.flags,
        ablation,
    )?;
    fs::create_dir_all(dir)?;
    let refs: Vec<SourceRef> = sources
        .iter()
        .map(|(a, path, digest)| {
            Ok(SourceRef {
                task_id: a.task_id.clone(),
                file_name: relative_path(dir, path)?,
                digest: digest.clone(),
            })
        })
        .collect::<Result<_>>()?;
    let ckpt = dir.join(format!("target_{}.ckpt", cfg.target.task_id));
    let snapshot = serde_json::json!({ "ablation": ablation, "seed": seed });
    save_target(&ckpt, &artifact, &cfg.model, seed, refs, snapshot)?;
    write_csv(&dir.join("metrics.csv"), "step,nll,l_moe,total,lr", &metrics_csv_rows(&log))?;
    write_csv(
        &dir.join("gates.csv"),
        "step,block,layer,expert,weight",
        &gates_csv_rows(&log),
    )?;
    let test = gen_examples(&cfg.target, &tok, cfg.eval_examples, Split::Test)?;
    let mut rt = Runtime::new(
        &backbone,
        RuntimeMode::Target { sources: &artifacts, artifact: &artifact },
        cfg.flags,
    );
    let metrics = evaluate(&mut rt, &test)?;
    let trainable = trainable_param_count(&artifact, &backbone);
    Ok((metrics, trainable))
}

/// Parameters stage 2 actually trains for a given artifact shape.
pub fn trainable_param_count(artifact: &TargetArtifact, backbone: &Backbone) -> usize {
    let mut n = 0;
    if let Some(tp) = &artifact.target_prompt {
        n += tp.matrix.numel();
    }
    for g in &artifact.gates {
        n += g.w_gate.numel();
    }
    for a in &artifact.adapters {
        n += a.param_count();
    }
    n += backbone
        .params()
        .filter(|(name, _)| crate::backbone::is_layernorm_param(name))
        .map(|(_, p)| p.numel())
        .sum::<usize>();
    n
}

/// The 4-arm x seeds ablation matrix; emits `ablate/summary.csv`.
pub fn run_ablate(cfg: &ExperimentConfig, out: &Path) -> Result<PathBuf> {
    let base = out.join("ablate");
    fs::create_dir_all(&base)?;
    let mut rows = Vec::new();
    for (arm_name, ablation) in ablation_arms() {
        // arm-specific sources: the prompt policy changes what stage 1 trains
        let sources = if ablation.use_moe {
            let init = ablation.prompt_init();
            // description-initialized sources are exactly what train-source
            // produces; share that cache instead of retraining
            let sdir = if init == PromptInit::FromDescription {
                out.to_path_buf()
            } else {
                base.join(source_variant_dir(init))
            };
            fs::create_dir_all(&sdir)?;
            let mut sources = Vec::new();
            for task in &cfg.sources {
                sources.push(ensure_source(cfg, task, init, &sdir)?);
            }
            sources
        } else {
            Vec::new()
        };
        for &seed in &cfg.seeds {
            let dir = base.join(arm_name).join(format!("seed_{seed}"));
            let (metrics, trainable) =
                ablation_run(cfg, &sources, &ablation, seed, &dir)?;
            println!(
                "ablate {arm_name} seed {seed}: exact_match {:.4} token_accuracy {:.4}",
                metrics.exact_match, metrics.token_accuracy
            );
            rows.push(format!(
                "{arm_name},{seed},{},{},{trainable}",
                metrics.exact_match, metrics.token_accuracy
            ));
        }
    }
    let path = base.join("summary.csv");
    write_csv(&path, "arm,seed,exact_match,token_accuracy,trainable_params", &rows)?;
    Ok(path)
}

/// Few-shot sweep over k in {4, 16, 32} and every configured seed, sharing
/// one data seed so all arms see identical subsets.
pub fn run_fewshot(cfg: &ExperimentConfig, out: &Path) -> Result<PathBuf> {
    let init = cfg.ablation.prompt_init();
    let mut sources = Vec::new();
    for task in &cfg.sources {
        sources.push(ensure_source(cfg, task, init, out)?);
    }
    let mut rows = Vec::new();
    for k in [4usize, 16, 32] {
        for &seed in &cfg.seeds {
            let mut sub = cfg.clone();
            sub.few_shot_k = Some(k);
            let dir = out.join("fewshot").join(format!("k{k}_seed{seed}"));
            let (metrics, _) =
                ablation_run(&sub, &sources, &cfg.ablation, seed, &dir)?;
            println!(
                "fewshot k={k} seed {seed}: exact_match {:.4} token_accuracy {:.4}",
                metrics.exact_match, metrics.token_accuracy
            );
            rows.push(format!("{k},{seed},{},{}", metrics.exact_match, metrics.token_accuracy));
        }
    }
    let path = out.join("fewshot.csv");
    write_csv(&path, "k,seed,exact_match,token_accuracy", &rows)?;
    Ok(path)
}

/// Mean gate weight per layer per source expert, measured over the target
/// test split at inference time.
pub fn run_export_gates(
    cfg: &ExperimentConfig,
    out: &Path,
    artifact: Option<&Path>,
) -> Result<PathBuf> {
    let tok = Tokenizer::new();
    let default_path = out.join(format!("target_{}.ckpt", cfg.target.task_id));
    let path = artifact.map(Path::to_path_buf).unwrap_or(default_path);
    let (target, sources, backbone) = load_target_with_sources(&path)?;
    if !target.use_moe {
        return Err(Error::Train(
            "artifact has no gates (trained with use_moe = false)".to_string(),
        ));
    }
    let test = gen_examples(&cfg.target, &tok, cfg.eval_examples, Split::Test)?;
    let mut rt = Runtime::new(
        &backbone,
        RuntimeMode::Target { sources: &sources, artifact: &target },
        cfg.flags,
    );
    evaluate(&mut rt, &test)?;
    let means = rt.gate_means();
    let n_enc = backbone.config.n_layers_enc;
    let mut rows = Vec::new();
    for (slot, row) in means.iter().enumerate() {
        let (block, layer) = if slot < n_enc {
            ("encoder", slot)
        } else {
            ("decoder", slot - n_enc)
        };
        for (k, w) in row.iter().enumerate() {
            rows.push(format!(
                "{},{block},{layer},{},{w}",
                target.task_id, sources[k].task_id
            ));
        }
    }
    let path = out.join("gates_export.csv");
    write_csv(&path, "target_task,block,layer,expert_task,mean_weight", &rows)?;
    Ok(path)
}

/// Render a few-line human summary of an ablation summary.csv.
pub fn summarize_ablation(csv_text: &str) -> String {
    let mut by_arm: std::collections::BTreeMap<String, Vec<f64>> = Default::default();
    for line in csv_text.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() >= 3 {
            if let Ok(em) = cols[2].parse::<f64>() {
                by_arm.entry(cols[0].to_string()).or_default().push(em);
            }
        }
    }
    let mut out = String::new();
    for (arm, vals) in by_arm {
        let mean = vals.iter().sum::<f64>() / vals.len().max(1) as f64;
        let _ = writeln!(out, "{arm}: mean exact_match {mean:.4} over {} seeds", vals.len());
    }
    out
}
