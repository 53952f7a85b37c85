//! Experiment configuration: JSON files with full defaults, validated into
//! a structured error that lists every offending key.

use std::env;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::ModelConfig;
use crate::error::{Error, Result};
use crate::tasks::{SyntheticTask, TaskFamily, TaskParams, Tokenizer};
use crate::training::{AblationFlags, RunFlags, TrainConfig};

/// Environment variable that overrides `output_dir`.
pub const OUTPUT_DIR_ENV: &str = "MOME_OUTPUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    pub sources: Vec<SyntheticTask>,
    pub target: SyntheticTask,
    pub ablation: AblationFlags,
    pub flags: RunFlags,
    pub few_shot_k: Option<usize>,
    /// Data seed shared by every arm of a few-shot comparison.
    pub few_shot_data_seed: u64,
    pub seeds: Vec<u64>,
    pub output_dir: String,
    /// Held-out evaluation set size.
    pub eval_examples: usize,
    /// Optional `task_id<TAB>description` manifest overriding the built-in
    /// task descriptions; resolved relative to the config file.
    pub descriptions_file: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            stage1: TrainConfig::stage1_default(),
            stage2: TrainConfig::stage2_default(),
            sources: default_sources(),
            target: default_target(),
            ablation: AblationFlags::default(),
            flags: RunFlags::default(),
            few_shot_k: None,
            few_shot_data_seed: 1234,
            seeds: vec![42, 1024, 4096],
            output_dir: "out".to_string(),
            eval_examples: 64,
            descriptions_file: None,
        }
    }
}

/// Six source tasks over a shared four-symbol alphabet: copy, reverse, two
/// disjoint substitutions, sort and modular running sums. Lengths 2-4 keep
/// the behaviours mutually distinguishable (no palindromes, few pre-sorted
/// inputs).
pub fn default_sources() -> Vec<SyntheticTask> {
    let base = TaskParams { min_len: 2, max_len: 4, permutation: None, modulus: None };
    let mk = |task_id: &str, family, params, seed| SyntheticTask {
        task_id: task_id.to_string(),
        family,
        vocab_subset: "abcd".to_string(),
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
            "map_bwd_src",
            TaskFamily::TokenMap,
            TaskParams { permutation: Some("dabc".into()), ..base.clone() },
            104,
        ),
        mk("sort_src", TaskFamily::Sort, base.clone(), 105),
        mk(
            "modsum_src",
            TaskFamily::ModularAdd,
            TaskParams { modulus: Some(4), ..base },
            106,
        ),
    ]
}

/// The default target twins `map_rot_src` (same family and parameters,
/// fresh data): the expert-dominance experiment's related target.
pub fn default_target() -> SyntheticTask {
    SyntheticTask {
        task_id: "map_rot_tgt".to_string(),
        family: TaskFamily::TokenMap,
        vocab_subset: "abcd".to_string(),
        description: None,
        params: TaskParams {
            min_len: 2,
            max_len: 4,
            permutation: Some("bcda".into()),
            modulus: None,
        },
        seed: 900,
    }
}

impl ExperimentConfig {
    /// `output_dir`, unless `MOME_OUTPUT_DIR` overrides it.
    pub fn resolved_output_dir(&self) -> String {
        env::var(OUTPUT_DIR_ENV).unwrap_or_else(|_| self.output_dir.clone())
    }

    pub fn validate(&self) -> Result<()> {
        let mut issues = Vec::new();
        if let Err(Error::Config(mut model_issues)) = self.model.validate() {
            issues.append(&mut model_issues);
        }
        issues.extend(self.stage1.validate("stage1"));
        issues.extend(self.stage2.validate("stage2"));
        if self.sources.is_empty() {
            issues.push("sources: at least one source task required".to_string());
        }
        let tok = Tokenizer::new();
        let mut seen = std::collections::HashSet::new();
        for (i, task) in self.sources.iter().chain([&self.target]).enumerate() {
            let key = if i < self.sources.len() {
                format!("sources[{i}]")
            } else {
                "target".to_string()
            };
            if !seen.insert(task.task_id.clone()) {
                issues.push(format!("{key}.task_id: duplicate id {}", task.task_id));
            }
            if let Err(e) = crate::tasks::gen_examples(task, &tok, 1, crate::tasks::Split::Train)
            {
                issues.push(format!("{key}: {e}"));
            }
            match tok.tokenize(&task.description().text) {
                Ok(ids) => {
                    if ids.is_empty() {
                        issues.push(format!("{key}.description: empty"));
                    } else if ids.len() + task.params.max_len > self.model.max_len {
                        issues.push(format!(
                            "{key}.description: {} tokens + inputs up to {} exceed max_len {}",
                            ids.len(),
                            task.params.max_len,
                            self.model.max_len
                        ));
                    }
                }
                Err(e) => issues.push(format!("{key}.description: {e}")),
            }
        }
        if self.model.vocab_size != tok.vocab_size() {
            issues.push(format!(
                "model.vocab_size: must equal the tokenizer alphabet size {}",
                tok.vocab_size()
            ));
        }
        if self.seeds.is_empty() {
            issues.push("seeds: at least one seed required".to_string());
        }
        if let Some(k) = self.few_shot_k {
            if k == 0 || k > self.stage2.train_examples {
                issues.push(format!(
                    "few_shot_k: {k} outside 1..={}",
                    self.stage2.train_examples
                ));
            }
        }
        if self.flags.balance_sign != 1.0 && self.flags.balance_sign != -1.0 {
            issues.push("flags.balance_sign: must be +1 or -1".to_string());
        }
        if self.eval_examples == 0 {
            issues.push("eval_examples: must be at least 1".to_string());
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(issues))
        }
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Merge user keys over the base object, rejecting unknown keys so typos
/// surface as structured config errors.
fn overlay_stage(
    key: &str,
    user: &serde_json::Value,
    base: &TrainConfig,
) -> std::result::Result<serde_json::Value, String> {
    let mut merged = serde_json::to_value(base).expect("train config serializes");
    let serde_json::Value::Object(user_obj) = user else {
        return Err(format!("{key}: expected an object"));
    };
    let obj = merged.as_object_mut().unwrap();
    for (k, v) in user_obj {
        if !obj.contains_key(k) {
            return Err(format!("{key}.{k}: unknown key"));
        }
        obj.insert(k.clone(), v.clone());
    }
    Ok(merged)
}

/// Build a config from a parsed JSON value. Partial `stage1` / `stage2`
/// sections are completed from their own stage defaults.
pub fn config_from_value(mut value: serde_json::Value) -> Result<ExperimentConfig> {
    let mut issues = Vec::new();
    if let Some(obj) = value.as_object_mut() {
        for (key, base) in [
            ("stage1", TrainConfig::stage1_default()),
            ("stage2", TrainConfig::stage2_default()),
        ] {
            if let Some(user) = obj.get(key) {
                match overlay_stage(key, user, &base) {
                    Ok(merged) => {
                        obj.insert(key.to_string(), merged);
                    }
                    Err(msg) => issues.push(msg),
                }
            }
        }
    }
    if !issues.is_empty() {
        return Err(Error::Config(issues));
    }
    serde_json::from_value(value).map_err(|e| Error::Config(vec![e.to_string()]))
}

/// Read, parse and validate a config file. A `descriptions_file` manifest,
/// when configured, overrides task descriptions by task id.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::Config(vec![format!("{}: {e}", path.display())]))?;
    let mut cfg = config_from_value(value)?;
    if let Some(manifest) = cfg.descriptions_file.clone() {
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let manifest_path = base.join(&manifest);
        let manifest_text = fs::read_to_string(&manifest_path)?;
        apply_description_manifest(&mut cfg, &manifest_text)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Apply `task_id<TAB>description` lines to the configured tasks. Entries
/// naming an unknown task are an error so typos do not pass silently.
pub fn apply_description_manifest(cfg: &mut ExperimentConfig, text: &str) -> Result<()> {
    let descs = crate::prompts::parse_description_manifest(text)?;
    for d in descs {
        let task = cfg
            .sources
            .iter_mut()
            .chain(std::iter::once(&mut cfg.target))
            .find(|t| t.task_id == d.task_id);
        match task {
            Some(t) => t.description = Some(d.text),
            None => {
                return Err(Error::Config(vec![format!(
                    "descriptions_file: unknown task_id {}",
                    d.task_id
                )]));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn default_config_round_trips_through_json() {
        let cfg = ExperimentConfig::default();
        let json = cfg.to_json_pretty();
        let back: ExperimentConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn empty_json_yields_the_defaults() {
        let cfg: ExperimentConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.seeds, vec![42, 1024, 4096]);
        assert!((cfg.stage2.alpha - 0.1).abs() < 1e-15);
    }

    #[test]
    fn validation_lists_every_offending_key() {
        let mut cfg = ExperimentConfig::default();
        cfg.stage1.learning_rate = -1.0;
        cfg.stage2.alpha = -0.5;
        cfg.seeds.clear();
        cfg.sources[0].vocab_subset = "ab".into(); // too small for max_len 4
        let err = cfg.validate().unwrap_err();
        let Error::Config(issues) = err else { panic!("expected config error") };
        let text = issues.join("\n");
        assert!(text.contains("stage1.learning_rate"), "{text}");
        assert!(text.contains("stage2.alpha"), "{text}");
        assert!(text.contains("seeds"), "{text}");
        assert!(text.contains("sources[0]"), "{text}");
    }

    #[test]
    fn partial_stage_sections_merge_onto_their_own_defaults() {
        let v: serde_json::Value =
            serde_json::from_str(r#"{"stage2": {"max_steps": 30}}"#).unwrap();
        let cfg = config_from_value(v).unwrap();
        assert_eq!(cfg.stage2.max_steps, 30);
        // the untouched stage-2 fields keep stage-2 defaults, not stage-1 ones
        assert!((cfg.stage2.alpha - 0.1).abs() < 1e-15);
        assert!((cfg.stage2.learning_rate - 1e-2).abs() < 1e-15);
        assert_eq!(cfg.stage1.max_steps, 500);
    }

    #[test]
    fn unknown_stage_keys_are_rejected() {
        let v: serde_json::Value =
            serde_json::from_str(r#"{"stage1": {"learnign_rate": 0.1}}"#).unwrap();
        let err = config_from_value(v).unwrap_err().to_string();
        assert!(err.contains("stage1.learnign_rate"), "{err}");
    }

    #[test]
    fn description_manifest_overrides_by_task_id() {
        let mut cfg = ExperimentConfig::default();
        apply_description_manifest(&mut cfg, "copy_src\trepeat everything verbatim.\n").unwrap();
        assert_eq!(
            cfg.sources[0].description.as_deref(),
            Some("repeat everything verbatim.")
        );
        let err = apply_description_manifest(&mut cfg, "nope\tmissing task.\n").unwrap_err();
        assert!(err.to_string().contains("unknown task_id"));
    }

    #[test]
    fn env_var_overrides_output_dir() {
        let cfg = ExperimentConfig::default();
        std::env::set_var(OUTPUT_DIR_ENV, "/tmp/elsewhere");
        assert_eq!(cfg.resolved_output_dir(), "/tmp/elsewhere");
        std::env::remove_var(OUTPUT_DIR_ENV);
        assert_eq!(cfg.resolved_output_dir(), "out");
    }

    #[test]
    fn descriptions_fit_the_model_budget() {
        let cfg = ExperimentConfig::default();
        let tok = Tokenizer::new();
        for task in cfg.sources.iter().chain([&cfg.target]) {
            let m = tok.tokenize(&task.description().text).unwrap().len();
            assert!(m + task.params.max_len <= cfg.model.max_len);
        }
    }
}
