//! Experiment configuration: a flat `key = value` text format covering
//! the model, the pipeline topology, the attack, and every training
//! phase. Unknown keys are rejected; anything omitted takes the
//! documented default. `#` starts a comment.

use crate::adversary::{AttackConfig, AttackMode};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::optim::OptimizerKind;
use crate::pipeline::TrainConfig;
use std::collections::BTreeMap;
use std::path::Path;

/// Dataset seeds and sizes. Eval size counts prompt cores (pairs).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DataConfig {
    pub seed: u64,
    /// Data seed for the scripted pretraining run; distinct from `seed`
    /// so fine-tuning sees fresh draws of the same task.
    pub pretrain_seed: u64,
    pub clean_train_size: usize,
    pub clean_val_size: usize,
    pub harmful_train_size: usize,
    pub harmful_val_size: usize,
    pub eval_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            seed: 42,
            pretrain_seed: 1042,
            clean_train_size: 1024,
            clean_val_size: 128,
            harmful_train_size: 512,
            harmful_val_size: 128,
            eval_size: 200,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub stages: usize,
    pub microbatches: usize,
    pub attack: Option<AttackConfig>,
    pub pretrain: TrainConfig,
    pub surrogate: TrainConfig,
    pub sft: TrainConfig,
    pub align_enabled: bool,
    pub align: TrainConfig,
    pub data: DataConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        ExperimentConfig {
            model,
            stages: 4,
            microbatches: 1,
            attack: None,
            pretrain: TrainConfig {
                iters: 750,
                lr: 1e-3,
                optimizer: OptimizerKind::Adam,
                warmup_frac: 0.0,
                seed: 11,
                eval_interval: 25,
                ..TrainConfig::default()
            },
            surrogate: TrainConfig {
                iters: 500,
                lr: 1e-3,
                optimizer: OptimizerKind::Adam,
                warmup_frac: 0.0,
                seed: 12,
                eval_interval: 25,
                ..TrainConfig::default()
            },
            sft: TrainConfig {
                iters: 750,
                lr: 3e-4,
                optimizer: OptimizerKind::AdamW,
                warmup_frac: 0.05,
                seed: 13,
                ..TrainConfig::default()
            },
            align_enabled: false,
            align: TrainConfig {
                iters: 500,
                lr: 3e-5,
                optimizer: OptimizerKind::Adam,
                warmup_frac: 0.0,
                seed: 14,
                eval_interval: 25,
                ..TrainConfig::default()
            },
            data: DataConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(&path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.as_ref().display()))
        })?;
        Self::from_str_contents(&text)
    }

    pub fn from_str_contents(text: &str) -> Result<Self> {
        let mut kv: BTreeMap<String, String> = BTreeMap::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected 'key = value', got '{raw}'",
                    ln + 1
                )));
            };
            if kv.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key '{}'", ln + 1, k.trim())));
            }
        }
        Self::from_pairs(kv)
    }

    fn from_pairs(mut kv: BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();

        fn take<T: std::str::FromStr>(
            kv: &mut BTreeMap<String, String>,
            key: &str,
            slot: &mut T,
        ) -> Result<()> {
            if let Some(v) = kv.remove(key) {
                *slot = v
                    .parse::<T>()
                    .map_err(|_| Error::Config(format!("bad value '{v}' for key '{key}'")))?;
            }
            Ok(())
        }

        take(&mut kv, "model.layers", &mut cfg.model.blocks)?;
        take(&mut kv, "model.vocab", &mut cfg.model.vocab)?;
        take(&mut kv, "model.embed_dim", &mut cfg.model.embed_dim)?;
        take(&mut kv, "model.prompt_len", &mut cfg.model.prompt_len)?;
        take(&mut kv, "model.target_len", &mut cfg.model.target_len)?;
        take(&mut kv, "pipeline.stages", &mut cfg.stages)?;
        take(&mut kv, "pipeline.microbatches", &mut cfg.microbatches)?;

        let attack_mode = kv.remove("attack.mode").unwrap_or_else(|| "none".into());
        let mut w = 0.1_f64;
        let mut fq_raw = String::from("25");
        let mut stage = 1usize;
        take(&mut kv, "attack.w", &mut w)?;
        take(&mut kv, "attack.fq", &mut fq_raw)?;
        take(&mut kv, "attack.stage", &mut stage)?;
        cfg.attack = match attack_mode.as_str() {
            "none" => None,
            mode => {
                let mode: AttackMode = mode.parse()?;
                let fq = match (mode, fq_raw.as_str()) {
                    (AttackMode::Iterative, raw) => Some(raw.parse::<u64>().map_err(|_| {
                        Error::Config(format!("bad value '{raw}' for key 'attack.fq'"))
                    })?),
                    // one-shot and sign-flip take no period ("na" accepted)
                    _ => None,
                };
                Some(AttackConfig { w, fq, stage, mode })
            }
        };

        for (prefix, phase) in [
            ("pretrain", &mut cfg.pretrain),
            ("surrogate", &mut cfg.surrogate),
            ("train", &mut cfg.sft),
            ("align", &mut cfg.align),
        ] {
            take(&mut kv, &format!("{prefix}.iters"), &mut phase.iters)?;
            take(&mut kv, &format!("{prefix}.lr"), &mut phase.lr)?;
            take(&mut kv, &format!("{prefix}.batch"), &mut phase.batch_size)?;
            take(&mut kv, &format!("{prefix}.optimizer"), &mut phase.optimizer)?;
            take(&mut kv, &format!("{prefix}.warmup"), &mut phase.warmup_frac)?;
            take(&mut kv, &format!("{prefix}.seed"), &mut phase.seed)?;
            take(&mut kv, &format!("{prefix}.weight_decay"), &mut phase.weight_decay)?;
            take(&mut kv, &format!("{prefix}.eval_interval"), &mut phase.eval_interval)?;
        }
        cfg.sft.microbatches = cfg.microbatches;
        take(&mut kv, "align.enabled", &mut cfg.align_enabled)?;

        take(&mut kv, "data.seed", &mut cfg.data.seed)?;
        // default pretrain data seed tracks data.seed unless set explicitly
        cfg.data.pretrain_seed = cfg.data.seed.wrapping_add(1000);
        take(&mut kv, "data.pretrain_seed", &mut cfg.data.pretrain_seed)?;
        take(&mut kv, "data.clean_train_size", &mut cfg.data.clean_train_size)?;
        take(&mut kv, "data.clean_val_size", &mut cfg.data.clean_val_size)?;
        take(&mut kv, "data.harmful_train_size", &mut cfg.data.harmful_train_size)?;
        take(&mut kv, "data.harmful_val_size", &mut cfg.data.harmful_val_size)?;
        take(&mut kv, "data.eval_size", &mut cfg.data.eval_size)?;

        if let Some(unknown) = kv.keys().next() {
            return Err(Error::Config(format!("unknown config key '{unknown}'")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages != 1 && self.stages < 3 {
            return Err(Error::Config(format!(
                "pipeline.stages must be 1 (degenerate) or >= 3, got {}",
                self.stages
            )));
        }
        if self.stages > self.model.blocks {
            return Err(Error::Config(format!(
                "pipeline.stages ({}) exceeds model.layers ({})",
                self.stages, self.model.blocks
            )));
        }
        if self.align_enabled && self.align.lr >= self.sft.lr {
            return Err(Error::Config(format!(
                "alignment lr ({}) must be below the SFT lr ({})",
                self.align.lr, self.sft.lr
            )));
        }
        if self.attack.is_some() && self.stages < 3 {
            return Err(Error::Config("an attack needs an intermediate stage".into()));
        }
        if self.data.eval_size == 0 {
            return Err(Error::Config("data.eval_size must be > 0".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_documented_keys() {
        let text = "\
# topology
model.layers = 8
pipeline.stages = 4
attack.mode = iterative
attack.w = 0.1
attack.fq = 25
attack.stage = 1
train.iters = 750
train.lr = 0.0003
train.seed = 99
align.enabled = true
";
        let cfg = ExperimentConfig::from_str_contents(text).unwrap();
        assert_eq!(cfg.model.blocks, 8);
        assert_eq!(cfg.stages, 4);
        let atk = cfg.attack.unwrap();
        assert_eq!(atk.w, 0.1);
        assert_eq!(atk.fq, Some(25));
        assert_eq!(atk.stage, 1);
        assert_eq!(atk.mode, AttackMode::Iterative);
        assert_eq!(cfg.sft.iters, 750);
        assert_eq!(cfg.sft.lr, 3e-4);
        assert_eq!(cfg.sft.seed, 99);
        assert!(cfg.align_enabled);
    }

    #[test]
    fn one_shot_accepts_na_period() {
        let cfg = ExperimentConfig::from_str_contents(
            "attack.mode = one_shot\nattack.w = 1.0\nattack.fq = na\n",
        )
        .unwrap();
        let atk = cfg.attack.unwrap();
        assert_eq!(atk.mode, AttackMode::OneShot);
        assert_eq!(atk.fq, None);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(ExperimentConfig::from_str_contents("nope.key = 1\n").is_err());
        assert!(ExperimentConfig::from_str_contents("train.iters = many\n").is_err());
        assert!(ExperimentConfig::from_str_contents("train.iters\n").is_err());
        assert!(ExperimentConfig::from_str_contents("train.iters = 1\ntrain.iters = 2\n").is_err());
    }

    #[test]
    fn alignment_lr_must_stay_below_sft_lr() {
        let bad = "align.enabled = true\nalign.lr = 0.01\ntrain.lr = 0.0003\n";
        assert!(ExperimentConfig::from_str_contents(bad).is_err());
    }

    #[test]
    fn comments_and_blanks_are_ignored() {
        let cfg = ExperimentConfig::from_str_contents(
            "\n# full-line comment\n  train.iters = 10  # trailing\n\n",
        )
        .unwrap();
        assert_eq!(cfg.sft.iters, 10);
    }
}
