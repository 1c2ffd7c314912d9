//! Flat `key = value` run configuration shared by every CLI command.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::dataset::DatasetConfig;
use crate::error::{Error, Result};
use crate::training::{GradCheckConfig, PretrainConfig, Toggles, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub dataset: DatasetConfig,
    pub split_seed: u64,
    pub pretrain: PretrainConfig,
    pub grad_check: GradCheckConfig,
    /// Training seeds used by `ablate`.
    pub ablate_seeds: Vec<u64>,
    pub dataset_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            dataset: DatasetConfig::default(),
            split_seed: 3,
            pretrain: PretrainConfig::default(),
            grad_check: GradCheckConfig::default(),
            ablate_seeds: vec![0, 1, 2],
            dataset_dir: "data".into(),
            checkpoint_dir: "checkpoints".into(),
            output_dir: "out".into(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

impl RunConfig {
    /// Parses `key = value` lines; `#` starts a comment. Unknown keys and
    /// repeated keys are errors. The result is validated.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if seen.insert(k.to_string(), lineno).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {k}", lineno + 1)));
            }
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::MissingInput {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let t = &mut self.train;
        let d = &mut self.dataset;
        let p = &mut self.pretrain;
        match key {
            "lambda1" => t.lambda1 = parse(key, v)?,
            "lambda2" => t.lambda2 = parse(key, v)?,
            "tau" => t.tau = parse(key, v)?,
            "alpha" => t.alpha = parse(key, v)?,
            "q" => t.q = parse(key, v)?,
            "k" => t.k = parse(key, v)?,
            "lr" => t.lr = parse(key, v)?,
            "warmup_lr" => t.warmup_lr = parse(key, v)?,
            "epochs" => t.epochs = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "shots" => t.shots = parse(key, v)?,
            "seed" => t.seed = parse(key, v)?,
            "use_dual_prompt" => t.toggles.use_dual_prompt = parse_bool(key, v)?,
            "use_token_weighting" => t.toggles.use_token_weighting = parse_bool(key, v)?,
            "use_category_loss" => t.toggles.use_category_loss = parse_bool(key, v)?,
            "base_metas" => d.base_metas = parse(key, v)?,
            "downstream_metas" => d.downstream_metas = parse(key, v)?,
            "subs_per_meta" => d.subs_per_meta = parse(key, v)?,
            "per_sub" => d.per_sub = parse(key, v)?,
            "taxonomy_seed" => d.taxonomy_seed = parse(key, v)?,
            "dataset_seed" => d.dataset_seed = parse(key, v)?,
            "split_seed" => self.split_seed = parse(key, v)?,
            "pretrain_epochs" => p.epochs = parse(key, v)?,
            "pretrain_batch_size" => p.batch_size = parse(key, v)?,
            "pretrain_lr" => p.lr = parse(key, v)?,
            "pretrain_momentum" => p.momentum = parse(key, v)?,
            "pretrain_seed" => p.seed = parse(key, v)?,
            "grad_check_epsilon" => self.grad_check.epsilon = parse(key, v)?,
            "grad_check_per_tensor" => self.grad_check.per_tensor = parse(key, v)?,
            "ablate_seeds" => {
                self.ablate_seeds = v
                    .split(',')
                    .map(|s| parse(key, s.trim()))
                    .collect::<Result<_>>()?
            }
            "dataset_dir" => self.dataset_dir = v.into(),
            "checkpoint_dir" => self.checkpoint_dir = v.into(),
            "output_dir" => self.output_dir = v.into(),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.pretrain.validate()?;
        let d = &self.dataset;
        if d.downstream_metas == 0 {
            return Err(Error::Config("downstream_metas must be at least 1".into()));
        }
        if d.subs_per_meta < 2 {
            return Err(Error::Config("subs_per_meta must be at least 2".into()));
        }
        if d.per_sub <= self.train.shots {
            return Err(Error::Config(format!(
                "per_sub ({}) must exceed shots ({})",
                d.per_sub, self.train.shots
            )));
        }
        if self.ablate_seeds.is_empty() {
            return Err(Error::Config("ablate_seeds must list at least one seed".into()));
        }
        if !(self.grad_check.epsilon > 0.0) {
            return Err(Error::Config("grad_check_epsilon must be positive".into()));
        }
        Ok(())
    }

    /// Every key with its effective value, sorted by key.
    pub fn normalized(&self) -> BTreeMap<&'static str, String> {
        let t = &self.train;
        let d = &self.dataset;
        let p = &self.pretrain;
        let seeds: Vec<String> = self.ablate_seeds.iter().map(u64::to_string).collect();
        BTreeMap::from([
            ("lambda1", t.lambda1.to_string()),
            ("lambda2", t.lambda2.to_string()),
            ("tau", t.tau.to_string()),
            ("alpha", t.alpha.to_string()),
            ("q", t.q.to_string()),
            ("k", t.k.to_string()),
            ("lr", t.lr.to_string()),
            ("warmup_lr", t.warmup_lr.to_string()),
            ("epochs", t.epochs.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("shots", t.shots.to_string()),
            ("seed", t.seed.to_string()),
            ("use_dual_prompt", t.toggles.use_dual_prompt.to_string()),
            ("use_token_weighting", t.toggles.use_token_weighting.to_string()),
            ("use_category_loss", t.toggles.use_category_loss.to_string()),
            ("base_metas", d.base_metas.to_string()),
            ("downstream_metas", d.downstream_metas.to_string()),
            ("subs_per_meta", d.subs_per_meta.to_string()),
            ("per_sub", d.per_sub.to_string()),
            ("taxonomy_seed", d.taxonomy_seed.to_string()),
            ("dataset_seed", d.dataset_seed.to_string()),
            ("split_seed", self.split_seed.to_string()),
            ("pretrain_epochs", p.epochs.to_string()),
            ("pretrain_batch_size", p.batch_size.to_string()),
            ("pretrain_lr", p.lr.to_string()),
            ("pretrain_momentum", p.momentum.to_string()),
            ("pretrain_seed", p.seed.to_string()),
            ("grad_check_epsilon", self.grad_check.epsilon.to_string()),
            ("grad_check_per_tensor", self.grad_check.per_tensor.to_string()),
            ("ablate_seeds", seeds.join(",")),
            ("dataset_dir", self.dataset_dir.display().to_string()),
            ("checkpoint_dir", self.checkpoint_dir.display().to_string()),
            ("output_dir", self.output_dir.display().to_string()),
        ])
    }

    pub fn to_text(&self) -> String {
        self.normalized()
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// First 16 hex digits of the SHA-256 of the normalized configuration.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.normalized() {
            h.update(format!("{k}={v}\n").as_bytes());
        }
        hex::encode(h.finalize())[..16].to_string()
    }

    pub fn with_toggles(&self, toggles: Toggles) -> Self {
        let mut c = self.clone();
        c.train.toggles = toggles;
        c
    }
}
