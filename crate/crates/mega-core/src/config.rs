//! Plain-text `key = value` run configuration. Unknown keys are errors, not
//! warnings; every value is validated on load.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskingMode {
    Cosine,
    Linear,
    Full,
}

impl std::fmt::Display for MaskingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MaskingMode::Cosine => "cosine",
            MaskingMode::Linear => "linear",
            MaskingMode::Full => "full",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // Artifact paths, resolved against the output directory when relative.
    pub train_data: String,
    pub test_data: String,
    pub tokenizer: String,
    pub pretrain_checkpoint: String,
    pub checkpoint: String,
    // Synthesis.
    pub train_count: usize,
    pub test_count: usize,
    pub occlusion_rate: f64,
    // Data and model dimensions.
    pub v: usize,
    pub k: usize,
    pub n: usize,
    pub l: usize,
    pub s: usize,
    pub d: usize,
    pub b_e: usize,
    pub b_d: usize,
    pub heads: usize,
    // Optimization.
    pub pretrain_epochs: usize,
    pub train_epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub masking: MaskingMode,
    pub pretrain: bool,
    // Generation.
    pub t: usize,
    pub a: f64,
    pub q: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train_data: "train.mega".into(),
            test_data: "test.mega".into(),
            tokenizer: "tokenizer.mtok".into(),
            pretrain_checkpoint: "pretrain.ckpt".into(),
            checkpoint: "model.ckpt".into(),
            train_count: 10_000,
            test_count: 512,
            occlusion_rate: 0.3,
            v: 216,
            k: 12,
            n: 24,
            l: 6,
            s: 64,
            d: 64,
            b_e: 4,
            b_d: 2,
            heads: 4,
            pretrain_epochs: 200,
            train_epochs: 100,
            batch_size: 64,
            base_lr: 1e-3,
            warmup_epochs: 10,
            beta1: 0.9,
            beta2: 0.99,
            weight_decay: 0.05,
            masking: MaskingMode::Cosine,
            pretrain: true,
            t: 5,
            a: 1.0,
            q: 25,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen: Vec<String> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            if seen.iter().any(|k| k == key) {
                return Err(Error::Config(format!("duplicate key `{key}`")));
            }
            seen.push(key.to_string());
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("key `{key}`: bad value `{value}`")))
        }
        match key {
            "train_data" => self.train_data = value.to_string(),
            "test_data" => self.test_data = value.to_string(),
            "tokenizer" => self.tokenizer = value.to_string(),
            "pretrain_checkpoint" => self.pretrain_checkpoint = value.to_string(),
            "checkpoint" => self.checkpoint = value.to_string(),
            "train_count" => self.train_count = num(key, value)?,
            "test_count" => self.test_count = num(key, value)?,
            "occlusion_rate" => self.occlusion_rate = num(key, value)?,
            "v" => self.v = num(key, value)?,
            "k" => self.k = num(key, value)?,
            "n" => self.n = num(key, value)?,
            "l" => self.l = num(key, value)?,
            "s" => self.s = num(key, value)?,
            "d" => self.d = num(key, value)?,
            "b_e" => self.b_e = num(key, value)?,
            "b_d" => self.b_d = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "pretrain_epochs" => self.pretrain_epochs = num(key, value)?,
            "train_epochs" => self.train_epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "base_lr" => self.base_lr = num(key, value)?,
            "warmup_epochs" => self.warmup_epochs = num(key, value)?,
            "beta1" => self.beta1 = num(key, value)?,
            "beta2" => self.beta2 = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "masking" => {
                self.masking = match value {
                    "cosine" => MaskingMode::Cosine,
                    "linear" => MaskingMode::Linear,
                    "full" => MaskingMode::Full,
                    other => {
                        return Err(Error::Config(format!(
                            "key `masking`: `{other}` is not cosine|linear|full"
                        )))
                    }
                }
            }
            "pretrain" => {
                self.pretrain = match value {
                    "on" => true,
                    "off" => false,
                    other => {
                        return Err(Error::Config(format!(
                            "key `pretrain`: `{other}` is not on|off"
                        )))
                    }
                }
            }
            "t" => self.t = num(key, value)?,
            "a" => self.a = num(key, value)?,
            "q" => self.q = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.v % 36 != 0 || self.v / 36 < 2 {
            return fail(format!(
                "v = {} must be 36 * rings with rings >= 2 (template has 12 segments of 3-vertex rings)",
                self.v
            ));
        }
        if self.k != 12 {
            return fail(format!("k = {} unsupported; the template has 12 joints", self.k));
        }
        if self.n == 0 || self.v % self.n != 0 {
            return fail(format!("v = {} not divisible into n = {} parts", self.v, self.n));
        }
        if self.l == 0 || self.l > 3 * (self.v / self.n) {
            return fail(format!(
                "l = {} outside [1, {}] for {}-vertex parts",
                self.l,
                3 * (self.v / self.n),
                self.v / self.n
            ));
        }
        if self.s == 0 {
            return fail("s must be >= 1".into());
        }
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return fail(format!("d = {} not divisible by heads = {}", self.d, self.heads));
        }
        if self.b_e == 0 || self.b_d == 0 {
            return fail("b_e and b_d must be >= 1".into());
        }
        if self.train_count == 0 || self.test_count == 0 {
            return fail("train_count and test_count must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.occlusion_rate) {
            return fail(format!("occlusion_rate = {} outside [0, 1]", self.occlusion_rate));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1".into());
        }
        if !(self.base_lr > 0.0) {
            return fail(format!("base_lr = {} must be > 0", self.base_lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return fail(format!("{name} = {b} outside [0, 1)"));
            }
        }
        if self.weight_decay < 0.0 {
            return fail("weight_decay must be >= 0".into());
        }
        if self.pretrain_epochs == 0 || self.train_epochs == 0 {
            return fail("epochs must be >= 1".into());
        }
        if self.t == 0 || self.q == 0 {
            return fail("t and q must be >= 1".into());
        }
        if !(self.a >= 0.0) {
            return fail(format!("a = {} must be >= 0", self.a));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            n_tokens: self.n,
            codebook_size: self.s,
            dim: self.d,
            enc_blocks: self.b_e,
            dec_blocks: self.b_d,
            heads: self.heads,
            keypoints: self.k,
        }
    }

    /// Rings per segment for the configured vertex count.
    pub fn rings_per_segment(&self) -> usize {
        self.v / 36
    }

    /// Resolve an artifact path against the output directory.
    pub fn resolve(&self, out_dir: &Path, rel: &str) -> PathBuf {
        let p = Path::new(rel);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            out_dir.join(p)
        }
    }
}
