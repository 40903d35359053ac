//! Encoder, alignment and training configuration, plus the `key = value`
//! config-file format.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::{Error, Result};

/// Geometry of the toy dual encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub image_size: usize,
    pub image_channels: usize,
    pub patch_size: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    pub projection_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            num_layers: 4,
            num_heads: 4,
            mlp_ratio: 4,
            image_size: 32,
            image_channels: 1,
            patch_size: 8,
            vocab_size: 1024,
            max_text_len: 77,
            projection_dim: 64,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("embed_dim", self.embed_dim),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("mlp_ratio", self.mlp_ratio),
            ("image_size", self.image_size),
            ("image_channels", self.image_channels),
            ("patch_size", self.patch_size),
            ("projection_dim", self.projection_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.max_text_len < 2 {
            return Err(Error::Config("max_text_len must be at least 2".into()));
        }
        if self.vocab_size < 5 {
            return Err(Error::Config("vocab_size must be at least 5".into()));
        }
        Ok(())
    }

    /// Patches per side of the image grid.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Number of local (patch) tokens, N_l.
    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Flattened pixel count of one patch.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.image_channels
    }
}

/// Matching loss between a prompted global feature and its prototype.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    CosineDistance,
    L1,
}

impl Metric {
    pub fn as_str(&self) -> &'static str {
        match self {
            Metric::CosineDistance => "cosine",
            Metric::L1 => "l1",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cosine" | "cosine_distance" => Ok(Metric::CosineDistance),
            "l1" | "L1" => Ok(Metric::L1),
            other => Err(Error::Config(format!("unknown metric {other:?}"))),
        }
    }
}

/// Cross-modal alignment hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentConfig {
    /// Local features kept per class; capped at N_l.
    pub k: usize,
    pub beta: f32,
    pub gamma: f32,
    pub tau_logits: f32,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self {
            k: 16,
            beta: 1.0,
            gamma: 1.0,
            tau_logits: 0.07,
        }
    }
}

impl AlignmentConfig {
    pub fn effective_k(&self, num_patches: usize) -> usize {
        self.k.min(num_patches)
    }
}

/// Everything a training run depends on.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub encoder: EncoderConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub tau: f32,
    pub tau_logits: f32,
    pub beta: f32,
    pub gamma: f32,
    pub k: usize,
    pub n_prompts: usize,
    pub context_len: usize,
    /// Learnable visual prompts on/off (ablation switch).
    pub visual_prompts: bool,
    /// Top-k local term of the logits on/off (ablation switch).
    pub local_alignment: bool,
    pub template: u8,
    pub metric: Metric,
    /// Images per class for prototypes; `None` uses every training image.
    pub subset_size: Option<usize>,
    pub flip_prob: f32,
    pub weight_seed: u64,
    pub data_seed: u64,
    pub prompt_seed: u64,
    pub prototype_seed: u64,
    pub dataset: PathBuf,
    pub fixtures: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            epochs: 40,
            batch_size: 32,
            lr: 0.032,
            momentum: 0.9,
            weight_decay: 0.0,
            tau: 0.07,
            tau_logits: 0.07,
            beta: 1.0,
            gamma: 1.0,
            k: 4,
            n_prompts: 8,
            context_len: 10,
            visual_prompts: true,
            local_alignment: true,
            template: 3,
            metric: Metric::CosineDistance,
            subset_size: None,
            flip_prob: 0.0,
            weight_seed: 0,
            data_seed: 0,
            prompt_seed: 0,
            prototype_seed: 0,
            dataset: PathBuf::from("data"),
            fixtures: PathBuf::from("fixtures/expressions7.txt"),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "on" | "yes" => Ok(true),
        "false" | "0" | "off" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {value:?}"))),
    }
}

impl TrainConfig {
    /// The frozen-encoder alignment settings implied by this config.
    pub fn alignment(&self) -> AlignmentConfig {
        AlignmentConfig {
            k: self.k,
            beta: self.beta,
            gamma: self.gamma,
            tau_logits: self.tau_logits,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        let positive = [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("k", self.k),
            ("n_prompts", self.n_prompts),
            ("context_len", self.context_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.lr > 0.0 && self.tau > 0.0 && self.tau_logits > 0.0) {
            return Err(Error::Config("lr, tau and tau_logits must be positive".into()));
        }
        if self.beta < 0.0 || self.gamma < 0.0 || self.momentum < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config("beta, gamma, momentum, weight_decay must be >= 0".into()));
        }
        if !(1..=3).contains(&self.template) {
            return Err(Error::Config(format!("template must be 1, 2 or 3, got {}", self.template)));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config("flip_prob must lie in [0, 1]".into()));
        }
        if self.subset_size == Some(0) {
            return Err(Error::Config("subset_size must be positive or `full`".into()));
        }
        Ok(())
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let e = &mut self.encoder;
        match key {
            "embed_dim" => e.embed_dim = parse_num(key, value)?,
            "num_layers" => e.num_layers = parse_num(key, value)?,
            "num_heads" => e.num_heads = parse_num(key, value)?,
            "mlp_ratio" => e.mlp_ratio = parse_num(key, value)?,
            "image_size" => e.image_size = parse_num(key, value)?,
            "image_channels" => e.image_channels = parse_num(key, value)?,
            "patch_size" => e.patch_size = parse_num(key, value)?,
            "vocab_size" => e.vocab_size = parse_num(key, value)?,
            "max_text_len" => e.max_text_len = parse_num(key, value)?,
            "projection_dim" => e.projection_dim = parse_num(key, value)?,
            "epochs" => self.epochs = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "lr" => self.lr = parse_num(key, value)?,
            "momentum" => self.momentum = parse_num(key, value)?,
            "weight_decay" => self.weight_decay = parse_num(key, value)?,
            "tau" => self.tau = parse_num(key, value)?,
            "tau_logits" => self.tau_logits = parse_num(key, value)?,
            "beta" => self.beta = parse_num(key, value)?,
            "gamma" => self.gamma = parse_num(key, value)?,
            "k" => self.k = parse_num(key, value)?,
            "n_prompts" => self.n_prompts = parse_num(key, value)?,
            "context_len" => self.context_len = parse_num(key, value)?,
            "visual_prompts" => self.visual_prompts = parse_bool(key, value)?,
            "local_alignment" => self.local_alignment = parse_bool(key, value)?,
            "template" => self.template = parse_num(key, value)?,
            "metric" => self.metric = Metric::parse(value)?,
            "subset_size" => {
                self.subset_size = match value {
                    "full" | "all" => None,
                    v => Some(parse_num(key, v)?),
                }
            }
            "flip_prob" => self.flip_prob = parse_num(key, value)?,
            "weight_seed" => self.weight_seed = parse_num(key, value)?,
            "data_seed" => self.data_seed = parse_num(key, value)?,
            "prompt_seed" => self.prompt_seed = parse_num(key, value)?,
            "prototype_seed" => self.prototype_seed = parse_num(key, value)?,
            "seed" => {
                let s: u64 = parse_num(key, value)?;
                self.weight_seed = s;
                self.data_seed = s;
                self.prompt_seed = s;
                self.prototype_seed = s;
            }
            "dataset" => self.dataset = PathBuf::from(value),
            "fixtures" => self.fixtures = PathBuf::from(value),
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Parses config text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (key, value, line) in parse_pairs(text)? {
            self.set(&key, &value)
                .map_err(|e| Error::Config(format!("line {line}: {e}")))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Canonical `key = value` serialization; parsing it reproduces `self`.
    pub fn to_text(&self) -> String {
        let e = &self.encoder;
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("embed_dim", e.embed_dim.to_string());
        put("num_layers", e.num_layers.to_string());
        put("num_heads", e.num_heads.to_string());
        put("mlp_ratio", e.mlp_ratio.to_string());
        put("image_size", e.image_size.to_string());
        put("image_channels", e.image_channels.to_string());
        put("patch_size", e.patch_size.to_string());
        put("vocab_size", e.vocab_size.to_string());
        put("max_text_len", e.max_text_len.to_string());
        put("projection_dim", e.projection_dim.to_string());
        put("epochs", self.epochs.to_string());
        put("batch_size", self.batch_size.to_string());
        put("lr", self.lr.to_string());
        put("momentum", self.momentum.to_string());
        put("weight_decay", self.weight_decay.to_string());
        put("tau", self.tau.to_string());
        put("tau_logits", self.tau_logits.to_string());
        put("beta", self.beta.to_string());
        put("gamma", self.gamma.to_string());
        put("k", self.k.to_string());
        put("n_prompts", self.n_prompts.to_string());
        put("context_len", self.context_len.to_string());
        put("visual_prompts", self.visual_prompts.to_string());
        put("local_alignment", self.local_alignment.to_string());
        put("template", self.template.to_string());
        put("metric", self.metric.as_str().to_string());
        put(
            "subset_size",
            self.subset_size.map_or("full".to_string(), |n| n.to_string()),
        );
        put("flip_prob", self.flip_prob.to_string());
        put("weight_seed", self.weight_seed.to_string());
        put("data_seed", self.data_seed.to_string());
        put("prompt_seed", self.prompt_seed.to_string());
        put("prototype_seed", self.prototype_seed.to_string());
        put("dataset", self.dataset.display().to_string());
        put("fixtures", self.fixtures.display().to_string());
        s
    }
}

/// Splits `key = value` text into trimmed pairs with 1-based line numbers.
/// `#` starts a comment; blank lines are skipped.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String, usize)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string(), i + 1));
    }
    Ok(out)
}
