//! Run configuration: flat `key = value` text with `#` comments.
//!
//! Every key is listed in [`SCHEMA`] with its default and a one-line
//! description. Unknown keys are rejected. [`RunConfig::render`] writes the
//! full merged configuration back out in schema order.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::DType;
use sha2::{Digest, Sha256};

use crate::appearance::{AggregatorKind, BackboneConfig};
use crate::backend::{BackendKind, BackendSpec, StubConfig};
use crate::error::{GazeError, Result};
use crate::semantic::GradeScheme;

pub struct KeySpec {
    pub key: &'static str,
    pub default: &'static str,
    pub description: &'static str,
}

macro_rules! schema {
    ($($key:literal = $default:literal : $desc:literal,)*) => {
        pub const SCHEMA: &[KeySpec] = &[
            $(KeySpec { key: $key, default: $default, description: $desc },)*
        ];
    };
}

schema! {
    "backend" = "stub" : "vision-language encoder pair: stub | pretrained",
    "backend_dir" = "" : "weights directory for the pretrained backend (falls back to DCGAZE_BACKEND_DIR)",
    "backend_seed" = "0" : "seed of the stub encoders",
    "backend_embed_dim" = "64" : "stub embedding dimension D",
    "backend_grid" = "7" : "stub spatial grid side (must divide image_size)",
    "finetune_image_encoder" = "true" : "fine-tune the backend image encoder when it is trainable",
    "image_size" = "224" : "square input resolution",
    "feature_dim" = "32" : "appearance feature channels C",
    "grid_h" = "7" : "feature grid height H",
    "grid_w" = "7" : "feature grid width W",
    "backbone_widths" = "64,128,256,512" : "channels of the stem and each residual stage",
    "backbone_blocks" = "2,2,2,2" : "residual blocks per stage",
    "mode" = "within_domain" : "within_domain (transformer aggregator) | cross_domain (3-layer MLP aggregator)",
    "transformer_layers" = "6" : "encoder layers of the transformer aggregator",
    "attention_heads" = "8" : "heads of the transformer aggregator",
    "ffn_dim" = "128" : "hidden width of the transformer feed-forward blocks",
    "mlp_hidden" = "256" : "hidden width of the cross-domain MLP aggregator",
    "fusion" = "afu" : "prior fusion when use_afu is on: afu | concat | cross_attention | gated | none",
    "attention_temperature" = "auto" : "softmax temperature of the refinement and cross-attention units (auto = sqrt(d))",
    "drop_ratio" = "0.15625" : "fraction of feature channels zeroed by the masked head",
    "mask_seed" = "0" : "seed of the per-sample mask stream",
    "grade_levels" = "5" : "built-in grade scheme: 2 | 3 | 5",
    "grade_file" = "" : "custom grade scheme file (`lo hi name` lines); overrides grade_levels",
    "tau" = "0.07" : "temperature of the alignment loss",
    "alpha" = "0.1" : "weight of the masked-head loss",
    "beta" = "0.1" : "weight of the alignment loss",
    "epochs" = "30" : "training epochs",
    "batch_size" = "16" : "samples per step (at least 2 when use_dctrain is on)",
    "lr" = "1e-4" : "learning rate of the gaze network",
    "image_encoder_lr" = "1e-6" : "learning rate of the fine-tuned backend image encoder",
    "lr_schedule" = "constant" : "constant | cosine (per-epoch decay to zero)",
    "use_dctrain" = "true" : "train with the pair/prompt alignment loss",
    "use_afu" = "true" : "fuse the backend prior into the appearance branch",
    "use_dgr" = "true" : "train with the masked max-pool head",
    "seed" = "0" : "parameter initialization seed",
    "data_seed" = "0" : "shuffling seed",
    "shuffle" = "true" : "reshuffle the training set every epoch (false keeps one fixed batch order)",
    "dtype" = "f32" : "f32 | f64",
    "train_data" = "" : "training dataset directory (labels.txt + images)",
    "val_data" = "" : "validation dataset directory; empty evaluates on the training set",
    "out_dir" = "runs" : "root directory for run outputs",
    "run_name" = "default" : "subdirectory of out_dir for this run",
    "checkpoint_every" = "1" : "save a checkpoint every N epochs (the final epoch is always saved)",
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    WithinDomain,
    CrossDomain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionKind {
    Afu,
    Concat,
    CrossAttention,
    Gated,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrSchedule {
    Constant,
    Cosine,
}

fn enum_err(key: &str, value: &str, allowed: &str) -> GazeError {
    GazeError::config(format!("{key}: unknown value '{value}' (expected {allowed})"))
}

impl FromStr for Mode {
    type Err = GazeError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "within_domain" => Ok(Self::WithinDomain),
            "cross_domain" => Ok(Self::CrossDomain),
            _ => Err(enum_err("mode", s, "within_domain | cross_domain")),
        }
    }
}

impl FromStr for FusionKind {
    type Err = GazeError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "afu" => Ok(Self::Afu),
            "concat" => Ok(Self::Concat),
            "cross_attention" => Ok(Self::CrossAttention),
            "gated" => Ok(Self::Gated),
            "none" => Ok(Self::None),
            _ => Err(enum_err("fusion", s, "afu | concat | cross_attention | gated | none")),
        }
    }
}

impl FromStr for LrSchedule {
    type Err = GazeError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Self::Constant),
            "cosine" => Ok(Self::Cosine),
            _ => Err(enum_err("lr_schedule", s, "constant | cosine")),
        }
    }
}

/// Typed view of a merged configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub backend: BackendKind,
    pub backend_dir: Option<PathBuf>,
    pub backend_seed: u64,
    pub backend_embed_dim: usize,
    pub backend_grid: usize,
    pub finetune_image_encoder: bool,
    pub image_size: usize,
    pub feature_dim: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub backbone_widths: Vec<usize>,
    pub backbone_blocks: Vec<usize>,
    pub mode: Mode,
    pub transformer_layers: usize,
    pub attention_heads: usize,
    pub ffn_dim: usize,
    pub mlp_hidden: usize,
    pub fusion: FusionKind,
    pub attention_temperature: Option<f64>,
    pub drop_ratio: f64,
    pub mask_seed: u64,
    pub grade_levels: usize,
    pub grade_file: Option<PathBuf>,
    pub tau: f64,
    pub alpha: f64,
    pub beta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub image_encoder_lr: f64,
    pub lr_schedule: LrSchedule,
    pub use_dctrain: bool,
    pub use_afu: bool,
    pub use_dgr: bool,
    pub seed: u64,
    pub data_seed: u64,
    pub shuffle: bool,
    pub dtype: DType,
    pub train_data: Option<PathBuf>,
    pub val_data: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub run_name: String,
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = Self::blank();
        for spec in SCHEMA {
            cfg.set(spec.key, spec.default)
                .expect("schema defaults are valid");
        }
        cfg
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse::<T>()
        .map_err(|e| GazeError::config(format!("{key}: cannot parse '{value}': {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "1" | "yes" => Ok(true),
        "false" | "off" | "0" | "no" => Ok(false),
        _ => Err(GazeError::config(format!("{key}: expected true | false, got '{value}'"))),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|v| parse::<usize>(key, v.trim()))
        .collect()
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn join(v: &[usize]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    fn blank() -> Self {
        Self {
            backend: BackendKind::Stub,
            backend_dir: None,
            backend_seed: 0,
            backend_embed_dim: 0,
            backend_grid: 0,
            finetune_image_encoder: false,
            image_size: 0,
            feature_dim: 0,
            grid_h: 0,
            grid_w: 0,
            backbone_widths: Vec::new(),
            backbone_blocks: Vec::new(),
            mode: Mode::WithinDomain,
            transformer_layers: 0,
            attention_heads: 0,
            ffn_dim: 0,
            mlp_hidden: 0,
            fusion: FusionKind::None,
            attention_temperature: None,
            drop_ratio: 0.0,
            mask_seed: 0,
            grade_levels: 0,
            grade_file: None,
            tau: 0.0,
            alpha: 0.0,
            beta: 0.0,
            epochs: 0,
            batch_size: 0,
            lr: 0.0,
            image_encoder_lr: 0.0,
            lr_schedule: LrSchedule::Constant,
            use_dctrain: false,
            use_afu: false,
            use_dgr: false,
            seed: 0,
            data_seed: 0,
            shuffle: false,
            dtype: DType::F32,
            train_data: None,
            val_data: None,
            out_dir: PathBuf::new(),
            run_name: String::new(),
            checkpoint_every: 0,
        }
    }

    /// Assigns one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "backend" => self.backend = v.parse()?,
            "backend_dir" => self.backend_dir = opt_path(v),
            "backend_seed" => self.backend_seed = parse(key, v)?,
            "backend_embed_dim" => self.backend_embed_dim = parse(key, v)?,
            "backend_grid" => self.backend_grid = parse(key, v)?,
            "finetune_image_encoder" => self.finetune_image_encoder = parse_bool(key, v)?,
            "image_size" => self.image_size = parse(key, v)?,
            "feature_dim" => self.feature_dim = parse(key, v)?,
            "grid_h" => self.grid_h = parse(key, v)?,
            "grid_w" => self.grid_w = parse(key, v)?,
            "backbone_widths" => self.backbone_widths = parse_list(key, v)?,
            "backbone_blocks" => self.backbone_blocks = parse_list(key, v)?,
            "mode" => self.mode = v.parse()?,
            "transformer_layers" => self.transformer_layers = parse(key, v)?,
            "attention_heads" => self.attention_heads = parse(key, v)?,
            "ffn_dim" => self.ffn_dim = parse(key, v)?,
            "mlp_hidden" => self.mlp_hidden = parse(key, v)?,
            "fusion" => self.fusion = v.parse()?,
            "attention_temperature" => {
                self.attention_temperature = match v {
                    "auto" => None,
                    _ => Some(parse(key, v)?),
                }
            }
            "drop_ratio" => self.drop_ratio = parse(key, v)?,
            "mask_seed" => self.mask_seed = parse(key, v)?,
            "grade_levels" => self.grade_levels = parse(key, v)?,
            "grade_file" => self.grade_file = opt_path(v),
            "tau" => self.tau = parse(key, v)?,
            "alpha" => self.alpha = parse(key, v)?,
            "beta" => self.beta = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "image_encoder_lr" => self.image_encoder_lr = parse(key, v)?,
            "lr_schedule" => self.lr_schedule = v.parse()?,
            "use_dctrain" => self.use_dctrain = parse_bool(key, v)?,
            "use_afu" => self.use_afu = parse_bool(key, v)?,
            "use_dgr" => self.use_dgr = parse_bool(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "data_seed" => self.data_seed = parse(key, v)?,
            "shuffle" => self.shuffle = parse_bool(key, v)?,
            "dtype" => {
                self.dtype = match v {
                    "f32" => DType::F32,
                    "f64" => DType::F64,
                    _ => return Err(enum_err(key, v, "f32 | f64")),
                }
            }
            "train_data" => self.train_data = opt_path(v),
            "val_data" => self.val_data = opt_path(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "run_name" => self.run_name = v.to_string(),
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            _ => return Err(GazeError::config(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// Text form of one key, as it would appear in a config file.
    pub fn get(&self, key: &str) -> Result<String> {
        Ok(match key {
            "backend" => match self.backend {
                BackendKind::Stub => "stub".into(),
                BackendKind::Pretrained => "pretrained".into(),
            },
            "backend_dir" => show_path(&self.backend_dir),
            "backend_seed" => self.backend_seed.to_string(),
            "backend_embed_dim" => self.backend_embed_dim.to_string(),
            "backend_grid" => self.backend_grid.to_string(),
            "finetune_image_encoder" => self.finetune_image_encoder.to_string(),
            "image_size" => self.image_size.to_string(),
            "feature_dim" => self.feature_dim.to_string(),
            "grid_h" => self.grid_h.to_string(),
            "grid_w" => self.grid_w.to_string(),
            "backbone_widths" => join(&self.backbone_widths),
            "backbone_blocks" => join(&self.backbone_blocks),
            "mode" => match self.mode {
                Mode::WithinDomain => "within_domain".into(),
                Mode::CrossDomain => "cross_domain".into(),
            },
            "transformer_layers" => self.transformer_layers.to_string(),
            "attention_heads" => self.attention_heads.to_string(),
            "ffn_dim" => self.ffn_dim.to_string(),
            "mlp_hidden" => self.mlp_hidden.to_string(),
            "fusion" => match self.fusion {
                FusionKind::Afu => "afu",
                FusionKind::Concat => "concat",
                FusionKind::CrossAttention => "cross_attention",
                FusionKind::Gated => "gated",
                FusionKind::None => "none",
            }
            .into(),
            "attention_temperature" => self
                .attention_temperature
                .map(|t| t.to_string())
                .unwrap_or_else(|| "auto".into()),
            "drop_ratio" => self.drop_ratio.to_string(),
            "mask_seed" => self.mask_seed.to_string(),
            "grade_levels" => self.grade_levels.to_string(),
            "grade_file" => show_path(&self.grade_file),
            "tau" => self.tau.to_string(),
            "alpha" => self.alpha.to_string(),
            "beta" => self.beta.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "lr" => format!("{:e}", self.lr),
            "image_encoder_lr" => format!("{:e}", self.image_encoder_lr),
            "lr_schedule" => match self.lr_schedule {
                LrSchedule::Constant => "constant".into(),
                LrSchedule::Cosine => "cosine".into(),
            },
            "use_dctrain" => self.use_dctrain.to_string(),
            "use_afu" => self.use_afu.to_string(),
            "use_dgr" => self.use_dgr.to_string(),
            "seed" => self.seed.to_string(),
            "data_seed" => self.data_seed.to_string(),
            "shuffle" => self.shuffle.to_string(),
            "dtype" => match self.dtype {
                DType::F64 => "f64".into(),
                _ => "f32".into(),
            },
            "train_data" => show_path(&self.train_data),
            "val_data" => show_path(&self.val_data),
            "out_dir" => self.out_dir.display().to_string(),
            "run_name" => self.run_name.clone(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            _ => return Err(GazeError::config(format!("unknown config key '{key}'"))),
        })
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, path: &Path) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| GazeError::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                reason: format!("expected `key = value`, got {line:?}"),
            })?;
            self.set(key.trim(), value).map_err(|e| match e {
                GazeError::Config(msg) => GazeError::config(format!("{}:{}: {msg}", path.display(), n + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text, Path::new("<config>"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Defaults, then the file, then `key=value` overrides, then validation.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GazeError::config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text, path)?;
        cfg.apply_overrides(overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| GazeError::config(format!("override must be key=value, got '{o}'")))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Every key in schema order as `key = value` lines.
    pub fn render(&self) -> String {
        SCHEMA
            .iter()
            .map(|s| format!("{} = {}\n", s.key, self.get(s.key).expect("schema key")))
            .collect()
    }

    pub fn entries(&self) -> Vec<(String, String)> {
        SCHEMA
            .iter()
            .map(|s| (s.key.to_string(), self.get(s.key).expect("schema key")))
            .collect()
    }

    /// Hex SHA-256 of the rendered configuration.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.render().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(GazeError::config(m));
        if self.alpha < 0.0 || self.beta < 0.0 || !self.alpha.is_finite() || !self.beta.is_finite() {
            return bad(format!("alpha and beta must be non-negative, got {} and {}", self.alpha, self.beta));
        }
        if self.use_dctrain && self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2 with use_dctrain, got {}", self.batch_size));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.feature_dim == 0 || self.grid_h == 0 || self.grid_w == 0 {
            return bad("feature_dim, grid_h and grid_w must be positive".into());
        }
        if self.use_dgr && self.feature_dim % 2 != 0 {
            return bad(format!("feature_dim must be even for the masked head, got {}", self.feature_dim));
        }
        if !(0.0..=1.0).contains(&self.drop_ratio) {
            return bad(format!("drop_ratio must lie in [0, 1], got {}", self.drop_ratio));
        }
        if !(self.tau > 0.0) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if let Some(t) = self.attention_temperature {
            if !(t > 0.0) {
                return bad(format!("attention_temperature must be positive, got {t}"));
            }
        }
        if self.mode == Mode::WithinDomain
            && (self.attention_heads == 0 || self.feature_dim % self.attention_heads != 0)
        {
            return bad(format!(
                "feature_dim {} is not divisible by attention_heads {}",
                self.feature_dim, self.attention_heads
            ));
        }
        if self.lr < 0.0 || self.image_encoder_lr < 0.0 {
            return bad("learning rates must be non-negative".into());
        }
        if self.backend_grid == 0 || self.image_size % self.backend_grid != 0 {
            if self.backend == BackendKind::Stub {
                return bad(format!(
                    "backend_grid {} must divide image_size {}",
                    self.backend_grid, self.image_size
                ));
            }
        }
        if self.grade_file.is_none() && ![2, 3, 5].contains(&self.grade_levels) {
            return bad(format!("grade_levels must be 2, 3 or 5, got {}", self.grade_levels));
        }
        if self.backbone_widths.is_empty() || self.backbone_widths.len() != self.backbone_blocks.len() {
            return bad("backbone_widths and backbone_blocks must be non-empty and equally long".into());
        }
        if self.backbone_config().native_side() == 0 {
            return bad(format!(
                "image_size {} is too small for {} backbone stages",
                self.image_size,
                self.backbone_widths.len()
            ));
        }
        if self.run_name.is_empty() || self.run_name.contains(['/', '\\']) {
            return bad(format!("run_name must be a plain directory name, got '{}'", self.run_name));
        }
        Ok(())
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        BackboneConfig {
            image_size: self.image_size,
            widths: self.backbone_widths.clone(),
            blocks: self.backbone_blocks.clone(),
            feature_dim: self.feature_dim,
            grid: (self.grid_h, self.grid_w),
        }
    }

    pub fn aggregator_kind(&self) -> AggregatorKind {
        match self.mode {
            Mode::WithinDomain => AggregatorKind::Transformer {
                layers: self.transformer_layers,
                heads: self.attention_heads,
                ffn_dim: self.ffn_dim,
            },
            Mode::CrossDomain => AggregatorKind::Mlp {
                hidden: self.mlp_hidden,
            },
        }
    }

    /// Fusion actually built: `none` whenever `use_afu` is off.
    pub fn effective_fusion(&self) -> FusionKind {
        if self.use_afu {
            self.fusion
        } else {
            FusionKind::None
        }
    }

    pub fn backend_spec(&self) -> BackendSpec {
        BackendSpec {
            kind: self.backend,
            dir: self.backend_dir.clone(),
            stub: StubConfig {
                seed: self.backend_seed,
                embed_dim: self.backend_embed_dim,
                image_size: self.image_size,
                grid: (self.backend_grid, self.backend_grid),
                trainable_image_encoder: self.finetune_image_encoder,
                dtype: self.dtype,
            },
            dtype: self.dtype,
        }
    }

    pub fn grade_scheme(&self) -> Result<GradeScheme> {
        match &self.grade_file {
            Some(p) => GradeScheme::from_file(p),
            None => GradeScheme::builtin(self.grade_levels),
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(&self.run_name)
    }
}

/// The schema as an aligned help table.
pub fn schema_help() -> String {
    let width = SCHEMA.iter().map(|s| s.key.len()).max().unwrap_or(0);
    let mut out = String::from("Config keys (key = default: description):\n");
    for s in SCHEMA {
        let default = if s.default.is_empty() { "\"\"" } else { s.default };
        out.push_str(&format!("  {:width$} = {default}: {}\n", s.key, s.description));
    }
    out
}
