//! Flat `key = value` configuration shared by every subcommand.
//!
//! Every key is documented in `docs/config.md`. Lines starting with `#` are
//! comments; later assignments of the same key win.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{GenConfig, SplitFractions};
use crate::error::{Error, Result};
use crate::nn::NormKind;
use crate::synthdata::ShapeFamily;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    NoSme,
    NoSar,
    NoCascade,
    /// Boundary-branch enhancement replaced by identity, attention detached.
    OnewayS2b,
    /// Semantic-branch enhancement replaced by identity, attention detached.
    OnewayB2s,
    /// Two-stream network: no SME, no SAR, no cascade.
    Baseline,
}

impl Ablation {
    pub const ALL: [Ablation; 7] = [
        Ablation::Full,
        Ablation::NoSme,
        Ablation::NoSar,
        Ablation::NoCascade,
        Ablation::OnewayS2b,
        Ablation::OnewayB2s,
        Ablation::Baseline,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoSme => "no_sme",
            Ablation::NoSar => "no_sar",
            Ablation::NoCascade => "no_cascade",
            Ablation::OnewayS2b => "oneway_s2b",
            Ablation::OnewayB2s => "oneway_b2s",
            Ablation::Baseline => "baseline",
        }
    }

    pub fn uses_sme(&self) -> bool {
        !matches!(self, Ablation::NoSme | Ablation::Baseline)
    }

    pub fn uses_sar(&self) -> bool {
        !matches!(self, Ablation::NoSar | Ablation::Baseline)
    }

    pub fn uses_cascade(&self) -> bool {
        !matches!(self, Ablation::NoCascade | Ablation::Baseline)
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown ablation {s:?}; valid: {}",
                    Ablation::ALL.map(|a| a.as_str()).join(", ")
                ))
            })
    }
}

/// Which semantic feature of stage i+1 feeds stage i.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CascadeFeed {
    /// The refined (post-SAR) feature.
    Sar,
    /// The co-evolved (post-SME, pre-SAR) feature.
    Sme,
}

/// A point count that is either fixed or derived from the stage resolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PointCount {
    Auto,
    Fixed(usize),
}

impl PointCount {
    fn parse(v: &str) -> Result<Self> {
        if v == "auto" {
            Ok(PointCount::Auto)
        } else {
            parse_num(v).map(PointCount::Fixed)
        }
    }

    fn render(&self) -> String {
        match self {
            PointCount::Auto => "auto".into(),
            PointCount::Fixed(n) => n.to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub output_stride: usize,
    /// Channel counts of F_1 … F_5.
    pub widths: [usize; 5],
    pub context_block: bool,
    pub norm: NormKind,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            output_stride: 16,
            widths: [8, 16, 16, 24, 32],
            context_block: true,
            norm: NormKind::Group,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.output_stride != 8 && self.output_stride != 16 {
            return Err(Error::Config(format!(
                "output_stride must be 8 or 16, got {}",
                self.output_stride
            )));
        }
        if self.widths.iter().any(|&w| w < 4) {
            return Err(Error::Config("encoder widths must all be at least 4".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmeConfig {
    pub fuse_kernel: usize,
    pub branch_kernels: (usize, usize),
    /// Number of 3×3 convs in the attention head before the 1×1 output conv.
    pub head_depth: usize,
    pub width: usize,
    /// Mutual blocks stacked per stage.
    pub blocks: usize,
}

impl Default for SmeConfig {
    fn default() -> Self {
        Self {
            fuse_kernel: 3,
            branch_kernels: (5, 9),
            head_depth: 2,
            width: 16,
            blocks: 1,
        }
    }
}

impl SmeConfig {
    pub fn validate(&self) -> Result<()> {
        let (a, b) = self.branch_kernels;
        if a % 2 == 0 || b % 2 == 0 || self.fuse_kernel % 2 == 0 {
            return Err(Error::Config("SME kernels must be odd".into()));
        }
        if self.width < 4 || self.blocks == 0 {
            return Err(Error::Config("SME width must be >= 4 and blocks >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SarConfig {
    pub k: PointCount,
    pub m: PointCount,
    pub heads: usize,
    /// Per-head key dimension; `None` means `width / heads`.
    pub d_k: Option<usize>,
}

impl Default for SarConfig {
    fn default() -> Self {
        Self {
            k: PointCount::Auto,
            m: PointCount::Auto,
            heads: 4,
            d_k: None,
        }
    }
}

impl SarConfig {
    /// `K` at a stage with `hw` pixels: `ceil(hw / 16)` when automatic.
    pub fn k_for(&self, hw: usize) -> usize {
        match self.k {
            PointCount::Auto => hw.div_ceil(16),
            PointCount::Fixed(k) => k,
        }
    }

    /// `M` at a stage with `hw` pixels: `min(64, hw)` when automatic.
    pub fn m_for(&self, hw: usize) -> usize {
        match self.m {
            PointCount::Auto => hw.min(64),
            PointCount::Fixed(m) => m,
        }
    }

    pub fn head_dim(&self, width: usize) -> usize {
        self.d_k.unwrap_or(width / self.heads.max(1))
    }

    pub fn validate(&self, width: usize) -> Result<()> {
        if self.heads == 0 || self.head_dim(width) == 0 {
            return Err(Error::Config("SAR needs at least one head of nonzero dimension".into()));
        }
        if self.heads * self.head_dim(width) > width {
            return Err(Error::Config(format!(
                "SAR heads·d_k = {} exceeds feature width {width}",
                self.heads * self.head_dim(width)
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_classes: usize,
    pub encoder: EncoderConfig,
    pub sme: SmeConfig,
    pub sar: SarConfig,
    pub ablation: Ablation,
    pub cascade_feed: CascadeFeed,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_classes: 3,
            encoder: EncoderConfig::default(),
            sme: SmeConfig::default(),
            sar: SarConfig::default(),
            ablation: Ablation::Full,
            cascade_feed: CascadeFeed::Sar,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::Config("n_classes must be at least 2".into()));
        }
        self.encoder.validate()?;
        self.sme.validate()?;
        self.sar.validate(self.sme.width)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_s: f64,
    pub lambda_b: f64,
    pub dice_smooth: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_s: 0.01,
            lambda_b: 0.25,
            dice_smooth: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub power: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub grad_clip: f64,
    /// Stop after this many iterations (0 = run all epochs).
    pub max_iters: usize,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.04,
            power: 0.9,
            weight_decay: 1e-4,
            momentum: 0.9,
            epochs: 60,
            batch_size: 4,
            seed: 0,
            grad_clip: 10.0,
            max_iters: 0,
            checkpoint_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) || !(self.power > 0.0) || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "train needs base_lr > 0, power > 0, epochs >= 1, batch_size >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub beta2: f64,
    pub per_image: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            beta2: 0.3,
            per_image: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub data: GenConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for Config {
    fn default() -> Self {
        let data = GenConfig::default();
        let model = ModelConfig {
            n_classes: data.n_classes,
            ..Default::default()
        };
        Self {
            data,
            model,
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Every recognized key, in documentation order.
pub const KEYS: &[&str] = &[
    "data.n",
    "data.seed",
    "data.canvas",
    "data.min_objects",
    "data.max_objects",
    "data.shapes",
    "data.alpha",
    "data.streaks",
    "data.n_classes",
    "data.thickness",
    "data.train_frac",
    "data.val_frac",
    "model.output_stride",
    "model.widths",
    "model.context_block",
    "model.norm",
    "model.sme_width",
    "model.sme_blocks",
    "model.sme_head_depth",
    "model.sme_fuse_kernel",
    "model.sme_branch_kernels",
    "model.sar_k",
    "model.sar_m",
    "model.sar_heads",
    "model.sar_dk",
    "model.cascade_feed",
    "model.init_seed",
    "loss.lambda_s",
    "loss.lambda_b",
    "loss.dice_smooth",
    "train.base_lr",
    "train.power",
    "train.weight_decay",
    "train.momentum",
    "train.epochs",
    "train.batch_size",
    "train.seed",
    "train.ablation",
    "train.grad_clip",
    "train.max_iters",
    "train.checkpoint_every",
    "eval.beta2",
    "eval.per_image",
];

fn parse_num<N: std::str::FromStr>(v: &str) -> Result<N> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse {v:?} as a number")))
}

fn parse_bool(v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(Error::Config(format!("cannot parse {other:?} as a boolean"))),
    }
}

fn parse_list(v: &str) -> Result<Vec<usize>> {
    v.split(',').map(parse_num).collect()
}

fn parse_canvas(v: &str) -> Result<(usize, usize)> {
    let (h, w) = v
        .split_once('x')
        .ok_or_else(|| Error::Config(format!("canvas {v:?} must look like HxW")))?;
    Ok((parse_num(h)?, parse_num(w)?))
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl Config {
    /// Parses `key = value` text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value, got {raw:?}", lineno + 1))
            })?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies `key=value` overrides in order (last wins).
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} must be key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "data.n" => self.data.n = parse_num(v)?,
            "data.seed" => self.data.seed = parse_num(v)?,
            "data.canvas" => self.data.canvas = parse_canvas(v)?,
            "data.min_objects" => self.data.min_objects = parse_num(v)?,
            "data.max_objects" => self.data.max_objects = parse_num(v)?,
            "data.shapes" => {
                self.data.shape_families = v
                    .split(',')
                    .map(|s| s.trim().parse::<ShapeFamily>())
                    .collect::<Result<_>>()?
            }
            "data.alpha" => self.data.transparency_alpha = parse_num(v)?,
            "data.streaks" => self.data.reflective_streaks = parse_num(v)?,
            "data.n_classes" => {
                self.data.n_classes = parse_num(v)?;
                self.model.n_classes = self.data.n_classes;
            }
            "data.thickness" => self.data.boundary_thickness = parse_num(v)?,
            "data.train_frac" => self.data.split.train = parse_num(v)?,
            "data.val_frac" => self.data.split.val = parse_num(v)?,
            "model.output_stride" => self.model.encoder.output_stride = parse_num(v)?,
            "model.widths" => {
                let w = parse_list(v)?;
                self.model.encoder.widths = w.try_into().map_err(|_| {
                    Error::Config("model.widths needs exactly five comma-separated values".into())
                })?;
            }
            "model.context_block" => self.model.encoder.context_block = parse_bool(v)?,
            "model.norm" => {
                self.model.encoder.norm = match v {
                    "group" => NormKind::Group,
                    "batch" => NormKind::Batch,
                    other => return Err(Error::Config(format!("unknown norm {other:?}"))),
                }
            }
            "model.sme_width" => self.model.sme.width = parse_num(v)?,
            "model.sme_blocks" => self.model.sme.blocks = parse_num(v)?,
            "model.sme_head_depth" => self.model.sme.head_depth = parse_num(v)?,
            "model.sme_fuse_kernel" => self.model.sme.fuse_kernel = parse_num(v)?,
            "model.sme_branch_kernels" => {
                let k = parse_list(v)?;
                if k.len() != 2 {
                    return Err(Error::Config("model.sme_branch_kernels needs two values".into()));
                }
                self.model.sme.branch_kernels = (k[0], k[1]);
            }
            "model.sar_k" => self.model.sar.k = PointCount::parse(v)?,
            "model.sar_m" => self.model.sar.m = PointCount::parse(v)?,
            "model.sar_heads" => self.model.sar.heads = parse_num(v)?,
            "model.sar_dk" => {
                self.model.sar.d_k = if v == "auto" { None } else { Some(parse_num(v)?) }
            }
            "model.cascade_feed" => {
                self.model.cascade_feed = match v {
                    "sar" => CascadeFeed::Sar,
                    "sme" => CascadeFeed::Sme,
                    other => return Err(Error::Config(format!("unknown cascade_feed {other:?}"))),
                }
            }
            "model.init_seed" => self.model.init_seed = parse_num(v)?,
            "loss.lambda_s" => self.loss.lambda_s = parse_num(v)?,
            "loss.lambda_b" => self.loss.lambda_b = parse_num(v)?,
            "loss.dice_smooth" => self.loss.dice_smooth = parse_num(v)?,
            "train.base_lr" => self.train.base_lr = parse_num(v)?,
            "train.power" => self.train.power = parse_num(v)?,
            "train.weight_decay" => self.train.weight_decay = parse_num(v)?,
            "train.momentum" => self.train.momentum = parse_num(v)?,
            "train.epochs" => self.train.epochs = parse_num(v)?,
            "train.batch_size" => self.train.batch_size = parse_num(v)?,
            "train.seed" => self.train.seed = parse_num(v)?,
            "train.ablation" => self.model.ablation = v.parse()?,
            "train.grad_clip" => self.train.grad_clip = parse_num(v)?,
            "train.max_iters" => self.train.max_iters = parse_num(v)?,
            "train.checkpoint_every" => self.train.checkpoint_every = parse_num(v)?,
            "eval.beta2" => self.eval.beta2 = parse_num(v)?,
            "eval.per_image" => self.eval.per_image = parse_bool(v)?,
            other => {
                return Err(Error::Config(format!(
                    "unknown key {other:?}; valid keys: {}",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Every key with its current value, in [`KEYS`] order.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let d = &self.data;
        let m = &self.model;
        let t = &self.train;
        let norm = match m.encoder.norm {
            NormKind::Group => "group",
            NormKind::Batch => "batch",
        };
        let shapes = d
            .shape_families
            .iter()
            .map(|s| match s {
                ShapeFamily::Rect => "rect",
                ShapeFamily::Ellipse => "ellipse",
                ShapeFamily::Polygon => "polygon",
            })
            .collect::<Vec<_>>()
            .join(",");
        let values: Vec<String> = vec![
            d.n.to_string(),
            d.seed.to_string(),
            format!("{}x{}", d.canvas.0, d.canvas.1),
            d.min_objects.to_string(),
            d.max_objects.to_string(),
            shapes,
            d.transparency_alpha.to_string(),
            d.reflective_streaks.to_string(),
            d.n_classes.to_string(),
            d.boundary_thickness.to_string(),
            d.split.train.to_string(),
            d.split.val.to_string(),
            m.encoder.output_stride.to_string(),
            join(&m.encoder.widths),
            m.encoder.context_block.to_string(),
            norm.to_string(),
            m.sme.width.to_string(),
            m.sme.blocks.to_string(),
            m.sme.head_depth.to_string(),
            m.sme.fuse_kernel.to_string(),
            join(&[m.sme.branch_kernels.0, m.sme.branch_kernels.1]),
            m.sar.k.render(),
            m.sar.m.render(),
            m.sar.heads.to_string(),
            m.sar.d_k.map_or("auto".into(), |d| d.to_string()),
            match m.cascade_feed {
                CascadeFeed::Sar => "sar".into(),
                CascadeFeed::Sme => "sme".into(),
            },
            m.init_seed.to_string(),
            self.loss.lambda_s.to_string(),
            self.loss.lambda_b.to_string(),
            self.loss.dice_smooth.to_string(),
            t.base_lr.to_string(),
            t.power.to_string(),
            t.weight_decay.to_string(),
            t.momentum.to_string(),
            t.epochs.to_string(),
            t.batch_size.to_string(),
            t.seed.to_string(),
            m.ablation.as_str().to_string(),
            t.grad_clip.to_string(),
            t.max_iters.to_string(),
            t.checkpoint_every.to_string(),
            self.eval.beta2.to_string(),
            self.eval.per_image.to_string(),
        ];
        KEYS.iter().map(|k| k.to_string()).zip(values).collect()
    }

    /// The config rendered in its own file format.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_pairs() {
            writeln!(s, "{k} = {v}").unwrap();
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        crate::synthdata::validate_canvas(self.data.canvas)?;
        if !(0.0..=1.0).contains(&self.data.transparency_alpha) {
            return Err(Error::Config("data.alpha must lie in [0, 1]".into()));
        }
        if self.data.split.train < 0.0 || self.data.split.val < 0.0 || self.data.split.train + self.data.split.val > 1.0 {
            return Err(Error::Config("split fractions must be non-negative and sum to at most 1".into()));
        }
        if self.loss.lambda_s < 0.0 || self.loss.lambda_b < 0.0 || !(self.loss.dice_smooth > 0.0) {
            return Err(Error::Config("loss weights must be >= 0 and dice_smooth > 0".into()));
        }
        self.model.validate()?;
        self.train.validate()
    }

    pub fn split_fractions(&self) -> SplitFractions {
        self.data.split
    }
}
