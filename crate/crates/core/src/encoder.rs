//! Toy five-stage backbone with an atrous context block on the deepest stage.
//!
//! Stage strides are 4, 4, 8, min(16, OS), OS. Stages that would exceed the
//! output stride keep their resolution and double their dilation instead.

use crate::autograd::Var;
use crate::config::EncoderConfig;
use crate::error::{Error, Result};
use crate::nn::{Builder, Conv2d, ConvNormAct, Ctx, Norm};
use crate::tensor::{ConvGeom, Real};

/// Encoder pyramid `F_1 … F_5` (index 0 holds `F_1`).
#[derive(Clone)]
pub struct MultiScaleFeatures<'t, T: Real> {
    pub features: [Var<'t, T>; 5],
    pub strides: [usize; 5],
    pub channels: [usize; 5],
}

impl<'t, T: Real> MultiScaleFeatures<'t, T> {
    /// Feature of stage `i` in `1..=5`.
    pub fn stage(&self, i: usize) -> Var<'t, T> {
        self.features[i - 1]
    }
}

struct ResBlock {
    conv1: ConvNormAct,
    conv2: Conv2d,
    norm2: Norm,
    shortcut: Option<(Conv2d, Norm)>,
}

impl ResBlock {
    fn new<T: Real>(
        b: &mut Builder<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        dilation: usize,
        cfg: &EncoderConfig,
    ) -> Self {
        let g1 = ConvGeom {
            kernel: 3,
            stride,
            padding: dilation,
            dilation,
        };
        let shortcut = (cin != cout || stride != 1).then(|| {
            let g = ConvGeom {
                kernel: 1,
                stride,
                padding: 0,
                dilation: 1,
            };
            (
                b.conv(&format!("{name}.down.conv"), cin, cout, g, false),
                b.norm(&format!("{name}.down.norm"), cout, cfg.norm),
            )
        });
        Self {
            conv1: b.conv_norm_act(&format!("{name}.conv1"), cin, cout, g1, cfg.norm),
            conv2: b.conv(&format!("{name}.conv2"), cout, cout, ConvGeom::same(3, dilation), false),
            norm2: b.norm(&format!("{name}.norm2"), cout, cfg.norm),
            shortcut,
        }
    }

    fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        let h = self.conv1.forward(ctx, x);
        let h = self.norm2.forward(ctx, self.conv2.forward(ctx, h));
        let skip = match &self.shortcut {
            Some((conv, norm)) => norm.forward(ctx, conv.forward(ctx, x)),
            None => x,
        };
        h.add(skip).relu()
    }
}

/// Four parallel dilated 3×3 convs plus a global-pool branch, fused by 1×1.
struct ContextBlock {
    branches: Vec<ConvNormAct>,
    pool: Conv2d,
    fuse: ConvNormAct,
}

pub const CONTEXT_DILATIONS: [usize; 4] = [1, 2, 4, 8];

impl ContextBlock {
    fn new<T: Real>(b: &mut Builder<'_, T>, name: &str, c: usize, cfg: &EncoderConfig) -> Self {
        let branches = CONTEXT_DILATIONS
            .iter()
            .map(|&d| b.conv_norm_act(&format!("{name}.d{d}"), c, c, ConvGeom::same(3, d), cfg.norm))
            .collect();
        Self {
            branches,
            pool: b.conv(&format!("{name}.pool"), c, c, ConvGeom::same(1, 1), true),
            fuse: b.conv_norm_act(&format!("{name}.fuse"), 5 * c, c, ConvGeom::same(1, 1), cfg.norm),
        }
    }

    fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        let shape = x.shape();
        let (h, w) = (shape[2], shape[3]);
        let mut parts: Vec<_> = self.branches.iter().map(|br| br.forward(ctx, x)).collect();
        let pooled = self.pool.forward(ctx, x.global_avg_pool()).relu();
        parts.push(pooled.broadcast_spatial(h, w));
        self.fuse.forward(ctx, Var::concat_channels(&parts))
    }
}

pub struct Encoder {
    cfg: EncoderConfig,
    stem1: ConvNormAct,
    stem2: ConvNormAct,
    blocks: Vec<ResBlock>,
    context: Option<ContextBlock>,
    strides: [usize; 5],
}

impl Encoder {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, cfg: &EncoderConfig) -> Self {
        let w = cfg.widths;
        let s2 = ConvGeom {
            kernel: 3,
            stride: 2,
            padding: 1,
            dilation: 1,
        };
        let stem1 = b.conv_norm_act("encoder.stem1", 3, w[0], s2, cfg.norm);
        let stem2 = b.conv_norm_act("encoder.stem2", w[0], w[0], s2, cfg.norm);
        // nominal strides relative to the previous stage: F2 keeps F1's resolution
        let nominal = [1usize, 2, 2, 2];
        let mut stride = 4;
        let mut dilation = 1;
        let mut strides = [4; 5];
        let mut blocks = Vec::new();
        for (i, &rel) in nominal.iter().enumerate() {
            let (s, d) = if rel == 2 && stride * 2 > cfg.output_stride {
                dilation *= 2;
                (1, dilation)
            } else {
                (rel, dilation)
            };
            stride *= s;
            strides[i + 1] = stride;
            blocks.push(ResBlock::new(b, &format!("encoder.stage{}", i + 2), w[i], w[i + 1], s, d, cfg));
        }
        let context = cfg
            .context_block
            .then(|| ContextBlock::new(b, "encoder.context", w[4], cfg));
        Self {
            cfg: cfg.clone(),
            stem1,
            stem2,
            blocks,
            context,
            strides,
        }
    }

    pub fn strides(&self) -> [usize; 5] {
        self.strides
    }

    pub fn channels(&self) -> [usize; 5] {
        self.cfg.widths
    }

    /// Runs the backbone on a `(B, 3, H, W)` image batch.
    pub fn encode<'t, T: Real>(&self, ctx: &Ctx<'t, T>, image: Var<'t, T>) -> Result<MultiScaleFeatures<'t, T>> {
        let shape = image.shape();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::Shape(format!("encoder expects (B, 3, H, W), got {shape:?}")));
        }
        for (axis, v) in [("height", shape[2]), ("width", shape[3])] {
            if v == 0 || v % 32 != 0 {
                return Err(Error::Shape(format!("input {axis} {v} is not divisible by 32")));
            }
        }
        let f1 = self.stem2.forward(ctx, self.stem1.forward(ctx, image));
        let mut feats = vec![f1];
        for block in &self.blocks {
            let prev = *feats.last().unwrap();
            feats.push(block.forward(ctx, prev));
        }
        if let Some(context) = &self.context {
            let f5 = feats[4];
            feats[4] = context.forward(ctx, f5);
        }
        Ok(MultiScaleFeatures {
            features: [feats[0], feats[1], feats[2], feats[3], feats[4]],
            strides: self.strides,
            channels: self.cfg.widths,
        })
    }
}

/// Bilinear resample (align-corners disabled) to `target = (h, w)`.
pub fn resize_to_stage1<'t, T: Real>(f: Var<'t, T>, target: (usize, usize)) -> Var<'t, T> {
    f.resize_bilinear(target.0, target.1)
}
