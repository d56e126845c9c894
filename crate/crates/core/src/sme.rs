//! Selective mutual evolution.
//!
//! A two-channel sigmoid attention map is aggregated from the joint
//! semantic/boundary features; each branch is then enhanced residually by its
//! own channel: `F^u = conv(F_in^u ⊙ a^u) + F_in^u`.

use crate::autograd::Var;
use crate::config::SmeConfig;
use crate::error::{Error, Result};
use crate::nn::{Builder, Conv2d, ConvNormAct, Ctx, NormKind};
use crate::tensor::{ConvGeom, Real};

/// `a_s`, `a_b`, each `(B, 1, h, w)` with values in `[0, 1]`.
#[derive(Clone, Copy)]
pub struct MutualAttention<'t, T: Real> {
    pub a_s: Var<'t, T>,
    pub a_b: Var<'t, T>,
}

/// How a branch is treated by the mutual block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BranchMode {
    Enhance,
    /// The enhancement is replaced by an identity connection.
    Identity,
}

pub struct AttentionAggregator {
    fuse: ConvNormAct,
    branch_small: ConvNormAct,
    branch_large: ConvNormAct,
    head: Vec<ConvNormAct>,
    out: Conv2d,
}

impl AttentionAggregator {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, name: &str, cfg: &SmeConfig, norm: NormKind) -> Self {
        let w = cfg.width;
        let (k1, k2) = cfg.branch_kernels;
        let fuse = b.conv_norm_act(&format!("{name}.fuse"), 2 * w, w, ConvGeom::same(cfg.fuse_kernel, 1), norm);
        let branch_small = b.conv_norm_act(&format!("{name}.branch{k1}"), w, w, ConvGeom::same(k1, 1), norm);
        let branch_large = b.conv_norm_act(&format!("{name}.branch{k2}"), w, w, ConvGeom::same(k2, 1), norm);
        let head = (0..cfg.head_depth)
            .map(|i| {
                let cin = if i == 0 { 2 * w } else { w };
                b.conv_norm_act(&format!("{name}.head{i}"), cin, w, ConvGeom::same(3, 1), norm)
            })
            .collect::<Vec<_>>();
        let cin = if cfg.head_depth == 0 { 2 * w } else { w };
        let out = b.conv(&format!("{name}.out"), cin, 2, ConvGeom::same(1, 1), true);
        Self {
            fuse,
            branch_small,
            branch_large,
            head,
            out,
        }
    }

    /// `σ(Aggregate([f_s; f_b]))`, split into its two channels.
    pub fn forward<'t, T: Real>(
        &self,
        ctx: &Ctx<'t, T>,
        f_s: Var<'t, T>,
        f_b: Var<'t, T>,
    ) -> Result<MutualAttention<'t, T>> {
        let (ss, sb) = (f_s.shape(), f_b.shape());
        if ss[0] != sb[0] || ss[2..] != sb[2..] {
            return Err(Error::Shape(format!(
                "semantic {ss:?} and boundary {sb:?} features differ in batch or spatial size"
            )));
        }
        let x = self.fuse.forward(ctx, Var::concat_channels(&[f_s, f_b]));
        let small = self.branch_small.forward(ctx, x);
        let large = self.branch_large.forward(ctx, x);
        let mut h = Var::concat_channels(&[small, large]);
        for layer in &self.head {
            h = layer.forward(ctx, h);
        }
        let a = self.out.forward(ctx, h).sigmoid();
        Ok(MutualAttention {
            a_s: a.slice_channels(0, 1),
            a_b: a.slice_channels(1, 1),
        })
    }
}

/// `conv(f_in ⊙ a) + f_in` with a bias-free 3×3 conv.
pub struct ResidualEnhance {
    pub conv: Conv2d,
}

impl ResidualEnhance {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, name: &str, width: usize) -> Self {
        Self {
            conv: b.conv(name, width, width, ConvGeom::same(3, 1), false),
        }
    }

    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, T>, f_in: Var<'t, T>, a: Var<'t, T>) -> Var<'t, T> {
        self.conv.forward(ctx, f_in.mul_gate(a)).add(f_in)
    }
}

pub struct MutualBlock {
    pub aggregate: AttentionAggregator,
    pub enhance_s: Option<ResidualEnhance>,
    pub enhance_b: Option<ResidualEnhance>,
    /// Stop gradients flowing back through the attention map.
    pub detach_attention: bool,
}

impl MutualBlock {
    pub fn new<T: Real>(
        b: &mut Builder<'_, T>,
        name: &str,
        cfg: &SmeConfig,
        norm: NormKind,
        modes: (BranchMode, BranchMode),
    ) -> Self {
        let aggregate = AttentionAggregator::new(b, &format!("{name}.attn"), cfg, norm);
        let enhance_s = (modes.0 == BranchMode::Enhance)
            .then(|| ResidualEnhance::new(b, &format!("{name}.enhance_s"), cfg.width));
        let enhance_b = (modes.1 == BranchMode::Enhance)
            .then(|| ResidualEnhance::new(b, &format!("{name}.enhance_b"), cfg.width));
        let detach_attention = modes != (BranchMode::Enhance, BranchMode::Enhance);
        Self {
            aggregate,
            enhance_s,
            enhance_b,
            detach_attention,
        }
    }

    pub fn forward<'t, T: Real>(
        &self,
        ctx: &Ctx<'t, T>,
        f_s: Var<'t, T>,
        f_b: Var<'t, T>,
    ) -> Result<(Var<'t, T>, Var<'t, T>, MutualAttention<'t, T>)> {
        let mut att = self.aggregate.forward(ctx, f_s, f_b)?;
        if self.detach_attention {
            att = MutualAttention {
                a_s: att.a_s.detach(),
                a_b: att.a_b.detach(),
            };
        }
        let out_s = match &self.enhance_s {
            Some(e) => e.forward(ctx, f_s, att.a_s),
            None => f_s,
        };
        let out_b = match &self.enhance_b {
            Some(e) => e.forward(ctx, f_b, att.a_b),
            None => f_b,
        };
        Ok((out_s, out_b, att))
    }
}

pub struct SmeOutput<'t, T: Real> {
    pub f_s: Var<'t, T>,
    pub f_b: Var<'t, T>,
    /// Attention of the last mutual block.
    pub attention: MutualAttention<'t, T>,
    pub projected_s: Var<'t, T>,
    pub projected_b: Var<'t, T>,
}

/// 1×1 projections to the common width followed by `cfg.blocks` mutual blocks.
pub struct Sme {
    pub proj_s: ConvNormAct,
    pub proj_b: ConvNormAct,
    pub blocks: Vec<MutualBlock>,
}

impl Sme {
    pub fn new<T: Real>(
        b: &mut Builder<'_, T>,
        name: &str,
        cin_s: usize,
        cin_b: usize,
        cfg: &SmeConfig,
        norm: NormKind,
        modes: (BranchMode, BranchMode),
    ) -> Self {
        let proj_s = b.conv_norm_act(&format!("{name}.proj_s"), cin_s, cfg.width, ConvGeom::same(1, 1), norm);
        let proj_b = b.conv_norm_act(&format!("{name}.proj_b"), cin_b, cfg.width, ConvGeom::same(1, 1), norm);
        let blocks = (0..cfg.blocks)
            .map(|i| MutualBlock::new(b, &format!("{name}.block{i}"), cfg, norm, modes))
            .collect();
        Self { proj_s, proj_b, blocks }
    }

    pub fn forward<'t, T: Real>(
        &self,
        ctx: &Ctx<'t, T>,
        f_s_in: Var<'t, T>,
        f_b_in: Var<'t, T>,
    ) -> Result<SmeOutput<'t, T>> {
        let (ss, sb) = (f_s_in.shape(), f_b_in.shape());
        if ss[0] != sb[0] || ss[2..] != sb[2..] {
            return Err(Error::Shape(format!(
                "SME inputs differ in batch or spatial size: {ss:?} vs {sb:?}"
            )));
        }
        let ps = self.proj_s.forward(ctx, f_s_in);
        let pb = self.proj_b.forward(ctx, f_b_in);
        let (mut s, mut bnd) = (ps, pb);
        let mut last = None;
        for block in &self.blocks {
            let (ns, nb, att) = block.forward(ctx, s, bnd)?;
            s = ns;
            bnd = nb;
            last = Some(att);
        }
        Ok(SmeOutput {
            f_s: s,
            f_b: bnd,
            attention: last.expect("at least one mutual block"),
            projected_s: ps,
            projected_b: pb,
        })
    }
}
