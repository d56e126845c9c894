//! The cascaded two-branch network.
//!
//! Stage 4 consumes `(F_5, [F_1; F_5])`. Every later stage `i ∈ {3, 2, 1}`
//! consumes `([F_{i+1}^s; F_{i+1}], [F_{i+1}^b; F_1])`, all at stride 4. Each
//! stage runs SME then SAR; the refined semantic features of all stages are
//! concatenated for the final head.

use crate::autograd::Var;
use crate::config::{Ablation, CascadeFeed, ModelConfig};
use crate::encoder::{resize_to_stage1, Encoder, MultiScaleFeatures};
use crate::error::{Error, Result};
use crate::nn::{Builder, Conv2d, ConvNormAct, Ctx, ParamStore};
use crate::sar::{PredictionMaps, Sar, Selection, StageHeads};
use crate::sme::{BranchMode, MutualAttention, Sme};
use crate::tensor::{ConvGeom, Real, Tensor};

enum StagePre {
    Sme(Sme),
    /// Plain 1×1 projections standing in for SME in ablations.
    Reduce { s: ConvNormAct, b: ConvNormAct },
}

struct Stage {
    index: usize,
    pre: StagePre,
    sar: Option<Sar>,
    heads: StageHeads,
}

/// Everything one stage produced, at stride-4 resolution.
pub struct StageOutput<'t, T: Real> {
    pub index: usize,
    pub f_s: Var<'t, T>,
    pub f_b: Var<'t, T>,
    pub f_s_refined: Var<'t, T>,
    pub attention: Option<MutualAttention<'t, T>>,
    pub sem_logits: Var<'t, T>,
    pub bnd_logits: Var<'t, T>,
    /// Per batch item (uncertain, boundary) selections; empty without SAR.
    pub selections: Vec<(Selection, Selection)>,
    pub predictions: Option<PredictionMaps<T>>,
}

pub struct NetworkOutput<'t, T: Real> {
    /// `(B, n, H, W)` final semantic logits.
    pub logits: Var<'t, T>,
    /// Stages in evaluation order (4, 3, 2, 1).
    pub stages: Vec<StageOutput<'t, T>>,
}

impl<'t, T: Real> NetworkOutput<'t, T> {
    pub fn stage(&self, index: usize) -> Option<&StageOutput<'t, T>> {
        self.stages.iter().find(|s| s.index == index)
    }
}

pub struct Network {
    pub cfg: ModelConfig,
    encoder: Encoder,
    stages: Vec<Stage>,
    final_conv: ConvNormAct,
    final_cls: Conv2d,
}

const IMAGE_MEAN: f64 = 0.5;
const IMAGE_SCALE: f64 = 4.0;

impl Network {
    /// Builds the architecture and initializes its parameters into `store`.
    pub fn new<T: Real>(cfg: &ModelConfig, store: &mut ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        let mut b = Builder::new(store, cfg.init_seed);
        let encoder = Encoder::new(&mut b, &cfg.encoder);
        let c = encoder.channels();
        let w = cfg.sme.width;
        let norm = cfg.encoder.norm;
        let modes = match cfg.ablation {
            Ablation::OnewayS2b => (BranchMode::Enhance, BranchMode::Identity),
            Ablation::OnewayB2s => (BranchMode::Identity, BranchMode::Enhance),
            _ => (BranchMode::Enhance, BranchMode::Enhance),
        };
        let indices: &[usize] = if cfg.ablation.uses_cascade() { &[4, 3, 2, 1] } else { &[4] };
        let mut stages = Vec::new();
        for &i in indices {
            // stage 4 reads F_5 directly, later stages also get the previous stage
            let (cin_s, cin_b) = if i == 4 {
                (c[4], c[4] + c[0])
            } else {
                (w + c[i], w + c[0])
            };
            let pre = if cfg.ablation.uses_sme() {
                StagePre::Sme(Sme::new(&mut b, &format!("sme{i}"), cin_s, cin_b, &cfg.sme, norm, modes))
            } else {
                let g = ConvGeom::same(1, 1);
                StagePre::Reduce {
                    s: b.conv_norm_act(&format!("reduce{i}.s"), cin_s, w, g, norm),
                    b: b.conv_norm_act(&format!("reduce{i}.b"), cin_b, w, g, norm),
                }
            };
            let sar = cfg
                .ablation
                .uses_sar()
                .then(|| Sar::new(&mut b, &format!("sar{i}"), w, &cfg.sar));
            let heads = StageHeads::new(&mut b, &format!("head{i}"), w, cfg.n_classes);
            stages.push(Stage {
                index: i,
                pre,
                sar,
                heads,
            });
        }
        let final_conv = b.conv_norm_act("final.conv", w * stages.len(), w, ConvGeom::same(3, 1), norm);
        let final_cls = b.conv("final.cls", w, cfg.n_classes, ConvGeom::same(1, 1), true);
        Ok(Self {
            cfg: cfg.clone(),
            encoder,
            stages,
            final_conv,
            final_cls,
        })
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn stage_indices(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.index).collect()
    }

    /// `(F_in^s, F_in^b) = (up(F_5), [F_1; up(F_5)])` at `F_1`'s resolution.
    pub fn build_inputs<'t, T: Real>(msf: &MultiScaleFeatures<'t, T>) -> (Var<'t, T>, Var<'t, T>) {
        let f1 = msf.stage(1);
        let s1 = f1.shape();
        let f5 = resize_to_stage1(msf.stage(5), (s1[2], s1[3]));
        (f5, Var::concat_channels(&[f1, f5]))
    }

    /// Full forward pass on a `(B, 3, H, W)` batch with values in `[0, 1]`.
    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, T>, images: &Tensor<T>) -> Result<NetworkOutput<'t, T>> {
        let shape = images.shape();
        if shape.len() != 4 {
            return Err(Error::Shape(format!("expected (B, 3, H, W) images, got {shape:?}")));
        }
        let (h, w) = (shape[2], shape[3]);
        let mean = T::of(IMAGE_MEAN);
        let scale = T::of(IMAGE_SCALE);
        let x = ctx.tape.constant(images.map(|v| (v - mean) * scale));
        let msf = self.encoder.encode(ctx, x)?;
        let f1 = msf.stage(1);
        let target = {
            let s = f1.shape();
            (s[2], s[3])
        };
        let (f_in_s, f_in_b) = Self::build_inputs(&msf);

        let mut outputs: Vec<StageOutput<'t, T>> = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let (s_in, b_in) = match outputs.last() {
                None => (f_in_s, f_in_b),
                Some(prev) => {
                    let prev_s = match self.cfg.cascade_feed {
                        CascadeFeed::Sar => prev.f_s_refined,
                        CascadeFeed::Sme => prev.f_s,
                    };
                    let skip = resize_to_stage1(msf.stage(stage.index + 1), target);
                    (
                        Var::concat_channels(&[prev_s, skip]),
                        Var::concat_channels(&[prev.f_b, f1]),
                    )
                }
            };
            let (f_s, f_b, attention) = match &stage.pre {
                StagePre::Sme(sme) => {
                    let o = sme.forward(ctx, s_in, b_in)?;
                    (o.f_s, o.f_b, Some(o.attention))
                }
                StagePre::Reduce { s, b } => (s.forward(ctx, s_in), b.forward(ctx, b_in), None),
            };
            let (f_s_refined, selections, predictions) = match &stage.sar {
                Some(sar) => {
                    let o = sar.forward(ctx, f_s, f_b, &stage.heads)?;
                    (o.refined, o.selections, Some(o.predictions))
                }
                None => (f_s, Vec::new(), None),
            };
            outputs.push(StageOutput {
                index: stage.index,
                f_s,
                f_b,
                f_s_refined,
                attention,
                sem_logits: stage.heads.sem_logits(ctx, f_s_refined),
                bnd_logits: stage.heads.bnd_logits(ctx, f_b),
                selections,
                predictions,
            });
        }
        let refined: Vec<_> = outputs.iter().map(|o| o.f_s_refined).collect();
        let fused = if refined.len() == 1 { refined[0] } else { Var::concat_channels(&refined) };
        let logits = self
            .final_cls
            .forward(ctx, self.final_conv.forward(ctx, fused))
            .resize_bilinear(h, w);
        Ok(NetworkOutput {
            logits,
            stages: outputs,
        })
    }
}

/// Stacks `3×H×W` images into a `(B, 3, H, W)` batch.
pub fn batch_images<T: Real>(images: &[&Tensor<f32>]) -> Tensor<T> {
    let items: Vec<Tensor<T>> = images
        .iter()
        .map(|im| {
            let s = im.shape();
            im.cast::<T>().reshape(&[1, s[0], s[1], s[2]])
        })
        .collect();
    Tensor::stack(&items)
}
