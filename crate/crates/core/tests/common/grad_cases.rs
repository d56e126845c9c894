//! Finite-difference scenarios, each returning the worst relative error.

use std::rc::Rc;

use rfenet::autograd::Var;
use rfenet::config::{ModelConfig, SarConfig, SmeConfig};
use rfenet::losses::{self, attach_supervision};
use rfenet::network::{batch_images, Network};
use rfenet::nn::{Builder, NormKind, ParamStore};
use rfenet::sar::{CrossAttention, Sar, StageHeads};
use rfenet::sme::{BranchMode, Sme};
use rfenet::synthdata::{generate_scene, SceneSpec};

use super::{grad_check, randn, rng, uniform, GradReport};

const PER_TENSOR: usize = 6;

/// SME on random inputs; the loss reads both branches and both attention maps.
pub fn sme(seed: u64) -> GradReport {
    let mut r = rng(seed);
    let cfg = SmeConfig {
        width: 8,
        ..Default::default()
    };
    let mut store = ParamStore::new();
    let sme = Sme::new(
        &mut Builder::new(&mut store, seed),
        "sme",
        6,
        10,
        &cfg,
        NormKind::Group,
        (BranchMode::Enhance, BranchMode::Enhance),
    );
    store.insert("in.s", randn(&[2, 6, 6, 6], &mut r, 1.0), true);
    store.insert("in.b", randn(&[2, 10, 6, 6], &mut r, 1.0), true);
    let w = [
        randn(&[2, 8, 6, 6], &mut r, 1.0),
        randn(&[2, 8, 6, 6], &mut r, 1.0),
        randn(&[2, 1, 6, 6], &mut r, 1.0),
        randn(&[2, 1, 6, 6], &mut r, 1.0),
    ];
    grad_check(&store, PER_TENSOR, seed, |ctx| {
        let o = sme.forward(ctx, ctx.param("in.s"), ctx.param("in.b")).unwrap();
        Var::weighted_sum(&[
            (o.f_s.dot_const(w[0].clone()), 1.0),
            (o.f_b.dot_const(w[1].clone()), 1.0),
            (o.attention.a_s.dot_const(w[2].clone()), 1.0),
            (o.attention.a_b.dot_const(w[3].clone()), 1.0),
        ])
    })
}

pub fn cross_attend(seed: u64) -> GradReport {
    let mut r = rng(seed);
    let cfg = SarConfig::default();
    let mut store = ParamStore::new();
    let att = CrossAttention::new(&mut Builder::new(&mut store, seed), "att", 8, &cfg);
    store.insert("q", randn(&[5, 8], &mut r, 1.0), true);
    store.insert("v", randn(&[7, 8], &mut r, 1.0), true);
    let w = randn(&[5, 8], &mut r, 1.0);
    grad_check(&store, PER_TENSOR, seed, |ctx| {
        att.forward(ctx, ctx.param("q"), ctx.param("v")).output.dot_const(w.clone())
    })
}

pub fn sar(seed: u64) -> GradReport {
    let mut r = rng(seed);
    let cfg = SarConfig::default();
    let mut store = ParamStore::new();
    let (sar, heads) = {
        let mut b = Builder::new(&mut store, seed);
        (Sar::new(&mut b, "sar", 8, &cfg), StageHeads::new(&mut b, "head", 8, 3))
    };
    store.insert("f.s", randn(&[2, 8, 8, 8], &mut r, 1.0), true);
    store.insert("f.b", randn(&[2, 8, 8, 8], &mut r, 1.0), true);
    let w = randn(&[2, 8, 8, 8], &mut r, 1.0);
    grad_check(&store, PER_TENSOR, seed, |ctx| {
        let o = sar.forward(ctx, ctx.param("f.s"), ctx.param("f.b"), &heads).unwrap();
        o.refined.dot_const(w.clone())
    })
}

pub fn dice(seed: u64) -> GradReport {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    store.insert("p", uniform(&[2, 1, 4, 4], &mut r), true);
    let target: Vec<f64> = (0..32).map(|i| ((i * 7) % 3 == 0) as u8 as f64).collect();
    let target = Rc::new(target);
    grad_check(&store, 64, seed, |ctx| ctx.param("p").dice_loss(target.clone(), 1.0))
}

pub fn cross_entropy(seed: u64) -> GradReport {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    store.insert("logits", randn(&[2, 3, 4, 4], &mut r, 2.0), true);
    let targets = [super::random_grid(4, 4, 3, &mut r), super::random_grid(4, 4, 3, &mut r)];
    grad_check(&store, 96, seed, |ctx| {
        losses::cross_entropy(ctx.param("logits"), &[&targets[0], &targets[1]]).unwrap()
    })
}

/// The full network plus joint loss on one 3×32×32 synthetic scene.
pub fn cascade(seed: u64) -> GradReport {
    let spec = SceneSpec {
        canvas: (32, 32),
        n_objects: 1,
        rng_seed: seed,
        ..Default::default()
    };
    let sample = generate_scene(&spec, "g").unwrap();
    let cfg = ModelConfig {
        init_seed: seed,
        ..Default::default()
    };
    let mut store = ParamStore::new();
    let net = Network::new(&cfg, &mut store).unwrap();
    let images = batch_images::<f64>(&[&sample.image]);
    let loss_cfg = Default::default();
    grad_check(&store, 2, seed, |ctx| {
        let out = net.forward(ctx, &images).unwrap();
        attach_supervision(&out, &[&sample.mask], &[&sample.boundary], &loss_cfg)
            .unwrap()
            .total
    })
}
