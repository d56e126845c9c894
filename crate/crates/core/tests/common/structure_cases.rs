//! Exact structural identities of the SME and SAR blocks. Each check panics
//! with a description on failure.

use rfenet::autograd::{Tape, Var};
use rfenet::config::{Ablation, ModelConfig, PointCount, SarConfig, SmeConfig};
use rfenet::network::Network;
use rfenet::nn::{Builder, Ctx, NormKind, ParamStore};
use rfenet::sar::{CrossAttention, Sar, StageHeads};
use rfenet::sme::{BranchMode, ResidualEnhance, Sme};
use rfenet::tensor::Tensor;

use super::{randn, rng};

/// Direct 3×3 same-padded convolution without bias, `(B, C, H, W)`.
pub fn naive_conv3(x: &Tensor<f64>, w: &Tensor<f64>) -> Tensor<f64> {
    let (b, c, h, wd) = x.dims4();
    let cout = w.shape()[0];
    let mut out = Tensor::zeros(&[b, cout, h, wd]);
    for n in 0..b {
        for o in 0..cout {
            for y in 0..h {
                for xx in 0..wd {
                    let mut acc = 0.0;
                    for i in 0..c {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (sy, sx) = (y as i64 + ky as i64 - 1, xx as i64 + kx as i64 - 1);
                                if sy < 0 || sx < 0 || sy >= h as i64 || sx >= wd as i64 {
                                    continue;
                                }
                                let xv = x.data()[((n * c + i) * h + sy as usize) * wd + sx as usize];
                                acc += xv * w.data()[((o * c + i) * 3 + ky) * 3 + kx];
                            }
                        }
                    }
                    out.data_mut()[((n * cout + o) * h + y) * wd + xx] = acc;
                }
            }
        }
    }
    out
}

fn enhance_setup(seed: u64) -> (ParamStore<f64>, ResidualEnhance, Tensor<f64>) {
    let mut store = ParamStore::new();
    let e = ResidualEnhance::new(&mut Builder::new(&mut store, seed), "enh", 4);
    let f = randn(&[2, 4, 5, 6], &mut rng(seed + 1), 1.0);
    (store, e, f)
}

fn run_enhance(store: &ParamStore<f64>, e: &ResidualEnhance, f: &Tensor<f64>, a: &Tensor<f64>) -> Tensor<f64> {
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, store, false);
    let out = e.forward(&ctx, tape.constant(f.clone()), tape.constant(a.clone()));
    (*out.value()).clone()
}

/// `a ≡ 0` returns the input bit for bit; `a ≡ 1` adds `conv(f)`; random `a`
/// matches gate, conv and add done by hand.
pub fn residual_enhance_identities(seed: u64) {
    let (store, e, f) = enhance_setup(seed);
    let w = store.get("enh.weight").unwrap();

    let zero = run_enhance(&store, &e, &f, &Tensor::zeros(&[2, 1, 5, 6]));
    assert_eq!(zero.data(), f.data(), "zero attention must be the identity");

    let one = run_enhance(&store, &e, &f, &Tensor::full(&[2, 1, 5, 6], 1.0));
    let want = naive_conv3(&f, w).zip(&f, |a, b| a + b);
    assert!(one.max_abs_diff(&want) < 1e-12, "a = 1 must give f + conv(f)");

    let a = super::uniform(&[2, 1, 5, 6], &mut rng(seed + 2));
    let mut gated = f.clone();
    for n in 0..2 {
        for c in 0..4 {
            for p in 0..30 {
                gated.data_mut()[(n * 4 + c) * 30 + p] *= a.data()[n * 30 + p];
            }
        }
    }
    let want = naive_conv3(&gated, w).zip(&f, |a, b| a + b);
    let got = run_enhance(&store, &e, &f, &a);
    assert!(got.max_abs_diff(&want) < 1e-12, "gate, conv, add composition differs");
}

fn sme_setup(seed: u64, modes: (BranchMode, BranchMode)) -> (ParamStore<f64>, Sme, Tensor<f64>, Tensor<f64>) {
    let cfg = SmeConfig {
        width: 8,
        ..Default::default()
    };
    let mut store = ParamStore::new();
    let sme = Sme::new(&mut Builder::new(&mut store, seed), "sme", 6, 10, &cfg, NormKind::Group, modes);
    let mut r = rng(seed + 7);
    let s = randn(&[2, 6, 7, 7], &mut r, 1.0);
    let b = randn(&[2, 10, 7, 7], &mut r, 1.0);
    (store, sme, s, b)
}

/// Forcing both attention channels to zero (zero weights, very negative bias)
/// makes the SME return its projected inputs exactly.
pub fn sme_zero_attention_identity(seed: u64) {
    let (mut store, sme, s, b) = sme_setup(seed, (BranchMode::Enhance, BranchMode::Enhance));
    store.get_mut("sme.block0.attn.out.weight").unwrap().data_mut().fill(0.0);
    store.get_mut("sme.block0.attn.out.bias").unwrap().data_mut().fill(-1e4);
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store, false);
    let o = sme.forward(&ctx, tape.constant(s), tape.constant(b)).unwrap();
    assert!(o.attention.a_s.value().data().iter().all(|&v| v == 0.0));
    assert!(o.attention.a_b.value().data().iter().all(|&v| v == 0.0));
    assert_eq!(o.f_s.value().data(), o.projected_s.value().data(), "semantic branch not identity");
    assert_eq!(o.f_b.value().data(), o.projected_b.value().data(), "boundary branch not identity");
}

/// Attention stays in `[0, 1]` over random input pairs, including large ones.
pub fn sme_attention_range(seed: u64, pairs: usize) {
    let (store, sme, _, _) = sme_setup(seed, (BranchMode::Enhance, BranchMode::Enhance));
    let mut r = rng(seed + 3);
    for i in 0..pairs {
        let std = [0.1, 1.0, 30.0][i % 3];
        let s = randn(&[1, 6, 4, 4], &mut r, std);
        let b = randn(&[1, 10, 4, 4], &mut r, std);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, false);
        let o = sme.forward(&ctx, tape.constant(s), tape.constant(b)).unwrap();
        for a in [o.attention.a_s, o.attention.a_b] {
            assert_eq!(a.shape(), vec![1, 1, 4, 4]);
            assert!(a.value().data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}

/// With one branch set to identity, that branch output equals its projected
/// input and no gradient reaches the attention aggregator.
pub fn sme_oneway(seed: u64) {
    for (modes, check_s) in [
        ((BranchMode::Enhance, BranchMode::Identity), false),
        ((BranchMode::Identity, BranchMode::Enhance), true),
    ] {
        let (store, sme, s, b) = sme_setup(seed, modes);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, true);
        let o = sme.forward(&ctx, tape.constant(s), tape.constant(b)).unwrap();
        let (out, proj) = if check_s {
            (o.f_s, o.projected_s)
        } else {
            (o.f_b, o.projected_b)
        };
        assert_eq!(out.value().data(), proj.value().data(), "identity branch changed");
        let loss = Var::weighted_sum(&[(o.f_s.sum(), 1.0), (o.f_b.sum(), 1.0)]);
        let grads = ctx.param_grads(&tape.backward(loss));
        for (name, g) in &grads {
            if name.contains(".attn.") {
                assert!(g.data().iter().all(|&v| v == 0.0), "{name} received gradient");
            }
        }
    }
}

fn sar_setup(seed: u64, cfg: &SarConfig) -> (ParamStore<f64>, Sar, StageHeads, Tensor<f64>, Tensor<f64>) {
    let mut store = ParamStore::new();
    let (sar, heads) = {
        let mut b = Builder::new(&mut store, seed);
        (Sar::new(&mut b, "sar", 8, cfg), StageHeads::new(&mut b, "head", 8, 3))
    };
    let mut r = rng(seed + 5);
    let s = randn(&[2, 8, 8, 8], &mut r, 1.0);
    let b = randn(&[2, 8, 8, 8], &mut r, 1.0);
    (store, sar, heads, s, b)
}

/// The refined map differs from the input only at selected positions, every
/// selected position changes, and `K = 0` is the identity.
pub fn sar_scatter_locality(seed: u64) {
    let cfg = SarConfig::default();
    let (store, sar, heads, s, b) = sar_setup(seed, &cfg);
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store, false);
    let o = sar
        .forward(&ctx, tape.constant(s.clone()), tape.constant(b.clone()), &heads)
        .unwrap();
    let refined = o.refined.value();
    let (bs, c, h, w) = s.dims4();
    for n in 0..bs {
        let selected = &o.selections[n].0.indices;
        assert_eq!(selected.len(), (h * w).div_ceil(16));
        for p in 0..h * w {
            let changed = (0..c).any(|ch| {
                let i = (n * c + ch) * h * w + p;
                refined.data()[i] != s.data()[i]
            });
            assert_eq!(changed, selected.contains(&p), "batch {n} pixel {p}");
        }
    }

    let cfg = SarConfig {
        k: PointCount::Fixed(0),
        ..Default::default()
    };
    let (store, sar, heads, s, b) = sar_setup(seed, &cfg);
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store, false);
    let o = sar.forward(&ctx, tape.constant(s.clone()), tape.constant(b), &heads).unwrap();
    assert_eq!(o.refined.value().data(), s.data(), "K = 0 must be the identity");
}

/// Class probabilities sum to one per pixel and boundary probabilities lie in `[0, 1]`.
pub fn prediction_maps_are_distributions(seed: u64) {
    let (store, _, heads, s, b) = sar_setup(seed, &SarConfig::default());
    let p = heads.predict(&store, &s, &b);
    let (bs, n, h, w) = p.p_s.dims4();
    for i in 0..bs {
        for px in 0..h * w {
            let sum: f64 = (0..n).map(|c| p.p_s.data()[(i * n + c) * h * w + px]).sum();
            assert!((sum - 1.0).abs() < 1e-5);
        }
    }
    assert!(p.p_b.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
}

fn attention_setup(seed: u64) -> (ParamStore<f64>, CrossAttention) {
    let mut store = ParamStore::new();
    let att = CrossAttention::new(&mut Builder::new(&mut store, seed), "att", 8, &SarConfig::default());
    (store, att)
}

fn attend(store: &ParamStore<f64>, att: &CrossAttention, q: &Tensor<f64>, v: &Tensor<f64>) -> (Tensor<f64>, Vec<Tensor<f64>>) {
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, store, false);
    let o = att.forward(&ctx, tape.constant(q.clone()), tape.constant(v.clone()));
    (
        (*o.output.value()).clone(),
        o.weights.iter().map(|w| (*w.value()).clone()).collect(),
    )
}

/// `x W + b` with `W` stored `(din, dout)`.
fn affine(x: &[Vec<f64>], store: &ParamStore<f64>, name: &str) -> Vec<Vec<f64>> {
    let w = store.get(&format!("{name}.weight")).unwrap();
    let b = store.get(&format!("{name}.bias")).unwrap();
    let (din, dout) = w.dims2();
    x.iter()
        .map(|row| {
            (0..dout)
                .map(|o| b.data()[o] + (0..din).map(|i| row[i] * w.data()[i * dout + o]).sum::<f64>())
                .collect()
        })
        .collect()
}

fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    let (n, d) = t.dims2();
    (0..n).map(|r| t.data()[r * d..(r + 1) * d].to_vec()).collect()
}

/// `softmax(QKᵀ/√d_k)V` per head, concatenated and projected, from plain loops.
pub fn scratch_attention(store: &ParamStore<f64>, heads: usize, q: &Tensor<f64>, v: &Tensor<f64>) -> Vec<Vec<f64>> {
    let (qp, kp, vp) = (
        affine(&rows(q), store, "att.q"),
        affine(&rows(v), store, "att.k"),
        affine(&rows(v), store, "att.v"),
    );
    let inner = qp[0].len();
    let dk = inner / heads;
    let mut cat = vec![vec![0.0; inner]; qp.len()];
    for h in 0..heads {
        for (qi, qrow) in qp.iter().enumerate() {
            let logits: Vec<f64> = kp
                .iter()
                .map(|krow| (0..dk).map(|d| qrow[h * dk + d] * krow[h * dk + d]).sum::<f64>() / (dk as f64).sqrt())
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for d in 0..dk {
                cat[qi][h * dk + d] = (0..vp.len()).map(|m| e[m] / z * vp[m][h * dk + d]).sum();
            }
        }
    }
    affine(&cat, store, "att.o")
}

/// Matches the scratch implementation, rows of every head sum to one, and the
/// output ignores the order of the value rows.
pub fn cross_attention_identities(seed: u64) {
    let (store, att) = attention_setup(seed);
    let mut r = rng(seed + 9);
    let q = randn(&[3, 8], &mut r, 1.0);
    let v = randn(&[5, 8], &mut r, 1.0);
    let (out, weights) = attend(&store, &att, &q, &v);
    let want = scratch_attention(&store, att.heads, &q, &v);
    for (got, want) in rows(&out).iter().zip(&want) {
        for (a, b) in got.iter().zip(want) {
            assert!((a - b).abs() < 1e-6, "scratch attention mismatch {a} vs {b}");
        }
    }
    for w in &weights {
        for row in rows(w) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5, "attention row does not sum to one");
        }
    }

    let perm = [3, 0, 4, 2, 1];
    let vr = rows(&v);
    let shuffled = Tensor::new(&[5, 8], perm.iter().flat_map(|&i| vr[i].clone()).collect());
    let (out2, _) = attend(&store, &att, &q, &shuffled);
    assert!(out.max_abs_diff(&out2) < 1e-6, "attention depends on value order");

    // a single value row is returned for every query
    let one = randn(&[1, 8], &mut r, 1.0);
    let (out, _) = attend(&store, &att, &q, &one);
    let single = affine(&affine(&rows(&one), &store, "att.v"), &store, "att.o");
    for row in rows(&out) {
        for (a, b) in row.iter().zip(&single[0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

/// With `K = 0` the full network produces the same logits as `no_sar` after
/// copying the shared weights.
pub fn k_zero_network_matches_no_sar(seed: u64) {
    let full_cfg = ModelConfig {
        init_seed: seed,
        sar: SarConfig {
            k: PointCount::Fixed(0),
            ..Default::default()
        },
        ..Default::default()
    };
    let bare_cfg = ModelConfig {
        ablation: Ablation::NoSar,
        init_seed: seed + 1,
        ..full_cfg.clone()
    };
    let mut full_store = ParamStore::<f64>::new();
    let full = Network::new(&full_cfg, &mut full_store).unwrap();
    let mut bare_store = ParamStore::<f64>::new();
    let bare = Network::new(&bare_cfg, &mut bare_store).unwrap();
    let names: Vec<String> = bare_store.names().cloned().collect();
    for name in names {
        let v = full_store.get(&name).expect("shared parameter").clone();
        *bare_store.get_mut(&name).unwrap() = v;
    }
    let images = randn(&[1, 3, 32, 32], &mut rng(seed), 0.3).map(|v| v + 0.5);
    let logits = |net: &Network, store: &ParamStore<f64>| {
        let tape = Tape::new();
        let ctx = Ctx::inference(&tape, store);
        let l = net.forward(&ctx, &images).unwrap().logits;
        (*l.value()).clone()
    };
    assert_eq!(
        logits(&full, &full_store).data(),
        logits(&bare, &bare_store).data(),
        "K = 0 network differs from no_sar"
    );
}
