mod common;

use common::structure_cases as cases;
use common::{randn, rng};
use rfenet::autograd::Tape;
use rfenet::config::{Ablation, ModelConfig};
use rfenet::network::Network;
use rfenet::nn::{Ctx, ParamStore};
use rfenet::tensor::Tensor;

#[test]
fn residual_enhance_identities() {
    for seed in 0..3 {
        cases::residual_enhance_identities(seed);
    }
}

#[test]
fn sme_zero_attention_identity() {
    cases::sme_zero_attention_identity(4);
}

#[test]
fn sme_attention_in_unit_range() {
    cases::sme_attention_range(5, 100);
}

#[test]
fn sme_oneway_branches() {
    cases::sme_oneway(6);
}

#[test]
fn sar_scatter_locality_and_empty_k() {
    for seed in 0..3 {
        cases::sar_scatter_locality(seed);
    }
}

#[test]
fn prediction_maps_are_distributions() {
    cases::prediction_maps_are_distributions(7);
}

#[test]
fn cross_attention_identities() {
    for seed in 0..5 {
        cases::cross_attention_identities(seed);
    }
}

#[test]
fn identical_keys_average_values() {
    use rfenet::config::SarConfig;
    use rfenet::nn::Builder;
    use rfenet::sar::CrossAttention;

    let mut store = ParamStore::<f64>::new();
    let att = CrossAttention::new(&mut Builder::new(&mut store, 1), "att", 8, &SarConfig::default());
    // zero key weights make every key equal to the bias
    store.get_mut("att.k.weight").unwrap().data_mut().fill(0.0);
    let mut r = rng(2);
    let q = randn(&[4, 8], &mut r, 1.0);
    let v = randn(&[2, 8], &mut r, 1.0);
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store, false);
    let out = att.forward(&ctx, tape.constant(q), tape.constant(v.clone())).output.value();
    let mean = Tensor::new(&[1, 8], (0..8).map(|i| 0.5 * (v.data()[i] + v.data()[8 + i])).collect());
    let want = cases::scratch_attention(&store, 4, &Tensor::zeros(&[1, 8]), &mean);
    // with equal weights the attended value is the mean of the projected rows,
    // and projection is affine, so it equals the projection of the mean row
    for row in 0..4 {
        for i in 0..8 {
            assert!((out.data()[row * 8 + i] - want[0][i]).abs() < 1e-12);
        }
    }
}

#[test]
fn k_zero_network_matches_no_sar() {
    cases::k_zero_network_matches_no_sar(3);
}

fn forward_shapes(cfg: &ModelConfig) -> (Vec<usize>, Vec<Vec<usize>>, Vec<usize>, usize) {
    let mut store = ParamStore::<f64>::new();
    let net = Network::new(cfg, &mut store).unwrap();
    let images = Tensor::full(&[2, 3, 64, 64], 0.5);
    let tape = Tape::new();
    let ctx = Ctx::inference(&tape, &store);
    let out = net.forward(&ctx, &images).unwrap();
    let maps = out
        .stages
        .iter()
        .map(|s| s.attention.is_some() as usize * 2 + 1)
        .sum();
    (
        out.stages.iter().map(|s| s.index).collect(),
        out.stages.iter().map(|s| s.f_s_refined.shape()).collect(),
        out.logits.shape(),
        maps,
    )
}

#[test]
fn full_network_shapes() {
    let cfg = ModelConfig::default();
    let (order, stage_shapes, logits, maps) = forward_shapes(&cfg);
    assert_eq!(order, vec![4, 3, 2, 1]);
    for s in stage_shapes {
        assert_eq!(s, vec![2, cfg.sme.width, 16, 16]);
    }
    assert_eq!(logits, vec![2, 3, 64, 64]);
    // a_s, a_b and the boundary map at each of four stages
    assert_eq!(maps, 12);
}

#[test]
fn ablation_variants_change_structure() {
    let (order, _, logits, _) = forward_shapes(&ModelConfig {
        ablation: Ablation::NoCascade,
        ..Default::default()
    });
    assert_eq!(order, vec![4]);
    assert_eq!(logits, vec![2, 3, 64, 64]);

    for (ablation, sme, sar) in [
        (Ablation::Full, true, true),
        (Ablation::NoSme, false, true),
        (Ablation::NoSar, true, false),
        (Ablation::Baseline, false, false),
    ] {
        let mut store = ParamStore::<f32>::new();
        Network::new(
            &ModelConfig {
                ablation,
                ..Default::default()
            },
            &mut store,
        )
        .unwrap();
        assert_eq!(store.has_group("sme"), sme, "{ablation:?}");
        assert_eq!(store.has_group("sar"), sar, "{ablation:?}");
    }
}

#[test]
fn inference_is_deterministic() {
    let mut store = ParamStore::<f32>::new();
    let net = Network::new(&ModelConfig::default(), &mut store).unwrap();
    let images = randn(&[1, 3, 32, 32], &mut rng(1), 0.2).map(|v| v + 0.5).cast::<f32>();
    let run = || {
        let tape = Tape::new();
        let ctx = Ctx::inference(&tape, &store);
        (*net.forward(&ctx, &images).unwrap().logits.value()).clone()
    };
    assert_eq!(run().data(), run().data());
}

#[test]
fn stage_inputs_follow_the_pyramid() {
    let mut store = ParamStore::<f64>::new();
    let net = Network::new(&ModelConfig::default(), &mut store).unwrap();
    let images = Tensor::full(&[1, 3, 64, 64], 0.3);
    let tape = Tape::new();
    let ctx = Ctx::inference(&tape, &store);
    let msf = net.encoder().encode(&ctx, tape.constant(images)).unwrap();
    assert_eq!(msf.strides, [4, 4, 8, 16, 16]);
    let c = net.encoder().channels();
    let (s, b) = Network::build_inputs(&msf);
    assert_eq!(s.shape(), vec![1, c[4], 16, 16]);
    assert_eq!(b.shape(), vec![1, c[0] + c[4], 16, 16]);
    // the boundary input starts with F_1 unchanged
    let f1 = msf.stage(1).value();
    assert_eq!(&b.value().data()[..f1.numel()], f1.data());
}

#[test]
fn mismatched_inputs_are_shape_errors() {
    let mut store = ParamStore::<f64>::new();
    let net = Network::new(&ModelConfig::default(), &mut store).unwrap();
    let tape = Tape::new();
    let ctx = Ctx::inference(&tape, &store);
    let err = net.forward(&ctx, &Tensor::zeros(&[1, 3, 40, 64])).err().unwrap();
    assert!(matches!(err, rfenet::Error::Shape(_)));
}
