use bnnkit::autograd::Tape;
use bnnkit::binarize::{BinarizerSpec, TrainingProgress};
use bnnkit::block::{ActivationSpec, BlockConfig, Pass, ResidualMode, ScalingFactorSpec, Stage};
use bnnkit::model::{build_model, Arch, Model, ModelConfig};
use bnnkit::normalize::{NormKind, NormalizerSpec};
use bnnkit::{Error, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Output of the last building block, before pooling.
fn feature_map(m: &mut Model, x: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let pass = Pass::eval();
    let xv = tape.constant(x.clone());
    let sw = m.params.on_tape(&mut tape, m.stem.weight);
    let mut h = tape.conv2d(xv, sw, m.stem.geometry).unwrap();
    h = m
        .stem
        .bn
        .forward(&mut tape, &m.params, h, pass.mode)
        .unwrap();
    for b in m.blocks.iter_mut() {
        h = b.forward(&mut tape, &m.params, h, pass).unwrap();
    }
    tape.value(h).clone()
}

/// Binarizable weight count of a ResNet whose stages have `channels` and
/// `per_stage` blocks, with a stem producing `channels[0]`.
fn binary_weight_count(channels: &[usize], per_stage: usize) -> usize {
    let mut prev = channels[0];
    let mut total = 0;
    for &c in channels {
        for _ in 0..per_stage {
            total += 9 * (c * prev + c * c);
            prev = c;
        }
    }
    total
}

#[test]
fn resnet18_layout() {
    let cfg = ModelConfig {
        arch: Arch::Resnet18,
        ..ModelConfig::default()
    };
    let mut m = build_model(&cfg, 1).unwrap();
    assert_eq!(m.binary_conv_count(), 16);
    assert_eq!(
        m.param_summary().binarizable_total(),
        binary_weight_count(&[64, 128, 256, 512], 2)
    );
    let x = Tensor::randn(&[1, 3, 32, 32], 1.0, &mut ChaCha8Rng::seed_from_u64(0));
    assert_eq!(feature_map(&mut m, &x).shape(), &[1, 512, 4, 4]);
    assert_eq!(m.predict(&x).unwrap().shape(), &[1, 10]);
}

#[test]
fn resnet20_layout() {
    let mut m = build_model(&ModelConfig::default(), 2).unwrap();
    assert_eq!(m.binary_conv_count(), 18);
    assert_eq!(
        m.param_summary().binarizable_total(),
        binary_weight_count(&[16, 32, 64], 3)
    );
    let x = Tensor::randn(&[2, 3, 32, 32], 1.0, &mut ChaCha8Rng::seed_from_u64(0));
    assert_eq!(feature_map(&mut m, &x).shape(), &[2, 64, 8, 8]);
    // shortcuts appear exactly where a stage changes width
    let projections: Vec<usize> = m
        .blocks
        .iter()
        .enumerate()
        .filter(|(_, b)| b.shortcut.is_some())
        .map(|(i, _)| i)
        .collect();
    assert_eq!(projections, vec![3, 6]);
}

#[test]
fn summary_totals_match_the_store() {
    let m = build_model(
        &ModelConfig {
            arch: Arch::ResnetTiny,
            ..ModelConfig::default()
        },
        0,
    )
    .unwrap();
    let s = m.param_summary();
    let stored: usize = m.params.iter().map(|(_, p)| p.value.len()).sum();
    assert_eq!(s.real_total() + s.binarizable_total(), stored);
    let text = s.to_string();
    assert!(text.lines().next().unwrap().starts_with("layer"));
    assert!(text.lines().last().unwrap().starts_with("total"));
}

#[test]
fn half_width_quarters_the_binary_weights() {
    let full = build_model(&ModelConfig::default(), 0)
        .unwrap()
        .param_summary()
        .binarizable_total();
    let half = build_model(
        &ModelConfig {
            width_multiplier: 0.5,
            ..ModelConfig::default()
        },
        0,
    )
    .unwrap()
    .param_summary()
    .binarizable_total();
    assert_eq!(half * 4, full);
    let r18 = ModelConfig {
        arch: Arch::Resnet18,
        ..ModelConfig::default()
    };
    let full = build_model(&r18, 0)
        .unwrap()
        .param_summary()
        .binarizable_total();
    let half = build_model(
        &ModelConfig {
            width_multiplier: 0.5,
            ..r18
        },
        0,
    )
    .unwrap()
    .param_summary()
    .binarizable_total();
    let ratio = half as f64 / full as f64;
    assert!((ratio - 0.25).abs() < 0.01, "{ratio}");
}

#[test]
fn imagenet_stem_downsamples_by_four() {
    let cfg = ModelConfig {
        arch: Arch::Resnet18,
        imagenet_stem: true,
        input_shape: [3, 64, 64],
        width_multiplier: 0.125,
        ..ModelConfig::default()
    };
    let mut m = build_model(&cfg, 0).unwrap();
    let x = Tensor::randn(&[1, 3, 64, 64], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
    assert_eq!(feature_map(&mut m, &x).shape()[2..], [4, 4][..]);
    let bad = ModelConfig {
        arch: Arch::Resnet20,
        imagenet_stem: true,
        ..ModelConfig::default()
    };
    assert!(matches!(build_model(&bad, 0), Err(Error::Config(_))));
}

#[test]
fn wrong_input_shape_is_reported() {
    let mut m = build_model(
        &ModelConfig {
            arch: Arch::ResnetTiny,
            ..ModelConfig::default()
        },
        0,
    )
    .unwrap();
    assert!(matches!(
        m.predict(&Tensor::zeros(&[1, 1, 28, 28])),
        Err(Error::Shape(_))
    ));
}

#[test]
fn serialized_model_predicts_the_same() {
    let cfg = ModelConfig {
        arch: Arch::ResnetTiny,
        input_shape: [1, 8, 8],
        num_classes: 4,
        ..ModelConfig::default()
    };
    let mut m = build_model(&cfg, 5).unwrap();
    let x = Tensor::randn(&[3, 1, 8, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(2));
    let mut back: Model = serde_json::from_str(&serde_json::to_string(&m).unwrap()).unwrap();
    assert_eq!(back.predict(&x).unwrap(), m.predict(&x).unwrap());
}

fn pick<T: Clone + std::fmt::Debug>(options: &'static [T]) -> impl Strategy<Value = T> {
    (0..options.len()).prop_map(move |i| options[i].clone())
}

const BINARIZERS: &[&str] = &[
    "LC_1", "LC_2", "LC_A", "PN", "GPN", "T", "EDE", "SS", "EWGS",
];
const FEATURE_NORMS: &[NormKind] = &[NormKind::None, NormKind::Lb, NormKind::Std, NormKind::Bn];
const WEIGHT_NORMS: &[NormKind] = &[NormKind::None, NormKind::Mstd, NormKind::Mstdb];
const SCALINGS: &[ScalingFactorSpec] = &[
    ScalingFactorSpec::None,
    ScalingFactorSpec::Am,
    ScalingFactorSpec::Lf,
    ScalingFactorSpec::Lfi,
];
const ACTIVATIONS: &[&str] = &["NONE", "HTANH_ID", "RELU", "PRELU", "RPRELU", "DPRELU"];
const RESIDUALS: &[ResidualMode] = &[ResidualMode::Single, ResidualMode::Double];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn every_configuration_yields_finite_logits(
        fb in pick(BINARIZERS), wb in pick(BINARIZERS), fnorm in pick(FEATURE_NORMS), wnorm in pick(WEIGHT_NORMS),
        scaling in pick(SCALINGS), act in pick(ACTIVATIONS), residual in pick(RESIDUALS),
        classes in 2usize..6, n in 1usize..4, t in 0.0f64..=1.0, seed in any::<u64>(),
    ) {
        let cfg = ModelConfig {
            arch: Arch::ResnetTiny,
            block: BlockConfig {
                feature_binarizer: fb.parse::<BinarizerSpec>().unwrap(),
                weight_binarizer: wb.parse::<BinarizerSpec>().unwrap(),
                feature_norm: NormalizerSpec::new(fnorm),
                weight_norm: NormalizerSpec::new(wnorm),
                scaling,
                activation: act.parse::<ActivationSpec>().unwrap(),
                residual,
                ..BlockConfig::default()
            },
            num_classes: classes,
            input_shape: [1, 8, 8],
            ..ModelConfig::default()
        };
        let mut m = build_model(&cfg, seed).unwrap();
        let x = Tensor::randn(&[n, 1, 8, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let pass = Pass::train(TrainingProgress::new(t).unwrap(), Stage::Two);
        if m.needs_calibration() {
            m.calibrate(&x, pass).unwrap();
            prop_assert!(!m.needs_calibration());
        }
        let mut tape = Tape::new();
        let logits = m.forward(&mut tape, &x, pass).unwrap();
        prop_assert_eq!(tape.value(logits).shape(), &[n, classes]);
        prop_assert!(tape.value(logits).data().iter().all(|v| v.is_finite()));
        let eval = m.predict(&x).unwrap();
        prop_assert_eq!(eval.shape(), &[n, classes]);
        prop_assert!(eval.data().iter().all(|v| v.is_finite()));
    }
}
