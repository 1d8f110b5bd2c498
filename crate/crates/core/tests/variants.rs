use dtn_core::config::{AttentionKind, CtcSpace, DtnConfig, VariantSpec};
use dtn_core::variants::{build_variant, forward_flops, ladder, with_reattention};
use dtn_core::Dtn;

fn names(m: &Dtn<f32>) -> Vec<String> {
    m.params.names().map(str::to_string).collect()
}

#[test]
fn baseline_is_backbone_plus_classifier() {
    let cfg = DtnConfig::default();
    let m = build_variant::<f32>(VariantSpec::baseline(), &cfg).unwrap();
    for n in names(&m) {
        assert!(
            n.starts_with("backbone.") || n.starts_with("cls.") || n == "centers",
            "{n}"
        );
    }
    assert!(names(&m).iter().any(|n| n.starts_with("backbone.2.conv")));
}

#[test]
fn full_spec_is_the_default_model() {
    let cfg = DtnConfig::default();
    let a = build_variant::<f32>(VariantSpec::full(), &cfg).unwrap();
    let b = Dtn::<f32>::new(cfg, VariantSpec::default()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn ladder_grows_strictly() {
    let cfg = DtnConfig::default();
    let counts: Vec<usize> = ladder()
        .into_iter()
        .map(|(_, spec)| build_variant::<f32>(spec, &cfg).unwrap().num_trainable())
        .collect();
    assert!(counts.windows(2).all(|w| w[0] < w[1]), "{counts:?}");
    let flops: Vec<u64> = ladder()
        .into_iter()
        .map(|(_, spec)| forward_flops(&build_variant::<f32>(spec, &cfg).unwrap(), 2).unwrap())
        .collect();
    assert!(flops.windows(2).all(|w| w[0] < w[1]), "{flops:?}");
}

#[test]
fn scaling_costs_b_plus_ld_parameters() {
    for (experts, depth, heads) in [(2, 6, 8), (3, 2, 4), (1, 1, 1)] {
        let cfg = DtnConfig {
            experts,
            depth,
            heads,
            ..DtnConfig::default()
        };
        let with = build_variant::<f32>(VariantSpec::full(), &cfg).unwrap();
        let without = build_variant::<f32>(VariantSpec::without_mas(), &cfg).unwrap();
        assert_eq!(with.num_trainable() - without.num_trainable(), experts + depth * heads);
    }
}

#[test]
fn scaling_costs_only_gate_arithmetic() {
    let cfg = DtnConfig::default();
    let (b, l, d) = (cfg.experts as u64, cfg.depth as u64, cfg.heads as u64);
    let (h, w) = cfg.feature_hw();
    for n in [1u64, 3] {
        let with = forward_flops(&build_variant::<f32>(VariantSpec::full(), &cfg).unwrap(), n as usize).unwrap();
        let without = forward_flops(
            &build_variant::<f32>(VariantSpec::without_mas(), &cfg).unwrap(),
            n as usize,
        )
        .unwrap();
        // σ and 1/√(c/d) per head, σ per expert, and the gate multiply on the expert maps.
        assert_eq!(with - without, 2 * l * d + b + n * b * (h * w) as u64);
    }
}

#[test]
fn reattention_swaps_gates_for_a_mixing_matrix() {
    let cfg = DtnConfig::default();
    let spec = with_reattention(VariantSpec::full());
    assert_eq!(spec.attention_kind, AttentionKind::Reattention);
    let m = build_variant::<f32>(spec, &cfg).unwrap();
    assert!(m.params.contains("levt.block0.mix"));
    assert!(!m.params.contains("levt.block0.theta"));
    assert_eq!(m.params.get("levt.block5.mix").unwrap().shape(), &[8, 8]);
}

#[test]
fn feature_space_centers_match_the_feature_width() {
    let cfg = DtnConfig::default();
    let spec = VariantSpec {
        ctc_dimensionality: CtcSpace::Features,
        ..VariantSpec::full()
    };
    let m = build_variant::<f32>(spec, &cfg).unwrap();
    assert_eq!(m.params.get("centers").unwrap().shape(), &[2, 64]);
}

#[test]
fn inconsistent_specs_are_rejected() {
    let cfg = DtnConfig::default();
    let bad = [
        VariantSpec {
            use_levt: false,
            ..VariantSpec::full()
        },
        VariantSpec {
            use_moe: false,
            ..VariantSpec::full()
        },
        VariantSpec {
            mas_in_levt: false,
            ..VariantSpec::full()
        },
    ];
    for spec in bad {
        assert!(build_variant::<f32>(spec, &cfg).is_err(), "{spec:?}");
    }
}
