mod common;

use common::{scramble, toy_config};
use dtn_core::config::{DtnConfig, VariantSpec};
use dtn_core::data::{generate_sample, Sample, FAKE};
use dtn_core::diagnostics::{
    attention_diversity, cosine, entropy, export_features, grad_cam, mean_pairwise_cosine, write_pgm, SaliencyMap,
};
use dtn_core::Dtn;
use dtn_tensor::Tensor;

fn samples(n: u64, cfg: &DtnConfig) -> Vec<Sample> {
    (0..n)
        .map(|i| generate_sample(7, i, (i % 2) as usize, cfg.in_channels, cfg.image_h, cfg.image_w, 1.0).unwrap())
        .collect()
}

#[test]
fn hand_computed_similarities() {
    let a = [1.0, 0.0, 0.0, 1.0];
    let b = [0.0, 1.0, 1.0, 0.0];
    let c = [1.0, 0.0, 1.0, 0.0];
    assert_eq!(mean_pairwise_cosine(&[&a, &b]), 0.0);
    assert!((mean_pairwise_cosine(&[&a, &c]) - 0.5).abs() < 1e-15);
    assert!((mean_pairwise_cosine(&[&a, &b, &c]) - (0.0 + 0.5 + 0.5) / 3.0).abs() < 1e-15);
    assert_eq!(cosine(&a, &a), 1.0);
    assert_eq!(entropy(&[1.0, 0.0]), 0.0);
}

#[test]
fn fresh_model_reports_half_gates() {
    let cfg = toy_config(0);
    let m = Dtn::<f32>::new(cfg.clone(), VariantSpec::full()).unwrap();
    let r = attention_diversity(&m, &samples(4, &cfg)).unwrap();
    assert_eq!(r.blocks.len(), 2);
    assert_eq!(r.moe_gates, vec![0.5, 0.5]);
    let ln_hw = 16f64.ln();
    for b in &r.blocks {
        assert_eq!(b.gates, vec![0.5, 0.5]);
        assert!((-1.0..=1.0).contains(&b.mean_cosine));
        assert!(b.head_entropy.iter().all(|&e| (0.0..=ln_hw + 1e-9).contains(&e)));
    }
    let vanilla = Dtn::<f32>::new(cfg.clone(), VariantSpec::without_mas()).unwrap();
    let r = attention_diversity(&vanilla, &samples(2, &cfg)).unwrap();
    assert!(r.blocks.iter().all(|b| b.gates.is_empty()));
    let base = Dtn::<f32>::new(cfg.clone(), VariantSpec::baseline()).unwrap();
    assert!(attention_diversity(&base, &samples(2, &cfg)).unwrap().blocks.is_empty());
    assert!(attention_diversity(&m, &[]).is_err());
}

#[test]
fn closed_gates_give_uniform_rows() {
    let cfg = toy_config(1);
    let mut m = Dtn::<f64>::new(cfg.clone(), VariantSpec::full()).unwrap();
    for j in 0..cfg.depth {
        let t = m.params.get_mut(&format!("levt.block{j}.theta")).unwrap();
        t.data_mut().iter_mut().for_each(|v| *v = -1000.0);
    }
    let r = attention_diversity(&m, &samples(3, &cfg)).unwrap();
    for b in &r.blocks {
        assert!(b.head_entropy.iter().all(|&e| (e - 16f64.ln()).abs() < 1e-12));
        assert!((b.mean_cosine - 1.0).abs() < 1e-12);
    }
}

#[test]
fn duplicated_heads_have_unit_similarity() {
    let cfg = toy_config(2);
    let mut m = Dtn::<f64>::new(cfg.clone(), VariantSpec::full()).unwrap();
    scramble(&mut m.params, 2);
    // Channels 4..8 repeat channels 0..4 all the way into the first block's heads.
    let half = 4;
    let copy_rows = |m: &mut Dtn<f64>, name: &str, row: usize| {
        let t = m.params.get_mut(name).unwrap();
        let d = t.data_mut();
        let (src, dst) = d.split_at_mut(half * row);
        dst[..half * row].copy_from_slice(&src[..half * row]);
    };
    copy_rows(&mut m, "backbone.0.conv.w", 3 * 9);
    for name in ["backbone.0.conv.b", "backbone.0.bn.gamma", "backbone.0.bn.beta"] {
        copy_rows(&mut m, name, 1);
    }
    for name in ["backbone.0.bn.running_mean", "backbone.0.bn.running_var"] {
        copy_rows(&mut m, name, 1);
    }
    copy_rows(&mut m, "levt.pos", 16);
    for name in ["gamma", "beta", "running_mean", "running_var"] {
        copy_rows(&mut m, &format!("levt.block0.bn1.{name}"), 1);
    }
    for name in ["wq", "wk"] {
        copy_rows(&mut m, &format!("levt.block0.{name}"), 4);
    }
    let theta = m.params.get_mut("levt.block0.theta").unwrap();
    let t0 = theta.data()[0];
    theta.data_mut()[1] = t0;
    let r = attention_diversity(&m, &samples(3, &cfg)).unwrap();
    assert!(
        (r.blocks[0].mean_cosine - 1.0).abs() < 1e-12,
        "{}",
        r.blocks[0].mean_cosine
    );
}

/// Baseline model whose only live feature channel passes input channel 0 through.
fn single_channel_model(sign: f64) -> Dtn<f64> {
    let cfg = DtnConfig {
        channel_plan: vec![4],
        image_h: 8,
        image_w: 8,
        ..toy_config(0)
    };
    let mut m = Dtn::<f64>::new(cfg, VariantSpec::baseline()).unwrap();
    let w = m.params.get_mut("backbone.0.conv.w").unwrap();
    w.data_mut().iter_mut().for_each(|v| *v = 0.0);
    w.data_mut()[4] = 1.0; // out 0, in 0, centre tap
    let cls = m.params.get_mut("cls.w").unwrap();
    cls.data_mut().iter_mut().for_each(|v| *v = 0.0);
    cls.data_mut()[1] = sign;
    m
}

fn quadrant_image() -> Tensor<f32> {
    Tensor::from_fn(&[3, 8, 8], |i| {
        let (c, y, x) = (i / 64, (i / 8) % 8, i % 8);
        if c == 0 && y < 4 && x < 4 {
            1.0
        } else {
            0.0
        }
    })
}

#[test]
fn saliency_localises_the_active_channel() {
    let m = single_channel_model(1.0);
    let snapshot = m.clone();
    let map = grad_cam(&m, &quadrant_image(), 1).unwrap();
    assert_eq!((map.h, map.w), (4, 4));
    let want: Vec<f64> = (0..16)
        .map(|i| if i / 4 < 2 && i % 4 < 2 { 1.0 } else { 0.0 })
        .collect();
    assert_eq!(map.values, want);
    assert_eq!(grad_cam(&m, &quadrant_image(), 1).unwrap(), map);
    assert!(m.params.bit_identical(&snapshot.params));
    assert!(m.params.iter().all(|(_, t)| t.grad().is_none()));

    let against = single_channel_model(-1.0);
    assert!(grad_cam(&against, &quadrant_image(), 1)
        .unwrap()
        .values
        .iter()
        .all(|&v| v == 0.0));
    assert!(grad_cam(&m, &quadrant_image(), 2).is_err());
}

#[test]
fn saliency_of_a_full_model_is_normalised() {
    let cfg = toy_config(3);
    let mut m = Dtn::<f64>::new(cfg.clone(), VariantSpec::full()).unwrap();
    scramble(&mut m.params, 3);
    let img = generate_sample(1, 1, FAKE, 3, 8, 8, 1.0).unwrap().image;
    for class in 0..2 {
        let map = grad_cam(&m, &img, class).unwrap();
        assert_eq!(map.values.len(), 16);
        assert!(map.values.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn feature_export_is_complete_and_repeatable() {
    let cfg = toy_config(4);
    let m = Dtn::<f32>::new(cfg.clone(), VariantSpec::full()).unwrap();
    let s = samples(9, &cfg);
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    export_features(&m, &s, &a).unwrap();
    export_features(&m, &s, &b).unwrap();
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text, std::fs::read_to_string(&b).unwrap());
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 10);
    assert!(lines[0].starts_with("sample_id,label,f1,"));
    assert!(lines.iter().all(|l| l.split(',').count() == 2 + cfg.channels()));
}

#[test]
fn graymap_layout() {
    let map = SaliencyMap {
        h: 2,
        w: 3,
        values: vec![0.0, 0.5, 1.0, 1.0, 0.0, 0.25],
    };
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.pgm");
    write_pgm(&map, &p).unwrap();
    let bytes = std::fs::read(p).unwrap();
    assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
    assert_eq!(&bytes[bytes.len() - 6..], &[0, 128, 255, 255, 0, 64]);
}
