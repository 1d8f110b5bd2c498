#![allow(dead_code)]

use dtn_core::config::{DtnConfig, LossWeights, NoiseKind, NoiseSpec, VariantSpec};
use dtn_core::losses::{dsd_loss, DsdInputs};
use dtn_core::model::stack_images;
use dtn_core::{Dtn, ForwardOptions};
use dtn_tensor::gradcheck::relative_error;
use dtn_tensor::{Graph, ModelParams, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// c=8 on a 4×4 map with two blocks, two heads and two experts.
pub fn toy_config(seed: u64) -> DtnConfig {
    DtnConfig {
        in_channels: 3,
        image_h: 8,
        image_w: 8,
        channel_plan: vec![8],
        experts: 2,
        depth: 2,
        heads: 2,
        mlp_ratio: 2,
        noise: NoiseSpec {
            kind: NoiseKind::None,
            scale: 0.0,
        },
        seed,
    }
}

pub fn random_images(seed: u64, n: usize, c: usize, h: usize, w: usize) -> Vec<Tensor<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Tensor::from_fn(&[c, h, w], |_| rng.gen_range(0.0f32..1.0)))
        .collect()
}

/// Moves every tensor away from its structured initial value so oracles cannot pass by
/// coincidence (zero biases, unit BN, zero θ, identity centers).
pub fn scramble(params: &mut ModelParams<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x05c4_ab1e);
    for (name, t) in params.iter_mut() {
        let fresh: Vec<f64> = t
            .data()
            .iter()
            .map(|&v| {
                if name.ends_with("running_var") || name.ends_with("gamma") {
                    rng.gen_range(0.6..1.4)
                } else if name.ends_with("running_mean") || name.ends_with(".b") || name.ends_with("beta") {
                    rng.gen_range(-0.2..0.2)
                } else if name.ends_with("theta") {
                    rng.gen_range(-1.5..1.5)
                } else if name == "centers" {
                    v + rng.gen_range(-0.3..0.3)
                } else {
                    v
                }
            })
            .collect();
        t.data_mut().copy_from_slice(&fresh);
    }
}

pub fn toy_model(seed: u64, variant: VariantSpec) -> Dtn<f64> {
    let mut m = Dtn::<f64>::new(toy_config(seed), variant).unwrap();
    scramble(&mut m.params, seed);
    m
}

/// Train-mode DSD loss on a fixed batch with fixed teacher logits.
fn batch_loss(
    model: &Dtn<f64>,
    images: &[Tensor<f32>],
    teacher: &Tensor<f64>,
    g: &Graph<f64>,
) -> (dtn_tensor::Var, dtn_tensor::BoundParams) {
    let bound = model.params.bind(g).unwrap();
    let refs: Vec<&Tensor<f32>> = images.iter().collect();
    let x = g.constant(stack_images(&refs).unwrap()).unwrap();
    let mut opts = ForwardOptions::train(None);
    let out = model.forward(g, &bound, x, &mut opts).unwrap();
    let n = images.len();
    let labels: Vec<f64> = (0..n)
        .flat_map(|i| if i % 2 == 0 { [1.0, 0.0] } else { [0.0, 1.0] })
        .collect();
    let inputs = DsdInputs {
        labels: g.constant(Tensor::from_f64(&[n, 2], &labels).unwrap()).unwrap(),
        student_logits: out.logits,
        teacher_logits: Some(g.constant(teacher.clone()).unwrap()),
        ctc_input: out.logits,
        centers: bound.get("centers").unwrap(),
    };
    let (loss, _) = dsd_loss(g, inputs, &LossWeights::default()).unwrap();
    (loss, bound)
}

/// Norm-wise relative error between backprop and central differences over one
/// randomly chosen coordinate of every trainable tensor of the full model.
pub fn full_model_gradcheck(seed: u64, variant: VariantSpec, h: f64) -> f64 {
    let model = toy_model(seed, variant);
    let c = &model.config;
    let images = random_images(seed, 4, c.in_channels, c.image_h, c.image_w);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e57);
    let teacher = Tensor::from_fn(&[4, 2], |_| rng.gen_range(-2.0..2.0));

    let g = Graph::new();
    let (loss, bound) = batch_loss(&model, &images, &teacher, &g);
    let grads = g.backward(loss).unwrap();

    let coords: Vec<(String, usize)> = model
        .params
        .iter()
        .filter(|(_, t)| t.requires_grad())
        .map(|(n, t)| (n.to_string(), rng.gen_range(0..t.numel())))
        .collect();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (name, i) in &coords {
        let var = bound.get(name).unwrap();
        analytic.push(grads.get(var).map_or(0.0, |g| g[*i]));
        let eval = |delta: f64| {
            let mut m = model.clone();
            m.params.get_mut(name).unwrap().data_mut()[*i] += delta;
            let g = Graph::no_grad();
            let (l, _) = batch_loss(&m, &images, &teacher, &g);
            let v = g.value(l).unwrap().data()[0];
            v
        };
        numeric.push((eval(h) - eval(-h)) / (2.0 * h));
    }
    relative_error(&analytic, &numeric)
}
pub mod oracle;
