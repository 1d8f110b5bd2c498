use dtn_tensor::{ModelParams, Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::{AttentionKind, CtcSpace, DtnConfig, VariantSpec};

enum Fill {
    /// N(0, std²).
    Normal(f64),
    Const(f64),
    /// Row k is the k-th basis vector.
    Identity,
}

/// Each tensor draws from its own stream keyed by name, so variants that share a tensor
/// name also share its initial values.
fn stream_id(name: &str) -> u64 {
    // FNV-1a
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

fn make<T: Scalar>(seed: u64, name: &str, shape: &[usize], fill: Fill) -> Tensor<T> {
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = match fill {
        Fill::Normal(std) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream_id(name));
            (0..numel)
                .map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                .collect()
        }
        Fill::Const(v) => vec![v; numel],
        Fill::Identity => (0..numel)
            .map(|i| if i / shape[1] == i % shape[1] { 1.0 } else { 0.0 })
            .collect(),
    };
    Tensor::new(shape, data.into_iter().map(T::of).collect()).expect("shape matches data")
}

struct Builder<'a, T> {
    seed: u64,
    params: &'a mut ModelParams<T>,
}

impl<T: Scalar> Builder<'_, T> {
    fn param(&mut self, name: String, shape: &[usize], fill: Fill) {
        let t = make(self.seed, &name, shape, fill);
        self.params.insert_param(name, t);
    }

    fn he(&mut self, name: String, shape: &[usize], fan_in: usize) {
        self.param(name, shape, Fill::Normal((2.0 / fan_in as f64).sqrt()));
    }

    fn conv(&mut self, prefix: &str, c_out: usize, c_in: usize, k: usize) {
        self.he(format!("{prefix}.w"), &[c_out, c_in, k, k], c_in * k * k);
        self.param(format!("{prefix}.b"), &[c_out], Fill::Const(0.0));
    }

    fn bn(&mut self, prefix: &str, c: usize) {
        self.param(format!("{prefix}.gamma"), &[c], Fill::Const(1.0));
        self.param(format!("{prefix}.beta"), &[c], Fill::Const(0.0));
        self.params
            .insert_buffer(format!("{prefix}.running_mean"), Tensor::zeros(&[c]));
        self.params
            .insert_buffer(format!("{prefix}.running_var"), Tensor::ones(&[c]));
    }
}

/// Initial parameters. Convolution and linear weights are N(0, 2/fan_in), scale factors
/// start at 0 (gate 0.5), the positional embedding at N(0, 0.02²), biases at 0, and the
/// class centers at the basis vectors.
pub fn init_params<T: Scalar>(config: &DtnConfig, variant: &VariantSpec) -> ModelParams<T> {
    let mut params = ModelParams::new();
    let mut b = Builder {
        seed: config.seed,
        params: &mut params,
    };
    let mut c_in = config.in_channels;
    for (s, &c_out) in config.channel_plan.iter().enumerate() {
        b.conv(&format!("backbone.{s}.conv"), c_out, c_in, 3);
        b.bn(&format!("backbone.{s}.bn"), c_out);
        c_in = c_out;
    }
    let c = config.channels();
    let (h, w) = config.feature_hw();
    if variant.use_moe {
        let mid = c / 4;
        for i in 0..config.experts {
            b.conv(&format!("moe.expert{i}.conv1"), mid, c, 1);
            b.conv(&format!("moe.expert{i}.conv2"), 1, mid, 1);
        }
        if variant.mas_in_moe {
            b.param("moe.theta".into(), &[config.experts], Fill::Const(0.0));
        }
    }
    if variant.use_levt {
        let (d, cd) = (config.heads, config.head_dim());
        b.param("levt.pos".into(), &[c, h, w], Fill::Normal(0.02));
        for j in 0..config.depth {
            let p = format!("levt.block{j}");
            b.bn(&format!("{p}.bn1"), c);
            for m in ["wq", "wk", "wv"] {
                b.he(format!("{p}.{m}"), &[d, cd, cd], cd);
            }
            match variant.attention_kind {
                AttentionKind::Mas => b.param(format!("{p}.theta"), &[d], Fill::Const(0.0)),
                AttentionKind::Reattention => b.param(format!("{p}.mix"), &[d, d], Fill::Identity),
                AttentionKind::Vanilla => {}
            }
            b.he(format!("{p}.wglo"), &[c, c], c);
            b.conv(&format!("{p}.lc"), c, c, 3);
            b.bn(&format!("{p}.bn2"), c);
            let hidden = config.mlp_ratio * c;
            b.conv(&format!("{p}.mlp1"), hidden, c, 1);
            b.conv(&format!("{p}.mlp2"), c, hidden, 1);
        }
    }
    b.he("cls.w".into(), &[c, 2], c);
    b.param("cls.b".into(), &[2], Fill::Const(0.0));
    let center_dim = match variant.ctc_dimensionality {
        CtcSpace::Logits => 2,
        CtcSpace::Features => c,
    };
    b.param("centers".into(), &[2, center_dim], Fill::Identity);
    params
}
