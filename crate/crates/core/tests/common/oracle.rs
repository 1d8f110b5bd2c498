//! Nested-loop reference implementations of the model head.

use dtn_core::config::{AttentionKind, DtnConfig};
use dtn_core::{Dtn, ForwardOptions};
use dtn_tensor::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

pub fn get<'a>(m: &'a Dtn<f64>, name: &str) -> &'a [f64] {
    m.params.get(name).unwrap().data()
}

pub fn bn_eval(m: &Dtn<f64>, prefix: &str, x: &[f64], hw: usize) -> Vec<f64> {
    let mean = get(m, &format!("{prefix}.running_mean"));
    let var = get(m, &format!("{prefix}.running_var"));
    let gamma = get(m, &format!("{prefix}.gamma"));
    let beta = get(m, &format!("{prefix}.beta"));
    x.iter()
        .enumerate()
        .map(|(i, v)| {
            let ch = i / hw;
            (v - mean[ch]) / (var[ch] + 1e-5).sqrt() * gamma[ch] + beta[ch]
        })
        .collect()
}

pub fn conv1x1(m: &Dtn<f64>, prefix: &str, x: &[f64], ci: usize, hw: usize) -> Vec<f64> {
    let w = get(m, &format!("{prefix}.w"));
    let b = get(m, &format!("{prefix}.b"));
    let co = b.len();
    let mut out = vec![0.0; co * hw];
    for o in 0..co {
        for p in 0..hw {
            let mut s = b[o];
            for i in 0..ci {
                s += w[o * ci + i] * x[i * hw + p];
            }
            out[o * hw + p] = s;
        }
    }
    out
}

pub fn conv3x3(m: &Dtn<f64>, prefix: &str, x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let k = get(m, &format!("{prefix}.w"));
    let b = get(m, &format!("{prefix}.b"));
    let mut out = vec![0.0; c * h * w];
    for o in 0..c {
        for y in 0..h {
            for xx in 0..w {
                let mut s = b[o];
                for i in 0..c {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (sy, sx) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            s += k[((o * c + i) * 3 + ky) * 3 + kx] * x[(i * h + sy as usize) * w + sx as usize];
                        }
                    }
                }
                out[(o * h + y) * w + xx] = s;
            }
        }
    }
    out
}

/// Multi-head attention of block `j` followed by the aggregation matrix, on the
/// normalized input `xb[c×hw]`.
pub fn naive_agg(m: &Dtn<f64>, j: usize, xb: &[f64], scale: Option<f64>) -> Vec<f64> {
    let cfg = &m.config;
    let c = cfg.channels();
    let (h, w) = cfg.feature_hw();
    let hw = h * w;
    let (d, cd) = (cfg.heads, cfg.head_dim());
    let pre = format!("levt.block{j}");
    let (wq, wk, wv) = (
        get(m, &format!("{pre}.wq")),
        get(m, &format!("{pre}.wk")),
        get(m, &format!("{pre}.wv")),
    );
    let mut cat = vec![0.0; hw * c];
    for i in 0..d {
        let gate = match (scale, m.variant.attention_kind) {
            (Some(s), _) => s,
            (None, AttentionKind::Mas) => sig(get(m, &format!("{pre}.theta"))[i]),
            _ => 1.0,
        };
        let tok = |p: usize, k: usize| xb[(i * cd + k) * hw + p];
        let project = |wt: &[f64]| -> Vec<Vec<f64>> {
            (0..hw)
                .map(|p| {
                    (0..cd)
                        .map(|kk| (0..cd).map(|k| tok(p, k) * wt[(i * cd + k) * cd + kk]).sum())
                        .collect()
                })
                .collect()
        };
        let (q, k, v) = (project(wq), project(wk), project(wv));
        for p in 0..hw {
            let logits: Vec<f64> = (0..hw)
                .map(|r| {
                    let dot: f64 = (0..cd).map(|t| q[p][t] * k[r][t]).sum();
                    gate * dot / (cd as f64).sqrt()
                })
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for t in 0..cd {
                cat[p * c + i * cd + t] = (0..hw).map(|r| e[r] / z * v[r][t]).sum();
            }
        }
    }
    let wg = get(m, &format!("{pre}.wglo"));
    let mut agg = vec![0.0; c * hw];
    for p in 0..hw {
        for o in 0..c {
            agg[o * hw + p] = (0..c).map(|i| cat[p * c + i] * wg[i * c + o]).sum();
        }
    }
    agg
}

/// Per-sample loop implementation of everything after the backbone in eval mode.
/// `scale` overrides every head's gate; `None` uses σ(θ) for MAS and 1 otherwise.
pub fn naive_head(m: &Dtn<f64>, x_loc: &[f64], scale: Option<f64>) -> [f64; 2] {
    let cfg = &m.config;
    let c = cfg.channels();
    let (h, w) = cfg.feature_hw();
    let hw = h * w;
    let mut x = x_loc.to_vec();
    if m.variant.use_moe {
        let mid = c / 4;
        let mut best = vec![f64::NEG_INFINITY; hw];
        for e in 0..cfg.experts {
            let hid: Vec<f64> = conv1x1(m, &format!("moe.expert{e}.conv1"), &x, c, hw)
                .into_iter()
                .map(|v| v.max(0.0))
                .collect();
            let out = conv1x1(m, &format!("moe.expert{e}.conv2"), &hid, mid, hw);
            let gate = if m.variant.mas_in_moe {
                sig(get(m, "moe.theta")[e])
            } else {
                1.0
            };
            for p in 0..hw {
                best[p] = best[p].max(gate * sig(out[p]));
            }
        }
        for (i, v) in x.iter_mut().enumerate() {
            *v *= sig(best[i % hw]);
        }
    }
    if m.variant.use_levt {
        let pos = get(m, "levt.pos");
        x.iter_mut().zip(pos).for_each(|(v, p)| *v += p);
        for j in 0..cfg.depth {
            let pre = format!("levt.block{j}");
            let xb = bn_eval(m, &format!("{pre}.bn1"), &x, hw);
            let agg = naive_agg(m, j, &xb, scale);
            let lc = conv3x3(m, &format!("{pre}.lc"), &agg, c, h, w);
            let x_lc: Vec<f64> = lc.iter().zip(&agg).map(|(a, b)| a + b).collect();
            let mb = bn_eval(m, &format!("{pre}.bn2"), &x_lc, hw);
            let hidden = cfg.mlp_ratio * c;
            let m1: Vec<f64> = conv1x1(m, &format!("{pre}.mlp1"), &mb, c, hw)
                .into_iter()
                .map(gelu)
                .collect();
            let m2 = conv1x1(m, &format!("{pre}.mlp2"), &m1, hidden, hw);
            x = m2.iter().zip(&x_lc).map(|(a, b)| a + b).collect();
        }
    }
    let feat: Vec<f64> = (0..c)
        .map(|ch| x[ch * hw..(ch + 1) * hw].iter().sum::<f64>() / hw as f64)
        .collect();
    let (cw, cb) = (get(m, "cls.w"), get(m, "cls.b"));
    let mut out = [cb[0], cb[1]];
    for (ch, f) in feat.iter().enumerate() {
        out[0] += f * cw[ch * 2];
        out[1] += f * cw[ch * 2 + 1];
    }
    out
}

pub fn random_xloc(seed: u64, n: usize, cfg: &DtnConfig) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = cfg.feature_hw();
    Tensor::from_fn(&[n, cfg.channels(), h, w], |_| rng.gen_range(-1.0..1.5))
}

pub fn head_logits(m: &Dtn<f64>, x_loc: &Tensor<f64>, opts: &mut ForwardOptions<'_>) -> Vec<f64> {
    let g = Graph::no_grad();
    let bound = m.params.bind(&g).unwrap();
    let x = g.constant(x_loc.clone()).unwrap();
    opts.check_contracts = true;
    let out = m.forward_from_backbone(&g, &bound, x, opts).unwrap();
    g.value(out.logits).unwrap().to_f64_vec()
}

pub fn oracle_logits(m: &Dtn<f64>, x_loc: &Tensor<f64>, scale: Option<f64>) -> Vec<f64> {
    let per = x_loc.numel() / x_loc.shape()[0];
    x_loc.data().chunks(per).flat_map(|s| naive_head(m, s, scale)).collect()
}
