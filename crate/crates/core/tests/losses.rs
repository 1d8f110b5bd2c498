use dtn_core::config::LossWeights;
use dtn_core::losses::{ce_from_probs, ce_loss, ctc_loss, dsd_loss, kd_loss, DsdInputs};
use dtn_tensor::gradcheck::check;
use dtn_tensor::{Graph, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, v).unwrap()
}

fn value(g: &Graph<f64>, v: Var) -> f64 {
    g.value(v).unwrap().data()[0]
}

#[test]
fn cross_entropy_examples() {
    let g = Graph::new();
    let p = g.constant(t(&[1, 2], &[0.1, 0.9])).unwrap();
    let y = g.constant(t(&[1, 2], &[0.0, 1.0])).unwrap();
    assert!((value(&g, ce_from_probs(&g, p, y).unwrap()) - 0.105361).abs() < 1e-6);
    let exact = g.constant(t(&[1, 2], &[0.0, 1.0])).unwrap();
    assert_eq!(value(&g, ce_from_probs(&g, exact, y).unwrap()), 0.0);
    // A zero true-class probability is clamped, not infinite.
    let wrong = g.constant(t(&[1, 2], &[1.0, 0.0])).unwrap();
    let v = value(&g, ce_from_probs(&g, wrong, y).unwrap());
    assert!((v - 1e-12f64.ln().abs()).abs() < 1e-9);
}

#[test]
fn center_loss_examples() {
    let g = Graph::new();
    let centers = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
    let y = g.constant(t(&[1, 2], &[0.0, 1.0])).unwrap();
    let pre = g.constant(t(&[1, 2], &[0.2, 0.8])).unwrap();
    let v = value(&g, ctc_loss(&g, pre, y, centers, 1e-8).unwrap());
    assert!((v - 0.035355).abs() < 1e-6);
    let at = g.constant(t(&[1, 2], &[0.0, 1.0])).unwrap();
    assert_eq!(value(&g, ctc_loss(&g, at, y, centers, 1e-8).unwrap()), 0.0);
}

#[test]
fn center_loss_falls_as_the_wrong_center_recedes() {
    // Same distance to the own center, growing distance to the other one.
    let g = Graph::new();
    let y = g.constant(t(&[1, 2], &[0.0, 1.0])).unwrap();
    let pre = g.constant(t(&[1, 2], &[0.3, 1.2])).unwrap();
    let mut last = f64::INFINITY;
    for k in 1..6 {
        let other = k as f64;
        let centers = g.constant(t(&[2, 2], &[other, -other, 0.0, 1.0])).unwrap();
        let v = value(&g, ctc_loss(&g, pre, y, centers, 1e-8).unwrap());
        assert!(v < last);
        last = v;
    }
}

#[test]
fn distillation_examples() {
    let g = Graph::new();
    let teacher = g.constant(t(&[1, 2], &[2.0, 0.0])).unwrap();
    let student = g.constant(t(&[1, 2], &[0.0, 0.0])).unwrap();
    let v = value(&g, kd_loss(&g, teacher, student, 1.0).unwrap());
    // KL([σ(2), σ(-2)] ‖ [½, ½]) in closed form.
    let (p, q) = (1.0 / (1.0 + (-2f64).exp()), 1.0 / (1.0 + 2f64.exp()));
    let want = p * (2.0 * p).ln() + q * (2.0 * q).ln();
    assert!((v - want).abs() < 1e-12);
    assert!((v - 0.327814).abs() < 1e-6);
    assert!(value(&g, kd_loss(&g, teacher, teacher, 3.0).unwrap()).abs() < 1e-15);
}

fn random_batch(rng: &mut ChaCha8Rng, n: usize) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>, Tensor<f64>) {
    let labels: Vec<f64> = (0..n)
        .flat_map(|_| if rng.gen_bool(0.5) { [1.0, 0.0] } else { [0.0, 1.0] })
        .collect();
    let student = Tensor::from_fn(&[n, 2], |_| rng.gen_range(-3.0..3.0));
    let teacher = Tensor::from_fn(&[n, 2], |_| rng.gen_range(-3.0..3.0));
    let centers = Tensor::from_fn(&[2, 2], |_| rng.gen_range(-1.0..1.0));
    (t(&[n, 2], &labels), student, teacher, centers)
}

#[test]
fn combined_loss_recomposes_exactly() {
    let w = LossWeights::default();
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (y, s, te, c) = random_batch(&mut rng, 5);
        let g = Graph::new();
        let (y, s, te, c) = (
            g.constant(y).unwrap(),
            g.variable(s).unwrap(),
            g.constant(te).unwrap(),
            g.variable(c).unwrap(),
        );
        let inputs = DsdInputs {
            labels: y,
            student_logits: s,
            teacher_logits: Some(te),
            ctc_input: s,
            centers: c,
        };
        let (total, comps) = dsd_loss(&g, inputs, &w).unwrap();
        let ce = value(&g, ce_loss(&g, s, y).unwrap());
        let ctc = value(&g, ctc_loss(&g, s, y, c, w.eps).unwrap());
        let kd = value(&g, kd_loss(&g, te, s, w.tau).unwrap());
        let want = 4.0 * ce + 0.4 * ctc + 0.6 * kd;
        assert!((value(&g, total) - want).abs() < 1e-12);
        assert_eq!(comps.total, value(&g, total));
        assert_eq!((comps.ce, comps.ctc, comps.kd), (ce, ctc, kd));

        let only_ce = LossWeights {
            alpha_ctc: 0.0,
            alpha_kd: 0.0,
            ..w
        };
        let (v, _) = dsd_loss(&g, inputs, &only_ce).unwrap();
        assert!((value(&g, v) - 4.0 * ce).abs() < 1e-12);
    }
}

#[test]
fn teacher_receives_no_gradient_and_centers_do() {
    let g = Graph::new();
    let teacher = g.variable(t(&[2, 2], &[1.0, -0.5, 0.3, 2.0])).unwrap();
    let student = g.variable(t(&[2, 2], &[0.2, 0.1, -1.0, 0.4])).unwrap();
    let centers = g.variable(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
    let y = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
    let inputs = DsdInputs {
        labels: y,
        student_logits: student,
        teacher_logits: Some(teacher),
        ctc_input: student,
        centers,
    };
    let (loss, _) = dsd_loss(&g, inputs, &LossWeights::default()).unwrap();
    let grads = g.backward(loss).unwrap();
    assert!(grads.get(teacher).is_none_or(|v| v.iter().all(|&x| x == 0.0)));
    assert!(grads.get(centers).unwrap().iter().any(|&x| x != 0.0));
    assert!(grads.get(student).unwrap().iter().any(|&x| x != 0.0));
}

#[test]
fn loss_gradients_match_finite_differences() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (y, s, te, c) = random_batch(&mut rng, 4);
        let tau = rng.gen_range(0.5..4.0);
        let yv = y.clone();
        let r = check(
            |g, v| {
                let y = g.constant(yv.clone())?;
                let inputs = DsdInputs {
                    labels: y,
                    student_logits: v[0],
                    teacher_logits: Some(g.constant(te.clone())?),
                    ctc_input: v[0],
                    centers: v[1],
                };
                let w = LossWeights {
                    tau,
                    ..LossWeights::default()
                };
                Ok(dsd_loss(g, inputs, &w)
                    .map_err(|e| match e {
                        dtn_core::DtnError::Tensor(t) => t,
                        other => panic!("{other}"),
                    })?
                    .0)
            },
            &[s, c],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_err() < 1e-4, "seed {seed}: {:?}", r.per_input);
    }
}

proptest! {
    #[test]
    fn losses_are_non_negative(
        s in proptest::collection::vec(-5.0f64..5.0, 6),
        te in proptest::collection::vec(-5.0f64..5.0, 6),
        c in proptest::collection::vec(-2.0f64..2.0, 4),
        tau in 0.2f64..5.0,
    ) {
        let g = Graph::new();
        let s = g.constant(t(&[3, 2], &s)).unwrap();
        let te = g.constant(t(&[3, 2], &te)).unwrap();
        let c = g.constant(t(&[2, 2], &c)).unwrap();
        let y = g.constant(t(&[3, 2], &[1.0, 0.0, 0.0, 1.0, 0.0, 1.0])).unwrap();
        prop_assert!(value(&g, ce_loss(&g, s, y).unwrap()) >= 0.0);
        prop_assert!(value(&g, ctc_loss(&g, s, y, c, 1e-8).unwrap()) >= 0.0);
        prop_assert!(value(&g, kd_loss(&g, te, s, tau).unwrap()) >= -1e-12);
    }
}
