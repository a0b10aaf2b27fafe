use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{grad_check, Tape, Tensor, Var};

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn store_names_sorted_and_unique() {
    let mut s = ParamStore::new(1);
    s.zeros("b.x", &[2]).unwrap();
    s.zeros("a.y", &[3]).unwrap();
    s.zeros("a.x", &[1]).unwrap();
    let names: Vec<_> = s.ids().map(|id| s.name(id).to_string()).collect();
    assert_eq!(names, ["a.x", "a.y", "b.x"]);
    assert!(matches!(s.zeros("a.y", &[3]), Err(Error::DuplicateParam(_))));
    let prefixed: Vec<_> = s.ids_with_prefix("a.").map(|id| s.name(id).to_string()).collect();
    assert_eq!(prefixed, ["a.x", "a.y"]);
    assert_eq!(s.count_with_prefix("a."), 4);
}

#[test]
fn init_depends_on_name_not_order() {
    let mut a = ParamStore::new(7);
    let mut b = ParamStore::new(7);
    let la = Linear::new(&mut a, "first", 5, 3).unwrap();
    Linear::new(&mut a, "second", 4, 4).unwrap();
    Linear::new(&mut b, "second", 4, 4).unwrap();
    let lb = Linear::new(&mut b, "first", 5, 3).unwrap();
    assert_eq!(a.value(la.w), b.value(lb.w));
    let bound = 1.0 / 5f64.sqrt();
    assert!(a.value(la.w).data().iter().all(|x| x.abs() < bound));
    assert!(a.value(la.b).data().iter().all(|&x| x == 0.0));
    let mut c = ParamStore::new(8);
    let lc = Linear::new(&mut c, "first", 5, 3).unwrap();
    assert_ne!(a.value(la.w), c.value(lc.w));
}

#[test]
fn linear_flop_count() {
    let mut s = ParamStore::new(0);
    let l = Linear::new(&mut s, "l", 64, 64).unwrap();
    assert_eq!(l.flops(40), 327_680);
}

#[test]
fn single_key_attention_returns_value() {
    let tape = Tape::new();
    let q = tape.constant(Tensor::matrix(1, 4, vec![0.3, -1.0, 2.0, 0.1]).unwrap());
    let k = tape.constant(Tensor::matrix(1, 4, vec![1.0, 2.0, -3.0, 0.5]).unwrap());
    let v = tape.constant(Tensor::matrix(1, 4, vec![9.0, -8.0, 7.0, 6.5]).unwrap());
    let out = Var::attention(&q, &k, &v, 2, None).unwrap();
    assert!(out.value().max_abs_diff(&v.value()) < 1e-12);

    // Two identical keys and values.
    let k2 = Var::concat(&[k, k], 0).unwrap();
    let v2 = Var::concat(&[v, v], 0).unwrap();
    let out = Var::attention(&q, &k2, &v2, 1, None).unwrap();
    assert!(out.value().max_abs_diff(&v.value()) < 1e-12);
}

#[test]
fn attention_rows_are_convex_weights() {
    // With all-ones values every output entry equals the row's weight sum.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let tape = Tape::new();
    let q = tape.constant(rand_tensor(&mut rng, &[5, 8]));
    let k = tape.constant(rand_tensor(&mut rng, &[7, 8]).map(|x| 4.0 * x));
    let v = tape.constant(Tensor::filled(&[7, 8], 1.0));
    let out = Var::attention(&q, &k, &v, 2, None).unwrap();
    assert!(out.value().data().iter().all(|x| (x - 1.0).abs() < 1e-10));
}

#[test]
fn masked_keys_get_no_weight() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new(2);
    let mha = MultiHeadAttention::new(&mut store, "mha", 8, 2).unwrap();
    let q = rand_tensor(&mut rng, &[3, 8]);
    let kv = rand_tensor(&mut rng, &[4, 8]);
    let mut kv_changed = kv.clone();
    for c in 0..8 {
        kv_changed.data_mut()[3 * 8 + c] += 5.0;
    }
    let mask: Vec<bool> = (0..12).map(|i| i % 4 != 3).collect();
    let run = |kv: &Tensor| {
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &store, false);
        let out = mha
            .forward(&cx, &tape.constant(q.clone()), &tape.constant(kv.clone()), Some(&mask))
            .unwrap();
        out.to_tensor()
    };
    assert_eq!(run(&kv), run(&kv_changed));
    let tape = Tape::new();
    let cx = Ctx::new(&tape, &store, false);
    let bad = mha.forward(
        &cx,
        &tape.constant(q.clone()),
        &tape.constant(kv.clone()),
        Some(&mask[..5]),
    );
    assert!(matches!(bad, Err(Error::Shape { .. })));
}

#[test]
fn heads_must_divide_width() {
    let mut s = ParamStore::new(0);
    assert!(matches!(
        AttentionBlock::new(&mut s, "blk", 10, 3, 20),
        Err(Error::Invalid(_))
    ));
}

#[test]
fn block_preserves_query_shape_and_grad_checks() {
    let mut store = ParamStore::new(5);
    let blk = AttentionBlock::new(&mut store, "blk", 8, 2, 16).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let ctx_tokens = rand_tensor(&mut rng, &[6, 8]);
    let x = rand_tensor(&mut rng, &[3, 8]);
    {
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &store, false);
        let c = tape.constant(ctx_tokens.clone());
        let out = blk.forward(&cx, &tape.constant(x.clone()), Some(&c), None).unwrap();
        assert_eq!(out.shape(), vec![3, 8]);
        let wrong = tape.constant(Tensor::zeros(&[6, 5]));
        assert!(blk.forward(&cx, &tape.constant(x.clone()), Some(&wrong), None).is_err());
    }
    let err = grad_check(
        |tape, xv| {
            let cx = Ctx::new(tape, &store, false);
            let c = tape.constant(ctx_tokens.clone());
            let out = blk.forward(&cx, &xv, Some(&c), None).expect("block forward");
            Ok(out.mul(&out)?.mean())
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "relative error {err}");
}

#[test]
fn param_gradients_flow_through_ctx() {
    let mut store = ParamStore::new(1);
    let lin = Linear::new(&mut store, "lin", 3, 2).unwrap();
    let x = Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
    let tape = Tape::new();
    let cx = Ctx::new(&tape, &store, true);
    let y = lin.forward(&cx, &tape.constant(x)).unwrap().sum();
    let g = tape.backward(y).unwrap();
    let grads = cx.param_grads(&g);
    drop(cx);
    for (id, gr) in &grads {
        store.accumulate(*id, gr).unwrap();
    }
    // d sum(xW + b)/dW[i][j] = x[i]; d/db = 1.
    assert_eq!(store.grad(lin.w).unwrap(), &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
    assert_eq!(store.grad(lin.b).unwrap(), &[1.0, 1.0]);
}

fn quadratic_step(w0: f64, cfg: AdamWConfig, grad: Option<f64>) -> Result<f64> {
    let mut store = ParamStore::new(0);
    let id = store.insert("w", Tensor::vector(vec![w0])).unwrap();
    let mut opt = AdamW::new(cfg, &store)?;
    if let Some(g) = grad {
        store.accumulate(id, &[g])?;
    }
    opt.step(&mut store)?;
    assert!(store.grad(id).is_none(), "grads cleared");
    assert_eq!(opt.step, 1);
    Ok(store.value(id).data()[0])
}

#[test]
fn adamw_descends_on_square() {
    let cfg = AdamWConfig {
        lr: 1e-3,
        weight_decay: 0.0,
        ..AdamWConfig::default()
    };
    // f(w) = w^2 at w = 1 has gradient 2.
    let w = quadratic_step(1.0, cfg, Some(2.0)).unwrap();
    assert!(w < 1.0);
}

#[test]
fn adamw_zero_grad_cases() {
    let cfg = AdamWConfig {
        lr: 0.1,
        weight_decay: 0.0,
        ..AdamWConfig::default()
    };
    assert_eq!(quadratic_step(0.7, cfg.clone(), Some(0.0)).unwrap(), 0.7);
    let cfg = AdamWConfig {
        weight_decay: 0.05,
        ..cfg
    };
    let w = quadratic_step(0.7, cfg, Some(0.0)).unwrap();
    // Step 0 of the schedule has multiplier 1.
    assert!((w - (0.7 - 0.1 * 0.05 * 0.7)).abs() < 1e-16);
}

#[test]
fn adamw_rejects_missing_and_nonfinite_grads() {
    let cfg = AdamWConfig::default();
    assert!(matches!(quadratic_step(1.0, cfg.clone(), None), Err(Error::MissingGrad(n)) if n == "w"));
    assert!(matches!(quadratic_step(1.0, cfg, Some(f64::NAN)), Err(Error::NonFiniteGrad(n)) if n == "w"));
}

#[test]
fn cosine_schedule_bounds() {
    let (h, r) = (500, 0.005);
    assert_eq!(cosine_multiplier(0, h, r), 1.0);
    for s in 0..=h + 10 {
        let m = cosine_multiplier(s, h, r);
        assert!(m > 0.0 && m <= 1.0);
        assert!(m <= cosine_multiplier(s.saturating_sub(1), h, r));
    }
    // Direct evaluation of the cosine formula at the horizon: r + (1 - r)(1 + cos pi)/2 = r.
    assert!(cosine_multiplier(h, h, r) <= 0.01);
    assert!((cosine_multiplier(h / 2, h, r) - (r + (1.0 - r) * 0.5)).abs() < 1e-12);
}

fn draw(theta: f64, tau: f64, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let tape = Tape::new();
    let t = tape.param(Tensor::scalar(theta));
    let s = gumbel_binary(&t, tau, rng).unwrap();
    (s.pi.item(), s.soft)
}

#[test]
fn gumbel_mean_tracks_theta() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 10_000;
    let mut sum = 0.0;
    for _ in 0..n {
        let (pi, _) = draw(0.5, 1.0, &mut rng);
        assert!(pi == 0.0 || pi == 1.0);
        sum += pi;
    }
    let mean = sum / n as f64;
    assert!((0.47..=0.53).contains(&mean), "mean {mean}");
}

#[test]
fn gumbel_saturates() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..1000 {
        assert_eq!(draw(1.0 - 1e-9, 1.0, &mut rng).0, 1.0);
        assert_eq!(draw(1e-9, 1.0, &mut rng).0, 0.0);
    }
}

#[test]
fn gumbel_rejects_bad_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let tape = Tape::new();
    for bad in [-0.1, 1.1, f64::NAN] {
        let t = tape.constant(Tensor::scalar(bad));
        assert!(gumbel_binary(&t, 1.0, &mut rng).is_err());
    }
    let t = tape.constant(Tensor::scalar(0.5));
    assert!(gumbel_binary(&t, 0.0, &mut rng).is_err());
}

#[test]
fn gumbel_soft_expectation_increases_with_logit() {
    // Common random numbers: the same noise stream for both logit values.
    let expect = |logit: f64| {
        let theta = crate::autodiff::sigmoid(logit);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        (0..20_000).map(|_| draw(theta, 1.0, &mut rng).1).sum::<f64>() / 20_000.0
    };
    let d = 0.05;
    let slope = (expect(0.3 + d) - expect(0.3 - d)) / (2.0 * d);
    assert!(slope > 0.0, "slope {slope}");
}

#[test]
fn gumbel_backward_reaches_theta() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let tape = Tape::new();
        let t = tape.param(Tensor::scalar(0.4));
        let s = gumbel_binary(&t, 1.0, &mut rng).unwrap();
        let g = tape.backward(s.pi).unwrap();
        // d soft / d theta = soft (1 - soft) / (theta (1 - theta)) > 0.
        let expected = s.soft * (1.0 - s.soft) / (0.4 * 0.6);
        let got = g.wrt(t).unwrap()[0];
        assert!((got - expected).abs() < 1e-9 * expected.max(1.0), "{got} vs {expected}");
    }
}

#[test]
fn snapshot_round_trip_is_bit_exact() {
    let mut store = ParamStore::new(3);
    let awkward = vec![
        0.1,
        1.0 / 3.0,
        -2.5e-300,
        1.7976931348623157e308,
        5e-324,
        -0.0,
        std::f64::consts::PI,
    ];
    store.insert("awk", Tensor::vector(awkward.clone())).unwrap();
    AttentionBlock::new(&mut store, "blk", 8, 2, 16).unwrap();
    let json = store.to_json().unwrap();
    let mut fresh = ParamStore::new(99);
    fresh.insert("awk", Tensor::vector(vec![0.0; awkward.len()])).unwrap();
    AttentionBlock::new(&mut fresh, "blk", 8, 2, 16).unwrap();
    fresh.load_json(&json).unwrap();
    for id in store.ids() {
        let a: Vec<u64> = store.value(id).data().iter().map(|x| x.to_bits()).collect();
        let b: Vec<u64> = fresh
            .value(fresh.id(store.name(id)).unwrap())
            .data()
            .iter()
            .map(|x| x.to_bits())
            .collect();
        assert_eq!(a, b, "{}", store.name(id));
    }
    let mut other = ParamStore::new(0);
    other.zeros("awk", &[3]).unwrap();
    assert!(other.load_json(&json).is_err());
}
