use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::Tape;

const DIM: usize = 32;
const N: usize = 8;

fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect(),
    )
    .unwrap()
}

fn planner(store: &mut ParamStore) -> Planner {
    Planner::new(store, "p", 4, DIM, 4, 32, N, 5).unwrap()
}

fn plan(p: &Planner, store: &ParamStore, f: &Tensor) -> Tensor {
    let tape = Tape::new();
    let cx = Ctx::new(&tape, store, false);
    p.plan(&cx, &cx.constant(f.clone())).unwrap().to_tensor()
}

fn wp(points: &[[f64; 2]]) -> Waypoints {
    Waypoints::new(points.to_vec()).unwrap()
}

#[test]
fn always_five_finite_clamped_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new(1);
    let p = planner(&mut store);
    for scale in [1.0, 1e3, 1e8] {
        let out = plan(&p, &store, &rand_tensor(&mut rng, N, DIM, scale));
        let w = Waypoints::from_tensor(&out).unwrap();
        assert_eq!(w.len(), 5);
        assert!(w
            .points
            .iter()
            .flatten()
            .all(|v| v.is_finite() && v.abs() <= WAYPOINT_CLAMP));
    }
}

#[test]
fn zero_fusion_is_bitwise_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new(2);
    let p = planner(&mut store);
    let f = rand_tensor(&mut rng, N, DIM, 1.0);
    let f2 = rand_tensor(&mut rng, N, DIM, 1.0);
    let fused = f.zip_map(&f2, |a, b| a + 0.0 * b).unwrap();
    assert_eq!(plan(&p, &store, &f), plan(&p, &store, &fused));
}

#[test]
fn fusion_weight_changes_output_continuously() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new(3);
    let p = planner(&mut store);
    let f = rand_tensor(&mut rng, N, DIM, 1.0);
    let f2 = rand_tensor(&mut rng, N, DIM, 1.0);
    let at = |theta: f64| plan(&p, &store, &f.zip_map(&f2, |a, b| a + theta * b).unwrap());
    let base = at(0.5);
    let mut prev = f64::INFINITY;
    for eps in [1e-2, 1e-3, 1e-4] {
        let d = at(0.5 + eps).max_abs_diff(&base);
        assert!(d < prev);
        prev = d;
    }
    assert!(prev < 1e-2);
}

#[test]
fn outputs_are_cumulative_offsets() {
    // Zero the head weights and set its bias: every step moves by the bias.
    let mut store = ParamStore::new(4);
    let p = planner(&mut store);
    *store.value_mut(p.head.w) = Tensor::zeros(&[DIM, 2]);
    *store.value_mut(p.head.b) = Tensor::vector(vec![1.5, -0.5]);
    let out = plan(&p, &store, &Tensor::filled(&[N, DIM], 0.1));
    for i in 0..5 {
        let k = (i + 1) as f64;
        assert_eq!(out.row(i), [1.5 * k, -0.5 * k]);
    }
}

#[test]
fn trajectory_loss_examples() {
    let a = wp(&[[1.0, 2.0], [3.0, -1.0], [0.5, 0.5], [2.0, 2.0], [9.0, 1.0]]);
    assert_eq!(trajectory_loss(&a, &a).unwrap(), 0.0);
    let ones = wp(&[[1.0, 1.0]; 5]);
    let zeros = wp(&[[0.0, 0.0]; 5]);
    assert_eq!(trajectory_loss(&ones, &zeros).unwrap(), 1.0);
    let twice = wp(&[[2.0, 2.0]; 5]);
    assert_eq!(trajectory_loss(&twice, &zeros).unwrap(), 2.0);
    let short = wp(&[[0.0, 0.0]; 4]);
    assert!(trajectory_loss(&short, &zeros).is_err());
}

#[test]
fn loss_var_matches_scalar_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = rand_tensor(&mut rng, 5, 2, 3.0);
    let b = rand_tensor(&mut rng, 5, 2, 3.0);
    let tape = Tape::new();
    let l = trajectory_loss_var(&tape.constant(a.clone()), &tape.constant(b.clone())).unwrap();
    let expected = trajectory_loss(
        &Waypoints::from_tensor(&a).unwrap(),
        &Waypoints::from_tensor(&b).unwrap(),
    )
    .unwrap();
    assert!((l.item() - expected).abs() < 1e-12);
}

#[test]
fn gradients_reach_parameters_and_fusion_weight() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::new(6);
    let p = planner(&mut store);
    let tape = Tape::new();
    let cx = Ctx::new(&tape, &store, true);
    let f = cx.constant(rand_tensor(&mut rng, N, DIM, 1.0));
    let f2 = cx.constant(rand_tensor(&mut rng, N, DIM, 1.0));
    let theta = tape.param(Tensor::filled(&[1, 1], 0.4));
    let fused = f.add(&f2.mul(&theta).unwrap()).unwrap();
    let out = p.plan(&cx, &fused).unwrap();
    let gt = cx.constant(rand_tensor(&mut rng, 5, 2, 5.0));
    let grads = tape.backward(trajectory_loss_var(&out, &gt).unwrap()).unwrap();
    assert!(grads.wrt_or_zero(theta)[0].abs() > 0.0);
    let pg = cx.param_grads(&grads);
    let head = pg.iter().find(|(id, _)| *id == p.head.w).unwrap();
    assert!(head.1.iter().any(|g| g.abs() > 0.0));
}

#[test]
fn shape_mismatch_is_an_error() {
    let mut store = ParamStore::new(7);
    let p = planner(&mut store);
    let tape = Tape::new();
    let cx = Ctx::new(&tape, &store, false);
    let bad = cx.constant(Tensor::zeros(&[N + 1, DIM]));
    assert!(matches!(p.plan(&cx, &bad), Err(Error::Shape { .. })));
}
