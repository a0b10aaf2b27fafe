use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{Tape, Tensor};
use crate::nn::{AttentionBlock, Linear};

const DIM: usize = 64;
const N: usize = 40;

fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn model(store: &mut ParamStore, layers: usize) -> SlowModel {
    SlowModel::new(store, "slow", layers, DIM, 4, 256, N, 10, 2).unwrap()
}

fn reason(m: &SlowModel, store: &ParamStore, instr: &Tensor, slots: &[Tensor]) -> Result<Tensor> {
    let tape = Tape::new();
    let cx = Ctx::new(&tape, store, false);
    let snap: Vec<_> = slots.iter().map(|s| cx.constant(s.clone())).collect();
    m.reason(&cx, &cx.constant(instr.clone()), &snap).map(|v| v.to_tensor())
}

#[test]
fn output_shape_for_any_snapshot_length() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new(1);
    let m = model(&mut store, 2);
    let instr = rand_tensor(&mut rng, 2, DIM);
    let slots: Vec<_> = (0..10).map(|_| rand_tensor(&mut rng, N, DIM)).collect();
    for k in [1, 5, 10] {
        let out = reason(&m, &store, &instr, &slots[..k]).unwrap();
        assert_eq!(out.shape(), [N, DIM]);
        assert!(out.is_finite());
    }
}

#[test]
fn slot_order_matters() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new(2);
    let m = model(&mut store, 2);
    let instr = rand_tensor(&mut rng, 2, DIM);
    let slots: Vec<_> = (0..4).map(|_| rand_tensor(&mut rng, N, DIM)).collect();
    let mut permuted = slots.clone();
    permuted.swap(0, 3);
    let a = reason(&m, &store, &instr, &slots).unwrap();
    let b = reason(&m, &store, &instr, &permuted).unwrap();
    assert!(a.max_abs_diff(&b) > 1e-6);
}

#[test]
fn duplicated_slots_without_position_are_k_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new(3);
    let m = model(&mut store, 2);
    let pos = store.id("slow.slot_pos.table").unwrap();
    *store.value_mut(pos) = Tensor::zeros(&[10, DIM]);
    let frame = rand_tensor(&mut rng, N, DIM);
    let run = |k: usize| {
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &store, false);
        let snap = vec![cx.constant(frame.clone()); k];
        m.reason_inner(&cx, None, &snap).unwrap().to_tensor()
    };
    let base = run(1);
    for k in [2, 5, 10] {
        let out = run(k);
        assert!(out.max_abs_diff(&base) < 1e-9, "k={k}");
    }
}

#[test]
fn invalid_snapshots_are_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new(4);
    let m = model(&mut store, 1);
    let instr = rand_tensor(&mut rng, 2, DIM);
    assert!(matches!(reason(&m, &store, &instr, &[]), Err(Error::EmptySnapshot)));
    let bad = rand_tensor(&mut rng, N - 1, DIM);
    assert!(matches!(reason(&m, &store, &instr, &[bad]), Err(Error::Shape { .. })));
    let many: Vec<_> = (0..11).map(|_| rand_tensor(&mut rng, N, DIM)).collect();
    assert!(reason(&m, &store, &instr, &many).is_err());
}

#[test]
fn flop_counting_rules() {
    let mut store = ParamStore::new(5);
    let lin = Linear::new(&mut store, "lin", 64, 64).unwrap();
    assert_eq!(lin.flops(40), 327_680);

    let m6 = model(&mut store, 6);
    let mut s12 = ParamStore::new(5);
    let m12 = model(&mut s12, 12);
    let blocks = |m: &SlowModel, k: usize| m.flops(k) - m.readout.flops(N, 2 + k * N);
    for k in 1..=10 {
        assert_eq!(blocks(&m12, k), 2 * blocks(&m6, k));
        assert_eq!(m6.flops(k), m6.flops(k));
    }
    for k in 1..10 {
        assert!(m6.flops(k + 1) > m6.flops(k));
    }
    assert!(m12.flops(10) > m6.flops(10));
    // An independent count for one block: q/k/v/o projections, scores and
    // mixing, then the two feed-forward projections.
    let b = AttentionBlock::new(&mut store, "b", DIM, 4, 256).unwrap();
    let (nq, nkv) = (40u64, 82u64);
    let d = DIM as u64;
    let expected = 2 * nq * d * d * 2 + 2 * nkv * d * d * 2 + 4 * nq * nkv * d + 2 * nq * d * 256 * 2;
    assert_eq!(b.flops(40, 82), expected);
}

#[test]
fn gradients_reach_every_slot() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::new(6);
    let m = model(&mut store, 1);
    let tape = Tape::new();
    let cx = Ctx::new(&tape, &store, true);
    let instr = cx.constant(rand_tensor(&mut rng, 2, DIM));
    let slots: Vec<_> = (0..3).map(|_| tape.param(rand_tensor(&mut rng, N, DIM))).collect();
    let out = m.reason(&cx, &instr, &slots).unwrap();
    let grads = tape.backward(out.mul(&out).unwrap().sum()).unwrap();
    for s in slots {
        assert!(grads.wrt_or_zero(s).iter().any(|g| g.abs() > 1e-10));
    }
}
