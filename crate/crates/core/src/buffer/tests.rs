use proptest::prelude::*;

use super::*;
use crate::autodiff::Tape;

fn t(v: f64) -> Tensor {
    Tensor::vector(vec![v, -v])
}

fn firsts(b: &StreamBuffer<Tensor>) -> Vec<f64> {
    b.slots().iter().map(|s| s.data()[0]).collect()
}

fn fill(policy: EvictionPolicy, k: usize, values: &[f64]) -> StreamBuffer<Tensor> {
    let mut b = StreamBuffer::new(k, policy).unwrap();
    for &v in values {
        b.push(t(v)).unwrap();
    }
    b
}

#[test]
fn pmf_merges_two_oldest() {
    let (a, b, c, d, e) = (1.0, 2.0, 4.0, 8.0, 16.0);
    let buf = fill(EvictionPolicy::Pmf, 3, &[a, b, c, d]);
    assert_eq!(firsts(&buf), [(a + b) / 2.0, c, d]);
    assert_eq!(buf.last_event(), Some(PushEvent::Merged));
    let buf = fill(EvictionPolicy::Pmf, 3, &[a, b, c, d, e]);
    assert_eq!(firsts(&buf), [(a + b) / 4.0 + c / 2.0, d, e]);
}

#[test]
fn fifo_and_reset_definitions() {
    assert_eq!(
        firsts(&fill(EvictionPolicy::Fifo, 3, &[1.0, 2.0, 3.0, 4.0])),
        [2.0, 3.0, 4.0]
    );
    let r = fill(EvictionPolicy::HardReset, 3, &[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(firsts(&r), [4.0]);
    assert_eq!(r.last_event(), Some(PushEvent::Cleared));
}

#[test]
fn snapshot_basics() {
    let empty: StreamBuffer<Tensor> = StreamBuffer::new(10, EvictionPolicy::Pmf).unwrap();
    assert!(empty.snapshot().is_empty());
    assert_eq!(firsts(&fill(EvictionPolicy::Pmf, 10, &[5.0, 6.0])), [5.0, 6.0]);
    let values: Vec<f64> = (0..100).map(f64::from).collect();
    let buf = fill(EvictionPolicy::Pmf, 10, &values);
    assert_eq!(buf.len(), 10);
    let snap = buf.snapshot();
    assert_eq!(snap.len(), 10);
    assert_eq!(buf.len(), 10);
}

#[test]
fn push_rejects_shape_change() {
    let mut b = StreamBuffer::new(4, EvictionPolicy::Fifo).unwrap();
    b.push(Tensor::zeros(&[2, 3])).unwrap();
    assert!(matches!(b.push(Tensor::zeros(&[3, 2])), Err(Error::Shape { .. })));
}

#[test]
fn debug_line_is_json() {
    let b = fill(EvictionPolicy::Pmf, 2, &[3.0, 4.0, 0.0]);
    let v: serde_json::Value = serde_json::from_str(&b.debug_line()).unwrap();
    assert_eq!(v["event"], "merged");
    assert_eq!(v["slot_norms"].as_array().unwrap().len(), 2);
    assert_eq!(v["push"], 3);
}

#[test]
fn var_slots_carry_gradient_through_merges() {
    let tape = Tape::new();
    let xs: Vec<_> = (0..5).map(|i| tape.param(Tensor::scalar(f64::from(i)))).collect();
    let mut b = StreamBuffer::new(3, EvictionPolicy::Pmf).unwrap();
    for x in &xs {
        b.push(*x).unwrap();
    }
    let g = tape.backward(b.slots()[0]).unwrap();
    // Oldest slot = (x0 + x1) / 4 + x2 / 2.
    let got: Vec<f64> = xs.iter().map(|x| g.wrt(*x).map_or(0.0, |v| v[0])).collect();
    assert_eq!(got, [0.25, 0.25, 0.5, 0.0, 0.0]);
}

proptest! {
    #[test]
    fn policies_agree_below_capacity(values in prop::collection::vec(-5.0f64..5.0, 0..10), k in 10usize..14) {
        let a = firsts(&fill(EvictionPolicy::Pmf, k, &values));
        prop_assert_eq!(&a, &firsts(&fill(EvictionPolicy::Fifo, k, &values)));
        prop_assert_eq!(&a, &firsts(&fill(EvictionPolicy::HardReset, k, &values)));
    }

    #[test]
    fn fifo_keeps_last_k(values in prop::collection::vec(-5.0f64..5.0, 0..60), k in 1usize..12) {
        let got = firsts(&fill(EvictionPolicy::Fifo, k, &values));
        let start = values.len().saturating_sub(k);
        prop_assert_eq!(got, values[start..].to_vec());
    }

    #[test]
    fn length_never_exceeds_capacity(n in 0usize..80, k in 2usize..12, which in 0usize..3) {
        let values: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let b = fill(EvictionPolicy::ALL[which], k, &values);
        prop_assert!(b.len() <= k);
        let expected = match EvictionPolicy::ALL[which] {
            EvictionPolicy::HardReset if n > 0 => (n - 1) % k + 1,
            _ => n.min(k),
        };
        prop_assert_eq!(b.len(), expected);
    }
}
