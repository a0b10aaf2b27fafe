use super::*;
use crate::sim::{dist, Difficulty, V_MAX};

fn tiny(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        routes: 2,
        max_steps: 40,
        epochs: 2,
        batch: 2,
        bptt: 4,
        ..TrainConfig::default()
    }
}

#[test]
fn dataset_is_deterministic_per_seed() {
    let a = build_dataset(&tiny(1)).unwrap();
    let b = build_dataset(&tiny(1)).unwrap();
    let c = build_dataset(&tiny(2)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.hash(), b.hash());
    assert_ne!(a.hash(), c.hash());
    assert_eq!(a.episodes.len(), 2);
    assert!(a.num_frames() > 0);
}

#[test]
fn route_plan_hits_the_hard_fraction() {
    let plan = route_plan(7, 1000, 0.5);
    let hard = plan.iter().filter(|(_, d)| *d == Difficulty::Hard).count() as f64 / 1000.0;
    assert!((hard - 0.5).abs() <= 0.05, "{hard}");
    assert!(plan.iter().all(|(s, _)| *s >= 1 << 32));
    assert!(route_plan(7, 100, 0.0).iter().all(|(_, d)| *d == Difficulty::Easy));
}

#[test]
fn targets_satisfy_expert_postconditions() {
    let config = tiny(3);
    let data = build_dataset(&config).unwrap();
    for e in &data.episodes {
        for f in &e.frames {
            assert_eq!(f.obs.len(), config.model.obs_dim);
            assert_eq!(f.target.len(), config.model.waypoints);
            let mut prev = [0.0, 0.0];
            for p in &f.target {
                assert!(p[0].is_finite() && p[1].is_finite());
                // Consecutive waypoints are half a second apart.
                assert!(dist(prev, *p) <= V_MAX * 0.5 + 1e-9);
                prev = *p;
            }
        }
    }
}

#[test]
fn kv_config_overlays_defaults() {
    let c = TrainConfig::from_kv("epochs = 3  # short\nmodel.n_memory = 0\n\nlr=0.002\n").unwrap();
    assert_eq!(c.epochs, 3);
    assert_eq!(c.model.n_memory, 0);
    assert_eq!(c.lr, 0.002);
    assert_eq!(c.routes, TrainConfig::default().routes);
    assert!(matches!(TrainConfig::from_kv("nope = 1"), Err(Error::Parse(_))));
    assert!(matches!(TrainConfig::from_kv("epochs"), Err(Error::Parse(_))));
    assert!(matches!(TrainConfig::from_kv("lr = -1"), Err(Error::Invalid(_))));
}

#[test]
fn resume_is_bitwise() {
    let config = tiny(4);
    let data = build_dataset(&config).unwrap();
    let straight = train(&config, &data).unwrap();

    let mut first = Trainer::new(config.clone(), data.num_frames()).unwrap();
    first.run_epoch(&data).unwrap();
    let json = first.checkpoint().to_json().unwrap();
    let mut resumed = Trainer::from_checkpoint(&Checkpoint::from_json(&json).unwrap()).unwrap();
    let second = resumed.run_epoch(&data).unwrap();
    assert_eq!(second, straight.summaries[1]);
    assert_eq!(resumed.store.to_snapshot(), straight.store.to_snapshot());
}

#[test]
fn tampered_checkpoint_is_rejected() {
    let config = tiny(5);
    let trainer = Trainer::new(config, 10).unwrap();
    let mut ck = trainer.checkpoint();
    ck.config.lr *= 2.0;
    assert!(matches!(ck.restore(), Err(Error::ConfigMismatch { .. })));
}

#[test]
fn metrics_account_for_every_frame() {
    let config = tiny(6);
    let data = build_dataset(&config).unwrap();
    let t = train(&config, &data).unwrap();
    let logged: usize = t.metrics.iter().map(|m| m.frames).sum();
    assert_eq!(logged, data.num_frames() * config.epochs);
    for s in &t.summaries {
        assert_eq!(s.frames, data.num_frames());
        // One reasoner call per training frame.
        assert_eq!(s.slow_calls, s.frames);
        assert!(s.loss_fast.is_finite() && s.loss_llm.is_finite() && s.loss_fuse.is_finite());
    }
    assert!(t.metrics.iter().any(|m| m.phase == "warmup"));
    assert!(t.metrics.iter().any(|m| m.phase == "adaptive"));
}

#[test]
fn non_finite_input_reports_divergence() {
    let config = tiny(7);
    let mut data = build_dataset(&config).unwrap();
    data.episodes[0].frames[0].obs[0] = f64::NAN;
    data.episodes[1].frames[0].obs[0] = f64::NAN;
    let err = train(&config, &data).err().unwrap();
    assert!(matches!(err, Error::Divergence { step: 0, .. }), "{err:?}");
}

#[test]
fn synthetic_gate_separates_hard_from_easy() {
    let r = synthetic_gate_task(&SyntheticConfig {
        steps: 150,
        eval_samples: 400,
        ..SyntheticConfig::default()
    })
    .unwrap();
    assert!(r.hard_rate > r.easy_rate + 0.3, "{r:?}");
}
