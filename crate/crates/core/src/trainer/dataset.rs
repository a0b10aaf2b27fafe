//! Expert demonstrations with injected execution noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::model::config_hash;
use crate::sim::{generate_route, Difficulty, Route, RouteMetrics, Vec2, World};

/// One planning frame of a demonstration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub obs: Vec<f64>,
    pub instruction: usize,
    /// Clean expert waypoints in the ego frame.
    pub target: Vec<Vec2>,
    /// Arc length along the route when the frame was taken.
    pub progress: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub route_seed: u64,
    pub difficulty: Difficulty,
    pub frames: Vec<Frame>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub seed: u64,
    pub episodes: Vec<Episode>,
}

impl Dataset {
    pub fn num_frames(&self) -> usize {
        self.episodes.iter().map(|e| e.frames.len()).sum()
    }

    pub fn hard_fraction(&self) -> f64 {
        let hard = self
            .episodes
            .iter()
            .filter(|e| e.difficulty == Difficulty::Hard)
            .count();
        hard as f64 / self.episodes.len().max(1) as f64
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

/// Route seeds and difficulties for a training set: each route is hard with
/// probability `hard_fraction`.
pub fn route_plan(seed: u64, routes: usize, hard_fraction: f64) -> Vec<(u64, Difficulty)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5e_ed0f_da7a);
    (0..routes)
        .map(|_| {
            let hard = rng.gen_bool(hard_fraction);
            // Training seeds live above 2^32, away from the evaluation suites.
            let route_seed = (1u64 << 32) | u64::from(rng.gen::<u32>());
            (route_seed, if hard { Difficulty::Hard } else { Difficulty::Easy })
        })
        .collect()
}

/// Closed-loop score of the clean expert.
pub fn expert_metrics(route: &Route, max_steps: u64, waypoints: usize) -> Result<RouteMetrics> {
    let mut world = World::new(route, max_steps);
    while !world.done() {
        let wps = world.expert(waypoints)?;
        world.drive(&wps);
    }
    Ok(world.metrics())
}

/// Roll out the expert, sometimes executing a perturbed plan, and label every
/// visited state with the clean plan.
pub fn noisy_rollout(route: &Route, config: &TrainConfig, rng: &mut impl Rng) -> Vec<Frame> {
    let m = config.model.waypoints;
    let mut world = World::new(route, config.max_steps);
    let mut frames = Vec::new();
    while !world.done() {
        let Ok(target) = world.expert(m) else { break };
        frames.push(Frame {
            obs: world.observe(),
            instruction: world.instruction().id(),
            target: target.clone(),
            progress: world.progress(),
        });
        let executed = if config.noise > 0.0 && rng.gen_bool(config.noise_prob) {
            let lateral = rng.gen_range(-config.noise..config.noise);
            let stretch = 1.0 + rng.gen_range(-0.2..0.2);
            target
                .iter()
                .enumerate()
                .map(|(i, p)| [p[0] * stretch, p[1] + lateral * (i + 1) as f64 / m as f64])
                .collect()
        } else {
            target
        };
        world.drive(&executed);
    }
    frames
}

/// Step cap for the clean expert check, long enough to finish any route.
const EXPERT_CHECK_STEPS: u64 = 3000;

/// Demonstrations on `config.routes` routes, truncated at `config.max_steps`.
/// Fails if the clean expert, run to completion, scores below 0.95 on any route.
pub fn build_dataset(config: &TrainConfig) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xda7_a5e7);
    let mut episodes = Vec::with_capacity(config.routes);
    for (route_seed, difficulty) in route_plan(config.seed, config.routes, config.hard_fraction) {
        let route = generate_route(route_seed, difficulty);
        let clean = expert_metrics(&route, EXPERT_CHECK_STEPS, config.model.waypoints)?;
        if clean.ds < 0.95 {
            return Err(Error::Generation(format!(
                "expert scores DS {:.3} on route {route_seed}",
                clean.ds
            )));
        }
        episodes.push(Episode {
            route_seed,
            difficulty,
            frames: noisy_rollout(&route, config, &mut rng),
        });
    }
    Ok(Dataset {
        seed: config.seed,
        episodes,
    })
}
