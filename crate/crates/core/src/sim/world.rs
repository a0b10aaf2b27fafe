//! Ego dynamics, per-episode world state, observations and the expert.

use serde::{Deserialize, Serialize};

use super::geometry::{add, dir, dist, scale, sub, to_local, to_world, wrap_angle, Vec2};
use super::route::{generate_route, Difficulty, Route, Turn, JUNCTION_RADIUS};
use super::score::{score, Infraction, InfractionKind, RouteMetrics};
use super::{Instruction, NUM_INSTRUCTIONS, OBS_DIM};
use crate::error::{Error, Result};
use crate::planner::WAYPOINT_DT;

/// Simulation step.
pub const DT: f64 = 0.1;
pub const V_MAX: f64 = 10.0;
/// Simulation steps between two planning frames.
pub const CONTROL_PERIOD: u32 = 5;
const MAX_YAW_RATE: f64 = 1.2;
const SPEED_GAIN: f64 = 2.0;
const MAX_ACCEL: f64 = 3.0;
const MAX_DECEL: f64 = 6.0;

const CRUISE_SPEED: f64 = 6.0;
const JUNCTION_SPEED: f64 = 4.0;
const EXPERT_ACCEL: f64 = 2.0;
const EXPERT_DECEL: f64 = 2.5;
/// The expert stops this far before an obstacle.
const STOP_GAP: f64 = 2.0;
const EXPERT_RANGE: f64 = 20.0;

const SENSOR_RANGE: f64 = 15.0;
const ROAD_SAMPLES: usize = 10;
const ROAD_SPACING: f64 = 2.5;
const FEATURE_RANGE: f64 = 25.0;

/// Occluded obstacles are seen for this many steps after first entering sensor range...
const VISIBLE_STEPS: u64 = 5;
/// ...then hidden for up to this many steps, unless the ego comes this close.
const HIDDEN_MAX_STEPS: u64 = 30;
const REVEAL_DISTANCE: f64 = 3.0;

const COLLISION_DISTANCE: f64 = 1.0;
/// An obstacle clears once the ego has waited near it, nearly stopped, this long.
const CLEAR_DISTANCE: f64 = 6.0;
const CLEAR_SPEED: f64 = 0.5;
const CLEAR_STEPS: u32 = 10;

const OFF_ROUTE_DISTANCE: f64 = 5.0;
const OFF_ROUTE_STEPS: u32 = 10;
const ABORT_DISTANCE: f64 = 15.0;
const GOAL_TOLERANCE: f64 = 1.0;
/// Radius around an intersection center used to judge which branch was taken.
const BRANCH_RADIUS: f64 = JUNCTION_RADIUS + 1.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EgoState {
    pub position: Vec2,
    /// Radians in (-pi, pi].
    pub heading: f64,
    pub speed: f64,
    pub step: u64,
}

/// One follower step: pure pursuit toward the second waypoint and
/// proportional speed control toward the speed implied by the first spacing.
pub fn step_dynamics(ego: &EgoState, waypoints: &[Vec2]) -> EgoState {
    let (target, implied) = match waypoints {
        [] => ([0.0, 0.0], 0.0),
        [w0] => (*w0, super::geometry::norm(*w0) / WAYPOINT_DT),
        [w0, w1, ..] => (*w1, dist(*w1, *w0) / WAYPOINT_DT),
    };
    let d2 = target[0] * target[0] + target[1] * target[1];
    let curvature = if d2 > 0.25 { 2.0 * target[1] / d2 } else { 0.0 };
    let accel = (SPEED_GAIN * (implied - ego.speed)).clamp(-MAX_DECEL, MAX_ACCEL);
    let mut speed = (ego.speed + accel * DT).clamp(0.0, V_MAX);
    if implied < 0.05 && speed < 0.05 {
        speed = 0.0;
    }
    let yaw_rate = (speed * curvature).clamp(-MAX_YAW_RATE, MAX_YAW_RATE);
    let mid = ego.heading + 0.5 * yaw_rate * DT;
    EgoState {
        position: add(ego.position, scale(dir(mid), speed * DT)),
        heading: wrap_angle(ego.heading + yaw_rate * DT),
        speed,
        step: ego.step + 1,
    }
}

/// Speed the expert allows at arc length `s`.
fn speed_limit(route: &Route, s: f64, stops: &[f64]) -> f64 {
    let brake =
        |target_speed: f64, at: f64| (target_speed * target_speed + 2.0 * EXPERT_DECEL * (at - s).max(0.0)).sqrt();
    let mut v = CRUISE_SPEED;
    for j in &route.junctions {
        if s >= j.s_entry && s <= j.s_exit {
            v = v.min(JUNCTION_SPEED);
        } else if s < j.s_entry {
            v = v.min(brake(JUNCTION_SPEED, j.s_entry));
        }
    }
    for &stop in stops {
        v = v.min(if s >= stop { 0.0 } else { brake(0.0, stop) });
    }
    v.min(brake(0.0, route.length))
}

/// Expert plan from arc length `s` with the given stop points.
fn expert_plan(route: &Route, ego: &EgoState, s: f64, stops: &[f64], m: usize) -> Vec<Vec2> {
    let sub_dt = WAYPOINT_DT / 10.0;
    let mut v = ego.speed;
    let mut s_cur = s;
    // Discrete integration must not creep past the stop line.
    let cap = stops
        .iter()
        .copied()
        .filter(|&x| x >= s)
        .fold(route.length, f64::min)
        .max(s);
    (0..m)
        .map(|_| {
            for _ in 0..10 {
                v = (v + EXPERT_ACCEL * sub_dt).min(speed_limit(route, s_cur, stops));
                s_cur = (s_cur + v * sub_dt).min(cap);
            }
            to_local(ego.position, ego.heading, route.centerline.point_at(s_cur))
        })
        .collect()
}

fn stop_points(route: &Route, s: f64, active: impl Iterator<Item = f64>) -> Vec<f64> {
    let _ = route;
    active.filter(|&o| o > s - 0.5).map(|o| o - STOP_GAP).collect()
}

/// Expert waypoints with every obstacle treated as present.
pub fn expert_waypoints(route: &Route, ego: &EgoState, m: usize) -> Result<Vec<Vec2>> {
    let p = route.centerline.project(ego.position);
    if p.distance > EXPERT_RANGE {
        return Err(Error::OffRoute(p.distance));
    }
    let stops = stop_points(route, p.s, route.obstacles.iter().map(|o| o.s));
    Ok(expert_plan(route, ego, p.s, &stops, m))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpisodeEnd {
    Goal,
    OffRoute,
    Timeout,
}

#[derive(Clone, Debug)]
struct ObstacleState {
    s: f64,
    position: Vec2,
    occluded: bool,
    cleared: bool,
    first_seen: Option<u64>,
    waited: u32,
}

/// Per-step log line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
    pub progress: f64,
    pub infractions: usize,
}

/// Mutable state of one episode on one route.
#[derive(Clone, Debug)]
pub struct World<'r> {
    pub route: &'r Route,
    pub ego: EgoState,
    obstacles: Vec<ObstacleState>,
    progress: f64,
    max_progress: f64,
    distance: f64,
    off_steps: u32,
    off_zone: usize,
    off_flagged: bool,
    inside_junction: Vec<bool>,
    judged_junction: Vec<bool>,
    infractions: Vec<Infraction>,
    end: Option<EpisodeEnd>,
    max_steps: u64,
}

impl<'r> World<'r> {
    /// Start at the beginning of the route, at rest.
    pub fn new(route: &'r Route, max_steps: u64) -> Self {
        let ego = EgoState {
            position: route.centerline.point_at(0.0),
            heading: route.centerline.heading_at(0.0),
            speed: 0.0,
            step: 0,
        };
        Self::with_ego(route, ego, max_steps)
    }

    pub fn with_ego(route: &'r Route, ego: EgoState, max_steps: u64) -> Self {
        let p = route.centerline.project(ego.position);
        let obstacles = route
            .obstacles
            .iter()
            .map(|o| ObstacleState {
                s: o.s,
                position: route.centerline.point_at(o.s),
                occluded: o.occluded,
                cleared: false,
                first_seen: None,
                waited: 0,
            })
            .collect();
        let mut w = Self {
            route,
            ego,
            obstacles,
            progress: p.s,
            max_progress: p.s,
            distance: p.distance,
            off_steps: 0,
            off_zone: 0,
            off_flagged: false,
            inside_junction: vec![false; route.junctions.len()],
            judged_junction: vec![false; route.junctions.len()],
            infractions: Vec::new(),
            end: None,
            max_steps,
        };
        w.update_sightings();
        w
    }

    pub fn progress(&self) -> f64 {
        self.progress
    }

    pub fn max_progress(&self) -> f64 {
        self.max_progress
    }

    pub fn distance_to_route(&self) -> f64 {
        self.distance
    }

    pub fn end(&self) -> Option<EpisodeEnd> {
        self.end
    }

    pub fn done(&self) -> bool {
        self.end.is_some()
    }

    pub fn infractions(&self) -> &[Infraction] {
        &self.infractions
    }

    pub fn instruction(&self) -> Instruction {
        self.route.instruction_at(self.progress)
    }

    pub fn metrics(&self) -> RouteMetrics {
        score(self.route.length, self.max_progress, &self.infractions)
    }

    pub fn record(&self) -> StepRecord {
        StepRecord {
            step: self.ego.step,
            x: self.ego.position[0],
            y: self.ego.position[1],
            heading: self.ego.heading,
            speed: self.ego.speed,
            progress: self.progress,
            infractions: self.infractions.len(),
        }
    }

    fn obstacle_visible(&self, o: &ObstacleState) -> bool {
        let d = dist(o.position, self.ego.position);
        if o.cleared || d > SENSOR_RANGE || o.s < self.progress - 1.0 {
            return false;
        }
        if !o.occluded {
            return true;
        }
        let age = o.first_seen.map_or(0, |t| self.ego.step - t);
        age < VISIBLE_STEPS || d <= REVEAL_DISTANCE || age >= VISIBLE_STEPS + HIDDEN_MAX_STEPS
    }

    fn update_sightings(&mut self) {
        let (pos, step) = (self.ego.position, self.ego.step);
        for o in &mut self.obstacles {
            if o.first_seen.is_none() && dist(o.position, pos) <= SENSOR_RANGE {
                o.first_seen = Some(step);
            }
        }
    }

    /// Fixed-length observation vector.
    pub fn observe(&self) -> Vec<f64> {
        let mut obs = Vec::with_capacity(OBS_DIM);
        let route = self.route;
        let next = route.next_junction(self.progress).map(|(_, j)| *j);
        for i in 1..=ROAD_SAMPLES {
            let s = self.progress + ROAD_SPACING * i as f64;
            // Past the entry of the coming intersection the road is shown straight on.
            let p = match next {
                Some(j) if s > j.s_entry => {
                    let entry = route.centerline.point_at(j.s_entry);
                    add(entry, scale(dir(j.heading_in), s - j.s_entry))
                }
                _ => route.centerline.point_at(s.min(route.length)),
            };
            let local = to_local(self.ego.position, self.ego.heading, p);
            obs.push(local[0] / FEATURE_RANGE);
            obs.push(local[1] / FEATURE_RANGE);
        }
        obs.push(self.ego.speed / V_MAX);
        match next {
            Some(j) if j.s_entry - self.progress <= FEATURE_RANGE => {
                obs.push(1.0);
                obs.push(((j.s_entry - self.progress) / FEATURE_RANGE).clamp(-1.0, 1.0));
                obs.push(if self.progress >= j.s_entry { 1.0 } else { 0.0 });
            }
            _ => obs.extend([0.0, 0.0, 0.0]),
        }
        let nearest = self
            .obstacles
            .iter()
            .filter(|o| self.obstacle_visible(o))
            .map(|o| o.s - self.progress)
            .min_by(|a, b| a.total_cmp(b));
        match nearest {
            Some(d) => obs.extend([1.0, (d / SENSOR_RANGE).clamp(-1.0, 1.0)]),
            None => obs.extend([0.0, 0.0]),
        }
        let to_goal = route.length - self.progress;
        if to_goal <= FEATURE_RANGE {
            obs.extend([1.0, (to_goal / FEATURE_RANGE).max(0.0)]);
        } else {
            obs.extend([0.0, 0.0]);
        }
        let instr = self.instruction().id();
        obs.extend((0..NUM_INSTRUCTIONS).map(|i| if i == instr { 1.0 } else { 0.0 }));
        debug_assert_eq!(obs.len(), OBS_DIM);
        obs
    }

    /// Expert waypoints for the current state, honoring cleared obstacles.
    pub fn expert(&self, m: usize) -> Result<Vec<Vec2>> {
        if self.distance > EXPERT_RANGE {
            return Err(Error::OffRoute(self.distance));
        }
        let stops = stop_points(
            self.route,
            self.progress,
            self.obstacles.iter().filter(|o| !o.cleared).map(|o| o.s),
        );
        Ok(expert_plan(self.route, &self.ego, self.progress, &stops, m))
    }

    /// Follow ego-frame `waypoints` for one planning period (or until the episode ends).
    pub fn drive(&mut self, waypoints: &[Vec2]) -> u32 {
        let origin = self.ego;
        let world: Vec<Vec2> = waypoints
            .iter()
            .map(|&w| to_world(origin.position, origin.heading, w))
            .collect();
        let mut n = 0;
        while n < CONTROL_PERIOD && !self.done() {
            let local: Vec<Vec2> = world
                .iter()
                .map(|&w| to_local(self.ego.position, self.ego.heading, w))
                .collect();
            self.ego = step_dynamics(&self.ego, &local);
            self.after_step();
            n += 1;
        }
        n
    }

    fn after_step(&mut self) {
        let route = self.route;
        let step = self.ego.step;
        let p = route
            .centerline
            .project_window(self.ego.position, self.progress - 5.0, self.progress + 10.0);
        self.progress = p.s;
        self.distance = p.distance;
        self.max_progress = self.max_progress.max(p.s);
        self.update_sightings();

        let pos = self.ego.position;
        let speed = self.ego.speed;
        for (idx, o) in self.obstacles.iter_mut().enumerate() {
            if o.cleared {
                continue;
            }
            let d = dist(o.position, pos);
            if d < COLLISION_DISTANCE {
                self.infractions.push(Infraction {
                    kind: InfractionKind::Collision,
                    step,
                    object: idx,
                });
                o.cleared = true;
                continue;
            }
            if d < CLEAR_DISTANCE && speed < CLEAR_SPEED {
                o.waited += 1;
                if o.waited >= CLEAR_STEPS {
                    o.cleared = true;
                }
            }
        }

        if self.distance > OFF_ROUTE_DISTANCE {
            self.off_steps += 1;
            if self.off_steps > OFF_ROUTE_STEPS && !self.off_flagged {
                self.infractions.push(Infraction {
                    kind: InfractionKind::OffRoute,
                    step,
                    object: self.off_zone,
                });
                self.off_flagged = true;
            }
        } else {
            if self.off_flagged {
                self.off_zone += 1;
            }
            self.off_steps = 0;
            self.off_flagged = false;
        }

        for (idx, j) in route.junctions.iter().enumerate() {
            let inside = dist(pos, j.center) < BRANCH_RADIUS;
            if self.inside_junction[idx] && !inside && !self.judged_junction[idx] {
                let rel = sub(pos, j.center);
                let angle = wrap_angle(rel[1].atan2(rel[0]) - j.heading_in);
                let q = std::f64::consts::FRAC_PI_4;
                let taken = if angle.abs() < q {
                    Some(Turn::Straight)
                } else if angle >= q && angle < 3.0 * q {
                    Some(Turn::Left)
                } else if angle <= -q && angle > -3.0 * q {
                    Some(Turn::Right)
                } else {
                    None
                };
                if let Some(t) = taken {
                    self.judged_junction[idx] = true;
                    if t != j.turn {
                        self.infractions.push(Infraction {
                            kind: InfractionKind::WrongTurn,
                            step,
                            object: idx,
                        });
                    }
                }
            }
            self.inside_junction[idx] = inside;
        }

        if self.progress >= route.length - GOAL_TOLERANCE {
            self.end = Some(EpisodeEnd::Goal);
        } else if self.distance > ABORT_DISTANCE {
            self.end = Some(EpisodeEnd::OffRoute);
        } else if step >= self.max_steps {
            self.end = Some(EpisodeEnd::Timeout);
        }
    }
}

/// A hard route and two ego states, one before each intersection of its
/// "turn at the second intersection" instruction, that observe the same thing
/// but need different waypoints.
pub fn information_gap_pair(seed: u64) -> (Route, EgoState, EgoState) {
    let route = generate_route(seed, Difficulty::Hard);
    let seg = route
        .segments
        .iter()
        .find(|s| s.instruction.is_counting())
        .copied()
        .expect("hard routes carry a counting instruction");
    let counted: Vec<_> = route
        .junctions
        .iter()
        .filter(|j| j.s_entry >= seg.start && j.s_exit <= seg.end + 1e-9)
        .copied()
        .collect();
    let at = |s: f64| EgoState {
        position: route.centerline.point_at(s),
        heading: route.centerline.heading_at(s),
        speed: JUNCTION_SPEED,
        step: 0,
    };
    let a = at(counted[0].s_entry - 4.0);
    let b = at(counted[1].s_entry - 4.0);
    (route, a, b)
}
