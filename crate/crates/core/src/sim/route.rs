//! Route construction and the easy/hard generators.
//!
//! A route is a chain of straight roads joined by four-way intersections that
//! are crossed straight or turned through with a quarter circle. Every
//! intersection is announced by an instruction that stays active until the
//! intersection has been left; "turn at the second intersection" keeps the
//! same instruction across the first one.

use std::f64::consts::FRAC_PI_2;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::geometry::{add, dir, dist, left, scale, Polyline, Vec2};
use super::Instruction;
use crate::error::{Error, Result};

/// Turning radius inside intersections; also half the intersection size.
pub const JUNCTION_RADIUS: f64 = 6.0;
const SAMPLE_STEP: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Hard,
}

impl std::str::FromStr for Difficulty {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "easy" => Ok(Difficulty::Easy),
            "hard" => Ok(Difficulty::Hard),
            other => Err(Error::Parse(format!("unknown difficulty `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Turn {
    Left,
    Straight,
    Right,
}

impl Turn {
    /// Heading change when taking this branch.
    pub fn angle(self) -> f64 {
        match self {
            Turn::Left => FRAC_PI_2,
            Turn::Straight => 0.0,
            Turn::Right => -FRAC_PI_2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Piece {
    Straight { length: f64 },
    Junction { turn: Turn },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObstacleSpec {
    /// Arc length of the obstacle on the centerline.
    pub s: f64,
    /// Hidden from the sensor for a while after first being seen.
    pub occluded: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: f64,
    pub end: f64,
    pub instruction: Instruction,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Intersection,
    StaticObstacle,
    OccludedObstacle,
    CountingLandmark,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub kind: EventKind,
    pub s: f64,
    pub position: Vec2,
}

/// Geometry of one intersection along the route.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Junction {
    pub center: Vec2,
    pub heading_in: f64,
    pub s_entry: f64,
    pub s_exit: f64,
    pub turn: Turn,
}

/// Serialized form: everything needed to rebuild a [`Route`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouteFile {
    pub seed: u64,
    pub difficulty: Difficulty,
    pub pieces: Vec<Piece>,
    pub obstacles: Vec<ObstacleSpec>,
    pub segments: Vec<Segment>,
    pub events: Vec<Event>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Route {
    pub seed: u64,
    pub difficulty: Difficulty,
    pub pieces: Vec<Piece>,
    pub centerline: Polyline,
    pub junctions: Vec<Junction>,
    pub obstacles: Vec<ObstacleSpec>,
    pub segments: Vec<Segment>,
    pub events: Vec<Event>,
    pub length: f64,
}

/// Where each junction sits in a freshly built centerline.
fn build_centerline(pieces: &[Piece]) -> (Polyline, Vec<Junction>) {
    let mut pl = Polyline::default();
    let mut pos: Vec2 = [0.0, 0.0];
    let mut heading = 0.0f64;
    let mut junctions = Vec::new();
    pl.push(pos);
    for piece in pieces {
        match *piece {
            Piece::Straight { length } => {
                let n = (length / SAMPLE_STEP).ceil().max(1.0) as usize;
                let start = pos;
                for i in 1..=n {
                    pl.push(add(start, scale(dir(heading), length * i as f64 / n as f64)));
                }
                pos = add(start, scale(dir(heading), length));
            }
            Piece::Junction { turn } => {
                let r = JUNCTION_RADIUS;
                let s_entry = pl.length();
                let center = add(pos, scale(dir(heading), r));
                match turn {
                    Turn::Straight => {
                        let n = (2.0 * r / SAMPLE_STEP).ceil() as usize;
                        for i in 1..=n {
                            pl.push(add(pos, scale(dir(heading), 2.0 * r * i as f64 / n as f64)));
                        }
                        pos = add(pos, scale(dir(heading), 2.0 * r));
                    }
                    Turn::Left | Turn::Right => {
                        let sign = if turn == Turn::Left { 1.0 } else { -1.0 };
                        let pivot = add(pos, scale(left(heading), sign * r));
                        let n = (FRAC_PI_2 * r / SAMPLE_STEP).ceil() as usize;
                        for i in 1..=n {
                            let a = sign * FRAC_PI_2 * i as f64 / n as f64;
                            // Radius vector from the pivot rotates with the heading.
                            pl.push(add(pivot, scale(left(heading + a), -sign * r)));
                        }
                        pos = add(pivot, scale(left(heading + sign * FRAC_PI_2), -sign * r));
                        heading += turn.angle();
                    }
                }
                junctions.push(Junction {
                    center,
                    heading_in: heading - turn.angle(),
                    s_entry,
                    s_exit: pl.length(),
                    turn,
                });
            }
        }
    }
    (pl, junctions)
}

fn derive_events(
    pl: &Polyline,
    junctions: &[Junction],
    obstacles: &[ObstacleSpec],
    segments: &[Segment],
) -> Vec<Event> {
    let mut events: Vec<Event> = junctions
        .iter()
        .map(|j| Event {
            kind: EventKind::Intersection,
            s: j.s_entry,
            position: j.center,
        })
        .collect();
    for o in obstacles {
        events.push(Event {
            kind: if o.occluded {
                EventKind::OccludedObstacle
            } else {
                EventKind::StaticObstacle
            },
            s: o.s,
            position: pl.point_at(o.s),
        });
    }
    // Intersections counted under an nth-intersection instruction.
    for seg in segments.iter().filter(|s| s.instruction.is_counting()) {
        for j in junctions
            .iter()
            .filter(|j| j.s_entry >= seg.start && j.s_exit <= seg.end + 1e-9)
        {
            events.push(Event {
                kind: EventKind::CountingLandmark,
                s: j.s_entry,
                position: j.center,
            });
        }
    }
    events.sort_by(|a, b| a.s.total_cmp(&b.s));
    events
}

impl Route {
    pub fn build(
        seed: u64,
        difficulty: Difficulty,
        pieces: Vec<Piece>,
        obstacles: Vec<ObstacleSpec>,
        segments: Vec<Segment>,
    ) -> Result<Self> {
        let (centerline, junctions) = build_centerline(&pieces);
        let length = centerline.length();
        if !(length > 0.0) {
            return Err(Error::Invalid("route has zero length".into()));
        }
        let mut cursor = 0.0;
        for seg in &segments {
            if (seg.start - cursor).abs() > 1e-6 || seg.end <= seg.start {
                return Err(Error::Invalid(format!(
                    "instruction segments leave a gap at {cursor:.2} m"
                )));
            }
            cursor = seg.end;
        }
        if (cursor - length).abs() > 1e-6 {
            return Err(Error::Invalid("instruction segments do not cover the route".into()));
        }
        let events = derive_events(&centerline, &junctions, &obstacles, &segments);
        Ok(Self {
            seed,
            difficulty,
            pieces,
            centerline,
            junctions,
            obstacles,
            segments,
            events,
            length,
        })
    }

    pub fn to_file(&self) -> RouteFile {
        RouteFile {
            seed: self.seed,
            difficulty: self.difficulty,
            pieces: self.pieces.clone(),
            obstacles: self.obstacles.clone(),
            segments: self.segments.clone(),
            events: self.events.clone(),
        }
    }

    pub fn from_file(f: RouteFile) -> Result<Self> {
        let route = Self::build(f.seed, f.difficulty, f.pieces, f.obstacles, f.segments)?;
        if route.events.len() != f.events.len()
            || route
                .events
                .iter()
                .zip(&f.events)
                .any(|(a, b)| a.kind != b.kind || (a.s - b.s).abs() > 1e-6)
        {
            return Err(Error::Parse(format!(
                "route {}: events do not match its geometry",
                f.seed
            )));
        }
        Ok(route)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_file()).expect("route serializes")
    }

    pub fn from_json(json: &str) -> Result<Self> {
        Self::from_file(serde_json::from_str(json)?)
    }

    pub fn instruction_at(&self, s: f64) -> Instruction {
        self.segments
            .iter()
            .find(|seg| s < seg.end)
            .or(self.segments.last())
            .map_or(Instruction::FollowLane, |seg| seg.instruction)
    }

    /// The first intersection not yet left behind at arc length `s`.
    pub fn next_junction(&self, s: f64) -> Option<(usize, &Junction)> {
        self.junctions.iter().enumerate().find(|(_, j)| j.s_exit > s)
    }

    pub fn count_events(&self, kind: EventKind) -> usize {
        self.events.iter().filter(|e| e.kind == kind).count()
    }
}

/// Knobs of the random route generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    /// Straight before the first intersection.
    pub lead_in: (f64, f64),
    /// Road between the two intersections of a counting instruction.
    pub counting_gap: (f64, f64),
    /// Road between other consecutive features.
    pub link: (f64, f64),
    /// Road after the last intersection.
    pub lead_out: (f64, f64),
    /// Probability that an easy route contains an intersection.
    pub easy_junction_prob: f64,
    /// Probability that an easy route contains a static obstacle.
    pub easy_obstacle_prob: f64,
    /// Probability that a hard route has a third, announced intersection.
    pub hard_extra_junction_prob: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            lead_in: (30.0, 42.0),
            counting_gap: (18.0, 30.0),
            link: (30.0, 42.0),
            lead_out: (45.0, 60.0),
            easy_junction_prob: 0.6,
            easy_obstacle_prob: 0.5,
            hard_extra_junction_prob: 0.3,
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, r: (f64, f64)) -> f64 {
    // Quarter-meter grid keeps route files short and exact.
    let v = rng.gen_range(r.0..=r.1);
    (v * 4.0).round() / 4.0
}

fn random_turn(rng: &mut ChaCha8Rng) -> Turn {
    [Turn::Left, Turn::Straight, Turn::Right][rng.gen_range(0..3)]
}

/// Start/end arc length of every piece.
fn piece_spans(pieces: &[Piece]) -> Vec<(f64, f64)> {
    let mut s = 0.0;
    pieces
        .iter()
        .map(|p| {
            let len = match *p {
                Piece::Straight { length } => length,
                Piece::Junction { turn: Turn::Straight } => 2.0 * JUNCTION_RADIUS,
                Piece::Junction { .. } => FRAC_PI_2 * JUNCTION_RADIUS,
            };
            let span = (s, s + len);
            s += len;
            span
        })
        .collect()
}

/// Place an obstacle on straight piece `idx`, at least `margin` from both ends.
fn obstacle_on(
    rng: &mut ChaCha8Rng,
    spans: &[(f64, f64)],
    idx: usize,
    margin: (f64, f64),
    occluded: bool,
) -> ObstacleSpec {
    let (a, b) = spans[idx];
    let lo = a + margin.0;
    let hi = (b - margin.1).max(lo);
    ObstacleSpec {
        s: uniform(rng, (lo, hi)),
        occluded,
    }
}

/// Instruction plan: which junction each instruction targets.
enum Plan {
    Next(usize),
    Second(usize),
}

fn segments_for(route_len: f64, junctions: &[Junction], plans: &[Plan]) -> Vec<Segment> {
    let mut segs = Vec::new();
    let mut cursor = 0.0;
    for p in plans {
        let (target, instr) = match *p {
            Plan::Next(j) => (j, Instruction::next(junctions[j].turn)),
            Plan::Second(j) => (j, Instruction::second(junctions[j].turn)),
        };
        let end = junctions[target].s_exit;
        segs.push(Segment {
            start: cursor,
            end,
            instruction: instr,
        });
        cursor = end;
    }
    if route_len > cursor + 1e-9 {
        segs.push(Segment {
            start: cursor,
            end: route_len,
            instruction: Instruction::FollowLane,
        });
    } else if let Some(last) = segs.last_mut() {
        last.end = route_len;
    }
    segs
}

/// Roads that come back within this distance of earlier parts are rejected.
const MIN_SEPARATION: f64 = 25.0;

fn self_separated(pl: &Polyline) -> bool {
    let stride = 8;
    for i in (0..pl.points.len()).step_by(stride) {
        for j in ((i + stride)..pl.points.len()).step_by(stride) {
            if pl.s[j] - pl.s[i] > 3.0 * MIN_SEPARATION && dist(pl.points[i], pl.points[j]) < MIN_SEPARATION {
                return false;
            }
        }
    }
    true
}

fn draw_route(seed: u64, difficulty: Difficulty, cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Result<Route> {
    let mut pieces = Vec::new();
    let mut plans = Vec::new();
    let mut obstacle_slots: Vec<(usize, bool)> = Vec::new();
    match difficulty {
        Difficulty::Easy => {
            pieces.push(Piece::Straight {
                length: uniform(rng, cfg.lead_in),
            });
            if rng.gen_bool(cfg.easy_junction_prob) {
                pieces.push(Piece::Junction { turn: random_turn(rng) });
                plans.push(Plan::Next(0));
            }
            pieces.push(Piece::Straight {
                length: uniform(rng, cfg.lead_out),
            });
            if rng.gen_bool(cfg.easy_obstacle_prob) {
                obstacle_slots.push((pieces.len() - 1, false));
            }
        }
        Difficulty::Hard => {
            pieces.push(Piece::Straight {
                length: uniform(rng, cfg.lead_in),
            });
            let mut j = 0;
            if rng.gen_bool(cfg.hard_extra_junction_prob) {
                pieces.push(Piece::Junction { turn: random_turn(rng) });
                plans.push(Plan::Next(j));
                j += 1;
                pieces.push(Piece::Straight {
                    length: uniform(rng, cfg.link),
                });
            }
            pieces.push(Piece::Junction { turn: Turn::Straight });
            pieces.push(Piece::Straight {
                length: uniform(rng, cfg.counting_gap),
            });
            let turn = if rng.gen_bool(0.5) { Turn::Left } else { Turn::Right };
            pieces.push(Piece::Junction { turn });
            plans.push(Plan::Second(j + 1));
            pieces.push(Piece::Straight {
                length: uniform(rng, cfg.lead_out),
            });
            obstacle_slots.push((pieces.len() - 1, true));
        }
    }
    let spans = piece_spans(&pieces);
    let obstacles = obstacle_slots
        .iter()
        .map(|&(idx, occ)| obstacle_on(rng, &spans, idx, (20.0, 20.0), occ))
        .collect();
    let (pl, junctions) = build_centerline(&pieces);
    if !self_separated(&pl) {
        return Err(Error::Generation(format!("route {seed} crosses itself")));
    }
    let segments = segments_for(pl.length(), &junctions, &plans);
    Route::build(seed, difficulty, pieces, obstacles, segments)
}

/// Deterministic route for `(seed, difficulty)`.
pub fn generate_route(seed: u64, difficulty: Difficulty) -> Route {
    generate_route_with(seed, difficulty, &GeneratorConfig::default())
}

pub fn generate_route_with(seed: u64, difficulty: Difficulty, cfg: &GeneratorConfig) -> Route {
    let tag = match difficulty {
        Difficulty::Easy => 0x5eed_0001,
        Difficulty::Hard => 0x5eed_0002,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ tag);
    loop {
        if let Ok(r) = draw_route(seed, difficulty, cfg, &mut rng) {
            return r;
        }
    }
}
