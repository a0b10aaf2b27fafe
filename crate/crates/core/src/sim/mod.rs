//! Deterministic 2D closed-loop driving world.
//!
//! Routes of straight roads and four-way intersections, discrete navigation
//! instructions, static and temporarily occluded obstacles, an expert that
//! produces supervision waypoints, a pure-pursuit follower, infraction
//! detection and route scoring.

mod geometry;
mod route;
mod score;
mod world;

use serde::{Deserialize, Serialize};

pub use geometry::{dist, to_local, to_world, wrap_angle, Polyline, Projection, Vec2};
pub use route::{
    generate_route, generate_route_with, Difficulty, Event, EventKind, GeneratorConfig, Junction, ObstacleSpec, Piece,
    Route, RouteFile, Segment, Turn, JUNCTION_RADIUS,
};
pub use score::{score, Infraction, InfractionKind, RouteMetrics, COLLISION_COEF, OFF_ROUTE_COEF, WRONG_TURN_COEF};
pub use world::{
    expert_waypoints, information_gap_pair, step_dynamics, EgoState, EpisodeEnd, StepRecord, World, CONTROL_PERIOD, DT,
    V_MAX,
};

/// Length of the flattened observation vector.
pub const OBS_DIM: usize = 34;
/// Number of distinct instructions.
pub const NUM_INSTRUCTIONS: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Instruction {
    FollowLane,
    LeftNext,
    RightNext,
    StraightNext,
    /// Go straight at the next intersection and turn left at the one after.
    LeftSecond,
    RightSecond,
}

impl Instruction {
    pub const ALL: [Instruction; NUM_INSTRUCTIONS] = [
        Instruction::FollowLane,
        Instruction::LeftNext,
        Instruction::RightNext,
        Instruction::StraightNext,
        Instruction::LeftSecond,
        Instruction::RightSecond,
    ];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn next(turn: Turn) -> Self {
        match turn {
            Turn::Left => Instruction::LeftNext,
            Turn::Right => Instruction::RightNext,
            Turn::Straight => Instruction::StraightNext,
        }
    }

    /// Turn at the second intersection from here.
    pub fn second(turn: Turn) -> Self {
        match turn {
            Turn::Left => Instruction::LeftSecond,
            Turn::Right => Instruction::RightSecond,
            Turn::Straight => Instruction::StraightNext,
        }
    }

    pub fn is_counting(self) -> bool {
        matches!(self, Instruction::LeftSecond | Instruction::RightSecond)
    }
}
