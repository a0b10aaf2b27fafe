//! Infractions and route scores.

use serde::{Deserialize, Serialize};

pub const COLLISION_COEF: f64 = 0.65;
pub const OFF_ROUTE_COEF: f64 = 0.7;
pub const WRONG_TURN_COEF: f64 = 0.7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InfractionKind {
    Collision,
    OffRoute,
    WrongTurn,
}

impl InfractionKind {
    pub fn coefficient(self) -> f64 {
        match self {
            InfractionKind::Collision => COLLISION_COEF,
            InfractionKind::OffRoute => OFF_ROUTE_COEF,
            InfractionKind::WrongTurn => WRONG_TURN_COEF,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Infraction {
    pub kind: InfractionKind,
    pub step: u64,
    /// Obstacle or intersection index; zone counter for off-route.
    pub object: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RouteMetrics {
    pub rc: f64,
    pub is_score: f64,
    pub ds: f64,
    pub collisions: usize,
    pub off_route: usize,
    pub wrong_turns: usize,
}

/// `rc = traversed / length` clamped to [0, 1], `is` = product of coefficients, `ds = rc * is`.
pub fn score(route_length: f64, traversed: f64, infractions: &[Infraction]) -> RouteMetrics {
    let rc = if route_length > 0.0 {
        (traversed / route_length).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let is_score = infractions.iter().map(|i| i.kind.coefficient()).product::<f64>();
    let count = |k| infractions.iter().filter(|i| i.kind == k).count();
    RouteMetrics {
        rc,
        is_score,
        ds: rc * is_score,
        collisions: count(InfractionKind::Collision),
        off_route: count(InfractionKind::OffRoute),
        wrong_turns: count(InfractionKind::WrongTurn),
    }
}
