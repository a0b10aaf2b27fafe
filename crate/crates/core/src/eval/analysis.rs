//! Activation-rate histograms and per-route activation timelines.

use serde::{Deserialize, Serialize};

use super::EvalReport;
use crate::sim::{generate_route, Difficulty, Route};

/// Frames this close to an intersection frame count as near the event.
const EVENT_WINDOW: i64 = 5;
const BINS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub routes: usize,
    pub easy: usize,
    pub hard: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimelineRow {
    pub route_seed: u64,
    pub frame: u64,
    pub step: u64,
    pub progress: f64,
    pub theta: f64,
    pub pi: u8,
    /// `intersection`, `occlusion`, both joined by `+`, or empty.
    pub event: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationAnalysis {
    pub histogram: Vec<HistogramRow>,
    pub timelines: Vec<(u64, Difficulty, Vec<TimelineRow>)>,
    pub easy_rate: f64,
    pub hard_rate: f64,
    /// Activation rate on frames within five frames of an intersection.
    pub event_density: f64,
    /// Activation rate on all other frames.
    pub background_density: f64,
}

fn events_at(route: &Route, progress: f64) -> String {
    let mut tags = Vec::new();
    if route
        .junctions
        .iter()
        .any(|j| progress >= j.s_entry && progress <= j.s_exit)
    {
        tags.push("intersection");
    }
    if route
        .obstacles
        .iter()
        .any(|o| o.occluded && o.s > progress && o.s - progress <= 15.0)
    {
        tags.push("occlusion");
    }
    tags.join("+")
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        f64::NAN
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

pub fn analyze_activations(report: &EvalReport) -> ActivationAnalysis {
    let mut histogram: Vec<HistogramRow> = (0..BINS)
        .map(|b| HistogramRow {
            bin_lo: b as f64 / BINS as f64,
            bin_hi: (b + 1) as f64 / BINS as f64,
            routes: 0,
            easy: 0,
            hard: 0,
        })
        .collect();
    let mut timelines = Vec::new();
    let (mut near_on, mut near_n, mut far_on, mut far_n) = (0usize, 0usize, 0usize, 0usize);
    for e in &report.episodes {
        let bin = ((e.activation_rate * BINS as f64) as usize).min(BINS - 1);
        histogram[bin].routes += 1;
        match e.difficulty {
            Difficulty::Easy => histogram[bin].easy += 1,
            Difficulty::Hard => histogram[bin].hard += 1,
        }
        let route = generate_route(e.route_seed, e.difficulty);
        let rows: Vec<TimelineRow> = e
            .trace
            .iter()
            .map(|t| TimelineRow {
                route_seed: e.route_seed,
                frame: t.frame,
                step: t.step,
                progress: t.progress,
                theta: t.theta.unwrap_or(f64::NAN),
                pi: u8::from(t.pi),
                event: events_at(&route, t.progress),
            })
            .collect();
        let hits: Vec<i64> = rows
            .iter()
            .filter(|r| r.event.contains("intersection"))
            .map(|r| r.frame as i64)
            .collect();
        for r in &rows {
            let f = r.frame as i64;
            let near = hits.iter().any(|&h| (h - f).abs() <= EVENT_WINDOW);
            if near {
                near_n += 1;
                near_on += usize::from(r.pi);
            } else {
                far_n += 1;
                far_on += usize::from(r.pi);
            }
        }
        timelines.push((e.route_seed, e.difficulty, rows));
    }
    let rates = |d: Difficulty| -> Vec<f64> {
        report
            .episodes
            .iter()
            .filter(|e| e.difficulty == d)
            .map(|e| e.activation_rate)
            .collect()
    };
    ActivationAnalysis {
        histogram,
        timelines,
        easy_rate: mean(&rates(Difficulty::Easy)),
        hard_rate: mean(&rates(Difficulty::Hard)),
        event_density: near_on as f64 / near_n.max(1) as f64,
        background_density: far_on as f64 / far_n.max(1) as f64,
    }
}
