//! Closed-loop evaluation with pluggable activation policies, FLOP
//! accounting, policy sweeps, activation analysis and ablation grids.

mod ablate;
mod analysis;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::buffer::StreamBuffer;
use crate::connectors::{predict_step_infer, Activation, TraceRecord};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::{Ctx, ParamStore};
use crate::planner::Waypoints;
use crate::sim::{generate_route, Difficulty, EpisodeEnd, Route, RouteMetrics, StepRecord, World};

pub use ablate::{ablate, AblationCell, AblationRow, AblationSpec, QFormerVariant};
pub use analysis::{analyze_activations, ActivationAnalysis, HistogramRow, TimelineRow};

/// When the reasoner runs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum GatePolicy {
    /// Threshold the learned gate.
    Adaptive,
    /// Evenly spaced activations at the given rate.
    Fixed(f64),
    Always,
    Never,
}

impl GatePolicy {
    pub fn name(&self) -> String {
        match self {
            GatePolicy::Adaptive => "adaptive".into(),
            GatePolicy::Fixed(f) => format!("fixed:{f}"),
            GatePolicy::Always => "always".into(),
            GatePolicy::Never => "never".into(),
        }
    }

    /// Forced decision for planning frame `i`, or `None` to ask the gate.
    pub fn decide(&self, i: u64) -> Option<bool> {
        match *self {
            GatePolicy::Adaptive => None,
            GatePolicy::Fixed(f) => Some(fixed_fires(i, f)),
            GatePolicy::Always => Some(true),
            GatePolicy::Never => Some(false),
        }
    }
}

impl std::str::FromStr for GatePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adaptive" => Ok(GatePolicy::Adaptive),
            "always" => Ok(GatePolicy::Always),
            "never" => Ok(GatePolicy::Never),
            other => {
                let rate = other
                    .strip_prefix("fixed:")
                    .and_then(|r| r.parse::<f64>().ok())
                    .filter(|r| (0.0..=1.0).contains(r))
                    .ok_or_else(|| Error::Parse(format!("unknown policy `{other}`")))?;
                Ok(GatePolicy::Fixed(rate))
            }
        }
    }
}

/// Frame `i` activates iff `floor((i + 1) f)` exceeds `floor(i f)`, so the
/// first `n` frames hold exactly `floor(n f)` activations.
pub fn fixed_fires(i: u64, f: f64) -> bool {
    ((i + 1) as f64 * f).floor() > (i as f64 * f).floor()
}

/// A fixed list of evaluation routes and the episode step cap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Suite {
    pub name: String,
    pub routes: Vec<(u64, Difficulty)>,
    pub max_steps: u64,
}

impl Suite {
    /// `easy` easy and `hard` hard routes seeded from `offset`.
    pub fn new(name: &str, easy: usize, hard: usize, offset: u64, max_steps: u64) -> Self {
        let routes = (0..easy as u64)
            .map(|i| (offset + i, Difficulty::Easy))
            .chain((0..hard as u64).map(|i| (offset + i, Difficulty::Hard)))
            .collect();
        Self {
            name: name.into(),
            routes,
            max_steps,
        }
    }

    pub fn tiny() -> Self {
        Self::new("tiny", 10, 10, 0, 200)
    }

    pub fn short() -> Self {
        Self::new("short", 10, 10, 0, 600)
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "short" => Ok(Self::short()),
            other => Err(Error::Parse(format!("unknown suite `{other}` (tiny, short)"))),
        }
    }

    pub fn build(&self) -> Vec<Route> {
        self.routes.iter().map(|&(s, d)| generate_route(s, d)).collect()
    }
}

/// Integer FLOP accounting for one episode.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopLedger {
    pub frames: u64,
    pub frame_cost: u64,
    pub planner_cost: u64,
    pub gate_cost: u64,
    pub gate_calls: u64,
    /// Reasoner calls indexed by snapshot length.
    pub slow_calls_by_slots: Vec<u64>,
    pub slow_flops: u64,
    pub total: u64,
}

impl FlopLedger {
    fn new(model: &Model) -> Self {
        Self {
            frame_cost: model.frame_flops(),
            planner_cost: model.planner_flops(),
            gate_cost: model.gate_flops(),
            slow_calls_by_slots: vec![0; model.config.buffer_capacity + 1],
            ..Self::default()
        }
    }

    pub fn slow_calls(&self) -> u64 {
        self.slow_calls_by_slots.iter().sum()
    }

    /// Everything except the reasoner.
    pub fn fast_flops(&self) -> u64 {
        self.frames * (self.frame_cost + self.planner_cost) + self.gate_calls * self.gate_cost
    }

    /// Recompute the total from call counts and per-call costs.
    pub fn conserved(&self, model: &Model) -> bool {
        let slow: u64 = self
            .slow_calls_by_slots
            .iter()
            .enumerate()
            .map(|(slots, &n)| n * model.slow_flops(slots))
            .sum();
        slow == self.slow_flops && self.total == self.fast_flops() + slow
    }

    fn merge(&mut self, o: &FlopLedger) {
        self.frames += o.frames;
        self.gate_calls += o.gate_calls;
        self.slow_flops += o.slow_flops;
        self.total += o.total;
        for (a, b) in self.slow_calls_by_slots.iter_mut().zip(&o.slow_calls_by_slots) {
            *a += b;
        }
    }
}

/// One planning frame of an evaluation episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameTrace {
    pub frame: u64,
    pub step: u64,
    pub progress: f64,
    pub theta: Option<f64>,
    pub pi: bool,
    pub waypoints: Vec<[f64; 2]>,
}

impl FrameTrace {
    pub fn trace_record(&self) -> TraceRecord {
        TraceRecord {
            t: self.frame,
            theta: self.theta.unwrap_or(f64::NAN),
            pi: self.pi,
            loss_fast: None,
            loss_llm: None,
            gamma: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeReport {
    pub route_seed: u64,
    pub difficulty: Difficulty,
    pub metrics: RouteMetrics,
    pub end: Option<EpisodeEnd>,
    pub frames: u64,
    pub slow_calls: u64,
    pub activation_rate: f64,
    pub flops: FlopLedger,
    pub trace: Vec<FrameTrace>,
    /// Per-simulation-step log, kept only when requested.
    pub steps: Vec<StepRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub policy: GatePolicy,
    pub suite: String,
    pub episodes: Vec<EpisodeReport>,
    pub mean_ds: f64,
    pub mean_rc: f64,
    pub mean_is: f64,
    /// Mean over routes of per-route activation rates.
    pub activation_rate: f64,
    pub flops: FlopLedger,
}

impl EvalReport {
    fn mean_of(&self, d: Option<Difficulty>, f: impl Fn(&EpisodeReport) -> f64) -> f64 {
        let xs: Vec<f64> = self
            .episodes
            .iter()
            .filter(|e| d.is_none_or(|d| e.difficulty == d))
            .map(f)
            .collect();
        if xs.is_empty() {
            f64::NAN
        } else {
            xs.iter().sum::<f64>() / xs.len() as f64
        }
    }

    pub fn ds(&self, d: Option<Difficulty>) -> f64 {
        self.mean_of(d, |e| e.metrics.ds)
    }

    pub fn rate(&self, d: Option<Difficulty>) -> f64 {
        self.mean_of(d, |e| e.activation_rate)
    }

    /// Total FLOPs per planning frame.
    pub fn flops_per_frame(&self) -> f64 {
        self.flops.total as f64 / self.flops.frames.max(1) as f64
    }

    /// Fraction of always-on style compute not spent in the reasoner.
    pub fn fast_share(&self) -> f64 {
        self.flops.fast_flops() as f64 / self.flops.total.max(1) as f64
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EvalOptions {
    /// Keep per-simulation-step state logs.
    pub step_logs: bool,
}

/// Drive one route closed loop.
pub fn run_episode(
    model: &Model,
    store: &ParamStore,
    route: &Route,
    max_steps: u64,
    policy: GatePolicy,
    options: EvalOptions,
) -> Result<EpisodeReport> {
    let mut world = World::new(route, max_steps);
    let mut buffer = StreamBuffer::new(model.config.buffer_capacity, model.config.buffer_policy)?;
    let mut memory: Option<Tensor> = None;
    let mut ledger = FlopLedger::new(model);
    let mut trace = Vec::new();
    let mut steps = Vec::new();
    let mut frame = 0u64;
    while !world.done() {
        let tape = Tape::new();
        let cx = Ctx::new(&tape, store, false);
        let bank = if frame == 0 {
            model.qformer.reset(&cx)
        } else {
            model.qformer.resume(&cx, memory.as_ref())?
        };
        let obs = world.observe();
        let (f, instr, next) = model.perceive(&cx, &obs, world.instruction().id(), &bank)?;
        memory = next.to_tensor();
        buffer.push(f.to_tensor())?;
        let activation = match policy.decide(frame) {
            None => Activation::Gate,
            Some(p) => Activation::Forced(p),
        };
        let out = predict_step_infer(model, &cx, &f, &instr, &buffer, activation)?;
        ledger.frames += 1;
        ledger.gate_calls += u64::from(out.gate_evaluated);
        if out.pi {
            ledger.slow_calls_by_slots[buffer.len()] += 1;
            ledger.slow_flops += out.slow_flops;
        }
        let waypoints = Waypoints::from_tensor(&out.waypoints)?.points;
        trace.push(FrameTrace {
            frame,
            step: world.ego.step,
            progress: world.progress(),
            theta: out.theta,
            pi: out.pi,
            waypoints: waypoints.clone(),
        });
        world.drive(&waypoints);
        if options.step_logs {
            steps.push(world.record());
        }
        frame += 1;
    }
    ledger.total = ledger.fast_flops() + ledger.slow_flops;
    let slow_calls = ledger.slow_calls();
    Ok(EpisodeReport {
        route_seed: route.seed,
        difficulty: route.difficulty,
        metrics: world.metrics(),
        end: world.end(),
        frames: frame,
        slow_calls,
        activation_rate: slow_calls as f64 / frame.max(1) as f64,
        flops: ledger,
        trace,
        steps,
    })
}

/// Evaluate every route of `suite` under `policy`.
pub fn evaluate(
    model: &Model,
    store: &ParamStore,
    suite: &Suite,
    policy: GatePolicy,
    options: EvalOptions,
) -> Result<EvalReport> {
    let routes = suite.build();
    evaluate_routes(model, store, &suite.name, &routes, suite.max_steps, policy, options)
}

pub fn evaluate_routes(
    model: &Model,
    store: &ParamStore,
    suite: &str,
    routes: &[Route],
    max_steps: u64,
    policy: GatePolicy,
    options: EvalOptions,
) -> Result<EvalReport> {
    if routes.is_empty() {
        return Err(Error::Invalid("no routes to evaluate".into()));
    }
    let episodes = routes
        .iter()
        .map(|r| run_episode(model, store, r, max_steps, policy, options))
        .collect::<Result<Vec<_>>>()?;
    let n = episodes.len() as f64;
    let mut flops = FlopLedger::new(model);
    for e in &episodes {
        flops.merge(&e.flops);
    }
    Ok(EvalReport {
        policy,
        suite: suite.into(),
        mean_ds: episodes.iter().map(|e| e.metrics.ds).sum::<f64>() / n,
        mean_rc: episodes.iter().map(|e| e.metrics.rc).sum::<f64>() / n,
        mean_is: episodes.iter().map(|e| e.metrics.is_score).sum::<f64>() / n,
        activation_rate: episodes.iter().map(|e| e.activation_rate).sum::<f64>() / n,
        flops,
        episodes,
    })
}

/// One row of a policy sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub policy: String,
    pub ds: f64,
    pub ds_easy: f64,
    pub ds_hard: f64,
    pub rc: f64,
    pub is_score: f64,
    pub activation_rate: f64,
    pub flops: u64,
    pub flops_per_frame: f64,
}

impl SweepRow {
    pub fn from_report(r: &EvalReport) -> Self {
        Self {
            policy: r.policy.name(),
            ds: r.mean_ds,
            ds_easy: r.ds(Some(Difficulty::Easy)),
            ds_hard: r.ds(Some(Difficulty::Hard)),
            rc: r.mean_rc,
            is_score: r.mean_is,
            activation_rate: r.activation_rate,
            flops: r.flops.total,
            flops_per_frame: r.flops_per_frame(),
        }
    }
}

/// Evaluate each policy on the same routes.
pub fn sweep(
    model: &Model,
    store: &ParamStore,
    suite: &Suite,
    policies: &[GatePolicy],
) -> Result<Vec<(SweepRow, EvalReport)>> {
    if policies.len() < 2 {
        return Err(Error::Invalid("a sweep needs at least two policies".into()));
    }
    let routes = suite.build();
    policies
        .iter()
        .map(|&p| {
            let r = evaluate_routes(
                model,
                store,
                &suite.name,
                &routes,
                suite.max_steps,
                p,
                EvalOptions::default(),
            )?;
            Ok((SweepRow::from_report(&r), r))
        })
        .collect()
}

/// Per-route summary line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouteRow {
    pub route_seed: u64,
    pub difficulty: String,
    pub ds: f64,
    pub rc: f64,
    pub is_score: f64,
    pub collisions: usize,
    pub off_route: usize,
    pub wrong_turns: usize,
    pub frames: u64,
    pub slow_calls: u64,
    pub activation_rate: f64,
    pub flops: u64,
}

impl RouteRow {
    pub fn from_episode(e: &EpisodeReport) -> Self {
        Self {
            route_seed: e.route_seed,
            difficulty: format!("{:?}", e.difficulty).to_lowercase(),
            ds: e.metrics.ds,
            rc: e.metrics.rc,
            is_score: e.metrics.is_score,
            collisions: e.metrics.collisions,
            off_route: e.metrics.off_route,
            wrong_turns: e.metrics.wrong_turns,
            frames: e.frames,
            slow_calls: e.slow_calls,
            activation_rate: e.activation_rate,
            flops: e.flops.total,
        }
    }
}

/// Write rows with a header derived from the row type.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Header line a row type produces.
pub fn csv_header<T: Serialize>(row: &T) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.serialize(row)?;
    let bytes = w.into_inner().map_err(|e| Error::Invalid(e.to_string()))?;
    let text = String::from_utf8(bytes).map_err(|e| Error::Invalid(e.to_string()))?;
    Ok(text.lines().next().unwrap_or_default().to_string())
}
