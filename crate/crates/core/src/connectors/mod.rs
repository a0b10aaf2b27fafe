//! Gating and fusion between the planner and the context reasoner.
//!
//! The gate maps the pooled aggregator output to a confidence `theta`. During
//! training a straight-through Gumbel sample turns it into the activation
//! decision `pi`; at inference `pi = [theta >= 0.5]`. When active, the
//! reasoner's tokens are added to the planner input scaled by `theta`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tensor, Var};
use crate::buffer::StreamBuffer;
use crate::error::{shape_err, Error, Result};
use crate::model::{ConnectorMode, Model};
use crate::nn::{gumbel_binary, Ctx, Mlp, ParamStore};
use crate::planner::trajectory_loss_var;

/// Two-layer MLP over mean-pooled tokens, squashed to (0, 1).
#[derive(Clone, Debug)]
pub struct Gate {
    pub mlp: Mlp,
    pub dim: usize,
}

impl Gate {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            mlp: Mlp::new(store, name, &[dim, hidden, 1])?,
            dim,
        })
    }

    /// Confidence as a `1 x 1` value.
    pub fn theta<'t>(&self, cx: &Ctx<'t, '_>, f_prime: &Var<'t>) -> Result<Var<'t>> {
        let s = f_prime.shape();
        if s.len() != 2 || s[1] != self.dim {
            return Err(shape_err(
                "gate input",
                &[s.first().copied().unwrap_or(0), self.dim],
                &s,
            ));
        }
        let pooled = f_prime.mean_axis(0)?.reshape(&[1, self.dim])?;
        Ok(self.mlp.forward(cx, &pooled)?.sigmoid())
    }

    pub fn flops(&self) -> u64 {
        self.mlp.flops(1)
    }
}

/// Deterministic inference rule.
pub fn infer_pi(theta: f64) -> bool {
    theta >= 0.5
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    pub theta: f64,
    pub pi: bool,
    /// Relaxed sample; only present in training.
    pub soft_pi: Option<f64>,
}

/// Margin penalty and adaptive loss for one step.
///
/// `gamma = max(d - (L - L_llm), 0)`, `L_ada = pi (L_llm + gamma) + (1 - pi) L`.
pub fn adaptive_activation_loss(pi: bool, loss_fast: f64, loss_llm: f64, margin: f64) -> Result<(f64, f64)> {
    if !(loss_fast.is_finite() && loss_llm.is_finite() && margin.is_finite()) {
        return Err(Error::Invalid(format!(
            "adaptive loss inputs must be finite: L={loss_fast}, L_llm={loss_llm}, d={margin}"
        )));
    }
    let gamma = (margin - (loss_fast - loss_llm)).max(0.0);
    let p = if pi { 1.0 } else { 0.0 };
    Ok((gamma, p * (loss_llm + gamma) + (1.0 - p) * loss_fast))
}

/// Activation that minimizes the adaptive loss: on iff `L_llm + gamma < L`.
///
/// With the penalty active this reduces to `L - L_llm > d / 2`, not `> d`.
pub fn optimal_pi(loss_fast: f64, loss_llm: f64, margin: f64) -> bool {
    let gamma = (margin - (loss_fast - loss_llm)).max(0.0);
    loss_llm + gamma < loss_fast
}

/// `f' + theta f''`.
pub fn fuse(f_prime: &Tensor, f_doubleprime: &Tensor, theta: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&theta) {
        return Err(Error::Invalid(format!("fusion weight {theta} outside [0, 1]")));
    }
    Ok(f_prime.zip_map(f_doubleprime, |a, b| a + theta * b)?)
}

fn fuse_var<'t>(f_prime: &Var<'t>, f_doubleprime: &Var<'t>, theta: &Var<'t>) -> Result<Var<'t>> {
    Ok(f_prime.add(&f_doubleprime.mul(theta)?)?)
}

/// Everything recorded about one training step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub loss_fast: f64,
    pub loss_llm: f64,
    pub loss_fuse: f64,
    pub gamma: f64,
    pub loss_ada: f64,
    pub margin: f64,
    pub theta: f64,
    pub pi: bool,
}

impl StepLosses {
    pub fn new(pi: bool, theta: f64, loss_fast: f64, loss_llm: f64, loss_fuse: f64, margin: f64) -> Result<Self> {
        let (gamma, loss_ada) = adaptive_activation_loss(pi, loss_fast, loss_llm, margin)?;
        Ok(Self {
            loss_fast,
            loss_llm,
            loss_fuse,
            gamma,
            loss_ada,
            margin,
            theta,
            pi,
        })
    }
}

/// Per-step trace record for timeline analysis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: u64,
    pub theta: f64,
    pub pi: bool,
    #[serde(rename = "L_T")]
    pub loss_fast: Option<f64>,
    #[serde(rename = "L_LLM")]
    pub loss_llm: Option<f64>,
    pub gamma: Option<f64>,
}

impl TraceRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("plain struct serializes")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    /// Branch losses only; the reasoner is always consulted.
    Warmup,
    Adaptive,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub margin: f64,
    /// Weight of the auxiliary branch losses after warmup.
    pub aux_weight: f64,
    pub temperature: f64,
}

impl Default for Objective {
    fn default() -> Self {
        Self {
            margin: 0.3,
            aux_weight: 0.1,
            temperature: 1.0,
        }
    }
}

/// Result of one training-mode step on the tape.
pub struct TrainStep<'t> {
    pub total: Var<'t>,
    pub losses: StepLosses,
    pub decision: Option<GateDecision>,
    pub slow_calls: usize,
}

/// Training-mode step.
///
/// Computes `W = P(f')`, `W_llm = P(f' + f'')` and `W_fuse = P(f' + theta f'')`
/// from a single reasoner call, and the phase's objective.
#[allow(clippy::too_many_arguments)]
pub fn predict_step_train<'t>(
    model: &Model,
    cx: &Ctx<'t, '_>,
    f_prime: &Var<'t>,
    instruction: &Var<'t>,
    snapshot: &[Var<'t>],
    target: &Var<'t>,
    phase: Phase,
    objective: &Objective,
    rng: &mut impl Rng,
) -> Result<TrainStep<'t>> {
    let w = model.planner.plan(cx, f_prime)?;
    let l_fast = trajectory_loss_var(&w, target)?;
    let (slow, gate) = match (&model.slow, &model.gate, model.config.connectors) {
        (Some(s), Some(g), ConnectorMode::WOnly | ConnectorMode::Full) => (s, g),
        _ => {
            let v = l_fast.item();
            return Ok(TrainStep {
                total: l_fast,
                losses: StepLosses::new(false, 0.0, v, v, v, objective.margin)?,
                decision: None,
                slow_calls: 0,
            });
        }
    };
    let f2 = slow.reason(cx, instruction, snapshot)?;
    let w_llm = model.planner.plan(cx, &f_prime.add(&f2)?)?;
    let l_llm = trajectory_loss_var(&w_llm, target)?;

    let theta_live = gate.theta(cx, &f_prime.detach())?;
    let theta = match phase {
        Phase::Warmup => theta_live.detach(),
        Phase::Adaptive => theta_live,
    };
    let full = model.config.connectors == ConnectorMode::Full;
    let l_fuse = if full {
        let w_fuse = model.planner.plan(cx, &fuse_var(f_prime, &f2, &theta)?)?;
        Some(trajectory_loss_var(&w_fuse, target)?)
    } else {
        None
    };
    let (lf, ll) = (l_fast.item(), l_llm.item());
    let lfu = l_fuse.as_ref().map_or(ll, |v| v.item());

    match phase {
        Phase::Warmup => {
            let mut total = l_fast.add(&l_llm)?;
            if let Some(l) = &l_fuse {
                total = total.add(l)?;
            }
            let th = theta.item();
            Ok(TrainStep {
                total,
                losses: StepLosses::new(true, th, lf, ll, lfu, objective.margin)?,
                decision: Some(GateDecision {
                    theta: th,
                    pi: true,
                    soft_pi: None,
                }),
                slow_calls: 1,
            })
        }
        Phase::Adaptive => {
            let sample = gumbel_binary(&theta, objective.temperature, rng)?;
            let pi = sample.pi.item() == 1.0;
            let losses = StepLosses::new(pi, theta.item(), lf, ll, lfu, objective.margin)?;
            // The gate's gradient sees only the loss values; the chosen branch is
            // trained through its own loss. The margin penalty is a constant so it
            // cannot reward degrading the fast branch.
            let pi_hard = sample.pi.detach();
            let branches = pi_hard
                .mul(&l_llm.reshape(&[1, 1])?)?
                .add(&pi_hard.neg().add_scalar(1.0).mul(&l_fast.reshape(&[1, 1])?)?)?;
            let choice = sample
                .pi
                .scale(ll + losses.gamma)
                .add(&sample.pi.neg().add_scalar(1.0).scale(lf))?;
            let ada = choice
                .sub(&choice.detach())?
                .add(&branches)?
                .add_scalar(pi_hard.item() * losses.gamma)
                .reshape(&[])?;
            let mut total = ada.add(&l_fast.add(&l_llm)?.scale(objective.aux_weight))?;
            if let Some(l) = &l_fuse {
                total = total.add(l)?;
            }
            Ok(TrainStep {
                total,
                losses,
                decision: Some(GateDecision {
                    theta: theta.item(),
                    pi,
                    soft_pi: Some(sample.soft),
                }),
                slow_calls: 1,
            })
        }
    }
}

/// How the activation decision is made at inference.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    /// Threshold the gate's confidence.
    Gate,
    /// Externally forced decision; the gate still supplies the fusion weight.
    Forced(bool),
}

/// Result of one inference step.
#[derive(Clone, Debug, PartialEq)]
pub struct InferStep {
    pub waypoints: Tensor,
    pub theta: Option<f64>,
    pub pi: bool,
    pub gate_evaluated: bool,
    /// Cost of the reasoner call, zero when it was skipped.
    pub slow_flops: u64,
}

/// Inference-mode step: `P(f')` when inactive, `P(f' + theta f'')` when active.
pub fn predict_step_infer<'t>(
    model: &Model,
    cx: &Ctx<'t, '_>,
    f_prime: &Var<'t>,
    instruction: &Var<'t>,
    buffer: &StreamBuffer<Tensor>,
    activation: Activation,
) -> Result<InferStep> {
    let (slow, gate) = match (&model.slow, &model.gate) {
        (Some(s), Some(g)) if model.config.connectors != ConnectorMode::None => (s, g),
        _ => {
            if activation == Activation::Forced(true) {
                return Err(Error::Invalid("model has no reasoner to activate".into()));
            }
            return Ok(InferStep {
                waypoints: model.planner.plan(cx, f_prime)?.to_tensor(),
                theta: None,
                pi: false,
                gate_evaluated: false,
                slow_flops: 0,
            });
        }
    };
    if activation == Activation::Forced(false) {
        return Ok(InferStep {
            waypoints: model.planner.plan(cx, f_prime)?.to_tensor(),
            theta: None,
            pi: false,
            gate_evaluated: false,
            slow_flops: 0,
        });
    }
    let theta = gate.theta(cx, f_prime)?;
    let th = theta.item();
    let pi = match activation {
        Activation::Gate => infer_pi(th),
        Activation::Forced(p) => p,
    };
    if !pi {
        return Ok(InferStep {
            waypoints: model.planner.plan(cx, f_prime)?.to_tensor(),
            theta: Some(th),
            pi,
            gate_evaluated: true,
            slow_flops: 0,
        });
    }
    let snapshot: Vec<Var<'t>> = buffer.slots().iter().map(|t| cx.constant(t.clone())).collect();
    let f2 = slow.reason(cx, instruction, &snapshot)?;
    let weight = match model.config.connectors {
        ConnectorMode::WOnly => cx.constant(Tensor::filled(&[1, 1], 1.0)),
        _ => theta,
    };
    let fused = fuse_var(f_prime, &f2, &weight)?;
    Ok(InferStep {
        waypoints: model.planner.plan(cx, &fused)?.to_tensor(),
        theta: Some(th),
        pi,
        gate_evaluated: true,
        slow_flops: slow.flops(snapshot.len()),
    })
}
