//! A labelled toy problem for the gate alone: on "hard" samples the reasoner
//! lowers the loss by twice the margin, elsewhere it does not help.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::connectors::{adaptive_activation_loss, infer_pi, Gate};
use crate::error::Result;
use crate::nn::{gumbel_binary, AdamW, AdamWConfig, Ctx, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub tokens: usize,
    pub dim: usize,
    pub hidden: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub margin: f64,
    pub temperature: f64,
    /// Mean shift of the signal channels on hard samples.
    pub signal: f64,
    pub eval_samples: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            tokens: 8,
            dim: 32,
            hidden: 64,
            steps: 300,
            batch: 32,
            lr: 3e-3,
            margin: 0.3,
            temperature: 1.0,
            signal: 0.5,
            eval_samples: 2000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticResult {
    pub hard_rate: f64,
    pub easy_rate: f64,
}

struct Sample {
    tokens: Tensor,
    hard: bool,
}

fn sample(rng: &mut impl Rng, c: &SyntheticConfig) -> Sample {
    let hard = rng.gen_bool(0.5);
    let shift = if hard { c.signal } else { -c.signal };
    let data = (0..c.tokens * c.dim)
        .map(|i| {
            let noise = rng.gen_range(-1.0..1.0);
            if i % c.dim < 4 {
                noise + shift
            } else {
                noise
            }
        })
        .collect();
    Sample {
        tokens: Tensor::new(vec![c.tokens, c.dim], data).expect("sized above"),
        hard,
    }
}

/// Branch losses of the toy problem.
fn losses(hard: bool, margin: f64) -> (f64, f64) {
    if hard {
        (1.0, 1.0 - 2.0 * margin)
    } else {
        (1.0, 1.0)
    }
}

/// Train a fresh gate on the adaptive loss alone and report its inference
/// activation rate on held-out hard and easy samples.
pub fn synthetic_gate_task(c: &SyntheticConfig) -> Result<SyntheticResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let mut store = ParamStore::new(c.seed);
    let gate = Gate::new(&mut store, "gate", c.dim, c.hidden)?;
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: c.lr,
            horizon: c.steps as u64,
            weight_decay: 0.0,
            ..AdamWConfig::default()
        },
        &store,
    )?;
    for _ in 0..c.steps {
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &store, true);
        cx.bind_all();
        let mut terms: Vec<Var> = Vec::with_capacity(c.batch);
        for _ in 0..c.batch {
            let s = sample(&mut rng, c);
            let theta = gate.theta(&cx, &cx.constant(s.tokens))?;
            let g = gumbel_binary(&theta, c.temperature, &mut rng)?;
            let (lf, ll) = losses(s.hard, c.margin);
            let (gamma, _) = adaptive_activation_loss(g.pi.item() == 1.0, lf, ll, c.margin)?;
            let on = ll + gamma;
            terms.push(g.pi.scale(on).add(&g.pi.neg().add_scalar(1.0).scale(lf))?);
        }
        let mut total = terms[0];
        for t in &terms[1..] {
            total = total.add(t)?;
        }
        let loss = total.scale(1.0 / c.batch as f64).reshape(&[])?;
        let grads = tape.backward(loss)?;
        for (id, g) in cx.param_grads(&grads) {
            store.accumulate(id, &g)?;
        }
        opt.step(&mut store)?;
    }
    let (mut hard_on, mut hard_n, mut easy_on, mut easy_n) = (0usize, 0usize, 0usize, 0usize);
    let tape = Tape::new();
    let cx = Ctx::new(&tape, &store, false);
    for _ in 0..c.eval_samples {
        let s = sample(&mut rng, c);
        let on = infer_pi(gate.theta(&cx, &cx.constant(s.tokens))?.item());
        if s.hard {
            hard_n += 1;
            hard_on += usize::from(on);
        } else {
            easy_n += 1;
            easy_on += usize::from(on);
        }
    }
    Ok(SyntheticResult {
        hard_rate: hard_on as f64 / hard_n.max(1) as f64,
        easy_rate: easy_on as f64 / easy_n.max(1) as f64,
    })
}
