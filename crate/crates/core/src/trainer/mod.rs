//! Behaviour-cloning training: demonstrations, the two-phase objective with
//! truncated backpropagation through the aggregator memory, and checkpoints.
//!
//! Episodes are processed in groups of `batch` lanes advanced in lockstep.
//! Each optimizer step covers one window of up to `bptt` frames per lane;
//! aggregator memory and the frame buffer are carried across windows as
//! plain tensors, so gradients never cross a window boundary.

mod dataset;
mod synthetic;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::buffer::StreamBuffer;
use crate::connectors::{predict_step_train, Objective, Phase};
use crate::error::{Error, Result};
use crate::model::{config_hash, ConnectorMode, Model, ModelConfig};
use crate::nn::{AdamW, AdamWConfig, Ctx, ParamSnapshot, ParamStore};

pub use dataset::{build_dataset, expert_metrics, noisy_rollout, route_plan, Dataset, Episode, Frame};
pub use synthetic::{synthetic_gate_task, SyntheticConfig, SyntheticResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    /// Number of demonstration routes.
    pub routes: usize,
    pub hard_fraction: f64,
    /// Largest lateral offset (m) of an injected perturbation.
    pub noise: f64,
    /// Fraction of frames whose executed plan is perturbed.
    pub noise_prob: f64,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub margin: f64,
    pub aux_weight: f64,
    pub temperature: f64,
    /// Frames per truncated backpropagation window.
    pub bptt: usize,
    /// Episodes advanced in lockstep.
    pub batch: usize,
    pub grad_clip: f64,
    /// Simulation step cap per demonstration.
    pub max_steps: u64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            routes: 64,
            hard_fraction: 0.5,
            noise: 1.0,
            noise_prob: 0.5,
            epochs: 15,
            lr: 1e-3,
            weight_decay: 0.01,
            warmup_fraction: 0.3,
            margin: 0.3,
            aux_weight: 0.1,
            temperature: 1.0,
            bptt: 8,
            batch: 4,
            grad_clip: 1.0,
            max_steps: 600,
            model: ModelConfig::desk(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("routes", self.routes as f64),
            ("epochs", self.epochs as f64),
            ("lr", self.lr),
            ("bptt", self.bptt as f64),
            ("batch", self.batch as f64),
            ("grad_clip", self.grad_clip),
            ("max_steps", self.max_steps as f64),
            ("temperature", self.temperature),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| !(*v > 0.0)) {
            return Err(Error::Invalid(format!("`{name}` must be positive")));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Invalid("`warmup_fraction` must lie in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.hard_fraction) || !(0.0..=1.0).contains(&self.noise_prob) {
            return Err(Error::Invalid("fractions must lie in [0, 1]".into()));
        }
        if self.margin < 0.0 || self.aux_weight < 0.0 || self.noise < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Invalid(
                "margin, aux_weight, noise and weight_decay must be >= 0".into(),
            ));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }

    pub fn objective(&self) -> Objective {
        Objective {
            margin: self.margin,
            aux_weight: self.aux_weight,
            temperature: self.temperature,
        }
    }

    /// Parse flat `key = value` lines; nested fields use dotted keys
    /// (`model.n_memory = 0`). Unlisted keys keep their defaults.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut root = serde_json::to_value(Self::default())?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("line {}: expected `key = value`", lineno + 1)))?;
            let value = value.trim();
            let parsed = serde_json::from_str(value).unwrap_or_else(|_| serde_json::Value::String(value.to_string()));
            let mut slot = &mut root;
            for part in key.trim().split('.') {
                slot = slot
                    .get_mut(part)
                    .ok_or_else(|| Error::Parse(format!("line {}: unknown key `{}`", lineno + 1, key.trim())))?;
            }
            *slot = parsed;
        }
        let config: Self = serde_json::from_value(root).map_err(|e| Error::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        if text.trim_start().starts_with('{') {
            let config: Self = serde_json::from_str(&text)?;
            config.validate()?;
            Ok(config)
        } else {
            Self::from_kv(&text)
        }
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub epoch: usize,
    pub phase: String,
    pub lr: f64,
    pub loss_fast: f64,
    pub loss_llm: f64,
    pub loss_fuse: f64,
    pub gamma: f64,
    pub activation_rate: f64,
    pub frames: usize,
}

/// Per-epoch means over frames.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub loss_fast: f64,
    pub loss_llm: f64,
    pub loss_fuse: f64,
    pub gamma: f64,
    pub activation_rate: f64,
    pub frames: usize,
    pub slow_calls: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub config_hash: String,
    pub step: u64,
    /// Epochs completed.
    pub epoch: usize,
    pub params: ParamSnapshot,
    pub optimizer: AdamW,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        Ok(serde_json::from_str(json)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_json()?)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Rebuild the model and its parameters.
    pub fn restore(&self) -> Result<(Model, ParamStore)> {
        if self.config.hash() != self.config_hash {
            return Err(Error::ConfigMismatch {
                expected: self.config_hash.clone(),
                got: self.config.hash(),
            });
        }
        let mut store = ParamStore::new(self.params.seed);
        let model = Model::new(&mut store, &self.config.model)?;
        store.load_snapshot(&self.params)?;
        Ok((model, store))
    }
}

/// Running sums for one window or epoch.
#[derive(Clone, Copy, Debug, Default)]
struct Tally {
    frames: usize,
    fast: f64,
    llm: f64,
    fuse: f64,
    gamma: f64,
    active: f64,
    slow_calls: usize,
}

impl Tally {
    fn merge(&mut self, o: &Tally) {
        self.frames += o.frames;
        self.fast += o.fast;
        self.llm += o.llm;
        self.fuse += o.fuse;
        self.gamma += o.gamma;
        self.active += o.active;
        self.slow_calls += o.slow_calls;
    }

    fn mean(&self, v: f64) -> f64 {
        v / self.frames.max(1) as f64
    }
}

/// Per-lane state carried between windows.
struct Lane {
    episode: usize,
    t: usize,
    memory: Option<Tensor>,
    buffer: StreamBuffer<Tensor>,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub store: ParamStore,
    pub optimizer: AdamW,
    pub step: u64,
    /// Epochs completed.
    pub epoch: usize,
    pub metrics: Vec<MetricsRow>,
    pub summaries: Vec<EpochSummary>,
}

impl Trainer {
    /// `frames` sizes the learning-rate schedule.
    pub fn new(config: TrainConfig, frames: usize) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(config.seed);
        let model = Model::new(&mut store, &config.model)?;
        let per_epoch = frames.div_ceil(config.batch * config.bptt).max(1);
        let optimizer = AdamW::new(
            AdamWConfig {
                lr: config.lr,
                weight_decay: config.weight_decay,
                horizon: (per_epoch * config.epochs) as u64,
                ..AdamWConfig::default()
            },
            &store,
        )?;
        Ok(Self {
            config,
            model,
            store,
            optimizer,
            step: 0,
            epoch: 0,
            metrics: Vec::new(),
            summaries: Vec::new(),
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let (model, store) = ck.restore()?;
        Ok(Self {
            config: ck.config.clone(),
            model,
            store,
            optimizer: ck.optimizer.clone(),
            step: ck.step,
            epoch: ck.epoch,
            metrics: Vec::new(),
            summaries: Vec::new(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            config_hash: self.config.hash(),
            step: self.step,
            epoch: self.epoch,
            params: self.store.to_snapshot(),
            optimizer: self.optimizer.clone(),
        }
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    /// Train the remaining epochs, handing a checkpoint to `on_epoch` after each.
    pub fn train(&mut self, data: &Dataset, mut on_epoch: impl FnMut(&Trainer) -> Result<()>) -> Result<()> {
        while !self.finished() {
            self.run_epoch(data)?;
            on_epoch(self)?;
        }
        Ok(())
    }

    fn phase(&self, progress: f64) -> Phase {
        let connected = self.config.model.connectors != ConnectorMode::None;
        if connected && progress >= self.config.warmup_fraction {
            Phase::Adaptive
        } else {
            Phase::Warmup
        }
    }

    pub fn run_epoch(&mut self, data: &Dataset) -> Result<EpochSummary> {
        if data.episodes.is_empty() {
            return Err(Error::Invalid("empty dataset".into()));
        }
        let epoch = self.epoch;
        let mix = (epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let mut order_rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ mix);
        let mut sample_rng = ChaCha8Rng::seed_from_u64(self.config.seed.rotate_left(32) ^ mix);
        let mut order: Vec<usize> = (0..data.episodes.len()).collect();
        order.shuffle(&mut order_rng);

        let groups: Vec<&[usize]> = order.chunks(self.config.batch).collect();
        let mut total = Tally::default();
        for (gi, group) in groups.iter().enumerate() {
            let progress = (epoch as f64 + gi as f64 / groups.len() as f64) / self.config.epochs as f64;
            let phase = self.phase(progress);
            let mut lanes = group
                .iter()
                .map(|&episode| {
                    Ok(Lane {
                        episode,
                        t: 0,
                        memory: None,
                        buffer: StreamBuffer::new(self.config.model.buffer_capacity, self.config.model.buffer_policy)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            while lanes.iter().any(|l| l.t < data.episodes[l.episode].frames.len()) {
                let tally = self.window(data, &mut lanes, phase, &mut sample_rng)?;
                total.merge(&tally);
                self.metrics.push(MetricsRow {
                    step: self.step,
                    epoch,
                    phase: format!("{phase:?}").to_lowercase(),
                    lr: self.optimizer.current_lr(),
                    loss_fast: tally.mean(tally.fast),
                    loss_llm: tally.mean(tally.llm),
                    loss_fuse: tally.mean(tally.fuse),
                    gamma: tally.mean(tally.gamma),
                    activation_rate: tally.mean(tally.active),
                    frames: tally.frames,
                });
            }
        }
        self.epoch += 1;
        let summary = EpochSummary {
            epoch,
            loss_fast: total.mean(total.fast),
            loss_llm: total.mean(total.llm),
            loss_fuse: total.mean(total.fuse),
            gamma: total.mean(total.gamma),
            activation_rate: total.mean(total.active),
            frames: total.frames,
            slow_calls: total.slow_calls,
        };
        self.summaries.push(summary.clone());
        Ok(summary)
    }

    /// One optimizer step over up to `bptt` frames of every live lane.
    fn window(&mut self, data: &Dataset, lanes: &mut [Lane], phase: Phase, rng: &mut ChaCha8Rng) -> Result<Tally> {
        let objective = self.config.objective();
        let connected = self.config.model.connectors != ConnectorMode::None;
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &self.store, true);
        cx.bind_all();
        let model = &self.model;
        let mut terms: Vec<Var> = Vec::new();
        let mut tally = Tally::default();
        for lane in lanes.iter_mut() {
            let frames = &data.episodes[lane.episode].frames;
            if lane.t >= frames.len() {
                continue;
            }
            let mut bank = if lane.t == 0 {
                model.qformer.reset(&cx)
            } else {
                model.qformer.resume(&cx, lane.memory.as_ref())?
            };
            let end = (lane.t + self.config.bptt).min(frames.len());
            // Slots from earlier windows enter as constants; this window's frames stay live.
            let mut buffer = lane.buffer.map(|t| cx.constant(t.clone()));
            for frame in &frames[lane.t..end] {
                let (f, instr, next) = model.perceive(&cx, &frame.obs, frame.instruction, &bank)?;
                bank = next;
                buffer.push(f)?;
                let snapshot = buffer.snapshot();
                let target = cx.constant(Tensor::new(
                    vec![frame.target.len(), 2],
                    frame.target.iter().flatten().copied().collect(),
                )?);
                let out = predict_step_train(model, &cx, &f, &instr, &snapshot, &target, phase, &objective, rng)?;
                if out.slow_calls != usize::from(connected) {
                    return Err(Error::Invalid(format!(
                        "training step made {} reasoner calls",
                        out.slow_calls
                    )));
                }
                let l = out.losses;
                for (name, v) in [("L_T", l.loss_fast), ("L_LLM", l.loss_llm), ("L_Fuse", l.loss_fuse)] {
                    if !v.is_finite() {
                        return Err(Error::Divergence {
                            step: self.step,
                            component: name.into(),
                        });
                    }
                }
                tally.frames += 1;
                tally.fast += l.loss_fast;
                tally.llm += l.loss_llm;
                tally.fuse += l.loss_fuse;
                tally.gamma += l.gamma;
                tally.active += if l.pi { 1.0 } else { 0.0 };
                tally.slow_calls += out.slow_calls;
                terms.push(out.total);
            }
            lane.t = end;
            lane.memory = bank.to_tensor();
            lane.buffer = buffer.map(|v| v.to_tensor());
        }
        let mut loss = terms[0];
        for t in &terms[1..] {
            loss = loss.add(t)?;
        }
        let loss = loss.scale(1.0 / terms.len() as f64);
        let grads = tape.backward(loss)?;
        let pairs = cx.param_grads(&grads);
        drop(cx);
        for (id, g) in pairs {
            self.store.accumulate(id, &g)?;
        }
        self.store.clip_grad_norm(self.config.grad_clip);
        self.optimizer.step(&mut self.store).map_err(|e| match e {
            Error::NonFiniteGrad(name) => Error::Divergence {
                step: self.step,
                component: name,
            },
            other => other,
        })?;
        self.step += 1;
        Ok(tally)
    }
}

/// Build the dataset and train from scratch.
pub fn train(config: &TrainConfig, data: &Dataset) -> Result<Trainer> {
    let mut trainer = Trainer::new(config.clone(), data.num_frames())?;
    trainer.train(data, |_| Ok(()))?;
    Ok(trainer)
}

#[cfg(test)]
mod tests;
