//! Model configuration and the assembled network.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tensor, Var};
use crate::buffer::EvictionPolicy;
use crate::connectors::Gate;
use crate::error::{Error, Result};
use crate::nn::{Ctx, ParamStore};
use crate::planner::Planner;
use crate::qformer::{FrameEncoder, InstructionEmbedding, QFormer, QueryBank};
use crate::sim::{NUM_INSTRUCTIONS, OBS_DIM};
use crate::slow::SlowModel;

/// Which connectors link the reasoner to the planner.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConnectorMode {
    /// Planner only; no reasoner, no gate.
    None,
    /// Learned activation with full-weight fusion.
    WOnly,
    /// Learned activation with confidence-scaled fusion.
    Full,
}

impl ConnectorMode {
    pub const ALL: [ConnectorMode; 3] = [ConnectorMode::None, ConnectorMode::WOnly, ConnectorMode::Full];

    pub fn name(self) -> &'static str {
        match self {
            ConnectorMode::None => "no-connectors",
            ConnectorMode::WOnly => "w-only",
            ConnectorMode::Full => "w+h",
        }
    }
}

impl std::str::FromStr for ConnectorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" | "no-connectors" => Ok(ConnectorMode::None),
            "w" | "w-only" => Ok(ConnectorMode::WOnly),
            "w+h" | "wh" | "full" => Ok(ConnectorMode::Full),
            other => Err(Error::Parse(format!("unknown connector mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    pub obs_dim: usize,
    pub encoder_hidden: usize,
    pub encoder_tokens: usize,
    pub num_instructions: usize,
    pub instruction_tokens: usize,
    pub n_local: usize,
    /// Zero selects the stateless aggregator.
    pub n_memory: usize,
    pub qformer_ffn: usize,
    pub planner_layers: usize,
    pub planner_ffn: usize,
    pub waypoints: usize,
    pub slow_layers: usize,
    pub slow_ffn: usize,
    pub buffer_capacity: usize,
    pub buffer_policy: EvictionPolicy,
    pub gate_hidden: usize,
    pub connectors: ConnectorMode,
}

impl Default for ModelConfig {
    /// Reference sizes: 64 channels, 16 encoder tokens, 20 local + 20 memory queries.
    fn default() -> Self {
        Self {
            dim: 64,
            heads: 4,
            obs_dim: OBS_DIM,
            encoder_hidden: 64,
            encoder_tokens: 16,
            num_instructions: NUM_INSTRUCTIONS,
            instruction_tokens: 2,
            n_local: 20,
            n_memory: 20,
            qformer_ffn: 128,
            planner_layers: 4,
            planner_ffn: 64,
            waypoints: 5,
            slow_layers: 6,
            slow_ffn: 512,
            buffer_capacity: 10,
            buffer_policy: EvictionPolicy::Pmf,
            gate_hidden: 64,
            connectors: ConnectorMode::Full,
        }
    }
}

impl ModelConfig {
    /// Reduced sizes that train in minutes on one CPU core.
    pub fn desk() -> Self {
        Self {
            dim: 32,
            heads: 4,
            encoder_hidden: 64,
            encoder_tokens: 8,
            instruction_tokens: 2,
            n_local: 4,
            n_memory: 4,
            qformer_ffn: 64,
            planner_layers: 4,
            planner_ffn: 32,
            slow_layers: 6,
            slow_ffn: 256,
            ..Self::default()
        }
    }

    pub fn n_tokens(&self) -> usize {
        self.n_local + self.n_memory
    }

    /// Stable digest of every field.
    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

/// Hex SHA-256 of a value's JSON form.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
}

/// All learned components. The reasoner and gate exist only with connectors.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: FrameEncoder,
    pub instruction: InstructionEmbedding,
    pub qformer: QFormer,
    pub planner: Planner,
    pub slow: Option<SlowModel>,
    pub gate: Option<Gate>,
}

impl Model {
    pub fn new(store: &mut ParamStore, config: &ModelConfig) -> Result<Self> {
        let c = config;
        let n = c.n_tokens();
        let encoder = FrameEncoder::new(store, "encoder", c.obs_dim, c.encoder_hidden, c.encoder_tokens, c.dim)?;
        let instruction =
            InstructionEmbedding::new(store, "instruction", c.num_instructions, c.instruction_tokens, c.dim)?;
        let qformer = QFormer::new(
            store,
            "qformer",
            c.n_local,
            c.n_memory,
            c.dim,
            c.heads,
            c.qformer_ffn,
            c.encoder_tokens + c.instruction_tokens,
        )?;
        let planner = Planner::new(
            store,
            "planner",
            c.planner_layers,
            c.dim,
            c.heads,
            c.planner_ffn,
            n,
            c.waypoints,
        )?;
        let (slow, gate) = if c.connectors == ConnectorMode::None {
            (None, None)
        } else {
            let slow = SlowModel::new(
                store,
                "slow",
                c.slow_layers,
                c.dim,
                c.heads,
                c.slow_ffn,
                n,
                c.buffer_capacity,
                c.instruction_tokens,
            )?;
            let full = slow.flops(c.buffer_capacity);
            if full < 10 * planner.flops() {
                return Err(Error::Invalid(format!(
                    "reasoner costs {full} FLOPs per call, less than 10x the planner's {}",
                    planner.flops()
                )));
            }
            if planner.num_params() * 5 > slow.num_params() {
                return Err(Error::Invalid(format!(
                    "planner has {} parameters, more than 0.2x the reasoner's {}",
                    planner.num_params(),
                    slow.num_params()
                )));
            }
            let gate = Gate::new(store, "gate", c.dim, c.gate_hidden)?;
            (Some(slow), Some(gate))
        };
        Ok(Self {
            config: config.clone(),
            encoder,
            instruction,
            qformer,
            planner,
            slow,
            gate,
        })
    }

    /// Encode one observation and advance the aggregator: returns `f'`, the
    /// instruction tokens and the updated memory bank.
    pub fn perceive<'t>(
        &self,
        cx: &Ctx<'t, '_>,
        obs: &[f64],
        instruction: usize,
        bank: &QueryBank<'t>,
    ) -> Result<(Var<'t>, Var<'t>, QueryBank<'t>)> {
        let row = cx.constant(Tensor::matrix(1, obs.len(), obs.to_vec())?);
        let frame = self.encoder.forward(cx, &row)?;
        let instr = self.instruction.tokens(cx, instruction)?;
        let (f, next) = self.qformer.step(cx, &frame, &instr, bank)?;
        Ok((f, instr, next))
    }

    /// Encoder plus aggregator cost, paid every frame.
    pub fn frame_flops(&self) -> u64 {
        self.encoder.flops() + self.qformer.flops()
    }

    pub fn planner_flops(&self) -> u64 {
        self.planner.flops()
    }

    pub fn gate_flops(&self) -> u64 {
        self.gate.as_ref().map_or(0, |g| g.flops())
    }

    pub fn slow_flops(&self, slots: usize) -> u64 {
        self.slow.as_ref().map_or(0, |s| s.flops(slots))
    }
}
