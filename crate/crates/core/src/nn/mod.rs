//! Parameter containers, layers, optimizer and the binary Gumbel sampler.

mod gumbel;
mod layers;
mod optim;

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::error::{shape_err, Error, Result};

pub use gumbel::{gumbel_binary, GumbelSample, GUMBEL_CLAMP};
pub use layers::{AttentionBlock, Embedding, FeedForward, LayerNorm, Linear, Mlp, MultiHeadAttention};
pub use optim::{cosine_multiplier, AdamW, AdamWConfig};

/// Handle to one parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
struct Param {
    name: String,
    value: Tensor,
    grad: Option<Vec<f64>>,
}

/// Named parameters with deterministic initialization.
///
/// Each parameter is initialized from its own stream seeded by the store seed
/// and the parameter name, so the values do not depend on construction order.
#[derive(Clone, Debug)]
pub struct ParamStore {
    seed: u64,
    params: Vec<Param>,
    by_name: BTreeMap<String, ParamId>,
}

fn name_stream(seed: u64, name: &str) -> ChaCha8Rng {
    // FNV-1a over the name, mixed with the store seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h.rotate_left(17))
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            params: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Register a parameter with an explicit initial value.
    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::DuplicateParam(name.to_string()));
        }
        if !value.is_finite() {
            return Err(Error::Invalid(format!("initial value of `{name}` is not finite")));
        }
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            value,
            grad: None,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    /// Weight drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    pub fn uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<ParamId> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let mut rng = name_stream(self.seed, name);
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.filled(name, shape, 1.0)
    }

    pub fn filled(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        self.insert(name, Tensor::filled(shape, value))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> Option<&[f64]> {
        self.params[id.0].grad.as_deref()
    }

    /// Ids in sorted-name order.
    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.by_name.values().copied()
    }

    /// Ids whose name starts with `prefix`, sorted by name.
    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.by_name
            .range(prefix.to_string()..)
            .take_while(move |(n, _)| n.starts_with(prefix))
            .map(|(_, id)| *id)
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Number of scalar values under a name prefix.
    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.ids_with_prefix(prefix).map(|id| self.value(id).len()).sum()
    }

    pub fn accumulate(&mut self, id: ParamId, grad: &[f64]) -> Result<()> {
        let p = &mut self.params[id.0];
        if grad.len() != p.value.len() {
            return Err(shape_err(
                format!("gradient of `{}`", p.name),
                p.value.shape(),
                &[grad.len()],
            ));
        }
        match &mut p.grad {
            Some(g) => g.iter_mut().zip(grad).for_each(|(a, b)| *a += b),
            None => p.grad = Some(grad.to_vec()),
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter_map(|p| p.grad.as_ref())
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescale all gradients so their global L2 norm is at most `max_norm`.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm.is_finite() {
            let s = max_norm / norm;
            for g in self.params.iter_mut().filter_map(|p| p.grad.as_mut()) {
                g.iter_mut().for_each(|x| *x *= s);
            }
        }
        norm
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }

    /// Copy every parameter whose name also exists in `other`.
    pub fn load_matching(&mut self, other: &ParamStore) -> Result<usize> {
        let mut n = 0;
        for p in &mut self.params {
            if let Some(id) = other.id(&p.name) {
                let src = other.value(id);
                if src.shape() != p.value.shape() {
                    return Err(shape_err(format!("loading `{}`", p.name), p.value.shape(), src.shape()));
                }
                p.value = src.clone();
                n += 1;
            }
        }
        Ok(n)
    }

    pub fn to_snapshot(&self) -> ParamSnapshot {
        ParamSnapshot {
            version: SNAPSHOT_VERSION,
            seed: self.seed,
            params: self
                .by_name
                .iter()
                .map(|(n, id)| (n.clone(), self.params[id.0].value.clone()))
                .collect(),
        }
    }

    /// Overwrite values from a snapshot; every name must already be registered.
    pub fn load_snapshot(&mut self, snap: &ParamSnapshot) -> Result<()> {
        if snap.version != SNAPSHOT_VERSION {
            return Err(Error::Parse(format!(
                "unsupported parameter file version {}",
                snap.version
            )));
        }
        for (name, t) in &snap.params {
            let id = self.id(name).ok_or_else(|| Error::UnknownParam(name.clone()))?;
            let cur = self.value(id);
            if cur.shape() != t.shape() {
                return Err(shape_err(format!("loading `{name}`"), cur.shape(), t.shape()));
            }
            self.params[id.0].value = t.clone();
        }
        if let Some(missing) = self.by_name.keys().find(|n| !snap.params.contains_key(*n)) {
            return Err(Error::Parse(format!("parameter `{missing}` missing from file")));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_snapshot())?)
    }

    pub fn load_json(&mut self, json: &str) -> Result<()> {
        let snap: ParamSnapshot = serde_json::from_str(json)?;
        self.load_snapshot(&snap)
    }
}

pub const SNAPSHOT_VERSION: u32 = 1;

/// Serializable name → tensor map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSnapshot {
    pub version: u32,
    pub seed: u64,
    pub params: BTreeMap<String, Tensor>,
}

/// Binds store parameters onto a tape on first use.
///
/// In training mode parameters become differentiable leaves; otherwise they
/// are recorded as constants.
pub struct Ctx<'t, 's> {
    tape: &'t Tape,
    store: &'s ParamStore,
    bound: RefCell<Vec<Option<Var<'t>>>>,
    train: bool,
}

impl<'t, 's> Ctx<'t, 's> {
    pub fn new(tape: &'t Tape, store: &'s ParamStore, train: bool) -> Self {
        Self {
            tape,
            store,
            bound: RefCell::new(vec![None; store.params.len()]),
            train,
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn training(&self) -> bool {
        self.train
    }

    pub fn param(&self, id: ParamId) -> Var<'t> {
        if let Some(v) = self.bound.borrow()[id.0] {
            return v;
        }
        let value = self.store.value(id).clone();
        let v = if self.train {
            self.tape.param(value)
        } else {
            self.tape.constant(value)
        };
        self.bound.borrow_mut()[id.0] = Some(v);
        v
    }

    pub fn constant(&self, t: Tensor) -> Var<'t> {
        self.tape.constant(t)
    }

    /// Bind every parameter so each receives a (possibly zero) gradient.
    pub fn bind_all(&self) {
        for id in self.store.ids() {
            self.param(id);
        }
    }

    /// Gradients of every bound parameter, in id order.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(ParamId, Vec<f64>)> {
        self.bound
            .borrow()
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), grads.wrt_or_zero(v))))
            .collect()
    }
}

/// Check that a token matrix has the expected shape.
pub fn expect_shape(context: &str, got: &[usize], expected: &[usize]) -> Result<()> {
    if got == expected {
        Ok(())
    } else {
        Err(shape_err(context, expected, got))
    }
}

#[cfg(test)]
mod tests;
