//! Frame encoder, instruction embedding and the query-token aggregators.
//!
//! The aggregator compresses one frame's encoder tokens into `N` output
//! tokens using learned queries. With a memory group (`n_memory > 0`) part of
//! the queries is carried from frame to frame: the memory half of the output
//! becomes the next frame's memory queries. With `n_memory == 0` it is the
//! stateless variant.

use crate::autodiff::{Tensor, Var};
use crate::error::{shape_err, Error, Result};
use crate::nn::{AttentionBlock, Ctx, Embedding, LayerNorm, Linear, ParamId, ParamStore};

/// A token matrix tagged with the frame it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTokens {
    pub tokens: Tensor,
    pub frame_index: u64,
}

impl FeatureTokens {
    pub fn new(tokens: Tensor, frame_index: u64) -> Result<Self> {
        tokens.dims2()?;
        if !tokens.is_finite() {
            return Err(Error::Invalid(format!("frame {frame_index} has non-finite tokens")));
        }
        Ok(Self { tokens, frame_index })
    }
}

/// Lifts a flat observation vector to `tokens x dim` encoder tokens.
#[derive(Clone, Debug)]
pub struct FrameEncoder {
    pub hidden: Linear,
    pub out: Linear,
    pub pos: Embedding,
    pub ln: LayerNorm,
    pub tokens: usize,
    pub dim: usize,
}

impl FrameEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        obs_dim: usize,
        hidden: usize,
        tokens: usize,
        dim: usize,
    ) -> Result<Self> {
        Ok(Self {
            hidden: Linear::new(store, &format!("{name}.hidden"), obs_dim, hidden)?,
            out: Linear::new(store, &format!("{name}.out"), hidden, tokens * dim)?,
            pos: Embedding::new(store, &format!("{name}.pos"), tokens, dim)?,
            ln: LayerNorm::new(store, &format!("{name}.ln"), dim)?,
            tokens,
            dim,
        })
    }

    /// `obs` is a `1 x obs_dim` row.
    pub fn forward<'t>(&self, cx: &Ctx<'t, '_>, obs: &Var<'t>) -> Result<Var<'t>> {
        let h = self.hidden.forward(cx, obs)?.gelu();
        let t = self.out.forward(cx, &h)?.reshape(&[self.tokens, self.dim])?;
        let t = t.add(&self.pos.all(cx))?;
        self.ln.forward(cx, &t)
    }

    pub fn flops(&self) -> u64 {
        self.hidden.flops(1) + self.out.flops(1)
    }
}

/// Learned token block per discrete instruction.
#[derive(Clone, Debug)]
pub struct InstructionEmbedding {
    pub table: Embedding,
    pub tokens: usize,
    pub count: usize,
}

impl InstructionEmbedding {
    pub fn new(store: &mut ParamStore, name: &str, count: usize, tokens: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            table: Embedding::new(store, name, count * tokens, dim)?,
            tokens,
            count,
        })
    }

    pub fn tokens<'t>(&self, cx: &Ctx<'t, '_>, instruction: usize) -> Result<Var<'t>> {
        if instruction >= self.count {
            return Err(Error::Invalid(format!(
                "instruction {instruction} outside the {} embedded instructions",
                self.count
            )));
        }
        self.table.rows(cx, instruction * self.tokens, self.tokens)
    }
}

/// Per-episode memory queries.
#[derive(Clone, Copy, Debug)]
pub enum QueryBank<'t> {
    /// No episode has been started.
    Uninitialized,
    /// Stateless aggregator: nothing to carry.
    Stateless,
    Memory(Var<'t>),
}

impl<'t> QueryBank<'t> {
    /// Carried tokens as a plain tensor, cut from the graph.
    pub fn to_tensor(&self) -> Option<Tensor> {
        match self {
            QueryBank::Memory(v) => Some(v.to_tensor()),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct QFormer {
    pub local: ParamId,
    pub memory_init: Option<ParamId>,
    pub cross: AttentionBlock,
    pub mix: AttentionBlock,
    pub ln_out: LayerNorm,
    pub n_local: usize,
    pub n_memory: usize,
    pub dim: usize,
    pub kv_tokens: usize,
}

impl QFormer {
    /// `kv_tokens` is the number of frame plus instruction tokens attended to.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        n_local: usize,
        n_memory: usize,
        dim: usize,
        heads: usize,
        ffn_hidden: usize,
        kv_tokens: usize,
    ) -> Result<Self> {
        if n_local == 0 {
            return Err(Error::Invalid("aggregator needs at least one local query".into()));
        }
        let memory_init = if n_memory > 0 {
            Some(store.uniform(&format!("{name}.memory_init"), &[n_memory, dim], dim)?)
        } else {
            None
        };
        Ok(Self {
            local: store.uniform(&format!("{name}.local"), &[n_local, dim], dim)?,
            memory_init,
            cross: AttentionBlock::new(store, &format!("{name}.cross"), dim, heads, ffn_hidden)?,
            mix: AttentionBlock::new(store, &format!("{name}.mix"), dim, heads, ffn_hidden)?,
            ln_out: LayerNorm::new(store, &format!("{name}.ln_out"), dim)?,
            n_local,
            n_memory,
            dim,
            kv_tokens,
        })
    }

    pub fn n_out(&self) -> usize {
        self.n_local + self.n_memory
    }

    /// Fresh episode state: the learned initial memory, or nothing.
    pub fn reset<'t>(&self, cx: &Ctx<'t, '_>) -> QueryBank<'t> {
        match self.memory_init {
            Some(id) => QueryBank::Memory(cx.param(id)),
            None => QueryBank::Stateless,
        }
    }

    /// Continue an episode from memory carried over from another tape.
    pub fn resume<'t>(&self, cx: &Ctx<'t, '_>, carried: Option<&Tensor>) -> Result<QueryBank<'t>> {
        match (self.n_memory, carried) {
            (0, _) => Ok(QueryBank::Stateless),
            (_, Some(t)) if t.shape() == [self.n_memory, self.dim] => Ok(QueryBank::Memory(cx.constant(t.clone()))),
            (_, Some(t)) => Err(shape_err("carried memory", &[self.n_memory, self.dim], t.shape())),
            (_, None) => Err(Error::UninitializedMemory),
        }
    }

    /// One frame: returns `f'` (`n_local + n_memory` tokens) and the updated bank.
    pub fn step<'t>(
        &self,
        cx: &Ctx<'t, '_>,
        frame: &Var<'t>,
        instruction: &Var<'t>,
        bank: &QueryBank<'t>,
    ) -> Result<(Var<'t>, QueryBank<'t>)> {
        let kv = Var::concat(&[*frame, *instruction], 0)?;
        let ks = kv.shape();
        if ks != [self.kv_tokens, self.dim] {
            return Err(shape_err("aggregator keys", &[self.kv_tokens, self.dim], &ks));
        }
        let local = cx.param(self.local);
        let queries = match (bank, self.n_memory) {
            (QueryBank::Uninitialized, _) => return Err(Error::UninitializedMemory),
            (QueryBank::Memory(m), n) if n > 0 => Var::concat(&[local, *m], 0)?,
            (QueryBank::Stateless, 0) => local,
            _ => return Err(Error::Invalid("query bank does not match the aggregator".into())),
        };
        let x = self.cross.forward(cx, &queries, Some(&kv), None)?;
        let x = self.mix.forward(cx, &x, None, None)?;
        let out = self.ln_out.forward(cx, &x)?;
        let next = if self.n_memory > 0 {
            QueryBank::Memory(out.slice(0, self.n_local, self.n_memory)?)
        } else {
            QueryBank::Stateless
        };
        Ok((out, next))
    }

    pub fn flops(&self) -> u64 {
        let n = self.n_out();
        self.cross.flops(n, self.kv_tokens) + self.mix.flops(n, n)
    }
}
