//! The heavy context reasoner over the instruction and the buffer snapshot.
//!
//! Input sequence: instruction tokens followed by every slot's tokens, each
//! slot offset by a learned embedding of its age (0 = newest). A stack of
//! self-attention blocks mixes the sequence and a cross-attention readout
//! with `N` learned queries emits tokens shaped like the aggregator output.

use crate::autodiff::Var;
use crate::error::{shape_err, Error, Result};
use crate::nn::{AttentionBlock, Ctx, Embedding, LayerNorm, ParamId, ParamStore};

const OUT_GAIN_INIT: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct SlowModel {
    pub blocks: Vec<AttentionBlock>,
    pub slot_pos: Embedding,
    pub readout_queries: ParamId,
    pub readout: AttentionBlock,
    pub ln_out: LayerNorm,
    pub n_out: usize,
    pub dim: usize,
    pub capacity: usize,
    pub instr_tokens: usize,
}

impl SlowModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        layers: usize,
        dim: usize,
        heads: usize,
        ffn_hidden: usize,
        n_out: usize,
        capacity: usize,
        instr_tokens: usize,
    ) -> Result<Self> {
        let blocks = (0..layers)
            .map(|i| AttentionBlock::new(store, &format!("{name}.block{i}"), dim, heads, ffn_hidden))
            .collect::<Result<_>>()?;
        Ok(Self {
            blocks,
            slot_pos: Embedding::new(store, &format!("{name}.slot_pos"), capacity, dim)?,
            readout_queries: store.uniform(&format!("{name}.readout_queries"), &[n_out, dim], dim)?,
            readout: AttentionBlock::new(store, &format!("{name}.readout"), dim, heads, ffn_hidden)?,
            // Small initial output so the untrained reasoner barely perturbs f'.
            ln_out: LayerNorm::with_gain(store, &format!("{name}.ln_out"), dim, OUT_GAIN_INIT)?,
            n_out,
            dim,
            capacity,
            instr_tokens,
        })
    }

    /// `f''` for the newest slot's timestamp.
    pub fn reason<'t>(&self, cx: &Ctx<'t, '_>, instruction: &Var<'t>, snapshot: &[Var<'t>]) -> Result<Var<'t>> {
        let is = instruction.shape();
        if is != [self.instr_tokens, self.dim] {
            return Err(shape_err("instruction tokens", &[self.instr_tokens, self.dim], &is));
        }
        self.reason_inner(cx, Some(instruction), snapshot)
    }

    /// Without an instruction the sequence holds only slot tokens, which
    /// makes the pooling symmetry directly testable.
    fn reason_inner<'t>(
        &self,
        cx: &Ctx<'t, '_>,
        instruction: Option<&Var<'t>>,
        snapshot: &[Var<'t>],
    ) -> Result<Var<'t>> {
        if snapshot.is_empty() {
            return Err(Error::EmptySnapshot);
        }
        if snapshot.len() > self.capacity {
            return Err(Error::Invalid(format!(
                "snapshot of {} slots exceeds capacity {}",
                snapshot.len(),
                self.capacity
            )));
        }
        let mut parts = Vec::with_capacity(snapshot.len() + 1);
        parts.extend(instruction.copied());
        let newest = snapshot.len() - 1;
        for (j, slot) in snapshot.iter().enumerate() {
            let s = slot.shape();
            if s != [self.n_out, self.dim] {
                return Err(shape_err("snapshot slot", &[self.n_out, self.dim], &s));
            }
            parts.push(slot.add(&self.slot_pos.row(cx, newest - j)?)?);
        }
        let mut x = Var::concat(&parts, 0)?;
        for b in &self.blocks {
            x = b.forward(cx, &x, None, None)?;
        }
        let q = cx.param(self.readout_queries);
        let out = self.readout.forward(cx, &q, Some(&x), None)?;
        self.ln_out.forward(cx, &out)
    }

    /// Cost of one call on a snapshot of `slots` frames.
    pub fn flops(&self, slots: usize) -> u64 {
        let t = self.instr_tokens + slots * self.n_out;
        self.blocks.iter().map(|b| b.flops(t, t)).sum::<u64>() + self.readout.flops(self.n_out, t)
    }

    pub fn num_params(&self) -> usize {
        self.blocks.iter().map(|b| b.num_params()).sum::<usize>()
            + self.readout.num_params()
            + self.capacity * self.dim
            + self.n_out * self.dim
            + 2 * self.dim
    }
}

#[cfg(test)]
mod tests;
