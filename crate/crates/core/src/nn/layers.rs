//! Linear, layer-norm, embedding, attention and feed-forward layers.
//!
//! Every layer reports its analytic cost as 2 x multiply-accumulates over its
//! matrix products for a given token count.

use super::{Ctx, ParamId, ParamStore};
use crate::autodiff::Var;
use crate::error::{shape_err, Error, Result};

fn check_width(context: &str, x: &Var<'_>, width: usize) -> Result<usize> {
    match x.shape().as_slice() {
        [n, c] if *c == width => Ok(*n),
        s => Err(shape_err(context, &[s.first().copied().unwrap_or(0), width], s)),
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            w: store.uniform(&format!("{name}.w"), &[d_in, d_out], d_in)?,
            b: store.zeros(&format!("{name}.b"), &[d_out])?,
            d_in,
            d_out,
        })
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t, '_>, x: &Var<'t>) -> Result<Var<'t>> {
        check_width("linear input", x, self.d_in)?;
        Ok(x.matmul(&cx.param(self.w))?.add(&cx.param(self.b))?)
    }

    pub fn flops(&self, tokens: usize) -> u64 {
        2 * (tokens * self.d_in * self.d_out) as u64
    }

    pub fn num_params(&self) -> usize {
        self.d_in * self.d_out + self.d_out
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Self::with_gain(store, name, dim, 1.0)
    }

    /// Starts with every gain at `gain` instead of one.
    pub fn with_gain(store: &mut ParamStore, name: &str, dim: usize, gain: f64) -> Result<Self> {
        Ok(Self {
            gain: store.filled(&format!("{name}.gain"), &[dim], gain)?,
            bias: store.zeros(&format!("{name}.bias"), &[dim])?,
            dim,
        })
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t, '_>, x: &Var<'t>) -> Result<Var<'t>> {
        check_width("layer norm input", x, self.dim)?;
        Ok(x.layer_norm(&cx.param(self.gain), &cx.param(self.bias), Self::EPS)?)
    }
}

/// Learned table of `rows` vectors of width `dim`.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub rows: usize,
    pub dim: usize,
}

impl Embedding {
    /// Entries start at U(-0.1, 0.1)-ish scale via fan-in = 100.
    pub fn new(store: &mut ParamStore, name: &str, rows: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            table: store.uniform(&format!("{name}.table"), &[rows, dim], 100)?,
            rows,
            dim,
        })
    }

    pub fn all<'t>(&self, cx: &Ctx<'t, '_>) -> Var<'t> {
        cx.param(self.table)
    }

    /// Rows `[start, start + len)` as a `len x dim` matrix.
    pub fn rows<'t>(&self, cx: &Ctx<'t, '_>, start: usize, len: usize) -> Result<Var<'t>> {
        if start + len > self.rows || len == 0 {
            return Err(Error::Invalid(format!(
                "embedding rows {start}..{} out of 0..{}",
                start + len,
                self.rows
            )));
        }
        Ok(self.all(cx).slice(0, start, len)?)
    }

    /// One row as a `dim` vector, ready to broadcast over tokens.
    pub fn row<'t>(&self, cx: &Ctx<'t, '_>, index: usize) -> Result<Var<'t>> {
        Ok(self.rows(cx, index, 1)?.reshape(&[self.dim])?)
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Invalid(format!("width {dim} is not divisible by {heads} heads")));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim)?,
            k: Linear::new(store, &format!("{name}.k"), dim, dim)?,
            v: Linear::new(store, &format!("{name}.v"), dim, dim)?,
            o: Linear::new(store, &format!("{name}.o"), dim, dim)?,
            heads,
            dim,
        })
    }

    /// `mask[i * n_kv + j] == false` hides key `j` from query `i`.
    pub fn forward<'t>(
        &self,
        cx: &Ctx<'t, '_>,
        queries: &Var<'t>,
        keys_values: &Var<'t>,
        mask: Option<&[bool]>,
    ) -> Result<Var<'t>> {
        let nq = check_width("attention queries", queries, self.dim)?;
        let nkv = check_width("attention keys", keys_values, self.dim)?;
        if let Some(m) = mask {
            if m.len() != nq * nkv {
                return Err(shape_err("attention mask", &[nq, nkv], &[m.len()]));
            }
        }
        let q = self.q.forward(cx, queries)?;
        let k = self.k.forward(cx, keys_values)?;
        let v = self.v.forward(cx, keys_values)?;
        let mixed = Var::attention(&q, &k, &v, self.heads, mask)?;
        self.o.forward(cx, &mixed)
    }

    pub fn flops(&self, n_q: usize, n_kv: usize) -> u64 {
        let proj = self.q.flops(n_q) + self.k.flops(n_kv) + self.v.flops(n_kv) + self.o.flops(n_q);
        // Scores and weighted values.
        proj + 4 * (n_q * n_kv * self.dim) as u64
    }

    pub fn num_params(&self) -> usize {
        4 * self.q.num_params()
    }
}

/// Two linear layers with a GELU between.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden)?,
            down: Linear::new(store, &format!("{name}.down"), hidden, dim)?,
        })
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t, '_>, x: &Var<'t>) -> Result<Var<'t>> {
        let h = self.up.forward(cx, x)?.gelu();
        self.down.forward(cx, &h)
    }

    pub fn flops(&self, tokens: usize) -> u64 {
        self.up.flops(tokens) + self.down.flops(tokens)
    }

    pub fn num_params(&self) -> usize {
        self.up.num_params() + self.down.num_params()
    }
}

/// Pre-norm transformer block: attention then feed-forward, each residual.
///
/// Without a context this is self-attention over `x`; with one, the queries
/// come from `x` and keys/values from the context.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub ln_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl AttentionBlock {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), dim)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads)?,
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), dim)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, hidden)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.attn.dim
    }

    pub fn forward<'t>(
        &self,
        cx: &Ctx<'t, '_>,
        x: &Var<'t>,
        context: Option<&Var<'t>>,
        mask: Option<&[bool]>,
    ) -> Result<Var<'t>> {
        let h = self.ln_attn.forward(cx, x)?;
        let a = match context {
            Some(kv) => self.attn.forward(cx, &h, kv, mask)?,
            None => self.attn.forward(cx, &h, &h, mask)?,
        };
        let x = x.add(&a)?;
        let f = self.ffn.forward(cx, &self.ln_ffn.forward(cx, &x)?)?;
        Ok(x.add(&f)?)
    }

    /// Cost for `n_q` query tokens over `n_kv` keys (`n_kv == n_q` for self-attention).
    pub fn flops(&self, n_q: usize, n_kv: usize) -> u64 {
        self.attn.flops(n_q, n_kv) + self.ffn.flops(n_q)
    }

    pub fn num_params(&self) -> usize {
        self.attn.num_params() + self.ffn.num_params() + 4 * self.dim()
    }
}

/// Stack of linear layers with ReLU between them.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, widths: &[usize]) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Invalid("an MLP needs at least input and output widths".into()));
        }
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1]))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t, '_>, x: &Var<'t>) -> Result<Var<'t>> {
        let mut h = *x;
        for (i, l) in self.layers.iter().enumerate() {
            if i > 0 {
                h = h.relu();
            }
            h = l.forward(cx, &h)?;
        }
        Ok(h)
    }

    pub fn flops(&self, tokens: usize) -> u64 {
        self.layers.iter().map(|l| l.flops(tokens)).sum()
    }
}
