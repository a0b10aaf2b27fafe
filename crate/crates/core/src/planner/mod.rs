//! The per-frame trajectory planner and its L1 trajectory loss.

use crate::autodiff::{Tensor, Var};
use crate::error::{shape_err, Error, Result};
use crate::nn::{AttentionBlock, Ctx, LayerNorm, Linear, ParamId, ParamStore};

/// Waypoint coordinates are clamped to this many meters.
pub const WAYPOINT_CLAMP: f64 = 100.0;
/// Time between consecutive waypoints.
pub const WAYPOINT_DT: f64 = 0.5;

/// `M` ego-frame points (x forward, y left), one per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Waypoints {
    pub points: Vec<[f64; 2]>,
}

impl Waypoints {
    pub fn new(points: Vec<[f64; 2]>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Invalid("waypoints need at least one point".into()));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("non-finite waypoint".into()));
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.points.len(), 2],
            self.points.iter().flatten().copied().collect(),
        )
        .expect("non-empty by construction")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            [_, 2] => Self::new(t.data().chunks(2).map(|c| [c[0], c[1]]).collect()),
            s => Err(shape_err("waypoints", &[s.first().copied().unwrap_or(0), 2], s)),
        }
    }
}

/// Mean absolute error over all `2M` coordinates.
pub fn trajectory_loss(pred: &Waypoints, gt: &Waypoints) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(shape_err("trajectory loss", &[gt.len(), 2], &[pred.len(), 2]));
    }
    let sum: f64 = pred
        .points
        .iter()
        .flatten()
        .zip(gt.points.iter().flatten())
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok(sum / (2 * pred.len()) as f64)
}

/// Differentiable version of [`trajectory_loss`] on `M x 2` tensors.
pub fn trajectory_loss_var<'t>(pred: &Var<'t>, gt: &Var<'t>) -> Result<Var<'t>> {
    Ok(pred.sub(gt)?.abs().mean())
}

#[derive(Clone, Debug)]
pub struct Planner {
    pub blocks: Vec<AttentionBlock>,
    pub queries: ParamId,
    pub ln_out: LayerNorm,
    pub head: Linear,
    pub m: usize,
    pub n_in: usize,
    pub dim: usize,
}

impl Planner {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        layers: usize,
        dim: usize,
        heads: usize,
        ffn_hidden: usize,
        n_in: usize,
        m: usize,
    ) -> Result<Self> {
        let blocks = (0..layers)
            .map(|i| AttentionBlock::new(store, &format!("{name}.block{i}"), dim, heads, ffn_hidden))
            .collect::<Result<_>>()?;
        Ok(Self {
            blocks,
            queries: store.uniform(&format!("{name}.queries"), &[m, dim], dim)?,
            ln_out: LayerNorm::new(store, &format!("{name}.ln_out"), dim)?,
            head: Linear::new(store, &format!("{name}.head"), dim, 2)?,
            m,
            n_in,
            dim,
        })
    }

    /// `M x 2` waypoints as cumulative sums of predicted per-step offsets.
    pub fn plan<'t>(&self, cx: &Ctx<'t, '_>, features: &Var<'t>) -> Result<Var<'t>> {
        let fs = features.shape();
        if fs != [self.n_in, self.dim] {
            return Err(shape_err("planner input", &[self.n_in, self.dim], &fs));
        }
        let mut x = Var::concat(&[*features, cx.param(self.queries)], 0)?;
        for b in &self.blocks {
            x = b.forward(cx, &x, None, None)?;
        }
        let q = x.slice(0, self.n_in, self.m)?;
        let offsets = self.head.forward(cx, &self.ln_out.forward(cx, &q)?)?;
        let tri = cx.constant(lower_triangular(self.m));
        Ok(tri.matmul(&offsets)?.clamp(-WAYPOINT_CLAMP, WAYPOINT_CLAMP))
    }

    pub fn flops(&self) -> u64 {
        let n = self.n_in + self.m;
        self.blocks.iter().map(|b| b.flops(n, n)).sum::<u64>()
            + self.head.flops(self.m)
            + 2 * (self.m * self.m * 2) as u64
    }

    pub fn num_params(&self) -> usize {
        self.blocks.iter().map(|b| b.num_params()).sum::<usize>()
            + self.m * self.dim
            + 2 * self.dim
            + self.head.num_params()
    }
}

fn lower_triangular(m: usize) -> Tensor {
    let mut data = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..=i {
            data[i * m + j] = 1.0;
        }
    }
    Tensor::new(vec![m, m], data).expect("square")
}

#[cfg(test)]
mod tests;
