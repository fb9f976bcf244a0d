//! Per-block functions (feed-forward and single-head attention) and layer
//! normalization, each with a forward pass and an exact reverse pass.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Rows with variance at or below this are rejected rather than normalized.
pub const MIN_ROW_VARIANCE: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LnVariant {
    /// Full derivative through mean and variance.
    Exact,
    /// Backward treats LN as the scalar map `(√d/‖x‖₂)·I` per row.
    ApproxJacobian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LnMode {
    pub variant: LnVariant,
    pub affine: bool,
}

impl LnMode {
    pub const EXACT: LnMode = LnMode {
        variant: LnVariant::Exact,
        affine: false,
    };
    pub const APPROX_JACOBIAN: LnMode = LnMode {
        variant: LnVariant::ApproxJacobian,
        affine: false,
    };

    pub fn new(variant: LnVariant, affine: bool) -> Result<Self> {
        let mode = LnMode { variant, affine };
        mode.validate()?;
        Ok(mode)
    }

    pub fn validate(&self) -> Result<()> {
        if self.affine && self.variant == LnVariant::ApproxJacobian {
            return Err(LabError::Param(
                "approximate-Jacobian layer norm cannot carry an affine transform".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LnCache {
    x_hat: Tensor,
    inv_std: Vec<f64>,
    input_norm: Vec<f64>,
}

impl LnCache {
    /// Standardized rows, before any affine transform.
    pub fn normalized(&self) -> &Tensor {
        &self.x_hat
    }
}

/// Layer normalization over the last axis of an `n×d` tensor, optionally
/// followed by a learnable per-feature gain and bias.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    mode: LnMode,
    width: usize,
    gain: Vec<f64>,
    bias: Vec<f64>,
    grad_gain: Vec<f64>,
    grad_bias: Vec<f64>,
}

impl LayerNorm {
    pub fn new(width: usize, mode: LnMode) -> Result<Self> {
        mode.validate()?;
        let (g, b) = if mode.affine {
            (vec![1.0; width], vec![0.0; width])
        } else {
            (Vec::new(), Vec::new())
        };
        Ok(Self {
            mode,
            width,
            grad_gain: vec![0.0; g.len()],
            grad_bias: vec![0.0; b.len()],
            gain: g,
            bias: b,
        })
    }

    pub fn mode(&self) -> LnMode {
        self.mode
    }

    pub fn gain(&self) -> &[f64] {
        &self.gain
    }

    pub fn gain_mut(&mut self) -> &mut [f64] {
        &mut self.gain
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    pub fn grad_gain(&self) -> &[f64] {
        &self.grad_gain
    }

    pub fn grad_bias(&self) -> &[f64] {
        &self.grad_bias
    }

    pub fn zero_grads(&mut self) {
        self.grad_gain.iter_mut().for_each(|v| *v = 0.0);
        self.grad_bias.iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, LnCache)> {
        if x.shape().len() != 2 || x.cols() != self.width {
            return Err(LabError::shape(
                "ln_forward",
                format!("expected n×{}, got {:?}", self.width, x.shape()),
            ));
        }
        let (mut y, cache) = standardize(x)?;
        if self.mode.affine {
            for i in 0..y.rows() {
                for (j, v) in y.row_mut(i).iter_mut().enumerate() {
                    *v = *v * self.gain[j] + self.bias[j];
                }
            }
        }
        Ok((y, cache))
    }

    /// Input gradient and, when affine, the (gain, bias) gradients.
    pub fn vjp(&self, upstream: &Tensor, cache: &LnCache) -> Result<(Tensor, Option<(Vec<f64>, Vec<f64>)>)> {
        if upstream.shape() != cache.x_hat.shape() {
            return Err(LabError::shape(
                "ln_backward",
                format!("upstream {:?} vs cache {:?}", upstream.shape(), cache.x_hat.shape()),
            ));
        }
        let d = self.width;
        let mut affine_grads = None;
        let dx_hat = if self.mode.affine {
            let mut gg = vec![0.0; d];
            let mut gb = vec![0.0; d];
            let mut dxh = upstream.clone();
            for i in 0..upstream.rows() {
                let up = upstream.row(i);
                let xh = cache.x_hat.row(i);
                for j in 0..d {
                    gg[j] += up[j] * xh[j];
                    gb[j] += up[j];
                }
                for (j, v) in dxh.row_mut(i).iter_mut().enumerate() {
                    *v *= self.gain[j];
                }
            }
            affine_grads = Some((gg, gb));
            dxh
        } else {
            upstream.clone()
        };
        let dx = match self.mode.variant {
            LnVariant::Exact => exact_ln_vjp(&dx_hat, cache),
            LnVariant::ApproxJacobian => {
                let mut out = dx_hat;
                let sqrt_d = (d as f64).sqrt();
                for i in 0..out.rows() {
                    let s = sqrt_d / cache.input_norm[i];
                    out.row_mut(i).iter_mut().for_each(|v| *v *= s);
                }
                out
            }
        };
        Ok((dx, affine_grads))
    }

    /// Reverse pass that also accumulates the affine gradients.
    pub fn backward(&mut self, upstream: &Tensor, cache: &LnCache) -> Result<Tensor> {
        let (dx, grads) = self.vjp(upstream, cache)?;
        if let Some((gg, gb)) = grads {
            self.accumulate(&gg, &gb);
        }
        Ok(dx)
    }

    pub(crate) fn accumulate(&mut self, gg: &[f64], gb: &[f64]) {
        self.grad_gain.iter_mut().zip(gg).for_each(|(a, b)| *a += b);
        self.grad_bias.iter_mut().zip(gb).for_each(|(a, b)| *a += b);
    }
}

fn standardize(x: &Tensor) -> Result<(Tensor, LnCache)> {
    let (n, d) = (x.rows(), x.cols());
    let mut y = Tensor::zeros(&[n, d]);
    let mut inv_std = Vec::with_capacity(n);
    let mut input_norm = Vec::with_capacity(n);
    for i in 0..n {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        if !(var > MIN_ROW_VARIANCE) || !var.is_finite() {
            return Err(LabError::DegenerateRow { row: i });
        }
        let is = 1.0 / var.sqrt();
        for (o, v) in y.row_mut(i).iter_mut().zip(row) {
            *o = (v - mean) * is;
        }
        inv_std.push(is);
        input_norm.push(row.iter().map(|v| v * v).sum::<f64>().sqrt());
    }
    Ok((
        y.clone(),
        LnCache {
            x_hat: y,
            inv_std,
            input_norm,
        },
    ))
}

fn exact_ln_vjp(dx_hat: &Tensor, cache: &LnCache) -> Tensor {
    let (n, d) = (dx_hat.rows(), dx_hat.cols());
    let mut dx = Tensor::zeros(&[n, d]);
    for i in 0..n {
        let g = dx_hat.row(i);
        let xh = cache.x_hat.row(i);
        let mean_g = g.iter().sum::<f64>() / d as f64;
        let mean_gx = g.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        let is = cache.inv_std[i];
        for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
            *o = is * (g[j] - mean_g - xh[j] * mean_gx);
        }
    }
    dx
}

/// Parameter-free layer norm forward.
pub fn ln_forward(x: &Tensor, mode: LnMode) -> Result<(Tensor, LnCache)> {
    if mode.affine {
        return Err(LabError::Param(
            "ln_forward is the parameter-free form; use LayerNorm for affine".into(),
        ));
    }
    if x.shape().len() != 2 {
        return Err(LabError::shape("ln_forward", format!("expected a matrix, got {:?}", x.shape())));
    }
    standardize(x)
}

/// Parameter-free layer norm backward.
pub fn ln_backward(upstream: &Tensor, cache: &LnCache, mode: LnMode) -> Result<Tensor> {
    let ln = LayerNorm::new(cache.x_hat.cols(), LnMode { affine: false, ..mode })?;
    Ok(ln.vjp(upstream, cache)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    /// `y = xW`.
    FfnLinear,
    /// `y = relu(xW₁)W₂`.
    FfnRelu2,
    /// Single-head softmax attention.
    Attn,
}

impl BlockKind {
    pub fn name(self) -> &'static str {
        match self {
            BlockKind::FfnLinear => "ffn_linear",
            BlockKind::FfnRelu2 => "ffn_relu2",
            BlockKind::Attn => "attn",
        }
    }
}

impl std::str::FromStr for BlockKind {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ffn_linear" | "linear" => Ok(BlockKind::FfnLinear),
            "ffn_relu2" | "relu2" => Ok(BlockKind::FfnRelu2),
            "attn" => Ok(BlockKind::Attn),
            _ => Err(LabError::Param(format!("unknown block kind `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Zero query weights (uniform attention); everything else N(0, 1/d).
    Analysis,
    /// Every matrix N(0, 1/d).
    Training,
}

/// Weights of one block plus same-shaped gradient accumulators.
///
/// Weight order: `[W]` for `FfnLinear`, `[W₁, W₂]` for `FfnRelu2`,
/// `[W_Q, W_K, W_V]` for `Attn`.
#[derive(Debug, Clone)]
pub struct BlockParams {
    kind: BlockKind,
    weights: Vec<Tensor>,
    grads: Vec<Tensor>,
    version: u64,
}

impl BlockParams {
    pub fn new(kind: BlockKind, weights: Vec<Tensor>) -> Result<Self> {
        let expected = match kind {
            BlockKind::FfnLinear => 1,
            BlockKind::FfnRelu2 => 2,
            BlockKind::Attn => 3,
        };
        if weights.len() != expected || weights.iter().any(|w| w.shape().len() != 2) {
            return Err(LabError::shape("block_params", format!("{} needs {expected} matrices", kind.name())));
        }
        let d = weights[0].rows();
        let ok = match kind {
            BlockKind::FfnLinear => weights[0].cols() == d,
            BlockKind::FfnRelu2 => weights[1].rows() == weights[0].cols() && weights[1].cols() == d,
            BlockKind::Attn => weights.iter().all(|w| w.shape() == [d, d]),
        };
        if !ok {
            return Err(LabError::shape("block_params", format!("inconsistent {} weight shapes", kind.name())));
        }
        let grads = weights.iter().map(|w| Tensor::zeros(w.shape())).collect();
        Ok(Self {
            kind,
            weights,
            grads,
            version: 0,
        })
    }

    pub fn kind(&self) -> BlockKind {
        self.kind
    }

    pub fn width(&self) -> usize {
        self.weights[0].rows()
    }

    pub fn weights(&self) -> &[Tensor] {
        &self.weights
    }

    /// Mutable weights. Invalidates caches from earlier forward passes.
    pub fn weights_mut(&mut self) -> &mut [Tensor] {
        self.version += 1;
        &mut self.weights
    }

    pub fn grads(&self) -> &[Tensor] {
        &self.grads
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| g.fill(0.0));
    }

    pub(crate) fn accumulate(&mut self, grads: &[Tensor]) -> Result<()> {
        for (acc, g) in self.grads.iter_mut().zip(grads) {
            acc.add_assign(g)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum BlockInternals {
    Linear,
    Relu { act: Tensor },
    Attn { q: Tensor, k: Tensor, v: Tensor, probs: Tensor },
}

#[derive(Debug, Clone)]
pub struct BlockCache {
    kind: BlockKind,
    version: u64,
    x: Tensor,
    internals: BlockInternals,
}

impl BlockCache {
    /// Attention probabilities, when the block is attention.
    pub fn attention(&self) -> Option<&Tensor> {
        match &self.internals {
            BlockInternals::Attn { probs, .. } => Some(probs),
            _ => None,
        }
    }
}

pub fn block_forward(x: &Tensor, p: &BlockParams) -> Result<(Tensor, BlockCache)> {
    if x.shape().len() != 2 || x.cols() != p.width() {
        return Err(LabError::shape(
            "block_forward",
            format!("input {:?} for a width-{} {}", x.shape(), p.width(), p.kind.name()),
        ));
    }
    let w = &p.weights;
    let (y, internals) = match p.kind {
        BlockKind::FfnLinear => (x.matmul(&w[0])?, BlockInternals::Linear),
        BlockKind::FfnRelu2 => {
            let act = x.matmul(&w[0])?.map(|v| v.max(0.0));
            (act.matmul(&w[1])?, BlockInternals::Relu { act })
        }
        BlockKind::Attn => {
            let q = x.matmul(&w[0])?;
            let k = x.matmul(&w[1])?;
            let v = x.matmul(&w[2])?;
            let scale = 1.0 / (p.width() as f64).sqrt();
            let mut probs = q.matmul_t(&k)?.scale(scale);
            softmax_rows(&mut probs);
            let y = probs.matmul(&v)?;
            (y, BlockInternals::Attn { q, k, v, probs })
        }
    };
    Ok((
        y,
        BlockCache {
            kind: p.kind,
            version: p.version,
            x: x.clone(),
            internals,
        },
    ))
}

pub(crate) fn softmax_rows(t: &mut Tensor) {
    for i in 0..t.rows() {
        let row = t.row_mut(i);
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
}

/// Input gradient and weight gradients of one block, without touching `p`.
pub fn block_vjp(p: &BlockParams, upstream: &Tensor, cache: &BlockCache) -> Result<(Tensor, Vec<Tensor>)> {
    if cache.kind != p.kind || cache.version != p.version {
        return Err(LabError::Stale);
    }
    if upstream.shape() != cache.x.shape() {
        return Err(LabError::shape(
            "block_backward",
            format!("upstream {:?} vs input {:?}", upstream.shape(), cache.x.shape()),
        ));
    }
    let w = &p.weights;
    let x = &cache.x;
    match &cache.internals {
        BlockInternals::Linear => Ok((upstream.matmul_t(&w[0])?, vec![x.t_matmul(upstream)?])),
        BlockInternals::Relu { act } => {
            let d_w2 = act.t_matmul(upstream)?;
            let mut d_act = upstream.matmul_t(&w[1])?;
            for (g, a) in d_act.data_mut().iter_mut().zip(act.data()) {
                if *a <= 0.0 {
                    *g = 0.0;
                }
            }
            let d_w1 = x.t_matmul(&d_act)?;
            Ok((d_act.matmul_t(&w[0])?, vec![d_w1, d_w2]))
        }
        BlockInternals::Attn { q, k, v, probs } => {
            let scale = 1.0 / (p.width() as f64).sqrt();
            let d_v = probs.t_matmul(upstream)?;
            let d_probs = upstream.matmul_t(v)?;
            // softmax backward: dS = P ⊙ (dP − rowsum(dP ⊙ P))
            let mut d_scores = probs.clone();
            for i in 0..probs.rows() {
                let pr = probs.row(i);
                let dp = d_probs.row(i);
                let dot: f64 = pr.iter().zip(dp).map(|(a, b)| a * b).sum();
                for (j, s) in d_scores.row_mut(i).iter_mut().enumerate() {
                    *s = pr[j] * (dp[j] - dot) * scale;
                }
            }
            let d_q = d_scores.matmul(k)?;
            let d_k = d_scores.t_matmul(q)?;
            let grads = vec![x.t_matmul(&d_q)?, x.t_matmul(&d_k)?, x.t_matmul(&d_v)?];
            let mut dx = d_q.matmul_t(&w[0])?;
            dx.add_assign(&d_k.matmul_t(&w[1])?)?;
            dx.add_assign(&d_v.matmul_t(&w[2])?)?;
            Ok((dx, grads))
        }
    }
}

/// Reverse pass that accumulates weight gradients into `p.grads` and returns
/// the input gradient. Consumes the cache, so each forward feeds at most one
/// backward.
pub fn block_backward(upstream: &Tensor, cache: BlockCache, p: &mut BlockParams) -> Result<Tensor> {
    let (dx, grads) = block_vjp(p, upstream, &cache)?;
    p.accumulate(&grads)?;
    Ok(dx)
}

/// Fresh block with N(0, 1/d) weights. `hidden` is used by `FfnRelu2` only.
pub fn init_block(kind: BlockKind, d: usize, hidden: usize, n: usize, mode: InitMode, rng: &mut Rng) -> Result<BlockParams> {
    if d == 0 || n == 0 {
        return Err(LabError::Param("block width and sequence length must be positive".into()));
    }
    let std = (1.0 / d as f64).sqrt();
    let weights = match kind {
        BlockKind::FfnLinear => vec![Tensor::gaussian(rng, &[d, d], 0.0, std)?],
        BlockKind::FfnRelu2 => {
            if hidden == 0 {
                return Err(LabError::Param("ffn_relu2 needs a positive hidden size".into()));
            }
            vec![
                Tensor::gaussian(rng, &[d, hidden], 0.0, std)?,
                Tensor::gaussian(rng, &[hidden, d], 0.0, std)?,
            ]
        }
        BlockKind::Attn => {
            // Draw W_Q even in analysis mode so both modes consume the same stream.
            let mut wq = Tensor::gaussian(rng, &[d, d], 0.0, std)?;
            if mode == InitMode::Analysis {
                wq.fill(0.0);
            }
            vec![
                wq,
                Tensor::gaussian(rng, &[d, d], 0.0, std)?,
                Tensor::gaussian(rng, &[d, d], 0.0, std)?,
            ]
        }
    };
    BlockParams::new(kind, weights)
}
