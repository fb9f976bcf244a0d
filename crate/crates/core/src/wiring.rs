//! Post-LN, Pre-LN and ResiDual stacks.
//!
//! Layer indices in this module are 0-based; block `k` here is block `k+1`
//! in the usual 1-based notation. Every variant keeps the sequence of
//! normalized tensors `x_ln[0..=N]`:
//!
//! * Post-LN:  `x_ln[0] = x_in`, `x_a[k] = x_ln[k] + f_k(x_ln[k])`,
//!   `x_ln[k+1] = LN_k(x_a[k])`, `y = x_ln[N]`.
//! * Pre-LN:   `x_a[0] = x_in`, `x_ln[k] = LN_k(x_a[k])`,
//!   `x_a[k+1] = x_a[k] + f_k(x_ln[k])`, `y = x_ln[N] = LN_N(x_a[N])`.
//! * ResiDual: the Post-LN stream plus `x_d[0] = x_in`,
//!   `x_d[k+1] = x_d[k] + f_k(x_ln[k])`, `y = x_ln[N] + LN_N(x_d[N])`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::blocks::{
    block_forward, block_vjp, init_block, BlockCache, BlockKind, BlockParams, InitMode, LayerNorm, LnCache, LnMode,
    LnVariant,
};
use crate::error::{LabError, Result};
use crate::rng::Rng;
use crate::tensor::{group_norm, Tensor};

/// Just under the largest finite half-precision value (65504).
pub const DEFAULT_OVERFLOW_THRESHOLD: f64 = 6.0e4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    PostLn,
    PreLn,
    Residual,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::PostLn, Variant::PreLn, Variant::Residual];

    pub fn name(self) -> &'static str {
        match self {
            Variant::PostLn => "post_ln",
            Variant::PreLn => "pre_ln",
            Variant::Residual => "residual",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "post_ln" | "postln" | "post" => Ok(Variant::PostLn),
            "pre_ln" | "preln" | "pre" => Ok(Variant::PreLn),
            "residual" | "resi_dual" | "ppln" => Ok(Variant::Residual),
            _ => Err(LabError::Param(format!("unknown variant `{s}`"))),
        }
    }
}

impl fmt::Display for LnMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match (self.variant, self.affine) {
            (LnVariant::Exact, false) => "exact",
            (LnVariant::Exact, true) => "exact_affine",
            (LnVariant::ApproxJacobian, _) => "approx_jacobian",
        })
    }
}

impl FromStr for LnMode {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(LnMode::EXACT),
            "exact_affine" => LnMode::new(LnVariant::Exact, true),
            "approx_jacobian" | "approx" => Ok(LnMode::APPROX_JACOBIAN),
            _ => Err(LabError::Param(format!("unknown layer-norm mode `{s}`"))),
        }
    }
}

impl fmt::Display for InitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InitMode::Analysis => "analysis",
            InitMode::Training => "training",
        })
    }
}

impl FromStr for InitMode {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "analysis" => Ok(InitMode::Analysis),
            "training" => Ok(InitMode::Training),
            _ => Err(LabError::Param(format!("unknown init mode `{s}`"))),
        }
    }
}

pub(crate) mod ln_mode_str {
    use super::*;
    use serde::{de::Error, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &LnMode, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&m.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<LnMode, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(D::Error::custom)
    }
}

/// Everything needed to build a network deterministically.
///
/// Serialized as JSON with the keys `variant`, `depth`, `width`, `seq_len`,
/// `hidden`, `blocks`, `init`, `ln_mode`, `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub variant: Variant,
    pub depth: usize,
    pub width: usize,
    pub seq_len: usize,
    pub hidden: usize,
    pub blocks: Vec<BlockKind>,
    pub init: InitMode,
    #[serde(with = "ln_mode_str")]
    pub ln_mode: LnMode,
    pub seed: u64,
}

impl NetworkConfig {
    /// Analysis setup: blocks alternate attention and linear feed-forward.
    pub fn analysis(variant: Variant, depth: usize, width: usize, seq_len: usize, seed: u64) -> Self {
        Self {
            variant,
            depth,
            width,
            seq_len,
            hidden: width,
            blocks: alternating(depth, BlockKind::Attn, BlockKind::FfnLinear),
            init: InitMode::Analysis,
            ln_mode: LnMode::EXACT,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.len() != self.depth {
            return Err(LabError::Param(format!(
                "block pattern has {} entries for depth {}",
                self.blocks.len(),
                self.depth
            )));
        }
        if self.width == 0 || self.seq_len == 0 {
            return Err(LabError::Param("width and seq_len must be positive".into()));
        }
        if self.blocks.contains(&BlockKind::FfnRelu2) && self.hidden == 0 {
            return Err(LabError::Param("ffn_relu2 blocks need hidden > 0".into()));
        }
        self.ln_mode.validate()
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: NetworkConfig = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

pub fn alternating(depth: usize, even: BlockKind, odd: BlockKind) -> Vec<BlockKind> {
    (0..depth).map(|k| if k % 2 == 0 { even } else { odd }).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ForwardOptions {
    /// Downscale the dual stream whenever its largest entry exceeds this.
    pub overflow_threshold: Option<f64>,
}

/// Activations and caches of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    variant: Variant,
    version: u64,
    pub input: Tensor,
    /// Normalized stream, `N+1` entries.
    pub x_ln: Vec<Tensor>,
    /// Post-addition tensors: `N` entries (Post-LN, ResiDual) or `N+1` (Pre-LN).
    pub x_a: Vec<Tensor>,
    /// Block outputs, `N` entries.
    pub x_f: Vec<Tensor>,
    /// Dual stream (ResiDual only), `N+1` entries.
    pub x_d: Vec<Tensor>,
    /// Scale factor applied to `x_d[k+1]` by the overflow guard (1 when
    /// untouched). Later block outputs enter the dual stream multiplied by
    /// the running product of these, so `x_d` stays a uniform rescaling of
    /// `x_in + Σ f` and its final layer norm is unaffected.
    pub dual_scales: Vec<f64>,
    pub output: Tensor,
    block_caches: Vec<BlockCache>,
    ln_caches: Vec<LnCache>,
}

impl ForwardTrace {
    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn output(&self) -> &Tensor {
        &self.output
    }
}

#[derive(Debug, Clone)]
pub struct BlockGrad {
    pub total: Vec<Tensor>,
    /// ResiDual only: part of `total` reaching the block through `x_ln[N]`.
    pub post: Option<Vec<Tensor>>,
    /// ResiDual only: part of `total` reaching the block through `LN(x_d[N])`.
    pub dual: Option<Vec<Tensor>>,
}

impl BlockGrad {
    pub fn total_norm(&self) -> f64 {
        group_norm(&self.total)
    }

    pub fn post_norm(&self) -> Option<f64> {
        self.post.as_deref().map(group_norm)
    }

    pub fn dual_norm(&self) -> Option<f64> {
        self.dual.as_deref().map(group_norm)
    }
}

/// Gradients of one backward pass.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub blocks: Vec<BlockGrad>,
    /// Affine (gain, bias) gradients per layer norm; `None` when not affine.
    pub norms: Vec<Option<(Vec<f64>, Vec<f64>)>>,
    /// Gradient with respect to `x_in`.
    pub input: Tensor,
}

impl GradReport {
    pub fn block_norms(&self) -> Vec<f64> {
        self.blocks.iter().map(BlockGrad::total_norm).collect()
    }

    /// Frobenius norm over every parameter gradient.
    pub fn global_norm(&self) -> f64 {
        let blocks: f64 = self.blocks.iter().map(|b| b.total_norm().powi(2)).sum();
        let norms: f64 = self
            .norms
            .iter()
            .flatten()
            .flat_map(|(g, b)| g.iter().chain(b))
            .map(|v| v * v)
            .sum();
        (blocks + norms).sqrt()
    }
}

struct Sweep {
    blocks: Vec<Vec<Tensor>>,
    norms: Vec<Option<(Vec<f64>, Vec<f64>)>>,
    input: Tensor,
}

#[derive(Debug, Clone)]
pub struct Network {
    config: NetworkConfig,
    blocks: Vec<BlockParams>,
    norms: Vec<LayerNorm>,
    version: u64,
}

impl Network {
    /// Builds a network with weights drawn from `config.seed`.
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(config.seed);
        let blocks = config
            .blocks
            .iter()
            .map(|&kind| init_block(kind, config.width, config.hidden, config.seq_len, config.init, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Self::from_blocks(config, blocks)
    }

    pub fn from_blocks(config: NetworkConfig, blocks: Vec<BlockParams>) -> Result<Self> {
        config.validate()?;
        if blocks.len() != config.depth
            || blocks
                .iter()
                .zip(&config.blocks)
                .any(|(b, &k)| b.kind() != k || b.width() != config.width)
        {
            return Err(LabError::Param("blocks do not match the configured pattern".into()));
        }
        let n_norms = match config.variant {
            Variant::PostLn => config.depth,
            Variant::PreLn | Variant::Residual => config.depth + 1,
        };
        let norms = (0..n_norms)
            .map(|_| LayerNorm::new(config.width, config.ln_mode))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            blocks,
            norms,
            version: 0,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn depth(&self) -> usize {
        self.config.depth
    }

    pub fn blocks(&self) -> &[BlockParams] {
        &self.blocks
    }

    pub fn norms(&self) -> &[LayerNorm] {
        &self.norms
    }

    /// Mutable parameters. Invalidates traces from earlier forward passes.
    pub fn params_mut(&mut self) -> (&mut [BlockParams], &mut [LayerNorm]) {
        self.version += 1;
        (&mut self.blocks, &mut self.norms)
    }

    pub fn zero_grads(&mut self) {
        self.blocks.iter_mut().for_each(BlockParams::zero_grads);
        self.norms.iter_mut().for_each(LayerNorm::zero_grads);
    }

    /// Adds the totals of `report` into the parameter accumulators.
    pub fn accumulate(&mut self, report: &GradReport) -> Result<()> {
        for (b, g) in self.blocks.iter_mut().zip(&report.blocks) {
            b.accumulate(&g.total)?;
        }
        for (ln, g) in self.norms.iter_mut().zip(&report.norms) {
            if let Some((gg, gb)) = g {
                ln.accumulate(gg, gb);
            }
        }
        Ok(())
    }

    pub fn forward(&self, x_in: &Tensor) -> Result<ForwardTrace> {
        self.forward_with(x_in, ForwardOptions::default())
    }

    pub fn forward_with(&self, x_in: &Tensor, opts: ForwardOptions) -> Result<ForwardTrace> {
        let (n_depth, d) = (self.config.depth, self.config.width);
        if x_in.shape().len() != 2 || x_in.cols() != d {
            return Err(LabError::shape("forward", format!("input {:?}, width {d}", x_in.shape())));
        }
        let mut tr = ForwardTrace {
            variant: self.config.variant,
            version: self.version,
            input: x_in.clone(),
            x_ln: Vec::with_capacity(n_depth + 1),
            x_a: Vec::with_capacity(n_depth + 1),
            x_f: Vec::with_capacity(n_depth),
            x_d: Vec::new(),
            dual_scales: Vec::new(),
            output: Tensor::zeros(x_in.shape()),
            block_caches: Vec::with_capacity(n_depth),
            ln_caches: Vec::with_capacity(n_depth + 1),
        };
        let norm = |k: usize, x: &Tensor| self.norms[k].forward(x).map_err(|e| e.at_layer(k));
        let block = |k: usize, x: &Tensor| block_forward(x, &self.blocks[k]).map_err(|e| e.at_layer(k));

        match self.config.variant {
            Variant::PostLn | Variant::Residual => {
                let dual = self.config.variant == Variant::Residual;
                tr.x_ln.push(x_in.clone());
                if dual {
                    tr.x_d.push(x_in.clone());
                }
                // cumulative guard factor: x_d is kept as c · (x_in + Σ f)
                let mut c = 1.0;
                for k in 0..n_depth {
                    let (f, bc) = block(k, &tr.x_ln[k])?;
                    let a = tr.x_ln[k].add(&f)?;
                    let (ln, lc) = norm(k, &a)?;
                    if dual {
                        let mut xd = if c == 1.0 { tr.x_d[k].add(&f)? } else { tr.x_d[k].add(&f.scale(c))? };
                        let mut eta = 1.0;
                        if let Some(th) = opts.overflow_threshold {
                            (xd, eta) = overflow_guard(&xd, th).map_err(|e| e.at_layer(k))?;
                        }
                        c *= eta;
                        tr.x_d.push(xd);
                        tr.dual_scales.push(eta);
                    }
                    tr.x_f.push(f);
                    tr.x_a.push(a);
                    tr.x_ln.push(ln);
                    tr.block_caches.push(bc);
                    tr.ln_caches.push(lc);
                }
                tr.output = tr.x_ln[n_depth].clone();
                if dual {
                    let (yd, lc) = norm(n_depth, &tr.x_d[n_depth])?;
                    tr.output.add_assign(&yd)?;
                    tr.ln_caches.push(lc);
                }
            }
            Variant::PreLn => {
                tr.x_a.push(x_in.clone());
                for k in 0..n_depth {
                    let (ln, lc) = norm(k, &tr.x_a[k])?;
                    let (f, bc) = block(k, &ln)?;
                    let a = tr.x_a[k].add(&f)?;
                    tr.x_ln.push(ln);
                    tr.ln_caches.push(lc);
                    tr.x_f.push(f);
                    tr.block_caches.push(bc);
                    tr.x_a.push(a);
                }
                let (y, lc) = norm(n_depth, &tr.x_a[n_depth])?;
                tr.x_ln.push(y.clone());
                tr.ln_caches.push(lc);
                tr.output = y;
            }
        }
        Ok(tr)
    }

    fn check_trace(&self, loss_grad: &Tensor, trace: &ForwardTrace) -> Result<()> {
        if trace.version != self.version || trace.variant != self.config.variant {
            return Err(LabError::Stale);
        }
        if loss_grad.shape() != trace.output.shape() {
            return Err(LabError::shape(
                "backward",
                format!("loss gradient {:?} vs output {:?}", loss_grad.shape(), trace.output.shape()),
            ));
        }
        Ok(())
    }

    /// Reverse sweep seeded at the normalized stream output (`main`) and, for
    /// ResiDual, at the output of the final dual layer norm (`dual`).
    fn sweep(&self, trace: &ForwardTrace, main: Option<&Tensor>, dual: Option<&Tensor>) -> Result<Sweep> {
        let n_depth = self.config.depth;
        let zero = || Tensor::zeros(trace.output.shape());
        let mut blocks = vec![Vec::new(); n_depth];
        let mut norms: Vec<Option<(Vec<f64>, Vec<f64>)>> = vec![None; self.norms.len()];
        let mut ln_back = |k: usize, g: &Tensor| -> Result<Tensor> {
            let (dx, affine) = self.norms[k].vjp(g, &trace.ln_caches[k]).map_err(|e| e.at_layer(k))?;
            norms[k] = affine;
            Ok(dx)
        };
        let block_back = |k: usize, g: &Tensor| {
            block_vjp(&self.blocks[k], g, &trace.block_caches[k]).map_err(|e| e.at_layer(k))
        };

        let input = match self.config.variant {
            Variant::PostLn | Variant::Residual => {
                // g: gradient at x_ln[k+1]; gd: gradient at x_d[k+1]
                let mut g = main.cloned().unwrap_or_else(zero);
                let mut gd = match dual {
                    Some(s) if self.config.variant == Variant::Residual => ln_back(n_depth, s)?,
                    _ => zero(),
                };
                // c[k]: guard factor in force when f_k joined the dual stream
                let mut c = vec![1.0; trace.dual_scales.len() + 1];
                for (k, eta) in trace.dual_scales.iter().enumerate() {
                    c[k + 1] = c[k] * eta;
                }
                for k in (0..n_depth).rev() {
                    if self.config.variant == Variant::Residual {
                        gd = gd.scale(trace.dual_scales[k]);
                    }
                    let ga = ln_back(k, &g)?;
                    let gf = if self.config.variant == Variant::Residual {
                        if c[k] == 1.0 { ga.add(&gd)? } else { ga.add(&gd.scale(c[k]))? }
                    } else {
                        ga.clone()
                    };
                    let (dx, wg) = block_back(k, &gf)?;
                    blocks[k] = wg;
                    g = ga.add(&dx)?;
                }
                if self.config.variant == Variant::Residual {
                    g.add_assign(&gd)?;
                }
                g
            }
            Variant::PreLn => {
                let seed = main.cloned().unwrap_or_else(zero);
                // g: gradient at x_a[k+1]
                let mut g = ln_back(n_depth, &seed)?;
                for k in (0..n_depth).rev() {
                    let (dln, wg) = block_back(k, &g)?;
                    blocks[k] = wg;
                    g.add_assign(&ln_back(k, &dln)?)?;
                }
                g
            }
        };
        Ok(Sweep { blocks, norms, input })
    }

    /// Exact gradients of `⟨loss_grad, y⟩` with respect to every parameter.
    ///
    /// For ResiDual the report also carries the split of each block gradient
    /// into the component flowing back from `x_ln[N]` and the one flowing back
    /// from `LN(x_d[N])`, each computed by its own seeded reverse sweep; the
    /// total comes from a single sweep seeded at both.
    pub fn backward(&self, loss_grad: &Tensor, trace: &ForwardTrace) -> Result<GradReport> {
        self.check_trace(loss_grad, trace)?;
        let residual = self.config.variant == Variant::Residual;
        let total = self.sweep(trace, Some(loss_grad), residual.then_some(loss_grad))?;
        let (post, dual) = if residual {
            let post = self.sweep(trace, Some(loss_grad), None)?;
            let dual = self.sweep(trace, None, Some(loss_grad))?;
            (Some(post.blocks), Some(dual.blocks))
        } else {
            (None, None)
        };
        let mut post = post.map(Vec::into_iter);
        let mut dual = dual.map(Vec::into_iter);
        let blocks = total
            .blocks
            .into_iter()
            .map(|t| BlockGrad {
                total: t,
                post: post.as_mut().and_then(Iterator::next),
                dual: dual.as_mut().and_then(Iterator::next),
            })
            .collect();
        Ok(GradReport {
            blocks,
            norms: total.norms,
            input: total.input,
        })
    }

    /// Like [`Network::backward`] but skips the ResiDual decomposition sweeps.
    pub fn backward_total(&self, loss_grad: &Tensor, trace: &ForwardTrace) -> Result<GradReport> {
        self.check_trace(loss_grad, trace)?;
        let residual = self.config.variant == Variant::Residual;
        let total = self.sweep(trace, Some(loss_grad), residual.then_some(loss_grad))?;
        Ok(GradReport {
            blocks: total
                .blocks
                .into_iter()
                .map(|t| BlockGrad {
                    total: t,
                    post: None,
                    dual: None,
                })
                .collect(),
            norms: total.norms,
            input: total.input,
        })
    }
}

/// Rescales `xd` by `η = threshold / (2·max|entry|)` when its largest entry
/// exceeds `threshold`; returns the (possibly) rescaled tensor and `η`.
pub fn overflow_guard(xd: &Tensor, threshold: f64) -> Result<(Tensor, f64)> {
    if !(threshold > 0.0) {
        return Err(LabError::Param(format!("overflow threshold must be > 0, got {threshold}")));
    }
    if !xd.is_finite() {
        return Err(LabError::Overflow);
    }
    let peak = xd.max_abs();
    if peak > threshold {
        let eta = threshold / (2.0 * peak);
        Ok((xd.scale(eta), eta))
    } else {
        Ok((xd.clone(), 1.0))
    }
}
