//! Central finite-difference checks of the network reverse pass.

use serde::Serialize;

use crate::blocks::{BlockKind, InitMode, LnMode, LnVariant};
use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::wiring::{Network, NetworkConfig, Variant};

/// Entries whose magnitude is below this are compared on an absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

#[derive(Debug, Clone, Serialize)]
pub struct ParamCheck {
    pub param: String,
    pub entries: usize,
    pub max_rel_err: f64,
}

fn probe(net: &Network, x: &Tensor, upstream: &Tensor) -> Result<f64> {
    let y = net.forward(x)?.output;
    Ok(y.data().iter().zip(upstream.data()).map(|(a, b)| a * b).sum())
}

fn central(step: f64, mut eval: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    Ok((eval(step)? - eval(-step)?) / (2.0 * step))
}

/// Compares every analytic gradient of `⟨upstream, y⟩` (block weights,
/// affine layer-norm parameters, input) against central differences.
pub fn check_network(net: &Network, x: &Tensor, upstream: &Tensor, step: f64) -> Result<Vec<ParamCheck>> {
    let trace = net.forward(x)?;
    let report = net.backward(upstream, &trace)?;
    let mut out = Vec::new();

    for (k, grad) in report.blocks.iter().enumerate() {
        for (wi, g) in grad.total.iter().enumerate() {
            let mut worst: f64 = 0.0;
            for idx in 0..g.len() {
                let fd = central(step, |h| {
                    let mut p = net.clone();
                    p.params_mut().0[k].weights_mut()[wi].data_mut()[idx] += h;
                    probe(&p, x, upstream)
                })?;
                worst = worst.max(relative_error(g.data()[idx], fd));
            }
            out.push(ParamCheck {
                param: format!("block{k}.w{wi}"),
                entries: g.len(),
                max_rel_err: worst,
            });
        }
    }

    for (k, affine) in report.norms.iter().enumerate() {
        let Some((gg, gb)) = affine else { continue };
        for (name, grads, is_gain) in [("gain", gg, true), ("bias", gb, false)] {
            let mut worst: f64 = 0.0;
            for (j, &a) in grads.iter().enumerate() {
                let fd = central(step, |h| {
                    let mut p = net.clone();
                    let ln = &mut p.params_mut().1[k];
                    if is_gain {
                        ln.gain_mut()[j] += h;
                    } else {
                        ln.bias_mut()[j] += h;
                    }
                    probe(&p, x, upstream)
                })?;
                worst = worst.max(relative_error(a, fd));
            }
            out.push(ParamCheck {
                param: format!("ln{k}.{name}"),
                entries: grads.len(),
                max_rel_err: worst,
            });
        }
    }

    let mut worst: f64 = 0.0;
    for idx in 0..x.len() {
        let fd = central(step, |h| {
            let mut xp = x.clone();
            xp.data_mut()[idx] += h;
            probe(net, &xp, upstream)
        })?;
        worst = worst.max(relative_error(report.input.data()[idx], fd));
    }
    out.push(ParamCheck {
        param: "input".into(),
        entries: x.len(),
        max_rel_err: worst,
    });
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteConfig {
    pub variants: Vec<Variant>,
    pub depth: usize,
    pub width: usize,
    pub seq_len: usize,
    pub hidden: usize,
    pub instances: usize,
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            variants: Variant::ALL.to_vec(),
            depth: 3,
            width: 8,
            seq_len: 4,
            hidden: 12,
            instances: 21,
            step: 1e-5,
            tolerance: 1e-5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteRow {
    pub instance: usize,
    pub variant: Variant,
    pub blocks: String,
    pub ln_mode: String,
    pub param: String,
    pub max_rel_err: f64,
    pub pass: bool,
}

const PATTERNS: [[BlockKind; 3]; 4] = [
    [BlockKind::Attn, BlockKind::FfnRelu2, BlockKind::FfnLinear],
    [BlockKind::FfnLinear; 3],
    [BlockKind::FfnRelu2; 3],
    [BlockKind::Attn; 3],
];

/// Random small instances cycling through block patterns and layer-norm
/// modes (plain and affine), for every requested wiring.
pub fn run_suite(cfg: &SuiteConfig) -> Result<Vec<SuiteRow>> {
    let mut rows = Vec::new();
    for instance in 0..cfg.instances {
        let pattern = &PATTERNS[instance % PATTERNS.len()];
        let blocks: Vec<BlockKind> = (0..cfg.depth).map(|k| pattern[k % 3]).collect();
        let ln_mode = if instance % 2 == 0 {
            LnMode::EXACT
        } else {
            LnMode::new(LnVariant::Exact, true)?
        };
        for &variant in &cfg.variants {
            let mut rng = Rng::with_stream(cfg.seed, instance as u64);
            let net_cfg = NetworkConfig {
                variant,
                depth: cfg.depth,
                width: cfg.width,
                seq_len: cfg.seq_len,
                hidden: cfg.hidden,
                blocks: blocks.clone(),
                init: InitMode::Training,
                ln_mode,
                seed: cfg.seed.wrapping_mul(1000).wrapping_add(instance as u64),
            };
            let mut net = Network::new(net_cfg)?;
            if ln_mode.affine {
                for ln in net.params_mut().1 {
                    ln.gain_mut().iter_mut().for_each(|g| *g = rng.gaussian(1.0, 0.2));
                    ln.bias_mut().iter_mut().for_each(|b| *b = rng.gaussian(0.0, 0.2));
                }
            }
            let x = Tensor::gaussian(&mut rng, &[cfg.seq_len, cfg.width], 0.0, 1.0)?;
            let up = Tensor::gaussian(&mut rng, &[cfg.seq_len, cfg.width], 0.0, 1.0)?;
            let names: Vec<&str> = blocks.iter().map(|b| b.name()).collect();
            for c in check_network(&net, &x, &up, cfg.step)? {
                rows.push(SuiteRow {
                    instance,
                    variant,
                    blocks: names.join("+"),
                    ln_mode: ln_mode.to_string(),
                    pass: c.max_rel_err < cfg.tolerance,
                    param: c.param,
                    max_rel_err: c.max_rel_err,
                });
            }
        }
    }
    Ok(rows)
}
