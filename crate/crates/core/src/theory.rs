//! Experiments on gradient vanishing and representation collapse.
//!
//! Two kinds of evidence live here: profiles measured on real networks at
//! initialization, and Monte-Carlo runs of the idealized Gaussian
//! recurrences (block outputs `x_f ~ N(0, σ²I)`, layer norm as a rescaling)
//! compared against their closed forms.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blocks::{ln_forward, BlockKind, LnMode};
use crate::error::{LabError, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::wiring::{Network, NetworkConfig, Variant};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProfileResult {
    /// 1-based block index.
    pub k: usize,
    pub statistic: &'static str,
    pub mean: f64,
    pub stderr: f64,
    pub theory: Option<f64>,
}

/// Mean and standard error of the mean.
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Unbiased sample variance.
pub fn sample_variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
}

/// Least-squares slope of `ys` against `xs`.
pub fn ls_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &p in &idx[i..=j] {
            r[p] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

/// Analysis network for the profiles: a stack of linear feed-forward
/// blocks, which satisfy `‖f(x)‖ ≈ ‖x‖` at 1/d-variance init. Uniform
/// attention over independent token rows shrinks norms by about `1/√n`.
pub fn profile_config(variant: Variant, depth: usize, width: usize, seq_len: usize, seed: u64) -> NetworkConfig {
    NetworkConfig {
        blocks: vec![BlockKind::FfnLinear; depth],
        ..NetworkConfig::analysis(variant, depth, width, seq_len, seed)
    }
}

/// Standardized random input rows and a N(0, I) regression target.
pub fn analysis_data(seq_len: usize, width: usize, seed: u64) -> Result<(Tensor, Tensor)> {
    let mut rng = Rng::with_stream(seed, 1);
    let x = Tensor::gaussian(&mut rng, &[seq_len, width], 0.0, 1.0)?;
    let x = ln_forward(&x, LnMode::EXACT)?.0;
    let target = Tensor::gaussian(&mut rng, &[seq_len, width], 0.0, 1.0)?;
    Ok((x, target))
}

/// `L = (1/(nd)) Σ (y − r)²` and its gradient with respect to `y`.
pub fn analysis_loss(y: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    let diff = y.sub(target)?;
    let scale = 1.0 / y.len() as f64;
    let loss = diff.data().iter().map(|v| v * v).sum::<f64>() * scale;
    Ok((loss, diff.scale(2.0 * scale)))
}

struct SeedGrads {
    total: Vec<f64>,
    post: Option<Vec<f64>>,
    dual: Option<Vec<f64>>,
}

fn seed_configs(cfg: &NetworkConfig, seeds: usize) -> Vec<NetworkConfig> {
    (0..seeds as u64)
        .map(|s| NetworkConfig {
            seed: cfg.seed.wrapping_add(s),
            ..cfg.clone()
        })
        .collect()
}

fn summarize(per_seed: &[Vec<f64>], statistic: &'static str, theory: Option<&[CurvePoint]>) -> Vec<ProfileResult> {
    let depth = per_seed[0].len();
    (0..depth)
        .map(|k| {
            let col: Vec<f64> = per_seed.iter().map(|s| s[k]).collect();
            let (mean, stderr) = mean_stderr(&col);
            ProfileResult {
                k: k + 1,
                statistic,
                mean,
                stderr,
                theory: theory.map(|c| c[k].value),
            }
        })
        .collect()
}

/// Per-block `‖∂L/∂w_k‖_F` at initialization, averaged over `seeds`
/// networks (seeds `cfg.seed`, `cfg.seed + 1`, ...). ResiDual rows also
/// include the post and dual components.
pub fn gradnorm_profile(cfg: &NetworkConfig, seeds: usize) -> Result<Vec<ProfileResult>> {
    if seeds == 0 {
        return Err(LabError::Param("need at least one seed".into()));
    }
    let runs = seed_configs(cfg, seeds)
        .into_par_iter()
        .map(|c| -> Result<SeedGrads> {
            let (x, target) = analysis_data(c.seq_len, c.width, c.seed)?;
            let net = Network::new(c)?;
            let trace = net.forward(&x)?;
            let (_, dy) = analysis_loss(&trace.output, &target)?;
            let rep = net.backward(&dy, &trace)?;
            Ok(SeedGrads {
                total: rep.block_norms(),
                post: rep.blocks.iter().map(|b| b.post_norm()).collect(),
                dual: rep.blocks.iter().map(|b| b.dual_norm()).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let curves = if cfg.depth >= 2 {
        Some((
            theory_curves(cfg.variant, cfg.depth)?,
            theory_curves(Variant::PostLn, cfg.depth)?,
            theory_curves(Variant::PreLn, cfg.depth)?,
        ))
    } else {
        None
    };
    let totals: Vec<Vec<f64>> = runs.iter().map(|r| r.total.clone()).collect();
    let mut out = summarize(&totals, "total", curves.as_ref().map(|c| c.0.as_slice()));
    if cfg.variant == Variant::Residual {
        let post: Vec<Vec<f64>> = runs.iter().map(|r| r.post.clone().unwrap()).collect();
        let dual: Vec<Vec<f64>> = runs.iter().map(|r| r.dual.clone().unwrap()).collect();
        out.extend(summarize(&post, "post", curves.as_ref().map(|c| c.1.as_slice())));
        out.extend(summarize(&dual, "dual", curves.as_ref().map(|c| c.2.as_slice())));
    }
    Ok(out)
}

/// Per-block mean over coordinates of `|x_ln[k+1] − x_ln[k]|` at
/// initialization (1-based `k`), averaged over seeds. For Post-LN and
/// ResiDual this is the normalized (Post-LN) stream.
pub fn repdelta_profile(cfg: &NetworkConfig, seeds: usize) -> Result<Vec<ProfileResult>> {
    if seeds == 0 {
        return Err(LabError::Param("need at least one seed".into()));
    }
    let per_seed = seed_configs(cfg, seeds)
        .into_par_iter()
        .map(|c| -> Result<Vec<f64>> {
            let (x, _) = analysis_data(c.seq_len, c.width, c.seed)?;
            let net = Network::new(c)?;
            let trace = net.forward(&x)?;
            (0..net.depth())
                .map(|k| Ok(trace.x_ln[k + 1].sub(&trace.x_ln[k])?.map(f64::abs).mean()))
                .collect()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(&per_seed, "mean_abs_delta", None))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurvePoint {
    pub k: usize,
    pub value: f64,
    /// True where the log term of the Pre-LN estimate was dropped.
    pub boundary: bool,
}

pub fn postln_curve(n: usize, k: usize) -> f64 {
    let gap = (n - k) as f64;
    0.5f64.powf(gap / 2.0) * gap.sqrt().exp()
}

/// `√(log(N−k)/N)`; for `N − k ≤ 1` the log term is dropped, giving `√(1/N)`.
pub fn preln_curve(n: usize, k: usize) -> (f64, bool) {
    let gap = n - k;
    if gap <= 1 {
        ((1.0 / n as f64).sqrt(), true)
    } else {
        (((gap as f64).ln() / n as f64).sqrt(), false)
    }
}

/// Unnormalized gradient-norm estimates per block `k = 1..=N`. ResiDual
/// takes the pointwise maximum of the other two.
pub fn theory_curves(variant: Variant, n: usize) -> Result<Vec<CurvePoint>> {
    if n < 2 {
        return Err(LabError::Param(format!("theory curves need N >= 2, got {n}")));
    }
    Ok((1..=n)
        .map(|k| {
            let post = postln_curve(n, k);
            let (pre, boundary) = preln_curve(n, k);
            let (value, boundary) = match variant {
                Variant::PostLn => (post, false),
                Variant::PreLn => (pre, boundary),
                Variant::Residual => (post.max(pre), boundary && pre >= post),
            };
            CurvePoint { k, value, boundary }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// `x_a[k] = Σ_{j<k} x_f[j]`, LN as division by `√(k−1)·σ`.
    PrelnSurrogate,
    /// `x_ln[k+1] = (x_ln[k] + x_f[k]) / √(1+σ²)`.
    PostlnSurrogate,
}

impl std::str::FromStr for Regime {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "preln" | "pre_ln" | "preln_surrogate" => Ok(Regime::PrelnSurrogate),
            "postln" | "post_ln" | "postln_surrogate" => Ok(Regime::PostlnSurrogate),
            _ => Err(LabError::Param(format!("unknown regime `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollapseSimConfig {
    pub depth: usize,
    pub sigma: f64,
    pub trials: usize,
    pub seed: u64,
    pub regime: Regime,
}

impl CollapseSimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) {
            return Err(LabError::Param("sigma must be > 0".into()));
        }
        if self.trials < 10_000 {
            return Err(LabError::Param("collapse simulation needs at least 10^4 trials".into()));
        }
        if self.depth == 0 {
            return Err(LabError::Param("depth must be positive".into()));
        }
        Ok(())
    }
}

/// `ω_k² = 2 / (√k (√(k−1) + √k))`.
pub fn preln_omega_sq(k: usize) -> f64 {
    let k = k as f64;
    2.0 / (k.sqrt() * ((k - 1.0).sqrt() + k.sqrt()))
}

/// `ω² = 2 − 2√(1+σ²)/(1+σ²)`, independent of depth.
pub fn postln_omega_sq(sigma: f64) -> f64 {
    let s = 1.0 + sigma * sigma;
    2.0 - 2.0 * s.sqrt() / s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CollapseRow {
    pub k: usize,
    pub sample_var: f64,
    /// `√(2 s⁴ / (M−1))` with `s²` the sample variance.
    pub stderr: f64,
    pub theory: f64,
}

/// Normalized surrogate stream `x_ln[1..=N+1]` for one coordinate. Slot 0
/// is the normalized input, an independent standard normal.
fn surrogate_stream(regime: Regime, depth: usize, sigma: f64, rng: &mut Rng) -> Vec<f64> {
    let mut ln = Vec::with_capacity(depth + 1);
    ln.push(rng.standard_normal());
    match regime {
        Regime::PrelnSurrogate => {
            let mut acc = 0.0;
            for k in 1..=depth {
                acc += sigma * rng.standard_normal();
                ln.push(acc / ((k as f64).sqrt() * sigma));
            }
        }
        Regime::PostlnSurrogate => {
            let s = (1.0 + sigma * sigma).sqrt();
            for k in 0..depth {
                let f = sigma * rng.standard_normal();
                ln.push((ln[k] + f) / s);
            }
        }
    }
    ln
}

/// Empirical `Var(x_ln[k+1] − x_ln[k])` over `trials` independent
/// coordinates, for `k = 1..=N`, next to its closed form.
pub fn collapse_simulation(cfg: &CollapseSimConfig) -> Result<Vec<CollapseRow>> {
    cfg.validate()?;
    let mut rng = Rng::new(cfg.seed);
    let mut deltas = vec![Vec::with_capacity(cfg.trials); cfg.depth];
    for _ in 0..cfg.trials {
        let ln = surrogate_stream(cfg.regime, cfg.depth, cfg.sigma, &mut rng);
        for (k, col) in deltas.iter_mut().enumerate() {
            col.push(ln[k + 1] - ln[k]);
        }
    }
    let m = cfg.trials as f64;
    Ok(deltas
        .iter()
        .enumerate()
        .map(|(i, col)| {
            let var = sample_variance(col);
            CollapseRow {
                k: i + 1,
                sample_var: var,
                stderr: (2.0 * var * var / (m - 1.0)).sqrt(),
                theory: match cfg.regime {
                    Regime::PrelnSurrogate => preln_omega_sq(i + 1),
                    Regime::PostlnSurrogate => postln_omega_sq(cfg.sigma),
                },
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OutputDiff {
    pub depth: usize,
    pub sigma: f64,
    pub mean_abs_diff: f64,
    pub stderr: f64,
    /// Pre-LN: the folded-normal mean `√(2/π)·ω_N` (absent at N = 1).
    /// Post-LN / ResiDual: the lower bound `√(2/π)·ω`.
    pub theory: Option<f64>,
}

/// `E|y_N − y_{N−1}|` per coordinate for two surrogate stacks that share
/// their first `N − 1` block outputs.
///
/// * Pre-LN: `y_N = x_ln[N+1]`, so the difference is the last delta of the
///   Pre-LN surrogate; `y_0` is the normalized input.
/// * Post-LN: `y_N = x_ln[N+1]` of the Post-LN surrogate.
/// * ResiDual: `y_N = x_ln[N+1] + x_d[N+1]/√(1+Nσ²)` with the dual stream
///   `x_d[k+1] = x_d[k] + x_f[k]` seeded by the same input.
pub fn output_difference_experiment(variant: Variant, depth: usize, sigma: f64, trials: usize, seed: u64) -> Result<OutputDiff> {
    if depth == 0 || trials < 2 || !(sigma > 0.0) {
        return Err(LabError::Param("need depth >= 1, trials >= 2 and sigma > 0".into()));
    }
    let mut rng = Rng::new(seed);
    let mut diffs = Vec::with_capacity(trials);
    let s = (1.0 + sigma * sigma).sqrt();
    for _ in 0..trials {
        let x0 = rng.standard_normal();
        let diff = match variant {
            Variant::PreLn => {
                let mut acc = 0.0;
                let mut prev = x0;
                let mut cur = x0;
                for k in 1..=depth {
                    acc += sigma * rng.standard_normal();
                    prev = cur;
                    cur = acc / ((k as f64).sqrt() * sigma);
                }
                cur - prev
            }
            Variant::PostLn | Variant::Residual => {
                let (mut ln, mut xd) = (x0, x0);
                let (mut ln_prev, mut xd_prev) = (x0, x0);
                for _ in 0..depth {
                    let f = sigma * rng.standard_normal();
                    ln_prev = ln;
                    xd_prev = xd;
                    ln = (ln + f) / s;
                    xd += f;
                }
                if variant == Variant::PostLn {
                    ln - ln_prev
                } else {
                    let nf = depth as f64;
                    let y = ln + xd / (1.0 + nf * sigma * sigma).sqrt();
                    let y_prev = ln_prev + xd_prev / (1.0 + (nf - 1.0) * sigma * sigma).sqrt();
                    y - y_prev
                }
            }
        };
        diffs.push(diff.abs());
    }
    let (mean, stderr) = mean_stderr(&diffs);
    let folded = (2.0 / PI).sqrt();
    let theory = match variant {
        Variant::PreLn => (depth > 1).then(|| folded * preln_omega_sq(depth).sqrt()),
        Variant::PostLn | Variant::Residual => Some(folded * postln_omega_sq(sigma).sqrt()),
    };
    Ok(OutputDiff {
        depth,
        sigma,
        mean_abs_diff: mean,
        stderr,
        theory,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn omega_spot_values() {
        assert!((preln_omega_sq(1) - 2.0).abs() < 1e-15);
        assert!((preln_omega_sq(4) - (2.0 - 3f64.sqrt())).abs() < 1e-15);
        assert!((postln_omega_sq(1.0) - (2.0 - 2f64.sqrt())).abs() < 1e-15);
    }

    #[test]
    fn curve_spot_values() {
        let post = theory_curves(Variant::PostLn, 10).unwrap();
        assert_eq!(post[9].value, 1.0);
        assert!((post[5].value - 0.25 * 2f64.exp()).abs() < 1e-12);
        assert!((post[5].value - 1.847).abs() < 1e-3);
        let pre = theory_curves(Variant::PreLn, 10).unwrap();
        assert!(pre[9].boundary && pre[8].boundary && !pre[7].boundary);
        let res = theory_curves(Variant::Residual, 10).unwrap();
        for k in 0..10 {
            assert_eq!(res[k].value, post[k].value.max(pre[k].value));
        }
        assert!(theory_curves(Variant::PostLn, 1).is_err());
    }

    #[test]
    fn spearman_and_slope() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert!((spearman(&xs, &[10.0, 20.0, 25.0, 100.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&xs, &[4.0, 3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        assert!((ls_slope(&xs, &[1.0, 3.0, 5.0, 7.0]) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn collapse_config_guards() {
        let cfg = CollapseSimConfig {
            depth: 4,
            sigma: 1.0,
            trials: 100,
            seed: 0,
            regime: Regime::PrelnSurrogate,
        };
        assert!(collapse_simulation(&cfg).is_err());
        assert!(collapse_simulation(&CollapseSimConfig { trials: 10_000, sigma: 0.0, ..cfg }).is_err());
    }

    #[test]
    fn folded_normal_mean() {
        let mut rng = Rng::new(99);
        let omega = 0.7;
        let xs: Vec<f64> = (0..100_000).map(|_| (omega * rng.standard_normal()).abs()).collect();
        let (m, se) = mean_stderr(&xs);
        assert!((m - (2.0 / PI).sqrt() * omega).abs() < 3.0 * se);
    }

    #[test]
    fn single_layer_preln_difference_has_no_theory() {
        let r = output_difference_experiment(Variant::PreLn, 1, 1.0, 1000, 3).unwrap();
        assert!(r.theory.is_none());
        assert!(r.mean_abs_diff > 0.0);
    }
}
