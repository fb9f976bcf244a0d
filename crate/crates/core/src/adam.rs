//! Adam with bias correction, the derivative of its update with respect to
//! the incoming gradient, and the absolute condition number built from it.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            alpha: 1e-4,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-6,
        }
    }
}

/// Moments after one scalar step, and the update `u` to subtract.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarStep {
    pub m: f64,
    pub v: f64,
    pub update: f64,
}

/// One Adam step for a single coordinate, where `t` is the new step index.
pub fn scalar_step(h: &AdamHyper, m_prev: f64, v_prev: f64, t: u64, g: f64) -> ScalarStep {
    let m = h.beta1 * m_prev + (1.0 - h.beta1) * g;
    let v = h.beta2 * v_prev + (1.0 - h.beta2) * g * g;
    let m_hat = m / (1.0 - h.beta1.powf(t as f64));
    let v_hat = v / (1.0 - h.beta2.powf(t as f64));
    ScalarStep {
        m,
        v,
        update: h.alpha * m_hat / (v_hat.sqrt() + h.eps),
    }
}

/// `∂u/∂g` of one coordinate's update at step `t`, given the moments before
/// the step. Where the second moment is exactly zero the denominator term
/// is taken as its limit along real trajectories (zero).
pub fn update_derivative(h: &AdamHyper, m_prev: f64, v_prev: f64, t: u64, g: f64) -> f64 {
    let bc1 = 1.0 - h.beta1.powf(t as f64);
    let bc2 = 1.0 - h.beta2.powf(t as f64);
    let m = h.beta1 * m_prev + (1.0 - h.beta1) * g;
    let v = h.beta2 * v_prev + (1.0 - h.beta2) * g * g;
    let root = (v / bc2).sqrt();
    let denom = h.eps + root;
    // d(root)/dg = g (1 − β₂) / (bc2 · root)
    let d_root = if v > 0.0 {
        g * (1.0 - h.beta2) / (bc2.sqrt() * v.sqrt())
    } else {
        0.0
    };
    h.alpha / bc1 * ((1.0 - h.beta1) / denom - m * d_root / (denom * denom))
}

/// First and second moments of a parameter tensor plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub hyper: AdamHyper,
    m: Tensor,
    v: Tensor,
    t: u64,
}

impl AdamState {
    pub fn new(shape: &[usize], hyper: AdamHyper) -> Self {
        Self {
            hyper,
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            t: 0,
        }
    }

    /// State with explicit moments, for probing the update map.
    pub fn with_moments(m: Tensor, v: Tensor, t: u64, hyper: AdamHyper) -> Result<Self> {
        if m.shape() != v.shape() {
            return Err(LabError::shape("adam_state", "moment shapes differ"));
        }
        if v.data().iter().any(|&x| !(x >= 0.0)) {
            return Err(LabError::Param("second moment must be non-negative".into()));
        }
        Ok(Self { hyper, m, v, t })
    }

    pub fn step(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self) -> &Tensor {
        &self.m
    }

    pub fn second_moment(&self) -> &Tensor {
        &self.v
    }

    fn check(&self, g: &Tensor) -> Result<()> {
        if g.len() != self.m.len() {
            return Err(LabError::shape(
                "adam",
                format!("gradient {:?} vs state {:?}", g.shape(), self.m.shape()),
            ));
        }
        if !g.is_finite() {
            return Err(LabError::NonFinite("adam gradient"));
        }
        Ok(())
    }

    /// Advances the moments with `g` and returns the update `u`; the caller
    /// applies `w ← w − u`.
    pub fn update(&mut self, g: &Tensor) -> Result<Tensor> {
        self.check(g)?;
        self.t += 1;
        let mut u = Tensor::zeros(self.m.shape());
        let (ms, vs) = (self.m.data_mut(), self.v.data_mut());
        for (i, (&gi, ui)) in g.data().iter().zip(u.data_mut()).enumerate() {
            let s = scalar_step(&self.hyper, ms[i], vs[i], self.t, gi);
            ms[i] = s.m;
            vs[i] = s.v;
            *ui = s.update;
        }
        Ok(u)
    }

    /// Per-coordinate `∂u/∂g` for the next step, evaluated at `g`.
    pub fn derivative(&self, g: &Tensor) -> Result<Tensor> {
        self.check(g)?;
        let t = self.t + 1;
        let data = g
            .data()
            .iter()
            .zip(self.m.data().iter().zip(self.v.data()))
            .map(|(&gi, (&m, &v))| update_derivative(&self.hyper, m, v, t, gi))
            .collect();
        Tensor::new(g.shape().to_vec(), data)
    }

    /// Absolute condition number of the next update at `g`: the 2-norm of
    /// the (diagonal) Jacobian of `g ↦ u(g)`.
    pub fn kappa(&self, g: &Tensor) -> Result<f64> {
        Ok(self.derivative(g)?.frobenius_norm())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KappaSimConfig {
    pub d: usize,
    pub hyper: AdamHyper,
    pub sigmas: Vec<f64>,
    pub t_max: u64,
    pub seed: u64,
}

impl Default for KappaSimConfig {
    fn default() -> Self {
        Self {
            d: 1024,
            hyper: AdamHyper::default(),
            sigmas: (0..=10).map(|i| i as f64 / 1e8).collect(),
            t_max: 20,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KappaRow {
    pub t: u64,
    pub sigma_g: f64,
    pub kappa: f64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct KappaProbe {
    pub d: usize,
    pub rows: Vec<KappaRow>,
}

impl KappaProbe {
    pub fn get(&self, t: u64, sigma_g: f64) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.t == t && r.sigma_g == sigma_g)
            .map(|r| r.kappa)
    }
}

/// For every `σ_g`, runs a fresh Adam state for `t_max` steps; each step
/// draws `g ~ N(0, σ_g² I)`, records κ̂ at `g`, then applies the moment
/// update. Each grid cell uses its own random stream.
pub fn kappa_simulation(cfg: &KappaSimConfig) -> Result<KappaProbe> {
    if cfg.d == 0 {
        return Err(LabError::Param("dimension must be positive".into()));
    }
    let mut rows = Vec::with_capacity(cfg.sigmas.len() * cfg.t_max as usize);
    for (si, &sigma) in cfg.sigmas.iter().enumerate() {
        let mut rng = Rng::with_stream(cfg.seed, si as u64);
        let mut state = AdamState::new(&[cfg.d], cfg.hyper);
        for t in 1..=cfg.t_max {
            let g = Tensor::gaussian(&mut rng, &[cfg.d], 0.0, sigma)?;
            let kappa = state.kappa(&g)?;
            state.update(&g)?;
            rows.push(KappaRow {
                t,
                sigma_g: sigma,
                kappa,
                seed: cfg.seed,
            });
        }
    }
    Ok(KappaProbe { d: cfg.d, rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    InvSqrtWarmup,
    InvSqrtNoWarmup,
    LinearDecay,
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Schedule::InvSqrtWarmup => "inv_sqrt_warmup",
            Schedule::InvSqrtNoWarmup => "inv_sqrt_no_warmup",
            Schedule::LinearDecay => "linear_decay",
        })
    }
}

impl FromStr for Schedule {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "inv_sqrt_warmup" | "warmup" => Ok(Schedule::InvSqrtWarmup),
            "inv_sqrt_no_warmup" | "inv_sqrt" | "no_warmup" => Ok(Schedule::InvSqrtNoWarmup),
            "linear_decay" | "linear" => Ok(Schedule::LinearDecay),
            _ => Err(LabError::Param(format!("unknown schedule `{s}`"))),
        }
    }
}

/// Learning rate at step `t` (1-based; 0 is treated as 1).
pub fn lr_schedule(t: u64, kind: Schedule, base_lr: f64, warmup_steps: u64, total_steps: u64) -> f64 {
    let t = t.max(1) as f64;
    match kind {
        Schedule::InvSqrtWarmup => {
            let w = warmup_steps.max(1) as f64;
            base_lr * (w.sqrt() / t.sqrt()).min(t / w)
        }
        Schedule::InvSqrtNoWarmup => base_lr / t.sqrt(),
        Schedule::LinearDecay => base_lr * (1.0 - t / total_steps.max(1) as f64).max(0.0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_bias_corrections_cancel() {
        let h = AdamHyper::default();
        let mut st = AdamState::new(&[1], h);
        let g = 1e-3;
        let u = st.update(&Tensor::new(vec![1], vec![g]).unwrap()).unwrap();
        let want = h.alpha * g / (g + h.eps);
        assert!((u.data()[0] - want).abs() < 1e-18);
        assert!((u.data()[0] - 9.99e-5).abs() < 1e-7);
        assert_eq!(st.step(), 1);
    }

    #[test]
    fn zero_gradient_zero_update() {
        let mut st = AdamState::new(&[4], AdamHyper::default());
        let u = st.update(&Tensor::zeros(&[4])).unwrap();
        assert!(u.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_gradients() {
        let mut st = AdamState::new(&[2], AdamHyper::default());
        assert!(st.update(&Tensor::zeros(&[3])).is_err());
        let nan = Tensor::new(vec![2], vec![0.0, f64::NAN]).unwrap();
        assert!(matches!(st.update(&nan), Err(LabError::NonFinite(_))));
        assert_eq!(st.step(), 0);
    }

    #[test]
    fn derivative_at_fresh_zero_is_alpha_over_eps() {
        let h = AdamHyper::default();
        let d = update_derivative(&h, 0.0, 0.0, 1, 0.0);
        assert!((d - h.alpha / h.eps).abs() / (h.alpha / h.eps) < 1e-12);
        let zero_lr = AdamHyper { alpha: 0.0, ..h };
        assert_eq!(update_derivative(&zero_lr, 0.3, 0.2, 4, 0.1), 0.0);
    }

    #[test]
    fn derivative_after_warm_steps_matches_finite_difference() {
        let h = AdamHyper::default();
        let mut rng = Rng::new(17);
        let mut st = AdamState::new(&[1], h);
        for _ in 0..5 {
            st.update(&Tensor::gaussian(&mut rng, &[1], 0.0, 1e-3).unwrap()).unwrap();
        }
        let (m, v, t) = (st.m.data()[0], st.v.data()[0], st.step() + 1);
        let g = 1e-9;
        let step = 1e-10;
        let fd = (scalar_step(&h, m, v, t, g + step).update - scalar_step(&h, m, v, t, g - step).update) / (2.0 * step);
        let an = update_derivative(&h, m, v, t, g);
        assert!((an - fd).abs() / an.abs() < 1e-4, "{an} vs {fd}");
    }

    #[test]
    fn kappa_examples() {
        let h = AdamHyper::default();
        let st = AdamState::new(&[1024], h);
        let k = st.kappa(&Tensor::zeros(&[1024])).unwrap();
        assert!((k - 3200.0).abs() / 3200.0 < 1e-12, "{k}");
        let unit = AdamHyper { alpha: 1e-6, eps: 1e-6, ..h };
        let k1 = AdamState::new(&[1], unit).kappa(&Tensor::zeros(&[1])).unwrap();
        assert!((k1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sign_pattern_is_scale_free_on_fresh_state() {
        let mut rng = Rng::new(3);
        let g = Tensor::gaussian(&mut rng, &[64], 0.0, 1e-3).unwrap();
        let base = AdamState::new(&[64], AdamHyper::default()).clone().update(&g).unwrap();
        for c in [1e-6, 0.5, 3.0, 1e4] {
            let u = AdamState::new(&[64], AdamHyper::default()).update(&g.scale(c)).unwrap();
            for (a, b) in base.data().iter().zip(u.data()) {
                assert_eq!(a.signum(), b.signum());
            }
        }
    }

    #[test]
    fn zero_sigma_trajectory_decays_but_stays_large() {
        let probe = kappa_simulation(&KappaSimConfig {
            sigmas: vec![0.0],
            ..KappaSimConfig::default()
        })
        .unwrap();
        assert!((probe.get(1, 0.0).unwrap() - 3200.0).abs() < 1e-9 * 3200.0);
        let mut prev = f64::INFINITY;
        for t in 1..=20 {
            let k = probe.get(t, 0.0).unwrap();
            let want = 3200.0 * 0.1 / (1.0 - 0.9f64.powi(t as i32));
            assert!((k - want).abs() / want < 1e-12);
            assert!(k < prev);
            prev = k;
        }
        assert!(prev > 300.0);
    }

    #[test]
    fn schedules() {
        let (b, w, total) = (5e-4, 200, 2000);
        assert!((lr_schedule(w, Schedule::InvSqrtWarmup, b, w, total) - b).abs() < 1e-18);
        assert!((lr_schedule(w / 2, Schedule::InvSqrtWarmup, b, w, total) - b / 2.0).abs() < 1e-18);
        assert!(lr_schedule(4 * w, Schedule::InvSqrtWarmup, b, w, total) < b);
        assert_eq!(lr_schedule(1, Schedule::InvSqrtNoWarmup, b, w, total), b);
        assert!((lr_schedule(4, Schedule::InvSqrtNoWarmup, b, w, total) - b / 2.0).abs() < 1e-18);
        assert_eq!(lr_schedule(total, Schedule::LinearDecay, b, w, total), 0.0);
        assert_eq!(lr_schedule(total + 10, Schedule::LinearDecay, b, w, total), 0.0);
    }
}
