//! Toy warm-up study: a synthetic copy task trained with Adam.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adam::{lr_schedule, AdamHyper, AdamState, Schedule};
use crate::blocks::{BlockKind, InitMode, LnMode};
use crate::error::{LabError, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::wiring::{alternating, Network, NetworkConfig, Variant};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CopyTaskConfig {
    pub vocab: usize,
    pub seq_len: usize,
    pub train_steps: u64,
    pub batch: usize,
    pub width: usize,
    pub depth: usize,
    pub seed: u64,
    pub base_lr: f64,
    pub warmup_steps: u64,
}

impl Default for CopyTaskConfig {
    fn default() -> Self {
        Self {
            vocab: 16,
            seq_len: 16,
            train_steps: 2000,
            batch: 32,
            width: 32,
            depth: 12,
            seed: 0,
            base_lr: 5e-4,
            warmup_steps: 200,
        }
    }
}

impl CopyTaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 || self.seq_len < 2 {
            return Err(LabError::Param("copy task needs vocab >= 2 and seq_len >= 2".into()));
        }
        if self.batch == 0 || self.width == 0 {
            return Err(LabError::Param("batch and width must be positive".into()));
        }
        if !(self.base_lr >= 0.0) {
            return Err(LabError::Param("base_lr must be >= 0".into()));
        }
        Ok(())
    }

    /// The encoder: alternating attention / ReLU feed-forward blocks, `h = 4d`.
    pub fn network_config(&self, variant: Variant) -> NetworkConfig {
        NetworkConfig {
            variant,
            depth: self.depth,
            width: self.width,
            seq_len: self.seq_len,
            hidden: 4 * self.width,
            blocks: alternating(self.depth, BlockKind::Attn, BlockKind::FfnRelu2),
            init: InitMode::Training,
            ln_mode: LnMode::EXACT,
            seed: self.seed,
        }
    }
}

/// `batch` uniformly random token sequences; the target of each is itself.
pub fn make_copy_batch(cfg: &CopyTaskConfig, rng: &mut Rng) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
    let tokens: Vec<Vec<usize>> = (0..cfg.batch)
        .map(|_| (0..cfg.seq_len).map(|_| rng.below(cfg.vocab)).collect())
        .collect();
    let targets = tokens.clone();
    (tokens, targets)
}

#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub embed: Tensor,
    pub head: Tensor,
    pub blocks: Vec<Vec<Tensor>>,
}

impl ModelGrads {
    fn add_assign(&mut self, other: &ModelGrads) -> Result<()> {
        self.embed.add_assign(&other.embed)?;
        self.head.add_assign(&other.head)?;
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            for (ta, tb) in a.iter_mut().zip(b) {
                ta.add_assign(tb)?;
            }
        }
        Ok(())
    }

    fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        [&self.embed, &self.head].into_iter().chain(self.blocks.iter().flatten())
    }

    /// Largest Frobenius norm over parameter tensors.
    pub fn max_norm(&self) -> f64 {
        self.tensors().map(Tensor::frobenius_norm).fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().all(Tensor::is_finite)
    }
}

/// Embedding `V×d`, encoder, linear head `d×V`.
#[derive(Debug, Clone)]
pub struct CopyModel {
    pub embed: Tensor,
    pub net: Network,
    pub head: Tensor,
}

impl CopyModel {
    /// Encoder weights come from `seed`; embedding `N(0, 1)` and head
    /// `N(0, 1/d²)` from a separate stream of the same seed.
    pub fn new(cfg: &CopyTaskConfig, variant: Variant) -> Result<Self> {
        cfg.validate()?;
        let net = Network::new(cfg.network_config(variant))?;
        let mut rng = Rng::with_stream(cfg.seed, 2);
        let d = cfg.width;
        let embed = Tensor::gaussian(&mut rng, &[cfg.vocab, d], 0.0, 1.0)?;
        let head = Tensor::gaussian(&mut rng, &[d, cfg.vocab], 0.0, 1.0 / d as f64)?;
        Ok(Self { embed, net, head })
    }

    fn embed_rows(&self, tokens: &[usize]) -> Result<Tensor> {
        let rows: Vec<Vec<f64>> = tokens.iter().map(|&t| self.embed.row(t).to_vec()).collect();
        Tensor::from_rows(&rows)
    }

    /// Summed token cross-entropy of one sequence and its gradients.
    fn sequence(&self, tokens: &[usize], targets: &[usize], scale: f64) -> Result<(f64, ModelGrads)> {
        let x = self.embed_rows(tokens)?;
        let trace = self.net.forward(&x)?;
        let logits = trace.output.matmul(&self.head)?;
        let mut dlogits = Tensor::zeros(logits.shape());
        let mut loss = 0.0;
        for (i, &target) in targets.iter().enumerate() {
            let row = logits.row(i);
            let peak = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - peak).exp()).sum();
            loss += z.ln() + peak - row[target];
            let drow = dlogits.row_mut(i);
            for (j, (dv, v)) in drow.iter_mut().zip(row).enumerate() {
                let p = (v - peak).exp() / z;
                *dv = scale * (p - if j == target { 1.0 } else { 0.0 });
            }
        }
        let head = trace.output.t_matmul(&dlogits)?;
        let dy = dlogits.matmul_t(&self.head)?;
        let rep = self.net.backward_total(&dy, &trace)?;
        let mut embed = Tensor::zeros(self.embed.shape());
        for (i, &t) in tokens.iter().enumerate() {
            for (e, g) in embed.row_mut(t).iter_mut().zip(rep.input.row(i)) {
                *e += g;
            }
        }
        let blocks = rep.blocks.into_iter().map(|b| b.total).collect();
        Ok((loss, ModelGrads { embed, head, blocks }))
    }

    /// Mean token cross-entropy over the batch and its exact gradients.
    pub fn loss_and_grads(&self, tokens: &[Vec<usize>], targets: &[Vec<usize>]) -> Result<(f64, ModelGrads)> {
        let count: usize = tokens.iter().map(Vec::len).sum();
        let scale = 1.0 / count as f64;
        let parts = tokens
            .par_iter()
            .zip(targets)
            .map(|(t, y)| self.sequence(t, y, scale))
            .collect::<Result<Vec<_>>>()?;
        let mut iter = parts.into_iter();
        let (mut loss, mut grads) = iter.next().ok_or_else(|| LabError::Param("empty batch".into()))?;
        for (l, g) in iter {
            loss += l;
            grads.add_assign(&g)?;
        }
        Ok((loss * scale, grads))
    }

    pub fn loss(&self, tokens: &[Vec<usize>], targets: &[Vec<usize>]) -> Result<f64> {
        Ok(self.loss_and_grads(tokens, targets)?.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrainRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub diverged: bool,
}

/// Consecutive steps above `10×` the initial loss that count as divergence.
pub const BLOWUP_PATIENCE: u32 = 100;

struct Optimizer {
    embed: AdamState,
    head: AdamState,
    blocks: Vec<Vec<AdamState>>,
}

impl Optimizer {
    fn new(model: &CopyModel, hyper: AdamHyper) -> Self {
        Self {
            embed: AdamState::new(model.embed.shape(), hyper),
            head: AdamState::new(model.head.shape(), hyper),
            blocks: model
                .net
                .blocks()
                .iter()
                .map(|b| b.weights().iter().map(|w| AdamState::new(w.shape(), hyper)).collect())
                .collect(),
        }
    }

    fn apply(&mut self, model: &mut CopyModel, grads: &ModelGrads, lr: f64) -> Result<()> {
        let step = |st: &mut AdamState, w: &mut Tensor, g: &Tensor| -> Result<()> {
            st.hyper.alpha = lr;
            let u = st.update(g)?;
            for (wi, ui) in w.data_mut().iter_mut().zip(u.data()) {
                *wi -= ui;
            }
            Ok(())
        };
        step(&mut self.embed, &mut model.embed, &grads.embed)?;
        step(&mut self.head, &mut model.head, &grads.head)?;
        let (blocks, _) = model.net.params_mut();
        for ((states, block), bg) in self.blocks.iter_mut().zip(blocks).zip(&grads.blocks) {
            for ((st, w), g) in states.iter_mut().zip(block.weights_mut()).zip(bg) {
                step(st, w, g)?;
            }
        }
        Ok(())
    }
}

/// Trains a fresh model and returns one record per step (steps are
/// 0-based; the learning rate at step `s` is the schedule at `s + 1`).
/// A non-finite loss or gradient ends the run with the flag set.
pub fn train(cfg: &CopyTaskConfig, variant: Variant, schedule: Schedule) -> Result<Vec<TrainRecord>> {
    let mut model = CopyModel::new(cfg, variant)?;
    train_model(cfg, &mut model, schedule)
}

pub fn train_model(cfg: &CopyTaskConfig, model: &mut CopyModel, schedule: Schedule) -> Result<Vec<TrainRecord>> {
    cfg.validate()?;
    let hyper = AdamHyper {
        alpha: cfg.base_lr,
        ..AdamHyper::default()
    };
    let mut opt = Optimizer::new(model, hyper);
    let mut rng = Rng::with_stream(cfg.seed, 3);
    let mut records = Vec::with_capacity(cfg.train_steps as usize);
    let mut initial = None;
    let (mut streak, mut diverged) = (0u32, false);

    for step in 0..cfg.train_steps {
        let lr = lr_schedule(step + 1, schedule, cfg.base_lr, cfg.warmup_steps, cfg.train_steps);
        let (tokens, targets) = make_copy_batch(cfg, &mut rng);
        let (loss, grads) = match model.loss_and_grads(&tokens, &targets) {
            Ok(r) => r,
            Err(LabError::DegenerateRow { .. } | LabError::Layer { .. } | LabError::NonFinite(_)) => {
                (f64::NAN, ModelGrads { embed: Tensor::zeros(&[1]), head: Tensor::zeros(&[1]), blocks: Vec::new() })
            }
            Err(e) => return Err(e),
        };
        let finite = loss.is_finite() && grads.is_finite();
        let init = *initial.get_or_insert(loss);
        if loss > 10.0 * init {
            streak += 1;
        } else {
            streak = 0;
        }
        diverged |= !finite || streak >= BLOWUP_PATIENCE;
        records.push(TrainRecord {
            step,
            loss,
            lr,
            grad_norm: if finite { grads.max_norm() } else { f64::NAN },
            diverged,
        });
        if !finite {
            break;
        }
        opt.apply(model, &grads, lr)?;
    }
    Ok(records)
}

/// Mean loss over the last `window` records.
pub fn final_loss(records: &[TrainRecord], window: usize) -> f64 {
    let tail = &records[records.len().saturating_sub(window)..];
    tail.iter().map(|r| r.loss).sum::<f64>() / tail.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CopyTaskConfig {
        CopyTaskConfig {
            vocab: 5,
            seq_len: 4,
            train_steps: 3,
            batch: 3,
            width: 6,
            depth: 2,
            seed: 4,
            ..CopyTaskConfig::default()
        }
    }

    #[test]
    fn tiny_batch_copies_input() {
        let cfg = CopyTaskConfig { vocab: 2, seq_len: 2, batch: 1, ..CopyTaskConfig::default() };
        let (x, y) = make_copy_batch(&cfg, &mut Rng::new(0));
        assert_eq!(x, y);
        assert_eq!(x[0].len(), 2);
        assert!(x[0].iter().all(|&t| t < 2));
    }

    #[test]
    fn batches_are_seeded() {
        let cfg = small();
        let a = make_copy_batch(&cfg, &mut Rng::new(9));
        let b = make_copy_batch(&cfg, &mut Rng::new(9));
        assert_eq!(a, b);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let cfg = small();
        let model = CopyModel::new(&cfg, Variant::Residual).unwrap();
        let (x, y) = make_copy_batch(&cfg, &mut Rng::new(1));
        let (_, g) = model.loss_and_grads(&x, &y).unwrap();
        let h = 1e-5;
        let fd = |f: &dyn Fn(&mut CopyModel, f64)| {
            let mut p = model.clone();
            f(&mut p, h);
            let up = p.loss(&x, &y).unwrap();
            let mut m = model.clone();
            f(&mut m, -h);
            (up - m.loss(&x, &y).unwrap()) / (2.0 * h)
        };
        let num = fd(&|m, h| m.head.data_mut()[7] += h);
        assert!((num - g.head.data()[7]).abs() < 1e-7);
        let t = x[0][1];
        let num = fd(&|m, h| m.embed.data_mut()[t * 6 + 2] += h);
        assert!((num - g.embed.data()[t * 6 + 2]).abs() < 1e-7);
        let num = fd(&|m, h| m.net.params_mut().0[1].weights_mut()[0].data_mut()[3] += h);
        assert!((num - g.blocks[1][0].data()[3]).abs() < 1e-7);
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = CopyTaskConfig { vocab: 1, ..small() };
        assert!(CopyModel::new(&cfg, Variant::PreLn).is_err());
    }
}
