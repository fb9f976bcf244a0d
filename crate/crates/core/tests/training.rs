use residual_lab::adam::Schedule;
use residual_lab::train::{make_copy_batch, train, train_model, CopyModel, CopyTaskConfig};
use residual_lab::wiring::Variant;
use residual_lab::Rng;

fn small() -> CopyTaskConfig {
    CopyTaskConfig {
        train_steps: 5,
        batch: 4,
        depth: 4,
        width: 16,
        seq_len: 8,
        seed: 11,
        ..CopyTaskConfig::default()
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_untouched() {
    let cfg = CopyTaskConfig { base_lr: 0.0, train_steps: 1, ..small() };
    for v in Variant::ALL {
        let before = CopyModel::new(&cfg, v).unwrap();
        let mut after = before.clone();
        train_model(&cfg, &mut after, Schedule::InvSqrtNoWarmup).unwrap();
        let bits = |m: &CopyModel| -> Vec<u64> {
            let mut out: Vec<u64> = m.embed.data().iter().chain(m.head.data()).map(|x| x.to_bits()).collect();
            for b in m.net.blocks() {
                for w in b.weights() {
                    out.extend(w.data().iter().map(|x| x.to_bits()));
                }
            }
            out
        };
        assert_eq!(bits(&before), bits(&after), "{v}");
    }
}

#[test]
fn initial_loss_is_near_uniform() {
    let cfg = CopyTaskConfig::default();
    let uniform = (cfg.vocab as f64).ln();
    for v in Variant::ALL {
        let model = CopyModel::new(&cfg, v).unwrap();
        let (x, y) = make_copy_batch(&cfg, &mut Rng::new(0));
        let loss = model.loss(&x, &y).unwrap();
        assert!((loss - uniform).abs() / uniform < 0.05, "{v}: {loss}");
    }
}

#[test]
fn gradients_match_finite_differences_mid_training() {
    let cfg = small();
    let mut model = CopyModel::new(&cfg, Variant::PostLn).unwrap();
    train_model(&cfg, &mut model, Schedule::InvSqrtWarmup).unwrap();
    let (x, y) = make_copy_batch(&cfg, &mut Rng::new(99));
    let (_, grads) = model.loss_and_grads(&x, &y).unwrap();
    let mut rng = Rng::new(3);
    let h = 1e-6;
    for _ in 0..10 {
        let k = rng.below(cfg.depth);
        let wi = rng.below(model.net.blocks()[k].weights().len());
        let idx = rng.below(model.net.blocks()[k].weights()[wi].len());
        let eval = |delta: f64| {
            let mut m = model.clone();
            m.net.params_mut().0[k].weights_mut()[wi].data_mut()[idx] += delta;
            m.loss(&x, &y).unwrap()
        };
        let numeric = (eval(h) - eval(-h)) / (2.0 * h);
        let analytic = grads.blocks[k][wi].data()[idx];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        assert!(rel < 1e-4, "block {k} w{wi}[{idx}]: {analytic} vs {numeric}");
    }
}

#[test]
fn divergence_flag_is_sticky() {
    let cfg = CopyTaskConfig {
        base_lr: 5.0,
        train_steps: 150,
        ..small()
    };
    let records = train(&cfg, Variant::PostLn, Schedule::InvSqrtNoWarmup).unwrap();
    if let Some(first) = records.iter().position(|r| r.diverged) {
        assert!(records[first..].iter().all(|r| r.diverged));
    }
    assert!(records.windows(2).all(|w| w[1].step == w[0].step + 1));
}

#[test]
fn runs_are_deterministic() {
    let cfg = small();
    let a = train(&cfg, Variant::Residual, Schedule::LinearDecay).unwrap();
    let b = train(&cfg, Variant::Residual, Schedule::LinearDecay).unwrap();
    assert_eq!(a, b);
}
