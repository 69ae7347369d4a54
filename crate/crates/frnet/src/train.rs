//! The training loop: Adam over mini-batches, plateau learning-rate
//! reduction, early stopping, best-checkpoint tracking.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{Precision, SchedMetric, TrainConfig};
use crate::data::{Dataset, Prepared};
use crate::error::{Error, Result};
use crate::metrics;
use crate::model::{self, ModelDims, ModelParams};
use crate::refine::Phase;
use crate::tape::Tape;
use crate::tensor::Real;

/// Strict-improvement margin for the scheduler and early stopping.
pub const MIN_DELTA: f64 = 1e-5;

// ── Adam ────────────────────────────────────────────────────────────────

/// Adam with bias correction; moment buffers align with the parameter
/// visit order. Gradients are consumed and zeroed by each step.
pub struct Adam<F: Real> {
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl<F: Real> Adam<F> {
    pub fn new(params: &ModelParams<F>) -> Self {
        let sizes: Vec<usize> = params.visit().iter().map(|(_, t)| t.numel()).collect();
        Adam {
            m: sizes.iter().map(|&n| vec![F::ZERO; n]).collect(),
            v: sizes.iter().map(|&n| vec![F::ZERO; n]).collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over every parameter tensor carrying a gradient.
    pub fn step(&mut self, params: &mut ModelParams<F>, lr: f64) {
        self.step += 1;
        let b1 = F::from_f64(self.beta1);
        let b2 = F::from_f64(self.beta2);
        let one_m_b1 = F::from_f64(1.0 - self.beta1);
        let one_m_b2 = F::from_f64(1.0 - self.beta2);
        let corr1 = F::from_f64(1.0 / (1.0 - self.beta1.powi(self.step as i32)));
        let corr2 = F::from_f64(1.0 / (1.0 - self.beta2.powi(self.step as i32)));
        let lr = F::from_f64(lr);
        let eps = F::from_f64(self.eps);

        for (ti, (_, tensor)) in params.visit_mut().into_iter().enumerate() {
            let Some(grad) = tensor.grad().map(|g| g.to_vec()) else {
                continue;
            };
            let m = &mut self.m[ti];
            let v = &mut self.v[ti];
            let data = tensor.data_mut();
            for j in 0..data.len() {
                let g = grad[j];
                m[j] = b1 * m[j] + one_m_b1 * g;
                v[j] = b2 * v[j] + one_m_b2 * g * g;
                let m_hat = m[j] * corr1;
                let v_hat = v[j] * corr2;
                data[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            tensor.zero_grad();
        }
    }
}

// ── plateau tracking ────────────────────────────────────────────────────

/// What one observed epoch implies for the run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PlateauAction {
    pub improved: bool,
    pub reduce_lr: bool,
    pub stop: bool,
}

/// Tracks the best validation metric; fires a learning-rate reduction
/// after `sched_patience` consecutive non-improving epochs and a stop
/// after `stop_patience`. Improvement means beating the best by more
/// than [`MIN_DELTA`]; it resets both counters.
pub struct Plateau {
    best: Option<f64>,
    higher_is_better: bool,
    sched_patience: u32,
    sched_counter: u32,
    stop_patience: u32,
    stop_counter: u32,
}

impl Plateau {
    pub fn new(higher_is_better: bool, sched_patience: u32, stop_patience: u32) -> Self {
        Plateau {
            best: None,
            higher_is_better,
            sched_patience,
            sched_counter: 0,
            stop_patience,
            stop_counter: 0,
        }
    }

    pub fn observe(&mut self, value: f64) -> PlateauAction {
        let improved = match self.best {
            None => true,
            Some(best) => {
                if self.higher_is_better {
                    value > best + MIN_DELTA
                } else {
                    value < best - MIN_DELTA
                }
            }
        };
        if improved {
            self.best = Some(value);
            self.sched_counter = 0;
            self.stop_counter = 0;
            return PlateauAction {
                improved: true,
                reduce_lr: false,
                stop: false,
            };
        }
        self.sched_counter += 1;
        self.stop_counter += 1;
        let reduce_lr = self.sched_counter >= self.sched_patience;
        if reduce_lr {
            self.sched_counter = 0;
        }
        PlateauAction {
            improved: false,
            reduce_lr,
            stop: self.stop_counter >= self.stop_patience,
        }
    }
}

// ── the epoch loop ──────────────────────────────────────────────────────

/// One appended metrics row per epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_auc: f64,
    pub val_logloss: f64,
    pub seconds: f64,
}

pub const METRICS_HEADER: &str = "epoch,lr,train_loss,val_auc,val_logloss,seconds";

impl EpochRecord {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{:.8},{:.8},{:.8},{:.3}",
            self.epoch, self.lr, self.train_loss, self.val_auc, self.val_logloss, self.seconds
        )
    }
}

/// The trained model plus everything the run reported.
pub struct TrainOutcome {
    /// Best-validation-AUC parameters (initial parameters when no epoch ran).
    pub params: ModelParams<f32>,
    /// Parameters after the last completed epoch.
    pub final_params: ModelParams<f32>,
    pub best_epoch: Option<usize>,
    pub best_val_auc: Option<f64>,
    pub best_val_logloss: Option<f64>,
    pub test_auc: Option<f64>,
    pub test_logloss: Option<f64>,
    pub log: Vec<EpochRecord>,
}

fn eval_metrics(params: &ModelParams<f32>, data: &Dataset, batch: usize) -> Result<(f64, f64)> {
    let probs = model::predict(params, &data.instances, batch)?;
    let probs64: Vec<f64> = probs.iter().map(|&p| p as f64).collect();
    let labels = data.labels();
    let auc = metrics::auc(&probs64, &labels)?;
    let ll = metrics::logloss(&probs64, &labels);
    Ok((auc, ll))
}

/// Trains on `data.train`, tracking validation metrics per epoch and
/// reporting test metrics of the best checkpoint. Fully deterministic for
/// a fixed seed.
pub fn train(data: &Prepared, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_streaming(data, cfg, &mut |_| Ok(()))
}

/// [`train`] with a per-epoch sink, so callers can append metrics rows as
/// they are produced.
pub fn train_streaming(
    data: &Prepared,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.precision == Precision::Double {
        return Err(Error::Config(
            "double precision is reserved for the gradient-check suite; train with single".into(),
        ));
    }
    if data.train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let dims = ModelDims {
        n_features: data.train.n_features(),
        n_fields: data.train.field_count(),
        embed_dim: cfg.embed_dim,
        attn_dim: cfg.attn_dim(),
        cie_hidden: cfg.cie_hidden.clone(),
    };
    let mut params = ModelParams::<f32>::init(dims, cfg.variant, cfg.seed);
    params.validate()?;
    let mut adam = Adam::new(&params);
    let mut plateau = Plateau::new(
        cfg.scheduler_metric == SchedMetric::ValAuc,
        cfg.scheduler_patience,
        cfg.early_stop_patience,
    );
    let mut lr = cfg.lr;
    // Independent streams so shuffles match across variants that consume
    // different amounts of dropout randomness.
    let mut rng_shuffle = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut rng_dropout = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x517c_c1b7_2722_0a95);

    let mut best: Option<(ModelParams<f32>, usize, f64, f64)> = None;
    let mut log = Vec::new();
    let dropout_rate = if cfg.cie_dropout { cfg.dropout } else { 0.0 };

    let mut order: Vec<usize> = (0..data.train.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        let t0 = Instant::now();
        order.shuffle(&mut rng_shuffle);
        let mut loss_sum = 0.0f64;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<_> = chunk
                .iter()
                .map(|&i| data.train.instances[i].clone())
                .collect();
            let mut tape = Tape::<f32>::new();
            let bound = model::bind(&mut tape, &params);
            let mut phase = Phase::Train {
                dropout: dropout_rate,
                rng: &mut rng_dropout,
            };
            let (loss, _) = model::batch_loss(&mut tape, &bound, &params, &batch, &mut phase)?;
            let loss_val = tape.value(loss).data()[0] as f64;
            if !loss_val.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at epoch {epoch}"
                )));
            }
            loss_sum += loss_val * batch.len() as f64;
            tape.backward(loss)?;
            model::accumulate_grads(&mut params, &tape, &bound);
            adam.step(&mut params, lr);
        }
        let train_loss = loss_sum / data.train.len() as f64;

        let (val_auc, val_logloss) = eval_metrics(&params, &data.val, cfg.batch_size)?;
        let epoch_lr = lr;
        let metric = match cfg.scheduler_metric {
            SchedMetric::ValAuc => val_auc,
            SchedMetric::ValLogloss => val_logloss,
        };
        let action = plateau.observe(metric);
        if action.reduce_lr {
            lr *= cfg.scheduler_factor;
        }

        // Checkpoint on any strict best-AUC improvement.
        let is_best = best
            .as_ref()
            .map(|(_, _, auc, _)| val_auc > *auc)
            .unwrap_or(true);
        if is_best {
            best = Some((params.clone(), epoch, val_auc, val_logloss));
        }

        let seconds = if cfg.deterministic {
            0.0
        } else {
            t0.elapsed().as_secs_f64()
        };
        let record = EpochRecord {
            epoch,
            lr: epoch_lr,
            train_loss,
            val_auc,
            val_logloss,
            seconds,
        };
        on_epoch(&record)?;
        log.push(record);
        if action.stop {
            break;
        }
    }

    let (best_params, best_epoch, best_auc, best_ll) = match best {
        Some((p, e, a, l)) => (p, Some(e), Some(a), Some(l)),
        None => (params.clone(), None, None, None),
    };
    let (test_auc, test_logloss) = if data.test.is_empty() {
        (None, None)
    } else {
        let (a, l) = eval_metrics(&best_params, &data.test, cfg.batch_size)?;
        (Some(a), Some(l))
    };
    Ok(TrainOutcome {
        params: best_params,
        final_params: params,
        best_epoch,
        best_val_auc: best_auc,
        best_val_logloss: best_ll,
        test_auc,
        test_logloss,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{prepare_split, RawData, RawRecord};
    use crate::refine::Variant;

    /// Separable toy data: the planted score of two categorical features
    /// is an odd integer, so its sign is never ambiguous.
    fn separable(n: usize, seed: u64) -> Prepared {
        let wa = [-5.0, -3.0, -1.0, 1.0, 3.0, 5.0];
        let wb = [-4.0, -2.0, 0.0, 2.0, 4.0];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        use rand::Rng;
        let records = (0..n)
            .map(|_| {
                let a = rng.gen_range(0..wa.len());
                let b = rng.gen_range(0..wb.len());
                RawRecord {
                    label: (wa[a] + wb[b] > 0.0) as u8,
                    tokens: vec![format!("a{a}"), format!("b{b}")],
                }
            })
            .collect();
        let raw = RawData {
            fields: vec!["fa".into(), "fb".into()],
            records,
        };
        prepare_split(raw, (7, 2, 1), seed, 1).unwrap()
    }

    fn toy_config() -> TrainConfig {
        TrainConfig {
            lr: 0.01,
            batch_size: 16,
            embed_dim: 4,
            cie_hidden: vec![8],
            variant: Variant::FM,
            max_epochs: 20,
            early_stop_patience: 20,
            min_feature_count: 1,
            deterministic: true,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn adam_first_step_is_minus_lr() {
        let dims = ModelDims {
            n_features: 3,
            n_fields: 1,
            embed_dim: 2,
            attn_dim: 2,
            cie_hidden: vec![],
        };
        let mut params = ModelParams::<f32>::init(dims, Variant::FM, 0);
        let before = params.embed.data().to_vec();
        let ones = vec![1.0f32; params.embed.numel()];
        params.embed.accumulate_grad(&ones);
        let mut adam = Adam::new(&params);
        adam.step(&mut params, 1e-3);
        for (a, b) in params.embed.data().iter().zip(&before) {
            assert!((a - (b - 1e-3)).abs() < 1e-6, "{a} vs {b}");
        }
        // Gradients are consumed by the step.
        assert!(params.embed.grad().is_none());

        // Zero gradient with zero optimizer state moves nothing.
        let mut fresh = Adam::new(&params);
        let zeros = vec![0.0f32; params.embed.numel()];
        params.embed.accumulate_grad(&zeros);
        let snapshot = params.embed.data().to_vec();
        fresh.step(&mut params, 1e-3);
        assert_eq!(params.embed.data(), snapshot.as_slice());
    }

    #[test]
    fn adam_moves_equal_gradients_equally() {
        let dims = ModelDims {
            n_features: 4,
            n_fields: 2,
            embed_dim: 2,
            attn_dim: 2,
            cie_hidden: vec![],
        };
        let mut params = ModelParams::<f32>::init(dims, Variant::FM, 0);
        params.linear_w.accumulate_grad(&[0.3, 0.3, 0.3, 0.3]);
        let mut adam = Adam::new(&params);
        adam.step(&mut params, 1e-2);
        let w = params.linear_w.data();
        for j in 1..w.len() {
            assert_eq!(w[0], w[j]);
        }
    }

    #[test]
    fn plateau_follows_the_counting_rule() {
        // Rising metric: never reduce.
        let mut p = Plateau::new(true, 4, 5);
        for v in [0.97, 0.975, 0.98, 0.985, 0.99] {
            let a = p.observe(v);
            assert!(a.improved && !a.reduce_lr && !a.stop);
        }

        // Reduction fires on the 4th consecutive non-improving epoch.
        let mut p = Plateau::new(true, 4, 9);
        assert!(p.observe(0.98).improved);
        assert!(!p.observe(0.979).reduce_lr);
        assert!(!p.observe(0.978).reduce_lr);
        assert!(!p.observe(0.9785).reduce_lr);
        let fourth = p.observe(0.979);
        assert!(fourth.reduce_lr && !fourth.stop);

        // Improvement resets both counters.
        let mut p = Plateau::new(true, 2, 3);
        p.observe(0.5);
        p.observe(0.4);
        assert!(p.observe(0.9).improved);
        assert!(!p.observe(0.8).reduce_lr);
        let second = p.observe(0.8);
        assert!(second.reduce_lr && !second.stop);
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let data = separable(60, 3);
        let cfg = TrainConfig {
            max_epochs: 0,
            ..toy_config()
        };
        let out = train(&data, &cfg).unwrap();
        assert!(out.log.is_empty());
        assert!(out.best_epoch.is_none());
        let fresh = ModelParams::<f32>::init(
            ModelDims {
                n_features: data.train.n_features(),
                n_fields: 2,
                embed_dim: cfg.embed_dim,
                attn_dim: cfg.attn_dim(),
                cie_hidden: cfg.cie_hidden.clone(),
            },
            cfg.variant,
            cfg.seed,
        );
        assert_eq!(out.params.embed.data(), fresh.embed.data());
    }

    #[test]
    fn same_seed_reproduces_the_log_exactly() {
        let data = separable(200, 7);
        let mut cfg = toy_config();
        cfg.max_epochs = 4;
        cfg.variant = Variant::GATED_BIT; // exercise the dropout stream too
        let a = train(&data, &cfg).unwrap();
        let b = train(&data, &cfg).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.params.embed.data(), b.params.embed.data());
    }

    #[test]
    fn separable_data_is_fit_quickly() {
        let data = separable(200, 11);
        let out = train(&data, &toy_config()).unwrap();
        let probs = model::predict(&out.final_params, &data.train.instances, 64).unwrap();
        let probs64: Vec<f64> = probs.iter().map(|&p| p as f64).collect();
        let auc = metrics::auc(&probs64, &data.train.labels()).unwrap();
        assert!(auc > 0.99, "train AUC {auc}");
    }

    #[test]
    fn loss_decreases_over_first_five_steps() {
        let data = separable(200, 13);
        let cfg = toy_config();
        let dims = ModelDims {
            n_features: data.train.n_features(),
            n_fields: 2,
            embed_dim: cfg.embed_dim,
            attn_dim: cfg.attn_dim(),
            cie_hidden: cfg.cie_hidden.clone(),
        };
        let mut params = ModelParams::<f32>::init(dims, Variant::FM, 1);
        let mut adam = Adam::new(&params);
        let batch = data.train.instances.clone();
        let mut losses = Vec::new();
        for _ in 0..6 {
            let mut tape = Tape::<f32>::new();
            let bound = model::bind(&mut tape, &params);
            let (loss, _) =
                model::batch_loss(&mut tape, &bound, &params, &batch, &mut Phase::Eval).unwrap();
            losses.push(tape.value(loss).data()[0]);
            tape.backward(loss).unwrap();
            model::accumulate_grads(&mut params, &tape, &bound);
            adam.step(&mut params, 1e-3);
        }
        for w in losses.windows(2) {
            assert!(w[1] < w[0], "losses {losses:?}");
        }
    }

    #[test]
    fn checkpoint_is_the_max_logged_val_auc() {
        let data = separable(200, 17);
        let mut cfg = toy_config();
        cfg.max_epochs = 6;
        let out = train(&data, &cfg).unwrap();
        let max = out
            .log
            .iter()
            .map(|r| r.val_auc)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(out.best_val_auc.unwrap(), max);
    }

    #[test]
    fn eval_mode_is_deterministic_and_training_mode_jitters() {
        let data = separable(80, 19);
        let cfg = TrainConfig {
            variant: Variant::GATED_BIT,
            ..toy_config()
        };
        let dims = ModelDims {
            n_features: data.train.n_features(),
            n_fields: 2,
            embed_dim: cfg.embed_dim,
            attn_dim: cfg.attn_dim(),
            cie_hidden: cfg.cie_hidden.clone(),
        };
        let params = ModelParams::<f32>::init(dims, cfg.variant, 23);
        let batch = &data.train.instances[..16];

        let p1 = model::predict(&params, batch, 16).unwrap();
        let p2 = model::predict(&params, batch, 16).unwrap();
        assert_eq!(p1, p2);

        let train_probs = |seed: u64| -> Vec<f32> {
            let mut tape = Tape::<f32>::new();
            let bound = model::bind(&mut tape, &params);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut phase = Phase::Train {
                dropout: 0.5,
                rng: &mut rng,
            };
            let (_, probs) =
                model::batch_loss(&mut tape, &bound, &params, batch, &mut phase).unwrap();
            tape.value(probs).data().to_vec()
        };
        assert_eq!(train_probs(5), train_probs(5));
        assert_ne!(train_probs(5), train_probs(6));
        assert_ne!(train_probs(5), p1);
    }
}
