use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::batch::{batch_loss, LossConfig};
use super::optim::{momentum_update, OptimizerKind, OptimizerState};
use super::QueueMatrix;
use crate::binio::write_atomic;
use crate::encoder::{ArchConfig, ParamSet};
use crate::error::{Error, Result};
use crate::raster::Raster;
use crate::real::Real;

/// Hyperparameters of the contrastive training loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub eta: f64,
    pub batch_size: usize,
    pub queue_size: usize,
    pub momentum: f64,
    pub tau: f64,
    pub lambda_reg: f64,
    pub max_epochs: usize,
    pub lr_decay_factor: f64,
    /// First epoch (0-based) trained at the decayed rate. `None` places it
    /// at 80% of `max_epochs`.
    pub lr_decay_epoch: Option<usize>,
    /// Augmentation radius in pixels; `None` means one eighth of the shorter side.
    pub rho: Option<f64>,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Stop once the mean loss improved by less than 1e-4 (relative) over 10 epochs.
    pub early_stop: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            eta: 5e-3,
            batch_size: 32,
            queue_size: 1024,
            momentum: 0.999,
            tau: 0.5,
            lambda_reg: 0.1,
            max_epochs: 100,
            lr_decay_factor: 0.1,
            lr_decay_epoch: None,
            rho: None,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            early_stop: false,
        }
    }
}

impl TrainConfig {
    /// Reduced setting for CPU runs: K = 256, 30 epochs.
    pub fn desk_scale() -> Self {
        Self {
            queue_size: 256,
            max_epochs: 30,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.eta));
        }
        if self.batch_size == 0 || self.queue_size == 0 {
            return bad("batch and queue sizes must be positive".into());
        }
        if !self.queue_size.is_multiple_of(self.batch_size) {
            return bad(format!(
                "queue size {} must be a multiple of the batch size {}",
                self.queue_size, self.batch_size
            ));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1]", self.momentum));
        }
        if !(self.tau > 0.0) {
            return bad(format!("temperature must be positive, got {}", self.tau));
        }
        if !(self.lambda_reg >= 0.0) {
            return bad(format!("regularizer weight must be non-negative, got {}", self.lambda_reg));
        }
        if !(self.lr_decay_factor > 0.0) {
            return bad("learning-rate decay factor must be positive".into());
        }
        if let Some(r) = self.rho {
            if !(r >= 0.0) {
                return bad(format!("rho must be non-negative, got {r}"));
            }
        }
        Ok(())
    }

    pub fn decay_epoch(&self) -> usize {
        self.lr_decay_epoch
            .unwrap_or_else(|| (0.8 * self.max_epochs as f64).round() as usize)
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        if epoch >= self.decay_epoch() {
            self.eta * self.lr_decay_factor
        } else {
            self.eta
        }
    }

    pub fn rho_for(&self, arch: &ArchConfig) -> f64 {
        self.rho
            .unwrap_or(arch.input_width.min(arch.input_height) as f64 / 8.0)
    }

    pub fn loss_config(&self, arch: &ArchConfig) -> LossConfig {
        LossConfig {
            tau: self.tau,
            lambda_reg: self.lambda_reg,
            rho: self.rho_for(arch),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    /// 1-based epoch number.
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
}

/// Everything the training loop carries between iterations.
#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub params_q: ParamSet<T>,
    pub params_k: ParamSet<T>,
    pub queue: QueueMatrix<T>,
    pub optimizer: OptimizerState<T>,
    pub epochs_completed: usize,
    pub history: Vec<EpochStats>,
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

impl<T: Real> TrainState<T> {
    /// `θ_q = θ_k` (He init) and a queue of random unit keys.
    pub fn init(arch: &ArchConfig, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let params_q = ParamSet::init_he(arch, &mut rng)?;
        let params_k = params_q.clone();
        let queue = QueueMatrix::random(cfg.queue_size, arch.dim, &mut rng)?;
        let optimizer = OptimizerState::new(cfg.optimizer, &params_q);
        Ok(Self {
            params_q,
            params_k,
            queue,
            optimizer,
            epochs_completed: 0,
            history: Vec::new(),
        })
    }

    /// Runs epochs until `cfg.max_epochs` have completed in total.
    pub fn run(
        &mut self,
        dataset: &[Raster],
        cfg: &TrainConfig,
        mut on_epoch: impl FnMut(&EpochStats),
    ) -> Result<()> {
        cfg.validate()?;
        if dataset.len() < cfg.batch_size {
            return Err(Error::DatasetTooSmall {
                size: dataset.len(),
                batch: cfg.batch_size,
            });
        }
        if self.queue.capacity() != cfg.queue_size {
            return Err(Error::InvalidConfig(format!(
                "state queue holds {} keys but config asks for {}",
                self.queue.capacity(),
                cfg.queue_size
            )));
        }
        let loss_cfg = cfg.loss_config(self.params_q.arch());
        let iters = dataset.len() / cfg.batch_size;

        while self.epochs_completed < cfg.max_epochs {
            let epoch = self.epochs_completed;
            let lr = cfg.learning_rate(epoch);
            let mut rng = epoch_rng(cfg.seed, epoch);
            let mut order: Vec<usize> = (0..dataset.len()).collect();
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for it in 0..iters {
                let batch: Vec<&Raster> = order[it * cfg.batch_size..(it + 1) * cfg.batch_size]
                    .iter()
                    .map(|&i| &dataset[i])
                    .collect();
                let out = batch_loss(&self.params_q, &self.params_k, &batch, &self.queue, &loss_cfg, &mut rng)?;
                let loss = out.loss.f64();
                if !loss.is_finite() {
                    return Err(Error::NonFinite(format!("loss at epoch {}", epoch + 1)));
                }
                total += loss;
                let grads = out.grads.expect("batch_loss returns gradients");
                self.optimizer.step(&mut self.params_q, &grads, lr)?;
                momentum_update(&mut self.params_k, &self.params_q, cfg.momentum)?;
                self.queue.enqueue_dequeue(&out.keys)?;
            }
            if !self.params_q.is_finite() {
                return Err(Error::NonFinite(format!("parameters after epoch {}", epoch + 1)));
            }
            let stats = EpochStats {
                epoch: epoch + 1,
                mean_loss: total / iters as f64,
                lr,
            };
            log::info!("epoch {:>4}  loss {:.6}  lr {:.2e}", stats.epoch, stats.mean_loss, lr);
            on_epoch(&stats);
            self.history.push(stats);
            self.epochs_completed += 1;

            if cfg.early_stop && self.plateaued() {
                log::info!("early stop after epoch {}", epoch + 1);
                break;
            }
        }
        Ok(())
    }

    fn plateaued(&self) -> bool {
        let h = &self.history;
        if h.len() <= 10 {
            return false;
        }
        let before = h[h.len() - 11].mean_loss;
        let now = h[h.len() - 1].mean_loss;
        (before - now) / before.abs().max(f64::MIN_POSITIVE) < 1e-4
    }
}

/// Trains a primary encoder from scratch on `dataset`.
pub fn train<T: Real>(dataset: &[Raster], arch: &ArchConfig, cfg: &TrainConfig) -> Result<TrainState<T>> {
    let mut state = TrainState::init(arch, cfg)?;
    state.run(dataset, cfg, |_| {})?;
    Ok(state)
}

/// `epoch,mean_loss,lr` lines.
pub fn history_csv(history: &[EpochStats]) -> String {
    let mut out = String::from("epoch,mean_loss,lr\n");
    for s in history {
        out.push_str(&format!("{},{:.9},{:e}\n", s.epoch, s.mean_loss, s.lr));
    }
    out
}

pub fn write_history_csv(history: &[EpochStats], path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), history_csv(history).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reported_settings() {
        let c = TrainConfig::default();
        assert_eq!((c.eta, c.batch_size, c.queue_size), (5e-3, 32, 1024));
        assert_eq!((c.momentum, c.tau, c.lambda_reg), (0.999, 0.5, 0.1));
        assert_eq!(c.max_epochs, 100);
        assert_eq!(c.decay_epoch(), 80);
        assert_eq!(c.learning_rate(79), 5e-3);
        assert!((c.learning_rate(80) - 5e-4).abs() < 1e-18);
        assert_eq!(TrainConfig::desk_scale().decay_epoch(), 24);
    }

    #[test]
    fn validation() {
        let ok = TrainConfig::default();
        assert!(ok.validate().is_ok());
        for bad in [
            TrainConfig { queue_size: 100, ..ok.clone() },
            TrainConfig { momentum: 1.01, ..ok.clone() },
            TrainConfig { tau: 0.0, ..ok.clone() },
            TrainConfig { batch_size: 0, ..ok.clone() },
            TrainConfig { eta: -1.0, ..ok.clone() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::InvalidConfig(_))));
        }
    }

    #[test]
    fn csv_layout() {
        let csv = history_csv(&[EpochStats { epoch: 1, mean_loss: 2.5, lr: 5e-3 }]);
        assert_eq!(csv, "epoch,mean_loss,lr\n1,2.500000000,5e-3\n");
    }

    #[test]
    fn resumed_run_matches_uninterrupted_run() {
        use crate::contrastive::{decode_state, encode_state};
        use crate::datagen::generate_scene;
        let arch = ArchConfig::tiny();
        let scene = generate_scene(2, 64, 64).unwrap();
        let data: Vec<Raster> = (0..12)
            .map(|i| scene.raster.crop((i % 4) * 12, (i / 4) * 12, 16, 16).unwrap())
            .collect();
        let cfg = TrainConfig {
            batch_size: 4,
            queue_size: 8,
            max_epochs: 3,
            seed: 11,
            ..TrainConfig::default()
        };
        let mut straight = TrainState::<f32>::init(&arch, &cfg).unwrap();
        straight.run(&data, &cfg, |_| {}).unwrap();

        let mut part = TrainState::<f32>::init(&arch, &cfg).unwrap();
        part.run(&data, &TrainConfig { max_epochs: 1, ..cfg.clone() }, |_| {}).unwrap();
        let mut resumed = decode_state(&encode_state(&part), part.params_q.clone()).unwrap();
        resumed.run(&data, &cfg, |_| {}).unwrap();
        assert_eq!(encode_state(&resumed), encode_state(&straight));
        assert_eq!(resumed.params_q, straight.params_q);
    }
}
