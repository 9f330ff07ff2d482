use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::loss::{compute_logits, info_nce, info_nce_grad, norm_regularizer};
use super::QueueMatrix;
use crate::encoder::{backward, forward, FeatureVector, ParamSet};
use crate::error::{Error, Result};
use crate::homography::augment;
use crate::raster::Raster;
use crate::real::{axpy, Real};

/// Loss-side hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub tau: f64,
    pub lambda_reg: f64,
    /// Corner perturbation radius of the key-side augmentation, in pixels.
    pub rho: f64,
}

#[derive(Debug, Clone)]
pub struct BatchOutput<T> {
    /// Mean over the batch of `infoNCE + lambda * (|d_raw| - 1)^2`.
    pub loss: T,
    /// Gradient of `loss` with respect to the primary encoder only.
    pub grads: Option<ParamSet<T>>,
    /// Normalized keys from the momentum encoder, in batch order.
    pub keys: Vec<FeatureVector<T>>,
    /// Mean of the positive logits `d_q·d_k / tau`.
    pub mean_positive_logit: f64,
}

struct Example<T> {
    loss: T,
    grads: Option<ParamSet<T>>,
    key: FeatureVector<T>,
    positive: T,
}

/// Per-example seeds are drawn from `rng` in batch order, so the result is
/// independent of how the examples are scheduled across threads.
fn example_seeds<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<u64> {
    (0..n).map(|_| rng.random()).collect()
}

#[allow(clippy::too_many_arguments)]
fn run_example<T: Real>(
    params_q: &ParamSet<T>,
    params_k: &ParamSet<T>,
    img: &Raster,
    seed: u64,
    queue: &QueueMatrix<T>,
    cfg: &LossConfig,
    scale: T,
    with_grad: bool,
) -> Result<Example<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let augmented = augment(img, &mut rng, cfg.rho)?;
    let (d_q, cache) = forward(params_q, img)?;
    // keys are constants for backprop: no cache is kept
    let (d_k, _) = forward(params_k, &augmented)?;

    let logits = compute_logits(&d_q, &d_k, queue, cfg.tau)?;
    let (penalty, penalty_grad) = norm_regularizer(&cache.d_raw);
    let lambda = T::of(cfg.lambda_reg);
    let loss = info_nce(&logits) + lambda * penalty;

    let grads = if with_grad {
        // dL/dd_q = (1/tau) (g_0 d_k + sum_i g_i Q_i)
        let gl = info_nce_grad(&logits);
        let inv_tau = T::of(1.0 / cfg.tau);
        let mut gd = vec![T::zero(); d_q.dim()];
        axpy(gl[0] * inv_tau * scale, d_k.values(), &mut gd);
        for (g, col) in gl[1..].iter().zip(queue.columns()) {
            axpy(*g * inv_tau * scale, col, &mut gd);
        }
        let graw: Vec<T> = penalty_grad.iter().map(|v| *v * lambda * scale).collect();
        Some(backward(params_q, &cache, Some(&gd), Some(&graw))?)
    } else {
        None
    };
    Ok(Example {
        loss,
        grads,
        positive: logits.positive(),
        key: d_k,
    })
}

fn run_batch<T: Real, R: Rng + ?Sized>(
    params_q: &ParamSet<T>,
    params_k: &ParamSet<T>,
    batch: &[&Raster],
    queue: &QueueMatrix<T>,
    cfg: &LossConfig,
    rng: &mut R,
    with_grad: bool,
) -> Result<BatchOutput<T>> {
    if batch.is_empty() {
        return Err(Error::InvalidConfig("empty batch".into()));
    }
    params_q.check_shape(params_k)?;
    let seeds = example_seeds(rng, batch.len());
    let scale = T::of(1.0 / batch.len() as f64);
    let examples: Vec<Result<Example<T>>> = batch
        .par_iter()
        .zip(seeds.par_iter())
        .map(|(img, &seed)| run_example(params_q, params_k, img, seed, queue, cfg, scale, with_grad))
        .collect();

    // fixed-order reduction
    let mut loss = T::zero();
    let mut positive = 0.0;
    let mut grads: Option<ParamSet<T>> = None;
    let mut keys = Vec::with_capacity(batch.len());
    for ex in examples {
        let ex = ex?;
        loss = loss + ex.loss;
        positive += ex.positive.f64();
        if let Some(g) = ex.grads {
            match grads.as_mut() {
                None => grads = Some(g),
                Some(acc) => {
                    for (a, b) in acc.tensors_mut().iter_mut().zip(g.tensors()) {
                        for (ai, bi) in a.iter_mut().zip(b) {
                            *ai = *ai + *bi;
                        }
                    }
                }
            }
        }
        keys.push(ex.key);
    }
    Ok(BatchOutput {
        loss: loss * scale,
        grads,
        keys,
        mean_positive_logit: positive / batch.len() as f64,
    })
}

/// Contrastive loss of one minibatch and its gradient with respect to `params_q`.
///
/// Each image goes through the primary encoder as-is and through the
/// momentum encoder after one random homography augmentation. Keys and the
/// queue are treated as constants.
pub fn batch_loss<T: Real, R: Rng + ?Sized>(
    params_q: &ParamSet<T>,
    params_k: &ParamSet<T>,
    batch: &[&Raster],
    queue: &QueueMatrix<T>,
    cfg: &LossConfig,
    rng: &mut R,
) -> Result<BatchOutput<T>> {
    run_batch(params_q, params_k, batch, queue, cfg, rng, true)
}

/// Same as [`batch_loss`] without the reverse pass (`grads` is `None`).
pub fn batch_loss_value<T: Real, R: Rng + ?Sized>(
    params_q: &ParamSet<T>,
    params_k: &ParamSet<T>,
    batch: &[&Raster],
    queue: &QueueMatrix<T>,
    cfg: &LossConfig,
    rng: &mut R,
) -> Result<BatchOutput<T>> {
    run_batch(params_q, params_k, batch, queue, cfg, rng, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{finite_diff_check, ArchConfig, GradCheckOptions, Objective};

    fn noise(arch: &ArchConfig, seed: u64) -> Raster {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Raster::from_fn(arch.input_width, arch.input_height, |_, _| rng.random::<f32>())
    }

    fn setup(k: usize) -> (ParamSet<f64>, ParamSet<f64>, QueueMatrix<f64>, Vec<Raster>) {
        let arch = ArchConfig::tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let q = ParamSet::<f64>::init_he(&arch, &mut rng).unwrap();
        let k_params = ParamSet::<f64>::init_he(&arch, &mut rng).unwrap();
        let queue = QueueMatrix::random(k, arch.dim, &mut rng).unwrap();
        let imgs = (0..2).map(|i| noise(&arch, 100 + i)).collect();
        (q, k_params, queue, imgs)
    }

    fn cfg() -> LossConfig {
        LossConfig { tau: 0.5, lambda_reg: 0.1, rho: 2.0 }
    }

    #[test]
    fn matches_straight_line_oracle() {
        let (q, k, queue, imgs) = setup(4);
        let batch: Vec<&Raster> = imgs.iter().collect();
        let out = batch_loss_value(&q, &k, &batch, &queue, &cfg(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let seeds: Vec<u64> = (0..2).map(|_| rng.random()).collect();
        let mut total = 0.0;
        for (img, seed) in imgs.iter().zip(seeds) {
            let aug = augment(img, &mut ChaCha8Rng::seed_from_u64(seed), 2.0).unwrap();
            let (dq, cache) = forward(&q, img).unwrap();
            let (dk, _) = forward(&k, &aug).unwrap();
            let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
            let mut logits = vec![dot(dq.values(), dk.values()) / 0.5];
            for i in 0..4 {
                logits.push(dot(dq.values(), queue.column(i)) / 0.5);
            }
            let lse = logits.iter().map(|l| l.exp()).sum::<f64>().ln();
            let norm = cache.d_raw.iter().map(|v| v * v).sum::<f64>().sqrt();
            total += lse - logits[0] + 0.1 * (norm - 1.0).powi(2);
        }
        assert!((out.loss - total / 2.0).abs() < 1e-12, "{} vs {}", out.loss, total / 2.0);
        assert_eq!(out.keys.len(), 2);
        assert!(out.keys.iter().all(|k| k.is_unit(1e-9)));
    }

    #[test]
    fn identical_encoders_without_augmentation() {
        // N = 1, rho = 0, θ_k = θ_q and a queue orthogonal to d_q:
        // logits are [1/tau, 0, ..., 0]
        let arch = ArchConfig::tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = ParamSet::<f64>::init_he(&arch, &mut rng).unwrap();
        let img = noise(&arch, 4);
        let (d, _) = forward(&q, &img).unwrap();
        // Gram-Schmidt two vectors against d
        let mut cols = Vec::new();
        for s in 0..2 {
            let mut v: Vec<f64> = (0..arch.dim).map(|i| ((i + 3 * s) as f64).sin()).collect();
            for prev in std::iter::once(d.values().to_vec()).chain(cols.iter().map(|c: &FeatureVector<f64>| c.values().to_vec())) {
                let p: f64 = v.iter().zip(&prev).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(&prev).for_each(|(a, b)| *a -= p * b);
            }
            cols.push(FeatureVector(v).normalized().unwrap());
        }
        let queue = QueueMatrix::from_columns(&cols).unwrap();
        let c = LossConfig { tau: 0.5, lambda_reg: 0.0, rho: 0.0 };
        let out = batch_loss_value(&q, &q.clone(), &[&img], &queue, &c, &mut rng).unwrap();
        let oracle = (2f64.exp() + 2.0).ln() - 2.0;
        assert!((out.loss - oracle).abs() < 1e-9, "{} vs {oracle}", out.loss);
        assert!((out.mean_positive_logit - 2.0).abs() < 1e-9);
    }

    struct BatchObjective {
        k: ParamSet<f64>,
        queue: QueueMatrix<f64>,
        imgs: Vec<Raster>,
    }

    impl Objective for BatchObjective {
        fn value(&mut self, p: &ParamSet<f64>) -> Result<f64> {
            let batch: Vec<&Raster> = self.imgs.iter().collect();
            Ok(batch_loss_value(p, &self.k, &batch, &self.queue, &cfg(), &mut ChaCha8Rng::seed_from_u64(9))?.loss)
        }
        fn value_and_grad(&mut self, p: &ParamSet<f64>) -> Result<(f64, ParamSet<f64>)> {
            let batch: Vec<&Raster> = self.imgs.iter().collect();
            let out = batch_loss(p, &self.k, &batch, &self.queue, &cfg(), &mut ChaCha8Rng::seed_from_u64(9))?;
            Ok((out.loss, out.grads.unwrap()))
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (q, k, queue, imgs) = setup(8);
        let mut obj = BatchObjective { k, queue, imgs };
        let opts = GradCheckOptions { max_per_tensor: Some(40), ..Default::default() };
        let report = finite_diff_check(&q, &mut obj, &opts).unwrap();
        assert!(report.passed, "max rel err {} worst {:?}", report.max_rel_err, report.worst);
    }

    #[test]
    fn result_does_not_depend_on_thread_count() {
        let (q, k, queue, imgs) = setup(4);
        let q32 = q.cast::<f32>();
        let k32 = k.cast::<f32>();
        let cols: Vec<FeatureVector<f32>> = queue.columns().map(|c| FeatureVector(c.to_vec()).cast::<f32>().normalized().unwrap()).collect();
        let queue32 = QueueMatrix::from_columns(&cols).unwrap();
        let batch: Vec<&Raster> = imgs.iter().chain(imgs.iter()).collect();
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| batch_loss(&q32, &k32, &batch, &queue32, &cfg(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap())
        };
        let (a, b) = (run(1), run(3));
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        assert_eq!(a.grads.unwrap(), b.grads.unwrap());
    }
}
