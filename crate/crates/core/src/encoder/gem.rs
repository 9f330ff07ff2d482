//! Generalized-mean (GeM) spatial pooling.

use crate::error::{Error, Result};
use crate::real::Real;

/// Pools a `[channels][h*w]` map to one value per channel:
/// `((1 / hw) * sum o^p)^(1/p)`. Entries are expected to be non-negative.
pub fn gem_pool<T: Real>(map: &[T], channels: usize, plane: usize, p: f64) -> Result<Vec<T>> {
    if !(p > 0.0) {
        return Err(Error::NonPositiveExponent(p));
    }
    if map.len() != channels * plane || plane == 0 {
        return Err(Error::ShapeMismatch(format!(
            "GeM map of length {} is not {channels}x{plane}",
            map.len()
        )));
    }
    let pt = T::of(p);
    let inv_p = T::of(1.0 / p);
    let n = T::of(plane as f64);
    Ok(map
        .chunks_exact(plane)
        .map(|c| {
            let mean = c.iter().map(|&o| o.powf(pt)).sum::<T>() / n;
            mean.powf(inv_p)
        })
        .collect())
}

/// Gradient of [`gem_pool`] with respect to the map, given the per-channel
/// output cotangent. A channel whose generalized mean is zero gets a zero
/// gradient (the subgradient at the kink).
pub(crate) fn gem_backward<T: Real>(map: &[T], plane: usize, p: f64, pooled: &[T], dpooled: &[T]) -> Vec<T> {
    let pt_minus_1 = T::of(p - 1.0);
    let n = T::of(plane as f64);
    let mut out = vec![T::zero(); map.len()];
    for (c, (chunk, dst)) in map.chunks_exact(plane).zip(out.chunks_exact_mut(plane)).enumerate() {
        let y = pooled[c];
        if y <= T::zero() {
            continue;
        }
        // d y / d o = y^(1-p) * o^(p-1) / n
        let scale = dpooled[c] * y.powf(-pt_minus_1) / n;
        for (o, d) in chunk.iter().zip(dst.iter_mut()) {
            if *o > T::zero() {
                *d = scale * o.powf(pt_minus_1);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_map() {
        let map = vec![2.0f64; 9];
        for p in [0.5, 1.0, 3.0, 10.0] {
            let out = gem_pool(&map, 1, 9, p).unwrap();
            assert!((out[0] - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn p_one_is_mean() {
        let map = [0.1f64, 0.7, 0.0, 1.9, 3.0, 0.2];
        let out = gem_pool(&map, 2, 3, 1.0).unwrap();
        assert_eq!(out[0], (0.1 + 0.7 + 0.0) / 3.0);
        assert_eq!(out[1], (1.9 + 3.0 + 0.2) / 3.0);
    }

    #[test]
    fn cube_root_of_nine() {
        let out = gem_pool(&[0.0f64, 1.0, 2.0, 3.0], 1, 4, 3.0).unwrap();
        assert!((out[0] - 9f64.cbrt()).abs() < 1e-12);
        assert!((out[0] - 2.08008).abs() < 1e-5);
    }

    #[test]
    fn rejects_bad_exponent() {
        assert!(matches!(gem_pool(&[1.0f64], 1, 1, 0.0), Err(Error::NonPositiveExponent(_))));
        assert!(matches!(gem_pool(&[1.0f64], 1, 1, -2.0), Err(Error::NonPositiveExponent(_))));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let map = [0.3f64, 1.1, 0.0, 2.5, 0.7, 0.9, 1.4, 0.05];
        let p = 3.0;
        let pooled = gem_pool(&map, 2, 4, p).unwrap();
        let dpooled = [0.8, -1.3];
        let grad = gem_backward(&map, 4, p, &pooled, &dpooled);
        let h = 1e-6;
        for i in 0..map.len() {
            if map[i] == 0.0 {
                assert_eq!(grad[i], 0.0);
                continue;
            }
            let f = |delta: f64| {
                let mut m = map;
                m[i] += delta;
                let y = gem_pool(&m, 2, 4, p).unwrap();
                y[0] * dpooled[0] + y[1] * dpooled[1]
            };
            let fd = (f(h) - f(-h)) / (2.0 * h);
            assert!((fd - grad[i]).abs() < 1e-8, "{i}: {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn zero_channel_has_zero_gradient() {
        let map = [0.0f64; 4];
        let pooled = gem_pool(&map, 1, 4, 3.0).unwrap();
        assert_eq!(gem_backward(&map, 4, 3.0, &pooled, &[1.0]), vec![0.0; 4]);
    }
}
