//! Reference feature encoder: strided conv/ReLU trunk, GeM pooling, a fully
//! connected head and l2 normalization, with a hand-written reverse pass.

mod checkpoint;
mod conv;
mod gem;
mod gradcheck;

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Raster;
use crate::real::{dot, Real};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub(crate) use checkpoint::{read_tensors, write_arch, read_arch, write_tensors};
use conv::{conv_backward, conv_forward, im2col, ConvGeom};
pub use gem::gem_pool;
pub use gradcheck::{finite_diff_check, GradCheckOptions, GradCheckReport, GradMismatch, Objective};

/// Shape of the encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub input_width: usize,
    pub input_height: usize,
    /// Output channels of each conv layer; the input has one channel.
    pub conv_channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// Descriptor dimension D.
    pub dim: usize,
    /// GeM exponent (fixed, not learned).
    pub gem_p: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            input_width: 64,
            input_height: 64,
            conv_channels: vec![16, 32, 32],
            kernel: 3,
            stride: 2,
            padding: 1,
            dim: 64,
            gem_p: 3.0,
        }
    }
}

impl ArchConfig {
    /// 16×16 input, D = 8: small enough for exhaustive gradient checks.
    pub fn tiny() -> Self {
        Self {
            input_width: 16,
            input_height: 16,
            dim: 8,
            ..Self::default()
        }
    }

    pub(crate) fn layers(&self) -> Result<Vec<ConvGeom>> {
        if self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
            return Err(Error::ShapeMismatch("conv trunk needs non-empty channel list".into()));
        }
        if self.dim == 0 || self.kernel == 0 || self.stride == 0 {
            return Err(Error::ShapeMismatch("dim, kernel and stride must be positive".into()));
        }
        if !(self.gem_p > 0.0) {
            return Err(Error::NonPositiveExponent(self.gem_p));
        }
        let (mut c, mut h, mut w) = (1, self.input_height, self.input_width);
        let mut out = Vec::with_capacity(self.conv_channels.len());
        for &oc in &self.conv_channels {
            let g = ConvGeom::new(c, h, w, oc, self.kernel, self.stride, self.padding)
                .ok_or_else(|| Error::ShapeMismatch(format!("{h}x{w} map too small for kernel")))?;
            (c, h, w) = (oc, g.out_h, g.out_w);
            out.push(g);
        }
        Ok(out)
    }

    /// Channel count C of the pooled map.
    pub fn pooled_channels(&self) -> usize {
        *self.conv_channels.last().unwrap_or(&0)
    }

    /// `(channels, height, width)` of the final conv map.
    pub fn final_map(&self) -> Result<(usize, usize, usize)> {
        let g = *self.layers()?.last().unwrap();
        Ok((g.out_c, g.out_h, g.out_w))
    }
}

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed)
}

/// All learnable encoder parameters.
///
/// Tensors are kept in declaration order: per conv layer weight
/// `[out_c][in_c][k][k]` then bias, followed by the FC weight `F` (`D×C`,
/// row-major) and bias `b_F`. The same type doubles as a gradient buffer.
#[derive(Debug)]
pub struct ParamSet<T> {
    arch: ArchConfig,
    tensors: Vec<Vec<T>>,
    id: u64,
    revision: u64,
}

impl<T: Clone> Clone for ParamSet<T> {
    fn clone(&self) -> Self {
        Self {
            arch: self.arch.clone(),
            tensors: self.tensors.clone(),
            id: fresh_id(),
            revision: 0,
        }
    }
}

impl<T: PartialEq> PartialEq for ParamSet<T> {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch && self.tensors == other.tensors
    }
}

impl<T: Real> ParamSet<T> {
    pub fn zeros(arch: &ArchConfig) -> Result<Self> {
        let layers = arch.layers()?;
        let mut tensors = Vec::with_capacity(2 * layers.len() + 2);
        for g in &layers {
            tensors.push(vec![T::zero(); g.weight_len()]);
            tensors.push(vec![T::zero(); g.out_c]);
        }
        tensors.push(vec![T::zero(); arch.dim * arch.pooled_channels()]);
        tensors.push(vec![T::zero(); arch.dim]);
        Ok(Self {
            arch: arch.clone(),
            tensors,
            id: fresh_id(),
            revision: 0,
        })
    }

    /// He-uniform weights (`U(-sqrt(6/fan_in), sqrt(6/fan_in))`), zero biases.
    pub fn init_he<R: Rng + ?Sized>(arch: &ArchConfig, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(arch)?;
        let layers = arch.layers()?;
        let fan_ins: Vec<usize> = layers
            .iter()
            .map(|g| g.col_rows())
            .chain(std::iter::once(arch.pooled_channels()))
            .collect();
        for (layer, fan_in) in fan_ins.into_iter().enumerate() {
            let limit = (6.0 / fan_in as f64).sqrt();
            for w in p.tensors[2 * layer].iter_mut() {
                *w = T::of(rng.random_range(-limit..limit));
            }
        }
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            arch: self.arch.clone(),
            tensors: self.tensors.iter().map(|t| vec![T::zero(); t.len()]).collect(),
            id: fresh_id(),
            revision: 0,
        }
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn tensors(&self) -> &[Vec<T>] {
        &self.tensors
    }

    /// Mutable access to every tensor. Invalidates forward caches taken
    /// against these parameters.
    pub fn tensors_mut(&mut self) -> &mut [Vec<T>] {
        self.revision += 1;
        &mut self.tensors
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Vec::len).sum()
    }

    pub fn same_shape<U>(&self, other: &ParamSet<U>) -> bool {
        self.arch == other.arch
            && self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.len() == b.len())
    }

    pub(crate) fn check_shape<U>(&self, other: &ParamSet<U>) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch("parameter sets have different layouts".into()))
        }
    }

    pub fn conv_weight(&self, layer: usize) -> &[T] {
        &self.tensors[2 * layer]
    }

    pub fn conv_bias(&self, layer: usize) -> &[T] {
        &self.tensors[2 * layer + 1]
    }

    pub fn fc_weight(&self) -> &[T] {
        &self.tensors[self.tensors.len() - 2]
    }

    pub fn fc_bias(&self) -> &[T] {
        &self.tensors[self.tensors.len() - 1]
    }

    /// Element-wise conversion to another float type.
    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            arch: self.arch.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| t.iter().map(|v| U::of(v.f64())).collect())
                .collect(),
            id: fresh_id(),
            revision: 0,
        }
    }

    /// Euclidean norm over all entries, accumulated in f64.
    pub fn l2_distance(&self, other: &ParamSet<T>) -> f64 {
        self.tensors
            .iter()
            .flatten()
            .zip(other.tensors.iter().flatten())
            .map(|(a, b)| (a.f64() - b.f64()).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().flatten().all(|v| v.is_finite())
    }

    pub(crate) fn from_parts(arch: ArchConfig, tensors: Vec<Vec<T>>) -> Result<Self> {
        let shell = Self::zeros(&arch)?;
        if tensors.len() != shell.tensors.len()
            || tensors.iter().zip(&shell.tensors).any(|(a, b)| a.len() != b.len())
        {
            return Err(Error::ShapeMismatch("tensor list does not match architecture".into()));
        }
        Ok(Self {
            arch,
            tensors,
            id: fresh_id(),
            revision: 0,
        })
    }
}

/// Encoder output: a D-dimensional global descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector<T = f32>(pub Vec<T>);

impl<T: Real> FeatureVector<T> {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[T] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v.f64().powi(2)).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Self) -> T {
        dot(&self.0, &other.0)
    }

    /// Returns the unit vector in the same direction.
    pub fn normalized(&self) -> Result<Self> {
        let n = T::of(self.norm());
        if !(n.f64() >= 1e-12) {
            return Err(Error::ZeroNorm);
        }
        Ok(Self(self.0.iter().map(|v| *v / n).collect()))
    }

    pub fn is_unit(&self, tol: f64) -> bool {
        (self.norm() - 1.0).abs() <= tol
    }

    pub fn cast<U: Real>(&self) -> FeatureVector<U> {
        FeatureVector(self.0.iter().map(|v| U::of(v.f64())).collect())
    }
}

/// Intermediate values of one forward pass, sufficient for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    params_id: u64,
    params_revision: u64,
    /// im2col buffers of each conv layer's input.
    cols: Vec<Vec<T>>,
    /// Conv outputs before ReLU.
    pub pre_activations: Vec<Vec<T>>,
    /// Conv outputs after ReLU; the last entry is the pooled map `o`.
    pub activations: Vec<Vec<T>>,
    pub pooled: Vec<T>,
    pub d_raw: Vec<T>,
    pub d: Vec<T>,
    pub raw_norm: T,
}

/// `d = normalize(F · GeM(trunk(img)) + b_F)`.
pub fn forward<T: Real>(params: &ParamSet<T>, img: &Raster) -> Result<(FeatureVector<T>, ForwardCache<T>)> {
    let arch = &params.arch;
    if img.width() != arch.input_width || img.height() != arch.input_height {
        return Err(Error::ShapeMismatch(format!(
            "encoder expects {}x{} input, got {}x{}",
            arch.input_width,
            arch.input_height,
            img.width(),
            img.height()
        )));
    }
    let layers = arch.layers()?;
    let mut x: Vec<T> = img.data().iter().map(|v| T::of(*v as f64)).collect();
    let mut cols = Vec::with_capacity(layers.len());
    let mut pre = Vec::with_capacity(layers.len());
    let mut act = Vec::with_capacity(layers.len());
    for (l, g) in layers.iter().enumerate() {
        let mut c = Vec::new();
        im2col(g, &x, &mut c);
        let mut z = Vec::new();
        conv_forward(g, &c, params.conv_weight(l), params.conv_bias(l), &mut z);
        let a: Vec<T> = z.iter().map(|v| v.max(T::zero())).collect();
        cols.push(c);
        pre.push(z);
        x = a.clone();
        act.push(a);
    }
    let last = layers.last().unwrap();
    let pooled = gem_pool(&x, last.out_c, last.out_plane(), arch.gem_p)?;

    let c = pooled.len();
    let f = params.fc_weight();
    let d_raw: Vec<T> = params
        .fc_bias()
        .iter()
        .enumerate()
        .map(|(j, &b)| b + dot(&f[j * c..(j + 1) * c], &pooled))
        .collect();
    let raw_norm = d_raw.iter().map(|v| *v * *v).sum::<T>().sqrt();
    if !(raw_norm.f64() >= 1e-12) {
        return Err(Error::ZeroNorm);
    }
    let d: Vec<T> = d_raw.iter().map(|v| *v / raw_norm).collect();
    let cache = ForwardCache {
        params_id: params.id,
        params_revision: params.revision,
        cols,
        pre_activations: pre,
        activations: act,
        pooled,
        d_raw,
        d: d.clone(),
        raw_norm,
    };
    Ok((FeatureVector(d), cache))
}

/// Reverse pass. `grad_d` is the cotangent of the normalized descriptor,
/// `grad_d_raw` an extra cotangent applied directly to the pre-normalization
/// descriptor; either may be omitted.
pub fn backward<T: Real>(
    params: &ParamSet<T>,
    cache: &ForwardCache<T>,
    grad_d: Option<&[T]>,
    grad_d_raw: Option<&[T]>,
) -> Result<ParamSet<T>> {
    if cache.params_id != params.id || cache.params_revision != params.revision {
        return Err(Error::StaleCache);
    }
    let dim = params.arch.dim;
    for g in [grad_d, grad_d_raw].into_iter().flatten() {
        if g.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: g.len(),
            });
        }
    }

    // normalization Jacobian: (I - d d^T) / |d_raw|
    let mut g_raw = vec![T::zero(); dim];
    if let Some(gd) = grad_d {
        let proj = dot(gd, &cache.d);
        for (j, out) in g_raw.iter_mut().enumerate() {
            *out = (gd[j] - cache.d[j] * proj) / cache.raw_norm;
        }
    }
    if let Some(gr) = grad_d_raw {
        for (out, g) in g_raw.iter_mut().zip(gr) {
            *out = *out + *g;
        }
    }

    let mut grads = params.zeros_like();
    let layers = params.arch.layers()?;
    let n_layers = layers.len();
    let c = cache.pooled.len();

    // FC head
    let f = params.fc_weight();
    let mut dpooled = vec![T::zero(); c];
    {
        let t = grads.tensors.len();
        let (front, back) = grads.tensors.split_at_mut(t - 1);
        let df = &mut front[t - 2];
        let db = &mut back[0];
        for j in 0..dim {
            let g = g_raw[j];
            db[j] = g;
            for k in 0..c {
                df[j * c + k] = g * cache.pooled[k];
                dpooled[k] = dpooled[k] + f[j * c + k] * g;
            }
        }
    }

    let last = layers[n_layers - 1];
    let mut dact = gem::gem_backward(
        &cache.activations[n_layers - 1],
        last.out_plane(),
        params.arch.gem_p,
        &cache.pooled,
        &dpooled,
    );

    for l in (0..n_layers).rev() {
        let g = &layers[l];
        // ReLU
        for (d, z) in dact.iter_mut().zip(&cache.pre_activations[l]) {
            if *z <= T::zero() {
                *d = T::zero();
            }
        }
        let mut dx = if l > 0 { Some(vec![T::zero(); g.in_len()]) } else { None };
        let (wpart, bpart) = grads.tensors.split_at_mut(2 * l + 1);
        conv_backward(
            g,
            &cache.cols[l],
            params.conv_weight(l),
            &dact,
            &mut wpart[2 * l],
            &mut bpart[0],
            dx.as_deref_mut(),
        );
        if let Some(dx) = dx {
            dact = dx;
        }
    }
    Ok(grads)
}

/// Forward pass without keeping the cache.
pub fn embed<T: Real>(params: &ParamSet<T>, img: &Raster) -> Result<FeatureVector<T>> {
    forward(params, img).map(|(d, _)| d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn noise_img(arch: &ArchConfig, seed: u64) -> Raster {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Raster::from_fn(arch.input_width, arch.input_height, |_, _| rng.random::<f32>())
    }

    #[test]
    fn default_arch_shapes() {
        let arch = ArchConfig::default();
        assert_eq!(arch.final_map().unwrap(), (32, 8, 8));
        let p = ParamSet::<f32>::zeros(&arch).unwrap();
        let expected = (16 * 9 + 16) + (32 * 16 * 9 + 32) + (32 * 32 * 9 + 32) + (64 * 32 + 64);
        assert_eq!(p.num_params(), expected);
        assert_eq!(ArchConfig::tiny().final_map().unwrap(), (32, 2, 2));
    }

    #[test]
    fn bias_passthrough() {
        let arch = ArchConfig::tiny();
        let mut p = ParamSet::<f64>::zeros(&arch).unwrap();
        let n = p.tensors().len();
        p.tensors_mut()[n - 1][0] = 1.0;
        let (d, _) = forward(&p, &noise_img(&arch, 1)).unwrap();
        let mut e1 = vec![0.0; arch.dim];
        e1[0] = 1.0;
        assert_eq!(d.0, e1);
    }

    #[test]
    fn zero_params_give_zero_norm_error() {
        let arch = ArchConfig::tiny();
        let p = ParamSet::<f64>::zeros(&arch).unwrap();
        assert!(matches!(forward(&p, &noise_img(&arch, 1)), Err(Error::ZeroNorm)));
    }

    #[test]
    fn forward_is_deterministic_and_unit() {
        let arch = ArchConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = ParamSet::<f32>::init_he(&arch, &mut rng).unwrap();
        let img = noise_img(&arch, 9);
        let a = embed(&p, &img).unwrap();
        let b = embed(&p, &img).unwrap();
        assert_eq!(a, b);
        assert!(a.is_unit(1e-6));
        // a clone stands in for the momentum encoder
        let k = p.clone();
        assert_eq!(embed(&k, &img).unwrap(), a);
    }

    #[test]
    fn shape_mismatch() {
        let p = ParamSet::<f32>::zeros(&ArchConfig::tiny()).unwrap();
        assert!(matches!(
            forward(&p, &Raster::filled(8, 8, 0.0)),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn zero_cotangent_zero_gradient() {
        let arch = ArchConfig::tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = ParamSet::<f64>::init_he(&arch, &mut rng).unwrap();
        let (_, cache) = forward(&p, &noise_img(&arch, 3)).unwrap();
        let zeros = vec![0.0; arch.dim];
        let g = backward(&p, &cache, Some(&zeros), None).unwrap();
        assert!(g.tensors().iter().flatten().all(|v| *v == 0.0));
    }

    #[test]
    fn norm_of_normalized_output_has_no_gradient() {
        // d/dd_raw |d|^2 through the normalization is (I - d d^T) 2d / |d_raw| = 0
        let arch = ArchConfig::tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = ParamSet::<f64>::init_he(&arch, &mut rng).unwrap();
        let (d, cache) = forward(&p, &noise_img(&arch, 8)).unwrap();
        let gd: Vec<f64> = d.0.iter().map(|v| 2.0 * v).collect();
        let g = backward(&p, &cache, Some(&gd), None).unwrap();
        let max = g.tensors().iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max < 1e-12, "{max}");
    }

    #[test]
    fn stale_cache_rejected() {
        let arch = ArchConfig::tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = ParamSet::<f64>::init_he(&arch, &mut rng).unwrap();
        let (_, cache) = forward(&p, &noise_img(&arch, 8)).unwrap();
        let other = p.clone();
        let gd = vec![1.0; arch.dim];
        assert!(matches!(backward(&other, &cache, Some(&gd), None), Err(Error::StaleCache)));
        p.tensors_mut()[0][0] += 0.5;
        assert!(matches!(backward(&p, &cache, Some(&gd), None), Err(Error::StaleCache)));
    }
}
