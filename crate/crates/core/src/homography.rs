//! Planar homographies, the 4-point parameterization and random augmentation.
//!
//! A homography maps `[u, v, 1]` to `H [u, v, 1]` followed by division by the
//! third homogeneous coordinate. Matrices are stored canonically scaled
//! (`H33 = 1` where possible), so two matrices differing by a non-zero factor
//! compare equal after construction.

use std::fmt;

use nalgebra::{Matrix3, SMatrix, SVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::raster::{warp_and_crop, PixelPoint, Raster};

const SINGULAR_DET: f64 = 1e-12;
const AT_INFINITY: f64 = 1e-12;
const MAX_CONDITION: f64 = 1e12;
/// Rejection-sampling budget for [`sample_four_point`].
pub const MAX_SAMPLE_ATTEMPTS: usize = 100;

/// Non-singular 3×3 projective transform, row-major and canonically scaled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HomographyMatrix {
    h: [f64; 9],
}

impl HomographyMatrix {
    pub fn identity() -> Self {
        Self {
            h: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        }
    }

    pub fn translation(du: f64, dv: f64) -> Self {
        Self {
            h: [1.0, 0.0, du, 0.0, 1.0, dv, 0.0, 0.0, 1.0],
        }
    }

    pub fn from_rows(rows: [[f64; 3]; 3]) -> Result<Self> {
        let mut h = [0.0; 9];
        for (i, row) in rows.iter().enumerate() {
            h[i * 3..i * 3 + 3].copy_from_slice(row);
        }
        Self::from_array(h)
    }

    /// Canonicalizes `h`: divide by `H33` when `|H33| > 1e-9`, otherwise
    /// scale to unit Frobenius norm. Rejects non-finite or singular input.
    pub fn from_array(mut h: [f64; 9]) -> Result<Self> {
        if h.iter().any(|v| !v.is_finite()) {
            return Err(Error::SingularHomography);
        }
        let scale = if h[8].abs() > 1e-9 {
            h[8]
        } else {
            h.iter().map(|v| v * v).sum::<f64>().sqrt()
        };
        if scale == 0.0 {
            return Err(Error::SingularHomography);
        }
        if scale != 1.0 {
            for v in h.iter_mut() {
                *v /= scale;
            }
        }
        let out = Self { h };
        if out.det().abs() <= SINGULAR_DET {
            return Err(Error::SingularHomography);
        }
        Ok(out)
    }

    pub fn as_array(&self) -> &[f64; 9] {
        &self.h
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.h[row * 3 + col]
    }

    pub fn det(&self) -> f64 {
        let h = &self.h;
        h[0] * (h[4] * h[8] - h[5] * h[7]) - h[1] * (h[3] * h[8] - h[5] * h[6])
            + h[2] * (h[3] * h[7] - h[4] * h[6])
    }

    /// Matrix product `self · rhs` (apply `rhs` first).
    pub fn compose(&self, rhs: &HomographyMatrix) -> Result<HomographyMatrix> {
        let mut out = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                out[r * 3 + c] = (0..3).map(|k| self.at(r, k) * rhs.at(k, c)).sum();
            }
        }
        Self::from_array(out)
    }
}

impl fmt::Display for HomographyMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.h.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{v:.9}")?;
        }
        Ok(())
    }
}

pub fn apply_homography(h: &HomographyMatrix, p: PixelPoint) -> Result<PixelPoint> {
    let w = h.at(2, 0) * p.u + h.at(2, 1) * p.v + h.at(2, 2);
    if !(w.abs() > AT_INFINITY) {
        return Err(Error::PointAtInfinity);
    }
    Ok(PixelPoint::new(
        (h.at(0, 0) * p.u + h.at(0, 1) * p.v + h.at(0, 2)) / w,
        (h.at(1, 0) * p.u + h.at(1, 1) * p.v + h.at(1, 2)) / w,
    ))
}

/// Inverse via the adjugate.
pub fn invert(h: &HomographyMatrix) -> Result<HomographyMatrix> {
    let det = h.det();
    if !(det.abs() > SINGULAR_DET) {
        return Err(Error::SingularHomography);
    }
    let m = |r: usize, c: usize| h.at(r, c);
    let adj = [
        m(1, 1) * m(2, 2) - m(1, 2) * m(2, 1),
        m(0, 2) * m(2, 1) - m(0, 1) * m(2, 2),
        m(0, 1) * m(1, 2) - m(0, 2) * m(1, 1),
        m(1, 2) * m(2, 0) - m(1, 0) * m(2, 2),
        m(0, 0) * m(2, 2) - m(0, 2) * m(2, 0),
        m(0, 2) * m(1, 0) - m(0, 0) * m(1, 2),
        m(1, 0) * m(2, 1) - m(1, 1) * m(2, 0),
        m(0, 1) * m(2, 0) - m(0, 0) * m(2, 1),
        m(0, 0) * m(1, 1) - m(0, 1) * m(1, 0),
    ];
    HomographyMatrix::from_array(adj.map(|v| v / det))
}

/// Corner displacements of a frame: the 4-point parameterization of a homography.
///
/// Corners are ordered top-left, top-right, bottom-right, bottom-left.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FourPointDisplacement {
    base: [PixelPoint; 4],
    deltas: [(f64, f64); 4],
}

impl FourPointDisplacement {
    /// Fails with [`Error::NonConvexQuad`] unless the displaced corners form a
    /// strictly convex quadrilateral with the base winding.
    pub fn new(base: [PixelPoint; 4], deltas: [(f64, f64); 4]) -> Result<Self> {
        let fp = Self { base, deltas };
        if !(is_strictly_convex(&fp.base) && is_strictly_convex(&fp.displaced())) {
            return Err(Error::NonConvexQuad);
        }
        Ok(fp)
    }

    /// Axis-aligned base rectangle with corners inset by `inset` pixels.
    pub fn frame_corners(width: usize, height: usize, inset: f64) -> [PixelPoint; 4] {
        let (r, b) = ((width - 1) as f64 - inset, (height - 1) as f64 - inset);
        [
            PixelPoint::new(inset, inset),
            PixelPoint::new(r, inset),
            PixelPoint::new(r, b),
            PixelPoint::new(inset, b),
        ]
    }

    pub fn base(&self) -> &[PixelPoint; 4] {
        &self.base
    }

    pub fn deltas(&self) -> &[(f64, f64); 4] {
        &self.deltas
    }

    pub fn displaced(&self) -> [PixelPoint; 4] {
        std::array::from_fn(|k| {
            PixelPoint::new(self.base[k].u + self.deltas[k].0, self.base[k].v + self.deltas[k].1)
        })
    }
}

fn is_strictly_convex(q: &[PixelPoint; 4]) -> bool {
    (0..4).all(|k| {
        let (a, b, c) = (q[k], q[(k + 1) % 4], q[(k + 2) % 4]);
        let cross = (b.u - a.u) * (c.v - b.v) - (b.v - a.v) * (c.u - b.u);
        cross > 0.0
    })
}

/// Similarity transform moving the centroid to the origin with mean distance √2.
fn hartley(points: &[PixelPoint; 4]) -> (Matrix3<f64>, [PixelPoint; 4]) {
    let cu = points.iter().map(|p| p.u).sum::<f64>() / 4.0;
    let cv = points.iter().map(|p| p.v).sum::<f64>() / 4.0;
    let mean_dist = points
        .iter()
        .map(|p| ((p.u - cu).powi(2) + (p.v - cv).powi(2)).sqrt())
        .sum::<f64>()
        / 4.0;
    let s = if mean_dist > 1e-15 {
        std::f64::consts::SQRT_2 / mean_dist
    } else {
        1.0
    };
    let t = Matrix3::new(s, 0.0, -s * cu, 0.0, s, -s * cv, 0.0, 0.0, 1.0);
    let moved = points.map(|p| PixelPoint::new(s * (p.u - cu), s * (p.v - cv)));
    (t, moved)
}

/// Direct linear transform for exactly four correspondences.
///
/// Solves the 8×8 inhomogeneous system (`H33 = 1`) in Hartley-normalized
/// coordinates and maps the solution back to pixels.
pub fn solve_dlt(four_point: &FourPointDisplacement) -> Result<HomographyMatrix> {
    let (t_src, src) = hartley(&four_point.base);
    let (t_dst, dst) = hartley(&four_point.displaced());

    let mut a = SMatrix::<f64, 8, 8>::zeros();
    let mut b = SVector::<f64, 8>::zeros();
    for k in 0..4 {
        let (x, y) = (src[k].u, src[k].v);
        let (xp, yp) = (dst[k].u, dst[k].v);
        let r = 2 * k;
        a.row_mut(r)
            .copy_from_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -x * xp, -y * xp]);
        a.row_mut(r + 1)
            .copy_from_slice(&[0.0, 0.0, 0.0, x, y, 1.0, -x * yp, -y * yp]);
        b[r] = xp;
        b[r + 1] = yp;
    }

    let sv = a.singular_values();
    let (smax, smin) = (sv.max(), sv.min());
    let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !(cond <= MAX_CONDITION) {
        return Err(Error::DegenerateCorrespondences(cond));
    }
    let sol = a
        .lu()
        .solve(&b)
        .ok_or(Error::DegenerateCorrespondences(f64::INFINITY))?;

    let hn = Matrix3::new(sol[0], sol[1], sol[2], sol[3], sol[4], sol[5], sol[6], sol[7], 1.0);
    let t_dst_inv = t_dst.try_inverse().ok_or(Error::SingularHomography)?;
    let h = t_dst_inv * hn * t_src;
    HomographyMatrix::from_array(std::array::from_fn(|i| h[(i / 3, i % 3)]))
}

/// Draws a random 4-point displacement: base corners inset by `rho`, every
/// delta uniform in `[-rho, rho]^2`, redrawn until the quad is convex.
pub fn sample_four_point<R: Rng + ?Sized>(
    rng: &mut R,
    width: usize,
    height: usize,
    rho: f64,
) -> Result<FourPointDisplacement> {
    if !(rho >= 0.0) || rho >= width.min(height) as f64 / 4.0 {
        return Err(Error::InvalidConfig(format!(
            "rho {rho} must lie in [0, {}) for a {width}x{height} frame",
            width.min(height) as f64 / 4.0
        )));
    }
    let base = FourPointDisplacement::frame_corners(width, height, rho);
    if rho == 0.0 {
        return FourPointDisplacement::new(base, [(0.0, 0.0); 4]);
    }
    for _ in 0..MAX_SAMPLE_ATTEMPTS {
        let deltas: [(f64, f64); 4] =
            std::array::from_fn(|_| (rng.random_range(-rho..=rho), rng.random_range(-rho..=rho)));
        if let Ok(fp) = FourPointDisplacement::new(base, deltas) {
            return Ok(fp);
        }
    }
    Err(Error::SamplingExhausted(MAX_SAMPLE_ATTEMPTS))
}

/// One draw from the homography augmentation distribution.
pub fn augment<R: Rng + ?Sized>(img: &Raster, rng: &mut R, rho: f64) -> Result<Raster> {
    let fp = sample_four_point(rng, img.width(), img.height(), rho)?;
    let h = solve_dlt(&fp)?;
    warp_and_crop(img, &h)
}
