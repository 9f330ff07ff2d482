//! Strided 2-D convolution via im2col.
//!
//! The column buffer is laid out `[in_c * k * k][out_h * out_w]` so both the
//! forward product and the weight gradient reduce to contiguous axpy/dot loops.

use crate::real::{axpy, dot, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn new(in_c: usize, in_h: usize, in_w: usize, out_c: usize, kernel: usize, stride: usize, pad: usize) -> Option<Self> {
        let span_h = (in_h + 2 * pad).checked_sub(kernel)?;
        let span_w = (in_w + 2 * pad).checked_sub(kernel)?;
        Some(Self {
            in_c,
            in_h,
            in_w,
            out_c,
            out_h: span_h / stride + 1,
            out_w: span_w / stride + 1,
            kernel,
            stride,
            pad,
        })
    }

    pub fn weight_len(&self) -> usize {
        self.out_c * self.col_rows()
    }

    pub fn col_rows(&self) -> usize {
        self.in_c * self.kernel * self.kernel
    }

    pub fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn in_len(&self) -> usize {
        self.in_c * self.in_h * self.in_w
    }

    pub fn out_len(&self) -> usize {
        self.out_c * self.out_plane()
    }

    /// Output indices `o` along one axis for which `o * stride + k - pad`
    /// lands inside `[0, in_len)`.
    fn valid(&self, k: usize, in_len: usize, out_len: usize) -> std::ops::Range<usize> {
        let (s, p) = (self.stride as i64, self.pad as i64);
        let k = k as i64;
        let lo = if p > k { (p - k + s - 1) / s } else { 0 };
        let hi = ((in_len as i64 - 1 + p - k).div_euclid(s) + 1).clamp(0, out_len as i64);
        (lo as usize).min(hi as usize)..hi as usize
    }
}

pub(crate) fn im2col<T: Real>(g: &ConvGeom, x: &[T], cols: &mut Vec<T>) {
    let plane = g.out_plane();
    cols.clear();
    cols.resize(g.col_rows() * plane, T::zero());
    for ci in 0..g.in_c {
        let xp = &x[ci * g.in_h * g.in_w..(ci + 1) * g.in_h * g.in_w];
        for ky in 0..g.kernel {
            let ys = g.valid(ky, g.in_h, g.out_h);
            for kx in 0..g.kernel {
                let xs = g.valid(kx, g.in_w, g.out_w);
                let row = (ci * g.kernel + ky) * g.kernel + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in ys.clone() {
                    let iy = oy * g.stride + ky - g.pad;
                    let src = &xp[iy * g.in_w..(iy + 1) * g.in_w];
                    let drow = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    for ox in xs.clone() {
                        drow[ox] = src[ox * g.stride + kx - g.pad];
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Real>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let plane = g.out_plane();
    for ci in 0..g.in_c {
        let xp = &mut dx[ci * g.in_h * g.in_w..(ci + 1) * g.in_h * g.in_w];
        for ky in 0..g.kernel {
            let ys = g.valid(ky, g.in_h, g.out_h);
            for kx in 0..g.kernel {
                let xs = g.valid(kx, g.in_w, g.out_w);
                let row = (ci * g.kernel + ky) * g.kernel + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in ys.clone() {
                    let iy = oy * g.stride + ky - g.pad;
                    let srow = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    let drow = &mut xp[iy * g.in_w..(iy + 1) * g.in_w];
                    for ox in xs.clone() {
                        let ix = ox * g.stride + kx - g.pad;
                        drow[ix] = drow[ix] + srow[ox];
                    }
                }
            }
        }
    }
}

/// `out[co] = bias[co] + sum_r weight[co, r] * cols[r]`
pub(crate) fn conv_forward<T: Real>(g: &ConvGeom, cols: &[T], weight: &[T], bias: &[T], out: &mut Vec<T>) {
    let plane = g.out_plane();
    let rows = g.col_rows();
    out.clear();
    out.resize(g.out_len(), T::zero());
    for co in 0..g.out_c {
        let o = &mut out[co * plane..(co + 1) * plane];
        o.fill(bias[co]);
        let w = &weight[co * rows..(co + 1) * rows];
        for (r, &wv) in w.iter().enumerate() {
            axpy(wv, &cols[r * plane..(r + 1) * plane], o);
        }
    }
}

/// Accumulates weight/bias gradients and, when requested, the input gradient.
pub(crate) fn conv_backward<T: Real>(
    g: &ConvGeom,
    cols: &[T],
    weight: &[T],
    dout: &[T],
    dweight: &mut [T],
    dbias: &mut [T],
    dx: Option<&mut [T]>,
) {
    let plane = g.out_plane();
    let rows = g.col_rows();
    for co in 0..g.out_c {
        let d = &dout[co * plane..(co + 1) * plane];
        dbias[co] = dbias[co] + d.iter().copied().sum::<T>();
        let dw = &mut dweight[co * rows..(co + 1) * rows];
        for (r, dwr) in dw.iter_mut().enumerate() {
            *dwr = *dwr + dot(d, &cols[r * plane..(r + 1) * plane]);
        }
    }
    if let Some(dx) = dx {
        let mut dcols = vec![T::zero(); rows * plane];
        for co in 0..g.out_c {
            let d = &dout[co * plane..(co + 1) * plane];
            let w = &weight[co * rows..(co + 1) * rows];
            for (r, &wv) in w.iter().enumerate() {
                axpy(wv, d, &mut dcols[r * plane..(r + 1) * plane]);
            }
        }
        col2im_add(g, &dcols, dx);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct seven-loop convolution with explicit bounds checks.
    fn naive(g: &ConvGeom, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; g.out_len()];
        for co in 0..g.out_c {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let mut acc = b[co];
                    for ci in 0..g.in_c {
                        for ky in 0..g.kernel {
                            for kx in 0..g.kernel {
                                let iy = (oy * g.stride + ky) as i64 - g.pad as i64;
                                let ix = (ox * g.stride + kx) as i64 - g.pad as i64;
                                if iy < 0 || ix < 0 || iy >= g.in_h as i64 || ix >= g.in_w as i64 {
                                    continue;
                                }
                                acc += w[((co * g.in_c + ci) * g.kernel + ky) * g.kernel + kx]
                                    * x[(ci * g.in_h + iy as usize) * g.in_w + ix as usize];
                            }
                        }
                    }
                    out[(co * g.out_h + oy) * g.out_w + ox] = acc;
                }
            }
        }
        out
    }

    fn seq(n: usize, a: f64, b: f64) -> Vec<f64> {
        (0..n).map(|i| (i as f64 * a + b).sin() * 1.3).collect()
    }

    #[test]
    fn geometry() {
        let g = ConvGeom::new(1, 64, 64, 16, 3, 2, 1).unwrap();
        assert_eq!((g.out_h, g.out_w), (32, 32));
        let g = ConvGeom::new(16, 32, 32, 32, 3, 2, 1).unwrap();
        assert_eq!((g.out_h, g.out_w), (16, 16));
        let g = ConvGeom::new(1, 7, 5, 2, 3, 2, 1).unwrap();
        assert_eq!((g.out_h, g.out_w), (4, 3));
        assert!(ConvGeom::new(1, 1, 1, 1, 5, 1, 0).is_none());
    }

    #[test]
    fn forward_matches_naive() {
        for &(in_c, h, w, out_c, s, p) in &[(1, 7, 5, 2, 2, 1), (3, 8, 8, 4, 1, 1), (2, 9, 6, 3, 2, 0)] {
            let g = ConvGeom::new(in_c, h, w, out_c, 3, s, p).unwrap();
            let x = seq(g.in_len(), 0.37, 0.1);
            let wt = seq(g.weight_len(), 0.91, 0.4);
            let b = seq(out_c, 1.7, 0.2);
            let mut cols = Vec::new();
            im2col(&g, &x, &mut cols);
            let mut out = Vec::new();
            conv_forward(&g, &cols, &wt, &b, &mut out);
            for (a, e) in out.iter().zip(naive(&g, &x, &wt, &b)) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <dout, conv(x)> is linear in x and w; check dx and dw via the adjoint identity
        let g = ConvGeom::new(2, 7, 6, 3, 3, 2, 1).unwrap();
        let x = seq(g.in_len(), 0.37, 0.1);
        let wt = seq(g.weight_len(), 0.91, 0.4);
        let zero_b = vec![0.0; 3];
        let dout = seq(g.out_len(), 0.23, 0.7);
        let mut cols = Vec::new();
        im2col(&g, &x, &mut cols);
        let mut dw = vec![0.0; g.weight_len()];
        let mut db = vec![0.0; 3];
        let mut dx = vec![0.0; g.in_len()];
        conv_backward(&g, &cols, &wt, &dout, &mut dw, &mut db, Some(&mut dx));

        let y = naive(&g, &x, &wt, &zero_b);
        let inner: f64 = y.iter().zip(&dout).map(|(a, b)| a * b).sum();
        let via_dx: f64 = dx.iter().zip(&x).map(|(a, b)| a * b).sum();
        let via_dw: f64 = dw.iter().zip(&wt).map(|(a, b)| a * b).sum();
        assert!((inner - via_dx).abs() < 1e-10);
        assert!((inner - via_dw).abs() < 1e-10);
        let sums: Vec<f64> = dout.chunks(g.out_plane()).map(|c| c.iter().sum()).collect();
        assert_eq!(db, sums);
    }
}
