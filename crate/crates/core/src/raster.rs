//! Single-channel float rasters, bilinear sampling and perspective warping.

use std::path::Path;

use crate::binio::{read_all, write_atomic, Writer};
use crate::error::{Error, Result};
use crate::homography::{apply_homography, invert, HomographyMatrix};

const RSTR_MAGIC: &[u8; 4] = b"RSTR";
const RSTR_VERSION: u32 = 1;
const RSTR_HEADER_LEN: usize = 16;

/// Row-major grayscale image with nominal intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

/// A real-valued pixel location `(u, v)`: `u` runs along columns, `v` along rows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelPoint {
    pub u: f64,
    pub v: f64,
}

impl PixelPoint {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }
}

impl Raster {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::ShapeMismatch(format!(
                "raster dimensions must be positive, got {width}x{height}"
            )));
        }
        if data.len() != width * height {
            return Err(Error::SizeMismatch {
                expected: width * height,
                actual: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::ShapeMismatch("raster contains non-finite values".into()));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        assert!(width > 0 && height > 0 && value.is_finite());
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    /// Builds a raster from a per-pixel function of `(column, row)`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::new(width, height, data).expect("from_fn produced an invalid raster")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// Copies the `w`×`h` window whose top-left pixel is `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Raster> {
        if x0 + w > self.width || y0 + h > self.height || w == 0 || h == 0 {
            return Err(Error::ShapeMismatch(format!(
                "crop {w}x{h}+{x0}+{y0} outside {}x{} raster",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(w * h);
        for y in y0..y0 + h {
            let row = y * self.width;
            data.extend_from_slice(&self.data[row + x0..row + x0 + w]);
        }
        Ok(Raster {
            width: w,
            height: h,
            data,
        })
    }

    #[inline]
    fn get_or_zero(&self, x: i64, y: i64) -> f32 {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            0.0
        } else {
            self.data[y as usize * self.width + x as usize]
        }
    }
}

/// Bilinear interpolation with zero padding; points outside
/// `[0, width-1] x [0, height-1]` sample to 0.
pub fn sample_bilinear(img: &Raster, p: PixelPoint) -> f32 {
    let max_u = (img.width - 1) as f64;
    let max_v = (img.height - 1) as f64;
    if !(p.u >= 0.0 && p.v >= 0.0 && p.u <= max_u && p.v <= max_v) {
        return 0.0;
    }
    let x0 = p.u.floor();
    let y0 = p.v.floor();
    let fx = (p.u - x0) as f32;
    let fy = (p.v - y0) as f32;
    let (x0, y0) = (x0 as i64, y0 as i64);

    let p00 = img.get_or_zero(x0, y0);
    let p10 = img.get_or_zero(x0 + 1, y0);
    let p01 = img.get_or_zero(x0, y0 + 1);
    let p11 = img.get_or_zero(x0 + 1, y0 + 1);

    let top = p00 + fx * (p10 - p00);
    let bottom = p01 + fx * (p11 - p01);
    top + fy * (bottom - top)
}

/// Warps `img` by `h` and crops the result to the source frame.
///
/// Every output pixel `(u, v)` is sampled from the source at `H^-1 (u, v)`.
pub fn warp_and_crop(img: &Raster, h: &HomographyMatrix) -> Result<Raster> {
    let inv = invert(h)?;
    let mut data = Vec::with_capacity(img.width * img.height);
    for v in 0..img.height {
        for u in 0..img.width {
            let value = match apply_homography(&inv, PixelPoint::new(u as f64, v as f64)) {
                Ok(src) => sample_bilinear(img, src),
                Err(_) => 0.0,
            };
            data.push(value);
        }
    }
    Ok(Raster {
        width: img.width,
        height: img.height,
        data,
    })
}

/// Writes the native `.rstr` container (16-byte header, then little-endian f32 pixels).
pub fn write_raster(img: &Raster, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_rstr(img))
}

pub fn encode_rstr(img: &Raster) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(RSTR_MAGIC);
    w.u32(RSTR_VERSION);
    w.u32(img.width as u32);
    w.u32(img.height as u32);
    w.f32_slice(&img.data);
    w.buf
}

/// Reads a raster, dispatching on the file signature: `.rstr` or binary PGM (P5).
pub fn read_raster(path: impl AsRef<Path>) -> Result<Raster> {
    let bytes = read_all(path.as_ref())?;
    if bytes.starts_with(b"P5") {
        decode_pgm(&bytes)
    } else {
        decode_rstr(&bytes)
    }
}

pub fn decode_rstr(bytes: &[u8]) -> Result<Raster> {
    if bytes.len() < RSTR_HEADER_LEN {
        return Err(Error::MalformedHeader(format!(
            "raster header needs {RSTR_HEADER_LEN} bytes, file has {}",
            bytes.len()
        )));
    }
    if &bytes[0..4] != RSTR_MAGIC {
        return Err(Error::MalformedHeader("missing RSTR magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != RSTR_VERSION {
        return Err(Error::MalformedHeader(format!("unsupported raster version {version}")));
    }
    let (width, height) = (word(8) as usize, word(12) as usize);
    if width == 0 || height == 0 {
        return Err(Error::MalformedHeader(format!("zero raster dimension {width}x{height}")));
    }
    let payload = &bytes[RSTR_HEADER_LEN..];
    let expected = width * height * 4;
    if payload.len() != expected {
        return Err(Error::SizeMismatch {
            expected,
            actual: payload.len(),
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Raster::new(width, height, data)
}

/// Binary PGM with maxval 255; intensities are scaled by 1/255.
pub fn decode_pgm(bytes: &[u8]) -> Result<Raster> {
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::MalformedHeader("PGM header field missing".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| Error::MalformedHeader("PGM header field out of range".into()))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::MalformedHeader(format!("PGM maxval {maxval} unsupported")));
    }
    if width == 0 || height == 0 {
        return Err(Error::MalformedHeader("zero PGM dimension".into()));
    }
    // exactly one whitespace byte separates the header from the pixels
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(Error::MalformedHeader("PGM header not terminated".into()));
    }
    let payload = &bytes[pos + 1..];
    if payload.len() != width * height {
        return Err(Error::SizeMismatch {
            expected: width * height,
            actual: payload.len(),
        });
    }
    let data = payload.iter().map(|&b| b as f32 / 255.0).collect();
    Raster::new(width, height, data)
}

/// 8-bit PGM export for eyeballing results; values are clamped to `[0, 1]`.
pub fn encode_pgm(img: &Raster) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize) -> Raster {
        Raster::from_fn(w, h, |x, y| (x as f32 * 0.1 + y as f32 * 0.03) % 1.0)
    }

    #[test]
    fn bilinear_midpoint() {
        let img = Raster::new(2, 2, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        assert_eq!(sample_bilinear(&img, PixelPoint::new(0.5, 0.5)), 0.5);
    }

    #[test]
    fn bilinear_hits_nodes_exactly() {
        let img = ramp(7, 5);
        for y in 0..5 {
            for x in 0..7 {
                let s = sample_bilinear(&img, PixelPoint::new(x as f64, y as f64));
                assert_eq!(s, img.get(x, y));
            }
        }
    }

    #[test]
    fn bilinear_zero_outside() {
        let img = Raster::filled(4, 4, 0.7);
        assert_eq!(sample_bilinear(&img, PixelPoint::new(-10.0, -10.0)), 0.0);
        assert_eq!(sample_bilinear(&img, PixelPoint::new(3.0001, 1.0)), 0.0);
        assert_eq!(sample_bilinear(&img, PixelPoint::new(f64::NAN, 1.0)), 0.0);
    }

    #[test]
    fn bilinear_lipschitz() {
        let img = ramp(9, 9);
        let mut lip = 0.0f32;
        for y in 0..9 {
            for x in 0..9 {
                if x + 1 < 9 {
                    lip = lip.max((img.get(x + 1, y) - img.get(x, y)).abs());
                }
                if y + 1 < 9 {
                    lip = lip.max((img.get(x, y + 1) - img.get(x, y)).abs());
                }
            }
        }
        let mut t = 0.0;
        while t < 7.5 {
            let a = sample_bilinear(&img, PixelPoint::new(t, 0.37 * t));
            let d = 0.013;
            let b = sample_bilinear(&img, PixelPoint::new(t + d, 0.37 * t));
            assert!((a - b).abs() <= lip * d as f32 + 1e-6);
            t += 0.05;
        }
    }

    #[test]
    fn identity_warp_is_bit_exact() {
        let img = ramp(16, 11);
        let out = warp_and_crop(&img, &HomographyMatrix::identity()).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn translation_warp_matches_brute_force() {
        let img = Raster::from_fn(8, 8, |x, y| (x * 8 + y) as f32 / 64.0);
        let h = HomographyMatrix::from_rows([[1.0, 0.0, 2.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
            .unwrap();
        let out = warp_and_crop(&img, &h).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let expected = if x >= 2 { img.get(x - 2, y) } else { 0.0 };
                assert_eq!(out.get(x, y), expected, "({x},{y})");
            }
        }
    }

    #[test]
    fn constant_image_survives_inner_warp() {
        let img = Raster::filled(32, 32, 0.4);
        // mild zoom-in keeps every sample inside the source frame
        let h = HomographyMatrix::from_rows([[1.1, 0.02, -1.5], [0.01, 1.08, -1.2], [0.0, 0.0, 1.0]])
            .unwrap();
        let out = warp_and_crop(&img, &h).unwrap();
        for v in out.data() {
            assert!((v - 0.4).abs() < 1e-6);
        }
    }

    #[test]
    fn singular_warp_rejected() {
        let img = Raster::filled(4, 4, 0.0);
        let h = HomographyMatrix::from_rows([[1.0, 2.0, 0.0], [2.0, 4.0, 0.0], [0.0, 0.0, 1.0]]);
        match h {
            Err(Error::SingularHomography) => {}
            Ok(h) => assert!(matches!(warp_and_crop(&img, &h), Err(Error::SingularHomography))),
            Err(e) => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn rstr_round_trip_bit_exact() {
        let img = Raster::new(3, 2, vec![0.0, -0.0, 1.5e-40, 1.0, 0.333_333_34, 7.0]).unwrap();
        let back = decode_rstr(&encode_rstr(&img)).unwrap();
        let bits = |r: &Raster| r.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&img));
        assert_eq!((back.width(), back.height()), (3, 2));
    }

    #[test]
    fn rstr_errors() {
        let bytes = encode_rstr(&ramp(4, 4));
        assert!(matches!(decode_rstr(&bytes[..10]), Err(Error::MalformedHeader(_))));
        assert!(matches!(
            decode_rstr(&bytes[..bytes.len() - 3]),
            Err(Error::SizeMismatch { .. })
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_rstr(&bad), Err(Error::MalformedHeader(_))));
    }

    #[test]
    fn pgm_scaling() {
        let mut bytes = b"P5\n# comment\n3 1\n255\n".to_vec();
        bytes.extend([0u8, 255, 51]);
        let img = decode_pgm(&bytes).unwrap();
        assert_eq!(img.data(), &[0.0, 1.0, 0.2]);
        let reencoded = decode_pgm(&encode_pgm(&img)).unwrap();
        assert_eq!(reencoded, img);
        assert!(matches!(decode_pgm(&bytes[..bytes.len() - 1]), Err(Error::SizeMismatch { .. })));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.rstr");
        let img = ramp(5, 6);
        write_raster(&img, &path).unwrap();
        assert_eq!(read_raster(&path).unwrap(), img);
        assert!(matches!(read_raster(dir.path().join("missing.rstr")), Err(Error::Io(_))));
    }
}
