//! `SARW` parameter checkpoints.
//!
//! Layout (little-endian): magic `SARW`, u32 version, u32 D, architecture
//! block, then every tensor as f32 in declaration order. The architecture
//! block is u32 input width, u32 input height, u32 kernel, u32 stride,
//! u32 padding, f64 GeM exponent, u32 layer count, then one u32 channel
//! count per conv layer.

use std::path::Path;

use super::{ArchConfig, ParamSet};
use crate::binio::{read_all, write_atomic, Reader, Writer};
use crate::error::{Error, Result};
use crate::real::Real;

const MAGIC: &[u8; 4] = b"SARW";
const VERSION: u32 = 1;

pub(crate) fn write_arch(w: &mut Writer, arch: &ArchConfig) {
    w.u32(arch.dim as u32);
    w.u32(arch.input_width as u32);
    w.u32(arch.input_height as u32);
    w.u32(arch.kernel as u32);
    w.u32(arch.stride as u32);
    w.u32(arch.padding as u32);
    w.f64(arch.gem_p);
    w.u32(arch.conv_channels.len() as u32);
    for &c in &arch.conv_channels {
        w.u32(c as u32);
    }
}

pub(crate) fn read_arch(r: &mut Reader<'_>) -> Result<ArchConfig> {
    let dim = r.u32()? as usize;
    let input_width = r.u32()? as usize;
    let input_height = r.u32()? as usize;
    let kernel = r.u32()? as usize;
    let stride = r.u32()? as usize;
    let padding = r.u32()? as usize;
    let gem_p = r.f64()?;
    let n = r.u32()? as usize;
    if n > 64 {
        return Err(Error::MalformedFile(format!("implausible layer count {n}")));
    }
    let conv_channels = (0..n).map(|_| r.u32().map(|c| c as usize)).collect::<Result<_>>()?;
    let arch = ArchConfig {
        input_width,
        input_height,
        conv_channels,
        kernel,
        stride,
        padding,
        dim,
        gem_p,
    };
    arch.layers()
        .map_err(|e| Error::MalformedFile(format!("invalid architecture block: {e}")))?;
    Ok(arch)
}

pub(crate) fn write_tensors<T: Real>(w: &mut Writer, params: &ParamSet<T>) {
    for t in params.tensors() {
        for v in t {
            w.f32(v.to_f32().unwrap_or(f32::NAN));
        }
    }
}

pub(crate) fn read_tensors<T: Real>(r: &mut Reader<'_>, arch: &ArchConfig) -> Result<ParamSet<T>> {
    let shell = ParamSet::<T>::zeros(arch)?;
    let tensors = shell
        .tensors()
        .iter()
        .map(|t| {
            r.f32_vec(t.len())
                .map(|v| v.into_iter().map(|x| T::of(x as f64)).collect())
        })
        .collect::<Result<Vec<Vec<T>>>>()?;
    ParamSet::from_parts(arch.clone(), tensors)
}

pub fn encode_checkpoint<T: Real>(params: &ParamSet<T>) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(MAGIC);
    w.u32(VERSION);
    write_arch(&mut w, params.arch());
    write_tensors(&mut w, params);
    w.buf
}

pub fn decode_checkpoint<T: Real>(bytes: &[u8]) -> Result<ParamSet<T>> {
    let mut r = Reader::new(bytes, "checkpoint");
    r.magic(MAGIC)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::VersionMismatch {
            expected: VERSION,
            found: version,
        });
    }
    let arch = read_arch(&mut r)?;
    let params = read_tensors(&mut r, &arch)?;
    r.finish()?;
    if !params.is_finite() {
        return Err(Error::MalformedFile("checkpoint holds non-finite values".into()));
    }
    Ok(params)
}

pub fn save_checkpoint<T: Real>(params: &ParamSet<T>, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_checkpoint(params))
}

pub fn load_checkpoint<T: Real>(path: impl AsRef<Path>) -> Result<ParamSet<T>> {
    decode_checkpoint(&read_all(path.as_ref())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = ParamSet::<f32>::init_he(&ArchConfig::tiny(), &mut rng).unwrap();
        let bytes = encode_checkpoint(&p);
        let q: ParamSet<f32> = decode_checkpoint(&bytes).unwrap();
        assert_eq!(q.arch(), p.arch());
        for (a, b) in p.tensors().iter().flatten().zip(q.tensors().iter().flatten()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(encode_checkpoint(&q), bytes);
    }

    #[test]
    fn truncation_and_version() {
        let p = ParamSet::<f32>::zeros(&ArchConfig::tiny()).unwrap();
        let bytes = encode_checkpoint(&p);
        for cut in [3, 10, 40, bytes.len() - 1] {
            assert!(matches!(
                decode_checkpoint::<f32>(&bytes[..cut]),
                Err(Error::MalformedFile(_))
            ));
        }
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(
            decode_checkpoint::<f32>(&v2),
            Err(Error::VersionMismatch { found: 2, .. })
        ));
    }
}
