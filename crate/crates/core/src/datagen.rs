//! Synthetic SAR-like scenes and geo-referenced patch splits.
//!
//! A scene is a smooth structure field (three octaves of value noise)
//! multiplied by unit-mean exponential speckle and clamped to `[0, 1]`.
//! Key patches tile the scene on a regular grid; each query is a key
//! location shifted by a random offset whose size sets the difficulty.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::binio::write_atomic;
use crate::error::{Error, Result};
use crate::index::GeoFootprint;
use crate::raster::{read_raster, write_raster, Raster};

/// Shape of the structure field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneParams {
    /// Lattice spacing of the coarsest noise octave, in pixels.
    pub base_cell: usize,
    pub octaves: usize,
    /// Amplitude ratio between successive octaves.
    pub persistence: f64,
    /// Mean intensity before speckle.
    pub gain: f64,
    /// Rescale the summed octaves to span exactly `[0, 1]`.
    pub stretch: bool,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            base_cell: 64,
            octaves: 3,
            persistence: 0.5,
            gain: 0.5,
            stretch: true,
        }
    }
}

pub const DEFAULT_ORIGIN: (f64, f64) = (1000.0, 1000.0);
pub const DEFAULT_SCALE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub name: String,
    pub raster: Raster,
    /// Geographic position of pixel (0, 0).
    pub origin: (f64, f64),
    /// Geographic units per pixel; geographic y grows with the row index.
    pub scale: f64,
}

/// One draw of unit-mean exponential intensity speckle.
pub fn speckle_factor<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    Exp1.sample(rng)
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Sum of value-noise octaves with halving cell size and amplitude,
/// normalized to `[0, 1]`.
fn structure_field(rng: &mut ChaCha8Rng, width: usize, height: usize, params: &SceneParams) -> Vec<f64> {
    let mut field = vec![0.0; width * height];
    let mut amp = 1.0;
    let mut total = 0.0;
    for octave in 0..params.octaves {
        let cell = (params.base_cell >> octave).max(1);
        let lw = width / cell + 2;
        let lh = height / cell + 2;
        let lattice: Vec<f64> = (0..lw * lh).map(|_| rng.random::<f64>()).collect();
        for y in 0..height {
            let fy = y as f64 / cell as f64;
            let (iy, ty) = (fy as usize, smoothstep(fy.fract()));
            for x in 0..width {
                let fx = x as f64 / cell as f64;
                let (ix, tx) = (fx as usize, smoothstep(fx.fract()));
                let at = |i: usize, j: usize| lattice[j * lw + i];
                let top = at(ix, iy) * (1.0 - tx) + at(ix + 1, iy) * tx;
                let bottom = at(ix, iy + 1) * (1.0 - tx) + at(ix + 1, iy + 1) * tx;
                field[y * width + x] += amp * (top * (1.0 - ty) + bottom * ty);
            }
        }
        total += amp;
        amp *= params.persistence;
    }
    let (lo, hi) = if params.stretch {
        field.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)))
    } else {
        (0.0, total)
    };
    let span = if hi > lo { hi - lo } else { 1.0 };
    field.iter_mut().for_each(|v| *v = (*v - lo) / span);
    field
}

/// One acquisition of the scene with seed `seed`. Pass 0 is the scene
/// itself; other passes share the structure field but draw independent
/// speckle.
pub fn generate_pass(seed: u64, width: usize, height: usize, pass: u64, params: &SceneParams) -> Result<Scene> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidConfig(format!("scene size {width}x{height}")));
    }
    if params.octaves == 0 || params.base_cell == 0 || !(params.gain > 0.0) {
        return Err(Error::InvalidConfig(format!("bad scene parameters {params:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let structure = structure_field(&mut rng, width, height, params);
    let mut speckle = ChaCha8Rng::seed_from_u64(seed);
    speckle.set_stream(pass + 1);
    let data = structure
        .iter()
        .map(|s| (2.0 * params.gain * s * speckle_factor(&mut speckle)).clamp(0.0, 1.0) as f32)
        .collect();
    Ok(Scene {
        name: format!("scene{seed}"),
        raster: Raster::new(width, height, data)?,
        origin: DEFAULT_ORIGIN,
        scale: DEFAULT_SCALE,
    })
}

pub fn generate_scene(seed: u64, width: usize, height: usize) -> Result<Scene> {
    generate_pass(seed, width, height, 0, &SceneParams::default())
}

/// Geometry of the key grid and the query jitter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    pub patch_size: usize,
    pub key_stride: usize,
    pub n_queries: usize,
    /// Per-axis query offset magnitude range, inclusive, in pixels.
    pub offset_min: usize,
    pub offset_max: usize,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self::easy(0)
    }
}

impl SplitSpec {
    /// Offsets up to a quarter patch: every query overlaps a key heavily.
    pub fn easy(seed: u64) -> Self {
        Self {
            patch_size: 64,
            key_stride: 32,
            n_queries: 100,
            offset_min: 0,
            offset_max: 16,
            seed,
        }
    }

    /// Offsets from half a patch up to one pixel short of a full patch.
    pub fn hard(seed: u64) -> Self {
        Self {
            offset_min: 32,
            offset_max: 63,
            ..Self::easy(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.key_stride == 0 {
            return Err(Error::InvalidConfig("patch size and stride must be positive".into()));
        }
        if self.offset_min > self.offset_max || self.offset_max >= self.patch_size {
            return Err(Error::InvalidConfig(format!(
                "query offsets {}..={} must be ordered and below the patch size {}",
                self.offset_min, self.offset_max, self.patch_size
            )));
        }
        Ok(())
    }

    /// Uniform over the integers `d` with `offset_min <= |d| <= offset_max`.
    fn draw_offset<R: Rng + ?Sized>(&self, rng: &mut R) -> i64 {
        let (lo, hi) = (self.offset_min as i64, self.offset_max as i64);
        if lo == 0 {
            rng.random_range(-hi..=hi)
        } else {
            let k = rng.random_range(0..2 * (hi - lo + 1));
            if k <= hi - lo {
                lo + k
            } else {
                -(lo + k - (hi - lo + 1))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Key,
    Query,
}

/// A patch location within a scene.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSite {
    pub id: String,
    pub scene: String,
    pub role: Role,
    pub x: usize,
    pub y: usize,
    pub size: usize,
    pub footprint: GeoFootprint,
}

impl PatchSite {
    pub fn crop(&self, raster: &Raster) -> Result<Raster> {
        raster.crop(self.x, self.y, self.size, self.size)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub keys: Vec<PatchSite>,
    pub queries: Vec<PatchSite>,
}

pub fn footprint(scene: &Scene, x: usize, y: usize, size: usize) -> GeoFootprint {
    let (ox, oy) = scene.origin;
    GeoFootprint {
        min_x: ox + x as f64 * scene.scale,
        min_y: oy + y as f64 * scene.scale,
        max_x: ox + (x + size) as f64 * scene.scale,
        max_y: oy + (y + size) as f64 * scene.scale,
    }
}

/// Moves `base + d` into `[0, limit]`, trying `base - d` first.
fn place(base: usize, d: i64, limit: usize) -> usize {
    let inside = |p: i64| (0..=limit as i64).contains(&p);
    let (plus, minus) = (base as i64 + d, base as i64 - d);
    if inside(plus) {
        plus as usize
    } else if inside(minus) {
        minus as usize
    } else {
        plus.clamp(0, limit as i64) as usize
    }
}

/// Key grid in row-major order and `n_queries` jittered queries.
pub fn extract_patches(scene: &Scene, spec: &SplitSpec) -> Result<Dataset> {
    spec.validate()?;
    let (w, h) = (scene.raster.width(), scene.raster.height());
    let p = spec.patch_size;
    if p > w || p > h {
        return Err(Error::SpecTooLarge(format!("{p}px patches in a {w}x{h} scene")));
    }
    let site = |id: String, role, x, y| PatchSite {
        id,
        scene: scene.name.clone(),
        role,
        x,
        y,
        size: p,
        footprint: footprint(scene, x, y, p),
    };
    let mut keys = Vec::new();
    for y in (0..=h - p).step_by(spec.key_stride) {
        for x in (0..=w - p).step_by(spec.key_stride) {
            keys.push(site(format!("{}_x{x:04}_y{y:04}", scene.name), Role::Key, x, y));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let queries = (0..spec.n_queries)
        .map(|i| {
            let base = &keys[rng.random_range(0..keys.len())];
            let x = place(base.x, spec.draw_offset(&mut rng), w - p);
            let y = place(base.y, spec.draw_offset(&mut rng), h - p);
            site(format!("q{i:03}_{}_x{x:04}_y{y:04}", scene.name), Role::Query, x, y)
        })
        .collect();
    Ok(Dataset { keys, queries })
}

/// One line of the dataset manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub scene: String,
    pub role: Role,
    pub pixel_origin: [usize; 2],
    pub size: usize,
    pub footprint: GeoFootprint,
    /// Relative to the manifest's directory.
    pub file: PathBuf,
}

impl ManifestEntry {
    pub fn load(&self, base: &Path) -> Result<Raster> {
        read_raster(base.join(&self.file))
    }
}

pub const MANIFEST_NAME: &str = "manifest.json";

/// Writes every patch as `patches/<id>.rstr` under `dir` plus `manifest.json`
/// listing keys then queries.
pub fn write_dataset(scene: &Scene, data: &Dataset, dir: &Path) -> Result<Vec<ManifestEntry>> {
    fs::create_dir_all(dir.join("patches"))?;
    let mut entries = Vec::with_capacity(data.keys.len() + data.queries.len());
    for site in data.keys.iter().chain(&data.queries) {
        let file = PathBuf::from("patches").join(format!("{}.rstr", site.id));
        write_raster(&site.crop(&scene.raster)?, dir.join(&file))?;
        entries.push(ManifestEntry {
            id: site.id.clone(),
            scene: site.scene.clone(),
            role: site.role,
            pixel_origin: [site.x, site.y],
            size: site.size,
            footprint: site.footprint,
            file,
        });
    }
    let json = serde_json::to_string_pretty(&entries).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    write_atomic(&dir.join(MANIFEST_NAME), json.as_bytes())?;
    Ok(entries)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path.as_ref())?;
    serde_json::from_str(&text).map_err(|e| Error::MalformedFile(format!("manifest: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::is_relevant;

    #[test]
    fn scenes_are_deterministic_and_clamped() {
        let a = generate_scene(7, 128, 96).unwrap();
        let b = generate_scene(7, 128, 96).unwrap();
        assert_eq!(a, b);
        assert!(a.raster.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_ne!(a, generate_scene(8, 128, 96).unwrap());
    }

    #[test]
    fn passes_share_structure_not_speckle() {
        let a = generate_pass(3, 64, 64, 0, &SceneParams::default()).unwrap();
        let b = generate_pass(3, 64, 64, 1, &SceneParams::default()).unwrap();
        assert_ne!(a.raster, b.raster);
        let mean = |r: &Raster| r.data().iter().map(|v| *v as f64).sum::<f64>() / r.data().len() as f64;
        assert!((mean(&a.raster) - mean(&b.raster)).abs() < 0.02);
    }

    #[test]
    fn speckle_has_unit_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 1_000_000;
        let mean = (0..n).map(|_| speckle_factor(&mut rng)).sum::<f64>() / n as f64;
        assert!((0.99..=1.01).contains(&mean), "{mean}");
    }

    #[test]
    fn key_grid_count() {
        // ((1024 - 64) / 32 + 1)^2
        let scene = Scene {
            name: "s".into(),
            raster: Raster::filled(1024, 1024, 0.5),
            origin: (0.0, 0.0),
            scale: 1.0,
        };
        let d = extract_patches(&scene, &SplitSpec::easy(0)).unwrap();
        assert_eq!(d.keys.len(), 961);
        assert_eq!(d.queries.len(), 100);
        assert_eq!((d.keys[1].x, d.keys[1].y), (32, 0));
        assert_eq!((d.keys[31].x, d.keys[31].y), (0, 32));
    }

    #[test]
    fn footprints_map_back_to_pixels() {
        let scene = generate_scene(1, 256, 200).unwrap();
        let d = extract_patches(&scene, &SplitSpec::hard(4)).unwrap();
        for s in d.keys.iter().chain(&d.queries) {
            let f = s.footprint;
            assert_eq!((f.min_x - scene.origin.0) / scene.scale, s.x as f64);
            assert_eq!((f.min_y - scene.origin.1) / scene.scale, s.y as f64);
            assert_eq!((f.max_x - f.min_x) / scene.scale, s.size as f64);
            assert_eq!((f.max_y - f.min_y) / scene.scale, s.size as f64);
            assert!(s.x + s.size <= 256 && s.y + s.size <= 200);
        }
    }

    #[test]
    fn every_query_has_a_relevant_key() {
        let scene = generate_scene(2, 300, 300).unwrap();
        for spec in [SplitSpec::easy(1), SplitSpec::hard(1)] {
            let d = extract_patches(&scene, &spec).unwrap();
            for q in &d.queries {
                assert!(d.keys.iter().any(|k| is_relevant(&q.footprint, &k.footprint)));
            }
        }
    }

    #[test]
    fn zero_offset_reproduces_key_footprints() {
        let scene = generate_scene(2, 256, 256).unwrap();
        let spec = SplitSpec { key_stride: 64, offset_max: 0, ..SplitSpec::easy(3) };
        let d = extract_patches(&scene, &spec).unwrap();
        for q in &d.queries {
            assert!(d.keys.iter().any(|k| k.footprint == q.footprint));
            // non-overlapping tiling: exactly one relevant key
            assert_eq!(d.keys.iter().filter(|k| is_relevant(&q.footprint, &k.footprint)).count(), 1);
        }
    }

    #[test]
    fn offsets_respect_range() {
        let spec = SplitSpec::hard(0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let draws: Vec<i64> = (0..4000).map(|_| spec.draw_offset(&mut rng)).collect();
        assert!(draws.iter().all(|d| (32..=63).contains(&d.abs())));
        assert!(draws.iter().any(|d| *d < 0) && draws.iter().any(|d| *d > 0));
        let easy = SplitSpec::easy(0);
        let draws: Vec<i64> = (0..4000).map(|_| easy.draw_offset(&mut rng)).collect();
        assert!(draws.iter().all(|d| d.abs() <= 16));
        assert!(draws.contains(&-16) && draws.contains(&16) && draws.contains(&0));
    }

    #[test]
    fn bad_specs() {
        let scene = generate_scene(0, 50, 50).unwrap();
        assert!(matches!(extract_patches(&scene, &SplitSpec::easy(0)), Err(Error::SpecTooLarge(_))));
        let bad = SplitSpec { offset_max: 64, ..SplitSpec::easy(0) };
        assert!(matches!(bad.validate(), Err(Error::InvalidConfig(_))));
        let bad = SplitSpec { key_stride: 0, ..SplitSpec::easy(0) };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn dataset_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let scene = generate_scene(9, 160, 160).unwrap();
        let spec = SplitSpec { n_queries: 5, ..SplitSpec::easy(2) };
        let d = extract_patches(&scene, &spec).unwrap();
        let entries = write_dataset(&scene, &d, dir.path()).unwrap();
        let back = read_manifest(dir.path().join(MANIFEST_NAME)).unwrap();
        assert_eq!(back, entries);
        assert_eq!(back.len(), d.keys.len() + 5);
        let q = &d.queries[0];
        let entry = back.iter().find(|e| e.id == q.id).unwrap();
        assert_eq!(entry.load(dir.path()).unwrap(), q.crop(&scene.raster).unwrap());
    }
}
