//! Image/mask pairs: loading, standardisation, augmentation, and a synthetic
//! infrared scene generator.
//!
//! On-disk layout of a dataset directory:
//!
//! ```text
//! <dir>/images/<id>.png   8-bit grayscale
//! <dir>/masks/<id>.png    8-bit, 0 or 255
//! <dir>/split.txt         one "<id> <train|test>" line per sample
//! ```

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::lca::GrayImage;
use crate::model::BinaryMask;
use crate::{Error, Result};

pub const STANDARDIZE_EPS: f64 = 1e-6;
/// Mask pixels strictly above this 8-bit value are foreground.
pub const MASK_THRESHOLD: u8 = 127;
pub const TRAIN_SIZE: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: GrayImage,
    pub mask: BinaryMask,
    pub id: String,
}

impl Sample {
    pub fn new(image: GrayImage, mask: BinaryMask, id: impl Into<String>) -> Result<Self> {
        let dims = (image.height(), image.width());
        if dims != mask.dim() {
            return Err(Error::Dimension(format!("image {dims:?} and mask {:?} differ", mask.dim())));
        }
        Ok(Sample { image, mask, id: id.into() })
    }

    pub fn dim(&self) -> (usize, usize) {
        self.mask.dim()
    }
}

fn read_luma(path: &Path) -> Result<Array2<u8>> {
    if !path.exists() {
        return Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "no such file")));
    }
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_owned(), source })?;
    let luma = img.to_luma8();
    let (w, h) = luma.dimensions();
    Ok(Array2::from_shape_vec((h as usize, w as usize), luma.into_raw()).expect("buffer matches dimensions"))
}

/// Writes an 8-bit grayscale PNG (format chosen from the extension).
pub fn save_gray8(path: &Path, pixels: &Array2<u8>) -> Result<()> {
    let (h, w) = pixels.dim();
    let buf = image::GrayImage::from_raw(w as u32, h as u32, pixels.iter().copied().collect())
        .expect("buffer matches dimensions");
    buf.save(path).map_err(|source| Error::Image { path: path.to_owned(), source })
}

/// Reads any decodable image as luminance on the 0–255 scale.
pub fn load_image(path: &Path) -> Result<GrayImage> {
    GrayImage::new(read_luma(path)?.mapv(f64::from))
}

/// Reads an image and its mask; intensities stay on the 0–255 scale.
pub fn load_sample(image_path: &Path, mask_path: &Path) -> Result<Sample> {
    let image = read_luma(image_path)?;
    let mask = read_luma(mask_path)?;
    if image.dim() != mask.dim() {
        return Err(Error::Dimension(format!(
            "{} is {:?} but {} is {:?}",
            image_path.display(),
            image.dim(),
            mask_path.display(),
            mask.dim()
        )));
    }
    let id = image_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Sample::new(
        GrayImage::new(image.mapv(f64::from))?,
        BinaryMask::new(mask.mapv(|v| (v > MASK_THRESHOLD) as u8))?,
        id,
    )
}

/// Writes `image` (rounded and clamped to 8 bits) and `mask` (0/255).
pub fn save_sample(sample: &Sample, image_path: &Path, mask_path: &Path) -> Result<()> {
    save_gray8(image_path, &sample.image.pixels().mapv(|v| v.round().clamp(0.0, 255.0) as u8))?;
    save_gray8(mask_path, &sample.mask.as_array().mapv(|v| v * 255))
}

/// `(x − mean) / max(std, ε)` with the population standard deviation.
pub fn standardize(image: &GrayImage) -> GrayImage {
    let px = image.pixels();
    let n = px.len() as f64;
    let mean = px.sum() / n;
    let var = px.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let scale = var.sqrt().max(STANDARDIZE_EPS);
    GrayImage::new(px.mapv(|v| (v - mean) / scale)).expect("finite input stays finite")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CropMode {
    Random,
    Center,
}

fn pad_edge(px: &Array2<f64>, top: usize, left: usize, h: usize, w: usize) -> Array2<f64> {
    let (ih, iw) = px.dim();
    Array2::from_shape_fn((h, w), |(r, c)| {
        let sr = r.saturating_sub(top).min(ih - 1);
        let sc = c.saturating_sub(left).min(iw - 1);
        px[[sr, sc]]
    })
}

/// Edge-replicates each axis up to at least `size` (split evenly between the
/// two sides), then crops `size × size` at a uniform random or central offset.
pub fn pad_crop<R: Rng + ?Sized>(sample: &Sample, size: usize, mode: CropMode, rng: &mut R) -> Sample {
    let (h, w) = sample.dim();
    let (ph, pw) = (h.max(size), w.max(size));
    let (top, left) = ((ph - h) / 2, (pw - w) / 2);
    let image = pad_edge(sample.image.pixels(), top, left, ph, pw);
    let mask_f = pad_edge(&sample.mask.as_array().mapv(f64::from), top, left, ph, pw);
    let (r0, c0) = match mode {
        CropMode::Random => (rng.random_range(0..=ph - size), rng.random_range(0..=pw - size)),
        CropMode::Center => ((ph - size) / 2, (pw - size) / 2),
    };
    let window = s![r0..r0 + size, c0..c0 + size];
    Sample {
        image: GrayImage::new(image.slice(window).to_owned()).expect("crop of a valid image"),
        mask: BinaryMask::new(mask_f.slice(window).mapv(|v| v as u8)).expect("crop of a valid mask"),
        id: sample.id.clone(),
    }
}

pub fn pad_crop_256<R: Rng + ?Sized>(sample: &Sample, mode: CropMode, rng: &mut R) -> Sample {
    pad_crop(sample, TRAIN_SIZE, mode, rng)
}

/// Mirrors image and mask together.
pub fn flip(sample: &Sample, horizontal: bool, vertical: bool) -> Sample {
    let flip2 = |a: &Array2<f64>| {
        let mut v = a.view();
        if horizontal {
            v.invert_axis(ndarray::Axis(1));
        }
        if vertical {
            v.invert_axis(ndarray::Axis(0));
        }
        v.to_owned()
    };
    let image = flip2(sample.image.pixels());
    let mask = flip2(&sample.mask.as_array().mapv(f64::from)).mapv(|v| v as u8);
    Sample {
        image: GrayImage::new(image).expect("flip of a valid image"),
        mask: BinaryMask::new(mask).expect("flip of a valid mask"),
        id: sample.id.clone(),
    }
}

/// Horizontal and vertical flips, each with probability 0.5.
pub fn random_flip<R: Rng + ?Sized>(sample: &Sample, rng: &mut R) -> Sample {
    let h = rng.random_bool(0.5);
    let v = rng.random_bool(0.5);
    flip(sample, h, v)
}

/// A Gaussian-profile target placed in a synthetic scene.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthTarget {
    pub row: f64,
    pub col: f64,
    pub amplitude: f64,
    pub sigma: f64,
}

impl SynthTarget {
    /// `amplitude · exp(−r² / 2σ²)`.
    pub fn intensity(&self, r: usize, c: usize) -> f64 {
        self.amplitude * (-self.r2(r, c) / (2.0 * self.sigma * self.sigma)).exp()
    }

    fn r2(&self, r: usize, c: usize) -> f64 {
        (r as f64 - self.row).powi(2) + (c as f64 - self.col).powi(2)
    }

    /// Mask rule: the target term alone reaches `amplitude · e⁻²`, i.e. `r ≤ 2σ`.
    pub fn covers(&self, r: usize, c: usize) -> bool {
        self.r2(r, c) <= 4.0 * self.sigma * self.sigma
    }
}

/// Parameters of the synthetic scene generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub height: usize,
    pub width: usize,
    pub min_targets: usize,
    pub max_targets: usize,
    pub amplitude: [f64; 2],
    pub sigma: [f64; 2],
    /// Mean background intensity.
    pub background: f64,
    /// Largest intensity change of the planar gradient across the image.
    pub gradient: f64,
    /// Amplitude of the smooth low-frequency noise field.
    pub smooth_noise: f64,
    /// Grid spacing (pixels) of the smooth noise field.
    pub noise_scale: usize,
    /// Standard deviation of independent per-pixel noise.
    pub pixel_noise: f64,
    /// Probability that a scene contains one bright clutter edge.
    pub clutter: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            height: 64,
            width: 64,
            min_targets: 1,
            max_targets: 2,
            amplitude: [40.0, 110.0],
            sigma: [0.5, 2.0],
            background: 80.0,
            gradient: 30.0,
            smooth_noise: 12.0,
            noise_scale: 16,
            pixel_noise: 2.0,
            clutter: 0.3,
            seed: 0,
        }
    }
}

const MAX_PLACEMENT_TRIES: usize = 1000;

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Synth(m));
        if self.height == 0 || self.width == 0 {
            return bad("image size must be positive".into());
        }
        if self.min_targets > self.max_targets || self.max_targets > 3 {
            return bad(format!("target count range {}..={} outside 0..=3", self.min_targets, self.max_targets));
        }
        let [a0, a1] = self.amplitude;
        if !(a0 > 0.0 && a0 <= a1 && a1.is_finite()) {
            return bad(format!("amplitude range {a0}..{a1} must be positive and ordered"));
        }
        let [s0, s1] = self.sigma;
        if !(0.5..=2.0).contains(&s0) || !(s0..=2.0).contains(&s1) {
            return bad(format!("sigma range {s0}..{s1} must lie within 0.5..2"));
        }
        if self.noise_scale == 0 || !(0.0..=1.0).contains(&self.clutter) {
            return bad("noise_scale must be positive and clutter a probability".into());
        }
        if self.pixel_noise < 0.0 || self.smooth_noise < 0.0 || self.gradient < 0.0 {
            return bad("noise and gradient magnitudes must be non-negative".into());
        }
        Ok(())
    }

    /// Same spec, seeded for sample `index` of a dataset with base seed `seed`.
    pub fn for_sample(&self, index: u64) -> SynthSpec {
        SynthSpec { seed: self.seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15), ..self.clone() }
    }
}

fn smooth_field(rng: &mut ChaCha8Rng, h: usize, w: usize, scale: usize, amplitude: f64) -> Array2<f64> {
    let (gh, gw) = (h / scale + 2, w / scale + 2);
    let grid = Array2::from_shape_simple_fn((gh, gw), || rng.random_range(-1.0..1.0));
    Array2::from_shape_fn((h, w), |(r, c)| {
        let (y, x) = (r as f64 / scale as f64, c as f64 / scale as f64);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        let top = grid[[y0, x0]] * (1.0 - fx) + grid[[y0, x0 + 1]] * fx;
        let bottom = grid[[y0 + 1, x0]] * (1.0 - fx) + grid[[y0 + 1, x0 + 1]] * fx;
        amplitude * (top * (1.0 - fy) + bottom * fy)
    })
}

/// Places targets at random, respecting the 3σ margin and keeping masks apart.
fn place_targets(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Result<Vec<SynthTarget>> {
    let count = rng.random_range(spec.min_targets..=spec.max_targets);
    let mut targets: Vec<SynthTarget> = Vec::with_capacity(count);
    for _ in 0..count {
        let sigma = rng.random_range(spec.sigma[0]..=spec.sigma[1]);
        let amplitude = rng.random_range(spec.amplitude[0]..=spec.amplitude[1]);
        let margin = (3.0 * sigma).ceil();
        let (hi_r, hi_c) = (spec.height as f64 - 1.0 - margin, spec.width as f64 - 1.0 - margin);
        if hi_r < margin || hi_c < margin {
            return Err(Error::Synth(format!(
                "a target with sigma {sigma:.2} does not fit a {}x{} image",
                spec.height, spec.width
            )));
        }
        let placed = (0..MAX_PLACEMENT_TRIES).find_map(|_| {
            let t = SynthTarget {
                row: rng.random_range(margin..=hi_r),
                col: rng.random_range(margin..=hi_c),
                amplitude,
                sigma,
            };
            let apart = targets.iter().all(|o| {
                let dist = ((t.row - o.row).powi(2) + (t.col - o.col).powi(2)).sqrt();
                dist > 2.0 * (t.sigma + o.sigma) + 2.0
            });
            apart.then_some(t)
        });
        targets.push(placed.ok_or_else(|| Error::Synth(format!("could not place {count} separated targets")))?);
    }
    Ok(targets)
}

/// Draws a scene and its targets from `spec.seed`.
pub fn synth_generate(spec: &SynthSpec) -> Result<Sample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let targets = place_targets(spec, &mut rng)?;
    let mut sample = synth_render(spec, &targets, &mut rng)?;
    sample.id = format!("synth_{:016x}", spec.seed);
    Ok(sample)
}

/// Renders a scene with the given targets; background randomness comes from `rng`.
pub fn synth_render(spec: &SynthSpec, targets: &[SynthTarget], rng: &mut ChaCha8Rng) -> Result<Sample> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let (gy, gx) = (angle.sin(), angle.cos());
    let span = (h.max(w) as f64).max(1.0);
    let mut px = smooth_field(rng, h, w, spec.noise_scale, spec.smooth_noise);
    for ((r, c), v) in px.indexed_iter_mut() {
        let t = (gy * (r as f64 - h as f64 / 2.0) + gx * (c as f64 - w as f64 / 2.0)) / span;
        *v += spec.background + spec.gradient * t;
    }
    if rng.random_bool(spec.clutter) {
        add_clutter_edge(&mut px, rng);
    }
    if spec.pixel_noise > 0.0 {
        let normal = Normal::new(0.0, spec.pixel_noise).expect("non-negative std");
        px.mapv_inplace(|v| v + normal.sample(rng));
    }
    for t in targets {
        for ((r, c), v) in px.indexed_iter_mut() {
            *v += t.intensity(r, c);
        }
    }
    let image = GrayImage::new(px.mapv(|v| v.round().clamp(0.0, 255.0)))?;
    let mask = BinaryMask::from_fn(h, w, |r, c| targets.iter().any(|t| t.covers(r, c)));
    Sample::new(image, mask, "synth")
}

/// A long straight bright ridge, unlike any small target.
fn add_clutter_edge(px: &mut Array2<f64>, rng: &mut ChaCha8Rng) {
    let (h, w) = px.dim();
    let angle = rng.random_range(0.0..std::f64::consts::PI);
    let (ny, nx) = (angle.cos(), -angle.sin());
    let (cy, cx) = (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64));
    let amplitude = rng.random_range(15.0..45.0);
    let width = rng.random_range(1.0..2.5);
    for ((r, c), v) in px.indexed_iter_mut() {
        let dist = (r as f64 - cy) * ny + (c as f64 - cx) * nx;
        *v += amplitude * (-(dist * dist) / (2.0 * width * width)).exp();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Subset {
    Train,
    Test,
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Subset::Train => "train",
            Subset::Test => "test",
        })
    }
}

impl FromStr for Subset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Subset::Train),
            "test" => Ok(Subset::Test),
            other => Err(Error::InvalidInput(format!("unknown subset {other:?}"))),
        }
    }
}

pub const SPLIT_FILE: &str = "split.txt";

/// Which ids belong to the training and test subsets.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SplitManifest {
    pub entries: Vec<(String, Subset)>,
}

impl SplitManifest {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (Some(id), Some(subset), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::InvalidInput(format!("split line {}: expected \"<id> <subset>\"", i + 1)));
            };
            entries.push((id.to_owned(), subset.parse()?));
        }
        let manifest = SplitManifest { entries };
        manifest.validate()?;
        Ok(manifest)
    }

    /// Each id appears exactly once, so the subsets are disjoint.
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (id, _) in &self.entries {
            if id.is_empty() || id.contains(char::is_whitespace) {
                return Err(Error::InvalidInput(format!("invalid sample id {id:?}")));
            }
            if !seen.insert(id.as_str()) {
                return Err(Error::InvalidInput(format!("sample id {id} listed twice")));
            }
        }
        Ok(())
    }

    pub fn ids(&self, subset: Subset) -> impl Iterator<Item = &str> {
        self.entries.iter().filter(move |(_, s)| *s == subset).map(|(id, _)| id.as_str())
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(id, s)| format!("{id} {s}\n")).collect()
    }
}

/// A dataset directory in the layout described at the top of this module.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: SplitManifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let split = root.join(SPLIT_FILE);
        let text = std::fs::read_to_string(&split).map_err(|e| Error::io(&split, e))?;
        let dataset = Dataset { root: root.to_owned(), manifest: SplitManifest::parse(&text)? };
        for (id, _) in &dataset.manifest.entries {
            let (img, mask) = dataset.paths(id);
            for p in [img, mask] {
                if !p.is_file() {
                    return Err(Error::io(&p, std::io::Error::new(std::io::ErrorKind::NotFound, "listed sample missing")));
                }
            }
        }
        Ok(dataset)
    }

    pub fn paths(&self, id: &str) -> (PathBuf, PathBuf) {
        sample_paths(&self.root, id)
    }

    pub fn load(&self, subset: Subset) -> Result<Vec<Sample>> {
        self.manifest
            .ids(subset)
            .map(|id| {
                let (img, mask) = self.paths(id);
                load_sample(&img, &mask)
            })
            .collect()
    }
}

pub fn sample_paths(root: &Path, id: &str) -> (PathBuf, PathBuf) {
    (root.join("images").join(format!("{id}.png")), root.join("masks").join(format!("{id}.png")))
}

/// Writes samples and their split manifest under `root`.
pub fn write_dataset(root: &Path, samples: &[(Sample, Subset)]) -> Result<SplitManifest> {
    for sub in ["images", "masks"] {
        let dir = root.join(sub);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let manifest = SplitManifest { entries: samples.iter().map(|(s, sub)| (s.id.clone(), *sub)).collect() };
    manifest.validate()?;
    for (sample, _) in samples {
        let (img, mask) = sample_paths(root, &sample.id);
        save_sample(sample, &img, &mask)?;
    }
    let split = root.join(SPLIT_FILE);
    std::fs::write(&split, manifest.to_text()).map_err(|e| Error::io(&split, e))?;
    Ok(manifest)
}

/// `n_train + n_test` synthetic samples; sample `i` is seeded from
/// `(spec.seed, i)` and named `s00000`, `s00001`, …
pub fn synth_dataset(spec: &SynthSpec, n_train: usize, n_test: usize) -> Result<Vec<(Sample, Subset)>> {
    (0..n_train + n_test)
        .map(|i| {
            let mut sample = synth_generate(&spec.for_sample(i as u64))?;
            sample.id = format!("s{i:05}");
            Ok((sample, if i < n_train { Subset::Train } else { Subset::Test }))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    fn grid_sample(h: usize, w: usize) -> Sample {
        let img = GrayImage::new(Array2::from_shape_fn((h, w), |(r, c)| (r * w + c) as f64)).unwrap();
        let mask = BinaryMask::from_fn(h, w, |r, c| (r * w + c) % 3 == 0);
        Sample::new(img, mask, "g").unwrap()
    }

    #[test]
    fn standardize_cases() {
        let z = standardize(&GrayImage::filled(3, 3, 7.0).unwrap());
        assert!(z.pixels().iter().all(|&v| v == 0.0));
        let two = standardize(&GrayImage::new(arr2(&[[0.0, 2.0]])).unwrap());
        assert_eq!(two.pixels(), &arr2(&[[-1.0, 1.0]]));
    }

    #[test]
    fn pad_crop_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = grid_sample(256, 256);
        assert_eq!(pad_crop_256(&s, CropMode::Random, &mut rng), s);
        let s = grid_sample(200, 300);
        let out = pad_crop_256(&s, CropMode::Random, &mut rng);
        assert_eq!(out.dim(), (256, 256));
        let c = pad_crop(&s, 256, CropMode::Center, &mut rng);
        // 28 replicated rows on top, 22 columns cropped from the left.
        assert_eq!(c.image.pixels()[[0, 0]], 22.0);
        assert_eq!(c.image.pixels()[[28, 0]], 22.0);
        assert_eq!(c.image.pixels()[[29, 0]], 322.0);
    }

    #[test]
    fn transforms_move_mask_with_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = grid_sample(20, 13);
        for _ in 0..10 {
            let out = random_flip(&pad_crop(&s, 24, CropMode::Random, &mut rng), &mut rng);
            for ((r, c), &v) in out.image.pixels().indexed_iter() {
                assert_eq!(out.mask.get(r, c), (v as usize) % 3 == 0);
            }
        }
    }

    #[test]
    fn double_flip_is_identity() {
        let s = grid_sample(5, 7);
        assert_eq!(flip(&flip(&s, true, false), true, false), s);
        assert_eq!(flip(&flip(&s, true, true), true, true), s);
        assert_ne!(flip(&s, false, true), s);
    }

    #[test]
    fn synth_basics() {
        let none = SynthSpec { min_targets: 0, max_targets: 0, ..SynthSpec::default() };
        assert_eq!(synth_generate(&none).unwrap().mask.count_ones(), 0);
        let a = synth_generate(&SynthSpec { seed: 11, ..SynthSpec::default() }).unwrap();
        let b = synth_generate(&SynthSpec { seed: 11, ..SynthSpec::default() }).unwrap();
        assert_eq!(a, b);
        let bad = SynthSpec { height: 8, width: 8, sigma: [2.0, 2.0], ..SynthSpec::default() };
        assert!(matches!(synth_generate(&bad), Err(Error::Synth(_))));
        assert!(SynthSpec { max_targets: 4, ..SynthSpec::default() }.validate().is_err());
    }

    #[test]
    fn centred_unit_sigma_target_is_radius_two_disc() {
        let spec = SynthSpec { height: 15, width: 15, pixel_noise: 0.0, clutter: 0.0, ..SynthSpec::default() };
        let t = SynthTarget { row: 7.0, col: 7.0, amplitude: 50.0, sigma: 1.0 };
        let s = synth_render(&spec, &[t], &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(s.mask.count_ones(), 13);
        assert!(s.mask.get(7, 9) && s.mask.get(5, 7) && !s.mask.get(8, 9) && !s.mask.get(6, 9));
    }

    #[test]
    fn manifest_parsing() {
        let m = SplitManifest::parse("a train\n# note\nb test\n\n").unwrap();
        assert_eq!(m.ids(Subset::Test).collect::<Vec<_>>(), vec!["b"]);
        assert_eq!(SplitManifest::parse(&m.to_text()).unwrap(), m);
        assert!(SplitManifest::parse("a train\na test").is_err());
        assert!(SplitManifest::parse("a validation").is_err());
        assert!(SplitManifest::parse("a").is_err());
    }

    #[test]
    fn disk_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let samples = synth_dataset(&SynthSpec { seed: 3, ..SynthSpec::default() }, 3, 2).unwrap();
        write_dataset(dir.path(), &samples).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        let train = ds.load(Subset::Train).unwrap();
        let test = ds.load(Subset::Test).unwrap();
        assert_eq!(train.len(), 3);
        let originals: Vec<_> = samples.into_iter().map(|(s, _)| s).collect();
        assert_eq!([train, test].concat(), originals);
    }

    #[test]
    fn load_errors() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.png");
        let b = dir.path().join("b.png");
        save_gray8(&a, &Array2::zeros((4, 4))).unwrap();
        save_gray8(&b, &Array2::zeros((4, 5))).unwrap();
        assert!(matches!(load_sample(&a, &b), Err(Error::Dimension(_))));
        assert!(load_sample(&a, &dir.path().join("missing.png")).unwrap_err().is_io());
        let mask = arr2(&[[0u8, 255], [128, 127]]);
        save_gray8(&b, &mask).unwrap();
        let c = dir.path().join("c.png");
        save_gray8(&c, &Array2::zeros((2, 2))).unwrap();
        let s = load_sample(&c, &b).unwrap();
        assert_eq!(s.mask.as_array(), &arr2(&[[0u8, 1], [1, 0]]));
        assert!(Dataset::open(&dir.path().join("nowhere")).is_err());
    }
}
