//! Deterministic two-domain surface-defect generator.
//!
//! Images are single-channel renderings of a textured background with zero or
//! more defects drawn from per-class parametric families:
//!
//! | class | family  | appearance                          |
//! |-------|---------|-------------------------------------|
//! | 0     | spot    | small bright disc                   |
//! | 1     | scratch | thin dark line at a random angle     |
//! | 2     | stain   | large dim dark ellipse              |
//!
//! Further classes cycle through the same families with alternating sign.
//! A grid cell is labeled for class `c` when at least a quarter of its pixels
//! are covered by a class-`c` defect.
//!
//! The new domain differs only in appearance (covariate shift): background
//! texture, brightness, sensor noise and defect contrast. Labels never change.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::{GridLabel, GridShape};
use crate::sample::{Domain, Image, ImageSample};

/// Minimum fraction of a cell's pixels a defect must cover to label the cell.
pub const CELL_COVERAGE_MIN: f64 = 0.25;

const BASE_LEVEL: f32 = 0.35;
const BASE_NOISE: f64 = 0.015;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundTexture {
    /// Low-frequency shading.
    Smooth,
    /// Shading plus faint point-like speckles.
    Speckled,
    /// Shading plus periodic stripes.
    Striped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftConfig {
    pub brightness_delta: f64,
    pub background_texture: BackgroundTexture,
    pub noise_sigma: f64,
    pub defect_contrast_scale: f64,
}

impl ShiftConfig {
    /// Appearance of the original acquisition setup.
    pub fn none() -> Self {
        Self {
            brightness_delta: 0.0,
            background_texture: BackgroundTexture::Smooth,
            noise_sigma: 0.0,
            defect_contrast_scale: 1.0,
        }
    }
}

impl Default for ShiftConfig {
    fn default() -> Self {
        Self {
            brightness_delta: 0.15,
            background_texture: BackgroundTexture::Speckled,
            noise_sigma: 0.05,
            defect_contrast_scale: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train_original: usize,
    pub eval_original: usize,
    pub pool_new: usize,
    pub eval_new: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub seed: u64,
    /// `(height, width)` in pixels.
    pub image_size: (usize, usize),
    /// `(rows, cols)` of the output grid.
    pub grid_size: (usize, usize),
    pub num_classes: usize,
    pub counts: SplitCounts,
    /// Probability that an image contains at least one defect.
    pub defect_rate: f64,
    /// Probability that a defective image carries a second defect.
    pub second_defect_rate: f64,
    pub shift: ShiftConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            image_size: (32, 32),
            grid_size: (8, 8),
            num_classes: 3,
            counts: SplitCounts {
                train_original: 2000,
                eval_original: 400,
                pool_new: 600,
                eval_new: 400,
            },
            defect_rate: 0.6,
            second_defect_rate: 0.35,
            shift: ShiftConfig::default(),
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        let (gh, gw) = self.grid_size;
        if gh == 0 || gw == 0 || h == 0 || w == 0 {
            return Err(Error::Config("image and grid sizes must be positive".into()));
        }
        if h % gh != 0 || w % gw != 0 {
            return Err(Error::Config(format!(
                "image size {h}x{w} is not divisible by grid size {gh}x{gw}"
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        for (name, p) in [
            ("defect_rate", self.defect_rate),
            ("second_defect_rate", self.second_defect_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        let s = &self.shift;
        if !(s.noise_sigma >= 0.0 && s.defect_contrast_scale >= 0.0 && s.brightness_delta.is_finite())
        {
            return Err(Error::Config("invalid shift parameters".into()));
        }
        Ok(())
    }

    pub fn grid_shape(&self) -> GridShape {
        GridShape::new(self.grid_size.0, self.grid_size.1, self.num_classes)
    }

    pub fn cell_size(&self) -> (usize, usize) {
        (
            self.image_size.0 / self.grid_size.0,
            self.image_size.1 / self.grid_size.1,
        )
    }

    /// Hex digest of the canonical JSON form.
    pub fn hash(&self) -> String {
        crate::config_hash(self)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub train_original: Vec<ImageSample>,
    pub eval_original: Vec<ImageSample>,
    pub pool_new: Vec<ImageSample>,
    pub eval_new: Vec<ImageSample>,
}

pub const SPLITS: [&str; 4] = ["train_original", "eval_original", "pool_new", "eval_new"];

impl Dataset {
    pub fn split(&self, name: &str) -> Option<&Vec<ImageSample>> {
        match name {
            "train_original" => Some(&self.train_original),
            "eval_original" => Some(&self.eval_original),
            "pool_new" => Some(&self.pool_new),
            "eval_new" => Some(&self.eval_new),
            _ => None,
        }
    }

    fn split_mut(&mut self, name: &str) -> &mut Vec<ImageSample> {
        match name {
            "train_original" => &mut self.train_original,
            "eval_original" => &mut self.eval_original,
            "pool_new" => &mut self.pool_new,
            _ => &mut self.eval_new,
        }
    }

    pub fn find(&self, id: &str) -> Option<&ImageSample> {
        SPLITS
            .iter()
            .filter_map(|s| self.split(s))
            .flat_map(|v| v.iter())
            .find(|s| s.id == id)
    }
}

/// Derives an independent generator for one named stream of one image.
fn stream(seed: u64, split: &str, index: usize, name: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(split.as_bytes());
    h.update((index as u64).to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 32];
    bytes.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(bytes)
}

pub fn generate_dataset(config: &DatasetConfig) -> Result<Dataset> {
    config.validate()?;
    let mut dataset = Dataset {
        config: config.clone(),
        train_original: Vec::new(),
        eval_original: Vec::new(),
        pool_new: Vec::new(),
        eval_new: Vec::new(),
    };
    let c = &config.counts;
    for (split, count, domain) in [
        ("train_original", c.train_original, Domain::Original),
        ("eval_original", c.eval_original, Domain::Original),
        ("pool_new", c.pool_new, Domain::New),
        ("eval_new", c.eval_new, Domain::New),
    ] {
        let samples = (0..count)
            .map(|i| render_sample(config, split, i, domain))
            .collect::<Vec<_>>();
        *dataset.split_mut(split) = samples;
    }
    Ok(dataset)
}

#[derive(Debug, Clone, Copy)]
enum Family {
    Spot,
    Scratch,
    Stain,
}

#[derive(Debug, Clone)]
struct DefectShape {
    class: usize,
    family: Family,
    center: (f64, f64),
    /// Family-specific extents.
    a: f64,
    b: f64,
    angle: f64,
    amplitude: f64,
}

impl DefectShape {
    fn sample(class: usize, size: (usize, usize), rng: &mut ChaCha8Rng) -> Self {
        let family = match class % 3 {
            0 => Family::Spot,
            1 => Family::Scratch,
            _ => Family::Stain,
        };
        // Alternate polarity for classes beyond the first three families.
        let flip = if (class / 3) % 2 == 1 { -1.0 } else { 1.0 };
        let (h, w) = (size.0 as f64, size.1 as f64);
        let margin = 4.0;
        let center = (
            rng.random_range(margin..h - margin),
            rng.random_range(margin..w - margin),
        );
        let angle = rng.random_range(0.0..std::f64::consts::PI);
        let (a, b, amplitude) = match family {
            Family::Spot => {
                let r = rng.random_range(2.2..3.4);
                (r, r, 0.38)
            }
            Family::Scratch => (rng.random_range(6.0..10.0), rng.random_range(0.8..1.2), -0.34),
            Family::Stain => (rng.random_range(5.0..7.5), rng.random_range(3.0..4.5), -0.2),
        };
        Self {
            class,
            family,
            center,
            a,
            b,
            angle,
            amplitude: amplitude * flip,
        }
    }

    /// Normalized profile in `[0, 1]` at a pixel center.
    fn profile(&self, y: f64, x: f64) -> f64 {
        let dy = y - self.center.0;
        let dx = x - self.center.1;
        let (s, c) = self.angle.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        let d = match self.family {
            Family::Spot => (u * u + v * v).sqrt() / self.a,
            Family::Stain => ((u / self.a).powi(2) + (v / self.b).powi(2)).sqrt(),
            Family::Scratch => {
                let along = (u.abs() - self.a).max(0.0);
                ((along / self.b).powi(2) + (v / self.b).powi(2)).sqrt()
            }
        };
        // Flat core with a soft rim; equals 0.5 at d = 1.
        1.0 / (1.0 + (6.0 * (d - 1.0)).exp())
    }
}

fn render_background(
    texture: BackgroundTexture,
    size: (usize, usize),
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let (h, w) = size;
    let fy = rng.random_range(0.05..0.15);
    let fx = rng.random_range(0.05..0.15);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let mut bg: Vec<f64> = (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f64, (i % w) as f64);
            BASE_LEVEL as f64 + 0.04 * (fy * y + fx * x + phase).sin()
        })
        .collect();
    match texture {
        BackgroundTexture::Smooth => {}
        BackgroundTexture::Speckled => {
            // Bright speckles.
            let n = rng.random_range(5usize..10);
            for _ in 0..n {
                let cy = rng.random_range(0.0..h as f64);
                let cx = rng.random_range(0.0..w as f64);
                let amp = rng.random_range(0.08..0.14);
                let sigma: f64 = rng.random_range(0.8..1.3);
                for (i, px) in bg.iter_mut().enumerate() {
                    let (y, x) = ((i / w) as f64, (i % w) as f64);
                    let r2 = (y - cy).powi(2) + (x - cx).powi(2);
                    *px += amp * (-r2 / (2.0 * sigma * sigma)).exp();
                }
            }
            // Dark smudges.
            let n = rng.random_range(2usize..6);
            for _ in 0..n {
                let cy = rng.random_range(0.0..h as f64);
                let cx = rng.random_range(0.0..w as f64);
                let amp = -rng.random_range(0.12..0.18);
                let sy: f64 = rng.random_range(1.4..2.0);
                let sx: f64 = rng.random_range(1.4..2.0);
                for (i, px) in bg.iter_mut().enumerate() {
                    let (y, x) = ((i / w) as f64, (i % w) as f64);
                    let r2 = ((y - cy) / sy).powi(2) + ((x - cx) / sx).powi(2);
                    *px += amp * (-r2 / 2.0).exp();
                }
            }
            // Short dark streaks.
            let n = rng.random_range(2usize..6);
            for _ in 0..n {
                let cy = rng.random_range(0.0..h as f64);
                let cx = rng.random_range(0.0..w as f64);
                let amp = -rng.random_range(0.1..0.15);
                let len: f64 = rng.random_range(2.0..4.0);
                let ang: f64 = rng.random_range(0.0..std::f64::consts::PI);
                let (sn, cs) = ang.sin_cos();
                for (i, px) in bg.iter_mut().enumerate() {
                    let (y, x) = ((i / w) as f64 - cy, (i % w) as f64 - cx);
                    let u = (x * cs + y * sn).abs();
                    let v = -x * sn + y * cs;
                    let along = (u - len).max(0.0);
                    *px += amp * (-(along * along + v * v) / (2.0 * 0.7 * 0.7)).exp();
                }
            }
        }
        BackgroundTexture::Striped => {
            let period = rng.random_range(5.0..8.0);
            let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
            let (s, c) = angle.sin_cos();
            for (i, px) in bg.iter_mut().enumerate() {
                let (y, x) = ((i / w) as f64, (i % w) as f64);
                let t = (x * c + y * s) * std::f64::consts::TAU / period;
                *px += 0.05 * t.sin();
            }
        }
    }
    bg
}

fn quantize(v: f64) -> f32 {
    ((v.clamp(0.0, 1.0) * 65535.0).round() / 65535.0) as f32
}

fn render_sample(config: &DatasetConfig, split: &str, index: usize, domain: Domain) -> ImageSample {
    let (h, w) = config.image_size;
    let shape = config.grid_shape();
    let mut placement = stream(config.seed, split, index, "placement");
    let mut render = stream(config.seed, split, index, "render");
    let mut noise = stream(config.seed, split, index, "noise");

    let appearance = match domain {
        Domain::Original => ShiftConfig::none(),
        Domain::New => config.shift.clone(),
    };

    let mut defects = Vec::new();
    if placement.random_bool(config.defect_rate) {
        let n = if placement.random_bool(config.second_defect_rate) { 2 } else { 1 };
        for _ in 0..n {
            let class = placement.random_range(0..config.num_classes);
            defects.push(DefectShape::sample(class, config.image_size, &mut placement));
        }
    }

    let mut pixels = render_background(appearance.background_texture, config.image_size, &mut render);
    let mut coverage = vec![vec![false; h * w]; config.num_classes];
    for d in &defects {
        for (i, px) in pixels.iter_mut().enumerate() {
            let (y, x) = ((i / w) as f64 + 0.5, (i % w) as f64 + 0.5);
            let p = d.profile(y, x);
            *px += appearance.defect_contrast_scale * d.amplitude * p;
            if p >= 0.5 {
                coverage[d.class][i] = true;
            }
        }
    }

    let normal = Normal::new(0.0, BASE_NOISE).expect("valid sigma");
    for px in pixels.iter_mut() {
        *px += normal.sample(&mut noise);
    }
    let image = Image::new(h, w, 1, pixels.iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect())
        .expect("buffer sized from config");
    let shifted = match domain {
        Domain::Original => image,
        Domain::New => apply_shift(&image, &appearance, &mut noise),
    };
    let pixels = Image {
        data: shifted.data.iter().map(|&v| quantize(v as f64)).collect(),
        ..shifted
    };

    let label = label_from_coverage(&coverage, config.image_size, shape);
    let healthy = label.is_all_zero();
    ImageSample {
        id: format!("{split}-{index:05}"),
        pixels,
        domain,
        full_label: Some(label),
        partial_label: None,
        healthy_flag: Some(healthy),
    }
}

fn label_from_coverage(coverage: &[Vec<bool>], size: (usize, usize), shape: GridShape) -> GridLabel {
    let (_, w) = size;
    let ch = size.0 / shape.rows;
    let cw = size.1 / shape.cols;
    let mut label = GridLabel::zeros(shape);
    for (class, cov) in coverage.iter().enumerate() {
        for r in 0..shape.rows {
            for c in 0..shape.cols {
                let covered = (0..ch)
                    .flat_map(|dy| (0..cw).map(move |dx| (r * ch + dy) * w + c * cw + dx))
                    .filter(|&i| cov[i])
                    .count();
                if covered as f64 >= CELL_COVERAGE_MIN * (ch * cw) as f64 {
                    label.set(r, c, class, true);
                }
            }
        }
    }
    label
}

/// Photometric part of the acquisition shift: brightness offset plus sensor
/// noise, clipped to `[0, 1]`. Texture and defect contrast are scene
/// properties applied at render time; neither this function nor they move a
/// defect, so labels are unchanged.
pub fn apply_shift<R: Rng>(image: &Image, shift: &ShiftConfig, rng: &mut R) -> Image {
    let normal = (shift.noise_sigma > 0.0)
        .then(|| Normal::new(0.0, shift.noise_sigma).expect("non-negative sigma"));
    let data = image
        .data
        .iter()
        .map(|&v| {
            let mut out = v as f64 + shift.brightness_delta;
            if let Some(n) = &normal {
                out += n.sample(rng);
            }
            out.clamp(0.0, 1.0) as f32
        })
        .collect();
    Image { data, ..image.clone() }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub config: DatasetConfig,
    pub config_hash: String,
    pub splits: BTreeMap<String, Vec<String>>,
    /// sha-256 over every image and label file in split order.
    pub digest: String,
}

#[derive(Serialize, Deserialize)]
struct LabelFile {
    id: String,
    domain: Domain,
    healthy_flag: Option<bool>,
    label: GridLabel,
}

/// Writes `manifest.json`, `images/<id>.png` (16-bit grayscale) and
/// `labels/<id>.json`.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("labels"))?;
    let mut splits = BTreeMap::new();
    let mut digest = Sha256::new();
    for split in SPLITS {
        let samples = dataset.split(split).expect("known split");
        let mut ids = Vec::with_capacity(samples.len());
        for s in samples {
            let png = encode_png(&s.pixels)?;
            let label = serde_json::to_vec(&LabelFile {
                id: s.id.clone(),
                domain: s.domain,
                healthy_flag: s.healthy_flag,
                label: s
                    .full_label
                    .clone()
                    .ok_or_else(|| Error::InvalidInput(format!("{} has no label", s.id)))?,
            })?;
            digest.update(&png);
            digest.update(&label);
            fs::write(dir.join("images").join(format!("{}.png", s.id)), &png)?;
            fs::write(dir.join("labels").join(format!("{}.json", s.id)), &label)?;
            ids.push(s.id.clone());
        }
        splits.insert(split.to_string(), ids);
    }
    let manifest = Manifest {
        config: dataset.config.clone(),
        config_hash: dataset.config.hash(),
        splits,
        digest: hex(&digest.finalize()),
    };
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    Ok(serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = load_manifest(dir)?;
    let mut dataset = Dataset {
        config: manifest.config.clone(),
        train_original: Vec::new(),
        eval_original: Vec::new(),
        pool_new: Vec::new(),
        eval_new: Vec::new(),
    };
    for split in SPLITS {
        let ids = manifest.splits.get(split).cloned().unwrap_or_default();
        let mut samples = Vec::with_capacity(ids.len());
        for id in ids {
            samples.push(load_sample(dir, &id)?);
        }
        *dataset.split_mut(split) = samples;
    }
    Ok(dataset)
}

pub fn load_sample(dir: &Path, id: &str) -> Result<ImageSample> {
    let pixels = decode_png(&fs::read(dir.join("images").join(format!("{id}.png")))?)?;
    let lf: LabelFile =
        serde_json::from_slice(&fs::read(dir.join("labels").join(format!("{id}.json")))?)?;
    Ok(ImageSample {
        id: lf.id,
        pixels,
        domain: lf.domain,
        full_label: Some(lf.label),
        partial_label: None,
        healthy_flag: lf.healthy_flag,
    })
}

pub fn encode_png(image: &Image) -> Result<Vec<u8>> {
    if image.channels != 1 {
        return Err(Error::Image("only single-channel images are supported".into()));
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, image.width as u32, image.height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Sixteen);
        let mut writer = enc.write_header().map_err(|e| Error::Image(e.to_string()))?;
        let bytes: Vec<u8> = image
            .data
            .iter()
            .flat_map(|&v| ((v.clamp(0.0, 1.0) * 65535.0).round() as u16).to_be_bytes())
            .collect();
        writer
            .write_image_data(&bytes)
            .map_err(|e| Error::Image(e.to_string()))?;
    }
    Ok(out)
}

pub fn decode_png(bytes: &[u8]) -> Result<Image> {
    let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(|e| Error::Image(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Image(e.to_string()))?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Sixteen {
        return Err(Error::Image("expected 16-bit grayscale png".into()));
    }
    let data = buf[..info.buffer_size()]
        .chunks_exact(2)
        .map(|b| u16::from_be_bytes([b[0], b[1]]) as f32 / 65535.0)
        .collect();
    Image::new(info.height as usize, info.width as usize, 1, data)
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> DatasetConfig {
        DatasetConfig {
            counts: SplitCounts {
                train_original: 12,
                eval_original: 4,
                pool_new: 8,
                eval_new: 4,
            },
            ..DatasetConfig::default()
        }
    }

    #[test]
    fn zero_defect_rate_gives_healthy_samples() {
        let cfg = DatasetConfig {
            defect_rate: 0.0,
            ..small_config()
        };
        let ds = generate_dataset(&cfg).unwrap();
        for split in SPLITS {
            for s in ds.split(split).unwrap() {
                assert!(s.full_label.as_ref().unwrap().is_all_zero());
                assert_eq!(s.healthy_flag, Some(true));
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_dataset(&small_config()).unwrap();
        let b = generate_dataset(&small_config()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn defective_count_in_binomial_band() {
        let cfg = DatasetConfig {
            defect_rate: 0.5,
            counts: SplitCounts {
                train_original: 0,
                eval_original: 0,
                pool_new: 100,
                eval_new: 0,
            },
            ..DatasetConfig::default()
        };
        let ds = generate_dataset(&cfg).unwrap();
        let defective = ds
            .pool_new
            .iter()
            .filter(|s| !s.full_label.as_ref().unwrap().is_all_zero())
            .count();
        // Rendering can drop a defect below the coverage rule, so the count
        // sits at or below the number of defect draws.
        assert!((35..=65).contains(&defective), "{defective}");
    }

    #[test]
    fn indivisible_grid_is_rejected() {
        let cfg = DatasetConfig {
            image_size: (30, 32),
            ..small_config()
        };
        assert!(matches!(generate_dataset(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn zero_shift_is_identity() {
        let img = Image::new(2, 2, 1, vec![0.1, 0.5, 0.9, 0.3]).unwrap();
        let shift = ShiftConfig {
            brightness_delta: 0.0,
            background_texture: BackgroundTexture::Smooth,
            noise_sigma: 0.0,
            defect_contrast_scale: 1.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(apply_shift(&img, &shift, &mut rng), img);
    }

    #[test]
    fn brightness_shift_and_clip() {
        let img = Image::filled(3, 3, 1, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut shift = ShiftConfig {
            brightness_delta: 0.2,
            noise_sigma: 0.0,
            ..ShiftConfig::default()
        };
        let out = apply_shift(&img, &shift, &mut rng);
        assert!(out.data.iter().all(|&v| (v - 0.7).abs() < 1e-6));
        shift.brightness_delta = 0.9;
        let out = apply_shift(&img, &shift, &mut rng);
        assert!(out.data.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn shift_does_not_change_labels() {
        let cfg = small_config();
        let mut unshifted = cfg.clone();
        unshifted.shift = ShiftConfig::none();
        let a = generate_dataset(&cfg).unwrap();
        let b = generate_dataset(&unshifted).unwrap();
        for (x, y) in a.pool_new.iter().zip(&b.pool_new) {
            assert_eq!(x.full_label, y.full_label);
            assert_ne!(x.pixels, y.pixels);
        }
    }

    #[test]
    fn png_round_trip_is_lossless() {
        let ds = generate_dataset(&small_config()).unwrap();
        let img = &ds.pool_new[0].pixels;
        assert_eq!(&decode_png(&encode_png(img).unwrap()).unwrap(), img);
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_dataset(&small_config()).unwrap();
        let m1 = save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);
        let dir2 = tempfile::tempdir().unwrap();
        let m2 = save_dataset(&generate_dataset(&small_config()).unwrap(), dir2.path()).unwrap();
        assert_eq!(m1.digest, m2.digest);
    }
}
