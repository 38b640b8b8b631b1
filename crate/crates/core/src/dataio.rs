//! Dataset loading, hole masking, degradation and the seeded patch stream.
//!
//! Expected layouts under the dataset root:
//!
//! ```text
//! middlebury2005   <root>/<split>/<Scene>/disp1.png   8- or 16-bit grayscale disparity
//!                  <root>/<split>/<Scene>/view1.png   RGB
//! nyu_v2           <root>/depth/<index>.bin           little-endian f32 metres, row-major
//!                  <root>/depth/<index>.json          {"height", "width", "dtype": "f32le", "units": "meters"}
//!                  <root>/rgb/<index>.png
//! lu, rgbdd        <root>/test/<name>/depth.png       8- or 16-bit grayscale
//!                  <root>/test/<name>/image.png
//! ```
//!
//! Zero depth marks a hole. NYU indices are ordered numerically; the first
//! 1000 form the training split.

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, ImageBuffer, Luma, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Batch;
use crate::numerics::{bicubic_resize, crop_patch, normalize, patch_origins, Direction, Grid2D, ImagePlane, Mask, Units};

/// Middlebury test scenes.
pub const MIDDLEBURY_TEST_SCENES: [&str; 6] = ["Art", "Books", "Dolls", "Laundry", "Moebius", "Reindeer"];
/// Accepted alternative directory names for test scenes.
const SCENE_ALIASES: [(&str, &str); 1] = [("Moebius", "Mobeius")];
pub const NYU_RANGE_METERS: f64 = 10.0;
pub const NYU_TRAIN_COUNT: usize = 1000;
pub const NYU_TOTAL: usize = 1449;
pub const MIN_VALID_FRACTION: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Middlebury2005,
    NyuV2,
    Lu,
    Rgbdd,
}

impl DatasetKind {
    pub fn parse(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Argument(format!("unknown dataset kind '{s}'")))
    }

    pub fn units(self) -> Units {
        match self {
            DatasetKind::NyuV2 => Units::Meters,
            _ => Units::DisparityLevels,
        }
    }

    /// Report RMSE/MAD in centimetres rather than native units.
    pub fn reports_centimeters(self) -> bool {
        self == DatasetKind::NyuV2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub root: PathBuf,
    pub kind: DatasetKind,
    pub split: Split,
    /// Normalization constant; `None` takes 10 m for NYU and the PNG bit
    /// depth maximum (255 or 65535) otherwise.
    pub dataset_range: Option<f64>,
}

impl DatasetSpec {
    pub fn new(root: impl Into<PathBuf>, kind: DatasetKind, split: Split) -> Self {
        Self {
            root: root.into(),
            kind,
            split,
            dataset_range: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if matches!(self.kind, DatasetKind::Lu | DatasetKind::Rgbdd) && self.split == Split::Train {
            return Err(Error::Argument(format!("{:?} is a test-only dataset", self.kind)));
        }
        if let Some(r) = self.dataset_range {
            if !(r.is_finite() && r > 0.0) {
                return Err(Error::Argument(format!("dataset_range must be positive, got {r}")));
            }
        }
        Ok(())
    }
}

/// One dataset item in raw units.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub name: String,
    pub depth: Grid2D,
    pub image: ImagePlane,
    pub mask: Mask,
    pub dataset_range: f64,
}

impl Sample {
    /// Check alignment and mask soundness.
    pub fn new(name: impl Into<String>, depth: Grid2D, image: ImagePlane, mask: Mask, dataset_range: f64) -> Result<Self> {
        let name = name.into();
        if image.dims() != depth.dims() || mask.dims() != depth.dims() {
            return Err(Error::Dimension(format!("{name}: depth, image and mask differ in size")));
        }
        let bad = depth
            .values()
            .iter()
            .zip(mask.flags())
            .any(|(&d, &m)| m && !(d > 0.0 && d <= dataset_range));
        if bad {
            return Err(Error::Range(format!("{name}: valid depth outside (0, {dataset_range}]")));
        }
        Ok(Self {
            name,
            depth,
            image,
            mask,
            dataset_range,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.depth.dims()
    }

    pub fn normalized_depth(&self) -> Result<Grid2D> {
        normalize(&self.depth, self.dataset_range)
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        Ok(Self {
            name: self.name.clone(),
            depth: self.depth.crop(y0, x0, h, w)?,
            image: self.image.crop(y0, x0, h, w)?,
            mask: self.mask.crop(y0, x0, h, w)?,
            dataset_range: self.dataset_range,
        })
    }
}

fn read_image(path: &Path) -> Result<DynamicImage> {
    if !path.is_file() {
        return Err(Error::load(path, "file not found"));
    }
    image::open(path).map_err(|e| Error::load(path, e))
}

/// Read a grayscale PNG and return its values with the bit-depth maximum.
pub fn read_gray(path: &Path) -> Result<(Grid2D, f64)> {
    let img = read_image(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (values, max): (Vec<f64>, f64) = match img {
        DynamicImage::ImageLuma8(b) => (b.into_raw().into_iter().map(f64::from).collect(), 255.0),
        DynamicImage::ImageLuma16(b) => (b.into_raw().into_iter().map(f64::from).collect(), 65535.0),
        other => {
            return Err(Error::load(
                path,
                format!("expected 8- or 16-bit grayscale, found {:?}", other.color()),
            ))
        }
    };
    let grid = Grid2D::new(h, w, values, Units::DisparityLevels).map_err(|e| Error::load(path, e))?;
    Ok((grid, max))
}

pub fn read_rgb(path: &Path) -> Result<ImagePlane> {
    let img = read_image(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_raw();
    let mut data = vec![0.0; 3 * h * w];
    for (i, px) in raw.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = f64::from(px[c]) / 255.0;
        }
    }
    ImagePlane::new(h, w, data).map_err(|e| Error::load(path, e))
}

pub fn write_rgb(path: &Path, image: &ImagePlane) -> Result<()> {
    let (h, w) = image.dims();
    let buf = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let p = image.pixel(y as usize, x as usize);
        image::Rgb(p.map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8))
    });
    buf.save(path).map_err(|e| Error::load(path, e))
}

/// Write values already in `0..=max` as 8-bit (`max ≤ 255`) or 16-bit grayscale.
pub fn write_gray(path: &Path, grid: &Grid2D, sixteen_bit: bool) -> Result<()> {
    let (h, w) = grid.dims();
    if sixteen_bit {
        let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            Luma([grid.get(y as usize, x as usize).round().clamp(0.0, 65535.0) as u16])
        });
        buf.save(path).map_err(|e| Error::load(path, e))
    } else {
        let buf = GrayImage::from_fn(w as u32, h as u32, |x, y| {
            Luma([grid.get(y as usize, x as usize).round().clamp(0.0, 255.0) as u8])
        });
        buf.save(path).map_err(|e| Error::load(path, e))
    }
}

fn hole_mask(depth: &Grid2D) -> Mask {
    let (h, w) = depth.dims();
    Mask::new(h, w, depth.values().iter().map(|&d| d > 0.0).collect()).expect("dims match")
}

fn load_pair(name: &str, depth_path: &Path, image_path: &Path, range: Option<f64>) -> Result<Sample> {
    let (depth, bit_max) = read_gray(depth_path)?;
    let image = read_rgb(image_path)?;
    if image.dims() != depth.dims() {
        return Err(Error::load(
            image_path,
            format!("size {:?} differs from depth {:?}", image.dims(), depth.dims()),
        ));
    }
    let range = range.unwrap_or(bit_max);
    let mask = hole_mask(&depth);
    Sample::new(name, depth, image, mask, range).map_err(|e| Error::load(depth_path, e))
}

fn sorted_subdirs(dir: &Path) -> Result<Vec<String>> {
    if !dir.is_dir() {
        return Err(Error::load(dir, "directory not found"));
    }
    let mut names = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::load(dir, e))? {
        let entry = entry?;
        if entry.file_type()?.is_dir() {
            names.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    names.sort();
    Ok(names)
}

fn load_middlebury(spec: &DatasetSpec) -> Result<Vec<Sample>> {
    let dir = spec.root.join(spec.split.dir());
    let present = sorted_subdirs(&dir)?;
    let scenes: Vec<(String, String)> = match spec.split {
        Split::Train => present.into_iter().map(|n| (n.clone(), n)).collect(),
        Split::Test => MIDDLEBURY_TEST_SCENES
            .iter()
            .map(|&name| {
                let alias = SCENE_ALIASES.iter().find(|(n, _)| *n == name).map(|(_, a)| *a);
                let dir_name = if present.iter().any(|p| p == name) {
                    name
                } else {
                    alias.filter(|a| present.iter().any(|p| p == a)).unwrap_or(name)
                };
                (name.to_string(), dir_name.to_string())
            })
            .collect(),
    };
    let mut samples = scenes
        .iter()
        .map(|(name, d)| {
            let sd = dir.join(d);
            load_pair(name, &sd.join("disp1.png"), &sd.join("view1.png"), spec.dataset_range)
        })
        .collect::<Result<Vec<_>>>()?;
    samples.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(samples)
}

/// Sidecar describing a raw NYU depth array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DepthHeader {
    pub height: usize,
    pub width: usize,
    pub dtype: String,
    pub units: String,
}

pub fn read_depth_bin(bin: &Path) -> Result<Grid2D> {
    let header_path = bin.with_extension("json");
    let text = fs::read_to_string(&header_path).map_err(|e| Error::load(&header_path, e))?;
    let header: DepthHeader = serde_json::from_str(&text).map_err(|e| Error::load(&header_path, e))?;
    if header.dtype != "f32le" || header.units != "meters" {
        return Err(Error::load(
            &header_path,
            format!("unsupported dtype/units {}/{}", header.dtype, header.units),
        ));
    }
    let bytes = fs::read(bin).map_err(|e| Error::load(bin, e))?;
    let expected = header.height * header.width * 4;
    if bytes.len() != expected {
        return Err(Error::load(bin, format!("{} bytes, expected {expected}", bytes.len())));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    Grid2D::new(header.height, header.width, values, Units::Meters).map_err(|e| Error::load(bin, e))
}

pub fn write_depth_bin(bin: &Path, depth: &Grid2D) -> Result<()> {
    let (h, w) = depth.dims();
    let bytes: Vec<u8> = depth.values().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    fs::write(bin, bytes)?;
    let header = DepthHeader {
        height: h,
        width: w,
        dtype: "f32le".into(),
        units: "meters".into(),
    };
    fs::write(bin.with_extension("json"), serde_json::to_string_pretty(&header)?)?;
    Ok(())
}

fn load_nyu(spec: &DatasetSpec) -> Result<Vec<Sample>> {
    let depth_dir = spec.root.join("depth");
    if !depth_dir.is_dir() {
        return Err(Error::load(&depth_dir, "directory not found"));
    }
    let mut indices = Vec::new();
    for entry in fs::read_dir(&depth_dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "bin") {
            let stem = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            let idx: usize = stem
                .parse()
                .map_err(|_| Error::load(&path, "file stem is not an index"))?;
            indices.push((idx, stem));
        }
    }
    indices.sort();
    if indices.len() != NYU_TOTAL {
        log::warn!("NYU root holds {} pairs, expected {NYU_TOTAL}", indices.len());
    }
    let range = spec.dataset_range.unwrap_or(NYU_RANGE_METERS);
    let chosen = match spec.split {
        Split::Train => &indices[..indices.len().min(NYU_TRAIN_COUNT)],
        Split::Test => &indices[indices.len().min(NYU_TRAIN_COUNT)..],
    };
    let mut samples = chosen
        .iter()
        .map(|(_, stem)| {
            let bin = depth_dir.join(format!("{stem}.bin"));
            let depth = read_depth_bin(&bin)?;
            let image = read_rgb(&spec.root.join("rgb").join(format!("{stem}.png")))?;
            let mask = hole_mask(&depth);
            Sample::new(stem.clone(), depth, image, mask, range).map_err(|e| Error::load(&bin, e))
        })
        .collect::<Result<Vec<_>>>()?;
    // numeric order is the split order; names sort the same when zero-padded
    samples.sort_by_key(|s| s.name.parse::<usize>().unwrap_or(usize::MAX));
    Ok(samples)
}

fn load_paired(spec: &DatasetSpec) -> Result<Vec<Sample>> {
    let dir = spec.root.join(spec.split.dir());
    sorted_subdirs(&dir)?
        .iter()
        .map(|n| {
            let sd = dir.join(n);
            load_pair(n, &sd.join("depth.png"), &sd.join("image.png"), spec.dataset_range)
        })
        .collect()
}

/// Load every sample of a split, in deterministic order.
pub fn load_dataset(spec: &DatasetSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    let samples = match spec.kind {
        DatasetKind::Middlebury2005 => load_middlebury(spec)?,
        DatasetKind::NyuV2 => load_nyu(spec)?,
        DatasetKind::Lu | DatasetKind::Rgbdd => load_paired(spec)?,
    };
    if samples.is_empty() {
        return Err(Error::Degenerate(format!("no samples under {}", spec.root.display())));
    }
    Ok(samples)
}

/// Center-crop to a multiple of `s · 2^(levels − 1)` and bicubic down-resize
/// the normalized depth. Returns the LR map and the cropped sample.
pub fn degrade(sample: &Sample, s: usize, levels: usize) -> Result<(Grid2D, Sample)> {
    if ![4, 8, 16].contains(&s) {
        return Err(Error::Argument(format!("scale must be 4, 8 or 16, got {s}")));
    }
    if levels == 0 {
        return Err(Error::Argument("levels must be positive".into()));
    }
    let div = s << (levels - 1);
    let (h, w) = sample.dims();
    let (ch, cw) = (h / div * div, w / div * div);
    if ch == 0 || cw == 0 {
        return Err(Error::Dimension(format!(
            "{}: {h}x{w} is smaller than the minimum crop {div}x{div}",
            sample.name
        )));
    }
    let cropped = sample.crop((h - ch) / 2, (w - cw) / 2, ch, cw)?;
    let lr = bicubic_resize(&cropped.normalized_depth()?, s, Direction::Down)?;
    Ok((lr, cropped))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StreamConfig {
    pub scale: usize,
    pub patch: usize,
    pub stride: usize,
    pub batch_size: usize,
    pub seed: u64,
}

/// Default patch size (and stride) per scale factor.
pub fn default_patch(scale: usize) -> usize {
    if scale >= 16 {
        128
    } else {
        96
    }
}

/// Endless seeded sequence of training batches.
///
/// Patches are enumerated once (sample index, origin); each epoch reshuffles
/// them with the stream's RNG. Crops are cut on demand.
#[derive(Debug, Clone)]
pub struct TrainingStream {
    samples: Vec<(Grid2D, ImagePlane, Mask)>,
    sites: Vec<(usize, (usize, usize))>,
    order: Vec<usize>,
    cursor: usize,
    epoch: usize,
    rng: ChaCha8Rng,
    config: StreamConfig,
}

pub fn training_stream(samples: &[Sample], config: StreamConfig) -> Result<TrainingStream> {
    if samples.is_empty() {
        return Err(Error::Argument("training stream needs at least one sample".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::Argument("batch_size must be positive".into()));
    }
    if config.scale == 0 || config.patch % config.scale != 0 {
        return Err(Error::Argument(format!(
            "scale {} does not divide patch {}",
            config.scale, config.patch
        )));
    }
    let mut prepared = Vec::with_capacity(samples.len());
    let mut sites = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let (h, w) = s.dims();
        if config.patch > h.min(w) {
            log::warn!("{}: smaller than patch {}, skipped", s.name, config.patch);
            prepared.push((s.normalized_depth()?, s.image.clone(), s.mask.clone()));
            continue;
        }
        for origin in patch_origins(h, w, config.patch, config.stride)? {
            let m = s.mask.crop(origin.0, origin.1, config.patch, config.patch)?;
            if m.valid_fraction() >= MIN_VALID_FRACTION {
                sites.push((i, origin));
            }
        }
        prepared.push((s.normalized_depth()?, s.image.clone(), s.mask.clone()));
    }
    if sites.is_empty() {
        return Err(Error::Degenerate(format!(
            "no {}x{} patch has at least {MIN_VALID_FRACTION} valid pixels",
            config.patch, config.patch
        )));
    }
    let mut stream = TrainingStream {
        samples: prepared,
        order: (0..sites.len()).collect(),
        sites,
        cursor: 0,
        epoch: 0,
        rng: ChaCha8Rng::seed_from_u64(config.seed),
        config,
    };
    stream.order.shuffle(&mut stream.rng);
    Ok(stream)
}

impl TrainingStream {
    pub fn patch_count(&self) -> usize {
        self.sites.len()
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    fn next_site(&mut self) -> (usize, (usize, usize)) {
        if self.cursor == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
            self.epoch += 1;
        }
        let site = self.sites[self.order[self.cursor]];
        self.cursor += 1;
        site
    }

    pub fn next_batch(&mut self) -> Result<Batch> {
        let mut batch = Batch::default();
        for _ in 0..self.config.batch_size {
            let (i, origin) = self.next_site();
            let (depth, image, mask) = &self.samples[i];
            let p = crop_patch(depth, image, mask, origin, self.config.patch, self.config.scale)?;
            batch.push(p.lr, p.image, p.hr, p.mask);
        }
        Ok(batch)
    }
}

impl Iterator for TrainingStream {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        Some(self.next_batch())
    }
}

/// Procedural RGB-D scenes with Middlebury-like structure for tests and demos.
pub mod synthetic {
    use super::*;

    /// A scene of tilted planes and occluding shapes with aligned colour
    /// edges, texture on flat regions and zero-disparity holes along some
    /// depth edges. Disparity spans roughly 40..=230 levels.
    pub fn scene(name: &str, h: usize, w: usize, seed: u64) -> Sample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = rng.random_range(50.0..90.0);
        let (gy, gx) = (rng.random_range(-20.0..20.0) / h as f64, rng.random_range(-20.0..20.0) / w as f64);
        let palette = |rng: &mut ChaCha8Rng| [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)];
        struct Shape {
            cy: f64,
            cx: f64,
            ry: f64,
            rx: f64,
            disc: bool,
            depth: f64,
            slope: f64,
            color: [f64; 3],
            hole: bool,
        }
        let count = rng.random_range(3..6);
        let mut shapes: Vec<Shape> = (0..count)
            .map(|_| Shape {
                cy: rng.random_range(0.0..h as f64),
                cx: rng.random_range(0.0..w as f64),
                ry: rng.random_range(0.12..0.35) * h as f64,
                rx: rng.random_range(0.12..0.35) * w as f64,
                disc: rng.random_bool(0.5),
                depth: rng.random_range(100.0..220.0),
                slope: rng.random_range(-0.3..0.3),
                color: palette(&mut rng),
                hole: rng.random_bool(0.5),
            })
            .collect();
        shapes.sort_by(|a, b| a.depth.total_cmp(&b.depth));
        let bg_color = palette(&mut rng);
        let stripe = rng.random_range(3.0..7.0);
        let mut depth = vec![0.0; h * w];
        let mut holes = vec![false; h * w];
        let mut rgb = vec![[0.0; 3]; h * w];
        for y in 0..h {
            for x in 0..w {
                let (fy, fx) = (y as f64, x as f64);
                let mut d = base + gy * fy * 20.0 + gx * fx * 20.0;
                // texture without depth change
                let t = 0.15 * ((fx + fy) / stripe).sin();
                let mut c = bg_color.map(|v| (v + t).clamp(0.0, 1.0));
                let mut hole = false;
                for s in &shapes {
                    let (dy, dx) = ((fy - s.cy) / s.ry, (fx - s.cx) / s.rx);
                    let r = if s.disc { dy * dy + dx * dx } else { dy.abs().max(dx.abs()) };
                    if r <= 1.0 {
                        d = s.depth + s.slope * (fx - s.cx);
                        c = s.color;
                        hole = false;
                    } else if s.hole && r <= 1.08 && dx > 0.0 {
                        // occlusion shadow on one side of the shape
                        hole = true;
                    }
                }
                depth[y * w + x] = d.round().clamp(1.0, 255.0);
                holes[y * w + x] = hole;
                rgb[y * w + x] = c;
            }
        }
        for (d, &hole) in depth.iter_mut().zip(&holes) {
            if hole {
                *d = 0.0;
            }
        }
        let depth = Grid2D::new(h, w, depth, Units::DisparityLevels).expect("finite");
        let mask = hole_mask(&depth);
        let image = ImagePlane::from_fn(h, w, |y, x| rgb[y * w + x]).expect("in range");
        Sample::new(name, depth, image, mask, 255.0).expect("consistent scene")
    }

    /// Write scenes in the Middlebury layout under `<root>/<split>/`.
    pub fn write_middlebury(root: &Path, split: Split, samples: &[Sample]) -> Result<()> {
        for s in samples {
            let dir = root.join(split.dir()).join(&s.name);
            fs::create_dir_all(&dir)?;
            write_gray(&dir.join("disp1.png"), &s.depth, s.dataset_range > 255.0)?;
            write_rgb(&dir.join("view1.png"), &s.image)?;
        }
        Ok(())
    }

    /// Write depth in metres plus images in the NYU layout, indices from 0.
    pub fn write_nyu(root: &Path, samples: &[Sample]) -> Result<()> {
        fs::create_dir_all(root.join("depth"))?;
        fs::create_dir_all(root.join("rgb"))?;
        for (i, s) in samples.iter().enumerate() {
            write_depth_bin(&root.join("depth").join(format!("{i:04}.bin")), &s.depth)?;
            write_rgb(&root.join("rgb").join(format!("{i:04}.png")), &s.image)?;
        }
        Ok(())
    }

    /// A Middlebury-style tree with the six test scenes and `train` scenes.
    pub fn middlebury_tree(root: &Path, size: (usize, usize), train: usize, seed: u64) -> Result<()> {
        let test: Vec<Sample> = MIDDLEBURY_TEST_SCENES
            .iter()
            .enumerate()
            .map(|(i, n)| scene(n, size.0, size.1, seed + i as u64))
            .collect();
        write_middlebury(root, Split::Test, &test)?;
        let train: Vec<Sample> = (0..train)
            .map(|i| scene(&format!("Train{i:02}"), size.0, size.1, seed + 100 + i as u64))
            .collect();
        write_middlebury(root, Split::Train, &train)
    }
}

#[cfg(test)]
mod tests {
    use super::synthetic::*;
    use super::*;

    #[test]
    fn middlebury_round_trip_and_test_split() {
        let dir = tempfile::tempdir().unwrap();
        middlebury_tree(dir.path(), (40, 48), 2, 7).unwrap();
        // the misspelt directory name is accepted
        let test_dir = dir.path().join("test");
        fs::rename(test_dir.join("Moebius"), test_dir.join("Mobeius")).unwrap();
        let spec = DatasetSpec::new(dir.path(), DatasetKind::Middlebury2005, Split::Test);
        let samples = load_dataset(&spec).unwrap();
        let names: Vec<_> = samples.iter().map(|s| s.name.as_str()).collect();
        assert_eq!(names, MIDDLEBURY_TEST_SCENES);
        assert_eq!(samples[0].dataset_range, 255.0);
        assert_eq!(samples[0], scene("Art", 40, 48, 7).with_image_quantized());
        assert_eq!(load_dataset(&spec).unwrap(), samples);
        for s in &samples {
            for (&d, &m) in s.depth.values().iter().zip(s.mask.flags()) {
                assert_eq!(m, d > 0.0);
            }
        }
        let train = load_dataset(&DatasetSpec::new(dir.path(), DatasetKind::Middlebury2005, Split::Train)).unwrap();
        assert_eq!(train.len(), 2);
    }

    impl Sample {
        fn with_image_quantized(mut self) -> Self {
            let (h, w) = self.image.dims();
            let data = self.image.data().iter().map(|v| (v * 255.0).round() / 255.0).collect();
            self.image = ImagePlane::new(h, w, data).unwrap();
            self
        }
    }

    #[test]
    fn missing_scene_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        middlebury_tree(dir.path(), (16, 16), 0, 1).unwrap();
        let victim = dir.path().join("test/Dolls/view1.png");
        fs::remove_file(&victim).unwrap();
        let err = load_dataset(&DatasetSpec::new(dir.path(), DatasetKind::Middlebury2005, Split::Test)).unwrap_err();
        assert!(matches!(&err, Error::Load { path, .. } if path == &victim), "{err}");
        fs::write(dir.path().join("test/Art/disp1.png"), b"not a png").unwrap();
        let err = load_dataset(&DatasetSpec::new(dir.path(), DatasetKind::Middlebury2005, Split::Test)).unwrap_err();
        assert!(err.to_string().contains("disp1.png"), "{err}");
    }

    #[test]
    fn sixteen_bit_disparity_uses_full_range() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = scene("Art", 16, 16, 3);
        s.depth = s.depth.map(Units::DisparityLevels, |v| v * 200.0).unwrap();
        s.dataset_range = 65535.0;
        write_middlebury(dir.path(), Split::Train, &[s]).unwrap();
        let loaded = load_dataset(&DatasetSpec::new(dir.path(), DatasetKind::Middlebury2005, Split::Train)).unwrap();
        assert_eq!(loaded[0].dataset_range, 65535.0);
    }

    #[test]
    fn nyu_split_by_index() {
        let dir = tempfile::tempdir().unwrap();
        let samples: Vec<Sample> = (0..NYU_TOTAL)
            .map(|i| {
                let depth = Grid2D::from_fn(2, 2, Units::Meters, |y, x| 0.5 + (i % 9) as f64 + 0.25 * (y + x) as f64).unwrap();
                let image = ImagePlane::new(2, 2, vec![0.5; 12]).unwrap();
                Sample::new(i.to_string(), depth, image, Mask::all_valid(2, 2), NYU_RANGE_METERS).unwrap()
            })
            .collect();
        write_nyu(dir.path(), &samples).unwrap();
        let train = load_dataset(&DatasetSpec::new(dir.path(), DatasetKind::NyuV2, Split::Train)).unwrap();
        let test = load_dataset(&DatasetSpec::new(dir.path(), DatasetKind::NyuV2, Split::Test)).unwrap();
        assert_eq!((train.len(), test.len()), (1000, 449));
        assert_eq!(test[0].name, "1000");
        assert_eq!(test[0].dataset_range, 10.0);
        assert_eq!(test[0].depth.values(), samples[1000].depth.values());
    }

    #[test]
    fn out_of_range_depth_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let depth = Grid2D::constant(2, 2, 12.0, Units::Meters).unwrap();
        write_depth_bin(&dir.path().join("depth/0.bin").tap_dir(), &depth).unwrap();
        let image = ImagePlane::new(2, 2, vec![0.5; 12]).unwrap();
        fs::create_dir_all(dir.path().join("rgb")).unwrap();
        write_rgb(&dir.path().join("rgb/0.png"), &image).unwrap();
        let err = load_dataset(&DatasetSpec::new(dir.path(), DatasetKind::NyuV2, Split::Train)).unwrap_err();
        assert!(err.to_string().contains("0.bin"), "{err}");
    }

    trait TapDir {
        fn tap_dir(self) -> Self;
    }

    impl TapDir for PathBuf {
        fn tap_dir(self) -> Self {
            fs::create_dir_all(self.parent().unwrap()).unwrap();
            self
        }
    }

    #[test]
    fn test_only_kinds() {
        let spec = DatasetSpec::new("/nonexistent", DatasetKind::Lu, Split::Train);
        assert!(matches!(load_dataset(&spec), Err(Error::Argument(_))));
        assert!(matches!(DatasetKind::parse("kitti"), Err(Error::Argument(_))));
        assert_eq!(DatasetKind::parse("nyu_v2").unwrap(), DatasetKind::NyuV2);
    }

    #[test]
    fn degrade_crops_to_divisible_size() {
        let s = scene("Art", 260, 348, 1);
        let (lr, c) = degrade(&s, 8, 4).unwrap();
        assert_eq!(c.dims(), (256, 320));
        assert_eq!(lr.dims(), (32, 40));
        assert_eq!(c.depth.get(0, 0), s.depth.get(2, 14));
        assert_eq!(c.image.pixel(255, 319), s.image.pixel(257, 333));
        assert_eq!(c.mask.flags()[0], s.mask.flags()[2 * 348 + 14]);
        assert_eq!(degrade(&s, 8, 4).unwrap(), (lr, c));
        let flat = Sample::new(
            "flat",
            Grid2D::constant(64, 64, 51.0, Units::DisparityLevels).unwrap(),
            ImagePlane::new(64, 64, vec![0.0; 3 * 64 * 64]).unwrap(),
            Mask::all_valid(64, 64),
            255.0,
        )
        .unwrap();
        let (lr, _) = degrade(&flat, 4, 2).unwrap();
        assert!(lr.values().iter().all(|&v| (v - 0.2).abs() < 1e-12));
        assert!(matches!(degrade(&scene("s", 60, 60, 1), 16, 4), Err(Error::Dimension(_))));
    }

    #[test]
    fn stream_is_deterministic_and_filtered() {
        let samples = vec![scene("a", 96, 128, 1), scene("b", 128, 96, 2)];
        let cfg = StreamConfig {
            scale: 16,
            patch: 32,
            stride: 16,
            batch_size: 3,
            seed: 11,
        };
        let mut s1 = training_stream(&samples, cfg).unwrap();
        let mut s2 = training_stream(&samples, cfg).unwrap();
        for _ in 0..100 {
            let (a, b) = (s1.next_batch().unwrap(), s2.next_batch().unwrap());
            assert_eq!(a.gt, b.gt);
            assert_eq!(a.len(), 3);
            for (lr, m) in a.d_lr.iter().zip(&a.mask) {
                assert_eq!(lr.dims(), (2, 2));
                assert!(m.valid_fraction() >= 0.5);
            }
        }
        assert!(s1.epoch() > 0);
        let holes = Sample::new(
            "holes",
            Grid2D::constant(32, 32, 0.0, Units::DisparityLevels).unwrap(),
            ImagePlane::new(32, 32, vec![0.0; 3 * 32 * 32]).unwrap(),
            Mask::new(32, 32, vec![false; 1024]).unwrap(),
            255.0,
        )
        .unwrap();
        assert!(matches!(training_stream(&[holes], cfg), Err(Error::Degenerate(_))));
    }

    #[test]
    fn patch_for_scale_sixteen() {
        let s = scene("a", 128, 128, 5);
        let cfg = StreamConfig {
            scale: 16,
            patch: default_patch(16),
            stride: default_patch(16),
            batch_size: 1,
            seed: 0,
        };
        let b = training_stream(&[s], cfg).unwrap().next_batch().unwrap();
        assert_eq!(b.d_lr[0].dims(), (8, 8));
    }
}
