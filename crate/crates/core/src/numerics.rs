//! Value planes, bicubic resampling, normalization and patch extraction.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Physical meaning of the values in a [`Grid2D`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Units {
    /// Scaled into [0, 1] by the dataset range.
    Normalized,
    DisparityLevels,
    Meters,
    /// Normalized scale without the [0, 1] bound (frequency components).
    Relative,
}

/// A single-channel H×W plane of finite values.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid2D {
    height: usize,
    width: usize,
    values: Vec<f64>,
    units: Units,
}

impl Grid2D {
    pub fn new(height: usize, width: usize, values: Vec<f64>, units: Units) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Dimension(format!("empty grid {height}x{width}")));
        }
        if values.len() != height * width {
            return Err(Error::Dimension(format!(
                "{} values for a {height}x{width} grid",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Range(format!("non-finite value {v}")));
        }
        if units == Units::Normalized {
            if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::Range(format!("normalized value {v} outside [0, 1]")));
            }
        }
        Ok(Self {
            height,
            width,
            values,
            units,
        })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        units: Units,
        f: impl Fn(usize, usize) -> f64,
    ) -> Result<Self> {
        let mut values = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                values.push(f(y, x));
            }
        }
        Self::new(height, width, values, units)
    }

    pub fn constant(height: usize, width: usize, value: f64, units: Units) -> Result<Self> {
        Self::new(height, width, vec![value; height * width], units)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn units(&self) -> Units {
        self.units
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(Error::Dimension(format!(
                "crop {h}x{w}@({y0},{x0}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut values = Vec::with_capacity(h * w);
        for y in y0..y0 + h {
            values.extend_from_slice(&self.values[y * self.width + x0..y * self.width + x0 + w]);
        }
        Ok(Self {
            height: h,
            width: w,
            values,
            units: self.units,
        })
    }

    /// Same values under different units, validating the new invariant.
    pub fn with_units(self, units: Units) -> Result<Self> {
        Self::new(self.height, self.width, self.values, units)
    }

    /// Elementwise map; the result is validated under `units`.
    pub fn map(&self, units: Units, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(
            self.height,
            self.width,
            self.values.iter().map(|&v| f(v)).collect(),
            units,
        )
    }

    /// Values clamped into [0, 1] and tagged as normalized.
    pub fn clamp_normalized(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
            units: Units::Normalized,
        }
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_vec(
            [1, 1, self.height, self.width],
            self.values.iter().map(|&v| T::from_f64_lossy(v)).collect(),
        )
    }

    /// Grid from one channel of one sample of a tensor.
    pub fn from_tensor<T: Real>(t: &Tensor<T>, n: usize, c: usize, units: Units) -> Result<Self> {
        Self::new(
            t.height(),
            t.width(),
            t.plane(n, c).iter().map(|v| v.as_f64()).collect(),
            units,
        )
    }
}

/// Validity flags aligned with a depth grid (true = valid).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    valid: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, valid: Vec<bool>) -> Result<Self> {
        if valid.len() != height * width || height == 0 || width == 0 {
            return Err(Error::Dimension(format!(
                "{} flags for a {height}x{width} mask",
                valid.len()
            )));
        }
        Ok(Self {
            height,
            width,
            valid,
        })
    }

    pub fn all_valid(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            valid: vec![true; height * width],
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn flags(&self) -> &[bool] {
        &self.valid
    }

    pub fn count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn valid_fraction(&self) -> f64 {
        self.count() as f64 / self.valid.len() as f64
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(Error::Dimension(format!(
                "mask crop {h}x{w}@({y0},{x0}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut valid = Vec::with_capacity(h * w);
        for y in y0..y0 + h {
            valid.extend_from_slice(&self.valid[y * self.width + x0..y * self.width + x0 + w]);
        }
        Ok(Self {
            height: h,
            width: w,
            valid,
        })
    }

    /// 1.0 where valid, 0.0 elsewhere, as a 1×1×H×W tensor.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_vec(
            [1, 1, self.height, self.width],
            self.valid
                .iter()
                .map(|&v| if v { T::one() } else { T::zero() })
                .collect(),
        )
    }
}

/// An RGB guidance image with channel planes scaled to [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePlane {
    height: usize,
    width: usize,
    /// Three planes, R then G then B, each row-major.
    data: Vec<f64>,
}

impl ImagePlane {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != 3 * height * width {
            return Err(Error::Dimension(format!(
                "{} values for a 3x{height}x{width} image",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Range(format!("image value {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> [f64; 3]) -> Result<Self> {
        let mut data = vec![0.0; 3 * height * width];
        for y in 0..height {
            for x in 0..width {
                let px = f(y, x);
                for c in 0..3 {
                    data[(c * height + y) * width + x] = px[c];
                }
            }
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let p = self.height * self.width;
        let i = y * self.width + x;
        [self.data[i], self.data[p + i], self.data[2 * p + i]]
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(Error::Dimension(format!(
                "image crop {h}x{w}@({y0},{x0}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(3 * h * w);
        for c in 0..3 {
            let plane = &self.data[c * self.height * self.width..(c + 1) * self.height * self.width];
            for y in y0..y0 + h {
                data.extend_from_slice(&plane[y * self.width + x0..y * self.width + x0 + w]);
            }
        }
        Ok(Self {
            height: h,
            width: w,
            data,
        })
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_vec(
            [1, 3, self.height, self.width],
            self.data.iter().map(|&v| T::from_f64_lossy(v)).collect(),
        )
    }
}

/// Resampling direction for [`bicubic_resize`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Up,
    Down,
}

/// Cubic-convolution parameter (Catmull-Rom).
pub const CUBIC_A: f64 = -0.5;

/// Cubic convolution kernel with `a = -0.5`.
pub fn cubic_kernel(x: f64) -> f64 {
    let a = CUBIC_A;
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

/// Source taps (edge-clamped indices and weights) for every output index.
fn taps(n_in: usize, n_out: usize) -> Vec<[(usize, f64); 4]> {
    let ratio = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = (o as f64 + 0.5) * ratio - 0.5;
            let base = src.floor();
            let t = src - base;
            let mut out = [(0usize, 0.0); 4];
            for (j, slot) in out.iter_mut().enumerate() {
                let offset = j as isize - 1;
                let idx = (base as isize + offset).clamp(0, n_in as isize - 1) as usize;
                *slot = (idx, cubic_kernel(t - offset as f64));
            }
            out
        })
        .collect()
}

/// Weighted tap sum taken relative to the second tap, so flat
/// neighbourhoods reproduce their value exactly.
fn blend(taps: &[(usize, f64); 4], at: impl Fn(usize) -> f64) -> f64 {
    let anchor = at(taps[1].0);
    anchor + taps.iter().map(|&(i, k)| (at(i) - anchor) * k).sum::<f64>()
}

/// Separable bicubic resize by an integer factor.
///
/// Output sample `o` reads source coordinate `(o + 0.5)·(n_in/n_out) − 0.5`
/// (half-pixel centers); out-of-range taps replicate the border. Down-sizing
/// does not widen the kernel. Normalized inputs are clamped back into [0, 1]
/// to absorb kernel overshoot.
pub fn bicubic_resize(input: &Grid2D, s: usize, direction: Direction) -> Result<Grid2D> {
    if s == 0 {
        return Err(Error::Argument("scale factor must be positive".into()));
    }
    if s == 1 {
        return Ok(input.clone());
    }
    let (h, w) = input.dims();
    let (ho, wo) = match direction {
        Direction::Up => (h * s, w * s),
        Direction::Down => {
            if h % s != 0 || w % s != 0 {
                return Err(Error::Dimension(format!(
                    "{h}x{w} is not divisible by the scale factor {s}"
                )));
            }
            (h / s, w / s)
        }
    };
    let tx = taps(w, wo);
    let ty = taps(h, ho);
    let src = input.values();
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for (x, t) in tx.iter().enumerate() {
            rows[y * wo + x] = blend(t, |i| row[i]);
        }
    }
    let mut out = vec![0.0; ho * wo];
    for (y, t) in ty.iter().enumerate() {
        for x in 0..wo {
            out[y * wo + x] = blend(t, |i| rows[i * wo + x]);
        }
    }
    if input.units() == Units::Normalized {
        out.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }
    Grid2D::new(ho, wo, out, input.units())
}

/// Divide by the dataset range into [0, 1].
pub fn normalize(input: &Grid2D, dataset_range: f64) -> Result<Grid2D> {
    if !(dataset_range > 0.0 && dataset_range.is_finite()) {
        return Err(Error::Argument(format!(
            "dataset range must be positive, got {dataset_range}"
        )));
    }
    if let Some(v) = input
        .values()
        .iter()
        .find(|&&v| !(0.0..=dataset_range).contains(&v))
    {
        return Err(Error::Range(format!(
            "value {v} outside [0, {dataset_range}]"
        )));
    }
    input.map(Units::Normalized, |v| v / dataset_range)
}

/// Inverse of [`normalize`], tagging the result with `units`.
pub fn denormalize(input: &Grid2D, dataset_range: f64, units: Units) -> Result<Grid2D> {
    if !(dataset_range > 0.0 && dataset_range.is_finite()) {
        return Err(Error::Argument(format!(
            "dataset range must be positive, got {dataset_range}"
        )));
    }
    input.map(units, |v| v * dataset_range)
}

/// One training patch.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub origin: (usize, usize),
    pub hr: Grid2D,
    pub lr: Grid2D,
    pub image: ImagePlane,
    pub mask: Mask,
}

/// Top-left corners of a `patch`-sized window slid with `stride`.
pub fn patch_origins(h: usize, w: usize, patch: usize, stride: usize) -> Result<Vec<(usize, usize)>> {
    if patch == 0 || stride == 0 {
        return Err(Error::Argument("patch and stride must be positive".into()));
    }
    if patch > h.min(w) {
        return Err(Error::Argument(format!(
            "patch {patch} exceeds image {h}x{w}"
        )));
    }
    let mut out = Vec::new();
    for y in (0..=h - patch).step_by(stride) {
        for x in (0..=w - patch).step_by(stride) {
            out.push((y, x));
        }
    }
    Ok(out)
}

/// Crop one aligned patch and derive its LR counterpart by bicubic down-sizing.
pub fn crop_patch(
    hr_depth: &Grid2D,
    hr_image: &ImagePlane,
    mask: &Mask,
    origin: (usize, usize),
    patch: usize,
    s: usize,
) -> Result<Patch> {
    let (y, x) = origin;
    let hr = hr_depth.crop(y, x, patch, patch)?;
    let lr = bicubic_resize(&hr, s, Direction::Down)?;
    Ok(Patch {
        origin,
        hr,
        lr,
        image: hr_image.crop(y, x, patch, patch)?,
        mask: mask.crop(y, x, patch, patch)?,
    })
}

/// All stride-spaced patches of one sample in a seeded random order.
pub fn extract_patches(
    hr_depth: &Grid2D,
    hr_image: &ImagePlane,
    mask: &Mask,
    patch: usize,
    stride: usize,
    s: usize,
    seed: u64,
) -> Result<Vec<Patch>> {
    let (h, w) = hr_depth.dims();
    if hr_image.dims() != (h, w) || mask.dims() != (h, w) {
        return Err(Error::Dimension(
            "depth, image and mask must share dimensions".into(),
        ));
    }
    if s == 0 || patch % s != 0 {
        return Err(Error::Argument(format!(
            "scale factor {s} does not divide patch size {patch}"
        )));
    }
    let mut origins = patch_origins(h, w, patch, stride)?;
    origins.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    origins
        .into_iter()
        .map(|o| crop_patch(hr_depth, hr_image, mask, o, patch, s))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn random_grid(h: usize, w: usize, seed: u64) -> Grid2D {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect();
        Grid2D::new(h, w, values, Units::Meters).unwrap()
    }

    /// Direct 2-D cubic convolution at every output coordinate.
    fn oracle_up(input: &Grid2D, s: usize) -> Vec<f64> {
        let (h, w) = input.dims();
        let mut out = Vec::new();
        for oy in 0..h * s {
            for ox in 0..w * s {
                let sy = (oy as f64 + 0.5) / s as f64 - 0.5;
                let sx = (ox as f64 + 0.5) / s as f64 - 0.5;
                let mut acc = 0.0;
                for iy in (sy.floor() as i64 - 1)..=(sy.floor() as i64 + 2) {
                    for ix in (sx.floor() as i64 - 1)..=(sx.floor() as i64 + 2) {
                        let wgt = cubic_kernel(sy - iy as f64) * cubic_kernel(sx - ix as f64);
                        let cy = iy.clamp(0, h as i64 - 1) as usize;
                        let cx = ix.clamp(0, w as i64 - 1) as usize;
                        acc += wgt * input.get(cy, cx);
                    }
                }
                out.push(acc);
            }
        }
        out
    }

    #[test]
    fn kernel_partition_of_unity() {
        for i in 0..=100 {
            let t = i as f64 / 100.0;
            let sum: f64 = (-1..=2).map(|j| cubic_kernel(t - j as f64)).sum();
            assert!((sum - 1.0).abs() < 1e-15);
        }
        assert_eq!(cubic_kernel(0.0), 1.0);
        assert_eq!(cubic_kernel(1.0), 0.0);
        assert_eq!(cubic_kernel(2.0), 0.0);
    }

    #[test]
    fn constant_up_by_four() {
        let g = Grid2D::constant(8, 8, 0.5, Units::Normalized).unwrap();
        let up = bicubic_resize(&g, 4, Direction::Up).unwrap();
        assert_eq!(up.dims(), (32, 32));
        assert!(up.values().iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn unit_scale_is_identity() {
        let g = random_grid(5, 7, 3);
        assert_eq!(bicubic_resize(&g, 1, Direction::Up).unwrap(), g);
        assert_eq!(bicubic_resize(&g, 1, Direction::Down).unwrap(), g);
    }

    #[test]
    fn matches_direct_convolution_oracle() {
        let g = random_grid(16, 16, 7);
        let up = bicubic_resize(&g, 2, Direction::Up).unwrap();
        let want = oracle_up(&g, 2);
        for (a, b) in up.values().iter().zip(&want) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn down_resize_errors() {
        let g = random_grid(10, 12, 1);
        assert!(matches!(
            bicubic_resize(&g, 4, Direction::Down),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            bicubic_resize(&g, 0, Direction::Up),
            Err(Error::Argument(_))
        ));
        assert_eq!(bicubic_resize(&g, 2, Direction::Down).unwrap().dims(), (5, 6));
    }

    #[test]
    fn normalization_examples() {
        let d = Grid2D::constant(1, 1, 255.0, Units::DisparityLevels).unwrap();
        assert_eq!(normalize(&d, 255.0).unwrap().values()[0], 1.0);
        let m = Grid2D::constant(1, 1, 5.0, Units::Meters).unwrap();
        assert_eq!(normalize(&m, 10.0).unwrap().values()[0], 0.5);
        let over = Grid2D::constant(1, 1, 11.0, Units::Meters).unwrap();
        assert!(matches!(normalize(&over, 10.0), Err(Error::Range(_))));
        assert!(matches!(normalize(&m, 0.0), Err(Error::Argument(_))));
    }

    #[test]
    fn patch_shapes_and_determinism() {
        let depth = random_grid(256, 256, 2);
        let image = ImagePlane::from_fn(256, 256, |y, x| [(y % 7) as f64 / 7.0, (x % 5) as f64 / 5.0, 0.5]).unwrap();
        let mask = Mask::all_valid(256, 256);
        let a = extract_patches(&depth, &image, &mask, 128, 128, 16, 9).unwrap();
        assert_eq!(a.len(), 4);
        assert!(a.iter().all(|p| p.lr.dims() == (8, 8) && p.hr.dims() == (128, 128)));
        let b = extract_patches(&depth, &image, &mask, 96, 96, 4, 9).unwrap();
        assert_eq!(b[0].lr.dims(), (24, 24));
        assert_eq!(a, extract_patches(&depth, &image, &mask, 128, 128, 16, 9).unwrap());
        assert!(matches!(
            extract_patches(&depth, &image, &mask, 300, 96, 4, 0),
            Err(Error::Argument(_))
        ));
    }

    proptest! {
        #[test]
        fn constant_grids_survive_resampling(c in 0.0f64..1.0, h in 1usize..9, w in 1usize..9, s in 1usize..5) {
            let g = Grid2D::constant(h * s, w * s, c, Units::Normalized).unwrap();
            let up = bicubic_resize(&g, s, Direction::Up).unwrap();
            prop_assert_eq!(up.dims(), (h * s * s, w * s * s));
            prop_assert!(up.values().iter().all(|v| (v - c).abs() < 1e-12));
            let down = bicubic_resize(&g, s, Direction::Down).unwrap();
            prop_assert_eq!(down.dims(), (h, w));
            prop_assert!(down.values().iter().all(|v| (v - c).abs() < 1e-12));
        }

        #[test]
        fn normalize_round_trip(values in proptest::collection::vec(0.0f64..300.0, 1..40), range in 300.0f64..1e4) {
            let g = Grid2D::new(1, values.len(), values.clone(), Units::DisparityLevels).unwrap();
            let back = denormalize(&normalize(&g, range).unwrap(), range, Units::DisparityLevels).unwrap();
            for (a, b) in back.values().iter().zip(&values) {
                prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(f64::MIN_POSITIVE));
            }
        }

        #[test]
        fn patches_are_sub_windows(seed in 0u64..1000, stride in 4usize..20) {
            let depth = random_grid(40, 36, seed);
            let image = ImagePlane::from_fn(40, 36, |y, x| [((y * x) % 3) as f64 / 2.0, 0.0, 1.0]).unwrap();
            let mask = Mask::new(40, 36, (0..40 * 36).map(|i| (i * 7 + seed as usize) % 5 != 0).collect()).unwrap();
            for p in extract_patches(&depth, &image, &mask, 16, stride, 4, seed).unwrap() {
                let (y0, x0) = p.origin;
                prop_assert!(y0 + 16 <= 40 && x0 + 16 <= 36);
                for y in 0..16 {
                    for x in 0..16 {
                        prop_assert_eq!(p.mask.flags()[y * 16 + x], mask.flags()[(y0 + y) * 36 + x0 + x]);
                        prop_assert_eq!(p.hr.get(y, x), depth.get(y0 + y, x0 + x));
                    }
                }
            }
        }
    }
}
