//! Masked MAD/RMSE in native dataset units, per-sample evaluation, CSV
//! tables and error heat maps.

use std::fmt::Write as _;
use std::path::Path;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::dataio::{degrade, DatasetKind, Sample};
use crate::error::{Error, Result};
use crate::exec;
use crate::model::{predict, predict_tiled, Rsag};
use crate::numerics::{denormalize, Grid2D, Mask};
use crate::params::ParamStore;
use crate::tensor::Real;

/// Pixels within `margin` of the border are ignored.
fn valid_pairs<'a>(
    pred: &'a Grid2D,
    gt: &'a Grid2D,
    mask: &'a Mask,
    margin: usize,
) -> Result<impl Iterator<Item = (f64, f64)> + 'a> {
    if pred.dims() != gt.dims() || mask.dims() != gt.dims() {
        return Err(Error::Dimension(format!(
            "prediction {:?}, ground truth {:?} and mask {:?} differ",
            pred.dims(),
            gt.dims(),
            mask.dims()
        )));
    }
    if pred.units() != gt.units() {
        return Err(Error::Argument(format!(
            "prediction in {:?} but ground truth in {:?}",
            pred.units(),
            gt.units()
        )));
    }
    let (h, w) = gt.dims();
    Ok((0..h * w).filter_map(move |i| {
        let (y, x) = (i / w, i % w);
        let inside = y >= margin && x >= margin && y + margin < h && x + margin < w;
        (inside && mask.flags()[i]).then(|| (pred.values()[i], gt.values()[i]))
    }))
}

fn reduce(pred: &Grid2D, gt: &Grid2D, mask: &Mask, margin: usize, f: impl Fn(f64) -> f64) -> Result<(f64, usize)> {
    let mut sum = 0.0;
    let mut n = 0;
    for (p, g) in valid_pairs(pred, gt, mask, margin)? {
        sum += f(p - g);
        n += 1;
    }
    if n == 0 {
        return Err(Error::Degenerate("no valid pixel to evaluate".into()));
    }
    Ok((sum / n as f64, n))
}

/// Mean absolute difference over valid pixels.
pub fn mad(pred: &Grid2D, gt: &Grid2D, mask: &Mask) -> Result<f64> {
    mad_with_margin(pred, gt, mask, 0)
}

pub fn mad_with_margin(pred: &Grid2D, gt: &Grid2D, mask: &Mask, margin: usize) -> Result<f64> {
    reduce(pred, gt, mask, margin, f64::abs).map(|r| r.0)
}

/// Root mean squared error over valid pixels.
pub fn rmse(pred: &Grid2D, gt: &Grid2D, mask: &Mask) -> Result<f64> {
    rmse_with_margin(pred, gt, mask, 0)
}

pub fn rmse_with_margin(pred: &Grid2D, gt: &Grid2D, mask: &Mask, margin: usize) -> Result<f64> {
    reduce(pred, gt, mask, margin, |d| d * d).map(|r| r.0.sqrt())
}

pub const CM_PER_METER: f64 = 100.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    pub name: String,
    pub scale: usize,
    pub mad: f64,
    pub rmse: f64,
    pub valid_count: usize,
}

impl MetricResult {
    /// Metrics of `pred` against `gt`, both in the same native units.
    /// Metric depth is reported in centimetres when `centimeters` is set.
    pub fn compute(
        name: &str,
        scale: usize,
        pred: &Grid2D,
        gt: &Grid2D,
        mask: &Mask,
        margin: usize,
        centimeters: bool,
    ) -> Result<Self> {
        let factor = if centimeters { CM_PER_METER } else { 1.0 };
        let (abs, n) = reduce(pred, gt, mask, margin, f64::abs)?;
        let (sq, _) = reduce(pred, gt, mask, margin, |d| d * d)?;
        Ok(Self {
            name: name.to_string(),
            scale,
            mad: abs * factor,
            rmse: sq.sqrt() * factor,
            valid_count: n,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub scale: usize,
    pub margin: usize,
    /// Tile size for inference; `None` runs each image in one pass.
    pub tile: Option<usize>,
    pub tile_margin: usize,
    /// Normalization constant the model was trained with, if known.
    pub trained_range: Option<f64>,
}

/// One evaluated sample with its prediction in native units.
#[derive(Debug, Clone)]
pub struct SampleEval {
    pub metrics: MetricResult,
    pub prediction: Grid2D,
    pub ground_truth: Sample,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<MetricResult>,
    pub mean: MetricResult,
}

pub fn evaluate_sample<T: Real>(
    model: &Rsag,
    params: &ParamStore<T>,
    sample: &Sample,
    kind: DatasetKind,
    options: &EvalOptions,
) -> Result<SampleEval> {
    if let Some(r) = options.trained_range {
        if r != sample.dataset_range {
            return Err(Error::Config(format!(
                "{}: dataset range {} differs from the checkpoint's {r}",
                sample.name, sample.dataset_range
            )));
        }
    }
    if options.scale != model.config.scale {
        return Err(Error::Config(format!(
            "evaluation scale {} differs from the model's {}",
            options.scale, model.config.scale
        )));
    }
    let (d_lr, cropped) = degrade(sample, options.scale, model.config.pyramid_levels)?;
    let pred = match options.tile {
        Some(t) => predict_tiled(model, params, &d_lr, &cropped.image, t, options.tile_margin)?,
        None => predict(model, params, &d_lr, &cropped.image)?,
    };
    let pred = denormalize(&pred, sample.dataset_range, cropped.depth.units())?;
    let metrics = MetricResult::compute(
        &sample.name,
        options.scale,
        &pred,
        &cropped.depth,
        &cropped.mask,
        options.margin,
        kind.reports_centimeters(),
    )?;
    Ok(SampleEval {
        metrics,
        prediction: pred,
        ground_truth: cropped,
    })
}

/// Evaluate every sample; rows keep the sample order.
pub fn evaluate<T: Real>(
    model: &Rsag,
    params: &ParamStore<T>,
    samples: &[Sample],
    kind: DatasetKind,
    options: &EvalOptions,
) -> Result<(EvalReport, Vec<SampleEval>)> {
    let evals = exec::map_indexed(samples.len(), |i| evaluate_sample(model, params, &samples[i], kind, options))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<MetricResult> = evals.iter().map(|e| e.metrics.clone()).collect();
    Ok((summarize(rows, options.scale)?, evals))
}

/// Attach the mean row.
pub fn summarize(rows: Vec<MetricResult>, scale: usize) -> Result<EvalReport> {
    if rows.is_empty() {
        return Err(Error::Degenerate("nothing was evaluated".into()));
    }
    let n = rows.len() as f64;
    let mean = MetricResult {
        name: "mean".into(),
        scale,
        mad: rows.iter().map(|r| r.mad).sum::<f64>() / n,
        rmse: rows.iter().map(|r| r.rmse).sum::<f64>() / n,
        valid_count: rows.iter().map(|r| r.valid_count).sum(),
    };
    Ok(EvalReport { rows, mean })
}

pub const CSV_HEADER: &str = "name,scale,mad,rmse,valid_count";

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{CSV_HEADER}\n");
        for r in self.rows.iter().chain(std::iter::once(&self.mean)) {
            let _ = writeln!(out, "{},{},{:.6},{:.6},{}", r.name, r.scale, r.mad, r.rmse, r.valid_count);
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

fn heat(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    let r = (1.5 - (4.0 * t - 3.0).abs()).clamp(0.0, 1.0);
    let g = (1.5 - (4.0 * t - 2.0).abs()).clamp(0.0, 1.0);
    let b = (1.5 - (4.0 * t - 1.0).abs()).clamp(0.0, 1.0);
    [r, g, b].map(|v| (v * 255.0).round() as u8)
}

/// |pred − gt| mapped through a blue-to-red ramp saturating at `max_error`.
/// Masked pixels are black.
pub fn error_heatmap(pred: &Grid2D, gt: &Grid2D, mask: &Mask, max_error: f64) -> Result<RgbImage> {
    if pred.dims() != gt.dims() || mask.dims() != gt.dims() {
        return Err(Error::Dimension("heat map inputs differ in size".into()));
    }
    if !(max_error > 0.0) {
        return Err(Error::Argument("max_error must be positive".into()));
    }
    let (h, w) = gt.dims();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        if mask.flags()[i] {
            image::Rgb(heat((pred.values()[i] - gt.values()[i]).abs() / max_error))
        } else {
            image::Rgb([0, 0, 0])
        }
    }))
}
