//! Model inputs for infer, decompose and viz: a dataset split or one
//! depth/image pair given on the command line.

use std::path::Path;

use anyhow::{bail, Context, Result};
use rsag::config::ConfigFile;
use rsag::dataio::{self, degrade, read_depth_bin, read_gray, read_rgb, Sample, NYU_RANGE_METERS};
use rsag::model::RsagConfig;
use rsag::numerics::{normalize, Grid2D, ImagePlane, Mask, Units};

pub struct Input {
    pub name: String,
    /// Normalized LR depth.
    pub d_lr: Grid2D,
    pub image: ImagePlane,
    pub dataset_range: f64,
    pub units: Units,
}

fn read_depth(path: &Path, range: Option<f64>) -> Result<(Grid2D, f64)> {
    if path.extension().is_some_and(|e| e == "bin") {
        let d = read_depth_bin(path)?;
        Ok((d, range.unwrap_or(NYU_RANGE_METERS)))
    } else {
        let (d, bit_max) = read_gray(path)?;
        Ok((d, range.unwrap_or(bit_max)))
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Center-crop an LR map and its HR image so the HR side suits the pyramid.
fn crop_lr_pair(d_lr: &Grid2D, image: &ImagePlane, model: &RsagConfig) -> Result<(Grid2D, ImagePlane)> {
    let s = model.scale;
    let (h, w) = d_lr.dims();
    if image.dims() != (h * s, w * s) {
        bail!(
            "image is {:?} but LR depth {h}x{w} at scale {s} needs {:?}",
            image.dims(),
            (h * s, w * s)
        );
    }
    let div = model.pyramid().divisor();
    let step = div / gcd(s, div);
    let (ch, cw) = (h / step * step, w / step * step);
    if ch == 0 || cw == 0 {
        bail!("LR depth {h}x{w} is too small for scale {s}");
    }
    let (y0, x0) = ((h - ch) / 2, (w - cw) / 2);
    Ok((
        d_lr.crop(y0, x0, ch, cw)?,
        image.crop(y0 * s, x0 * s, ch * s, cw * s)?,
    ))
}

fn from_sample(sample: &Sample, model: &RsagConfig) -> Result<Input> {
    let (d_lr, cropped) = degrade(sample, model.scale, model.pyramid_levels)?;
    Ok(Input {
        name: sample.name.clone(),
        d_lr,
        image: cropped.image,
        dataset_range: sample.dataset_range,
        units: sample.depth.units(),
    })
}

pub fn collect(cfg: &ConfigFile, model: &RsagConfig) -> Result<Vec<Input>> {
    match (&cfg.input_depth, &cfg.input_image) {
        (Some(dp), Some(ip)) => {
            let (depth, range) = read_depth(dp, cfg.dataset_range)?;
            let image = read_rgb(ip)?;
            let name = dp
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "input".into());
            let units = depth.units();
            if cfg.input_is_lr {
                let (d_lr, image) = crop_lr_pair(&normalize(&depth, range)?, &image, model)?;
                Ok(vec![Input {
                    name,
                    d_lr,
                    image,
                    dataset_range: range,
                    units,
                }])
            } else {
                let (h, w) = depth.dims();
                let mask = Mask::new(h, w, depth.values().iter().map(|&d| d > 0.0).collect())?;
                let sample = Sample::new(name, depth, image, mask, range)
                    .with_context(|| format!("input {}", dp.display()))?;
                Ok(vec![from_sample(&sample, model)?])
            }
        }
        _ => {
            let spec = cfg.dataset_spec(cfg.eval_split);
            dataio::load_dataset(&spec)?
                .iter()
                .map(|s| from_sample(s, model))
                .collect()
        }
    }
}
