//! The full network: decomposition, recurrent guidance and reconstruction,
//! plus the per-recursion smooth-L1 objective and the training step.
//!
//! Forward pass for one input:
//!
//! 1. `D^bic` = bicubic upsampling of the LR depth.
//! 2. `(D^hf, D^lf)` = decomposition of `D^bic`, computed once.
//! 3. Step 0 builds guidance from `D^bic`; step `k ≥ 1` builds it from the
//!    prediction of step `k − 1`. Each step runs the guidance branch and then
//!    the HF&LF reconstruction, yielding one prediction per step.

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, Guidance, GuidanceMode, PyramidConfig, StructureAttention};
use crate::dcn::{box_decompose, Dcn, DcnConfig};
use crate::error::{Error, Result};
use crate::graph::{smooth_l1 as smooth_l1_generic, Graph, Var};
use crate::numerics::{bicubic_resize, Direction, Grid2D, ImagePlane, Mask, Units};
use crate::optim::{Adam, AdamConfig};
use crate::params::{ParamBuilder, ParamId, ParamStore};
use crate::reconstruct::{DualHeadOutput, Hlf, HlfOutput, ReconstructConfig};
use crate::tensor::{Real, Tensor};

/// Default weight of every recursion loss.
pub const DEFAULT_LOSS_WEIGHT: f64 = 0.5;

/// Scale factors the pipeline supports.
pub const SUPPORTED_SCALES: [usize; 3] = [4, 8, 16];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossReduction {
    /// Sum over valid pixels.
    #[default]
    Sum,
    /// Sum divided by the number of valid pixels.
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Decomposition {
    #[default]
    Learned,
    /// Box-blur residual baseline (ablation only).
    Box,
}

/// Radius of the box-blur baseline decomposition.
pub const BOX_RADIUS: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RsagConfig {
    pub scale: usize,
    pub recursion_steps: usize,
    pub dcn: DcnConfig,
    pub base_channels: usize,
    pub pyramid_levels: usize,
    pub cbam_reduction: usize,
    pub lf_fusion_levels: usize,
    pub share_lfe: bool,
    /// One reconstruction network reused at every recursion step.
    pub share_hlf: bool,
    pub guidance: GuidanceMode,
    /// Guidance used at step 0.
    pub step0_guidance: GuidanceMode,
    pub decomposition: Decomposition,
    /// One weight per prediction (`recursion_steps + 1`).
    pub loss_weights: Vec<f64>,
    pub loss_reduction: LossReduction,
    pub optimizer: AdamConfig,
    pub seed: u64,
}

impl Default for RsagConfig {
    fn default() -> Self {
        Self {
            scale: 8,
            recursion_steps: 2,
            dcn: DcnConfig::default(),
            base_channels: 32,
            pyramid_levels: 4,
            cbam_reduction: 16,
            lf_fusion_levels: 3,
            share_lfe: false,
            share_hlf: true,
            guidance: GuidanceMode::StructureAttention,
            step0_guidance: GuidanceMode::StructureAttention,
            decomposition: Decomposition::Learned,
            loss_weights: vec![DEFAULT_LOSS_WEIGHT; 3],
            loss_reduction: LossReduction::Sum,
            optimizer: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl RsagConfig {
    pub fn pyramid(&self) -> PyramidConfig {
        PyramidConfig {
            base_channels: self.base_channels,
            levels: self.pyramid_levels,
        }
    }

    /// Smallest HR side the model accepts as a training patch: divisible
    /// by the scale and by the pyramid downsampling.
    pub fn patch_divisor(&self) -> usize {
        let (a, b) = (self.scale, self.pyramid().divisor());
        let mut gcd = (a, b);
        while gcd.1 != 0 {
            gcd = (gcd.1, gcd.0 % gcd.1);
        }
        a / gcd.0 * b
    }

    /// Resize `loss_weights` to `recursion_steps + 1` entries of the default.
    pub fn with_default_weights(mut self) -> Self {
        self.loss_weights = vec![DEFAULT_LOSS_WEIGHT; self.recursion_steps + 1];
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !SUPPORTED_SCALES.contains(&self.scale) {
            return Err(Error::Config(format!(
                "scale must be one of {SUPPORTED_SCALES:?}, got {}",
                self.scale
            )));
        }
        if self.loss_weights.len() != self.recursion_steps + 1 {
            return Err(Error::Config(format!(
                "loss_weights has {} entries, expected recursion_steps + 1 = {}",
                self.loss_weights.len(),
                self.recursion_steps + 1
            )));
        }
        if self.loss_weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if self.base_channels == 0 || self.pyramid_levels == 0 {
            return Err(Error::Config("base_channels and pyramid_levels must be positive".into()));
        }
        if self.lf_fusion_levels > self.pyramid_levels {
            return Err(Error::Config(format!(
                "lf_fusion_levels {} exceeds pyramid_levels {}",
                self.lf_fusion_levels, self.pyramid_levels
            )));
        }
        if !(self.optimizer.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Network structure; parameters live in a separate [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Rsag {
    pub config: RsagConfig,
    pub dcn: Dcn,
    pub attention: StructureAttention,
    /// A single entry when shared across steps, else one per step.
    pub hlf: Vec<Hlf>,
}

/// Graph handles of one recursion step.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub guidance: Guidance,
    pub heads: HlfOutput,
}

/// Graph handles of a full forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub d_bic: Var,
    pub hf: Var,
    pub lf: Var,
    pub dcn_intermediates: Vec<Var>,
    pub steps: Vec<StepOutput>,
}

impl ForwardOutput {
    pub fn predictions(&self) -> Vec<Var> {
        self.steps.iter().map(|s| s.heads.prediction).collect()
    }
}

impl Rsag {
    /// Build the network and initialize its parameters from `config.seed`.
    pub fn new<T: Real>(config: RsagConfig) -> Result<(Self, ParamStore<T>)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut pb = ParamBuilder::new(&mut store, config.seed);
        let dcn = Dcn::new(&mut pb, &config.dcn)?;
        let attention = StructureAttention::new(
            &mut pb,
            AttentionConfig {
                pyramid: config.pyramid(),
                reduction: config.cbam_reduction,
                share_lfe: config.share_lfe,
            },
        )?;
        let rc = ReconstructConfig {
            pyramid: config.pyramid(),
            reduction: config.cbam_reduction,
            lf_fusion_levels: config.lf_fusion_levels,
        };
        let guidance_channels: Vec<usize> = (0..config.pyramid_levels)
            .map(|l| 2 * config.pyramid().channels(l))
            .collect();
        let copies = if config.share_hlf { 1 } else { config.recursion_steps + 1 };
        let hlf = (0..copies)
            .map(|k| {
                let name = if config.share_hlf { "hlf".to_string() } else { format!("hlf{k}") };
                Hlf::new(&mut pb, &name, rc, &guidance_channels)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((
            Self {
                config,
                dcn,
                attention,
                hlf,
            },
            store,
        ))
    }

    fn hlf_for(&self, step: usize) -> &Hlf {
        &self.hlf[step.min(self.hlf.len() - 1)]
    }

    fn mode_for(&self, step: usize) -> GuidanceMode {
        if step == 0 {
            self.config.step0_guidance
        } else {
            self.config.guidance
        }
    }

    /// Record the forward pass from an upsampled depth map onwards.
    pub fn forward_graph<T: Real>(&self, g: &mut Graph<'_, T>, d_bic: Var, image: Var) -> Result<ForwardOutput> {
        let [n, c, h, w] = g.shape(d_bic);
        let [ni, ci, hi, wi] = g.shape(image);
        if c != 1 || ci != 3 || n != ni || (h, w) != (hi, wi) {
            return Err(Error::Dimension(format!(
                "depth {:?} and image {:?} are not aligned",
                g.shape(d_bic),
                g.shape(image)
            )));
        }
        self.config.pyramid().check_dims(h, w)?;
        let (hf, lf, dcn_intermediates) = match self.config.decomposition {
            Decomposition::Learned => {
                let out = self.dcn.forward(g, d_bic);
                (out.hf, out.lf, out.intermediates)
            }
            Decomposition::Box => {
                let (hf, lf) = box_decompose(g, d_bic, BOX_RADIUS);
                (hf, lf, vec![hf])
            }
        };
        let image_feats = self.attention.image_features(g, image)?;
        let mut guidance_depth = d_bic;
        let mut steps = Vec::with_capacity(self.config.recursion_steps + 1);
        for k in 0..=self.config.recursion_steps {
            let guidance = self
                .attention
                .forward(g, guidance_depth, &image_feats, self.mode_for(k))?;
            let heads = self.hlf_for(k).forward(g, &guidance.levels, lf, hf)?;
            g.tag(format!("step{k}.prediction"), heads.prediction);
            guidance_depth = heads.prediction;
            steps.push(StepOutput { guidance, heads });
        }
        Ok(ForwardOutput {
            d_bic,
            hf,
            lf,
            dcn_intermediates,
            steps,
        })
    }

    /// Parameter groups by module, for diagnostics and connectivity checks.
    pub fn param_groups(&self) -> Vec<(String, Vec<ParamId>)> {
        let mut groups = vec![("dcn".to_string(), self.dcn.params())];
        groups.push(("attention".into(), self.attention.params()));
        for (k, h) in self.hlf.iter().enumerate() {
            groups.push((format!("hlf{k}.encoder"), h.encoder_params()));
            groups.push((format!("hlf{k}.decoder"), h.decoder_params()));
            groups.push((format!("hlf{k}.fusion"), h.fusion_params()));
            groups.push((format!("hlf{k}.lf"), h.lf.params()));
        }
        groups
    }
}

/// Bicubic-upsample a batch of LR maps to a stacked N×1×H×W tensor.
pub fn upsample_batch<T: Real>(d_lr: &[Grid2D], scale: usize) -> Result<Tensor<T>> {
    let ups = d_lr
        .iter()
        .map(|d| bicubic_resize(d, scale, Direction::Up).map(|g| g.to_tensor()))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&ups))
}

/// Concrete outputs of a forward pass on one input.
#[derive(Debug, Clone)]
pub struct RecursionTrace<T> {
    pub d_bic: Grid2D,
    pub hf: Grid2D,
    pub lf: Grid2D,
    /// Guidance features `G_k` per step, per level.
    pub guidance: Vec<Vec<Tensor<T>>>,
    pub outputs: Vec<DualHeadOutput>,
}

impl<T> RecursionTrace<T> {
    pub fn predictions(&self) -> Vec<&Grid2D> {
        self.outputs.iter().map(|o| &o.prediction).collect()
    }

    pub fn final_prediction(&self) -> &Grid2D {
        &self.outputs.last().expect("at least one step").prediction
    }
}

fn check_pair(d_lr: &Grid2D, image: &ImagePlane, scale: usize) -> Result<()> {
    let (h, w) = d_lr.dims();
    if image.dims() != (h * scale, w * scale) {
        return Err(Error::Dimension(format!(
            "LR depth {h}x{w} at scale {scale} does not match image {:?}",
            image.dims()
        )));
    }
    Ok(())
}

/// Run the recurrent forward pass on one LR depth map and its guidance image.
pub fn forward_recurrent<T: Real>(
    model: &Rsag,
    params: &ParamStore<T>,
    d_lr: &Grid2D,
    image: &ImagePlane,
) -> Result<RecursionTrace<T>> {
    check_pair(d_lr, image, model.config.scale)?;
    let mut g = Graph::new(params);
    let d_bic = g.input(upsample_batch(std::slice::from_ref(d_lr), model.config.scale)?);
    let y = g.input(image.to_tensor());
    let out = model.forward_graph(&mut g, d_bic, y)?;
    let grid = |v: Var, units| Grid2D::from_tensor(g.value(v), 0, 0, units);
    Ok(RecursionTrace {
        d_bic: grid(out.d_bic, d_lr.units())?,
        hf: grid(out.hf, Units::Relative)?,
        lf: grid(out.lf, Units::Relative)?,
        guidance: out
            .steps
            .iter()
            .map(|s| s.guidance.levels.iter().map(|&v| g.value(v).clone()).collect())
            .collect(),
        outputs: out
            .steps
            .iter()
            .map(|s| DualHeadOutput::from_graph(&g, &s.heads, 0))
            .collect::<Result<_>>()?,
    })
}

/// Final prediction clamped to [0, 1].
pub fn predict<T: Real>(model: &Rsag, params: &ParamStore<T>, d_lr: &Grid2D, image: &ImagePlane) -> Result<Grid2D> {
    check_pair(d_lr, image, model.config.scale)?;
    let mut g = Graph::new(params);
    let d_bic = g.input(upsample_batch(std::slice::from_ref(d_lr), model.config.scale)?);
    let y = g.input(image.to_tensor());
    let out = model.forward_graph(&mut g, d_bic, y)?;
    let last = *out.predictions().last().expect("at least one step");
    Ok(Grid2D::from_tensor(g.value(last), 0, 0, Units::Relative)?.clamp_normalized())
}

/// [`predict`] over overlapping tiles to bound memory on large inputs.
///
/// Each tile is extended by `margin` pixels per side (clipped to the image)
/// and only its core is kept. `tile` and `margin` must be multiples of the
/// pyramid divisor. Global pooling inside the attention gates sees only the
/// extended tile, so tiled and untiled results can differ slightly.
pub fn predict_tiled<T: Real>(
    model: &Rsag,
    params: &ParamStore<T>,
    d_lr: &Grid2D,
    image: &ImagePlane,
    tile: usize,
    margin: usize,
) -> Result<Grid2D> {
    check_pair(d_lr, image, model.config.scale)?;
    let (h, w) = image.dims();
    if h <= tile && w <= tile {
        return predict(model, params, d_lr, image);
    }
    let div = model.config.pyramid().divisor();
    if tile == 0 || tile % div != 0 || margin % div != 0 {
        return Err(Error::Argument(format!(
            "tile {tile} and margin {margin} must be positive multiples of {div}"
        )));
    }
    model.config.pyramid().check_dims(h, w)?;
    let d_bic = bicubic_resize(d_lr, model.config.scale, Direction::Up)?;
    let mut out = vec![0.0; h * w];
    for y0 in (0..h).step_by(tile) {
        for x0 in (0..w).step_by(tile) {
            let (y1, x1) = ((y0 + tile).min(h), (x0 + tile).min(w));
            let (wy0, wx0) = (y0.saturating_sub(margin), x0.saturating_sub(margin));
            let (wy1, wx1) = ((y1 + margin).min(h), (x1 + margin).min(w));
            let bic = d_bic.crop(wy0, wx0, wy1 - wy0, wx1 - wx0)?;
            let img = image.crop(wy0, wx0, wy1 - wy0, wx1 - wx0)?;
            let mut g = Graph::new(params);
            let dv = g.input(bic.to_tensor());
            let iv = g.input(img.to_tensor());
            let fo = model.forward_graph(&mut g, dv, iv)?;
            let last = *fo.predictions().last().expect("at least one step");
            let pred = g.value(last);
            let pw = wx1 - wx0;
            for y in y0..y1 {
                for x in x0..x1 {
                    let v = pred.data()[(y - wy0) * pw + (x - wx0)].as_f64();
                    out[y * w + x] = v.clamp(0.0, 1.0);
                }
            }
        }
    }
    Grid2D::new(h, w, out, Units::Normalized)
}

/// Smooth-L1 penalty: `0.5x²` if `|x| < 1`, else `|x| − 0.5`.
pub fn smooth_l1(x: f64) -> f64 {
    smooth_l1_generic(x)
}

/// Per-recursion and total losses of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    /// `L_k` for each prediction.
    pub per_step: Vec<f64>,
    /// `Σ λ_k L_k`.
    pub total: f64,
    pub pixel_count: usize,
    /// Number of valid (unmasked) pixels.
    pub valid_count: usize,
}

fn check_weights(cfg: &RsagConfig, steps: usize) -> Result<()> {
    if cfg.loss_weights.len() != steps {
        return Err(Error::Config(format!(
            "{} loss weights for {steps} predictions",
            cfg.loss_weights.len()
        )));
    }
    Ok(())
}

/// Losses of concrete predictions against a normalized ground truth.
pub fn total_loss<T>(trace: &RecursionTrace<T>, gt: &Grid2D, mask: &Mask, cfg: &RsagConfig) -> Result<LossReport> {
    let preds = trace.predictions();
    check_weights(cfg, preds.len())?;
    let valid = mask.count();
    if valid == 0 {
        return Err(Error::Degenerate("loss mask has no valid pixel".into()));
    }
    let mut per_step = Vec::with_capacity(preds.len());
    for p in &preds {
        if p.dims() != gt.dims() || mask.dims() != gt.dims() {
            return Err(Error::Dimension("prediction, ground truth and mask differ".into()));
        }
        let sum: f64 = p
            .values()
            .iter()
            .zip(gt.values())
            .zip(mask.flags())
            .filter(|(_, &m)| m)
            .map(|((a, b), _)| smooth_l1(a - b))
            .sum();
        per_step.push(match cfg.loss_reduction {
            LossReduction::Sum => sum,
            LossReduction::Mean => sum / valid as f64,
        });
    }
    let total = per_step.iter().zip(&cfg.loss_weights).map(|(l, w)| l * w).sum();
    Ok(LossReport {
        per_step,
        total,
        pixel_count: gt.values().len(),
        valid_count: valid,
    })
}

/// Record the weighted loss on a graph. Returns the total and per-step vars.
pub fn loss_graph<T: Real>(
    g: &mut Graph<'_, T>,
    predictions: &[Var],
    gt: &Tensor<T>,
    mask: &Tensor<T>,
    cfg: &RsagConfig,
) -> Result<(Var, Vec<Var>)> {
    check_weights(cfg, predictions.len())?;
    let valid = mask.data().iter().filter(|&&m| m != T::zero()).count();
    if valid == 0 {
        return Err(Error::Degenerate("loss mask has no valid pixel".into()));
    }
    let weight = match cfg.loss_reduction {
        LossReduction::Sum => mask.clone(),
        LossReduction::Mean => {
            let inv = T::one() / T::from_usize(valid).unwrap();
            mask.map(|m| m * inv)
        }
    };
    let mut per_step = Vec::with_capacity(predictions.len());
    let mut total: Option<Var> = None;
    for (&p, &lambda) in predictions.iter().zip(&cfg.loss_weights) {
        if g.shape(p) != gt.shape() {
            return Err(Error::Dimension(format!(
                "prediction {:?} and ground truth {:?} differ",
                g.shape(p),
                gt.shape()
            )));
        }
        let l = g.smooth_l1_loss(p, gt.clone(), weight.clone());
        per_step.push(l);
        let wl = g.scale(l, T::from_f64_lossy(lambda));
        total = Some(match total {
            Some(t) => g.add(t, wl),
            None => wl,
        });
    }
    Ok((total.expect("at least one prediction"), per_step))
}

/// One training batch in normalized units.
#[derive(Debug, Clone, Default)]
pub struct Batch {
    pub d_lr: Vec<Grid2D>,
    pub image: Vec<ImagePlane>,
    pub gt: Vec<Grid2D>,
    pub mask: Vec<Mask>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.d_lr.len()
    }

    pub fn is_empty(&self) -> bool {
        self.d_lr.is_empty()
    }

    pub fn push(&mut self, d_lr: Grid2D, image: ImagePlane, gt: Grid2D, mask: Mask) {
        self.d_lr.push(d_lr);
        self.image.push(image);
        self.gt.push(gt);
        self.mask.push(mask);
    }
}

/// Loss report plus the gradients of its total.
pub fn loss_and_gradients<T: Real>(
    model: &Rsag,
    params: &ParamStore<T>,
    batch: &Batch,
) -> Result<(LossReport, crate::graph::Gradients<T>)> {
    if batch.is_empty() {
        return Err(Error::Degenerate("empty batch".into()));
    }
    let n = batch.len();
    if batch.image.len() != n || batch.gt.len() != n || batch.mask.len() != n {
        return Err(Error::Dimension("batch fields differ in length".into()));
    }
    for i in 0..n {
        check_pair(&batch.d_lr[i], &batch.image[i], model.config.scale)?;
        if batch.gt[i].dims() != batch.image[i].dims() || batch.mask[i].dims() != batch.image[i].dims() {
            return Err(Error::Dimension(format!("batch item {i}: ground truth misaligned")));
        }
    }
    let mut g = Graph::new(params);
    let d_bic = g.input(upsample_batch(&batch.d_lr, model.config.scale)?);
    let images: Vec<Tensor<T>> = batch.image.iter().map(ImagePlane::to_tensor).collect();
    let y = g.input(Tensor::stack(&images));
    let out = model.forward_graph(&mut g, d_bic, y)?;
    let gt = Tensor::stack(&batch.gt.iter().map(Grid2D::to_tensor).collect::<Vec<_>>());
    let mask = Tensor::stack(&batch.mask.iter().map(Mask::to_tensor).collect::<Vec<_>>());
    let (total, per_step) = loss_graph(&mut g, &out.predictions(), &gt, &mask, &model.config)?;
    let report = LossReport {
        per_step: per_step.iter().map(|&v| g.value(v).data()[0].as_f64()).collect(),
        total: g.value(total).data()[0].as_f64(),
        pixel_count: gt.len(),
        valid_count: mask.data().iter().filter(|&&m| m != T::zero()).count(),
    };
    if !report.total.is_finite() {
        return Err(Error::NonFinite {
            step: 0,
            diagnostics: g.diagnostics(),
        });
    }
    let grads = g.backward(total);
    Ok((report, grads))
}

/// One optimizer update on the weighted loss of `batch`.
pub fn train_step<T: Real>(
    model: &Rsag,
    params: &mut ParamStore<T>,
    optimizer: &mut Adam<T>,
    batch: &Batch,
) -> Result<LossReport> {
    let (report, grads) = loss_and_gradients(model, params, batch).map_err(|e| match e {
        Error::NonFinite { diagnostics, .. } => Error::NonFinite {
            step: optimizer.steps(),
            diagnostics,
        },
        other => other,
    })?;
    optimizer.step(params, &grads);
    Ok(report)
}

/// Model, parameters and optimizer state bundled for a training run.
pub struct Trainer<T> {
    pub model: Rsag,
    pub params: ParamStore<T>,
    pub optimizer: Adam<T>,
}

impl<T: Real> Trainer<T> {
    pub fn new(config: RsagConfig) -> Result<Self> {
        let (model, params) = Rsag::new::<T>(config)?;
        let optimizer = Adam::new(model.config.optimizer, &params);
        Ok(Self {
            model,
            params,
            optimizer,
        })
    }

    pub fn step(&mut self, batch: &Batch) -> Result<LossReport> {
        train_step(&self.model, &mut self.params, &mut self.optimizer, batch)
    }
}
