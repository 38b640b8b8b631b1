//! Structure attention: cross-modality contrast features, channel and spatial
//! gating, and γ-weighted mixing of image features into the guidance.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{Cbam, CbamOutput, ConvPrelu};
use crate::numerics::{Grid2D, ImagePlane};
use crate::params::{ParamBuilder, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// Initial value of every γ.
pub const GAMMA_INIT: f64 = 1.0;

/// How image features are merged into the guidance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceMode {
    /// `Cat(depth, S_a + γ·image)`.
    #[default]
    StructureAttention,
    /// `Cat(depth, image)` with no attention (ablation).
    Concat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PyramidConfig {
    pub base_channels: usize,
    pub levels: usize,
}

impl PyramidConfig {
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Spatial divisor that inputs must satisfy.
    pub fn divisor(&self) -> usize {
        1 << (self.levels - 1)
    }

    pub fn check_dims(&self, h: usize, w: usize) -> Result<()> {
        let d = self.divisor();
        if h % d != 0 || w % d != 0 || h == 0 || w == 0 {
            return Err(Error::Dimension(format!(
                "{h}x{w} is not divisible by {d} ({} pyramid levels)",
                self.levels
            )));
        }
        Ok(())
    }
}

/// Learnable feature extractor: a 3×3 stem followed by stride-2 stages that
/// double the channel count.
#[derive(Debug, Clone)]
pub struct Lfe {
    pub stages: Vec<ConvPrelu>,
    pub pyramid: PyramidConfig,
}

impl Lfe {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, cin: usize, pyramid: PyramidConfig) -> Self {
        pb.scope(name, |pb| {
            let stages = (0..pyramid.levels)
                .map(|l| {
                    if l == 0 {
                        ConvPrelu::new(pb, "level0", cin, pyramid.channels(0), 3, 1)
                    } else {
                        ConvPrelu::new(
                            pb,
                            &format!("level{l}"),
                            pyramid.channels(l - 1),
                            pyramid.channels(l),
                            3,
                            2,
                        )
                    }
                })
                .collect();
            Self { stages, pyramid }
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Vec<Var>> {
        let [_, _, h, w] = g.shape(x);
        self.pyramid.check_dims(h, w)?;
        let mut levels = Vec::with_capacity(self.stages.len());
        let mut cur = x;
        for stage in &self.stages {
            cur = stage.forward(g, cur);
            levels.push(cur);
        }
        Ok(levels)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.stages.iter().flat_map(ConvPrelu::params).collect()
    }
}

/// Concrete multi-resolution features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid<T> {
    pub levels: Vec<Tensor<T>>,
}

/// Run an extractor on a single depth map.
pub fn lfe_extract<T: Real>(input: &Grid2D, lfe: &Lfe, params: &ParamStore<T>) -> Result<FeaturePyramid<T>> {
    let mut g = Graph::new(params);
    let x = g.input(input.to_tensor());
    let levels = lfe.forward(&mut g, x)?;
    Ok(FeaturePyramid {
        levels: levels.iter().map(|&v| g.value(v).clone()).collect(),
    })
}

/// Contrast features and the joint high-frequency map of one level.
#[derive(Debug, Clone, Copy)]
pub struct AttentionIntermediates {
    pub f_y1: Var,
    pub f_y2: Var,
    pub f_d1: Var,
    pub f_d2: Var,
    /// `|F_y1 − F_y2| + |F_d1 − F_d2|`.
    pub joint: Var,
}

/// One structure-attention block (one pyramid level).
#[derive(Debug, Clone)]
pub struct SaBlock {
    pub image_k1: ConvPrelu,
    pub image_k3: ConvPrelu,
    pub depth_k1: ConvPrelu,
    pub depth_k3: ConvPrelu,
    pub gate: Cbam,
    pub gamma: ParamId,
    pub channels: usize,
}

/// Outputs of [`SaBlock::forward`].
#[derive(Debug, Clone, Copy)]
pub struct SaLevel {
    pub guidance: Var,
    pub structure: Var,
    pub mixed_image: Var,
    pub contrast: AttentionIntermediates,
    pub gate: CbamOutput,
}

impl SaBlock {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, channels: usize, reduction: usize) -> Result<Self> {
        pb.scope(name, |pb| {
            Ok(Self {
                image_k1: ConvPrelu::new(pb, "image_k1", channels, channels, 1, 1),
                image_k3: ConvPrelu::new(pb, "image_k3", channels, channels, 3, 1),
                depth_k1: ConvPrelu::new(pb, "depth_k1", channels, channels, 1, 1),
                depth_k3: ConvPrelu::new(pb, "depth_k3", channels, channels, 3, 1),
                gate: Cbam::new(pb, "gate", channels, reduction)?,
                gamma: pb.constant("gamma", [1, 1, 1, 1], GAMMA_INIT),
                channels,
            })
        })
    }

    /// Image contrast pair `(F_y1, F_y2)`; independent of the depth guidance.
    pub fn image_contrast<T: Real>(&self, g: &mut Graph<'_, T>, image_feat: Var) -> (Var, Var) {
        (self.image_k1.forward(g, image_feat), self.image_k3.forward(g, image_feat))
    }

    pub fn joint_contrast<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        depth_feat: Var,
        image_contrast: (Var, Var),
    ) -> Result<AttentionIntermediates> {
        let (f_y1, f_y2) = image_contrast;
        if g.shape(depth_feat) != g.shape(f_y1) {
            return Err(Error::Dimension(format!(
                "depth features {:?} do not match image features {:?}",
                g.shape(depth_feat),
                g.shape(f_y1)
            )));
        }
        let f_d1 = self.depth_k1.forward(g, depth_feat);
        let f_d2 = self.depth_k3.forward(g, depth_feat);
        let dy = g.sub(f_y1, f_y2);
        let dy = g.abs(dy);
        let dd = g.sub(f_d1, f_d2);
        let dd = g.abs(dd);
        let joint = g.add(dy, dd);
        Ok(AttentionIntermediates {
            f_y1,
            f_y2,
            f_d1,
            f_d2,
            joint,
        })
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        depth_feat: Var,
        image_feat: Var,
        image_contrast: (Var, Var),
    ) -> Result<SaLevel> {
        let contrast = self.joint_contrast(g, depth_feat, image_contrast)?;
        let gate = self.gate.forward(g, contrast.joint);
        let gamma = g.param(self.gamma);
        let weighted = g.mul(image_feat, gamma);
        let mixed_image = g.add(gate.out, weighted);
        let guidance = g.concat(&[depth_feat, mixed_image]);
        Ok(SaLevel {
            guidance,
            structure: gate.out,
            mixed_image,
            contrast,
            gate,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = [
            self.image_k1.params(),
            self.image_k3.params(),
            self.depth_k1.params(),
            self.depth_k3.params(),
        ]
        .concat();
        p.extend(self.gate.params());
        p.push(self.gamma);
        p
    }
}

/// Image-side features, computed once per forward pass.
#[derive(Debug, Clone)]
pub struct ImageFeatures {
    pub levels: Vec<Var>,
    pub contrast: Vec<(Var, Var)>,
}

/// Per-level guidance features `G` with the attention taps.
#[derive(Debug, Clone)]
pub struct Guidance {
    pub levels: Vec<Var>,
    /// Present in structure-attention mode only.
    pub attention: Vec<SaLevel>,
}

impl Guidance {
    pub fn channels<T: Real>(&self, g: &Graph<'_, T>) -> Vec<usize> {
        self.levels.iter().map(|&v| g.shape(v)[1]).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionConfig {
    pub pyramid: PyramidConfig,
    pub reduction: usize,
    pub share_lfe: bool,
}

/// Guidance branch: extractors for both modalities and one block per level.
#[derive(Debug, Clone)]
pub struct StructureAttention {
    /// `Conv_1`: 1×1 projection of the RGB guidance image.
    pub image_proj: ConvPrelu,
    pub lfe_depth: Lfe,
    /// `None` when the depth extractor is shared.
    pub lfe_image: Option<Lfe>,
    pub blocks: Vec<SaBlock>,
    pub config: AttentionConfig,
}

impl StructureAttention {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, config: AttentionConfig) -> Result<Self> {
        pb.scope("attention", |pb| {
            let pyr = config.pyramid;
            let image_proj = ConvPrelu::new(pb, "image_proj", 3, 1, 1, 1);
            let lfe_depth = Lfe::new(pb, "lfe_depth", 1, pyr);
            let lfe_image = (!config.share_lfe).then(|| Lfe::new(pb, "lfe_image", 1, pyr));
            let blocks = (0..pyr.levels)
                .map(|l| SaBlock::new(pb, &format!("sa{l}"), pyr.channels(l), config.reduction))
                .collect::<Result<Vec<_>>>()?;
            Ok(Self {
                image_proj,
                lfe_depth,
                lfe_image,
                blocks,
                config,
            })
        })
    }

    /// `LFE(Conv_1(Y))` per level and the image contrast pairs.
    pub fn image_features<T: Real>(&self, g: &mut Graph<'_, T>, image: Var) -> Result<ImageFeatures> {
        let y = self.image_proj.forward(g, image);
        let lfe = self.lfe_image.as_ref().unwrap_or(&self.lfe_depth);
        let levels = lfe.forward(g, y)?;
        let contrast = levels
            .iter()
            .zip(&self.blocks)
            .map(|(&f, b)| b.image_contrast(g, f))
            .collect();
        Ok(ImageFeatures { levels, contrast })
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        depth_guidance: Var,
        image: &ImageFeatures,
        mode: GuidanceMode,
    ) -> Result<Guidance> {
        let depth_levels = self.lfe_depth.forward(g, depth_guidance)?;
        if depth_levels.len() != image.levels.len() {
            return Err(Error::Dimension("pyramid depth mismatch".into()));
        }
        let mut levels = Vec::with_capacity(depth_levels.len());
        let mut attention = Vec::new();
        for (l, &d) in depth_levels.iter().enumerate() {
            match mode {
                GuidanceMode::StructureAttention => {
                    let out = self.blocks[l].forward(g, d, image.levels[l], image.contrast[l])?;
                    g.tag(format!("sa.level{l}.structure"), out.structure);
                    g.tag(format!("sa.level{l}.mixed"), out.mixed_image);
                    levels.push(out.guidance);
                    attention.push(out);
                }
                GuidanceMode::Concat => {
                    levels.push(g.concat(&[d, image.levels[l]]));
                }
            }
        }
        Ok(Guidance { levels, attention })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.image_proj.params().to_vec();
        p.extend(self.lfe_depth.params());
        if let Some(l) = &self.lfe_image {
            p.extend(l.params());
        }
        for b in &self.blocks {
            p.extend(b.params());
        }
        p
    }
}

/// Guidance features for a single depth map and image.
pub fn sa_forward<T: Real>(
    depth_guidance: &Grid2D,
    image: &ImagePlane,
    sa: &StructureAttention,
    params: &ParamStore<T>,
) -> Result<Vec<Tensor<T>>> {
    if depth_guidance.dims() != image.dims() {
        return Err(Error::Dimension(format!(
            "depth {:?} and image {:?} differ",
            depth_guidance.dims(),
            image.dims()
        )));
    }
    let mut g = Graph::new(params);
    let d = g.input(depth_guidance.to_tensor());
    let y = g.input(image.to_tensor());
    let feats = sa.image_features(&mut g, y)?;
    let out = sa.forward(&mut g, d, &feats, GuidanceMode::StructureAttention)?;
    Ok(out.levels.iter().map(|&v| g.value(v).clone()).collect())
}
