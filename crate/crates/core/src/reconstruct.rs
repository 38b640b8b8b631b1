//! HF&LF feature fusion: a U-Net over the high-frequency map whose decoder is
//! fused with the guidance features, plus a low-frequency refinement branch
//! fed by decoder context at several levels.

use crate::attention::PyramidConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{Cbam, Conv2d, ConvPrelu};
use crate::numerics::{Grid2D, Units};
use crate::params::{ParamBuilder, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// Weight scale of the two output heads at initialization, so that both
/// heads start close to their residual inputs.
pub const HEAD_GAIN: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReconstructConfig {
    pub pyramid: PyramidConfig,
    pub reduction: usize,
    /// Decoder levels feeding the low-frequency branch.
    pub lf_fusion_levels: usize,
}

/// Residual attention fusion of decoder features with guidance features.
#[derive(Debug, Clone)]
pub struct FuseGuidance {
    pub conv_in: ConvPrelu,
    pub gate: Cbam,
    pub conv_out: Conv2d,
}

impl FuseGuidance {
    pub fn new<T: Real>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        channels: usize,
        guidance_channels: usize,
        reduction: usize,
    ) -> Result<Self> {
        pb.scope(name, |pb| {
            Ok(Self {
                conv_in: ConvPrelu::new(pb, "conv_in", channels + guidance_channels, channels, 3, 1),
                gate: Cbam::new(pb, "gate", channels, reduction)?,
                conv_out: Conv2d::new(pb, "conv_out", channels, channels, 3, 1),
            })
        })
    }

    /// `decoder + conv_out(gate(conv_in(Cat(decoder, guidance))))`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, decoder: Var, guidance: Var) -> Result<Var> {
        let (ds, gs) = (g.shape(decoder), g.shape(guidance));
        if ds[0] != gs[0] || ds[2..] != gs[2..] {
            return Err(Error::Dimension(format!(
                "decoder features {ds:?} and guidance {gs:?} differ spatially"
            )));
        }
        let cat = g.concat(&[decoder, guidance]);
        let h = self.conv_in.forward(g, cat);
        let h = self.gate.forward(g, h).out;
        let h = self.conv_out.forward(g, h);
        Ok(g.add(decoder, h))
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.conv_in.params().to_vec();
        p.extend(self.gate.params());
        p.extend(self.conv_out.params());
        p
    }
}

/// Full-resolution low-frequency refinement.
#[derive(Debug, Clone)]
pub struct LfBranch {
    pub stem: ConvPrelu,
    /// 1×1 projections of decoder level `j` to the branch width.
    pub context: Vec<ConvPrelu>,
    pub fuse: Vec<ConvPrelu>,
    pub head: Conv2d,
}

impl LfBranch {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, cfg: &ReconstructConfig) -> Self {
        let c = cfg.pyramid.base_channels;
        pb.scope("lf", |pb| Self {
            stem: ConvPrelu::new(pb, "stem", 1, c, 3, 1),
            context: (0..cfg.lf_fusion_levels)
                .map(|j| ConvPrelu::new(pb, &format!("context{j}"), cfg.pyramid.channels(j), c, 1, 1))
                .collect(),
            fuse: (0..cfg.lf_fusion_levels)
                .map(|j| ConvPrelu::new(pb, &format!("fuse{j}"), 2 * c, c, 3, 1))
                .collect(),
            head: Conv2d::with_gain(pb, "head", c, 1, 3, 1, HEAD_GAIN),
        })
    }

    /// `d_lf + head(features)`, with decoder level `j` upsampled by `2^j`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, d_lf: Var, decoder: &[Var]) -> Result<Var> {
        if decoder.len() < self.context.len() {
            return Err(Error::Config(format!(
                "low-frequency branch fuses {} levels but the decoder has {}",
                self.context.len(),
                decoder.len()
            )));
        }
        let mut f = self.stem.forward(g, d_lf);
        for (j, (ctx, fuse)) in self.context.iter().zip(&self.fuse).enumerate() {
            let c = ctx.forward(g, decoder[j]);
            let c = g.upsample_nearest(c, 1 << j);
            let cat = g.concat(&[f, c]);
            f = fuse.forward(g, cat);
        }
        let r = self.head.forward(g, f);
        Ok(g.add(d_lf, r))
    }

    /// Number of decoder levels fused.
    pub fn fusion_sites(&self) -> usize {
        self.context.len()
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.stem.params().to_vec();
        for (a, b) in self.context.iter().zip(&self.fuse) {
            p.extend(a.params());
            p.extend(b.params());
        }
        p.extend(self.head.params());
        p
    }
}

/// Graph handles of one reconstruction pass.
#[derive(Debug, Clone)]
pub struct HlfOutput {
    pub hf_out: Var,
    pub lf_out: Var,
    /// `hf_out + lf_out`, unclamped.
    pub prediction: Var,
    /// Decoder features, finest level first.
    pub decoder: Vec<Var>,
}

/// The HF&LF fusion network.
#[derive(Debug, Clone)]
pub struct Hlf {
    pub encoder: Vec<ConvPrelu>,
    /// `up[l]` maps level `l + 1` to level `l` after nearest upsampling.
    pub up: Vec<ConvPrelu>,
    pub fuse: Vec<FuseGuidance>,
    pub hf_head: Conv2d,
    pub lf: LfBranch,
    pub config: ReconstructConfig,
}

impl Hlf {
    /// `guidance_channels[l]` is the channel count of `G` at level `l`.
    pub fn new<T: Real>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        cfg: ReconstructConfig,
        guidance_channels: &[usize],
    ) -> Result<Self> {
        let pyr = cfg.pyramid;
        if guidance_channels.len() != pyr.levels {
            return Err(Error::Config("one guidance level per pyramid level required".into()));
        }
        if cfg.lf_fusion_levels > pyr.levels {
            return Err(Error::Config(format!(
                "lf_fusion_levels {} exceeds pyramid_levels {}",
                cfg.lf_fusion_levels, pyr.levels
            )));
        }
        pb.scope(name, |pb| {
            let encoder = pb.scope("encoder", |pb| {
                (0..pyr.levels)
                    .map(|l| {
                        if l == 0 {
                            ConvPrelu::new(pb, "level0", 1, pyr.channels(0), 3, 1)
                        } else {
                            ConvPrelu::new(pb, &format!("level{l}"), pyr.channels(l - 1), pyr.channels(l), 3, 2)
                        }
                    })
                    .collect()
            });
            let up = pb.scope("decoder", |pb| {
                (0..pyr.levels - 1)
                    .map(|l| ConvPrelu::new(pb, &format!("up{l}"), pyr.channels(l + 1), pyr.channels(l), 3, 1))
                    .collect()
            });
            let fuse = (0..pyr.levels)
                .map(|l| {
                    FuseGuidance::new(pb, &format!("fuse{l}"), pyr.channels(l), guidance_channels[l], cfg.reduction)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Self {
                encoder,
                up,
                fuse,
                hf_head: Conv2d::with_gain(pb, "hf_head", pyr.channels(0), 1, 3, 1, HEAD_GAIN),
                lf: LfBranch::new(pb, &cfg),
                config: cfg,
            })
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, guidance: &[Var], d_lf: Var, d_hf: Var) -> Result<HlfOutput> {
        let levels = self.config.pyramid.levels;
        if guidance.len() != levels {
            return Err(Error::Dimension(format!(
                "{} guidance levels for a {levels}-level decoder",
                guidance.len()
            )));
        }
        let [_, _, h, w] = g.shape(d_hf);
        self.config.pyramid.check_dims(h, w)?;
        if g.shape(d_lf) != g.shape(d_hf) {
            return Err(Error::Dimension("HF and LF maps differ in shape".into()));
        }
        let mut skips = Vec::with_capacity(levels);
        let mut x = d_hf;
        for stage in &self.encoder {
            x = stage.forward(g, x);
            skips.push(x);
        }
        let mut decoder = vec![x; levels];
        let mut x = self.fuse[levels - 1].forward(g, skips[levels - 1], guidance[levels - 1])?;
        decoder[levels - 1] = x;
        for l in (0..levels - 1).rev() {
            let u = g.upsample_nearest(x, 2);
            let u = self.up[l].forward(g, u);
            let merged = g.add(u, skips[l]);
            x = self.fuse[l].forward(g, merged, guidance[l])?;
            decoder[l] = x;
        }
        let r = self.hf_head.forward(g, decoder[0]);
        let hf_out = g.add(d_hf, r);
        let lf_out = self.lf.forward(g, d_lf, &decoder)?;
        let prediction = g.add(hf_out, lf_out);
        g.tag("hlf.hf_out", hf_out);
        g.tag("hlf.lf_out", lf_out);
        Ok(HlfOutput {
            hf_out,
            lf_out,
            prediction,
            decoder,
        })
    }

    pub fn encoder_params(&self) -> Vec<ParamId> {
        self.encoder.iter().flat_map(ConvPrelu::params).collect()
    }

    pub fn decoder_params(&self) -> Vec<ParamId> {
        let mut p: Vec<_> = self.up.iter().flat_map(ConvPrelu::params).collect();
        p.extend(self.hf_head.params());
        p
    }

    pub fn fusion_params(&self) -> Vec<ParamId> {
        self.fuse.iter().flat_map(FuseGuidance::params).collect()
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.encoder_params();
        p.extend(self.decoder_params());
        p.extend(self.fusion_params());
        p.extend(self.lf.params());
        p
    }
}

/// Concrete outputs of one reconstruction pass.
#[derive(Debug, Clone, PartialEq)]
pub struct DualHeadOutput {
    pub hf_out: Grid2D,
    pub lf_out: Grid2D,
    pub prediction: Grid2D,
}

impl DualHeadOutput {
    pub(crate) fn from_graph<T: Real>(g: &Graph<'_, T>, out: &HlfOutput, n: usize) -> Result<Self> {
        Ok(Self {
            hf_out: Grid2D::from_tensor(g.value(out.hf_out), n, 0, Units::Relative)?,
            lf_out: Grid2D::from_tensor(g.value(out.lf_out), n, 0, Units::Relative)?,
            prediction: Grid2D::from_tensor(g.value(out.prediction), n, 0, Units::Relative)?,
        })
    }

    /// Prediction clamped to [0, 1] for reporting.
    pub fn reported(&self) -> Grid2D {
        self.prediction.clamp_normalized()
    }
}

/// Run the fusion network on concrete guidance features and frequency maps.
pub fn hlf_forward<T: Real>(
    guidance: &[Tensor<T>],
    d_lf: &Grid2D,
    d_hf: &Grid2D,
    hlf: &Hlf,
    params: &ParamStore<T>,
) -> Result<DualHeadOutput> {
    let mut g = Graph::new(params);
    let gv: Vec<Var> = guidance.iter().map(|t| g.input(t.clone())).collect();
    let lf = g.input(d_lf.to_tensor());
    let hf = g.input(d_hf.to_tensor());
    let out = hlf.forward(&mut g, &gv, lf, hf)?;
    DualHeadOutput::from_graph(&g, &out, 0)
}
