//! Building blocks shared by the network modules.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamBuilder, ParamId};
use crate::tensor::Real;

/// PReLU slope at initialization.
pub const PRELU_INIT: f64 = 0.25;

/// A square "same"-padded convolution with bias.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv2d {
    /// Uniform(±1/√fan_in) weights and biases.
    pub fn new<T: Real>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        Self::with_gain(pb, name, cin, cout, kernel, stride, 1.0)
    }

    /// Like [`Conv2d::new`] with weights multiplied by `gain` and zero bias
    /// when `gain < 1`.
    pub fn with_gain<T: Real>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        gain: f64,
    ) -> Self {
        assert!(kernel % 2 == 1, "odd kernels only");
        let bound = 1.0 / ((cin * kernel * kernel) as f64).sqrt();
        pb.scope(name, |pb| {
            let weight = pb.uniform("weight", [cout, cin, kernel, kernel], bound * gain);
            let bias = if gain < 1.0 {
                pb.constant("bias", [1, cout, 1, 1], 0.0)
            } else {
                pb.uniform("bias", [1, cout, 1, 1], bound)
            };
            Self {
                weight,
                bias,
                in_channels: cin,
                out_channels: cout,
                kernel,
                stride,
            }
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.conv2d(x, w, Some(b), self.stride, self.kernel / 2)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

/// Convolution followed by a single-slope PReLU.
#[derive(Debug, Clone)]
pub struct ConvPrelu {
    pub conv: Conv2d,
    pub slope: ParamId,
}

impl ConvPrelu {
    pub fn new<T: Real>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        pb.scope(name, |pb| Self {
            conv: Conv2d::new(pb, "conv", cin, cout, kernel, stride),
            slope: pb.constant("prelu", [1, 1, 1, 1], PRELU_INIT),
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let y = self.conv.forward(g, x);
        let a = g.param(self.slope);
        g.prelu(y, a)
    }

    pub fn params(&self) -> [ParamId; 3] {
        [self.conv.weight, self.conv.bias, self.slope]
    }
}

/// Sequential channel then spatial attention gating.
///
/// Channel weights come from a shared two-layer bottleneck over the global
/// average and max pools; the spatial map from a 7×7 convolution over the
/// channelwise mean and max.
#[derive(Debug, Clone)]
pub struct Cbam {
    pub fc1: Conv2d,
    pub fc2: Conv2d,
    pub spatial: Conv2d,
    pub channels: usize,
}

/// Output of [`Cbam::forward`] with the gates exposed.
#[derive(Debug, Clone, Copy)]
pub struct CbamOutput {
    pub out: Var,
    /// N×C×1×1 sigmoid weights.
    pub channel_weights: Var,
    /// N×1×H×W sigmoid map.
    pub spatial_map: Var,
}

pub const CBAM_SPATIAL_KERNEL: usize = 7;

impl Cbam {
    pub fn new<T: Real>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        channels: usize,
        reduction: usize,
    ) -> Result<Self> {
        if reduction == 0 || channels < reduction {
            return Err(Error::Config(format!(
                "attention gate over {channels} channels needs a reduction ratio in 1..={channels}, got {reduction}"
            )));
        }
        let hidden = channels / reduction;
        Ok(pb.scope(name, |pb| Self {
            fc1: Conv2d::new(pb, "fc1", channels, hidden, 1, 1),
            fc2: Conv2d::new(pb, "fc2", hidden, channels, 1, 1),
            spatial: Conv2d::new(pb, "spatial", 2, 1, CBAM_SPATIAL_KERNEL, 1),
            channels,
        }))
    }

    fn bottleneck<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let h = self.fc1.forward(g, x);
        let h = g.relu(h);
        self.fc2.forward(g, h)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> CbamOutput {
        let avg = g.global_avg(x);
        let max = g.global_max(x);
        let a = self.bottleneck(g, avg);
        let m = self.bottleneck(g, max);
        let logits = g.add(a, m);
        let channel_weights = g.sigmoid(logits);
        let x1 = g.mul(x, channel_weights);
        let mean = g.channel_mean(x1);
        let cmax = g.channel_max(x1);
        let pooled = g.concat(&[mean, cmax]);
        let s = self.spatial.forward(g, pooled);
        let spatial_map = g.sigmoid(s);
        let out = g.mul(x1, spatial_map);
        CbamOutput {
            out,
            channel_weights,
            spatial_map,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        [self.fc1.params(), self.fc2.params(), self.spatial.params()].concat()
    }
}
