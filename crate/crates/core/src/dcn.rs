//! Learned high/low-frequency decomposition by stacked contrast layers.
//!
//! Each layer computes `sigmoid(PReLU(Conv_k(x)) − PReLU(Conv_{k−2}(x)))`
//! with kernels shrinking by two per layer down to (3, 1). The final layer
//! output is the high-frequency map; the low-frequency map is the remainder.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::ConvPrelu;
use crate::numerics::{Grid2D, Units};
use crate::params::{ParamBuilder, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DcnConfig {
    /// Number of contrast layers.
    pub layers: usize,
    /// Channels between layers; the last layer always emits one channel.
    pub width: usize,
}

impl Default for DcnConfig {
    fn default() -> Self {
        Self { layers: 3, width: 1 }
    }
}

/// Kernel pairs `(k, k − 2)` with `k = 2(I − i) + 3` for `i = 1..=I`.
pub fn kernel_schedule(layers: usize) -> Result<Vec<(usize, usize)>> {
    if layers < 1 {
        return Err(Error::Argument("decomposition needs at least one layer".into()));
    }
    Ok((1..=layers)
        .map(|i| {
            let k = 2 * (layers - i) + 3;
            (k, k - 2)
        })
        .collect())
}

#[derive(Debug, Clone)]
pub struct ContrastLayer {
    pub large: ConvPrelu,
    pub small: ConvPrelu,
    pub kernel: usize,
}

impl ContrastLayer {
    pub fn new<T: Real>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
    ) -> Result<Self> {
        if kernel % 2 == 0 || kernel < 3 {
            return Err(Error::Argument(format!(
                "contrast kernel must be odd and at least 3, got {kernel}"
            )));
        }
        Ok(pb.scope(name, |pb| Self {
            large: ConvPrelu::new(pb, &format!("conv{kernel}"), cin, cout, kernel, 1),
            small: ConvPrelu::new(pb, &format!("conv{}", kernel - 2), cin, cout, kernel - 2, 1),
            kernel,
        }))
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let a = self.large.forward(g, x);
        let b = self.small.forward(g, x);
        let d = g.sub(a, b);
        g.sigmoid(d)
    }

    pub fn params(&self) -> Vec<ParamId> {
        [self.large.params(), self.small.params()].concat()
    }
}

#[derive(Debug, Clone)]
pub struct Dcn {
    pub layers: Vec<ContrastLayer>,
}

/// Graph handles produced by [`Dcn::forward`].
#[derive(Debug, Clone)]
pub struct DcnOutput {
    pub hf: Var,
    pub lf: Var,
    /// `H_1 ..= H_I`; the last entry is `hf`.
    pub intermediates: Vec<Var>,
}

impl Dcn {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, cfg: &DcnConfig) -> Result<Self> {
        if cfg.width == 0 {
            return Err(Error::Config("decomposition width must be positive".into()));
        }
        let schedule = kernel_schedule(cfg.layers)?;
        let last = schedule.len() - 1;
        let layers = pb.scope("dcn", |pb| {
            schedule
                .iter()
                .enumerate()
                .map(|(i, &(k, _))| {
                    let cin = if i == 0 { 1 } else { cfg.width };
                    let cout = if i == last { 1 } else { cfg.width };
                    ContrastLayer::new(pb, &format!("layer{}", i + 1), cin, cout, k)
                })
                .collect::<Result<Vec<_>>>()
        })?;
        Ok(Self { layers })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, d_bic: Var) -> DcnOutput {
        let mut h = d_bic;
        let mut intermediates = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            h = layer.forward(g, h);
            intermediates.push(h);
        }
        let lf = g.sub(d_bic, h);
        g.tag("dcn.hf", h);
        g.tag("dcn.lf", lf);
        DcnOutput {
            hf: h,
            lf,
            intermediates,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(ContrastLayer::params).collect()
    }
}

/// A decomposed map with `hf + lf = source_bic`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyPair {
    pub hf: Grid2D,
    pub lf: Grid2D,
    pub source_bic: Grid2D,
    pub intermediates: Vec<Grid2D>,
}

/// Run the decomposition network on a single normalized map.
pub fn decompose<T: Real>(d_bic: &Grid2D, dcn: &Dcn, params: &ParamStore<T>) -> Result<FrequencyPair> {
    if d_bic.units() != Units::Normalized {
        return Err(Error::Argument("decomposition expects a normalized map".into()));
    }
    let mut g = Graph::new(params);
    let x = g.input(d_bic.to_tensor());
    let out = dcn.forward(&mut g, x);
    let grid = |v: Var, units| Grid2D::from_tensor(g.value(v), 0, 0, units);
    Ok(FrequencyPair {
        hf: grid(out.hf, Units::Relative)?,
        lf: grid(out.lf, Units::Relative)?,
        source_bic: d_bic.clone(),
        intermediates: out
            .intermediates
            .iter()
            .map(|&v| grid(v, Units::Relative))
            .collect::<Result<_>>()?,
    })
}

/// Hand-crafted baseline: `lf` is a (2r+1)² box blur, `hf` the residual.
pub fn box_decompose<T: Real>(g: &mut Graph<'_, T>, d_bic: Var, radius: usize) -> (Var, Var) {
    let k = 2 * radius + 1;
    let w = T::from_f64_lossy(1.0 / (k * k) as f64);
    // zero padding would darken borders, so normalise by the in-bounds tap count
    let kernel = g.input(Tensor::full([1, 1, k, k], w));
    let blurred = g.conv2d(d_bic, kernel, None, 1, radius);
    let [_, _, h, wd] = g.shape(d_bic);
    let ones = g.input(Tensor::full([1, 1, h, wd], T::one()));
    let coverage = g.conv2d(ones, kernel, None, 1, radius);
    let inv = g.value(coverage).map(|c| T::one() / c);
    let inv = g.input(inv);
    let lf = g.mul(blurred, inv);
    let hf = g.sub(d_bic, lf);
    (hf, lf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grid(h: usize, w: usize, seed: u64) -> Grid2D {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Grid2D::new(h, w, (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect(), Units::Normalized)
            .unwrap()
    }

    #[test]
    fn schedules() {
        assert_eq!(kernel_schedule(3).unwrap(), vec![(7, 5), (5, 3), (3, 1)]);
        assert_eq!(kernel_schedule(2).unwrap(), vec![(5, 3), (3, 1)]);
        assert_eq!(kernel_schedule(1).unwrap(), vec![(3, 1)]);
        assert!(matches!(kernel_schedule(0), Err(Error::Argument(_))));
    }

    #[test]
    fn even_kernel_rejected() {
        let mut store = ParamStore::<f64>::new();
        let mut pb = ParamBuilder::new(&mut store, 0);
        assert!(matches!(
            ContrastLayer::new(&mut pb, "x", 1, 1, 4),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn zero_weights_give_one_half() {
        let mut store = ParamStore::<f64>::new();
        let layer = ContrastLayer::new(&mut ParamBuilder::new(&mut store, 0), "c", 1, 1, 5).unwrap();
        for id in [layer.large.conv.weight, layer.large.conv.bias, layer.small.conv.weight, layer.small.conv.bias] {
            store.get_mut(id).data_mut().fill(0.0);
        }
        let mut g = Graph::new(&store);
        let x = g.input(random_grid(64, 64, 1).to_tensor());
        let y = layer.forward(&mut g, x);
        assert_eq!(g.shape(y), [1, 1, 64, 64]);
        assert!(g.value(y).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn decomposition_identity_and_intermediates() {
        let mut store = ParamStore::<f32>::new();
        let dcn = Dcn::new(&mut ParamBuilder::new(&mut store, 4), &DcnConfig::default()).unwrap();
        let d = random_grid(24, 20, 5);
        let pair = decompose(&d, &dcn, &store).unwrap();
        assert_eq!(pair.intermediates.len(), 3);
        assert_eq!(pair.intermediates[2], pair.hf);
        for i in 0..d.values().len() {
            let sum = pair.hf.values()[i] + pair.lf.values()[i];
            assert!((sum - d.values()[i]).abs() <= 1e-6);
            assert!(pair.hf.values()[i] > 0.0 && pair.hf.values()[i] < 1.0);
        }
        let c = Grid2D::constant(8, 8, 0.3, Units::Normalized).unwrap();
        let pair = decompose(&c, &dcn, &store).unwrap();
        for (h, l) in pair.hf.values().iter().zip(pair.lf.values()) {
            assert!((l - (0.3 - h)).abs() < 1e-7);
        }
    }

    #[test]
    fn widened_network_still_emits_one_channel() {
        let mut store = ParamStore::<f64>::new();
        let dcn = Dcn::new(&mut ParamBuilder::new(&mut store, 4), &DcnConfig { layers: 3, width: 4 }).unwrap();
        let pair = decompose(&random_grid(10, 10, 1), &dcn, &store).unwrap();
        assert_eq!(pair.hf.dims(), (10, 10));
    }

    #[test]
    fn box_baseline_preserves_constants() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::full([1, 1, 9, 7], 0.4));
        let (hf, lf) = box_decompose(&mut g, x, 2);
        assert!(g.value(lf).data().iter().all(|v| (v - 0.4).abs() < 1e-12));
        assert!(g.value(hf).data().iter().all(|v| v.abs() < 1e-12));
    }
}
