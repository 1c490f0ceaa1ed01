//! Parameterised building blocks shared by every network module.

use crate::error::Result;
use crate::substrate::autograd::Var;
use crate::substrate::kernels::ConvGeometry;
use crate::substrate::param::{ParamBuilder, ParamId, ParamStore};
use crate::substrate::tensor::Tensor;

pub const GN_EPS: f64 = 1e-5;

/// Group count for `channels`: 1 below 8 channels, otherwise the largest divisor
/// not exceeding 8.
pub fn norm_groups(channels: usize) -> usize {
    if channels < 8 {
        return 1;
    }
    (1..=8).rev().find(|g| channels % g == 0).unwrap_or(1)
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    gamma: ParamId,
    beta: ParamId,
    pub groups: usize,
    pub channels: usize,
}

impl GroupNorm {
    pub fn new(pb: &mut ParamBuilder, channels: usize) -> Self {
        let mut pb = pb.child("norm");
        let gamma = pb.add("gamma", Tensor::ones(&[channels]));
        let beta = pb.add("beta", Tensor::zeros(&[channels]));
        Self {
            gamma,
            beta,
            groups: norm_groups(channels),
            channels,
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &Var) -> Result<Var> {
        x.group_norm(
            &Var::param(store, self.gamma),
            &Var::param(store, self.beta),
            self.groups,
            GN_EPS,
        )
    }
}

/// Square-kernel convolution with optional per-channel bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: ParamId,
    bias: Option<ParamId>,
    pub geom: ConvGeometry,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv2d {
    pub fn new(
        pb: &mut ParamBuilder,
        cin: usize,
        cout: usize,
        k: usize,
        geom: ConvGeometry,
        bias: bool,
    ) -> Self {
        assert!(
            cin % geom.groups == 0 && cout % geom.groups == 0,
            "conv {cin}->{cout} not divisible into {} groups",
            geom.groups
        );
        let weight = pb.conv_weight(cout, cin / geom.groups, k);
        let bias = bias.then(|| pb.add("bias", Tensor::zeros(&[1, cout, 1, 1])));
        Self {
            weight,
            bias,
            geom,
            in_channels: cin,
            out_channels: cout,
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &Var) -> Result<Var> {
        let y = x.conv2d(&Var::param(store, self.weight), self.geom)?;
        match self.bias {
            Some(b) => y.add(&Var::param(store, b)),
            None => Ok(y),
        }
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }
}

/// Convolution without bias followed by group normalisation.
#[derive(Clone, Debug)]
pub struct Conv2dNorm {
    pub conv: Conv2d,
    pub norm: GroupNorm,
}

impl Conv2dNorm {
    pub fn new(
        pb: &mut ParamBuilder,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        groups: usize,
    ) -> Self {
        let geom = ConvGeometry::new(stride, k / 2, groups);
        let conv = Conv2d::new(&mut pb.child("conv"), cin, cout, k, geom, false);
        let norm = GroupNorm::new(pb, cout);
        Self { conv, norm }
    }

    pub fn forward(&self, store: &ParamStore, x: &Var) -> Result<Var> {
        self.norm.forward(store, &self.conv.forward(store, x)?)
    }
}

/// Scalar parameter registered with initial value `init`.
pub fn scalar_param(pb: &mut ParamBuilder, name: &str, init: f64) -> ParamId {
    pb.add(name, Tensor::scalar(init))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::substrate::param::init_rng;

    #[test]
    fn group_fallback() {
        assert_eq!(norm_groups(64), 8);
        assert_eq!(norm_groups(8), 8);
        assert_eq!(norm_groups(12), 6);
        assert_eq!(norm_groups(4), 1);
        assert_eq!(norm_groups(1), 1);
        assert_eq!(norm_groups(7), 1);
    }

    #[test]
    fn conv_norm_output_is_normalised() {
        let mut store = ParamStore::new();
        let mut rng = init_rng(1);
        let layer = Conv2dNorm::new(&mut ParamBuilder::new(&mut store, &mut rng), 3, 16, 3, 1, 1);
        let x = Var::input(Tensor::rand_uniform(&[2, 3, 8, 8], 0.0, 1.0, &mut init_rng(2)));
        let y = layer.forward(&store, &x).unwrap();
        assert_eq!(y.shape(), &[2, 16, 8, 8]);
        // every (batch, group) slab has zero mean
        let d = y.value().data();
        for slab in d.chunks(2 * 64) {
            assert!(slab.iter().sum::<f64>().abs() < 1e-9);
        }
    }

    #[test]
    fn names_are_dotted() {
        let mut store = ParamStore::new();
        let mut rng = init_rng(0);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        Conv2dNorm::new(&mut pb.child("stem"), 4, 8, 1, 1, 1);
        let names: Vec<_> = store.iter().map(|(_, p)| p.name.clone()).collect();
        assert_eq!(
            names,
            ["stem.conv.weight", "stem.norm.gamma", "stem.norm.beta"]
        );
    }
}
