//! FracTAL attention and the two attention-fusion layers.

use crate::error::{ensure, Error, Result};
use crate::ftnmt::{ftnmt_avg, FtConfig};
use crate::substrate::autograd::Var;
use crate::substrate::layers::{scalar_param, Conv2dNorm, GroupNorm};
use crate::substrate::param::{ParamBuilder, ParamId, ParamStore};

pub const DEFAULT_FT_DEPTH: u32 = 5;
const PROJECTION_KERNEL: usize = 3;

/// Whether attention branches contribute to fusion outputs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AttentionMode {
    #[default]
    Enabled,
    /// Fusions return their unattended input; used to compare against `γ = 0`.
    Ablated,
}

/// Head count for `channels`: `max(1, channels/8)`, lowered to a divisor if needed.
pub fn heads_for(channels: usize) -> usize {
    let target = (channels / 8).max(1);
    (1..=target).rev().find(|h| channels % h == 0).unwrap_or(1)
}

/// Per-channel similarity `[B,C,1,1]`, reduced over the spatial axes.
pub fn spatial_similarity(q: &Var, k: &Var, depth: u32) -> Result<Var> {
    ftnmt_avg(q, k, &FtConfig::new(depth, &[2, 3]))
}

/// Per-pixel similarity `[B,1,H,W]`, reduced over the channel axis.
pub fn channel_similarity(q: &Var, k: &Var, depth: u32) -> Result<Var> {
    ftnmt_avg(q, k, &FtConfig::new(depth, &[1]))
}

/// Intermediates of one attention evaluation.
pub struct AttentionParts {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub spatial: Var,
    pub channel: Var,
    pub pre_norm: Var,
    pub output: Var,
}

#[derive(Clone, Debug)]
pub struct FracTalAttention {
    q: Conv2dNorm,
    k: Conv2dNorm,
    v: Conv2dNorm,
    norm: GroupNorm,
    pub channels: usize,
    pub heads: usize,
    pub depth: u32,
}

impl FracTalAttention {
    pub fn new(pb: &mut ParamBuilder, channels: usize, heads: usize, depth: u32) -> Self {
        assert!(
            heads >= 1 && channels % heads == 0,
            "{channels} channels not divisible by {heads} heads"
        );
        let proj = |pb: &mut ParamBuilder, name: &str| {
            Conv2dNorm::new(&mut pb.child(name), channels, channels, PROJECTION_KERNEL, 1, heads)
        };
        let q = proj(pb, "q");
        let k = proj(pb, "k");
        let v = proj(pb, "v");
        let norm = GroupNorm::new(pb, channels);
        Self {
            q,
            k,
            v,
            norm,
            channels,
            heads,
            depth,
        }
    }

    pub fn forward(&self, store: &ParamStore, qin: &Var, kin: &Var, vin: &Var) -> Result<Var> {
        Ok(self.forward_parts(store, qin, kin, vin)?.output)
    }

    pub fn forward_parts(
        &self,
        store: &ParamStore,
        qin: &Var,
        kin: &Var,
        vin: &Var,
    ) -> Result<AttentionParts> {
        for x in [qin, kin, vin] {
            ensure!(
                x.shape().len() == 4 && x.shape()[1] == self.channels,
                Error::shape(
                    "fractal_attention",
                    format!("expected {} channels, got {:?}", self.channels, x.shape())
                )
            );
        }
        ensure!(
            qin.shape() == kin.shape() && kin.shape() == vin.shape(),
            Error::shape("fractal_attention", "q, k, v inputs differ in shape")
        );
        let q = self.q.forward(store, qin)?.sigmoid();
        let k = self.k.forward(store, kin)?.sigmoid();
        let v = self.v.forward(store, vin)?.sigmoid();
        let spatial = spatial_similarity(&q, &k, self.depth)?;
        let channel = channel_similarity(&q, &k, self.depth)?;
        let pre_norm = spatial.mul(&v)?.add(&channel.mul(&v)?)?.scale(0.5);
        let output = self.norm.forward(store, &pre_norm)?;
        Ok(AttentionParts {
            q,
            k,
            v,
            spatial,
            channel,
            pre_norm,
            output,
        })
    }
}

/// `L ⊙ (1 + γA)`.
pub fn self_fusion(l: &Var, a: &Var, gamma: &Var) -> Result<Var> {
    ensure!(
        l.shape() == a.shape(),
        Error::shape("self_fusion", format!("{:?} vs {:?}", l.shape(), a.shape()))
    );
    l.mul(&a.mul(gamma)?.add_scalar(1.0))
}

/// Relative attention fusion of two equally shaped layers.
#[derive(Clone, Debug)]
pub struct Fusion {
    pub att12: FracTalAttention,
    pub att21: FracTalAttention,
    pub gamma1: ParamId,
    pub gamma2: ParamId,
    fuse: Conv2dNorm,
    pub channels: usize,
}

impl Fusion {
    pub fn new(pb: &mut ParamBuilder, channels: usize, heads: usize, depth: u32) -> Self {
        let att12 = FracTalAttention::new(&mut pb.child("att12"), channels, heads, depth);
        let att21 = FracTalAttention::new(&mut pb.child("att21"), channels, heads, depth);
        let gamma1 = scalar_param(pb, "gamma1", 0.0);
        let gamma2 = scalar_param(pb, "gamma2", 0.0);
        let fuse = Conv2dNorm::new(&mut pb.child("fuse"), 2 * channels, channels, 3, 1, heads);
        Self {
            att12,
            att21,
            gamma1,
            gamma2,
            fuse,
            channels,
        }
    }

    /// Returns the two emphasised layers before the combining convolution.
    pub fn emphasise(
        &self,
        store: &ParamStore,
        l1: &Var,
        l2: &Var,
        mode: AttentionMode,
    ) -> Result<(Var, Var)> {
        ensure!(
            l1.shape() == l2.shape(),
            Error::shape("relative_fusion", format!("{:?} vs {:?}", l1.shape(), l2.shape()))
        );
        if mode == AttentionMode::Ablated {
            return Ok((l1.clone(), l2.clone()));
        }
        let a12 = self.att12.forward(store, l1, l2, l2)?;
        let f1 = self_fusion(l1, &a12, &Var::param(store, self.gamma1))?;
        let a21 = self.att21.forward(store, l2, l1, l1)?;
        let f2 = self_fusion(l2, &a21, &Var::param(store, self.gamma2))?;
        Ok((f1, f2))
    }

    pub fn forward(&self, store: &ParamStore, l1: &Var, l2: &Var, mode: AttentionMode) -> Result<Var> {
        let (f1, f2) = self.emphasise(store, l1, l2, mode)?;
        self.combine(store, &f1, &f2)
    }

    /// The combining `conv2d_norm(concat(a, b))` on its own.
    pub fn combine(&self, store: &ParamStore, a: &Var, b: &Var) -> Result<Var> {
        self.fuse.forward(store, &Var::concat(&[a.clone(), b.clone()], 1)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::substrate::param::init_rng;
    use crate::substrate::tensor::Tensor;

    #[test]
    fn heads_rule() {
        assert_eq!(heads_for(4), 1);
        assert_eq!(heads_for(8), 1);
        assert_eq!(heads_for(64), 8);
        assert_eq!(heads_for(256), 32);
        assert_eq!(heads_for(44), 4);
    }

    #[test]
    fn shared_projection_gives_unit_similarity() {
        let mut store = ParamStore::new();
        let mut rng = init_rng(3);
        let att = FracTalAttention::new(&mut ParamBuilder::new(&mut store, &mut rng), 8, 1, 5);
        let x = Var::input(Tensor::randn(&[1, 8, 6, 6], 1.0, &mut init_rng(4)));
        let parts = att.forward_parts(&store, &x, &x, &x).unwrap();
        // distinct q and k projections, so feed q twice through the similarity maps
        let s = spatial_similarity(&parts.q, &parts.q, 5).unwrap();
        assert!(s.value().data().iter().all(|&v| v == 1.0));
        assert_eq!(parts.spatial.shape(), &[1, 8, 1, 1]);
        assert_eq!(parts.channel.shape(), &[1, 1, 6, 6]);
        assert_eq!(parts.output.shape(), &[1, 8, 6, 6]);
    }

    #[test]
    fn self_fusion_cases() {
        let l = Var::input(Tensor::from_fn(&[1, 2, 2, 2], |i| i as f64 - 3.0));
        let a = Var::input(Tensor::ones(&[1, 2, 2, 2]));
        let zero = Var::constant(Tensor::scalar(0.0));
        let one = Var::constant(Tensor::scalar(1.0));
        assert_eq!(self_fusion(&l, &a, &zero).unwrap().value(), l.value());
        let doubled = self_fusion(&l, &a, &one).unwrap();
        assert_eq!(doubled.value(), &l.value().map(|v| 2.0 * v));
    }
}
