//! Feature-extraction units and the transition layers between them.

use serde::{Deserialize, Serialize};

use crate::attention::{heads_for, self_fusion, AttentionMode, FracTalAttention, Fusion};
use crate::error::{ensure, Error, Result};
use crate::substrate::autograd::Var;
use crate::substrate::kernels::ConvGeometry;
use crate::substrate::layers::{scalar_param, Conv2d, Conv2dNorm, GroupNorm};
use crate::substrate::param::{ParamBuilder, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitVariant {
    FractalResnet,
    CeecnetV1,
    CeecnetV2,
}

impl std::str::FromStr for UnitVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fractal_resnet" => Ok(Self::FractalResnet),
            "ceecnet_v1" => Ok(Self::CeecnetV1),
            "ceecnet_v2" => Ok(Self::CeecnetV2),
            _ => Err(Error::InvalidArgument(format!("unknown unit variant {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UnitConfig {
    pub channels: usize,
    pub heads: usize,
    pub ft_depth: u32,
    pub variant: UnitVariant,
}

impl UnitConfig {
    pub fn new(channels: usize, ft_depth: u32, variant: UnitVariant) -> Self {
        Self {
            channels,
            heads: heads_for(channels),
            ft_depth,
            variant,
        }
    }
}

fn expect_shape(op: &'static str, x: &Var, want: [usize; 4]) -> Result<()> {
    ensure!(
        x.shape() == want,
        Error::shape(op, format!("expected {want:?}, got {:?}", x.shape()))
    );
    Ok(())
}

fn expect_channels(op: &'static str, x: &Var, c: usize) -> Result<[usize; 4]> {
    match *x.shape() {
        [b, ch, h, w] if ch == c => Ok([b, ch, h, w]),
        _ => Err(Error::shape(
            op,
            format!("expected {c} channels in B×C×H×W, got {:?}", x.shape())
        )),
    }
}

fn expect_even(op: &'static str, x: &Var) -> Result<()> {
    let s = x.shape();
    ensure!(
        s.len() == 4 && s[2] % 2 == 0 && s[3] % 2 == 0,
        Error::shape(op, format!("spatial dims must be even, got {s:?}"))
    );
    Ok(())
}

/// Pre-activation residual unit emphasised by FracTAL self-attention.
#[derive(Clone, Debug)]
pub struct FracTalResUnit {
    norm1: GroupNorm,
    conv1: Conv2d,
    norm2: GroupNorm,
    conv2: Conv2d,
    att: FracTalAttention,
    pub gamma: ParamId,
    pub channels: usize,
}

impl FracTalResUnit {
    pub fn new(pb: &mut ParamBuilder, cfg: UnitConfig) -> Self {
        let c = cfg.channels;
        let geom = ConvGeometry::new(1, 1, 1);
        let norm1 = GroupNorm::new(&mut pb.child("res1"), c);
        let conv1 = Conv2d::new(&mut pb.child("res1"), c, c, 3, geom, false);
        let norm2 = GroupNorm::new(&mut pb.child("res2"), c);
        let conv2 = Conv2d::new(&mut pb.child("res2"), c, c, 3, geom, false);
        let att = FracTalAttention::new(&mut pb.child("att"), c, cfg.heads, cfg.ft_depth);
        let gamma = scalar_param(pb, "gamma", 0.0);
        Self {
            norm1,
            conv1,
            norm2,
            conv2,
            att,
            gamma,
            channels: c,
        }
    }

    /// Norm, ReLU, conv, norm, ReLU, conv.
    pub fn res_block(&self, store: &ParamStore, x: &Var) -> Result<Var> {
        let h = self.norm1.forward(store, x)?.relu();
        let h = self.conv1.forward(store, &h)?;
        let h = self.norm2.forward(store, &h)?.relu();
        self.conv2.forward(store, &h)
    }

    pub fn forward(&self, store: &ParamStore, x: &Var, mode: AttentionMode) -> Result<Var> {
        let shape = expect_channels("fractal_resnet_unit", x, self.channels)?;
        let out = x.add(&self.res_block(store, x)?)?;
        let out = match mode {
            AttentionMode::Ablated => out,
            AttentionMode::Enabled => {
                let att = self.att.forward(store, x, x, x)?;
                self_fusion(&out, &att, &Var::param(store, self.gamma))?
            }
        };
        expect_shape("fractal_resnet_unit", &out, shape)?;
        Ok(out)
    }
}

/// Strided conv2d_norm then an s=1 conv2d_norm, each followed by ReLU.
#[derive(Clone, Debug)]
pub struct Compress {
    down: Conv2dNorm,
    refine: Conv2dNorm,
    pub out_channels: usize,
}

impl Compress {
    pub fn new(pb: &mut ParamBuilder, cin: usize, cout: usize) -> Self {
        Self {
            down: Conv2dNorm::new(&mut pb.child("down"), cin, cout, 3, 2, 1),
            refine: Conv2dNorm::new(&mut pb.child("refine"), cout, cout, 3, 1, 1),
            out_channels: cout,
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &Var) -> Result<Var> {
        expect_even("compress", x)?;
        let h = self.down.forward(store, x)?.relu();
        self.refine.forward(store, &h).map(|v| v.relu())
    }
}

/// Bilinear ×2 followed by two grouped k3 conv2d_norm layers with ReLU.
#[derive(Clone, Debug)]
pub struct Expand {
    conv1: Conv2dNorm,
    conv2: Conv2dNorm,
    pub out_channels: usize,
}

impl Expand {
    pub fn new(pb: &mut ParamBuilder, cin: usize, cout: usize) -> Self {
        let g = heads_for(cout);
        Self {
            conv1: Conv2dNorm::new(&mut pb.child("conv1"), cin, cout, 3, 1, g),
            conv2: Conv2dNorm::new(&mut pb.child("conv2"), cout, cout, 3, 1, g),
            out_channels: cout,
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &Var) -> Result<Var> {
        let up = x.upsample_bilinear2x()?;
        let h = self.conv1.forward(store, &up)?.relu();
        self.conv2.forward(store, &h).map(|v| v.relu())
    }
}

/// How two equally shaped feature maps are merged into one.
#[derive(Clone, Debug)]
pub enum Combine {
    /// `conv2d_norm(concat(a, b))`.
    Concat(Conv2dNorm),
    Fusion(Box<Fusion>),
}

impl Combine {
    pub fn concat(pb: &mut ParamBuilder, channels: usize, k: usize, groups: usize) -> Self {
        Self::Concat(Conv2dNorm::new(&mut pb.child("combine"), 2 * channels, channels, k, 1, groups))
    }

    pub fn fusion(pb: &mut ParamBuilder, channels: usize, ft_depth: u32) -> Self {
        Self::Fusion(Box::new(Fusion::new(
            &mut pb.child("fusion"),
            channels,
            heads_for(channels),
            ft_depth,
        )))
    }

    pub fn forward(&self, store: &ParamStore, a: &Var, b: &Var, mode: AttentionMode) -> Result<Var> {
        match self {
            Self::Concat(conv) => conv.forward(store, &Var::concat(&[a.clone(), b.clone()], 1)?),
            Self::Fusion(f) => f.forward(store, a, b, mode),
        }
    }
}

/// Upsample the low-resolution input, convolve, then merge with the skip.
#[derive(Clone, Debug)]
pub struct ExpandNCombine {
    conv1: Conv2dNorm,
    combine: Combine,
    pub out_channels: usize,
}

impl ExpandNCombine {
    pub fn new(pb: &mut ParamBuilder, cin: usize, cout: usize, fused: bool, ft_depth: u32) -> Self {
        let g = heads_for(cout);
        let conv1 = Conv2dNorm::new(&mut pb.child("conv1"), cin, cout, 3, 1, g);
        let combine = if fused {
            Combine::fusion(pb, cout, ft_depth)
        } else {
            Combine::concat(pb, cout, 3, g)
        };
        Self {
            conv1,
            combine,
            out_channels: cout,
        }
    }

    pub fn forward(&self, store: &ParamStore, low: &Var, skip: &Var, mode: AttentionMode) -> Result<Var> {
        let up = self.conv1.forward(store, &low.upsample_bilinear2x()?)?.relu();
        ensure!(
            up.shape() == skip.shape(),
            Error::shape(
                "expand_n_combine",
                format!("upsampled {:?} vs skip {:?}", up.shape(), skip.shape())
            )
        );
        Ok(self.combine.forward(store, &up, skip, mode)?.relu())
    }
}

/// Compress-Expand / Expand-Compress unit.
#[derive(Clone, Debug)]
pub struct CeecNetUnit {
    conv1: Conv2dNorm,
    compress1: Compress,
    expand1: ExpandNCombine,
    conv2: Conv2dNorm,
    expand2: Expand,
    compress21: Conv2dNorm,
    compress22: Combine,
    collect: Conv2dNorm,
    att: FracTalAttention,
    ratt12: FracTalAttention,
    ratt21: FracTalAttention,
    pub gamma1: ParamId,
    pub gamma2: ParamId,
    pub gamma3: ParamId,
    pub channels: usize,
}

impl CeecNetUnit {
    pub fn new(pb: &mut ParamBuilder, cfg: UnitConfig) -> Self {
        let nf = cfg.channels;
        assert!(nf % 4 == 0, "CEECNet units need nf divisible by 4, got {nf}");
        let (half, quarter) = (nf / 2, nf / 4);
        let fused = cfg.variant == UnitVariant::CeecnetV2;
        let d = cfg.ft_depth;
        let conv1 = Conv2dNorm::new(&mut pb.child("conv1"), nf, half, 1, 1, 1);
        let compress1 = Compress::new(&mut pb.child("compr1"), half, nf);
        let expand1 = ExpandNCombine::new(&mut pb.child("expand1"), nf, half, fused, d);
        let conv2 = Conv2dNorm::new(&mut pb.child("conv2"), nf, half, 1, 1, 1);
        let expand2 = Expand::new(&mut pb.child("expand2"), half, quarter);
        let compress21 = Conv2dNorm::new(&mut pb.child("compr21"), quarter, half, 3, 2, 1);
        let compress22 = if fused {
            Combine::fusion(&mut pb.child("compr22"), half, d)
        } else {
            Combine::concat(&mut pb.child("compr22"), half, 3, 1)
        };
        let collect = Conv2dNorm::new(&mut pb.child("collect"), nf, nf, 3, 1, 1);
        let att = FracTalAttention::new(&mut pb.child("att"), nf, cfg.heads, d);
        let hh = heads_for(half);
        let ratt12 = FracTalAttention::new(&mut pb.child("ratt12"), half, hh, d);
        let ratt21 = FracTalAttention::new(&mut pb.child("ratt21"), half, hh, d);
        let gamma1 = scalar_param(pb, "gamma1", 0.0);
        let gamma2 = scalar_param(pb, "gamma2", 0.0);
        let gamma3 = scalar_param(pb, "gamma3", 0.0);
        Self {
            conv1,
            compress1,
            expand1,
            conv2,
            expand2,
            compress21,
            compress22,
            collect,
            att,
            ratt12,
            ratt21,
            gamma1,
            gamma2,
            gamma3,
            channels: nf,
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &Var, mode: AttentionMode) -> Result<Var> {
        let op = "ceecnet_unit";
        let [b, nf, h, w] = expect_channels(op, x, self.channels)?;
        expect_even(op, x)?;
        let (half, quarter) = (nf / 2, nf / 4);

        // compress-expand
        let out10 = self.conv1.forward(store, x)?;
        expect_shape(op, &out10, [b, half, h, w])?;
        let bottom = self.compress1.forward(store, &out10)?;
        expect_shape(op, &bottom, [b, nf, h / 2, w / 2])?;
        let out1 = self.expand1.forward(store, &bottom, &out10, mode)?.relu();
        expect_shape(op, &out1, [b, half, h, w])?;

        // expand-compress
        let out20 = self.conv2.forward(store, x)?;
        let top = self.expand2.forward(store, &out20)?.relu();
        expect_shape(op, &top, [b, quarter, 2 * h, 2 * w])?;
        let out2 = self.compress21.forward(store, &top)?.relu();
        expect_shape(op, &out2, [b, half, h, w])?;
        let out2 = self.compress22.forward(store, &out2, &out20, mode)?.relu();
        expect_shape(op, &out2, [b, half, h, w])?;

        let (e1, e2) = match mode {
            AttentionMode::Ablated => (out1, out2),
            AttentionMode::Enabled => {
                let r12 = self.ratt12.forward(store, &out1, &out2, &out2)?;
                let r21 = self.ratt21.forward(store, &out2, &out1, &out1)?;
                (
                    self_fusion(&out1, &r12, &Var::param(store, self.gamma2))?,
                    self_fusion(&out2, &r21, &Var::param(store, self.gamma3))?,
                )
            }
        };
        let collected = self.collect.forward(store, &Var::concat(&[e1, e2], 1)?)?.relu();
        let out = x.add(&collected)?;
        let out = match mode {
            AttentionMode::Ablated => out,
            AttentionMode::Enabled => {
                let att = self.att.forward(store, x, x, x)?;
                self_fusion(&out, &att, &Var::param(store, self.gamma1))?
            }
        };
        expect_shape(op, &out, [b, nf, h, w])?;
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub enum Unit {
    FracTalResNet(FracTalResUnit),
    CeecNet(CeecNetUnit),
}

impl Unit {
    pub fn new(pb: &mut ParamBuilder, cfg: UnitConfig) -> Self {
        match cfg.variant {
            UnitVariant::FractalResnet => Self::FracTalResNet(FracTalResUnit::new(pb, cfg)),
            UnitVariant::CeecnetV1 | UnitVariant::CeecnetV2 => Self::CeecNet(CeecNetUnit::new(pb, cfg)),
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &Var, mode: AttentionMode) -> Result<Var> {
        match self {
            Self::FracTalResNet(u) => u.forward(store, x, mode),
            Self::CeecNet(u) => u.forward(store, x, mode),
        }
    }
}

/// Single strided conv2d_norm halving the resolution, without activation.
#[derive(Clone, Debug)]
pub struct Downscale {
    conv: Conv2dNorm,
}

impl Downscale {
    pub fn new(pb: &mut ParamBuilder, cin: usize, cout: usize) -> Self {
        Self {
            conv: Conv2dNorm::new(&mut pb.child("down"), cin, cout, 3, 2, 1),
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &Var) -> Result<Var> {
        expect_even("downscale_transition", x)?;
        self.conv.forward(store, x)
    }
}

pub const PSP_LEVELS: [usize; 4] = [1, 2, 4, 8];

/// Pyramid pooling: max-pool to 1, 2, 4 and 8 cells per axis, reduce to C/4,
/// upsample back, concatenate, and project to C.
#[derive(Clone, Debug)]
pub struct PspPooling {
    reduce: Vec<Conv2dNorm>,
    project: Conv2dNorm,
    pub channels: usize,
}

impl PspPooling {
    pub fn new(pb: &mut ParamBuilder, channels: usize) -> Self {
        let branch = (channels / 4).max(1);
        let reduce = PSP_LEVELS
            .iter()
            .map(|n| Conv2dNorm::new(&mut pb.child(&format!("level{n}")), channels, branch, 1, 1, 1))
            .collect();
        let project = Conv2dNorm::new(&mut pb.child("project"), 4 * branch, channels, 1, 1, 1);
        Self {
            reduce,
            project,
            channels,
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &Var) -> Result<Var> {
        let [_, _, h, w] = expect_channels("psp_pooling", x, self.channels)?;
        ensure!(
            h % 8 == 0 && w % 8 == 0,
            Error::shape("psp_pooling", format!("spatial dims {h}×{w} not divisible by 8"))
        );
        let mut levels = Vec::with_capacity(PSP_LEVELS.len());
        for (n, conv) in PSP_LEVELS.iter().zip(&self.reduce) {
            let (kh, kw) = (h / n, w / n);
            let pooled = x.max_pool2d(kh, kw)?;
            levels.push(conv.forward(store, &pooled)?.upsample_nearest(kh, kw)?);
        }
        let out = self.project.forward(store, &Var::concat(&levels, 1)?)?;
        expect_shape("psp_pooling", &out, [x.shape()[0], self.channels, h, w])?;
        Ok(out)
    }
}
