//! Dual-encoder, single-decoder change-detection network with a conditioned
//! multitask head.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{heads_for, AttentionMode, Fusion, DEFAULT_FT_DEPTH};
use crate::blocks::{Downscale, PspPooling, Unit, UnitConfig, UnitVariant};
use crate::error::{ensure, Error, Result};
use crate::substrate::autograd::{no_grad, Var};
use crate::substrate::checkpoint::{read_manifest, restore_into, save_checkpoint};
use crate::substrate::kernels::ConvGeometry;
use crate::substrate::layers::{Conv2d, Conv2dNorm};
use crate::substrate::param::{init_rng, ParamBuilder, ParamId, ParamStore};
use crate::substrate::tensor::Tensor;

pub const SIGMOID_SCALE_MIN: f64 = 1e-2;
pub const ENTROPY_BINS: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadsRule {
    /// `max(1, channels / 8)` heads per attention layer.
    #[default]
    ChannelsOver8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MantisConfig {
    pub depth: usize,
    pub nf: usize,
    pub variant: UnitVariant,
    pub ft_depth: u32,
    pub heads_rule: HeadsRule,
    pub in_channels: usize,
    pub num_classes: usize,
    pub seed: u64,
}

impl Default for MantisConfig {
    fn default() -> Self {
        Self {
            depth: 6,
            nf: 32,
            variant: UnitVariant::CeecnetV1,
            ft_depth: DEFAULT_FT_DEPTH,
            heads_rule: HeadsRule::ChannelsOver8,
            in_channels: 3,
            num_classes: 2,
            seed: 0,
        }
    }
}

impl MantisConfig {
    pub fn new(depth: usize, nf: usize, variant: UnitVariant) -> Self {
        Self {
            depth,
            nf,
            variant,
            ..Self::default()
        }
    }

    /// Short descriptor such as `D6nf32`.
    pub fn tag(&self) -> String {
        format!("D{}nf{}", self.depth, self.nf)
    }

    pub fn channels_at(&self, level: usize) -> usize {
        self.nf << level
    }

    /// Inputs must be divisible by this in both spatial dims.
    pub fn spatial_multiple(&self) -> usize {
        8 << (self.depth - 1)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.depth >= 2 && self.depth <= 10,
            Error::InvalidArgument(format!("network depth {} outside 2..=10", self.depth))
        );
        ensure!(
            self.nf >= 1 && self.in_channels >= 1,
            Error::InvalidArgument("nf and in_channels must be positive".into())
        );
        ensure!(
            self.num_classes >= 2,
            Error::InvalidArgument("need at least two classes".into())
        );
        if self.variant != UnitVariant::FractalResnet {
            ensure!(
                self.nf % 4 == 0,
                Error::InvalidArgument(format!("CEECNet units need nf % 4 == 0, got {}", self.nf))
            );
        }
        Ok(())
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let m = self.spatial_multiple();
        match *shape {
            [_, c, h, w] if c == self.in_channels && h % m == 0 && w % m == 0 => Ok(()),
            _ => Err(Error::shape(
                "mantis",
                format!(
                    "input {shape:?} needs {} channels and spatial dims divisible by {m}",
                    self.in_channels
                ),
            )),
        }
    }
}

/// `sigmoid(x / γ)` with `γ` clamped into `[1e-2, 1]`.
pub fn crisp_sigmoid(x: &Var, gamma: &Var) -> Result<Var> {
    x.div(&gamma.clamp(SIGMOID_SCALE_MIN, 1.0)).map(|v| v.sigmoid())
}

/// Shannon entropy in bits of the histogram of `t` after min-max scaling to `[−1, 1]`.
pub fn feature_entropy(t: &Tensor, bins: usize) -> Result<f64> {
    ensure!(bins >= 2, Error::InvalidArgument("need at least two bins".into()));
    let data = t.data();
    ensure!(!data.is_empty(), Error::InvalidArgument("empty tensor".into()));
    let (lo, hi) = data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if hi <= lo {
        return Ok(0.0);
    }
    let mut counts = vec![0usize; bins];
    for &v in data {
        let scaled = 2.0 * (v - lo) / (hi - lo) - 1.0;
        let idx = (((scaled + 1.0) / 2.0) * bins as f64) as usize;
        counts[idx.min(bins - 1)] += 1;
    }
    let n = data.len() as f64;
    Ok(counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum())
}

/// Two conv2d_norm + ReLU layers followed by a biased 1×1 projection.
#[derive(Clone, Debug)]
struct TaskBranch {
    conv1: Conv2dNorm,
    conv2: Conv2dNorm,
    logits: Conv2d,
}

impl TaskBranch {
    fn new(pb: &mut ParamBuilder, cin: usize, nf: usize, cout: usize) -> Self {
        Self {
            conv1: Conv2dNorm::new(&mut pb.child("conv1"), cin, nf, 3, 1, 1),
            conv2: Conv2dNorm::new(&mut pb.child("conv2"), nf, nf, 3, 1, 1),
            logits: Conv2d::new(&mut pb.child("logits"), nf, cout, 1, ConvGeometry::default(), true),
        }
    }

    fn forward(&self, store: &ParamStore, x: &Var) -> Result<Var> {
        let h = self.conv1.forward(store, x)?.relu();
        let h = self.conv2.forward(store, &h)?.relu();
        self.logits.forward(store, &h)
    }
}

/// Distance transform, then boundaries, then change segmentation, each step
/// conditioned on the previous predictions.
#[derive(Clone, Debug)]
pub struct SegmentationHead {
    distance: TaskBranch,
    balance_distance: Conv2dNorm,
    boundary: TaskBranch,
    balance_boundary: Conv2dNorm,
    segmentation: TaskBranch,
    pub gamma_sigmoid: ParamId,
    pub nf: usize,
}

pub struct HeadOutput {
    pub distance: Var,
    pub boundary: Var,
    pub segmentation: Var,
}

impl SegmentationHead {
    pub fn new(pb: &mut ParamBuilder, nf: usize, num_classes: usize) -> Self {
        let distance = TaskBranch::new(&mut pb.child("distance"), 2 * nf, nf, 1);
        let balance_distance = Conv2dNorm::new(&mut pb.child("balance_distance"), 1, nf, 1, 1, 1);
        let boundary = TaskBranch::new(&mut pb.child("boundary"), 3 * nf, nf, 1);
        let balance_boundary = Conv2dNorm::new(&mut pb.child("balance_boundary"), 1, nf, 1, 1, 1);
        let segmentation = TaskBranch::new(&mut pb.child("segmentation"), 4 * nf, nf, num_classes);
        let gamma_sigmoid = pb.add_bounded("gamma_sigmoid", Tensor::scalar(1.0), SIGMOID_SCALE_MIN, 1.0);
        Self {
            distance,
            balance_distance,
            boundary,
            balance_boundary,
            segmentation,
            gamma_sigmoid,
            nf,
        }
    }

    pub fn forward(&self, store: &ParamStore, features: &Var, first_fused: &Var) -> Result<HeadOutput> {
        ensure!(
            features.shape() == first_fused.shape() && features.shape()[1] == self.nf,
            Error::shape(
                "segmentation_head",
                format!("{:?} vs {:?}", features.shape(), first_fused.shape())
            )
        );
        let base = Var::concat(&[features.clone(), first_fused.clone()], 1)?;
        let distance = self.distance.forward(store, &base)?.sigmoid();
        let bal_d = self.balance_distance.forward(store, &distance)?;

        let x = Var::concat(&[base.clone(), bal_d.clone()], 1)?;
        let gamma = Var::param(store, self.gamma_sigmoid);
        let boundary = crisp_sigmoid(&self.boundary.forward(store, &x)?, &gamma)?;
        let bal_b = self.balance_boundary.forward(store, &boundary)?;

        let x = Var::concat(&[base, bal_d, bal_b], 1)?;
        let segmentation = self.segmentation.forward(store, &x)?.softmax(1)?;
        Ok(HeadOutput {
            distance,
            boundary,
            segmentation,
        })
    }
}

/// Encoder/decoder activations of one forward pass.
pub struct MantisFeatures {
    pub final_features: Var,
    pub first_fused: Var,
    /// Encoder outputs of each date, per depth.
    pub branch1: Vec<Var>,
    pub branch2: Vec<Var>,
    /// Named intermediate shapes in evaluation order.
    pub ledger: Vec<(String, Vec<usize>)>,
}

pub struct MantisOutput {
    pub distance: Var,
    pub boundary: Var,
    pub segmentation: Var,
    pub features: MantisFeatures,
}

impl MantisOutput {
    /// Probability of the change class, `[B,1,H,W]`.
    pub fn change_probability(&self) -> Result<Var> {
        self.segmentation.narrow(1, 1, 1)
    }
}

#[derive(Clone, Debug)]
struct DecoderStage {
    up: Conv2dNorm,
    combine: Conv2dNorm,
    unit: Unit,
}

#[derive(Clone, Debug)]
pub struct Mantis {
    pub config: MantisConfig,
    pub params: ParamStore,
    conv_first: Conv2dNorm,
    encoder: Vec<Unit>,
    downscale: Vec<Downscale>,
    fusions: Vec<Fusion>,
    middle: Conv2dNorm,
    psp: PspPooling,
    decoder: Vec<DecoderStage>,
    head: SegmentationHead,
}

impl Mantis {
    pub fn new(config: MantisConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = init_rng(config.seed);
        let mut pb = ParamBuilder::new(&mut params, &mut rng);
        let d = config.ft_depth;
        let unit_cfg = |c: usize| UnitConfig {
            channels: c,
            heads: match config.heads_rule {
                HeadsRule::ChannelsOver8 => heads_for(c),
            },
            ft_depth: d,
            variant: config.variant,
        };
        let nf = config.nf;
        let conv_first = Conv2dNorm::new(&mut pb.child("conv_first"), config.in_channels, nf, 1, 1, 1);
        let mut encoder = Vec::new();
        let mut downscale = Vec::new();
        let mut fusions = Vec::new();
        for i in 0..config.depth {
            let c = config.channels_at(i);
            encoder.push(Unit::new(&mut pb.child(&format!("encoder{i}")), unit_cfg(c)));
            if i + 1 < config.depth {
                downscale.push(Downscale::new(&mut pb.child(&format!("down{i}")), c, 2 * c));
                fusions.push(Fusion::new(&mut pb.child(&format!("fusion{i}")), c, heads_for(c), d));
            }
        }
        let deep = config.channels_at(config.depth - 1);
        let middle = Conv2dNorm::new(&mut pb.child("middle"), 2 * deep, deep, 3, 1, 1);
        let psp = PspPooling::new(&mut pb.child("psp"), deep);
        let mut decoder = Vec::new();
        for i in (0..config.depth - 1).rev() {
            let c = config.channels_at(i);
            let mut pb = pb.child(&format!("decoder{i}"));
            decoder.push(DecoderStage {
                up: Conv2dNorm::new(&mut pb.child("up"), 2 * c, c, 1, 1, 1),
                combine: Conv2dNorm::new(&mut pb.child("combine"), 2 * c, c, 3, 1, 1),
                unit: Unit::new(&mut pb.child("unit"), unit_cfg(c)),
            });
        }
        let head = SegmentationHead::new(&mut pb.child("head"), nf, config.num_classes);
        Ok(Self {
            config,
            params,
            conv_first,
            encoder,
            downscale,
            fusions,
            middle,
            psp,
            decoder,
            head,
        })
    }

    /// Parameters of the shared encoder (stem, units, transitions).
    pub fn encoder_param_prefixes(&self) -> Vec<String> {
        let mut p = vec!["conv_first.".to_string()];
        for i in 0..self.config.depth {
            p.push(format!("encoder{i}."));
            if i + 1 < self.config.depth {
                p.push(format!("down{i}."));
            }
        }
        p
    }

    /// Every fusion `γ` (attention emphasis scales), excluding the sigmoid scale.
    pub fn attention_gammas(&self) -> Vec<ParamId> {
        self.params
            .iter()
            .filter(|(_, p)| {
                let leaf = p.name.rsplit('.').next().unwrap_or("");
                leaf.starts_with("gamma") && leaf != "gamma_sigmoid" && p.value.numel() == 1
            })
            .map(|(id, _)| id)
            .collect()
    }

    pub fn gamma_sigmoid(&self) -> ParamId {
        self.head.gamma_sigmoid
    }

    pub fn features(&self, store: &ParamStore, img1: &Var, img2: &Var, mode: AttentionMode) -> Result<MantisFeatures> {
        ensure!(
            img1.shape() == img2.shape(),
            Error::shape("mantis", format!("{:?} vs {:?}", img1.shape(), img2.shape()))
        );
        self.config.check_input(img1.shape())?;
        let cfg = &self.config;
        let b = img1.shape()[0];
        let (h, w) = (img1.shape()[2], img1.shape()[3]);
        let mut ledger = Vec::new();
        let mut record = |name: String, v: &Var, want: [usize; 4]| -> Result<()> {
            ensure!(
                v.shape() == want,
                Error::shape("mantis", format!("{name}: expected {want:?}, got {:?}", v.shape()))
            );
            ledger.push((name, v.shape().to_vec()));
            Ok(())
        };

        // both dates share one pass through the encoder, stacked on the batch axis
        let mut x = self
            .conv_first
            .forward(store, &Var::concat(&[img1.clone(), img2.clone()], 0)?)?;
        let (mut branch1, mut branch2, mut fused) = (Vec::new(), Vec::new(), Vec::new());
        for i in 0..cfg.depth {
            let c = cfg.channels_at(i);
            let shape = [b, c, h >> i, w >> i];
            x = self.encoder[i].forward(store, &x, mode)?;
            let (e1, e2) = (x.narrow(0, 0, b)?, x.narrow(0, b, b)?);
            record(format!("encoder{i}"), &e1, shape)?;
            if i + 1 < cfg.depth {
                let f = self.fusions[i].forward(store, &e1, &e2, mode)?;
                record(format!("fusion{i}"), &f, shape)?;
                fused.push(f);
                x = self.downscale[i].forward(store, &x)?;
            }
            branch1.push(e1);
            branch2.push(e2);
        }

        let deepest = cfg.depth - 1;
        let shape = [b, cfg.channels_at(deepest), h >> deepest, w >> deepest];
        let pair = Var::concat(&[branch1[deepest].clone(), branch2[deepest].clone()], 1)?;
        let mut y = self.psp.forward(store, &self.middle.forward(store, &pair)?)?;
        record("middle".into(), &y, shape)?;

        for (stage, i) in self.decoder.iter().zip((0..deepest).rev()) {
            let shape = [b, cfg.channels_at(i), h >> i, w >> i];
            let up = stage.up.forward(store, &y.upsample_bilinear2x()?)?.relu();
            record(format!("decoder{i}.up"), &up, shape)?;
            let merged = stage
                .combine
                .forward(store, &Var::concat(&[up, fused[i].clone()], 1)?)?;
            y = stage.unit.forward(store, &merged, mode)?;
            record(format!("decoder{i}"), &y, shape)?;
        }

        let first_fused = fused.swap_remove(0);
        Ok(MantisFeatures {
            final_features: y,
            first_fused,
            branch1,
            branch2,
            ledger,
        })
    }

    pub fn forward_with(&self, store: &ParamStore, img1: &Var, img2: &Var, mode: AttentionMode) -> Result<MantisOutput> {
        let features = self.features(store, img1, img2, mode)?;
        let head = self
            .head
            .forward(store, &features.final_features, &features.first_fused)?;
        Ok(MantisOutput {
            distance: head.distance,
            boundary: head.boundary,
            segmentation: head.segmentation,
            features,
        })
    }

    pub fn forward(&self, img1: &Var, img2: &Var) -> Result<MantisOutput> {
        self.forward_with(&self.params, img1, img2, AttentionMode::Enabled)
    }

    /// Change-class probability `[B,1,H,W]` without building a gradient graph.
    pub fn predict(&self, img1: &Tensor, img2: &Tensor) -> Result<Tensor> {
        let _g = no_grad();
        let out = self.forward(&Var::constant(img1.clone()), &Var::constant(img2.clone()))?;
        Ok(out.change_probability()?.to_tensor())
    }

    /// Serialisable model description stored in checkpoint manifests.
    pub fn config_json(&self) -> serde_json::Value {
        serde_json::to_value(&self.config).expect("config serialises")
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_checkpoint(dir, &self.params, &self.config_json())
    }

    /// Rebuilds the network described by a checkpoint manifest and loads its weights.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = read_manifest(dir)?;
        let config: MantisConfig = serde_json::from_value(manifest.model)
            .map_err(|e| Error::Data(format!("{}: bad model config: {e}", dir.display())))?;
        let mut model = Self::new(config)?;
        restore_into(&mut model.params, dir)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::substrate::autograd::trace_shapes;

    #[test]
    fn crisp_sigmoid_reference_points() {
        let x = Var::constant(Tensor::new(vec![2], vec![0.0, 0.5]).unwrap());
        let g = Var::constant(Tensor::scalar(0.610));
        let y = crisp_sigmoid(&x, &g).unwrap();
        assert_eq!(y.value().data()[0], 0.5);
        assert!((y.value().data()[1] - 0.6942).abs() < 1e-4);
        // clamped below
        let tiny = crisp_sigmoid(&x, &Var::constant(Tensor::scalar(1e-9))).unwrap();
        assert!(tiny.value().all_finite());
    }

    #[test]
    fn entropy_cases() {
        assert_eq!(feature_entropy(&Tensor::full(&[10], 3.0), 256).unwrap(), 0.0);
        let t = Tensor::from_fn(&[256], |i| i as f64);
        assert!((feature_entropy(&t, 256).unwrap() - 8.0).abs() < 1e-12);
        let t = Tensor::from_fn(&[64], |i| (i % 4) as f64);
        assert!((feature_entropy(&t, 4).unwrap() - 2.0).abs() < 1e-12);
        assert!(feature_entropy(&t, 1).is_err());
    }

    #[test]
    fn config_json_roundtrip_and_defaults() {
        let c: MantisConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(c, MantisConfig::default());
        assert_eq!(c.tag(), "D6nf32");
        let back: MantisConfig = serde_json::from_value(serde_json::to_value(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn traced_shapes_for_small_net() {
        let m = Mantis::new(MantisConfig::new(4, 8, UnitVariant::CeecnetV1)).unwrap();
        let _t = trace_shapes();
        let x = Var::input(Tensor::phantom(vec![1, 3, 64, 64]));
        let out = m.forward(&x, &x).unwrap();
        assert_eq!(out.features.final_features.shape(), &[1, 8, 64, 64]);
        assert_eq!(out.features.first_fused.shape(), &[1, 8, 64, 64]);
        assert_eq!(out.segmentation.shape(), &[1, 2, 64, 64]);
    }

    #[test]
    fn rejects_indivisible_input() {
        let m = Mantis::new(MantisConfig::new(3, 8, UnitVariant::FractalResnet)).unwrap();
        let x = Var::input(Tensor::zeros(&[1, 3, 24, 24]));
        assert!(m.forward(&x, &x).is_err());
    }

    #[test]
    fn checkpoint_round_trip_predicts_identically() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = Mantis::new(MantisConfig::new(2, 4, UnitVariant::CeecnetV2)).unwrap();
        for p in m.params.iter_mut() {
            p.value = p.value.map(|v| v + 0.01);
        }
        m.save(dir.path()).unwrap();
        let back = Mantis::load(dir.path()).unwrap();
        assert_eq!(back.config, m.config);
        let mut rng = init_rng(4);
        let a = Tensor::rand_uniform(&[1, 3, 16, 16], 0.0, 1.0, &mut rng);
        let b = Tensor::rand_uniform(&[1, 3, 16, 16], 0.0, 1.0, &mut rng);
        assert_eq!(m.predict(&a, &b).unwrap(), back.predict(&a, &b).unwrap());
    }
}
