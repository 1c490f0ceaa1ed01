//! Sliding-window inference with reflect padding and overlap averaging,
//! checkpoint ensembles, confusion maps and loss-landscape tables.

use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::ftnmt::{values, FtConfig};
use crate::mantis::Mantis;
use crate::pipeline::chips::extract_chips;
use crate::substrate::tensor::Tensor;
use crate::trainer::metrics::{classify, PixelClass};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub window: usize,
    pub stride: usize,
    pub threshold: f64,
    pub checkpoints: Vec<PathBuf>,
    /// Windows evaluated per forward pass.
    pub batch_size: usize,
    pub palette: Palette,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            window: 256,
            stride: 64,
            threshold: 0.5,
            checkpoints: Vec::new(),
            batch_size: 4,
            palette: Palette::default(),
        }
    }
}

impl InferenceConfig {
    pub fn new(window: usize, stride: usize) -> Self {
        Self {
            window,
            stride,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.stride >= 1 && self.stride <= self.window,
            Error::InvalidArgument(format!("stride {} must lie in [1, {}]", self.stride, self.window))
        );
        ensure!(
            self.threshold > 0.0 && self.threshold < 1.0,
            Error::InvalidArgument(format!("threshold {} outside (0, 1)", self.threshold))
        );
        ensure!(self.batch_size >= 1, Error::InvalidArgument("batch size must be at least 1".into()));
        Ok(())
    }
}

/// Anything that maps a batch of co-registered windows to change probabilities.
pub trait ChangeModel: Sync {
    /// Expected image channels, if the model constrains them.
    fn in_channels(&self) -> Option<usize>;

    /// `[B,C,F,F]` pairs to `[B,1,F,F]` probabilities in `[0,1]`.
    fn predict(&self, img1: &Tensor, img2: &Tensor) -> Result<Tensor>;
}

impl ChangeModel for Mantis {
    fn in_channels(&self) -> Option<usize> {
        Some(self.config.in_channels)
    }

    fn predict(&self, img1: &Tensor, img2: &Tensor) -> Result<Tensor> {
        Mantis::predict(self, img1, img2)
    }
}

/// Padding `(before, after)` along one axis so that windows of side `f` at
/// `stride` tile the padded extent exactly.
pub fn padding_for(dim: usize, f: usize, stride: usize) -> (usize, usize) {
    let padded = if dim <= f {
        f
    } else {
        f + (dim - f).div_ceil(stride) * stride
    };
    let extra = padded - dim;
    (extra / 2, extra - extra / 2)
}

/// Mirror index without repeating the edge sample.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * (n - 1).max(1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

/// Reflect-pads the two trailing axes of `[C,H,W]`.
pub fn reflect_pad(t: &Tensor, (top, bottom): (usize, usize), (left, right): (usize, usize)) -> Result<Tensor> {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    ensure!(
        top.max(bottom) < h && left.max(right) < w,
        Error::Data(format!(
            "raster {h}×{w} is too small for reflect padding ({top},{bottom},{left},{right})"
        ))
    );
    let (ph, pw) = (h + top + bottom, w + left + right);
    let src = t.data();
    let mut out = Vec::with_capacity(c * ph * pw);
    for ch in 0..c {
        for y in 0..ph {
            let sy = reflect(y as isize - top as isize, h);
            for x in 0..pw {
                let sx = reflect(x as isize - left as isize, w);
                out.push(src[(ch * h + sy) * w + sx]);
            }
        }
    }
    Tensor::new(vec![c, ph, pw], out)
}

fn crop(t: &Tensor, y: usize, x: usize, f: usize) -> Vec<f64> {
    let (c, w) = (t.shape()[0], t.shape()[2]);
    let h = t.shape()[1];
    let mut out = Vec::with_capacity(c * f * f);
    for ch in 0..c {
        for r in 0..f {
            let start = (ch * h + y + r) * w + x;
            out.extend_from_slice(&t.data()[start..start + f]);
        }
    }
    out
}

/// Number of windows evaluated for an `h×w` raster after padding.
pub fn window_count(h: usize, w: usize, cfg: &InferenceConfig) -> Result<usize> {
    let (py, px) = (padding_for(h, cfg.window, cfg.stride), padding_for(w, cfg.window, cfg.stride));
    Ok(extract_chips(w + px.0 + px.1, h + py.0 + py.1, cfg.window, cfg.stride)?.len())
}

/// Per-pixel mean change probability over every window covering the pixel.
pub fn sliding_inference<M: ChangeModel + ?Sized>(
    model: &M,
    raster1: &Tensor,
    raster2: &Tensor,
    cfg: &InferenceConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    ensure!(
        raster1.rank() == 3 && raster1.shape() == raster2.shape(),
        Error::Data(format!(
            "rasters must be co-registered C×H×W, got {:?} and {:?}",
            raster1.shape(),
            raster2.shape()
        ))
    );
    let (c, h, w) = (raster1.shape()[0], raster1.shape()[1], raster1.shape()[2]);
    if let Some(expected) = model.in_channels() {
        ensure!(
            c == expected,
            Error::Data(format!("raster has {c} channels, model expects {expected}"))
        );
    }
    let f = cfg.window;
    let (py, px) = (padding_for(h, f, cfg.stride), padding_for(w, f, cfg.stride));
    let a = reflect_pad(raster1, py, px)?;
    let b = reflect_pad(raster2, py, px)?;
    let (ph, pw) = (a.shape()[1], a.shape()[2]);
    let origins = extract_chips(pw, ph, f, cfg.stride)?;

    let (sum, count) = origins
        .par_chunks(cfg.batch_size)
        .map(|group| -> Result<(Vec<f64>, Vec<u32>)> {
            let n = group.len();
            let mut d1 = Vec::with_capacity(n * c * f * f);
            let mut d2 = Vec::with_capacity(n * c * f * f);
            for &(x, y) in group {
                d1.extend(crop(&a, y, x, f));
                d2.extend(crop(&b, y, x, f));
            }
            let prob = model.predict(
                &Tensor::new(vec![n, c, f, f], d1)?,
                &Tensor::new(vec![n, c, f, f], d2)?,
            )?;
            ensure!(
                prob.shape() == [n, 1, f, f],
                Error::shape("sliding_inference", format!("model returned {:?}", prob.shape()))
            );
            let mut sum = vec![0.0; ph * pw];
            let mut count = vec![0u32; ph * pw];
            for (k, &(x, y)) in group.iter().enumerate() {
                let win = &prob.data()[k * f * f..(k + 1) * f * f];
                for r in 0..f {
                    let row = (y + r) * pw + x;
                    for (s, &p) in sum[row..row + f].iter_mut().zip(&win[r * f..(r + 1) * f]) {
                        *s += p;
                    }
                    count[row..row + f].iter_mut().for_each(|n| *n += 1);
                }
            }
            Ok((sum, count))
        })
        .try_reduce(
            || (vec![0.0; ph * pw], vec![0u32; ph * pw]),
            |(mut s1, mut c1), (s2, c2)| {
                s1.iter_mut().zip(&s2).for_each(|(a, b)| *a += b);
                c1.iter_mut().zip(&c2).for_each(|(a, b)| *a += b);
                Ok((s1, c1))
            },
        )?;

    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let i = (y + py.0) * pw + x + px.0;
            debug_assert!(count[i] > 0, "pixel not covered by any window");
            out.push(sum[i] / count[i] as f64);
        }
    }
    Tensor::new(vec![h, w], out)
}

/// Mean of per-model sliding-inference maps. Per pixel, values are summed in
/// sorted order so the result does not depend on model order.
pub fn ensemble_inference<M: ChangeModel>(
    models: &[M],
    raster1: &Tensor,
    raster2: &Tensor,
    cfg: &InferenceConfig,
) -> Result<Tensor> {
    ensure!(!models.is_empty(), Error::InvalidArgument("ensemble needs at least one model".into()));
    let channels = models[0].in_channels();
    ensure!(
        models.iter().all(|m| m.in_channels() == channels),
        Error::InvalidArgument("ensemble members expect different input channels".into())
    );
    let maps = models
        .iter()
        .map(|m| sliding_inference(m, raster1, raster2, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(average_maps(&maps))
}

/// Order-independent per-pixel mean of equally shaped maps.
pub fn average_maps(maps: &[Tensor]) -> Tensor {
    let k = maps.len() as f64;
    let mut column = Vec::with_capacity(maps.len());
    Tensor::from_fn(maps[0].shape(), |i| {
        column.clear();
        column.extend(maps.iter().map(|m| m.data()[i]));
        column.sort_by(f64::total_cmp);
        column.iter().sum::<f64>() / k
    })
}

/// Thresholded binary mask (`p ≥ threshold`).
pub fn threshold_map(prob: &Tensor, threshold: f64) -> Tensor {
    prob.map(|p| (p >= threshold) as u8 as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Palette {
    pub tn: [u8; 3],
    pub tp: [u8; 3],
    pub fp: [u8; 3],
    #[serde(rename = "fn")]
    pub fn_: [u8; 3],
}

impl Default for Palette {
    fn default() -> Self {
        Self {
            tn: [0, 0, 0],
            tp: [255, 255, 255],
            fp: [255, 0, 0],
            fn_: [0, 0, 255],
        }
    }
}

impl Palette {
    pub fn colour(&self, class: PixelClass) -> [u8; 3] {
        match class {
            PixelClass::TrueNegative => self.tn,
            PixelClass::TruePositive => self.tp,
            PixelClass::FalsePositive => self.fp,
            PixelClass::FalseNegative => self.fn_,
        }
    }
}

/// Row-major RGB raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbRaster {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<[u8; 3]>,
}

/// Colour-codes each pixel by its confusion class.
pub fn confusion_map(pred: &Tensor, gt: &Tensor, palette: &Palette) -> Result<RgbRaster> {
    ensure!(
        pred.rank() == 2 && pred.shape() == gt.shape(),
        Error::shape("confusion_map", format!("{:?} vs {:?}", pred.shape(), gt.shape()))
    );
    Ok(RgbRaster {
        height: pred.shape()[0],
        width: pred.shape()[1],
        pixels: pred
            .data()
            .iter()
            .zip(gt.data())
            .map(|(&p, &g)| palette.colour(classify(p > 0.5, g > 0.5)))
            .collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandscapeRow {
    pub px: f64,
    pub py: f64,
    pub depth: u32,
    pub value: f64,
}

/// ⟨FT⟩^d between the 2-vectors `p` and `l`.
pub fn landscape_value(p: [f64; 2], l: [f64; 2], depth: u32) -> Result<f64> {
    let t = |v: [f64; 2]| Tensor::new(vec![2], v.to_vec());
    Ok(values::ftnmt_avg(&t(p)?, &t(l)?, &FtConfig::new(depth, &[0]))?.item())
}

/// ⟨FT⟩^d over the `grid_n × grid_n` lattice of the unit square for each depth;
/// rows are ordered by depth, then `py`, then `px`.
pub fn landscape_emit(l: [f64; 2], depths: &[u32], grid_n: usize) -> Result<Vec<LandscapeRow>> {
    ensure!(grid_n >= 2, Error::InvalidArgument("landscape grid needs at least 2 points per axis".into()));
    ensure!(
        l.iter().all(|v| (0.0..=1.0).contains(v)),
        Error::InvalidArgument(format!("ground truth {l:?} outside the unit square"))
    );
    let axis: Vec<f64> = (0..grid_n).map(|i| i as f64 / (grid_n - 1) as f64).collect();
    let mut rows = Vec::with_capacity(depths.len() * grid_n * grid_n);
    for &d in depths {
        for &py in &axis {
            for &px in &axis {
                rows.push(LandscapeRow {
                    px,
                    py,
                    depth: d,
                    value: landscape_value([px, py], l, d)?,
                });
            }
        }
    }
    Ok(rows)
}

pub fn landscape_csv(rows: &[LandscapeRow]) -> String {
    let mut s = String::from("p_x,p_y,d,ftnmt\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.px, r.py, r.depth, r.value));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::substrate::param::init_rng;

    struct Constant(f64);

    impl ChangeModel for Constant {
        fn in_channels(&self) -> Option<usize> {
            None
        }
        fn predict(&self, img1: &Tensor, _: &Tensor) -> Result<Tensor> {
            let s = img1.shape();
            Ok(Tensor::full(&[s[0], 1, s[2], s[3]], self.0))
        }
    }

    #[test]
    fn padding_policy() {
        assert_eq!(padding_for(256, 256, 256), (0, 0));
        assert_eq!(padding_for(512, 256, 64), (0, 0));
        assert_eq!(padding_for(300, 256, 64), (10, 10));
        assert_eq!(padding_for(200, 256, 64), (28, 28));
        assert_eq!(window_count(512, 512, &InferenceConfig::new(256, 64)).unwrap(), 25);
    }

    #[test]
    fn reflect_without_edge_repeat() {
        let t = Tensor::new(vec![1, 1, 4], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let p = reflect_pad(&Tensor::new(vec![1, 3, 4], [t.data(); 3].concat()).unwrap(), (0, 0), (2, 2)).unwrap();
        assert_eq!(&p.data()[..8], &[2.0, 1.0, 0.0, 1.0, 2.0, 3.0, 2.0, 1.0]);
        assert!(reflect_pad(&t, (1, 0), (0, 0)).is_err());
    }

    #[test]
    fn constant_model_gives_constant_map() {
        let mut rng = init_rng(0);
        let r = Tensor::rand_uniform(&[3, 45, 37], 0.0, 1.0, &mut rng);
        let out = sliding_inference(&Constant(0.3), &r, &r, &InferenceConfig::new(16, 5)).unwrap();
        assert_eq!(out.shape(), &[45, 37]);
        assert!(out.data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
    }

    #[test]
    fn ensemble_of_two_stubs() {
        let r = Tensor::zeros(&[1, 8, 8]);
        let out = ensemble_inference(&[Constant(0.2), Constant(0.6)], &r, &r, &InferenceConfig::new(8, 4)).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.4).abs() < 1e-15));
        assert!(ensemble_inference::<Constant>(&[], &r, &r, &InferenceConfig::new(8, 4)).is_err());
    }

    #[test]
    fn confusion_palettes() {
        let gt = Tensor::new(vec![2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let pal = Palette::default();
        let same = confusion_map(&gt, &gt, &pal).unwrap();
        assert!(same.pixels.iter().all(|c| *c == pal.tp || *c == pal.tn));
        let inv = confusion_map(&gt.map(|v| 1.0 - v), &gt, &pal).unwrap();
        assert!(inv.pixels.iter().all(|c| *c == pal.fp || *c == pal.fn_));
        assert!(confusion_map(&gt, &Tensor::zeros(&[4]), &pal).is_err());
    }

    #[test]
    fn landscape_peaks_at_ground_truth() {
        let rows = landscape_emit([0.4, 0.6], &[0, 3, 5], 11).unwrap();
        assert_eq!(rows.len(), 3 * 121);
        for r in rows.iter().filter(|r| r.px == 0.4 && r.py == 0.6) {
            assert_eq!(r.value, 1.0);
        }
        assert!(landscape_csv(&rows[..1]).starts_with("p_x,p_y,d,ftnmt\n0,0,0,"));
    }

    #[test]
    fn config_bounds() {
        assert!(InferenceConfig::new(16, 0).validate().is_err());
        assert!(InferenceConfig::new(16, 17).validate().is_err());
        assert!(InferenceConfig::default().validate().is_ok());
    }
}
