//! Random geometric and photometric augmentation of chip pairs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::pipeline::ChipPair;
use crate::substrate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub p_geometric: f64,
    /// Rotation angle range in degrees.
    pub rotation: (f64, f64),
    pub zoom: (f64, f64),
    pub p_brightness: f64,
    pub brightness: (f64, f64),
    pub p_shadow: f64,
    pub shadow_polygons: (usize, usize),
    pub shadow_factor: f64,
    pub p_time_reversal: f64,
    pub p_random_identity: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            p_geometric: 1.0,
            rotation: (0.0, 360.0),
            zoom: (0.8, 1.2),
            p_brightness: 1.0,
            brightness: (0.8, 1.2),
            p_shadow: 0.5,
            shadow_polygons: (1, 3),
            shadow_factor: 0.5,
            p_time_reversal: 0.5,
            p_random_identity: 0.5,
        }
    }
}

impl AugmentConfig {
    /// Configuration that leaves every chip untouched.
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("p_geometric", self.p_geometric),
            ("p_brightness", self.p_brightness),
            ("p_shadow", self.p_shadow),
            ("p_time_reversal", self.p_time_reversal),
            ("p_random_identity", self.p_random_identity),
        ] {
            ensure!(
                (0.0..=1.0).contains(&p),
                Error::InvalidArgument(format!("{name} = {p} is not a probability"))
            );
        }
        let ordered = |(lo, hi): (f64, f64)| lo <= hi;
        ensure!(
            ordered(self.rotation) && ordered(self.zoom) && ordered(self.brightness),
            Error::InvalidArgument("augmentation ranges must be (low, high)".into())
        );
        ensure!(
            self.zoom.0 > 0.0 && self.shadow_polygons.0 <= self.shadow_polygons.1,
            Error::InvalidArgument("zoom must be positive and polygon counts ordered".into())
        );
        Ok(())
    }
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

/// Rotation by `angle` radians and zoom about the centre `(cx, cy)` in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeometricTransform {
    pub angle: f64,
    pub zoom: f64,
    pub cx: f64,
    pub cy: f64,
}

impl GeometricTransform {
    pub fn identity() -> Self {
        Self {
            angle: 0.0,
            zoom: 1.0,
            cx: 0.0,
            cy: 0.0,
        }
    }

    pub fn random(rng: &mut impl Rng, cfg: &AugmentConfig, h: usize, w: usize) -> Self {
        Self {
            angle: uniform(rng, cfg.rotation).to_radians(),
            zoom: uniform(rng, cfg.zoom),
            cx: rng.gen_range(0.0..w as f64),
            cy: rng.gen_range(0.0..h as f64),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.angle.rem_euclid(std::f64::consts::TAU) == 0.0 && self.zoom == 1.0
    }

    /// Source coordinate sampled by output pixel `(x, y)`.
    pub fn source(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        (
            self.cx + (c * dx + s * dy) / self.zoom,
            self.cy + (-s * dx + c * dy) / self.zoom,
        )
    }

    /// Bilinear resampling of an `[..., H, W]` tensor, clamping at the borders.
    pub fn warp_bilinear(&self, t: &Tensor) -> Tensor {
        self.warp(t, |plane, h, w, sx, sy| {
            let fx = sx.clamp(0.0, (w - 1) as f64);
            let fy = sy.clamp(0.0, (h - 1) as f64);
            let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (ax, ay) = (fx - x0 as f64, fy - y0 as f64);
            let at = |y: usize, x: usize| plane[y * w + x];
            (1.0 - ay) * ((1.0 - ax) * at(y0, x0) + ax * at(y0, x1))
                + ay * ((1.0 - ax) * at(y1, x0) + ax * at(y1, x1))
        })
    }

    /// Nearest-neighbour resampling; samples outside the source are 0.
    pub fn warp_nearest(&self, t: &Tensor) -> Tensor {
        self.warp(t, |plane, h, w, sx, sy| {
            let (x, y) = ((sx + 0.5).floor(), (sy + 0.5).floor());
            if x < 0.0 || y < 0.0 || x >= w as f64 || y >= h as f64 {
                0.0
            } else {
                plane[y as usize * w + x as usize]
            }
        })
    }

    fn warp(&self, t: &Tensor, sample: impl Fn(&[f64], usize, usize, f64, f64) -> f64) -> Tensor {
        if self.is_identity() {
            return t.clone();
        }
        let s = t.shape();
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let mut out = Tensor::zeros(s);
        for (src, dst) in t.data().chunks(h * w).zip(out.data_mut().chunks_mut(h * w)) {
            for y in 0..h {
                for x in 0..w {
                    let (sx, sy) = self.source(x as f64, y as f64);
                    dst[y * w + x] = sample(src, h, w, sx, sy);
                }
            }
        }
        out
    }

    /// Applies the same transform to both dates and every target plane.
    pub fn apply(&self, chip: &ChipPair) -> ChipPair {
        ChipPair {
            t1: self.warp_bilinear(&chip.t1),
            t2: self.warp_bilinear(&chip.t2),
            mask: self.warp_nearest(&chip.mask),
            distance: self.warp_nearest(&chip.distance),
            boundary: self.warp_nearest(&chip.boundary),
        }
    }
}

/// Swaps the two dates; targets are unchanged.
pub fn time_reversal(chip: &ChipPair) -> ChipPair {
    ChipPair {
        t1: chip.t2.clone(),
        t2: chip.t1.clone(),
        ..chip.clone()
    }
}

/// Copies one date onto the other (coin flip) and clears every target.
pub fn random_identity(chip: &ChipPair, rng: &mut impl Rng) -> ChipPair {
    let keep = if rng.gen_bool(0.5) { &chip.t1 } else { &chip.t2 };
    let zero = Tensor::zeros(chip.mask.shape());
    ChipPair {
        t1: keep.clone(),
        t2: keep.clone(),
        mask: zero.clone(),
        distance: zero.clone(),
        boundary: zero,
    }
}

fn scale_brightness(img: &Tensor, factor: f64) -> Tensor {
    img.map(|v| (v * factor).clamp(0.0, 1.0))
}

/// Convex polygon with vertices on a circle at sorted random angles.
fn random_convex_polygon(rng: &mut impl Rng, h: usize, w: usize) -> Vec<(f64, f64)> {
    let side = h.min(w) as f64;
    let (cx, cy) = (rng.gen_range(0.0..w as f64), rng.gen_range(0.0..h as f64));
    let r = rng.gen_range(side / 16.0..=side / 4.0);
    let n = rng.gen_range(3..=8);
    let mut angles: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
    angles.sort_by(f64::total_cmp);
    angles.iter().map(|a| (cx + r * a.cos(), cy + r * a.sin())).collect()
}

fn inside_convex(poly: &[(f64, f64)], x: f64, y: f64) -> bool {
    let mut sign = 0.0;
    for (i, &(ax, ay)) in poly.iter().enumerate() {
        let (bx, by) = poly[(i + 1) % poly.len()];
        let cross = (bx - ax) * (y - ay) - (by - ay) * (x - ax);
        if cross != 0.0 {
            if sign != 0.0 && cross.signum() != sign {
                return false;
            }
            sign = cross.signum();
        }
    }
    true
}

fn cast_shadow(img: &mut Tensor, poly: &[(f64, f64)], factor: f64) {
    let s = img.shape().to_vec();
    let (h, w) = (s[1], s[2]);
    for plane in img.data_mut().chunks_mut(h * w) {
        for y in 0..h {
            for x in 0..w {
                if inside_convex(poly, x as f64 + 0.5, y as f64 + 0.5) {
                    plane[y * w + x] *= factor;
                }
            }
        }
    }
}

/// Geometric warp, brightness, shadows, time reversal, then random identity.
pub fn augment(chip: &ChipPair, cfg: &AugmentConfig, rng: &mut impl Rng) -> ChipPair {
    if !cfg.enabled {
        return chip.clone();
    }
    let (h, w) = chip.size();
    let mut out = if rng.gen_bool(cfg.p_geometric) {
        GeometricTransform::random(rng, cfg, h, w).apply(chip)
    } else {
        chip.clone()
    };
    if rng.gen_bool(cfg.p_brightness) {
        out.t1 = scale_brightness(&out.t1, uniform(rng, cfg.brightness));
        out.t2 = scale_brightness(&out.t2, uniform(rng, cfg.brightness));
    }
    if rng.gen_bool(cfg.p_shadow) {
        let n = rng.gen_range(cfg.shadow_polygons.0..=cfg.shadow_polygons.1);
        for _ in 0..n {
            let poly = random_convex_polygon(rng, h, w);
            let target = if rng.gen_bool(0.5) { &mut out.t1 } else { &mut out.t2 };
            cast_shadow(target, &poly, cfg.shadow_factor);
        }
    }
    if rng.gen_bool(cfg.p_time_reversal) {
        out = time_reversal(&out);
    }
    if rng.gen_bool(cfg.p_random_identity) {
        out = random_identity(&out, rng);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::substrate::param::init_rng;

    fn chip() -> ChipPair {
        let mut rng = init_rng(9);
        let mask = Tensor::from_fn(&[16, 16], |i| ((i / 16 > 4 && i / 16 < 11) && (i % 16 > 3)) as u8 as f64);
        ChipPair::from_mask(
            Tensor::rand_uniform(&[3, 16, 16], 0.0, 1.0, &mut rng),
            Tensor::rand_uniform(&[3, 16, 16], 0.0, 1.0, &mut rng),
            mask,
        )
        .unwrap()
    }

    #[test]
    fn neutral_settings_are_identity() {
        let c = chip();
        let cfg = AugmentConfig {
            p_geometric: 1.0,
            rotation: (0.0, 0.0),
            zoom: (1.0, 1.0),
            p_brightness: 0.0,
            p_shadow: 0.0,
            p_time_reversal: 0.0,
            p_random_identity: 0.0,
            ..Default::default()
        };
        assert_eq!(augment(&c, &cfg, &mut init_rng(1)), c);
    }

    #[test]
    fn time_reversal_is_an_involution() {
        let c = chip();
        let once = time_reversal(&c);
        assert_eq!(once.t1, c.t2);
        assert_eq!(once.mask, c.mask);
        assert_eq!(time_reversal(&once), c);
    }

    #[test]
    fn random_identity_clears_targets() {
        let out = random_identity(&chip(), &mut init_rng(2));
        assert_eq!(out.t1, out.t2);
        for t in [&out.mask, &out.distance, &out.boundary] {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn quarter_turn_about_pixel_centre() {
        let t = Tensor::from_fn(&[1, 3, 3], |i| i as f64);
        let rot = GeometricTransform {
            angle: std::f64::consts::FRAC_PI_2,
            zoom: 1.0,
            cx: 1.0,
            cy: 1.0,
        };
        let out = rot.warp_nearest(&t);
        // output (x, y) samples source (1 + (y − 1), 1 − (x − 1))
        assert_eq!(out.data(), &[6.0, 3.0, 0.0, 7.0, 4.0, 1.0, 8.0, 5.0, 2.0]);
    }

    #[test]
    fn rejects_bad_probabilities() {
        let cfg = AugmentConfig {
            p_shadow: 1.5,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        assert!(AugmentConfig::default().validate().is_ok());
    }
}
