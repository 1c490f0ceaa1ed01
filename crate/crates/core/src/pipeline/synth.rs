//! Deterministic synthetic change-detection chips: textured rectangles on a
//! noisy background, some present in both dates and some in only one.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::pipeline::chips::Rect;
use crate::pipeline::ChipPair;
use crate::substrate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub size: usize,
    pub channels: usize,
    /// Rectangles shared by both dates.
    pub stable: (usize, usize),
    /// Rectangles present in exactly one date.
    pub changed: (usize, usize),
    /// Rectangle side as a fraction of the chip side.
    pub side: (f64, f64),
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            size: 64,
            channels: 3,
            stable: (1, 3),
            changed: (1, 3),
            side: (0.12, 0.35),
            noise: 0.04,
        }
    }
}

impl SynthConfig {
    pub fn with_size(size: usize) -> Self {
        Self {
            size,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.size >= 4 && self.channels >= 1,
            Error::InvalidArgument("synthetic chips need size ≥ 4 and at least one channel".into())
        );
        ensure!(
            self.stable.0 <= self.stable.1 && self.changed.0 <= self.changed.1,
            Error::InvalidArgument("object count ranges must be ordered".into())
        );
        ensure!(
            0.0 < self.side.0 && self.side.0 <= self.side.1 && self.side.1 <= 1.0,
            Error::InvalidArgument("rectangle side fractions must lie in (0, 1]".into())
        );
        Ok(())
    }
}

/// A generated pair together with the rectangle footprints drawn in each date.
#[derive(Clone, Debug)]
pub struct SynthChip {
    pub pair: ChipPair,
    pub footprints_t1: Vec<Rect>,
    pub footprints_t2: Vec<Rect>,
}

/// Change mask as the symmetric difference of the two footprint unions.
pub fn xor_mask(size: usize, a: &[Rect], b: &[Rect]) -> Tensor {
    let covered = |rs: &[Rect], x, y| rs.iter().any(|r| r.contains(x, y));
    Tensor::from_fn(&[size, size], |i| {
        let (y, x) = (i / size, i % size);
        (covered(a, x, y) != covered(b, x, y)) as u8 as f64
    })
}

struct Painted {
    rect: Rect,
    colour: Vec<f64>,
    stripe: usize,
}

fn random_object(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> Painted {
    let n = cfg.size as f64;
    let mut side = || ((rng.gen_range(cfg.side.0..=cfg.side.1) * n).round() as usize).clamp(2, cfg.size);
    let (w, h) = (side(), side());
    let x = rng.gen_range(0..=cfg.size - w);
    let y = rng.gen_range(0..=cfg.size - h);
    Painted {
        rect: Rect::new(x, y, w, h),
        colour: (0..cfg.channels).map(|_| rng.gen_range(0.55..0.95)).collect(),
        stripe: rng.gen_range(2..5),
    }
}

fn paint(img: &mut Tensor, objects: &[&Painted], size: usize) {
    let plane = size * size;
    for o in objects {
        for (c, &base) in o.colour.iter().enumerate() {
            for y in o.rect.y..o.rect.y + o.rect.h {
                for x in o.rect.x..o.rect.x + o.rect.w {
                    let shade = if (x + y) / o.stripe % 2 == 0 { 0.0 } else { -0.12 };
                    img.data_mut()[c * plane + y * size + x] = base + shade;
                }
            }
        }
    }
}

fn background(rng: &mut ChaCha8Rng, cfg: &SynthConfig, tint: &[f64]) -> Tensor {
    let n = cfg.size;
    Tensor::from_fn(&[cfg.channels, n, n], |i| {
        let (y, x) = ((i / n) % n, i % n);
        let ripple = 0.03 * ((x as f64 * 0.7).sin() + (y as f64 * 0.45).cos());
        tint[i / (n * n)] + ripple + rng.gen_range(-cfg.noise..=cfg.noise)
    })
}

/// Generates chip `index` of the stream seeded by `seed`; chips are independent
/// of how many others are drawn.
pub fn synth_chip(cfg: &SynthConfig, seed: u64, index: u64) -> Result<SynthChip> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let tint: Vec<f64> = (0..cfg.channels).map(|_| rng.gen_range(0.15..0.35)).collect();
    let n_stable = rng.gen_range(cfg.stable.0..=cfg.stable.1);
    let n_changed = rng.gen_range(cfg.changed.0..=cfg.changed.1);
    let stable: Vec<Painted> = (0..n_stable).map(|_| random_object(&mut rng, cfg)).collect();
    let changed: Vec<(Painted, bool)> = (0..n_changed)
        .map(|_| (random_object(&mut rng, cfg), rng.gen_bool(0.5)))
        .collect();

    let mut dates = Vec::with_capacity(2);
    let mut footprints = Vec::with_capacity(2);
    for in_first in [true, false] {
        // stable buildings go on top so covered pixels match across dates
        let objects: Vec<&Painted> = changed
            .iter()
            .filter(|(_, first)| *first == in_first)
            .map(|(p, _)| p)
            .chain(stable.iter())
            .collect();
        let mut img = background(&mut rng, cfg, &tint);
        paint(&mut img, &objects, cfg.size);
        dates.push(img.map(|v| v.clamp(0.0, 1.0)));
        footprints.push(objects.iter().map(|o| o.rect).collect::<Vec<_>>());
    }
    let (f2, f1) = (footprints.pop().unwrap(), footprints.pop().unwrap());
    let mask = xor_mask(cfg.size, &f1, &f2);
    let t2 = dates.pop().unwrap();
    let t1 = dates.pop().unwrap();
    Ok(SynthChip {
        pair: ChipPair::from_mask(t1, t2, mask)?,
        footprints_t1: f1,
        footprints_t2: f2,
    })
}

/// `n` chips of side `f` from one seed.
pub fn synth_dataset(n: usize, f: usize, seed: u64) -> Result<Vec<ChipPair>> {
    let cfg = SynthConfig::with_size(f);
    (0..n as u64).map(|i| synth_chip(&cfg, seed, i).map(|c| c.pair)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_index_addressed() {
        let a = synth_dataset(3, 32, 7).unwrap();
        let b = synth_dataset(3, 32, 7).unwrap();
        assert_eq!(a, b);
        let lone = synth_chip(&SynthConfig::with_size(32), 7, 2).unwrap();
        assert_eq!(lone.pair, a[2]);
        assert_ne!(a[0], synth_dataset(1, 32, 8).unwrap()[0]);
    }

    #[test]
    fn values_in_unit_range() {
        for c in synth_dataset(4, 32, 1).unwrap() {
            for t in [&c.t1, &c.t2, &c.mask, &c.distance, &c.boundary] {
                assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn no_changed_buildings_means_empty_mask() {
        let cfg = SynthConfig {
            changed: (0, 0),
            ..SynthConfig::with_size(24)
        };
        let c = synth_chip(&cfg, 5, 0).unwrap();
        assert_eq!(c.footprints_t1, c.footprints_t2);
        assert_eq!(c.pair.mask.sum(), 0.0);
    }

    #[test]
    fn xor_of_overlapping_rects() {
        let m = xor_mask(4, &[Rect::new(0, 0, 2, 2)], &[Rect::new(1, 1, 2, 2)]);
        assert_eq!(m.sum(), 6.0);
        assert_eq!(m.data()[5], 0.0);
    }
}
