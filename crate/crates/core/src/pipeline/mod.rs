//! Data ingestion, chip extraction, target derivation, augmentation and the
//! synthetic dataset.

pub mod augment;
pub mod chips;
pub mod io;
pub mod synth;
pub mod targets;

use crate::error::{ensure, Error, Result};
use crate::substrate::tensor::Tensor;

pub use augment::{augment, AugmentConfig};
pub use chips::{extract_chips, split_train_val, Rect, Split};
pub use synth::{synth_dataset, SynthConfig};
pub use targets::{gen_boundary_gt, gen_distance_gt};

/// Co-registered image pair with its change mask and derived targets.
/// Images are `[C,H,W]` in `[0,1]`; masks and targets are `[H,W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChipPair {
    pub t1: Tensor,
    pub t2: Tensor,
    pub mask: Tensor,
    pub distance: Tensor,
    pub boundary: Tensor,
}

impl ChipPair {
    /// Builds the pair and derives distance and boundary targets from `mask`.
    pub fn from_mask(t1: Tensor, t2: Tensor, mask: Tensor) -> Result<Self> {
        let distance = gen_distance_gt(&mask);
        let boundary = gen_boundary_gt(&mask, 1);
        let chip = Self {
            t1,
            t2,
            mask,
            distance,
            boundary,
        };
        chip.validate()?;
        Ok(chip)
    }

    pub fn channels(&self) -> usize {
        self.t1.shape()[0]
    }

    pub fn size(&self) -> (usize, usize) {
        (self.mask.shape()[0], self.mask.shape()[1])
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Error::Data(format!("chip pair: {m}"));
        ensure!(self.t1.rank() == 3, bad("images must be C×H×W"));
        ensure!(self.t1.shape() == self.t2.shape(), bad("dates differ in shape"));
        ensure!(self.mask.rank() == 2, bad("mask must be H×W"));
        ensure!(self.t1.shape()[1..] == *self.mask.shape(), bad("image and mask sizes differ"));
        ensure!(
            self.distance.shape() == self.mask.shape() && self.boundary.shape() == self.mask.shape(),
            bad("target sizes differ")
        );
        Ok(())
    }
}

/// Chips stacked along a leading batch axis, in the layouts the network and loss use.
#[derive(Clone, Debug)]
pub struct Batch {
    pub img1: Tensor,
    pub img2: Tensor,
    /// Binary change mask `[B,1,H,W]`.
    pub mask: Tensor,
    /// One-hot `[no change, change]` segmentation target `[B,2,H,W]`.
    pub segmentation: Tensor,
    pub boundary: Tensor,
    pub distance: Tensor,
}

fn stack(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| Error::Data("empty batch".into()))?;
    let mut shape = vec![parts.len()];
    if first.rank() == 2 {
        shape.push(1);
    }
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(parts.len() * first.numel());
    for p in parts {
        ensure!(
            p.shape() == first.shape(),
            Error::Data(format!("batch members differ: {:?} vs {:?}", p.shape(), first.shape()))
        );
        data.extend_from_slice(p.data());
    }
    Tensor::new(shape, data)
}

impl Batch {
    pub fn from_chips(chips: &[&ChipPair]) -> Result<Self> {
        let pick = |f: fn(&ChipPair) -> &Tensor| stack(&chips.iter().map(|c| f(c)).collect::<Vec<_>>());
        let mask = pick(|c| &c.mask)?;
        let (b, h, w) = (mask.shape()[0], mask.shape()[2], mask.shape()[3]);
        let plane = h * w;
        let mut seg = vec![0.0; b * 2 * plane];
        for (i, m) in mask.data().chunks(plane).enumerate() {
            for (j, &v) in m.iter().enumerate() {
                seg[(2 * i) * plane + j] = 1.0 - v;
                seg[(2 * i + 1) * plane + j] = v;
            }
        }
        Ok(Self {
            img1: pick(|c| &c.t1)?,
            img2: pick(|c| &c.t2)?,
            segmentation: Tensor::new(vec![b, 2, h, w], seg)?,
            boundary: pick(|c| &c.boundary)?,
            distance: pick(|c| &c.distance)?,
            mask,
        })
    }

    pub fn len(&self) -> usize {
        self.img1.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_layouts() {
        let mask = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let img = Tensor::zeros(&[3, 2, 2]);
        let c = ChipPair::from_mask(img.clone(), img, mask).unwrap();
        let b = Batch::from_chips(&[&c, &c]).unwrap();
        assert_eq!(b.img1.shape(), &[2, 3, 2, 2]);
        assert_eq!(b.mask.shape(), &[2, 1, 2, 2]);
        assert_eq!(b.segmentation.shape(), &[2, 2, 2, 2]);
        assert_eq!(&b.segmentation.data()[..8], &[0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn mismatched_chip_is_rejected() {
        let r = ChipPair::from_mask(Tensor::zeros(&[3, 4, 4]), Tensor::zeros(&[3, 4, 4]), Tensor::zeros(&[4, 5]));
        assert!(matches!(r, Err(Error::Data(_))));
    }
}
