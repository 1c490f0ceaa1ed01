//! Window origins for chip extraction and the geometric train/validation split.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::substrate::tensor::Tensor;

/// Side fraction of the training rectangle (≈ 0.47 of the area).
pub const TRAIN_SIDE_FRACTION: f64 = 0.6838;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub fn new(x: usize, y: usize, w: usize, h: usize) -> Self {
        Self { x, y, w, h }
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x && x < self.x + self.w && y >= self.y && y < self.y + self.h
    }
}

/// Per-axis window origins `0, s, 2s, …` with `floor((dim − F)/s) + 1` entries.
pub fn axis_origins(dim: usize, f: usize, stride: usize) -> Result<Vec<usize>> {
    ensure!(stride >= 1, Error::InvalidArgument("stride must be at least 1".into()));
    ensure!(
        f >= 1 && f <= dim,
        Error::InvalidArgument(format!("window {f} does not fit extent {dim}"))
    );
    Ok((0..=(dim - f) / stride).map(|i| i * stride).collect())
}

/// Top-left corners `(x, y)` of every `F×F` window inside a tile, row-major.
pub fn extract_chips(tile_w: usize, tile_h: usize, f: usize, stride: usize) -> Result<Vec<(usize, usize)>> {
    let xs = axis_origins(tile_w, f, stride)?;
    let ys = axis_origins(tile_h, f, stride)?;
    Ok(ys
        .iter()
        .flat_map(|&y| xs.iter().map(move |&x| (x, y)))
        .collect())
}

/// Windows of a sub-rectangle, in tile coordinates. Empty when the rectangle is
/// smaller than the window.
pub fn chips_in(rect: Rect, f: usize, stride: usize) -> Result<Vec<(usize, usize)>> {
    if rect.w < f || rect.h < f {
        return Ok(Vec::new());
    }
    Ok(extract_chips(rect.w, rect.h, f, stride)?
        .into_iter()
        .map(|(x, y)| (x + rect.x, y + rect.y))
        .collect())
}

/// Copies the `w×h` window at `(x, y)` out of the trailing two axes of a
/// `[H,W]` or `[C,H,W]` tensor.
pub fn crop(t: &Tensor, x: usize, y: usize, w: usize, h: usize) -> Result<Tensor> {
    let s = t.shape();
    ensure!(
        (2..=3).contains(&s.len()),
        Error::shape("crop", format!("expected [H,W] or [C,H,W], got {s:?}"))
    );
    let (th, tw) = (s[s.len() - 2], s[s.len() - 1]);
    ensure!(
        x + w <= tw && y + h <= th,
        Error::shape("crop", format!("window {w}×{h} at ({x},{y}) exceeds {tw}×{th}"))
    );
    let planes = t.numel() / (th * tw);
    let mut data = Vec::with_capacity(planes * w * h);
    for plane in t.data().chunks(th * tw) {
        for row in y..y + h {
            data.extend_from_slice(&plane[row * tw + x..row * tw + x + w]);
        }
    }
    let mut shape = s[..s.len() - 2].to_vec();
    shape.extend([h, w]);
    Tensor::new(shape, data)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Rect,
    /// The L-shaped complement as a right strip and a bottom strip.
    pub val: Vec<Rect>,
}

impl Split {
    pub fn train_fraction(&self, tile_w: usize, tile_h: usize) -> f64 {
        self.train.area() as f64 / (tile_w * tile_h) as f64
    }
}

/// Training rectangle `floor(0.6838·w) × floor(0.6838·h)` anchored at the origin;
/// validation is the rest of the tile.
pub fn split_train_val(tile_w: usize, tile_h: usize, f: usize) -> Result<Split> {
    let tw = (TRAIN_SIDE_FRACTION * tile_w as f64).floor() as usize;
    let th = (TRAIN_SIDE_FRACTION * tile_h as f64).floor() as usize;
    ensure!(
        tw >= f && th >= f,
        Error::InvalidArgument(format!(
            "training rectangle {tw}×{th} is smaller than the {f}-pixel window"
        ))
    );
    let mut val = Vec::new();
    if tw < tile_w {
        val.push(Rect::new(tw, 0, tile_w - tw, tile_h));
    }
    if th < tile_h {
        val.push(Rect::new(0, th, tw, tile_h - th));
    }
    Ok(Split {
        train: Rect::new(0, 0, tw, th),
        val,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_counts() {
        assert_eq!(extract_chips(256, 256, 256, 128).unwrap().len(), 1);
        assert_eq!(extract_chips(1024, 1024, 256, 128).unwrap().len(), 49);
        assert_eq!(extract_chips(512, 512, 256, 64).unwrap().len(), 25);
        assert_eq!(extract_chips(300, 200, 100, 50).unwrap().len(), 5 * 3);
        assert!(extract_chips(100, 300, 128, 64).is_err());
        assert!(extract_chips(300, 300, 128, 0).is_err());
    }

    #[test]
    fn crop_window() {
        let t = Tensor::from_fn(&[2, 3, 4], |i| i as f64);
        let c = crop(&t, 1, 1, 2, 2).unwrap();
        assert_eq!(c.shape(), &[2, 2, 2]);
        assert_eq!(c.data(), &[5.0, 6.0, 9.0, 10.0, 17.0, 18.0, 21.0, 22.0]);
        assert!(crop(&t, 3, 0, 2, 2).is_err());
    }

    #[test]
    fn split_thousand_square() {
        let s = split_train_val(1000, 1000, 256).unwrap();
        assert_eq!(s.train, Rect::new(0, 0, 683, 683));
        assert!((s.train_fraction(1000, 1000) - 0.4665).abs() < 1e-4);
        let total: usize = s.train.area() + s.val.iter().map(Rect::area).sum::<usize>();
        assert_eq!(total, 1_000_000);
    }

    #[test]
    fn split_feasibility_edge() {
        let side = (256.0 / TRAIN_SIDE_FRACTION).ceil() as usize;
        assert!(split_train_val(side, side, 256).unwrap().train.w >= 256);
        assert!(split_train_val(side - 2, side - 2, 256).is_err());
    }
}
