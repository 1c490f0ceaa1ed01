//! Dense row-major `f64` tensors.
//!
//! A [`Tensor`] is a plain value: cloning copies the buffer, and it is `Send + Sync`,
//! so it can be handed between threads freely. Image features use the `B×C×H×W`
//! layout throughout the crate.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{ensure, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        ensure!(
            !shape.is_empty() && shape.iter().all(|&d| d > 0),
            Error::shape("Tensor::new", format!("dimensions must be positive, got {shape:?}"))
        );
        ensure!(
            numel == data.len(),
            Error::shape(
                "Tensor::new",
                format!("shape {shape:?} needs {numel} values, got {}", data.len())
            )
        );
        Ok(Self { shape, data })
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    /// A one-element tensor of shape `[1]`; broadcasts against anything.
    pub fn scalar(value: f64) -> Self {
        Self::full(&[1], value)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
        }
    }

    pub fn rand_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        Self::from_fn(shape, |_| rng.gen_range(lo..hi))
    }

    pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        Self::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        })
    }

    /// Shape-only placeholder used while tracing; holds no data.
    pub fn phantom(shape: Vec<usize>) -> Self {
        Self {
            shape,
            data: Vec::new(),
        }
    }

    pub fn is_phantom(&self) -> bool {
        self.data.is_empty()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match *self.shape.as_slice() {
            [b, c, h, w] => Ok((b, c, h, w)),
            _ => Err(Error::shape(
                "dims4",
                format!("expected a B×C×H×W tensor, got {:?}", self.shape),
            )),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        ensure!(
            numel == self.numel() && !shape.is_empty(),
            Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape))
        );
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise binary op with numpy broadcasting.
    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape == other.shape {
            return Ok(Self {
                shape: self.shape.clone(),
                data: self
                    .data
                    .iter()
                    .zip(&other.data)
                    .map(|(&a, &b)| f(a, b))
                    .collect(),
            });
        }
        let out_shape = broadcast_shape(&self.shape, &other.shape).ok_or_else(|| {
            Error::shape(
                "broadcast",
                format!("{:?} vs {:?}", self.shape, other.shape),
            )
        })?;
        let sa = broadcast_strides(&self.shape, &out_shape);
        let sb = broadcast_strides(&other.shape, &out_shape);
        let mut data = vec![0.0; out_shape.iter().product()];
        for_each_broadcast(&out_shape, &sa, &sb, |o, ia, ib| {
            data[o] = f(self.data[ia], other.data[ib]);
        });
        Ok(Self {
            shape: out_shape,
            data,
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_in_place(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Sums a broadcast result back down to `shape` (the adjoint of broadcasting).
    pub fn sum_to_shape(&self, shape: &[usize]) -> Result<Self> {
        if self.shape == shape {
            return Ok(self.clone());
        }
        ensure!(
            broadcast_shape(shape, &self.shape).as_deref() == Some(&self.shape[..]),
            Error::shape("sum_to_shape", format!("{:?} -> {shape:?}", self.shape))
        );
        let st = broadcast_strides(shape, &self.shape);
        let zero = vec![0; self.shape.len()];
        let mut out = Tensor::zeros(shape);
        for_each_broadcast(&self.shape, &st, &zero, |o, it, _| {
            out.data[it] += self.data[o];
        });
        Ok(out)
    }

    /// Sums over `axes`, keeping them as singleton dimensions.
    pub fn sum_axes(&self, axes: &[usize]) -> Result<Self> {
        let shape = reduced_shape(&self.shape, axes)?;
        self.sum_to_shape(&shape)
    }

    /// Value at a `B×C×H×W` index.
    pub fn at4(&self, b: usize, c: usize, y: usize, x: usize) -> f64 {
        let (_, cc, h, w) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        self.data[((b * cc + c) * h + y) * w + x]
    }
}

/// Shape with every axis in `axes` set to 1.
pub(crate) fn reduced_shape(shape: &[usize], axes: &[usize]) -> Result<Vec<usize>> {
    ensure!(
        !axes.is_empty(),
        Error::InvalidArgument("reduction needs at least one axis".into())
    );
    let mut out = shape.to_vec();
    for &a in axes {
        ensure!(
            a < shape.len(),
            Error::InvalidArgument(format!("axis {a} out of range for rank {}", shape.len()))
        );
        out[a] = 1;
    }
    Ok(out)
}

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `src` laid against `out` (right-aligned), zero on broadcast axes.
pub(crate) fn broadcast_strides(src: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..src.len()).rev() {
        let o = i + rank - src.len();
        strides[o] = if src[i] == 1 { 0 } else { acc };
        acc *= src[i];
    }
    strides
}

/// Visits every output index together with the matching offsets into two operands.
pub(crate) fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = out.len();
    let inner = out[rank - 1];
    let (ia, ib) = (sa[rank - 1], sb[rank - 1]);
    let outer: usize = out[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank.saturating_sub(1)];
    let (mut oa, mut ob, mut o) = (0usize, 0usize, 0usize);
    for _ in 0..outer {
        for j in 0..inner {
            f(o, oa + j * ia, ob + j * ib);
            o += 1;
        }
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            oa -= sa[ax] * out[ax];
            ob -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_channel_and_pixel_maps() {
        let x = Tensor::from_fn(&[2, 3, 4, 5], |i| i as f64);
        let chan = Tensor::from_fn(&[2, 3, 1, 1], |i| i as f64 + 1.0);
        let pix = Tensor::from_fn(&[2, 1, 4, 5], |i| i as f64 * 0.5);
        let a = x.zip_map(&chan, |p, q| p * q).unwrap();
        let b = x.zip_map(&pix, |p, q| p * q).unwrap();
        assert_eq!(a.shape(), &[2, 3, 4, 5]);
        assert_eq!(b.shape(), &[2, 3, 4, 5]);
        for bi in 0..2 {
            for c in 0..3 {
                for y in 0..4 {
                    for xx in 0..5 {
                        let v = x.at4(bi, c, y, xx);
                        assert_eq!(a.at4(bi, c, y, xx), v * chan.at4(bi, c, 0, 0));
                        assert_eq!(b.at4(bi, c, y, xx), v * pix.at4(bi, 0, y, xx));
                    }
                }
            }
        }
    }

    #[test]
    fn scalar_broadcasts_against_rank4() {
        let x = Tensor::ones(&[1, 2, 2, 2]);
        let y = x.zip_map(&Tensor::scalar(3.0), |a, b| a + b).unwrap();
        assert!(y.data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn incompatible_broadcast_errors() {
        let a = Tensor::zeros(&[1, 3, 4, 4]);
        let b = Tensor::zeros(&[1, 2, 4, 4]);
        assert!(a.zip_map(&b, |x, y| x + y).is_err());
    }

    #[test]
    fn sum_to_shape_is_broadcast_adjoint() {
        let g = Tensor::from_fn(&[2, 3, 4], |i| (i % 7) as f64);
        let s = g.sum_to_shape(&[2, 1, 4]).unwrap();
        for b in 0..2 {
            for w in 0..4 {
                let want: f64 = (0..3).map(|c| g.data()[(b * 3 + c) * 4 + w]).sum();
                assert_eq!(s.data()[b * 4 + w], want);
            }
        }
        assert_eq!(g.sum_to_shape(&[1]).unwrap().item(), g.sum());
    }

    #[test]
    fn rejects_bad_element_count() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
    }
}
