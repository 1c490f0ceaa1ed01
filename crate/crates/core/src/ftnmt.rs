//! Fractal Tanimoto similarity family and the loss built on it.
//!
//! The closed form is evaluated as
//! `(Σpl + ε) / (2^d · Σ(p−l)² + Σpl + ε)`, which equals
//! `Σpl / (2^d(Σp² + Σl²) − (2^{d+1}−1)Σpl)` up to the smoothing terms and keeps
//! every value inside `[0, 1]` in floating point.

use std::collections::HashMap;

use crate::error::{ensure, Error, Result};
use crate::substrate::autograd::{is_tracing, no_grad, Var};
use crate::substrate::tensor::Tensor;

pub const DEFAULT_SMOOTH: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct FtConfig {
    /// Fractal depth; fractional values are accepted except by [`ftnmt_avg`].
    pub depth: f64,
    pub axes: Vec<usize>,
    pub smooth: f64,
}

impl FtConfig {
    pub fn new(depth: impl Into<f64>, axes: &[usize]) -> Self {
        Self {
            depth: depth.into(),
            axes: axes.to_vec(),
            smooth: DEFAULT_SMOOTH,
        }
    }

    /// Reduction over channel and spatial axes of a `[B,C,H,W]` tensor.
    pub fn per_sample(depth: impl Into<f64>) -> Self {
        Self::new(depth, &[1, 2, 3])
    }

    pub fn with_smooth(mut self, smooth: f64) -> Self {
        self.smooth = smooth;
        self
    }

    fn validate(&self, rank: usize) -> Result<()> {
        ensure!(
            self.depth >= 0.0 && self.depth.is_finite(),
            Error::InvalidArgument(format!("depth must be >= 0, got {}", self.depth))
        );
        ensure!(
            self.smooth >= 0.0,
            Error::InvalidArgument("smoothing must be non-negative".into())
        );
        ensure!(
            !self.axes.is_empty() && self.axes.iter().all(|&a| a < rank),
            Error::InvalidArgument(format!(
                "reduction axes {:?} invalid for rank {rank}",
                self.axes
            ))
        );
        Ok(())
    }

    fn integer_depth(&self) -> Result<u32> {
        ensure!(
            self.depth.fract() == 0.0 && self.depth <= u32::MAX as f64,
            Error::InvalidArgument(format!(
                "averaged form needs an integer depth, got {}",
                self.depth
            ))
        );
        Ok(self.depth as u32)
    }
}

/// Reduced sums shared by every depth: `Σpl`, `Σ(1−p)(1−l)` and `Σ(p−l)²`.
struct PairSums {
    pl: Var,
    comp_pl: Option<Var>,
    sq: Var,
}

fn check_inputs(p: &Var, l: &Var, cfg: &FtConfig) -> Result<()> {
    ensure!(
        p.shape() == l.shape(),
        Error::shape(
            "fractal tanimoto",
            format!("{:?} vs {:?}", p.shape(), l.shape())
        )
    );
    cfg.validate(p.shape().len())?;
    if cfg!(debug_assertions) && !is_tracing() {
        let inside = |t: &Tensor| t.data().iter().all(|v| (0.0..=1.0).contains(v));
        ensure!(
            inside(p.value()) && inside(l.value()),
            Error::InvalidArgument("fractal tanimoto inputs must lie in [0, 1]".into())
        );
    }
    Ok(())
}

impl PairSums {
    fn new(p: &Var, l: &Var, axes: &[usize], with_complement: bool) -> Result<Self> {
        let pl = p.mul(l)?.sum_axes(axes)?;
        let diff = p.sub(l)?;
        let sq = diff.mul(&diff)?.sum_axes(axes)?;
        let comp_pl = if with_complement {
            Some(p.complement().mul(&l.complement())?.sum_axes(axes)?)
        } else {
            None
        };
        Ok(Self { pl, comp_pl, sq })
    }

    fn tanimoto(dot: &Var, sq: &Var, depth: f64, smooth: f64) -> Result<Var> {
        let num = dot.add_scalar(smooth);
        let den = sq.scale(depth.exp2()).add(&num)?;
        num.div(&den)
    }

    fn plain(&self, depth: f64, smooth: f64) -> Result<Var> {
        Self::tanimoto(&self.pl, &self.sq, depth, smooth)
    }

    fn complemented(&self, depth: f64, smooth: f64) -> Result<Var> {
        let comp = self.comp_pl.as_ref().expect("complement sums requested");
        let a = Self::tanimoto(&self.pl, &self.sq, depth, smooth)?;
        let b = Self::tanimoto(comp, &self.sq, depth, smooth)?;
        Ok(a.add(&b)?.scale(0.5))
    }

    fn averaged(&self, depth: u32, smooth: f64) -> Result<Var> {
        let terms = depth.max(1);
        let mut acc = self.complemented(0.0, smooth)?;
        for i in 1..terms {
            acc = acc.add(&self.complemented(i as f64, smooth)?)?;
        }
        Ok(acc.scale(1.0 / terms as f64))
    }
}

/// `T^d(p, l)` reduced over `cfg.axes` with kept dims.
pub fn tanimoto_d(p: &Var, l: &Var, cfg: &FtConfig) -> Result<Var> {
    check_inputs(p, l, cfg)?;
    PairSums::new(p, l, &cfg.axes, false)?.plain(cfg.depth, cfg.smooth)
}

/// `FT^d(p, l) = (T^d(p, l) + T^d(1−p, 1−l)) / 2`.
pub fn ftnmt_complement(p: &Var, l: &Var, cfg: &FtConfig) -> Result<Var> {
    check_inputs(p, l, cfg)?;
    PairSums::new(p, l, &cfg.axes, true)?.complemented(cfg.depth, cfg.smooth)
}

/// `⟨FT⟩^d`: mean of `FT^i` for `i = 0..d−1`; depth 0 gives `FT^0`.
pub fn ftnmt_avg(p: &Var, l: &Var, cfg: &FtConfig) -> Result<Var> {
    check_inputs(p, l, cfg)?;
    let depth = cfg.integer_depth()?;
    PairSums::new(p, l, &cfg.axes, true)?.averaged(depth, cfg.smooth)
}

/// `1 − ⟨FT⟩^d` reduced over every non-batch axis, then averaged over the batch.
pub fn ftnmt_loss(pred: &Var, target: &Var, depth: u32) -> Result<Var> {
    let rank = pred.shape().len();
    ensure!(
        rank >= 2,
        Error::shape("ftnmt_loss", "need a leading batch axis")
    );
    let axes: Vec<usize> = (1..rank).collect();
    let sim = ftnmt_avg(pred, target, &FtConfig::new(depth, &axes))?;
    Ok(sim.mean_all().complement())
}

/// Plain-tensor evaluations of the similarity family (no gradient tracking).
pub mod values {
    use super::*;

    fn run(
        f: fn(&Var, &Var, &FtConfig) -> Result<Var>,
        p: &Tensor,
        l: &Tensor,
        cfg: &FtConfig,
    ) -> Result<Tensor> {
        let _g = no_grad();
        Ok(f(&Var::constant(p.clone()), &Var::constant(l.clone()), cfg)?.to_tensor())
    }

    pub fn tanimoto_d(p: &Tensor, l: &Tensor, cfg: &FtConfig) -> Result<Tensor> {
        run(super::tanimoto_d, p, l, cfg)
    }

    pub fn ftnmt_complement(p: &Tensor, l: &Tensor, cfg: &FtConfig) -> Result<Tensor> {
        run(super::ftnmt_complement, p, l, cfg)
    }

    pub fn ftnmt_avg(p: &Tensor, l: &Tensor, cfg: &FtConfig) -> Result<Tensor> {
        run(super::ftnmt_avg, p, l, cfg)
    }

    pub fn ftnmt_loss(pred: &Tensor, target: &Tensor, depth: u32) -> Result<f64> {
        let _g = no_grad();
        let v = super::ftnmt_loss(
            &Var::constant(pred.clone()),
            &Var::constant(target.clone()),
            depth,
        )?;
        Ok(v.value().item())
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
enum Pair {
    PL,
    PP,
    LL,
}

/// Literal evaluation of `T^d = T^{d−1}(p,l) / (T^{d−1}(p,p) + T^{d−1}(l,l) − T^{d−1}(p,l))`
/// over whole vectors, without smoothing.
pub fn tanimoto_recursive_oracle(p: &[f64], l: &[f64], depth: u32) -> Result<f64> {
    ensure!(
        p.len() == l.len() && !p.is_empty(),
        Error::shape("tanimoto_recursive_oracle", "operands must be equal, non-empty")
    );
    ensure!(
        depth <= 12,
        Error::InvalidArgument("recursion depth capped at 12".into())
    );
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let (pl, pp, ll) = (dot(p, l), dot(p, p), dot(l, l));
    let mut memo = HashMap::new();
    let v = recurse(depth, Pair::PL, (pl, pp, ll), &mut memo);
    ensure!(
        v.is_finite(),
        Error::NonFinite(format!("recursion degenerated at depth {depth}"))
    );
    Ok(v)
}

fn recurse(d: u32, pair: Pair, dots: (f64, f64, f64), memo: &mut HashMap<(u32, Pair), f64>) -> f64 {
    if let Some(&v) = memo.get(&(d, pair)) {
        return v;
    }
    let (pl, pp, ll) = dots;
    let (xy, xx, yy, xpair, ypair) = match pair {
        Pair::PL => (pl, pp, ll, Pair::PP, Pair::LL),
        Pair::PP => (pp, pp, pp, Pair::PP, Pair::PP),
        Pair::LL => (ll, ll, ll, Pair::LL, Pair::LL),
    };
    let v = if d == 0 {
        xy / (xx + yy - xy)
    } else {
        let t = recurse(d - 1, pair, dots, memo);
        let tx = recurse(d - 1, xpair, dots, memo);
        let ty = recurse(d - 1, ypair, dots, memo);
        t / (tx + ty - t)
    };
    memo.insert((d, pair), v);
    v
}

#[cfg(test)]
mod tests {
    use super::values;
    use super::*;

    fn vec2(a: f64, b: f64) -> Tensor {
        Tensor::new(vec![2], vec![a, b]).unwrap()
    }

    fn cfg(d: f64) -> FtConfig {
        FtConfig::new(d, &[0])
    }

    #[test]
    fn hand_substituted_values() {
        let (p, l) = (vec2(1.0, 0.0), vec2(1.0, 1.0));
        let exact = cfg(0.0).with_smooth(0.0);
        assert!((values::tanimoto_d(&p, &l, &exact).unwrap().item() - 0.5).abs() < 1e-15);
        let d1 = FtConfig::new(1.0, &[0]).with_smooth(0.0);
        assert!((values::tanimoto_d(&p, &l, &d1).unwrap().item() - 1.0 / 3.0).abs() < 1e-15);
        assert!((values::ftnmt_complement(&p, &l, &exact).unwrap().item() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn self_similarity_is_one() {
        let p = vec2(0.3, 0.9);
        for d in 0..6 {
            assert_eq!(values::tanimoto_d(&p, &p, &cfg(d as f64)).unwrap().item(), 1.0);
            assert_eq!(values::ftnmt_avg(&p, &p, &cfg(d as f64)).unwrap().item(), 1.0);
        }
    }

    #[test]
    fn disjoint_supports_vanish() {
        let v = values::tanimoto_d(&vec2(1.0, 0.0), &vec2(0.0, 1.0), &cfg(2.0)).unwrap();
        assert!(v.item() < 1e-5);
        let total = values::ftnmt_complement(&vec2(1.0, 0.0), &vec2(0.0, 1.0), &cfg(0.0)).unwrap();
        assert!(total.item() < 1e-5);
    }

    #[test]
    fn averaged_depth_zero_and_one_revert_to_first_term() {
        let (p, l) = (vec2(0.2, 0.7), vec2(0.6, 0.1));
        let first = values::ftnmt_complement(&p, &l, &cfg(0.0)).unwrap().item();
        assert_eq!(values::ftnmt_avg(&p, &l, &cfg(0.0)).unwrap().item(), first);
        assert_eq!(values::ftnmt_avg(&p, &l, &cfg(1.0)).unwrap().item(), first);
    }

    #[test]
    fn averaged_form_rejects_fractional_depth() {
        let p = vec2(0.2, 0.7);
        assert!(values::ftnmt_avg(&p, &p, &cfg(2.5)).is_err());
        assert!(values::tanimoto_d(&p, &p, &cfg(2.5)).is_ok());
    }

    #[test]
    fn oracle_matches_closed_form() {
        let (p, l) = ([0.3, 0.7], [0.5, 0.5]);
        let closed = values::tanimoto_d(
            &vec2(p[0], p[1]),
            &vec2(l[0], l[1]),
            &FtConfig::new(2.0, &[0]).with_smooth(0.0),
        )
        .unwrap()
        .item();
        assert!((tanimoto_recursive_oracle(&p, &l, 2).unwrap() - closed).abs() < 1e-12);
    }

    #[test]
    fn oracle_flags_degenerate_input() {
        assert!(matches!(
            tanimoto_recursive_oracle(&[0.0, 0.0], &[0.0, 0.0], 1),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn loss_extremes() {
        let t = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(values::ftnmt_loss(&t, &t, 5).unwrap().abs() < 1e-15);
        let inv = t.map(|v| 1.0 - v);
        assert!((values::ftnmt_loss(&inv, &t, 5).unwrap() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn rejects_out_of_range_and_bad_axes() {
        let p = vec2(1.5, 0.0);
        assert!(values::tanimoto_d(&p, &vec2(0.0, 0.0), &cfg(0.0)).is_err());
        assert!(values::tanimoto_d(&vec2(0.1, 0.2), &vec2(0.0, 0.0), &FtConfig::new(0, &[1])).is_err());
    }
}
