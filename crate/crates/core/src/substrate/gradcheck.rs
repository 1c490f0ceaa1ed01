//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure, Error, Result};
use crate::substrate::autograd::{backward, Var};
use crate::substrate::param::{ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub tol: f64,
    /// Denominator floor of the relative error, for coordinates whose gradient is ~0.
    pub abs_floor: f64,
    /// Check at most this many randomly chosen coordinates of each parameter.
    pub max_coords_per_param: Option<usize>,
    /// Restrict the check to these parameters (all trainable ones when `None`).
    pub only: Option<Vec<ParamId>>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-4,
            abs_floor: 1e-6,
            max_coords_per_param: None,
            only: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CoordError {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<CoordError>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_error <= self.tol
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} coords, max rel err {:.3e} (tol {:.1e})",
            self.checked, self.max_rel_error, self.tol
        )?;
        if let Some(w) = &self.worst {
            write!(
                f,
                ", worst {}[{}]: analytic {:.6e} numeric {:.6e}",
                w.param, w.index, w.analytic, w.numeric
            )?;
        }
        Ok(())
    }
}

fn eval_scalar(f: &impl Fn(&ParamStore) -> Result<Var>, store: &ParamStore) -> Result<f64> {
    let v = f(store)?;
    ensure!(
        v.value().numel() == 1,
        Error::shape("finite_diff_check", "objective must be scalar")
    );
    Ok(v.value().item())
}

/// Compares `backward` against `(f(θ+ε) − f(θ−ε)) / 2ε` coordinate by coordinate.
pub fn finite_diff_check(
    store: &mut ParamStore,
    f: impl Fn(&ParamStore) -> Result<Var>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    ensure!(
        cfg.eps > 0.0,
        Error::InvalidArgument("finite-difference step must be positive".into())
    );
    let root = f(store)?;
    let grads = backward(&root)?;
    drop(root);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ids: Vec<ParamId> = match &cfg.only {
        Some(ids) => ids.clone(),
        None => store.ids().filter(|&id| store.get(id).trainable).collect(),
    };
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
        tol: cfg.tol,
    };
    for id in ids {
        let n = store.get(id).value.numel();
        let coords: Vec<usize> = match cfg.max_coords_per_param {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for i in coords {
            let analytic = grads.param(id).map_or(0.0, |g| g.data()[i]);
            let orig = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + cfg.eps;
            let plus = eval_scalar(&f, store);
            store.get_mut(id).value.data_mut()[i] = orig - cfg.eps;
            let minus = eval_scalar(&f, store);
            store.get_mut(id).value.data_mut()[i] = orig;
            let (plus, minus) = (plus?, minus?);
            ensure!(
                plus.is_finite() && minus.is_finite(),
                Error::NonFinite(format!(
                    "objective at perturbed {}[{i}]",
                    store.get(id).name
                ))
            );
            let numeric = (plus - minus) / (2.0 * cfg.eps);
            let denom = analytic.abs().max(numeric.abs()).max(cfg.abs_floor);
            let rel = (analytic - numeric).abs() / denom;
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some(CoordError {
                    param: store.get(id).name.clone(),
                    index: i,
                    analytic,
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    Ok(report)
}
