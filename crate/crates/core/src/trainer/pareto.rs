//! Non-dominated selection over (MCC, ⟨FT⟩) pairs, both maximised.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub epoch: usize,
    /// Validation MCC in `[-1, 1]`.
    pub mcc: f64,
    /// Validation ⟨FT⟩ in `[0, 1]`.
    pub ftnmt: f64,
    pub path: Option<PathBuf>,
}

impl CheckpointRecord {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.mcc.is_finite() && (-1.0..=1.0).contains(&self.mcc),
            Error::NonFinite(format!("epoch {} MCC {} outside [-1, 1]", self.epoch, self.mcc))
        );
        ensure!(
            self.ftnmt.is_finite() && (0.0..=1.0).contains(&self.ftnmt),
            Error::NonFinite(format!("epoch {} ⟨FT⟩ {} outside [0, 1]", self.epoch, self.ftnmt))
        );
        Ok(())
    }
}

/// `a` dominates `b` when it is no worse in both coordinates and better in one.
pub fn dominates(a: (f64, f64), b: (f64, f64)) -> bool {
    a.0 >= b.0 && a.1 >= b.1 && (a.0 > b.0 || a.1 > b.1)
}

/// Indices of the non-dominated points, in input order. Duplicated points are
/// all kept since none dominates another.
pub fn pareto_indices(points: &[(f64, f64)]) -> Result<Vec<usize>> {
    ensure!(!points.is_empty(), Error::InvalidArgument("pareto front of no points".into()));
    ensure!(
        points.iter().all(|p| p.0.is_finite() && p.1.is_finite()),
        Error::NonFinite("pareto front needs finite coordinates".into())
    );
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&i, &j| points[j].0.total_cmp(&points[i].0));
    let mut keep = Vec::new();
    // best second coordinate among points with a strictly larger first coordinate
    let mut best = f64::NEG_INFINITY;
    let mut start = 0;
    while start < order.len() {
        let x = points[order[start]].0;
        let end = start + order[start..].iter().take_while(|&&i| points[i].0 == x).count();
        let group = &order[start..end];
        let top = group.iter().map(|&i| points[i].1).fold(f64::NEG_INFINITY, f64::max);
        if top > best {
            keep.extend(group.iter().copied().filter(|&i| points[i].1 == top));
            best = top;
        }
        start = end;
    }
    keep.sort_unstable();
    Ok(keep)
}

/// Records on the (MCC, ⟨FT⟩) Pareto front.
pub fn pareto_front(records: &[CheckpointRecord]) -> Result<Vec<CheckpointRecord>> {
    let points: Vec<(f64, f64)> = records.iter().map(|r| (r.mcc, r.ftnmt)).collect();
    Ok(pareto_indices(&points)?
        .into_iter()
        .map(|i| records[i].clone())
        .collect())
}
