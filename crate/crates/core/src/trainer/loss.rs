//! Equal-weight multitask loss over segmentation, boundary and distance.

use crate::error::{ensure, Error, Result};
use crate::ftnmt::ftnmt_loss;
use crate::mantis::MantisOutput;
use crate::pipeline::Batch;
use crate::substrate::autograd::Var;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Segmentation,
    Boundary,
    Distance,
}

pub const TASKS: [Task; 3] = [Task::Segmentation, Task::Boundary, Task::Distance];

/// Mean of the three `(prediction, target)` ftnmt losses at depth `depth`.
/// Every task must appear exactly once.
pub fn multitask_loss(pairs: &[(Task, &Var, &Var)], depth: u32) -> Result<Var> {
    for task in TASKS {
        let n = pairs.iter().filter(|(t, _, _)| *t == task).count();
        ensure!(
            n == 1,
            Error::InvalidArgument(format!("multitask loss needs exactly one {task:?} pair, got {n}"))
        );
    }
    let mut total: Option<Var> = None;
    for (_, pred, target) in pairs {
        let l = ftnmt_loss(pred, target, depth)?;
        total = Some(match total {
            Some(t) => t.add(&l)?,
            None => l,
        });
    }
    Ok(total.expect("three tasks").scale(1.0 / TASKS.len() as f64))
}

/// Multitask loss of a network output against a batch.
pub fn mantis_loss(out: &MantisOutput, batch: &Batch, depth: u32) -> Result<Var> {
    let seg = Var::constant(batch.segmentation.clone());
    let bnd = Var::constant(batch.boundary.clone());
    let dist = Var::constant(batch.distance.clone());
    multitask_loss(
        &[
            (Task::Segmentation, &out.segmentation, &seg),
            (Task::Boundary, &out.boundary, &bnd),
            (Task::Distance, &out.distance, &dist),
        ],
        depth,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ftnmt::values;
    use crate::substrate::param::init_rng;
    use crate::substrate::tensor::Tensor;

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        Tensor::rand_uniform(shape, 0.0, 1.0, &mut init_rng(seed))
    }

    #[test]
    fn mean_of_independent_losses() {
        let t: Vec<Tensor> = (0..6).map(|i| rand(&[2, 1, 4, 4], i)).collect();
        let v: Vec<Var> = t.iter().cloned().map(Var::constant).collect();
        let got = multitask_loss(
            &[
                (Task::Segmentation, &v[0], &v[1]),
                (Task::Boundary, &v[2], &v[3]),
                (Task::Distance, &v[4], &v[5]),
            ],
            3,
        )
        .unwrap()
        .value()
        .item();
        let want = (0..3)
            .map(|i| values::ftnmt_loss(&t[2 * i], &t[2 * i + 1], 3).unwrap())
            .sum::<f64>()
            / 3.0;
        assert!((got - want).abs() < 1e-14);
    }

    #[test]
    fn perfect_predictions_give_zero() {
        let a = Var::constant(rand(&[1, 2, 3, 3], 1));
        let l = multitask_loss(
            &[(Task::Segmentation, &a, &a), (Task::Boundary, &a, &a), (Task::Distance, &a, &a)],
            5,
        )
        .unwrap();
        assert!(l.value().item().abs() < 1e-12);
    }

    #[test]
    fn missing_task_is_an_error() {
        let a = Var::constant(rand(&[1, 1, 2, 2], 2));
        assert!(multitask_loss(&[(Task::Segmentation, &a, &a), (Task::Boundary, &a, &a)], 0).is_err());
    }
}
