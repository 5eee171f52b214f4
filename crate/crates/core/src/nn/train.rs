use super::adam::{adam_step, OptimizerState};
use super::loss::cross_entropy;
use super::metrics::evaluate_prepared;
use super::stack::{LayerStack, Neighborhood};
use crate::error::{Error, Result};
use crate::pointcloud::{Dataset, PointCloud, Task};
use crate::rng::{permutation, SeededRng};
use crate::scalar::Scalar;
use crate::spatial::{self_neighbors, NeighborTable};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean training loss over the epoch's batches.
    pub loss: f64,
    /// Held-out metrics after the epoch.
    pub accuracy: f64,
    pub miou: f64,
}

/// A dataset with its neighbor tables, computed once and shared by every layer.
pub struct Prepared<'a, S> {
    pub dataset: &'a Dataset<S>,
    pub tables: Vec<NeighborTable<S>>,
}

impl<'a, S: Scalar> Prepared<'a, S> {
    pub fn new(dataset: &'a Dataset<S>, neighborhood: Neighborhood<S>) -> Result<Self> {
        Ok(Self {
            dataset,
            tables: prepare(dataset, neighborhood)?,
        })
    }
}

pub fn prepare<S: Scalar>(dataset: &Dataset<S>, neighborhood: Neighborhood<S>) -> Result<Vec<NeighborTable<S>>> {
    dataset
        .clouds
        .iter()
        .map(|c| self_neighbors(c.positions(), neighborhood.radius, neighborhood.cap))
        .collect()
}

/// Cross-entropy of one cloud and the parameter gradients.
pub fn loss_and_grads<S: Scalar>(
    stack: &LayerStack<S>,
    cloud: &PointCloud<S>,
    neighbors: &NeighborTable<S>,
) -> Result<(S, Vec<Vec<S>>)> {
    let labels = cloud
        .labels()
        .ok_or_else(|| Error::InvalidCloud("training cloud has no labels".into()))?;
    let trace = stack.forward_trace(cloud.features(), neighbors)?;
    let targets: &[usize] = match stack.task() {
        Task::Segmentation => labels,
        Task::Classification => &labels[..1],
    };
    let (loss, grad) = cross_entropy(trace.output(), targets)?;
    let grads = stack.backward(&trace, neighbors, &grad)?;
    Ok((loss, grads))
}

/// One pass over `data` in a shuffled order; gradients are averaged over each
/// batch before the optimizer step. Returns the mean batch loss.
pub fn train_epoch<S: Scalar>(
    stack: &mut LayerStack<S>,
    opt: &mut OptimizerState<S>,
    data: &Prepared<'_, S>,
    batch_size: usize,
    rng: &mut SeededRng,
) -> Result<f64> {
    if batch_size == 0 {
        return Err(Error::arg("batch size must be at least 1"));
    }
    let order = permutation(rng, data.dataset.len());
    let mut total = 0.0;
    let mut batches = 0usize;
    for batch in order.chunks(batch_size) {
        let mut sum: Option<Vec<Vec<S>>> = None;
        let mut loss = S::zero();
        for &i in batch {
            let (l, g) = loss_and_grads(stack, &data.dataset.clouds[i], &data.tables[i])?;
            loss += l;
            match sum.as_mut() {
                None => sum = Some(g),
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        a.iter_mut().zip(b).for_each(|(x, &y)| *x += y);
                    }
                }
            }
        }
        let inv = S::one() / S::lit(batch.len() as f64);
        let mut grads = sum.expect("non-empty batch");
        grads.iter_mut().flatten().for_each(|g| *g *= inv);
        adam_step(opt, &mut stack.params_mut(), &grads)?;
        total += (loss * inv).as_f64();
        batches += 1;
    }
    Ok(if batches > 0 { total / batches as f64 } else { 0.0 })
}

/// Trains for `cfg.epochs` epochs, evaluating on `test` after each one.
/// `on_epoch` sees each log row as it is produced.
pub fn train<S: Scalar>(
    stack: &mut LayerStack<S>,
    train_set: &Prepared<'_, S>,
    test_set: &Prepared<'_, S>,
    cfg: &TrainConfig,
    rng: &mut SeededRng,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<(OptimizerState<S>, Vec<EpochLog>)> {
    if train_set.dataset.task != stack.task() {
        return Err(Error::arg(format!(
            "stack is a {} model but the training data is labelled for {}",
            stack.task().as_str(),
            train_set.dataset.task.as_str()
        )));
    }
    let mut opt = OptimizerState::new(&stack.param_shapes(), S::lit(cfg.lr), S::lit(cfg.weight_decay));
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let loss = train_epoch(stack, &mut opt, train_set, cfg.batch_size, rng)?;
        let m = evaluate_prepared(stack, test_set.dataset, &test_set.tables)?;
        let row = EpochLog {
            epoch,
            loss,
            accuracy: m.accuracy,
            miou: m.miou,
        };
        on_epoch(&row);
        logs.push(row);
    }
    Ok((opt, logs))
}
