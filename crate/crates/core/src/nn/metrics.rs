use super::loss::argmax_rows;
use super::stack::{stack_forward, LayerStack};
use super::train::prepare;
use crate::error::{Error, Result};
use crate::pointcloud::{Dataset, PointCloud, Task};
use crate::scalar::Scalar;
use crate::spatial::NeighborTable;

/// Accuracy and intersection-over-union per class.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub accuracy: f64,
    /// `TP / (TP + FP + FN)` per class; `None` for classes absent from both
    /// predictions and ground truth.
    pub per_class_iou: Vec<Option<f64>>,
    /// Mean of the reported per-class IoUs.
    pub miou: f64,
    /// Number of scored items (points or clouds).
    pub count: usize,
}

pub fn metrics_from_predictions(pred: &[usize], truth: &[usize], num_classes: usize) -> Result<MetricsReport> {
    if pred.len() != truth.len() {
        return Err(Error::shape(format!(
            "{} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::arg("no predictions to score"));
    }
    if let Some(&bad) = pred.iter().chain(truth).find(|&&c| c >= num_classes) {
        return Err(Error::arg(format!("class {bad} outside [0, {num_classes})")));
    }
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fn_ = vec![0usize; num_classes];
    let mut correct = 0usize;
    for (&p, &t) in pred.iter().zip(truth) {
        if p == t {
            tp[p] += 1;
            correct += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    let per_class_iou: Vec<Option<f64>> = (0..num_classes)
        .map(|c| {
            let denom = tp[c] + fp[c] + fn_[c];
            (denom > 0).then(|| tp[c] as f64 / denom as f64)
        })
        .collect();
    let present: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
    Ok(MetricsReport {
        accuracy: correct as f64 / pred.len() as f64,
        miou: present.iter().sum::<f64>() / present.len() as f64,
        per_class_iou,
        count: pred.len(),
    })
}

/// Predicted class per point (segmentation) or a single class (classification).
pub fn predict<S: Scalar>(stack: &LayerStack<S>, cloud: &PointCloud<S>, neighbors: &NeighborTable<S>) -> Result<Vec<usize>> {
    Ok(argmax_rows(&stack_forward(stack, cloud, neighbors)?))
}

/// Scores the stack on every cloud, building neighbor tables with the stack's
/// own neighborhood parameters.
pub fn evaluate<S: Scalar>(stack: &LayerStack<S>, dataset: &Dataset<S>) -> Result<MetricsReport> {
    let tables = prepare(dataset, stack.neighborhood())?;
    evaluate_prepared(stack, dataset, &tables)
}

pub fn evaluate_prepared<S: Scalar>(
    stack: &LayerStack<S>,
    dataset: &Dataset<S>,
    tables: &[NeighborTable<S>],
) -> Result<MetricsReport> {
    if dataset.is_empty() {
        return Err(Error::arg("cannot evaluate on an empty dataset"));
    }
    if stack.task() != dataset.task {
        return Err(Error::arg(format!(
            "stack is a {} model but the dataset is labelled for {}",
            stack.task().as_str(),
            dataset.task.as_str()
        )));
    }
    if stack.out_dim() != dataset.num_classes {
        return Err(Error::shape(format!(
            "stack emits {} classes, dataset has {}",
            stack.out_dim(),
            dataset.num_classes
        )));
    }
    let mut pred = Vec::new();
    let mut truth = Vec::new();
    for (i, (cloud, nb)) in dataset.clouds.iter().zip(tables).enumerate() {
        let p = predict(stack, cloud, nb)?;
        match dataset.task {
            Task::Segmentation => {
                pred.extend(p);
                truth.extend_from_slice(cloud.labels().expect("dataset clouds are labelled"));
            }
            Task::Classification => {
                pred.push(p[0]);
                truth.push(dataset.cloud_label(i));
            }
        }
    }
    metrics_from_predictions(&pred, &truth, dataset.num_classes)
}
