//! Point cloud containers, text I/O and synthetic datasets.

mod io;
mod synth;

pub use io::{load_xyz, parse_xyz, save_xyz, write_xyz};
pub use synth::{synth_dataset, SynthKind};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::{all_finite3, Scalar, Vec3};

/// Learning task a dataset is labelled for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Task {
    Classification,
    Segmentation,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Classification => "classification",
            Task::Segmentation => "segmentation",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classification" => Ok(Task::Classification),
            "segmentation" => Ok(Task::Segmentation),
            other => Err(Error::arg(format!("unknown task `{other}`"))),
        }
    }
}

/// Positions (meters), per-point features and optional per-point labels.
///
/// Construction validates that the cloud is non-empty, that positions and
/// features agree on the point count and that every value is finite.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud<S> {
    positions: Vec<Vec3<S>>,
    features: Matrix<S>,
    labels: Option<Vec<usize>>,
}

impl<S: Scalar> PointCloud<S> {
    pub fn new(positions: Vec<Vec3<S>>, features: Matrix<S>, labels: Option<Vec<usize>>) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::InvalidCloud("a cloud needs at least one point".into()));
        }
        if features.rows() != positions.len() {
            return Err(Error::InvalidCloud(format!(
                "{} positions but {} feature rows",
                positions.len(),
                features.rows()
            )));
        }
        if let Some(i) = positions.iter().position(|p| !all_finite3(p)) {
            return Err(Error::NonFinite(format!("position of point {i}")));
        }
        if !features.is_finite() {
            return Err(Error::NonFinite("feature value".into()));
        }
        if let Some(l) = &labels {
            if l.len() != positions.len() {
                return Err(Error::InvalidCloud(format!(
                    "{} labels for {} points",
                    l.len(),
                    positions.len()
                )));
            }
        }
        Ok(Self {
            positions,
            features,
            labels,
        })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    /// Always false for a constructed cloud.
    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn positions(&self) -> &[Vec3<S>] {
        &self.positions
    }

    pub fn features(&self) -> &Matrix<S> {
        &self.features
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn with_features(&self, features: Matrix<S>) -> Result<Self> {
        Self::new(self.positions.clone(), features, self.labels.clone())
    }

    pub fn translated(&self, delta: Vec3<S>) -> Self {
        Self {
            positions: self
                .positions
                .iter()
                .map(|p| [p[0] + delta[0], p[1] + delta[1], p[2] + delta[2]])
                .collect(),
            features: self.features.clone(),
            labels: self.labels.clone(),
        }
    }

    /// Reorders points so that new point `i` is old point `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        if order.len() != self.len() {
            return Err(Error::shape(format!(
                "permutation of length {} for {} points",
                order.len(),
                self.len()
            )));
        }
        let d = self.feature_dim();
        let mut feats = Vec::with_capacity(self.len() * d);
        for &o in order {
            feats.extend_from_slice(self.features.row(o));
        }
        Self::new(
            order.iter().map(|&o| self.positions[o]).collect(),
            Matrix::from_vec(self.len(), d, feats)?,
            self.labels.as_ref().map(|l| order.iter().map(|&o| l[o]).collect()),
        )
    }
}

/// A labelled collection of clouds.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<S> {
    pub clouds: Vec<PointCloud<S>>,
    pub num_classes: usize,
    pub task: Task,
}

impl<S: Scalar> Dataset<S> {
    pub fn new(clouds: Vec<PointCloud<S>>, num_classes: usize, task: Task) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::arg("num_classes must be positive"));
        }
        for (ci, c) in clouds.iter().enumerate() {
            let labels = c
                .labels()
                .ok_or_else(|| Error::InvalidCloud(format!("cloud {ci} has no labels")))?;
            if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
                return Err(Error::InvalidCloud(format!(
                    "cloud {ci} has label {bad} outside [0, {num_classes})"
                )));
            }
            if task == Task::Classification && labels.iter().any(|&l| l != labels[0]) {
                return Err(Error::InvalidCloud(format!(
                    "classification cloud {ci} has non-uniform labels"
                )));
            }
        }
        Ok(Self {
            clouds,
            num_classes,
            task,
        })
    }

    pub fn len(&self) -> usize {
        self.clouds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clouds.is_empty()
    }

    /// Cloud-level label: the (uniform) label of the first point.
    pub fn cloud_label(&self, i: usize) -> usize {
        self.clouds[i].labels().map_or(0, |l| l[0])
    }

    /// Splits into `(first n, rest)`.
    pub fn split_at(self, n: usize) -> (Self, Self) {
        let mut head = self.clouds;
        let tail = head.split_off(n.min(head.len()));
        (
            Self {
                clouds: head,
                num_classes: self.num_classes,
                task: self.task,
            },
            Self {
                clouds: tail,
                num_classes: self.num_classes,
                task: self.task,
            },
        )
    }
}
