use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::pointcloud::PointCloud;
use crate::rng::{normal, SeededRng};
use crate::scalar::{Scalar, Vec3};
use crate::spatial::NeighborTable;

/// Fully connected layer `y = x W + b` with `W` stored `in×out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense<S> {
    pub weight: Matrix<S>,
    pub bias: Vec<S>,
}

impl<S: Scalar> Dense<S> {
    pub fn new(weight: Matrix<S>, bias: Vec<S>) -> Result<Self> {
        if bias.len() != weight.cols() {
            return Err(Error::shape(format!(
                "dense bias of length {} for {} outputs",
                bias.len(),
                weight.cols()
            )));
        }
        if !weight.is_finite() || !bias.iter().all(|b| b.is_finite()) {
            return Err(Error::NonFinite("dense layer weight".into()));
        }
        Ok(Self { weight, bias })
    }

    pub fn random(inp: usize, out: usize, std: f64, rng: &mut SeededRng) -> Self {
        let w = (0..inp * out).map(|_| normal::<S>(rng, std)).collect();
        Self {
            weight: Matrix::from_vec(inp, out, w).expect("dense shape"),
            bias: vec![S::zero(); out],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    #[inline]
    fn apply(&self, x: &[S], y: &mut Vec<S>) {
        y.clear();
        y.extend_from_slice(&self.bias);
        for (k, &xk) in x.iter().enumerate() {
            for (yj, &w) in y.iter_mut().zip(self.weight.row(k)) {
                *yj += xk * w;
            }
        }
    }
}

/// MLP from a 3D offset to one spatial weight per input channel. Hidden
/// layers use a rectifier, the output layer is linear.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpFilter<S> {
    layers: Vec<Dense<S>>,
}

/// Default hidden sizes.
pub const DEFAULT_HIDDEN: [usize; 2] = [8, 8];

impl<S: Scalar> MlpFilter<S> {
    pub fn new(layers: Vec<Dense<S>>) -> Result<Self> {
        let first = layers.first().ok_or_else(|| Error::arg("MLP needs at least one layer"))?;
        if first.in_dim() != 3 {
            return Err(Error::shape(format!("MLP input must be 3, got {}", first.in_dim())));
        }
        for w in layers.windows(2) {
            if w[0].out_dim() != w[1].in_dim() {
                return Err(Error::shape(format!(
                    "MLP layer widths {} and {} do not chain",
                    w[0].out_dim(),
                    w[1].in_dim()
                )));
            }
        }
        Ok(Self { layers })
    }

    /// He-initialized hidden layers; the output layer is scaled by `out_std`.
    pub fn random(hidden: &[usize], out_dim: usize, out_std: f64, rng: &mut SeededRng) -> Result<Self> {
        let mut layers = Vec::new();
        let mut inp = 3;
        for &h in hidden {
            layers.push(Dense::random(inp, h, (2.0 / inp as f64).sqrt(), rng));
            inp = h;
        }
        layers.push(Dense::random(inp, out_dim, out_std, rng));
        Self::new(layers)
    }

    pub fn layers(&self) -> &[Dense<S>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense<S>] {
        &mut self.layers
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, Dense::out_dim)
    }

    /// Evaluates the MLP at offset `z`.
    pub fn eval(&self, z: &Vec3<S>) -> Vec<S> {
        let mut x = z.to_vec();
        let mut y = Vec::new();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            l.apply(&x, &mut y);
            if i < last {
                y.iter_mut().for_each(|v| *v = v.max(S::zero()));
            }
            std::mem::swap(&mut x, &mut y);
        }
        x
    }

    /// Forward pass keeping every layer's output (post-activation).
    fn eval_trace(&self, z: &Vec3<S>, trace: &mut Vec<Vec<S>>) {
        trace.resize_with(self.layers.len() + 1, Vec::new);
        trace[0].clear();
        trace[0].extend_from_slice(z);
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let (head, tail) = trace.split_at_mut(i + 1);
            l.apply(&head[i], &mut tail[0]);
            if i < last {
                tail[0].iter_mut().for_each(|v| *v = v.max(S::zero()));
            }
        }
    }

    /// Accumulates parameter gradients for output gradient `gout`, given a trace.
    fn accumulate_grads(&self, trace: &[Vec<S>], gout: &[S], grads: &mut [Vec<S>], scratch: &mut (Vec<S>, Vec<S>)) {
        let (g, gprev) = scratch;
        g.clear();
        g.extend_from_slice(gout);
        for i in (0..self.layers.len()).rev() {
            let l = &self.layers[i];
            let x = &trace[i];
            let (wgrad, rest) = grads[2 * i..].split_at_mut(1);
            let wgrad = &mut wgrad[0];
            let bgrad = &mut rest[0];
            for (b, &gv) in bgrad.iter_mut().zip(g.iter()) {
                *b += gv;
            }
            let out = l.out_dim();
            for (k, &xk) in x.iter().enumerate() {
                if xk == S::zero() {
                    continue;
                }
                for (wg, &gv) in wgrad[k * out..(k + 1) * out].iter_mut().zip(g.iter()) {
                    *wg += xk * gv;
                }
            }
            if i == 0 {
                break;
            }
            gprev.clear();
            for (k, &xk) in x.iter().enumerate() {
                // x is the post-rectifier output of layer i-1
                let s = if xk > S::zero() {
                    l.weight.row(k).iter().zip(g.iter()).fold(S::zero(), |s, (&w, &gv)| s + w * gv)
                } else {
                    S::zero()
                };
                gprev.push(s);
            }
            std::mem::swap(g, gprev);
        }
    }

    fn zero_grads(&self) -> Vec<Vec<S>> {
        self.layers
            .iter()
            .flat_map(|l| [vec![S::zero(); l.weight.as_slice().len()], vec![S::zero(); l.bias.len()]])
            .collect()
    }
}

/// Separable convolution whose spatial weights are predicted by an MLP:
/// `h(y) = pointwise^T sum_x w_mlp(y - x) ⊙ f(x) + bias`.
#[derive(Clone, Debug, PartialEq)]
pub struct PccLayer<S> {
    pub mlp: MlpFilter<S>,
    pub pointwise: Matrix<S>,
    pub bias: Option<Vec<S>>,
}

/// Gradients through [`PccLayer`]. `mlp` alternates weight and bias per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct PccGrads<S> {
    pub features: Matrix<S>,
    pub mlp: Vec<Vec<S>>,
    pub pointwise: Matrix<S>,
    pub bias: Vec<S>,
}

impl<S: Scalar> PccLayer<S> {
    pub fn new(mlp: MlpFilter<S>, pointwise: Matrix<S>, bias: Option<Vec<S>>) -> Result<Self> {
        if mlp.out_dim() != pointwise.rows() {
            return Err(Error::shape(format!(
                "MLP emits {} weights but pointwise map takes {} channels",
                mlp.out_dim(),
                pointwise.rows()
            )));
        }
        if let Some(b) = &bias {
            if b.len() != pointwise.cols() {
                return Err(Error::shape("PCC bias length".to_string()));
            }
        }
        Ok(Self { mlp, pointwise, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.pointwise.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.pointwise.cols()
    }

    fn check(&self, features: &Matrix<S>, neighbors: &NeighborTable<S>) -> Result<()> {
        if features.cols() != self.in_dim() {
            return Err(Error::shape(format!(
                "features have {} channels, PCC layer expects {}",
                features.cols(),
                self.in_dim()
            )));
        }
        if features.rows() < neighbors.min_source_len() {
            return Err(Error::shape("neighbor table references missing points".to_string()));
        }
        Ok(())
    }

    /// The spatial stage `m(y) = sum_x w_mlp(y - x) ⊙ f(x)`, `Q×D'`.
    pub fn spatial(&self, features: &Matrix<S>, neighbors: &NeighborTable<S>) -> Result<Matrix<S>> {
        self.check(features, neighbors)?;
        let din = self.in_dim();
        let mut m = Matrix::zeros(neighbors.num_queries(), din);
        m.as_mut_slice().par_chunks_mut(din).enumerate().for_each(|(q, row)| {
            for (&x, z) in neighbors.indices(q).iter().zip(neighbors.offsets(q)) {
                let w = self.mlp.eval(z);
                for ((r, &wc), &fc) in row.iter_mut().zip(&w).zip(features.row(x as usize)) {
                    *r += wc * fc;
                }
            }
        });
        Ok(m)
    }

    pub fn forward_features(&self, features: &Matrix<S>, neighbors: &NeighborTable<S>) -> Result<Matrix<S>> {
        let mut h = self.spatial(features, neighbors)?.matmul(&self.pointwise)?;
        if let Some(b) = &self.bias {
            for q in 0..h.rows() {
                for (v, &bv) in h.row_mut(q).iter_mut().zip(b) {
                    *v += bv;
                }
            }
        }
        Ok(h)
    }

    /// Serial backward pass in ascending centroid, then stored neighbor order.
    pub fn backward_features(
        &self,
        features: &Matrix<S>,
        neighbors: &NeighborTable<S>,
        upstream: &Matrix<S>,
    ) -> Result<PccGrads<S>> {
        self.check(features, neighbors)?;
        if upstream.rows() != neighbors.num_queries() || upstream.cols() != self.out_dim() {
            return Err(Error::shape("PCC upstream gradient shape".to_string()));
        }
        let m = self.spatial(features, neighbors)?;
        let pointwise = m.transpose().matmul(upstream)?;
        let gm = upstream.matmul(&self.pointwise.transpose())?;
        let mut bias = vec![S::zero(); self.out_dim()];
        for row in upstream.iter_rows() {
            for (b, &u) in bias.iter_mut().zip(row) {
                *b += u;
            }
        }
        let mut mlp = self.mlp.zero_grads();
        let mut gf = Matrix::zeros(features.rows(), self.in_dim());
        let mut trace = Vec::new();
        let mut scratch = (Vec::new(), Vec::new());
        let mut gout = Vec::with_capacity(self.in_dim());
        for q in 0..neighbors.num_queries() {
            let g = gm.row(q);
            for (&x, z) in neighbors.indices(q).iter().zip(neighbors.offsets(q)) {
                self.mlp.eval_trace(z, &mut trace);
                let w = trace.last().expect("mlp output");
                let f = features.row(x as usize);
                gout.clear();
                gout.extend(g.iter().zip(f).map(|(&gc, &fc)| gc * fc));
                for ((o, &gc), &wc) in gf.row_mut(x as usize).iter_mut().zip(g).zip(w) {
                    *o += gc * wc;
                }
                self.mlp.accumulate_grads(&trace, &gout, &mut mlp, &mut scratch);
            }
        }
        Ok(PccGrads {
            features: gf,
            mlp,
            pointwise,
            bias,
        })
    }
}

/// `pointwise^T sum_x w_mlp(y - x) ⊙ f(x)` over the cloud's features.
pub fn pcc_forward<S: Scalar>(
    cloud: &PointCloud<S>,
    neighbors: &NeighborTable<S>,
    filter: &MlpFilter<S>,
    pointwise: &Matrix<S>,
) -> Result<Matrix<S>> {
    pcc_forward_features(cloud.features(), neighbors, filter, pointwise)
}

pub fn pcc_forward_features<S: Scalar>(
    features: &Matrix<S>,
    neighbors: &NeighborTable<S>,
    filter: &MlpFilter<S>,
    pointwise: &Matrix<S>,
) -> Result<Matrix<S>> {
    PccLayer::new(filter.clone(), pointwise.clone(), None)?.forward_features(features, neighbors)
}
