use crate::baselines::{Dense, MlpFilter, PccLayer};
use crate::deform::{
    backward_features, backward_separable, forward_features, forward_separable_features, AnchorGrid,
    DeformableFilter, SeparableFilter,
};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::pointcloud::{PointCloud, Task};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::spatial::NeighborTable;

/// Pointwise affine map `x W + b`.
pub type Linear<S> = Dense<S>;

/// Neighborhood query parameters shared by every convolution of a stack.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighborhood<S> {
    pub radius: S,
    pub cap: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer<S> {
    Deform(DeformableFilter<S>),
    Separable(SeparableFilter<S>),
    Pcc(PccLayer<S>),
    Linear(Linear<S>),
    Relu,
    /// Appends the channels of activation `from` (0 is the stack input,
    /// `i` the input of layer `i`) to the current activation.
    Concat { from: usize },
    /// Column-wise max over points; turns a per-point stack into a
    /// classification head.
    GlobalMaxPool,
}

impl<S: Scalar> Layer<S> {
    pub fn name(&self) -> &'static str {
        match self {
            Layer::Deform(_) => "deform",
            Layer::Separable(_) => "separable",
            Layer::Pcc(_) => "pcc",
            Layer::Linear(_) => "linear",
            Layer::Relu => "relu",
            Layer::Concat { .. } => "concat",
            Layer::GlobalMaxPool => "maxpool",
        }
    }

    fn params(&self) -> Vec<&[S]> {
        match self {
            Layer::Deform(f) => std::iter::once(f.weights()).chain(f.bias()).collect(),
            Layer::Separable(f) => [f.spatial(), f.pointwise().as_slice()].into_iter().chain(f.bias()).collect(),
            Layer::Pcc(p) => p
                .mlp
                .layers()
                .iter()
                .flat_map(|l| [l.weight.as_slice(), &l.bias[..]])
                .chain(std::iter::once(p.pointwise.as_slice()))
                .chain(p.bias.as_deref())
                .collect(),
            Layer::Linear(l) => vec![l.weight.as_slice(), &l.bias],
            Layer::Relu | Layer::Concat { .. } | Layer::GlobalMaxPool => Vec::new(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut [S]> {
        match self {
            Layer::Deform(f) => {
                let (w, b) = f.params_mut();
                std::iter::once(w).chain(b).collect()
            }
            Layer::Separable(f) => {
                let (s, p, b) = f.params_mut();
                [s, p].into_iter().chain(b).collect()
            }
            Layer::Pcc(p) => {
                let mut v: Vec<&mut [S]> = Vec::new();
                for l in p.mlp.layers_mut() {
                    v.push(l.weight.as_mut_slice());
                    v.push(&mut l.bias);
                }
                v.push(p.pointwise.as_mut_slice());
                if let Some(b) = p.bias.as_deref_mut() {
                    v.push(b);
                }
                v
            }
            Layer::Linear(l) => vec![l.weight.as_mut_slice(), &mut l.bias],
            Layer::Relu | Layer::Concat { .. } | Layer::GlobalMaxPool => Vec::new(),
        }
    }
}

/// Ordered layers with validated channel widths.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerStack<S> {
    in_dim: usize,
    layers: Vec<Layer<S>>,
    dims: Vec<usize>,
    pooled: Vec<bool>,
    neighborhood: Neighborhood<S>,
}

/// Activations recorded by [`LayerStack::forward_trace`]; `acts[0]` is the input.
#[derive(Clone, Debug)]
pub struct Trace<S> {
    pub acts: Vec<Matrix<S>>,
}

impl<S: Scalar> Trace<S> {
    pub fn output(&self) -> &Matrix<S> {
        self.acts.last().expect("trace has an input")
    }
}

impl<S: Scalar> LayerStack<S> {
    pub fn new(in_dim: usize, layers: Vec<Layer<S>>, neighborhood: Neighborhood<S>) -> Result<Self> {
        if in_dim == 0 {
            return Err(Error::arg("stack input width must be positive"));
        }
        if !(neighborhood.radius > S::zero()) || neighborhood.cap == 0 {
            return Err(Error::arg("neighborhood radius and cap must be positive"));
        }
        let mut dims = vec![in_dim];
        let mut pooled = vec![false];
        for (i, layer) in layers.iter().enumerate() {
            let cur = dims[i];
            let is_pooled = pooled[i];
            let mismatch = |want: usize| {
                Error::shape(format!(
                    "layer {i} ({}) expects {want} input channels, previous layer gives {cur}",
                    layer.name()
                ))
            };
            let conv = |grid: &AnchorGrid<S>| -> Result<()> {
                if is_pooled {
                    return Err(Error::arg(format!("layer {i}: convolution after global pooling")));
                }
                if grid.support_radius() > neighborhood.radius {
                    return Err(Error::arg(format!(
                        "layer {i}: filter support {} exceeds neighborhood radius {}",
                        grid.support_radius(),
                        neighborhood.radius
                    )));
                }
                Ok(())
            };
            let (out, pool) = match layer {
                Layer::Deform(f) => {
                    conv(f.grid())?;
                    if f.in_dim() != cur {
                        return Err(mismatch(f.in_dim()));
                    }
                    (f.out_dim(), false)
                }
                Layer::Separable(f) => {
                    conv(f.grid())?;
                    if f.in_dim() != cur {
                        return Err(mismatch(f.in_dim()));
                    }
                    (f.out_dim(), false)
                }
                Layer::Pcc(p) => {
                    if is_pooled {
                        return Err(Error::arg(format!("layer {i}: convolution after global pooling")));
                    }
                    if p.in_dim() != cur {
                        return Err(mismatch(p.in_dim()));
                    }
                    (p.out_dim(), false)
                }
                Layer::Linear(l) => {
                    if l.in_dim() != cur {
                        return Err(mismatch(l.in_dim()));
                    }
                    (l.out_dim(), is_pooled)
                }
                Layer::Relu => (cur, is_pooled),
                Layer::Concat { from } => {
                    if *from > i {
                        return Err(Error::arg(format!("layer {i}: concat from future activation {from}")));
                    }
                    if pooled[*from] != is_pooled {
                        return Err(Error::arg(format!(
                            "layer {i}: concat mixes pooled and per-point activations"
                        )));
                    }
                    (cur + dims[*from], is_pooled)
                }
                Layer::GlobalMaxPool => {
                    if is_pooled {
                        return Err(Error::arg(format!("layer {i}: second global pooling")));
                    }
                    (cur, true)
                }
            };
            dims.push(out);
            pooled.push(pool);
        }
        Ok(Self {
            in_dim,
            layers,
            dims,
            pooled,
            neighborhood,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        *self.dims.last().expect("dims has input")
    }

    pub fn layers(&self) -> &[Layer<S>] {
        &self.layers
    }

    /// Width of activation `i` (0 = input).
    pub fn activation_dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn neighborhood(&self) -> Neighborhood<S> {
        self.neighborhood
    }

    pub fn task(&self) -> Task {
        if *self.pooled.last().expect("pooled has input") {
            Task::Classification
        } else {
            Task::Segmentation
        }
    }

    pub fn params(&self) -> Vec<&[S]> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut [S]> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    pub fn param_shapes(&self) -> Vec<usize> {
        self.params().iter().map(|p| p.len()).collect()
    }

    pub fn num_params(&self) -> usize {
        self.param_shapes().iter().sum()
    }

    pub fn forward_trace(&self, features: &Matrix<S>, neighbors: &NeighborTable<S>) -> Result<Trace<S>> {
        if features.cols() != self.in_dim {
            return Err(Error::shape(format!(
                "stack expects {} input channels, cloud has {}",
                self.in_dim,
                features.cols()
            )));
        }
        let has_conv = self
            .layers
            .iter()
            .any(|l| matches!(l, Layer::Deform(_) | Layer::Separable(_) | Layer::Pcc(_)));
        if has_conv && neighbors.num_queries() != features.rows() {
            return Err(Error::shape(format!(
                "neighbor table has {} queries for {} points",
                neighbors.num_queries(),
                features.rows()
            )));
        }
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(features.clone());
        for layer in &self.layers {
            let x = acts.last().expect("input pushed");
            let y = match layer {
                Layer::Deform(f) => forward_features(x, neighbors, f)?,
                Layer::Separable(f) => forward_separable_features(x, neighbors, f)?,
                Layer::Pcc(p) => p.forward_features(x, neighbors)?,
                Layer::Linear(l) => {
                    let mut y = x.matmul(&l.weight)?;
                    for r in 0..y.rows() {
                        for (v, &b) in y.row_mut(r).iter_mut().zip(&l.bias) {
                            *v += b;
                        }
                    }
                    y
                }
                Layer::Relu => x.map(|v| v.max(S::zero())),
                Layer::Concat { from } => x.hcat(&acts[*from])?,
                Layer::GlobalMaxPool => {
                    let mut y = Matrix::zeros(1, x.cols());
                    for c in 0..x.cols() {
                        y[(0, c)] = (0..x.rows()).fold(S::neg_infinity(), |m, r| m.max(x[(r, c)]));
                    }
                    y
                }
            };
            acts.push(y);
        }
        Ok(Trace { acts })
    }

    /// Parameter gradients (in [`Self::params`] order) of a loss whose
    /// gradient with respect to the stack output is `grad_out`.
    pub fn backward(&self, trace: &Trace<S>, neighbors: &NeighborTable<S>, grad_out: &Matrix<S>) -> Result<Vec<Vec<S>>> {
        let n = self.layers.len();
        if trace.acts.len() != n + 1 {
            return Err(Error::shape("trace does not belong to this stack".to_string()));
        }
        let out = trace.output();
        if grad_out.rows() != out.rows() || grad_out.cols() != out.cols() {
            return Err(Error::shape(format!(
                "output gradient is {}x{}, output is {}x{}",
                grad_out.rows(),
                grad_out.cols(),
                out.rows(),
                out.cols()
            )));
        }
        let mut grads: Vec<Option<Matrix<S>>> = vec![None; n + 1];
        grads[n] = Some(grad_out.clone());
        let mut per_layer: Vec<Vec<Vec<S>>> = vec![Vec::new(); n];

        fn add<S: Scalar>(slot: &mut Option<Matrix<S>>, g: Matrix<S>) {
            match slot {
                Some(acc) => acc
                    .as_mut_slice()
                    .iter_mut()
                    .zip(g.as_slice())
                    .for_each(|(a, &b)| *a += b),
                None => *slot = Some(g),
            }
        }

        for i in (0..n).rev() {
            let x = &trace.acts[i];
            let Some(g) = grads[i + 1].take() else {
                per_layer[i] = self.layers[i].params().iter().map(|p| vec![S::zero(); p.len()]).collect();
                continue;
            };
            match &self.layers[i] {
                Layer::Deform(f) => {
                    let r = backward_features(x, neighbors, f, &g)?;
                    per_layer[i].push(r.weights);
                    if f.bias().is_some() {
                        per_layer[i].push(r.bias);
                    }
                    add(&mut grads[i], r.features);
                }
                Layer::Separable(f) => {
                    let r = backward_separable(x, neighbors, f, &g)?;
                    per_layer[i].push(r.spatial);
                    per_layer[i].push(r.pointwise.into_vec());
                    if f.bias().is_some() {
                        per_layer[i].push(r.bias);
                    }
                    add(&mut grads[i], r.features);
                }
                Layer::Pcc(p) => {
                    let r = p.backward_features(x, neighbors, &g)?;
                    per_layer[i].extend(r.mlp);
                    per_layer[i].push(r.pointwise.into_vec());
                    if p.bias.is_some() {
                        per_layer[i].push(r.bias);
                    }
                    add(&mut grads[i], r.features);
                }
                Layer::Linear(l) => {
                    per_layer[i].push(x.transpose().matmul(&g)?.into_vec());
                    let mut gb = vec![S::zero(); l.out_dim()];
                    for row in g.iter_rows() {
                        gb.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
                    }
                    per_layer[i].push(gb);
                    add(&mut grads[i], g.matmul(&l.weight.transpose())?);
                }
                Layer::Relu => {
                    let mut gx = g;
                    gx.as_mut_slice()
                        .iter_mut()
                        .zip(x.as_slice())
                        .for_each(|(gv, &xv)| {
                            if xv <= S::zero() {
                                *gv = S::zero();
                            }
                        });
                    add(&mut grads[i], gx);
                }
                Layer::Concat { from } => {
                    let (w0, w1) = (x.cols(), trace.acts[*from].cols());
                    let mut g0 = Matrix::zeros(g.rows(), w0);
                    let mut g1 = Matrix::zeros(g.rows(), w1);
                    for r in 0..g.rows() {
                        g0.row_mut(r).copy_from_slice(&g.row(r)[..w0]);
                        g1.row_mut(r).copy_from_slice(&g.row(r)[w0..]);
                    }
                    add(&mut grads[i], g0);
                    add(&mut grads[*from], g1);
                }
                Layer::GlobalMaxPool => {
                    let mut gx = Matrix::zeros(x.rows(), x.cols());
                    for c in 0..x.cols() {
                        let mut best = 0;
                        for r in 1..x.rows() {
                            if x[(r, c)] > x[(best, c)] {
                                best = r;
                            }
                        }
                        gx[(best, c)] = g[(0, c)];
                    }
                    add(&mut grads[i], gx);
                }
            }
        }
        Ok(per_layer.into_iter().flatten().collect())
    }
}

/// Logits for a cloud: `M×C` per-point for segmentation stacks, `1×C` after
/// a global max-pool.
pub fn stack_forward<S: Scalar>(
    stack: &LayerStack<S>,
    cloud: &PointCloud<S>,
    neighbors: &NeighborTable<S>,
) -> Result<Matrix<S>> {
    Ok(stack
        .forward_trace(cloud.features(), neighbors)?
        .acts
        .pop()
        .expect("non-empty trace"))
}

#[derive(Clone, Debug)]
enum LayerSpec<S> {
    Deform { out: usize, grid: AnchorGrid<S> },
    Separable { out: usize, grid: AnchorGrid<S> },
    Pcc { out: usize, hidden: Vec<usize> },
    Linear { out: usize },
    Relu,
    Concat { from: usize },
    MaxPool,
}

/// Declarative stack construction with seeded initialization.
#[derive(Clone, Debug)]
pub struct StackBuilder<S> {
    in_dim: usize,
    neighborhood: Neighborhood<S>,
    specs: Vec<LayerSpec<S>>,
}

impl<S: Scalar> StackBuilder<S> {
    pub fn new(in_dim: usize, neighborhood: Neighborhood<S>) -> Self {
        Self {
            in_dim,
            neighborhood,
            specs: Vec::new(),
        }
    }

    pub fn deform(mut self, out: usize, grid: AnchorGrid<S>) -> Self {
        self.specs.push(LayerSpec::Deform { out, grid });
        self
    }

    pub fn separable(mut self, out: usize, grid: AnchorGrid<S>) -> Self {
        self.specs.push(LayerSpec::Separable { out, grid });
        self
    }

    pub fn pcc(mut self, out: usize, hidden: &[usize]) -> Self {
        self.specs.push(LayerSpec::Pcc {
            out,
            hidden: hidden.to_vec(),
        });
        self
    }

    pub fn linear(mut self, out: usize) -> Self {
        self.specs.push(LayerSpec::Linear { out });
        self
    }

    pub fn relu(mut self) -> Self {
        self.specs.push(LayerSpec::Relu);
        self
    }

    pub fn concat(mut self, from: usize) -> Self {
        self.specs.push(LayerSpec::Concat { from });
        self
    }

    pub fn max_pool(mut self) -> Self {
        self.specs.push(LayerSpec::MaxPool);
        self
    }

    /// Initializes weights: He scaling for pointwise maps, and for spatial
    /// filters a scale that accounts for summing over up to `cap` neighbors.
    pub fn build(self, rng: &mut SeededRng) -> Result<LayerStack<S>> {
        let cap = self.neighborhood.cap as f64;
        let mut dims = vec![self.in_dim];
        let mut layers = Vec::with_capacity(self.specs.len());
        for spec in self.specs {
            let cur = *dims.last().expect("input dim");
            let (layer, out) = match spec {
                LayerSpec::Deform { out, grid } => {
                    let std = (2.0 / (cur as f64 * cap)).sqrt() * 2.0;
                    (Layer::Deform(DeformableFilter::random(grid, cur, out, true, std, rng)?), out)
                }
                LayerSpec::Separable { out, grid } => {
                    let f = SeparableFilter::random(grid, cur, out, true, 2.0 / cap.sqrt(), (2.0 / cur as f64).sqrt(), rng)?;
                    (Layer::Separable(f), out)
                }
                LayerSpec::Pcc { out, hidden } => {
                    let mlp = MlpFilter::random(&hidden, cur, 2.0 / cap.sqrt(), rng)?;
                    let pw = Dense::<S>::random(cur, out, (2.0 / cur as f64).sqrt(), rng).weight;
                    let p = PccLayer::new(mlp, pw, Some(vec![S::zero(); out]))?;
                    (Layer::Pcc(p), out)
                }
                LayerSpec::Linear { out } => (Layer::Linear(Dense::random(cur, out, (2.0 / cur as f64).sqrt(), rng)), out),
                LayerSpec::Relu => (Layer::Relu, cur),
                LayerSpec::Concat { from } => {
                    let w = *dims.get(from).ok_or_else(|| Error::arg(format!("concat from unknown activation {from}")))?;
                    (Layer::Concat { from }, cur + w)
                }
                LayerSpec::MaxPool => (Layer::GlobalMaxPool, cur),
            };
            layers.push(layer);
            dims.push(out);
        }
        LayerStack::new(self.in_dim, layers, self.neighborhood)
    }
}
