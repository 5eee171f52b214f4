use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const DEFAULT_LR: f64 = 1e-4;
pub const DEFAULT_WEIGHT_DECAY: f64 = 5e-4;

/// Adam moments for a list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<S> {
    pub lr: S,
    pub weight_decay: S,
    pub beta1: S,
    pub beta2: S,
    pub eps: S,
    step: u64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> OptimizerState<S> {
    /// Zeroed moments for tensors of the given lengths, `betas = (0.9, 0.999)`,
    /// `eps = 1e-8`.
    pub fn new(shapes: &[usize], lr: S, weight_decay: S) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: S::lit(0.9),
            beta2: S::lit(0.999),
            eps: S::lit(1e-8),
            step: 0,
            m: shapes.iter().map(|&n| vec![S::zero(); n]).collect(),
            v: shapes.iter().map(|&n| vec![S::zero(); n]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Vec<S>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<S>] {
        &self.v
    }
}

/// One Adam update with bias correction. Weight decay is decoupled and applied
/// first: `p <- p * (1 - lr * wd)`.
pub fn adam_step<S: Scalar>(state: &mut OptimizerState<S>, params: &mut [&mut [S]], grads: &[Vec<S>]) -> Result<()> {
    if params.len() != state.m.len() || grads.len() != state.m.len() {
        return Err(Error::shape(format!(
            "optimizer tracks {} tensors, got {} parameters and {} gradients",
            state.m.len(),
            params.len(),
            grads.len()
        )));
    }
    for (i, ((p, g), m)) in params.iter().zip(grads).zip(&state.m).enumerate() {
        if p.len() != m.len() || g.len() != m.len() {
            return Err(Error::shape(format!(
                "tensor {i}: moment length {}, parameter {}, gradient {}",
                m.len(),
                p.len(),
                g.len()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.lr, state.eps);
    let bc1 = S::one() - b1.powi(t);
    let bc2 = S::one() - b2.powi(t);
    let decay = S::one() - lr * state.weight_decay;
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for (((pi, &gi), mi), vi) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *pi *= decay;
            *mi = b1 * *mi + (S::one() - b1) * gi;
            *vi = b2 * *vi + (S::one() - b2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *pi -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}
