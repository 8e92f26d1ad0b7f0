//! Projection heads mapping encoder outputs into the shared joint
//! space: either the identity or a two-layer GELU MLP with hidden width
//! twice the input.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::encoder::LinearLayer;
use crate::embedding::Matrix;
use crate::error::{GlapError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ProjectionKind {
    Identity,
    Mlp,
}

const SQRT_2_OVER_PI: f64 = 0.7978845608028654;
const GELU_CUBIC: f64 = 0.044715;

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh())
}

/// Derivative of [`gelu`].
pub fn gelu_prime(x: f64) -> f64 {
    let inner = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

/// Two dense layers around a GELU: `d_in -> d_h -> d_out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionMlp {
    pub(crate) l1: LinearLayer,
    pub(crate) l2: LinearLayer,
}

/// Cached intermediates of one MLP forward, needed by backward.
#[derive(Debug, Clone)]
pub(crate) struct MlpTrace {
    pub h_pre: Vec<f64>,
    pub h_act: Vec<f64>,
}

/// Gradient accumulators mirroring [`ProjectionMlp`].
#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub w1: Matrix<f64>,
    pub b1: Vec<f64>,
    pub w2: Matrix<f64>,
    pub b2: Vec<f64>,
}

impl ProjectionMlp {
    /// Hidden width is fixed at twice the input width.
    pub fn init(d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let d_h = 2 * d_in;
        Self {
            l1: LinearLayer::init(d_in, d_h, rng),
            l2: LinearLayer::init(d_h, d_out, rng),
        }
    }

    pub fn new(l1: LinearLayer, l2: LinearLayer) -> Result<Self> {
        if l1.output_dim() != l2.input_dim() {
            return Err(GlapError::Shape(format!(
                "MLP layer widths do not chain: {} -> {} then {} -> {}",
                l1.input_dim(),
                l1.output_dim(),
                l2.input_dim(),
                l2.output_dim()
            )));
        }
        Ok(Self { l1, l2 })
    }

    pub fn input_dim(&self) -> usize {
        self.l1.input_dim()
    }

    pub fn hidden_dim(&self) -> usize {
        self.l1.output_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.l2.output_dim()
    }

    pub(crate) fn forward_f64(&self, y: &[f64]) -> (Vec<f64>, MlpTrace) {
        let h_pre = self.l1.forward_f64(y);
        let h_act: Vec<f64> = h_pre.iter().map(|&v| gelu(v)).collect();
        let out = self.l2.forward_f64(&h_act);
        (out, MlpTrace { h_pre, h_act })
    }

    pub(crate) fn zero_grads(&self) -> MlpGrads {
        MlpGrads {
            w1: Matrix::zeros(self.l1.input_dim(), self.l1.output_dim()),
            b1: vec![0.0; self.l1.output_dim()],
            w2: Matrix::zeros(self.l2.input_dim(), self.l2.output_dim()),
            b2: vec![0.0; self.l2.output_dim()],
        }
    }

    /// Accumulates parameter gradients and returns `dL/dy` for the
    /// projection input.
    pub(crate) fn backward(
        &self,
        y: &[f64],
        trace: &MlpTrace,
        g_out: &[f64],
        grads: &mut MlpGrads,
    ) -> Vec<f64> {
        let g_hact = self
            .l2
            .backward(&trace.h_act, g_out, &mut grads.w2, &mut grads.b2);
        let g_hpre: Vec<f64> = g_hact
            .iter()
            .zip(&trace.h_pre)
            .map(|(&g, &pre)| g * gelu_prime(pre))
            .collect();
        self.l1.backward(y, &g_hpre, &mut grads.w1, &mut grads.b1)
    }
}

/// A tower's projection head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Projection {
    Identity,
    Mlp(ProjectionMlp),
}

impl Projection {
    pub fn kind(&self) -> ProjectionKind {
        match self {
            Projection::Identity => ProjectionKind::Identity,
            Projection::Mlp(_) => ProjectionKind::Mlp,
        }
    }

    pub fn output_dim(&self, input_dim: usize) -> usize {
        match self {
            Projection::Identity => input_dim,
            Projection::Mlp(m) => m.output_dim(),
        }
    }

    pub(crate) fn forward_f64(&self, y: &[f64]) -> (Vec<f64>, Option<MlpTrace>) {
        match self {
            Projection::Identity => (y.to_vec(), None),
            Projection::Mlp(m) => {
                let (out, trace) = m.forward_f64(y);
                (out, Some(trace))
            }
        }
    }
}
