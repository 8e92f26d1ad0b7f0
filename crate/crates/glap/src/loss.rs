//! Contrastive objectives over a square similarity grid: the pairwise
//! sigmoid loss with learnable temperature and bias, and a symmetric
//! InfoNCE baseline for comparison runs.
//!
//! Similarities arrive as `f32`; every loss and gradient is evaluated in
//! f64 so that central finite differences at step 1e-3 resolve the
//! analytic gradients to better than 1e-4 relative error.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{Matrix, SignMatrix, SimilarityMatrix};
use crate::error::{GlapError, Result};

/// How raw cosine scores are mapped to pairwise logits.
///
/// `SiglipConsistent` computes `s' = s/tau + beta`, the scaling used by
/// sigmoid-loss pretraining; with the standard init (tau = 0.07,
/// beta = -10) it produces logits near -10. `PaperLiteral` computes
/// `s' = (s + beta)/tau`, which drives the same init to logits near -143
/// and saturates most gradients. Both are selectable; runs record which
/// one was active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LogitForm {
    SiglipConsistent,
    PaperLiteral,
}

impl Default for LogitForm {
    fn default() -> Self {
        LogitForm::SiglipConsistent
    }
}

impl LogitForm {
    fn apply(self, s: f64, tau: f64, beta: f64) -> f64 {
        match self {
            LogitForm::SiglipConsistent => s / tau + beta,
            LogitForm::PaperLiteral => (s + beta) / tau,
        }
    }
}

/// Learnable temperature and bias. The temperature is stored as the
/// unconstrained scalar `u` with `tau = exp(u)`, so no optimizer step can
/// drive it non-positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParams {
    u: f32,
    beta: f32,
}

impl Default for LossParams {
    /// tau = 0.07, beta = -10.
    fn default() -> Self {
        Self {
            u: (0.07f64).ln() as f32,
            beta: -10.0,
        }
    }
}

impl LossParams {
    pub fn new(tau: f64, beta: f64) -> Result<Self> {
        if !(tau.is_finite() && tau > 0.0) {
            return Err(GlapError::InvalidInput(format!(
                "temperature must be finite and positive, got {tau}"
            )));
        }
        if !beta.is_finite() {
            return Err(GlapError::InvalidInput(format!(
                "bias must be finite, got {beta}"
            )));
        }
        Ok(Self {
            u: tau.ln() as f32,
            beta: beta as f32,
        })
    }

    pub fn from_raw(u: f32, beta: f32) -> Self {
        Self { u, beta }
    }

    pub fn u(&self) -> f32 {
        self.u
    }

    pub fn beta_raw(&self) -> f32 {
        self.beta
    }

    pub fn tau(&self) -> f64 {
        (self.u as f64).exp()
    }

    pub fn beta(&self) -> f64 {
        self.beta as f64
    }

    /// Disjoint mutable borrows of `u` and `beta`.
    pub(crate) fn raw_parts_mut(&mut self) -> (&mut f32, &mut f32) {
        (&mut self.u, &mut self.beta)
    }
}

/// Loss value plus the gradients the trainer needs. `grad_s` is with
/// respect to the raw similarity entries; `grad_u` and `grad_beta` are
/// with respect to the loss parameters (`u = ln tau`).
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub grad_s: Matrix<f64>,
    pub grad_u: f64,
    pub grad_beta: f64,
}

/// `softplus(x) = max(x, 0) + log1p(exp(-|x|))`; stays exact for |x| in
/// the hundreds where the naive `ln(1 + e^x)` overflows.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_square(rows: usize, cols: usize, what: &str) -> Result<usize> {
    if rows != cols {
        return Err(GlapError::Shape(format!(
            "{what} must be square, got {rows}x{cols}"
        )));
    }
    if rows == 0 {
        return Err(GlapError::Shape(format!("{what} must be non-empty")));
    }
    Ok(rows)
}

fn check_grid(s: &[f64], b: usize) -> Result<()> {
    if s.len() != b * b {
        return Err(GlapError::Shape(format!(
            "expected {b}x{b} grid ({} values), got {}",
            b * b,
            s.len()
        )));
    }
    for (k, &v) in s.iter().enumerate() {
        if !v.is_finite() {
            return Err(GlapError::NonFinite {
                row: k / b,
                col: k % b,
            });
        }
    }
    Ok(())
}

fn similarity_grid(s: &SimilarityMatrix) -> Result<(Vec<f64>, usize)> {
    let b = check_square(s.rows(), s.cols(), "similarity matrix")?;
    let grid = s.matrix().data().iter().map(|&v| v as f64).collect();
    Ok((grid, b))
}

/// Elementwise logits `s'` for the selected form.
pub fn siglip_logits(
    s: &SimilarityMatrix,
    params: &LossParams,
    form: LogitForm,
) -> Result<Matrix<f64>> {
    let (grid, b) = similarity_grid(s)?;
    let tau = params.tau();
    let beta = params.beta();
    let data = grid.iter().map(|&v| form.apply(v, tau, beta)).collect();
    Matrix::from_vec(b, b, data)
}

/// Pairwise sigmoid loss on precomputed logits:
/// `L = -(1/B) sum_ij log sigmoid(s'(i,j) * psi(i,j))`, evaluated through
/// softplus. Returns the loss and `dL/ds'`.
pub fn siglip_loss_on_logits(
    sprime: &Matrix<f64>,
    psi: &SignMatrix,
) -> Result<(f64, Matrix<f64>)> {
    let b = check_square(sprime.rows(), sprime.cols(), "logit matrix")?;
    if psi.size() != b {
        return Err(GlapError::Shape(format!(
            "sign matrix size {} does not match logits {b}x{b}",
            psi.size()
        )));
    }
    check_grid(sprime.data(), b)?;

    let bf = b as f64;
    let mut acc = 0.0f64;
    let mut grad = Matrix::zeros(b, b);
    for i in 0..b {
        for j in 0..b {
            let psi_ij = psi.entry(i, j);
            let z = sprime.get(i, j) * psi_ij;
            acc += softplus(-z);
            grad.set(i, j, -(psi_ij / bf) * sigmoid(-z));
        }
    }
    Ok((acc / bf, grad))
}

fn siglip_full(
    grid: &[f64],
    b: usize,
    u: f64,
    beta: f64,
    form: LogitForm,
) -> (f64, Vec<f64>, f64, f64) {
    let tau = u.exp();
    let bf = b as f64;
    let mut acc = 0.0f64;
    let mut grad_s = vec![0.0f64; b * b];
    let mut grad_u = 0.0f64;
    let mut grad_beta = 0.0f64;
    for i in 0..b {
        for j in 0..b {
            let psi = if i == j { 1.0 } else { -1.0 };
            let sprime = form.apply(grid[i * b + j], tau, beta);
            let z = sprime * psi;
            acc += softplus(-z);
            // dL/ds' for this entry.
            let gp = -(psi / bf) * sigmoid(-z);
            grad_s[i * b + j] = gp / tau;
            match form {
                LogitForm::SiglipConsistent => {
                    grad_beta += gp;
                    grad_u -= gp * (sprime - beta);
                }
                LogitForm::PaperLiteral => {
                    grad_beta += gp / tau;
                    grad_u -= gp * sprime;
                }
            }
        }
    }
    (acc / bf, grad_s, grad_u, grad_beta)
}

/// Crate-internal full evaluation on a raw f64 grid: loss, `dL/ds`,
/// `dL/du`, `dL/dbeta`, consumed by in-crate gradient tests.
#[cfg(test)]
pub(crate) fn siglip_grads_f64(
    s: &[f64],
    b: usize,
    u: f64,
    beta: f64,
    form: LogitForm,
) -> (f64, Vec<f64>, f64, f64) {
    siglip_full(s, b, u, beta, form)
}

/// f64 evaluation core for the sigmoid loss; exposed so finite-difference
/// probes can perturb `s`, `u`, and `beta` without f32 rounding.
pub fn siglip_loss_value(s: &[f64], b: usize, u: f64, beta: f64, form: LogitForm) -> Result<f64> {
    check_grid(s, b)?;
    let tau = u.exp();
    let bf = b as f64;
    let mut acc = 0.0f64;
    for i in 0..b {
        for j in 0..b {
            let psi = if i == j { 1.0 } else { -1.0 };
            let z = form.apply(s[i * b + j], tau, beta) * psi;
            acc += softplus(-z);
        }
    }
    Ok(acc / bf)
}

/// Full sigmoid loss: logits, loss, and gradients with respect to the
/// similarities, `u = ln tau`, and `beta`, chained through the active form.
pub fn siglip_loss(
    s: &SimilarityMatrix,
    psi: &SignMatrix,
    params: &LossParams,
    form: LogitForm,
) -> Result<LossOutput> {
    let (grid, b) = similarity_grid(s)?;
    if psi.size() != b {
        return Err(GlapError::Shape(format!(
            "sign matrix size {} does not match similarities {b}x{b}",
            psi.size()
        )));
    }
    let (loss, grad_s, grad_u, grad_beta) =
        siglip_full(&grid, b, params.u() as f64, params.beta(), form);
    Ok(LossOutput {
        loss,
        grad_s: Matrix::from_vec(b, b, grad_s)?,
        grad_u,
        grad_beta,
    })
}

fn infonce_full(grid: &[f64], b: usize, u: f64) -> (f64, Vec<f64>, f64) {
    let tau = u.exp();
    let bf = b as f64;
    let z: Vec<f64> = grid.iter().map(|&v| v / tau).collect();

    let mut loss_acc = 0.0f64;
    let mut dz = vec![0.0f64; b * b];

    // Row-wise cross-entropy against the diagonal.
    for i in 0..b {
        let row = &z[i * b..(i + 1) * b];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&v| (v - m).exp()).sum();
        let lse = m + sum.ln();
        loss_acc += lse - row[i];
        for j in 0..b {
            let p = (row[j] - lse).exp();
            dz[i * b + j] += p - if i == j { 1.0 } else { 0.0 };
        }
    }
    // Column-wise cross-entropy against the diagonal.
    for j in 0..b {
        let mut m = f64::NEG_INFINITY;
        for i in 0..b {
            m = m.max(z[i * b + j]);
        }
        let mut sum = 0.0f64;
        for i in 0..b {
            sum += (z[i * b + j] - m).exp();
        }
        let lse = m + sum.ln();
        loss_acc += lse - z[j * b + j];
        for i in 0..b {
            let q = (z[i * b + j] - lse).exp();
            dz[i * b + j] += q - if i == j { 1.0 } else { 0.0 };
        }
    }

    let scale = 1.0 / (2.0 * bf);
    let mut grad_s = vec![0.0f64; b * b];
    let mut grad_u = 0.0f64;
    for k in 0..b * b {
        let d = dz[k] * scale;
        grad_s[k] = d / tau;
        grad_u -= d * z[k];
    }
    (loss_acc * scale, grad_s, grad_u)
}

/// f64 evaluation core for the symmetric InfoNCE loss.
pub fn infonce_loss_value(s: &[f64], b: usize, u: f64) -> Result<f64> {
    check_grid(s, b)?;
    let tau = u.exp();
    let bf = b as f64;
    let z: Vec<f64> = s.iter().map(|&v| v / tau).collect();
    let mut acc = 0.0f64;
    for i in 0..b {
        let row = &z[i * b..(i + 1) * b];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        acc += lse - row[i];
    }
    for j in 0..b {
        let mut m = f64::NEG_INFINITY;
        for i in 0..b {
            m = m.max(z[i * b + j]);
        }
        let mut sum = 0.0f64;
        for i in 0..b {
            sum += (z[i * b + j] - m).exp();
        }
        acc += m + sum.ln() - z[j * b + j];
    }
    Ok(acc / (2.0 * bf))
}

/// Symmetric InfoNCE: mean of row-wise and column-wise cross-entropy of
/// `softmax(S/tau)` against the diagonal targets. `grad_beta` is zero
/// (the bias does not enter this objective).
pub fn infonce_loss(s: &SimilarityMatrix, tau: f64) -> Result<LossOutput> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(GlapError::InvalidInput(format!(
            "temperature must be finite and positive, got {tau}"
        )));
    }
    let (grid, b) = similarity_grid(s)?;
    let (loss, grad_s, grad_u) = infonce_full(&grid, b, tau.ln());
    Ok(LossOutput {
        loss,
        grad_s: Matrix::from_vec(b, b, grad_s)?,
        grad_u,
        grad_beta: 0.0,
    })
}

/// Which objective a gradient check exercises.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradCheckTarget {
    Sigmoid(LogitForm),
    InfoNce,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub grad_s_err: f64,
    pub grad_u_err: f64,
    pub grad_beta_err: f64,
}

/// Central finite-difference step for gradient checks.
pub const GRADCHECK_STEP: f64 = 1e-3;

/// Relative error with a unit floor: entries whose analytic and numeric
/// gradients are both far below one are compared absolutely, which keeps
/// saturated sigmoid entries (gradients ~1e-11) from amplifying
/// finite-difference rounding noise.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Checks the analytic gradients of the selected objective against
/// central finite differences (step [`GRADCHECK_STEP`]) on a seeded random
/// `S` with entries uniform in [-1, 1], at the default loss parameters
/// (tau = 0.07, beta = -10). Returns the worst relative error across all
/// of `grad_s`, `grad_u`, and `grad_beta`.
pub fn gradcheck(b: usize, seed: u64, target: GradCheckTarget) -> Result<GradCheckReport> {
    if !(2..=64).contains(&b) {
        return Err(GlapError::InvalidInput(format!(
            "gradcheck batch size must be in [2, 64], got {b}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Draw on the f32 grid the production path would see, then promote.
    let grid: Vec<f64> = (0..b * b)
        .map(|_| rng.gen_range(-1.0f32..=1.0) as f64)
        .collect();
    let params = LossParams::default();
    let u = params.u() as f64;
    let beta = params.beta();

    let value = |s: &[f64], u: f64, beta: f64| -> f64 {
        match target {
            GradCheckTarget::Sigmoid(form) => {
                siglip_loss_value(s, b, u, beta, form).expect("finite grid")
            }
            GradCheckTarget::InfoNce => infonce_loss_value(s, b, u).expect("finite grid"),
        }
    };
    let (grad_s, grad_u, grad_beta) = match target {
        GradCheckTarget::Sigmoid(form) => {
            let (_, gs, gu, gb) = siglip_full(&grid, b, u, beta, form);
            (gs, gu, gb)
        }
        GradCheckTarget::InfoNce => {
            let (_, gs, gu) = infonce_full(&grid, b, u);
            (gs, gu, 0.0)
        }
    };

    let h = GRADCHECK_STEP;
    let mut grad_s_err = 0.0f64;
    let mut probe = grid.clone();
    for k in 0..b * b {
        let orig = probe[k];
        probe[k] = orig + h;
        let plus = value(&probe, u, beta);
        probe[k] = orig - h;
        let minus = value(&probe, u, beta);
        probe[k] = orig;
        grad_s_err = grad_s_err.max(rel_err(grad_s[k], (plus - minus) / (2.0 * h)));
    }
    let fd_u = (value(&grid, u + h, beta) - value(&grid, u - h, beta)) / (2.0 * h);
    let grad_u_err = rel_err(grad_u, fd_u);
    let fd_beta = (value(&grid, u, beta + h) - value(&grid, u, beta - h)) / (2.0 * h);
    let grad_beta_err = rel_err(grad_beta, fd_beta);

    Ok(GradCheckReport {
        max_rel_err: grad_s_err.max(grad_u_err).max(grad_beta_err),
        grad_s_err,
        grad_u_err,
        grad_beta_err,
    })
}
