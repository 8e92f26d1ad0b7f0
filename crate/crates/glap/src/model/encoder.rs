//! Toy trainable encoders behind a pluggable spec. Real pretrained
//! towers are out of scope; these stand-ins keep the contrastive core
//! exercised end to end:
//!
//! - `MEANPOOL_LINEAR` (audio): mean over frames, then a linear map.
//! - `BYTE_TRIGRAM_HASH` (text): hashed byte-trigram counts, L2
//!   normalized, then a linear map. Byte-level, so it is language
//!   agnostic and deterministic across platforms.
//! - `PASSTHROUGH`: identity over precomputed embeddings (frozen).

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{Embedding, Matrix};
use crate::error::{GlapError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EncoderKind {
    MeanpoolLinear,
    ByteTrigramHash,
    Passthrough,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub kind: EncoderKind,
    pub input_dim: usize,
    pub output_dim: usize,
    pub trainable: bool,
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(GlapError::Config(format!(
                "encoder dims must be positive, got {}x{}",
                self.input_dim, self.output_dim
            )));
        }
        if self.kind == EncoderKind::Passthrough {
            if self.input_dim != self.output_dim {
                return Err(GlapError::Config(format!(
                    "PASSTHROUGH requires input_dim = output_dim, got {}x{}",
                    self.input_dim, self.output_dim
                )));
            }
            if self.trainable {
                return Err(GlapError::Config(
                    "PASSTHROUGH encoders have no weights and cannot be trainable".into(),
                ));
            }
        }
        Ok(())
    }
}

/// 64-bit FNV-1a; fixed constants keep hashed buckets identical on every
/// platform.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Counts of overlapping byte trigrams hashed into `buckets` bins.
/// Strings shorter than 3 bytes contribute a single whole-string gram.
pub fn trigram_counts(bytes: &[u8], buckets: usize) -> Vec<f32> {
    let mut counts = vec![0.0f32; buckets];
    if bytes.len() < 3 {
        counts[(fnv1a64(bytes) % buckets as u64) as usize] += 1.0;
    } else {
        for gram in bytes.windows(3) {
            counts[(fnv1a64(gram) % buckets as u64) as usize] += 1.0;
        }
    }
    counts
}

/// A dense `in x out` map with bias; the trainable part of both toy
/// encoders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearLayer {
    w: Matrix<f32>,
    b: Vec<f32>,
}

impl LinearLayer {
    pub fn new(w: Matrix<f32>, b: Vec<f32>) -> Result<Self> {
        if w.cols() != b.len() {
            return Err(GlapError::Shape(format!(
                "bias length {} does not match weight columns {}",
                b.len(),
                w.cols()
            )));
        }
        Ok(Self { w, b })
    }

    /// Uniform(-1/sqrt(in), 1/sqrt(in)) weights, zero bias.
    pub fn init(input_dim: usize, output_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (input_dim as f64).sqrt();
        let data = (0..input_dim * output_dim)
            .map(|_| rng.gen_range(-bound..=bound) as f32)
            .collect();
        Self {
            w: Matrix::from_vec(input_dim, output_dim, data).expect("sized above"),
            b: vec![0.0; output_dim],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn weight(&self) -> &Matrix<f32> {
        &self.w
    }

    pub fn bias(&self) -> &[f32] {
        &self.b
    }

    #[cfg(test)]
    pub(crate) fn weight_mut(&mut self) -> &mut Matrix<f32> {
        &mut self.w
    }

    /// Disjoint mutable borrows of weight and bias.
    pub(crate) fn parts_mut(&mut self) -> (&mut Matrix<f32>, &mut Vec<f32>) {
        (&mut self.w, &mut self.b)
    }

    /// `y = W^T x + b`, accumulated in f64.
    pub fn forward_f64(&self, x: &[f64]) -> Vec<f64> {
        let (din, dout) = (self.w.rows(), self.w.cols());
        debug_assert_eq!(x.len(), din);
        let mut y = vec![0.0f64; dout];
        for i in 0..din {
            let xi = x[i];
            let row = self.w.row(i);
            for j in 0..dout {
                y[j] += xi * row[j] as f64;
            }
        }
        for j in 0..dout {
            y[j] += self.b[j] as f64;
        }
        y
    }

    /// Accumulates `dL/dW += x g^T`, `dL/db += g` and returns `dL/dx`.
    pub fn backward(
        &self,
        x: &[f64],
        g_out: &[f64],
        grad_w: &mut Matrix<f64>,
        grad_b: &mut [f64],
    ) -> Vec<f64> {
        let (din, dout) = (self.w.rows(), self.w.cols());
        let mut g_x = vec![0.0f64; din];
        for i in 0..din {
            let row = self.w.row(i);
            let grow = grad_w.row_mut(i);
            let mut acc = 0.0f64;
            for j in 0..dout {
                grow[j] += x[i] * g_out[j];
                acc += row[j] as f64 * g_out[j];
            }
            g_x[i] = acc;
        }
        for j in 0..dout {
            grad_b[j] += g_out[j];
        }
        g_x
    }
}

/// An encoder spec together with its weights (absent for PASSTHROUGH).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    spec: EncoderSpec,
    linear: Option<LinearLayer>,
}

impl Encoder {
    pub fn new(spec: EncoderSpec, linear: Option<LinearLayer>) -> Result<Self> {
        spec.validate()?;
        match (spec.kind, &linear) {
            (EncoderKind::Passthrough, None) => {}
            (EncoderKind::Passthrough, Some(_)) => {
                return Err(GlapError::Config(
                    "PASSTHROUGH encoders carry no weights".into(),
                ));
            }
            (_, Some(l)) => {
                if l.input_dim() != spec.input_dim || l.output_dim() != spec.output_dim {
                    return Err(GlapError::Shape(format!(
                        "encoder weights {}x{} do not match spec {}x{}",
                        l.input_dim(),
                        l.output_dim(),
                        spec.input_dim,
                        spec.output_dim
                    )));
                }
            }
            (_, None) => {
                return Err(GlapError::Config(format!(
                    "{:?} encoder requires weights",
                    spec.kind
                )));
            }
        }
        Ok(Self { spec, linear })
    }

    pub fn init(spec: EncoderSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        spec.validate()?;
        let linear = match spec.kind {
            EncoderKind::Passthrough => None,
            _ => Some(LinearLayer::init(spec.input_dim, spec.output_dim, rng)),
        };
        Self::new(spec, linear)
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn linear(&self) -> Option<&LinearLayer> {
        self.linear.as_ref()
    }

    pub(crate) fn linear_mut(&mut self) -> Option<&mut LinearLayer> {
        self.linear.as_mut()
    }
}

/// Forward pass bookkeeping for one record: the linear layer's input
/// (empty for PASSTHROUGH) and the encoder output.
#[derive(Debug, Clone)]
pub(crate) struct EncodeTrace {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

pub(crate) fn encode_audio_f64(features: &Matrix<f32>, enc: &Encoder) -> Result<EncodeTrace> {
    let spec = enc.spec();
    if features.rows() == 0 {
        return Err(GlapError::Shape("audio features need at least one frame".into()));
    }
    if features.cols() != spec.input_dim {
        return Err(GlapError::Shape(format!(
            "feature width {} does not match encoder input_dim {}",
            features.cols(),
            spec.input_dim
        )));
    }
    match spec.kind {
        EncoderKind::MeanpoolLinear => {
            let (t, f) = (features.rows(), features.cols());
            let mut pooled = vec![0.0f64; f];
            for r in 0..t {
                let row = features.row(r);
                for c in 0..f {
                    pooled[c] += row[c] as f64;
                }
            }
            for v in pooled.iter_mut() {
                *v /= t as f64;
            }
            let y = enc.linear().expect("validated").forward_f64(&pooled);
            Ok(EncodeTrace { x: pooled, y })
        }
        EncoderKind::Passthrough => {
            if features.rows() != 1 {
                return Err(GlapError::Shape(format!(
                    "PASSTHROUGH expects a single frame, got {}",
                    features.rows()
                )));
            }
            let y = features.row(0).iter().map(|&v| v as f64).collect();
            Ok(EncodeTrace { x: Vec::new(), y })
        }
        EncoderKind::ByteTrigramHash => Err(GlapError::Config(
            "BYTE_TRIGRAM_HASH is a text encoder; audio tower cannot use it".into(),
        )),
    }
}

pub(crate) fn encode_text_f64(text: &str, enc: &Encoder) -> Result<EncodeTrace> {
    if text.is_empty() {
        return Err(GlapError::InvalidInput("cannot encode an empty string".into()));
    }
    let spec = enc.spec();
    match spec.kind {
        EncoderKind::ByteTrigramHash => {
            let counts = trigram_counts(text.as_bytes(), spec.input_dim);
            let norm = counts.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
            let norm = norm.max(crate::embedding::NORM_FLOOR);
            let x: Vec<f64> = counts.iter().map(|&v| v as f64 / norm).collect();
            let y = enc.linear().expect("validated").forward_f64(&x);
            Ok(EncodeTrace { x, y })
        }
        EncoderKind::Passthrough => {
            let mut y = Vec::new();
            for tok in text.split_whitespace() {
                let v: f64 = tok.parse().map_err(|_| {
                    GlapError::InvalidInput(format!(
                        "PASSTHROUGH caption token {tok:?} is not a number"
                    ))
                })?;
                if !v.is_finite() {
                    return Err(GlapError::InvalidInput(
                        "PASSTHROUGH caption contains a non-finite value".into(),
                    ));
                }
                y.push(v);
            }
            if y.len() != spec.input_dim {
                return Err(GlapError::Shape(format!(
                    "PASSTHROUGH caption has {} values, encoder expects {}",
                    y.len(),
                    spec.input_dim
                )));
            }
            Ok(EncodeTrace { x: Vec::new(), y })
        }
        EncoderKind::MeanpoolLinear => Err(GlapError::Config(
            "MEANPOOL_LINEAR is an audio encoder; text tower cannot use it".into(),
        )),
    }
}

fn to_embedding(y: &[f64]) -> Result<Embedding> {
    Embedding::new(y.iter().map(|&v| v as f32).collect())
}

/// Encodes a frames-by-dim feature matrix to the (pre-projection)
/// encoder output.
pub fn encode_audio(features: &Matrix<f32>, enc: &Encoder) -> Result<Embedding> {
    to_embedding(&encode_audio_f64(features, enc)?.y)
}

/// Encodes a UTF-8 string to the (pre-projection) encoder output.
pub fn encode_text(text: &str, enc: &Encoder) -> Result<Embedding> {
    to_embedding(&encode_text_f64(text, enc)?.y)
}
