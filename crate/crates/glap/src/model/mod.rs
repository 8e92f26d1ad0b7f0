//! Dual-tower model: audio and text encoders, projection heads into a
//! shared space, and L2 normalization so downstream similarity is plain
//! dot products. Forward passes cache f64 intermediates; the backward
//! pass turns a `dL/dS` grid into parameter gradients.

pub mod checkpoint;
pub mod encoder;
pub mod projection;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{FeatureStore, ManifestRecord};
use crate::embedding::{Embedding, EmbeddingBatch, Matrix, NORM_FLOOR};
use crate::error::{GlapError, Result};
use crate::loss::LossParams;
use encoder::{
    encode_audio_f64, encode_text_f64, Encoder, EncoderKind, EncoderSpec,
};
use projection::{MlpGrads, MlpTrace, Projection, ProjectionKind, ProjectionMlp};

/// Resolved architecture of both towers. Stored in checkpoints so a
/// load can rebuild the parameter skeleton without the original flags.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub audio: EncoderSpec,
    pub text: EncoderSpec,
    pub projection: ProjectionKind,
    /// Shared joint dimension D.
    pub embed_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            audio: EncoderSpec {
                kind: EncoderKind::MeanpoolLinear,
                input_dim: 64,
                output_dim: 256,
                trainable: true,
            },
            text: EncoderSpec {
                kind: EncoderKind::ByteTrigramHash,
                input_dim: 4096,
                output_dim: 256,
                trainable: true,
            },
            projection: ProjectionKind::Mlp,
            embed_dim: 256,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.audio.validate()?;
        self.text.validate()?;
        if self.audio.kind == EncoderKind::ByteTrigramHash {
            return Err(GlapError::Config(
                "audio tower cannot use BYTE_TRIGRAM_HASH".into(),
            ));
        }
        if self.text.kind == EncoderKind::MeanpoolLinear {
            return Err(GlapError::Config(
                "text tower cannot use MEANPOOL_LINEAR".into(),
            ));
        }
        if self.embed_dim == 0 {
            return Err(GlapError::Config("embed_dim must be positive".into()));
        }
        if self.projection == ProjectionKind::Identity
            && (self.audio.output_dim != self.embed_dim || self.text.output_dim != self.embed_dim)
        {
            return Err(GlapError::Config(format!(
                "identity projection requires encoder outputs ({}, {}) to equal embed_dim {}",
                self.audio.output_dim, self.text.output_dim, self.embed_dim
            )));
        }
        Ok(())
    }
}

/// All learnable state: two encoders, two projection heads, and the loss
/// temperature/bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TowerParams {
    config: ModelConfig,
    audio_encoder: Encoder,
    text_encoder: Encoder,
    proj_a: Projection,
    proj_t: Projection,
    loss_params: LossParams,
}

impl TowerParams {
    /// Seeded initialization: uniform(-1/sqrt(fan_in), ..) weights, zero
    /// biases, default loss parameters. Draw order is fixed, so equal
    /// seeds give bit-identical parameters.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let audio_encoder = Encoder::init(config.audio, &mut rng)?;
        let text_encoder = Encoder::init(config.text, &mut rng)?;
        let mut head = |input: usize| -> Projection {
            match config.projection {
                ProjectionKind::Identity => Projection::Identity,
                ProjectionKind::Mlp => {
                    Projection::Mlp(ProjectionMlp::init(input, config.embed_dim, &mut rng))
                }
            }
        };
        let proj_a = head(config.audio.output_dim);
        let proj_t = head(config.text.output_dim);
        Ok(Self {
            config: config.clone(),
            audio_encoder,
            text_encoder,
            proj_a,
            proj_t,
            loss_params: LossParams::default(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn audio_encoder(&self) -> &Encoder {
        &self.audio_encoder
    }

    pub fn text_encoder(&self) -> &Encoder {
        &self.text_encoder
    }

    pub fn loss_params(&self) -> &LossParams {
        &self.loss_params
    }

    pub fn loss_params_mut(&mut self) -> &mut LossParams {
        &mut self.loss_params
    }

    /// Visits every tensor (including frozen encoder weights and the
    /// loss scalars) with its name and dims, in a fixed order.
    pub fn for_each_tensor(&self, f: &mut impl FnMut(&str, &[usize], &[f32])) {
        let mut enc = |name: &str, e: &Encoder| {
            if let Some(lin) = e.linear() {
                let w = lin.weight();
                f(
                    &format!("{name}.w"),
                    &[w.rows(), w.cols()],
                    w.data(),
                );
                f(&format!("{name}.b"), &[lin.bias().len()], lin.bias());
            }
        };
        enc("audio_encoder", &self.audio_encoder);
        enc("text_encoder", &self.text_encoder);
        let mut proj = |name: &str, p: &Projection| {
            if let Projection::Mlp(m) = p {
                for (suffix, lin) in [("1", &m.l1), ("2", &m.l2)] {
                    let w = lin.weight();
                    f(&format!("{name}.w{suffix}"), &[w.rows(), w.cols()], w.data());
                    f(&format!("{name}.b{suffix}"), &[lin.bias().len()], lin.bias());
                }
            }
        };
        proj("proj_a", &self.proj_a);
        proj("proj_t", &self.proj_t);
        f("loss.u", &[1], &[self.loss_params.u()]);
        f("loss.beta", &[1], &[self.loss_params.beta_raw()]);
    }

    /// Mutable view over every tensor, for checkpoint loading.
    pub(crate) fn all_tensors_mut(&mut self) -> Vec<(String, &mut [f32])> {
        self.tensors_mut(false)
    }

    /// Mutable view over the tensors the optimizer may update: frozen
    /// encoders are excluded, projections and loss scalars always
    /// included.
    pub fn trainable_tensors_mut(&mut self) -> Vec<(String, &mut [f32])> {
        self.tensors_mut(true)
    }

    fn tensors_mut(&mut self, trainable_only: bool) -> Vec<(String, &mut [f32])> {
        fn enc<'a>(
            name: &str,
            e: &'a mut Encoder,
            trainable_only: bool,
            out: &mut Vec<(String, &'a mut [f32])>,
        ) {
            if trainable_only && !e.spec().trainable {
                return;
            }
            if let Some(lin) = e.linear_mut() {
                let (w, b) = lin.parts_mut();
                out.push((format!("{name}.w"), w.data_mut()));
                out.push((format!("{name}.b"), b.as_mut_slice()));
            }
        }
        fn proj<'a>(name: &str, p: &'a mut Projection, out: &mut Vec<(String, &'a mut [f32])>) {
            if let Projection::Mlp(m) = p {
                let (l1, l2) = (&mut m.l1, &mut m.l2);
                for (suffix, lin) in [("1", l1), ("2", l2)] {
                    let (w, b) = lin.parts_mut();
                    out.push((format!("{name}.w{suffix}"), w.data_mut()));
                    out.push((format!("{name}.b{suffix}"), b.as_mut_slice()));
                }
            }
        }
        let mut out: Vec<(String, &mut [f32])> = Vec::new();
        enc("audio_encoder", &mut self.audio_encoder, trainable_only, &mut out);
        enc("text_encoder", &mut self.text_encoder, trainable_only, &mut out);
        proj("proj_a", &mut self.proj_a, &mut out);
        proj("proj_t", &mut self.proj_t, &mut out);
        let (u, beta) = self.loss_params.raw_parts_mut();
        out.push(("loss.u".into(), std::slice::from_mut(u)));
        out.push(("loss.beta".into(), std::slice::from_mut(beta)));
        out
    }
}

/// One resolved training/eval example: features plus caption.
#[derive(Debug, Clone)]
pub struct PairExample {
    pub id: String,
    pub features: Matrix<f32>,
    pub caption: String,
}

/// Materializes manifest records into examples, tagging failures with
/// the record id.
pub fn load_examples(records: &[ManifestRecord], store: &FeatureStore) -> Result<Vec<PairExample>> {
    records
        .iter()
        .map(|r| {
            let features = store
                .features(&r.feature_ref)
                .map_err(|e| GlapError::record(&r.id, e))?;
            Ok(PairExample {
                id: r.id.clone(),
                features,
                caption: r.caption.clone(),
            })
        })
        .collect()
}

/// Per-record forward cache for one tower.
#[derive(Debug, Clone)]
struct SideTrace {
    /// Encoder linear input (empty for PASSTHROUGH).
    x: Vec<f64>,
    /// Encoder output = projection input.
    y: Vec<f64>,
    mlp: Option<MlpTrace>,
    /// Effective normalization divisor.
    norm: f64,
    /// True when the norm floor kicked in (degenerate zero vector).
    guarded: bool,
}

/// Cached f64 intermediates of a batch forward; consumed by
/// [`backward_pair_batch`].
#[derive(Debug, Clone)]
pub struct BatchTrace {
    audio: Vec<SideTrace>,
    text: Vec<SideTrace>,
    /// Normalized audio embeddings, batch x D, f64.
    pub audio_emb: Matrix<f64>,
    /// Normalized text embeddings, batch x D, f64.
    pub text_emb: Matrix<f64>,
}

impl BatchTrace {
    pub fn batch_size(&self) -> usize {
        self.audio.len()
    }

    /// Similarity grid of the cached (unit-norm) embeddings: plain dot
    /// products, row-major, f64.
    pub fn similarity_grid(&self) -> Vec<f64> {
        let b = self.batch_size();
        let d = self.audio_emb.cols();
        let mut s = vec![0.0f64; b * b];
        for i in 0..b {
            let a = self.audio_emb.row(i);
            for j in 0..b {
                let t = self.text_emb.row(j);
                let mut acc = 0.0f64;
                for k in 0..d {
                    acc += a[k] * t[k];
                }
                s[i * b + j] = acc;
            }
        }
        s
    }
}

fn normalize_f64(v: Vec<f64>) -> (Vec<f64>, f64, bool) {
    let norm = v.iter().map(|&x| x * x).sum::<f64>().sqrt();
    let guarded = norm < NORM_FLOOR;
    let div = if guarded { NORM_FLOOR } else { norm };
    let e = v.into_iter().map(|x| x / div).collect();
    (e, div, guarded)
}

fn forward_record(
    ex: &PairExample,
    enc: &Encoder,
    proj: &Projection,
    audio_side: bool,
) -> Result<(Vec<f64>, SideTrace)> {
    let enc_trace = if audio_side {
        encode_audio_f64(&ex.features, enc)
    } else {
        encode_text_f64(&ex.caption, enc)
    }
    .map_err(|e| GlapError::record(&ex.id, e))?;
    let (v, mlp) = proj.forward_f64(&enc_trace.y);
    let (e, norm, guarded) = normalize_f64(v);
    Ok((
        e,
        SideTrace {
            x: enc_trace.x,
            y: enc_trace.y,
            mlp,
            norm,
            guarded,
        },
    ))
}

/// Runs both towers over a batch and keeps the f64 cache for backward.
/// Row order equals record order; embeddings are unit-norm.
pub fn forward_pair_batch_traced(
    examples: &[PairExample],
    params: &TowerParams,
) -> Result<(EmbeddingBatch, EmbeddingBatch, BatchTrace)> {
    if examples.is_empty() {
        return Err(GlapError::InvalidInput("empty batch".into()));
    }
    let d = params.embed_dim();
    let b = examples.len();
    let mut audio = Vec::with_capacity(b);
    let mut text = Vec::with_capacity(b);
    let mut audio_emb = Matrix::zeros(b, d);
    let mut text_emb = Matrix::zeros(b, d);
    for (i, ex) in examples.iter().enumerate() {
        let (ea, tr_a) = forward_record(ex, &params.audio_encoder, &params.proj_a, true)?;
        let (et, tr_t) = forward_record(ex, &params.text_encoder, &params.proj_t, false)?;
        if ea.len() != d || et.len() != d {
            return Err(GlapError::Shape(format!(
                "projected width {} does not match embed_dim {d}",
                ea.len()
            )));
        }
        audio_emb.row_mut(i).copy_from_slice(&ea);
        text_emb.row_mut(i).copy_from_slice(&et);
        audio.push(tr_a);
        text.push(tr_t);
    }

    let ids: Vec<String> = examples.iter().map(|e| e.id.clone()).collect();
    let round = |m: &Matrix<f64>, i: usize| -> Result<Embedding> {
        Embedding::new(m.row(i).iter().map(|&v| v as f32).collect())
    };
    let mut a_rows = Vec::with_capacity(b);
    let mut t_rows = Vec::with_capacity(b);
    for i in 0..b {
        a_rows.push(round(&audio_emb, i)?);
        t_rows.push(round(&text_emb, i)?);
    }
    let a_batch = EmbeddingBatch::from_embeddings(ids.clone(), &a_rows)?;
    let t_batch = EmbeddingBatch::from_embeddings(ids, &t_rows)?;
    Ok((
        a_batch,
        t_batch,
        BatchTrace { audio, text, audio_emb, text_emb },
    ))
}

/// Forward without the cache; for evaluation paths.
pub fn forward_pair_batch(
    examples: &[PairExample],
    params: &TowerParams,
) -> Result<(EmbeddingBatch, EmbeddingBatch)> {
    let (a, t, _) = forward_pair_batch_traced(examples, params)?;
    Ok((a, t))
}

/// Embeds free-standing texts with the text tower (encoder, projection,
/// normalization). Used for zero-shot prompts; `ids` name the rows.
pub fn embed_texts(
    params: &TowerParams,
    ids: Vec<String>,
    texts: &[String],
) -> Result<EmbeddingBatch> {
    if ids.len() != texts.len() {
        return Err(GlapError::Shape(format!(
            "{} ids for {} texts",
            ids.len(),
            texts.len()
        )));
    }
    let mut rows = Vec::with_capacity(texts.len());
    for (id, text) in ids.iter().zip(texts) {
        let tr = encode_text_f64(text, &params.text_encoder)
            .map_err(|e| GlapError::record(id, e))?;
        let (v, _) = params.proj_t.forward_f64(&tr.y);
        let (e, _, _) = normalize_f64(v);
        rows.push(Embedding::new(e.iter().map(|&x| x as f32).collect())?);
    }
    EmbeddingBatch::from_embeddings(ids, &rows)
}

/// Embeds free-standing audio feature grids with the audio tower.
pub fn embed_audio(
    params: &TowerParams,
    ids: Vec<String>,
    features: &[Matrix<f32>],
) -> Result<EmbeddingBatch> {
    if ids.len() != features.len() {
        return Err(GlapError::Shape(format!(
            "{} ids for {} feature grids",
            ids.len(),
            features.len()
        )));
    }
    let mut rows = Vec::with_capacity(features.len());
    for (id, feat) in ids.iter().zip(features) {
        let tr = encode_audio_f64(feat, &params.audio_encoder)
            .map_err(|e| GlapError::record(id, e))?;
        let (v, _) = params.proj_a.forward_f64(&tr.y);
        let (e, _, _) = normalize_f64(v);
        rows.push(Embedding::new(e.iter().map(|&x| x as f32).collect())?);
    }
    EmbeddingBatch::from_embeddings(ids, &rows)
}

/// Gradient accumulators mirroring a [`LinearLayer`].
///
/// [`LinearLayer`]: encoder::LinearLayer
#[derive(Debug, Clone)]
pub struct LinearGrads {
    pub w: Matrix<f64>,
    pub b: Vec<f64>,
}

/// Parameter gradients of one training step. Encoder entries are absent
/// for frozen or weightless encoders; projection entries are absent for
/// identity heads.
#[derive(Debug, Clone)]
pub struct TowerGrads {
    pub audio_encoder: Option<LinearGrads>,
    pub text_encoder: Option<LinearGrads>,
    pub proj_a: Option<MlpGrads>,
    pub proj_t: Option<MlpGrads>,
    pub grad_u: f64,
    pub grad_beta: f64,
}

impl TowerGrads {
    fn zeros_for(params: &TowerParams) -> Self {
        let enc = |e: &Encoder| -> Option<LinearGrads> {
            if !e.spec().trainable {
                return None;
            }
            e.linear().map(|lin| LinearGrads {
                w: Matrix::zeros(lin.input_dim(), lin.output_dim()),
                b: vec![0.0; lin.output_dim()],
            })
        };
        let proj = |p: &Projection| -> Option<MlpGrads> {
            match p {
                Projection::Identity => None,
                Projection::Mlp(m) => Some(m.zero_grads()),
            }
        };
        Self {
            audio_encoder: enc(&params.audio_encoder),
            text_encoder: enc(&params.text_encoder),
            proj_a: proj(&params.proj_a),
            proj_t: proj(&params.proj_t),
            grad_u: 0.0,
            grad_beta: 0.0,
        }
    }

    /// Visits every gradient tensor with the same names as
    /// [`TowerParams::trainable_tensors_mut`].
    pub fn for_each(&self, f: &mut impl FnMut(&str, &[f64])) {
        let mut enc = |name: &str, g: &Option<LinearGrads>| {
            if let Some(g) = g {
                f(&format!("{name}.w"), g.w.data());
                f(&format!("{name}.b"), &g.b);
            }
        };
        enc("audio_encoder", &self.audio_encoder);
        enc("text_encoder", &self.text_encoder);
        let mut proj = |name: &str, g: &Option<MlpGrads>| {
            if let Some(g) = g {
                f(&format!("{name}.w1"), g.w1.data());
                f(&format!("{name}.b1"), &g.b1);
                f(&format!("{name}.w2"), g.w2.data());
                f(&format!("{name}.b2"), &g.b2);
            }
        };
        proj("proj_a", &self.proj_a);
        proj("proj_t", &self.proj_t);
        f("loss.u", &[self.grad_u]);
        f("loss.beta", &[self.grad_beta]);
    }

    /// Multiplies every gradient value in place (used for norm clipping).
    pub fn scale(&mut self, factor: f64) {
        let enc = |g: &mut Option<LinearGrads>| {
            if let Some(g) = g {
                g.w.data_mut().iter_mut().for_each(|v| *v *= factor);
                g.b.iter_mut().for_each(|v| *v *= factor);
            }
        };
        enc(&mut self.audio_encoder);
        enc(&mut self.text_encoder);
        let proj = |g: &mut Option<MlpGrads>| {
            if let Some(g) = g {
                g.w1.data_mut().iter_mut().for_each(|v| *v *= factor);
                g.b1.iter_mut().for_each(|v| *v *= factor);
                g.w2.data_mut().iter_mut().for_each(|v| *v *= factor);
                g.b2.iter_mut().for_each(|v| *v *= factor);
            }
        };
        proj(&mut self.proj_a);
        proj(&mut self.proj_t);
        self.grad_u *= factor;
        self.grad_beta *= factor;
    }
}

fn backward_record(
    enc: &Encoder,
    proj: &Projection,
    tr: &SideTrace,
    e_row: &[f64],
    g_e: &[f64],
    enc_grads: &mut Option<LinearGrads>,
    proj_grads: &mut Option<MlpGrads>,
) {
    // Through normalization e = v / norm.
    let g_v: Vec<f64> = if tr.guarded {
        g_e.iter().map(|&g| g / tr.norm).collect()
    } else {
        let dot: f64 = g_e.iter().zip(e_row).map(|(g, e)| g * e).sum();
        g_e.iter()
            .zip(e_row)
            .map(|(g, e)| (g - dot * e) / tr.norm)
            .collect()
    };
    // Through the projection head.
    let g_y = match proj {
        Projection::Identity => g_v,
        Projection::Mlp(m) => m.backward(
            &tr.y,
            tr.mlp.as_ref().expect("MLP trace cached in forward"),
            &g_v,
            proj_grads.as_mut().expect("grads allocated for MLP"),
        ),
    };
    // Through the encoder's linear map (skipped when frozen or absent).
    if let Some(g) = enc_grads.as_mut() {
        let lin = enc.linear().expect("grads only allocated for linear encoders");
        lin.backward(&tr.x, &g_y, &mut g.w, &mut g.b);
    }
}

/// Chains `dL/dS` (from a loss over the batch similarity grid) back to
/// parameter gradients. `grad_s[i][j]` must correspond to
/// `dot(audio[i], text[j])` of the cached unit-norm embeddings.
pub fn backward_pair_batch(
    params: &TowerParams,
    trace: &BatchTrace,
    grad_s: &Matrix<f64>,
) -> Result<TowerGrads> {
    let b = trace.batch_size();
    if grad_s.rows() != b || grad_s.cols() != b {
        return Err(GlapError::Shape(format!(
            "grad_s is {}x{}, batch is {b}",
            grad_s.rows(),
            grad_s.cols()
        )));
    }
    let d = trace.audio_emb.cols();
    let mut grads = TowerGrads::zeros_for(params);

    for i in 0..b {
        // dL/d audio_i = sum_j grad_s[i][j] * text_j.
        let mut g_e = vec![0.0f64; d];
        for j in 0..b {
            let w = grad_s.get(i, j);
            if w != 0.0 {
                let t = trace.text_emb.row(j);
                for k in 0..d {
                    g_e[k] += w * t[k];
                }
            }
        }
        backward_record(
            &params.audio_encoder,
            &params.proj_a,
            &trace.audio[i],
            trace.audio_emb.row(i),
            &g_e,
            &mut grads.audio_encoder,
            &mut grads.proj_a,
        );
    }
    for j in 0..b {
        // dL/d text_j = sum_i grad_s[i][j] * audio_i.
        let mut g_e = vec![0.0f64; d];
        for i in 0..b {
            let w = grad_s.get(i, j);
            if w != 0.0 {
                let a = trace.audio_emb.row(i);
                for k in 0..d {
                    g_e[k] += w * a[k];
                }
            }
        }
        backward_record(
            &params.text_encoder,
            &params.proj_t,
            &trace.text[j],
            trace.text_emb.row(j),
            &g_e,
            &mut grads.text_encoder,
            &mut grads.proj_t,
        );
    }
    Ok(grads)
}
