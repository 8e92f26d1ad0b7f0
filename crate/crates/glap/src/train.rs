//! Optimizer, learning-rate schedule, and the training loop.
//!
//! The loop is single-stream and deterministic: a fixed (seed, config,
//! manifest) triple reproduces every batch, every update, and therefore
//! byte-identical metrics and checkpoints.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::sampler::{SamplerState, SamplingStrategy};
use crate::data::{FeatureStore, ManifestRecord};
use crate::embedding::{cosine_similarity_matrix, sign_matrix};
use crate::error::{GlapError, Result};
use crate::loss::{infonce_loss, siglip_loss, LogitForm, LossOutput};
use crate::model::checkpoint::save_checkpoint;
use crate::model::encoder::fnv1a64;
use crate::model::{
    backward_pair_batch, forward_pair_batch_traced, ModelConfig, PairExample, TowerGrads,
    TowerParams,
};

/// Warmup-cosine schedule: linear ramp 0 -> peak over `warmup_steps`,
/// then cosine decay to `floor_lr` at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub peak_lr: f64,
    pub floor_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl Default for ScheduleConfig {
    /// Ramp over two 10k-step epochs to 1e-4, decay to 1e-5 at 200k.
    fn default() -> Self {
        Self {
            peak_lr: 1e-4,
            floor_lr: 1e-5,
            warmup_steps: 20_000,
            total_steps: 200_000,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.floor_lr.is_finite() && self.peak_lr.is_finite())
            || self.floor_lr < 0.0
            || self.floor_lr > self.peak_lr
        {
            return Err(GlapError::Config(format!(
                "need 0 <= floor_lr <= peak_lr, got floor {} peak {}",
                self.floor_lr, self.peak_lr
            )));
        }
        if self.warmup_steps == 0 || self.warmup_steps >= self.total_steps {
            return Err(GlapError::Config(format!(
                "need 0 < warmup_steps < total_steps, got warmup {} total {}",
                self.warmup_steps, self.total_steps
            )));
        }
        Ok(())
    }
}

/// Learning rate at `step`; steps past `total_steps` clamp to the floor.
pub fn lr_at(step: u64, cfg: &ScheduleConfig) -> f64 {
    if step >= cfg.total_steps {
        return cfg.floor_lr;
    }
    if step < cfg.warmup_steps {
        return cfg.peak_lr * step as f64 / cfg.warmup_steps as f64;
    }
    let progress = (step - cfg.warmup_steps) as f64 / (cfg.total_steps - cfg.warmup_steps) as f64;
    cfg.floor_lr + (cfg.peak_lr - cfg.floor_lr) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    /// Flat learning rate; handy for overfit probes.
    Constant { lr: f64 },
    WarmupCosine(ScheduleConfig),
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule::WarmupCosine(ScheduleConfig::default())
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        match self {
            Schedule::Constant { lr } => {
                if !(lr.is_finite() && *lr >= 0.0) {
                    return Err(GlapError::Config(format!(
                        "constant lr must be finite and non-negative, got {lr}"
                    )));
                }
                Ok(())
            }
            Schedule::WarmupCosine(cfg) => cfg.validate(),
        }
    }

    pub fn lr(&self, step: u64) -> f64 {
        match self {
            Schedule::Constant { lr } => *lr,
            Schedule::WarmupCosine(cfg) => lr_at(step, cfg),
        }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Per-tensor Adam moments plus the shared step counter. Moments are
/// kept in f64 and keyed by tensor name.
#[derive(Debug, Clone, Default)]
pub struct OptimizerState {
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl OptimizerState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update on a single tensor: standard bias-corrected rule.
/// `t` is the 1-based step index.
pub(crate) fn adam_update(
    theta: &mut [f32],
    g: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
) {
    let bc1 = 1.0 - ADAM_BETA1.powi(t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(t as i32);
    for k in 0..theta.len() {
        m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * g[k];
        v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * g[k] * g[k];
        let m_hat = m[k] / bc1;
        let v_hat = v[k] / bc2;
        theta[k] = (theta[k] as f64 - lr * m_hat / (v_hat.sqrt() + ADAM_EPS)) as f32;
    }
}

/// Applies one optimizer step to every trainable tensor. `lr_for` maps a
/// tensor name to its learning rate (the loss scalars typically get a
/// scaled rate). Non-finite gradients abort before any tensor moves.
pub fn adam_step(
    params: &mut TowerParams,
    grads: &TowerGrads,
    opt: &mut OptimizerState,
    lr_for: impl Fn(&str) -> f64,
) -> Result<()> {
    let mut grad_list: Vec<(String, Vec<f64>)> = Vec::new();
    grads.for_each(&mut |name, g| grad_list.push((name.to_string(), g.to_vec())));
    for (name, g) in &grad_list {
        if let Some(pos) = g.iter().position(|v| !v.is_finite()) {
            return Err(GlapError::Numeric(format!(
                "non-finite gradient in {name}[{pos}]"
            )));
        }
    }

    opt.step += 1;
    let t = opt.step;
    let mut tensors: BTreeMap<String, &mut [f32]> =
        params.trainable_tensors_mut().into_iter().collect();
    for (name, g) in &grad_list {
        let theta = tensors.remove(name).ok_or_else(|| {
            GlapError::Config(format!("gradient {name:?} has no matching trainable tensor"))
        })?;
        if theta.len() != g.len() {
            return Err(GlapError::Shape(format!(
                "gradient {name:?} has {} values, tensor has {}",
                g.len(),
                theta.len()
            )));
        }
        let slot = self_moments(&mut opt.moments, name, g.len());
        adam_update(theta, g, &mut slot.m, &mut slot.v, t, lr_for(name));
    }
    Ok(())
}

fn self_moments<'a>(
    moments: &'a mut BTreeMap<String, Moments>,
    name: &str,
    len: usize,
) -> &'a mut Moments {
    moments
        .entry(name.to_string())
        .or_insert_with(|| Moments { m: vec![0.0; len], v: vec![0.0; len] })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Sigmoid,
    Infonce,
}

impl Default for LossKind {
    fn default() -> Self {
        LossKind::Sigmoid
    }
}

/// Full training configuration; serialized verbatim into `run.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub seed: u64,
    pub loss: LossKind,
    pub logit_form: LogitForm,
    /// Multiplier on the learning rate of the loss scalars (u, beta).
    pub loss_param_lr_scale: f64,
    pub strategy: SamplingStrategy,
    pub schedule: Schedule,
    /// Optional global-norm gradient clip; off by default.
    pub clip_norm: Option<f64>,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            epochs: 1,
            steps_per_epoch: 100,
            seed: 0,
            loss: LossKind::Sigmoid,
            logit_form: LogitForm::SiglipConsistent,
            loss_param_lr_scale: 1.0,
            strategy: SamplingStrategy::PerExampleUniform,
            schedule: Schedule::default(),
            clip_norm: None,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 4 {
            return Err(GlapError::Config(format!(
                "batch_size must be at least 4, got {}",
                self.batch_size
            )));
        }
        if self.epochs > 0 && self.steps_per_epoch == 0 {
            return Err(GlapError::Config("steps_per_epoch must be at least 1".into()));
        }
        if !(self.loss_param_lr_scale.is_finite() && self.loss_param_lr_scale >= 0.0) {
            return Err(GlapError::Config(format!(
                "loss_param_lr_scale must be finite and non-negative, got {}",
                self.loss_param_lr_scale
            )));
        }
        if let Some(c) = self.clip_norm {
            if !(c.is_finite() && c > 0.0) {
                return Err(GlapError::Config(format!(
                    "clip_norm must be finite and positive, got {c}"
                )));
            }
        }
        self.schedule.validate()?;
        self.model.validate()
    }

    /// Stable hash of the serialized config, recorded in checkpoints.
    pub fn config_hash(&self) -> String {
        let body = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", fnv1a64(body.as_bytes()))
    }
}

/// Salt XORed into the run seed for the batch sampler, so drawing
/// batches and initializing weights use unrelated streams.
pub const SAMPLER_SEED_SALT: u64 = 0xDA7A_5EED;

/// One metrics-log line; the log is JSON lines, one row per step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub tau: f64,
    pub beta: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub params: TowerParams,
    pub steps_run: u64,
    pub final_loss: Option<f64>,
    pub final_checkpoint: PathBuf,
    pub metrics_path: PathBuf,
}

/// Sampled batches repeat records (sampling is with replacement), but
/// embedding batches require unique ids; suffix repeats with their
/// occurrence index.
fn batch_examples(
    records: &[ManifestRecord],
    store: &FeatureStore,
    batch: &[usize],
) -> Result<Vec<PairExample>> {
    let mut seen: BTreeMap<usize, usize> = BTreeMap::new();
    let mut picked = Vec::with_capacity(batch.len());
    for &idx in batch {
        let occurrence = seen.entry(idx).or_insert(0);
        picked.push((idx, *occurrence));
        *occurrence += 1;
    }
    picked
        .into_iter()
        .map(|(idx, occ)| {
            let r = &records[idx];
            let features = store
                .features(&r.feature_ref)
                .map_err(|e| GlapError::record(&r.id, e))?;
            let id = if occ == 0 {
                r.id.clone()
            } else {
                format!("{}@{occ}", r.id)
            };
            Ok(PairExample { id, features, caption: r.caption.clone() })
        })
        .collect()
}

/// Runs `epochs x steps_per_epoch` optimizer steps over the manifest:
/// sample, forward, loss, backward, Adam. Appends one metrics row per
/// step to `metrics.jsonl`, writes a checkpoint per epoch
/// (`ckpt-epoch-NNNN`) plus `ckpt-final`, and returns the final state.
pub fn train(
    records: &[ManifestRecord],
    store: &FeatureStore,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| GlapError::io(out_dir, e))?;

    let mut params = TowerParams::init(&cfg.model, cfg.seed)?;
    let mut sampler = SamplerState::new(records, cfg.strategy, cfg.seed ^ SAMPLER_SEED_SALT)?;
    let mut opt = OptimizerState::new();
    let psi = sign_matrix(cfg.batch_size)?;
    let config_hash = cfg.config_hash();

    let metrics_path = out_dir.join("metrics.jsonl");
    let metrics_file =
        std::fs::File::create(&metrics_path).map_err(|e| GlapError::io(&metrics_path, e))?;
    let mut metrics = std::io::BufWriter::new(metrics_file);

    let lr_scale = cfg.loss_param_lr_scale;
    let mut final_loss = None;
    let mut global_step: u64 = 0;

    for epoch in 0..cfg.epochs {
        for _ in 0..cfg.steps_per_epoch {
            let lr = cfg.schedule.lr(global_step);
            let batch = sampler.sample_batch(cfg.batch_size)?;
            let examples = batch_examples(records, store, &batch)?;

            let (a_batch, t_batch, trace) = forward_pair_batch_traced(&examples, &params)?;
            let s = cosine_similarity_matrix(&a_batch, &t_batch)?;
            let out: LossOutput = match cfg.loss {
                LossKind::Sigmoid => siglip_loss(&s, &psi, params.loss_params(), cfg.logit_form)?,
                LossKind::Infonce => infonce_loss(&s, params.loss_params().tau())?,
            };
            if !out.loss.is_finite() {
                return Err(GlapError::Numeric(format!(
                    "non-finite loss at step {}",
                    global_step + 1
                )));
            }

            let mut grads = backward_pair_batch(&params, &trace, &out.grad_s)?;
            grads.grad_u = out.grad_u;
            grads.grad_beta = out.grad_beta;
            if let Some(clip) = cfg.clip_norm {
                clip_global_norm(&mut grads, clip);
            }
            adam_step(&mut params, &grads, &mut opt, |name| {
                if name.starts_with("loss.") {
                    lr * lr_scale
                } else {
                    lr
                }
            })?;

            global_step += 1;
            final_loss = Some(out.loss);
            let row = MetricsRow {
                step: global_step,
                lr,
                loss: out.loss,
                tau: params.loss_params().tau(),
                beta: params.loss_params().beta(),
            };
            let line = serde_json::to_string(&row)
                .map_err(|e| GlapError::Config(format!("serialize metrics: {e}")))?;
            writeln!(metrics, "{line}").map_err(|e| GlapError::io(&metrics_path, e))?;
        }
        save_checkpoint(
            &out_dir.join(format!("ckpt-epoch-{:04}", epoch + 1)),
            &params,
            global_step,
            &config_hash,
            cfg.logit_form,
        )?;
    }
    metrics.flush().map_err(|e| GlapError::io(&metrics_path, e))?;

    let final_dir = out_dir.join("ckpt-final");
    save_checkpoint(&final_dir, &params, global_step, &config_hash, cfg.logit_form)?;
    Ok(TrainOutcome {
        params,
        steps_run: global_step,
        final_loss,
        final_checkpoint: final_dir,
        metrics_path,
    })
}

fn clip_global_norm(grads: &mut TowerGrads, clip: f64) {
    let mut sq = 0.0f64;
    grads.for_each(&mut |_, g| {
        for &v in g {
            sq += v * v;
        }
    });
    let norm = sq.sqrt();
    if norm > clip {
        grads.scale(clip / norm);
    }
}
