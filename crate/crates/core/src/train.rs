//! Losses, the Adam optimizer, and the training loop.
//!
//! Speech-prediction rows are trained against a label-smoothed target over
//! the speech clusters (a KL objective); boundary and text rows use plain
//! cross-entropy. Each kind is averaged over its own rows, then weighted.

use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{time_mask, AugmentConfig};
use crate::corpus::{Corpus, Utterance};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::model::{backward, forward_batch, init_params, save_checkpoint, Mode, ModelConfig, ModelParams, Scalar};
use crate::seed::rng_for;
use crate::seqlayout::{
    build_bti_layout, build_mask, build_nonstreaming_layout, build_tti_layout, AttentionMask, DeltaPolicy,
    LayoutKind, LayoutSequence, LossKind, MaskVariant, TextPositionMode,
};
use crate::streamdecode::DecodeConfig;
use crate::tokens::{TokenId, VocabSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothingSpec {
    epsilon: f64,
    support: Range<TokenId>,
    vocab_size: usize,
}

impl SmoothingSpec {
    pub fn new(epsilon: f64, support: Range<TokenId>, vocab_size: usize) -> Result<Self> {
        if !(0.0..1.0).contains(&epsilon) {
            return Err(Error::Config(format!("smoothing epsilon must lie in [0, 1), got {epsilon}")));
        }
        if support.len() < 2 || support.end as usize > vocab_size {
            return Err(Error::Config(format!("smoothing support {support:?} invalid for vocab {vocab_size}")));
        }
        Ok(Self { epsilon, support, vocab_size })
    }

    /// Smoothing over the speech clusters of `vocab`.
    pub fn speech(vocab: &VocabSpec, epsilon: f64) -> Result<Self> {
        Self::new(epsilon, vocab.speech_range(), vocab.total() as usize)
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn support(&self) -> Range<TokenId> {
        self.support.clone()
    }
}

/// Soft label: `1 - eps` on the target, the rest spread evenly over the
/// other support ids, zero outside the support.
pub fn smoothed_target(target: TokenId, spec: &SmoothingSpec) -> Result<Vec<f64>> {
    if !spec.support.contains(&target) {
        return Err(Error::TargetOutsideSupport(target));
    }
    let mut q = vec![0.0; spec.vocab_size];
    let off = spec.epsilon / (spec.support.len() - 1) as f64;
    for id in spec.support.clone() {
        q[id as usize] = off;
    }
    q[target as usize] = 1.0 - spec.epsilon;
    Ok(q)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub speech: f64,
    pub boundary: f64,
    pub text: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { speech: 1.0, boundary: 1.0, text: 1.0 }
    }
}

/// Unweighted per-kind means and row counts.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub speech: f64,
    pub boundary: f64,
    pub text: f64,
    pub n_speech: usize,
    pub n_boundary: usize,
    pub n_text: usize,
}

#[derive(Debug, Clone)]
pub struct SequenceLoss<F> {
    pub loss: f64,
    pub breakdown: LossBreakdown,
    /// Gradient of `loss` with respect to the logits, row-major.
    pub grad: Vec<F>,
}

fn log_softmax<F: Scalar>(row: &[F]) -> Vec<f64> {
    let max = row.iter().map(|x| x.f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x.f64() - max).exp()).sum::<f64>().ln();
    row.iter().map(|x| x.f64() - lse).collect()
}

pub fn sequence_loss<F: Scalar>(
    logits: &[F],
    layout: &LayoutSequence,
    spec: &SmoothingSpec,
    weights: &LossWeights,
) -> Result<SequenceLoss<F>> {
    let v = spec.vocab_size;
    let n = layout.len();
    if logits.len() != n * v {
        return Err(Error::Shape(format!("{} logits for {n} rows of {v}", logits.len())));
    }
    let mut b = LossBreakdown::default();
    for kind in &layout.loss_kind {
        match kind {
            LossKind::SpeechCE => b.n_speech += 1,
            LossKind::BoundaryCE => b.n_boundary += 1,
            LossKind::TextCE => b.n_text += 1,
            LossKind::None => {}
        }
    }
    if b.n_speech + b.n_boundary + b.n_text == 0 {
        return Err(Error::NoLossPositions);
    }
    let scale = |count: usize, w: f64| if count == 0 { 0.0 } else { w / count as f64 };
    let (s_speech, s_boundary, s_text) = (
        scale(b.n_speech, weights.speech),
        scale(b.n_boundary, weights.boundary),
        scale(b.n_text, weights.text),
    );
    let mut grad = vec![F::zero(); n * v];
    for i in 0..n {
        let kind = layout.loss_kind[i];
        if kind == LossKind::None {
            continue;
        }
        let target = layout.targets[i].ok_or_else(|| Error::Shape(format!("loss row {i} without target")))?;
        let lp = log_softmax(&logits[i * v..(i + 1) * v]);
        let g = &mut grad[i * v..(i + 1) * v];
        let (value, s) = if kind == LossKind::SpeechCE {
            let q = smoothed_target(target, spec)?;
            let kl: f64 = q.iter().zip(&lp).filter(|(q, _)| **q > 0.0).map(|(q, l)| q * (q.ln() - l)).sum();
            for j in 0..v {
                g[j] = F::of(s_speech * (lp[j].exp() - q[j]));
            }
            (kl, &mut b.speech)
        } else {
            let t = target as usize;
            let w = if kind == LossKind::BoundaryCE { s_boundary } else { s_text };
            for j in 0..v {
                let onehot = if j == t { 1.0 } else { 0.0 };
                g[j] = F::of(w * (lp[j].exp() - onehot));
            }
            (-lp[t], if kind == LossKind::BoundaryCE { &mut b.boundary } else { &mut b.text })
        };
        *s += value;
    }
    let mean = |sum: f64, c: usize| if c == 0 { 0.0 } else { sum / c as f64 };
    b.speech = mean(b.speech, b.n_speech);
    b.boundary = mean(b.boundary, b.n_boundary);
    b.text = mean(b.text, b.n_text);
    let loss = weights.speech * b.speech + weights.boundary * b.boundary + weights.text * b.text;
    Ok(SequenceLoss { loss, breakdown: b, grad })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    pub m: Vec<F>,
    pub v: Vec<F>,
    pub t: u64,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(n: usize) -> Self {
        Self { m: vec![F::zero(); n], v: vec![F::zero(); n], t: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub grad_norm: f64,
    /// Factor the gradient was multiplied by before the update.
    pub clip_scale: f64,
}

/// One bias-corrected Adam update after global-norm clipping. A non-finite
/// gradient leaves parameters and state untouched.
pub fn adam_step<F: Scalar>(
    params: &mut [F],
    grads: &[F],
    state: &mut AdamState<F>,
    hyper: &AdamHyper,
    lr: f64,
) -> Result<StepStats> {
    if params.len() != grads.len() || state.m.len() != grads.len() {
        return Err(Error::Shape(format!("{} params, {} grads, {} state", params.len(), grads.len(), state.m.len())));
    }
    let norm = grads.iter().map(|g| g.f64() * g.f64()).sum::<f64>().sqrt();
    if !norm.is_finite() {
        return Err(Error::NonFiniteGradient);
    }
    let clip_scale = if hyper.clip_norm > 0.0 && norm > hyper.clip_norm { hyper.clip_norm / norm } else { 1.0 };
    state.t += 1;
    let c1 = 1.0 - hyper.beta1.powi(state.t as i32);
    let c2 = 1.0 - hyper.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i].f64() * clip_scale;
        let m = hyper.beta1 * state.m[i].f64() + (1.0 - hyper.beta1) * g;
        let v = hyper.beta2 * state.v[i].f64() + (1.0 - hyper.beta2) * g * g;
        state.m[i] = F::of(m);
        state.v[i] = F::of(v);
        let update = lr * (m / c1) / ((v / c2).sqrt() + hyper.eps);
        params[i] = F::of(params[i].f64() - update);
    }
    Ok(StepStats { grad_norm: norm, clip_scale })
}

/// Shape of the learning rate after warmup.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from the peak down to zero at the last planned step.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub lr_schedule: LrSchedule,
    pub adam: AdamHyper,
    pub weights: LossWeights,
    pub smoothing_epsilon: f64,
    pub augment: AugmentConfig,
    pub delta_policy: DeltaPolicy,
    pub layout: LayoutKind,
    /// Attention mask; by default right-chunk for BTI, causal for TTI and
    /// global for the non-streaming layout.
    pub mask: Option<MaskVariant>,
    pub text_positions: TextPositionMode,
    /// TTI: frames between a segment end and its text token.
    pub tti_delay: usize,
    pub seed: u64,
    /// Threads for batch assembly.
    pub workers: usize,
    /// Decoder used for the per-epoch held-out evaluation.
    pub decode: DecodeConfig,
    /// Held-out utterances decoded per epoch; `None` means all.
    pub dev_limit: Option<usize>,
    pub checkpoint_every_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            learning_rate: 2e-3,
            warmup_steps: 100,
            lr_schedule: LrSchedule::Constant,
            adam: AdamHyper::default(),
            weights: LossWeights::default(),
            smoothing_epsilon: 0.1,
            augment: AugmentConfig::default(),
            delta_policy: DeltaPolicy::Dynamic,
            layout: LayoutKind::Bti,
            mask: None,
            text_positions: TextPositionMode::StreamPoint,
            tti_delay: 0,
            seed: 1,
            workers: 1,
            decode: DecodeConfig::default(),
            dev_limit: None,
            checkpoint_every_epoch: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.workers == 0 {
            return Err(Error::Config("epochs, batch_size and workers must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        let w = self.weights;
        if [w.speech, w.boundary, w.text].iter().any(|x| !(*x >= 0.0 && x.is_finite())) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.adam.clip_norm < 0.0 {
            return Err(Error::Config("clip_norm must be non-negative".into()));
        }
        self.augment.validate()?;
        self.decode.validate()?;
        if self.decode.mode != self.layout {
            return Err(Error::Config("decode mode must match the training layout".into()));
        }
        Ok(())
    }

    pub fn mask_variant(&self) -> MaskVariant {
        self.mask.unwrap_or(match self.layout {
            LayoutKind::Bti => MaskVariant::RightChunk,
            LayoutKind::Tti => MaskVariant::Causal,
            LayoutKind::NonStreaming => MaskVariant::Global,
        })
    }

    /// Learning rate for optimizer step `step` of `total` planned steps.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let warm = if self.warmup_steps == 0 { 1.0 } else { ((step + 1) as f64 / self.warmup_steps as f64).min(1.0) };
        let decay = match self.lr_schedule {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine => {
                let span = total.saturating_sub(self.warmup_steps).max(1) as f64;
                let t = (step.saturating_sub(self.warmup_steps) as f64 / span).min(1.0);
                0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        };
        self.learning_rate * warm * decay
    }
}

/// Random stream tags, so each consumer draws from its own generator.
const STREAM_INIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_AUGMENT: u64 = 3;
const STREAM_DROPOUT: u64 = 4;

/// Builds the training example for one utterance: augmentation, layout,
/// time masking, and the attention mask.
pub fn prepare_example<R: rand::Rng>(
    config: &TrainConfig,
    utt: &Utterance,
    vocab: &VocabSpec,
    rng: &mut R,
) -> Result<(LayoutSequence, AttentionMask)> {
    let aug = config.augment.apply(utt, rng);
    let mut layout = match config.layout {
        LayoutKind::Bti => build_bti_layout(&aug, config.delta_policy, config.text_positions, vocab)?,
        LayoutKind::Tti => build_tti_layout(&aug, config.tti_delay, vocab)?,
        LayoutKind::NonStreaming => build_nonstreaming_layout(&aug, vocab)?,
    };
    layout.inputs = time_mask(&layout.inputs, vocab, rng, config.augment.time_mask_p);
    let mask = build_mask(&layout, config.mask_variant())?;
    Ok((layout, mask))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub speech_loss: f64,
    pub boundary_loss: f64,
    pub text_loss: f64,
    pub dev_cer: Option<f64>,
    pub latency_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Loss of the first batch before any update.
    pub initial_loss: f64,
    pub initial_breakdown: LossBreakdown,
    pub epochs: Vec<EpochMetrics>,
    pub steps: usize,
    pub skipped_steps: usize,
    /// Examples dropped for exceeding the position budget, over all epochs.
    pub skipped_long: usize,
    pub checkpoints: Vec<PathBuf>,
}

pub const METRICS_HEADER: &str = "epoch\tspeech_loss\tboundary_loss\ttext_loss\tdev_cer\tlatency_mean";

impl TrainReport {
    pub fn metrics_tsv(&self) -> String {
        let opt = |x: Option<f64>| x.map_or("NA".to_string(), |v| format!("{v:.6}"));
        let mut s = format!("{METRICS_HEADER}\n");
        for e in &self.epochs {
            s.push_str(&format!(
                "{}\t{:.6}\t{:.6}\t{:.6}\t{}\t{}\n",
                e.epoch,
                e.speech_loss,
                e.boundary_loss,
                e.text_loss,
                opt(e.dev_cer),
                opt(e.latency_mean)
            ));
        }
        s
    }
}

pub struct TrainOutcome {
    pub params: ModelParams<f32>,
    pub report: TrainReport,
}

#[derive(Default)]
struct Running {
    loss: f64,
    speech: f64,
    boundary: f64,
    text: f64,
    batches: usize,
}

/// Trains a fresh model. With `out_dir`, writes `metrics.tsv`, a
/// checkpoint per epoch (`epoch_NNN`) and the final one (`final`).
pub fn train(
    config: &TrainConfig,
    corpus: &Corpus,
    model: &ModelConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    model.validate()?;
    let vocab = corpus.vocab();
    if model.vocab != vocab {
        return Err(Error::VocabMismatch(format!("model {:?} vs corpus {:?}", model.vocab, vocab)));
    }
    if corpus.train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let spec = SmoothingSpec::speech(&vocab, config.smoothing_epsilon)?;
    let mut params = init_params::<f32>(model, rng_seed(config.seed, STREAM_INIT))?;
    let mut adam = AdamState::new(params.len());
    let mut dropout_rng = rng_for(config.seed, &[STREAM_DROPOUT]);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut report = TrainReport {
        initial_loss: f64::NAN,
        initial_breakdown: LossBreakdown::default(),
        epochs: Vec::new(),
        steps: 0,
        skipped_steps: 0,
        skipped_long: 0,
        checkpoints: Vec::new(),
    };
    let dev: &[Utterance] = match config.dev_limit {
        Some(n) => &corpus.test[..n.min(corpus.test.len())],
        None => &corpus.test,
    };

    let total_steps = config.epochs * corpus.train.len().div_ceil(config.batch_size);
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..corpus.train.len()).collect();
        order.shuffle(&mut rng_for(config.seed, &[STREAM_SHUFFLE, epoch as u64]));
        let mut running = Running::default();
        for chunk in order.chunks(config.batch_size) {
            let prepared: Vec<Result<(LayoutSequence, AttentionMask)>> = pool.install(|| {
                chunk
                    .par_iter()
                    .map(|&ix| {
                        let mut rng = rng_for(config.seed, &[STREAM_AUGMENT, epoch as u64, ix as u64]);
                        prepare_example(config, &corpus.train[ix], &vocab, &mut rng)
                    })
                    .collect()
            });
            let mut batch = Vec::with_capacity(prepared.len());
            for item in prepared {
                let (layout, mask) = item?;
                if layout.max_position() >= model.max_positions {
                    report.skipped_long += 1;
                } else {
                    batch.push((layout, mask));
                }
            }
            if batch.is_empty() {
                continue;
            }
            let items: Vec<(&LayoutSequence, &AttentionMask)> = batch.iter().map(|(l, m)| (l, m)).collect();
            let out = match forward_batch(&params, &items, Mode::Train(&mut dropout_rng)) {
                Ok(o) => o,
                Err(Error::NonFinite { .. }) => {
                    report.skipped_steps += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let inv = 1.0 / batch.len() as f64;
            let mut dlogits = Vec::with_capacity(out.logits.len());
            let mut step = Running::default();
            for (s, (layout, _)) in batch.iter().enumerate() {
                let l = sequence_loss(out.sequence(s), layout, &spec, &config.weights)?;
                step.loss += l.loss * inv;
                step.speech += l.breakdown.speech * inv;
                step.boundary += l.breakdown.boundary * inv;
                step.text += l.breakdown.text * inv;
                dlogits.extend(l.grad.iter().map(|g| g * inv as f32));
            }
            if report.steps == 0 && report.skipped_steps == 0 {
                report.initial_loss = step.loss;
                report.initial_breakdown =
                    LossBreakdown { speech: step.speech, boundary: step.boundary, text: step.text, ..Default::default() };
            }
            let tape = out.tape.expect("training forward records a tape");
            let grads = backward(tape, &dlogits)?;
            match adam_step(&mut params.data, &grads, &mut adam, &config.adam, config.lr_at(report.steps, total_steps)) {
                Ok(_) => report.steps += 1,
                Err(Error::NonFiniteGradient) => {
                    report.skipped_steps += 1;
                    continue;
                }
                Err(e) => return Err(e),
            }
            running.loss += step.loss;
            running.speech += step.speech;
            running.boundary += step.boundary;
            running.text += step.text;
            running.batches += 1;
        }
        let nb = running.batches.max(1) as f64;
        let (dev_cer, latency_mean) = if dev.is_empty() {
            (None, None)
        } else {
            let (r, _) = evaluate(&params, vocab, dev, &config.decode)?;
            (Some(r.cer), Some(r.latency.mean))
        };
        report.epochs.push(EpochMetrics {
            epoch: epoch + 1,
            loss: running.loss / nb,
            speech_loss: running.speech / nb,
            boundary_loss: running.boundary / nb,
            text_loss: running.text / nb,
            dev_cer,
            latency_mean,
        });
        if let Some(dir) = out_dir {
            if config.checkpoint_every_epoch {
                let (json, _) = save_checkpoint(&params, dir, &format!("epoch_{:03}", epoch + 1))?;
                report.checkpoints.push(json);
            }
            let path = dir.join("metrics.tsv");
            fs::write(&path, report.metrics_tsv()).map_err(|e| Error::io(&path, e))?;
        }
    }
    if let Some(dir) = out_dir {
        let (json, _) = save_checkpoint(&params, dir, "final")?;
        report.checkpoints.push(json);
    }
    Ok(TrainOutcome { params, report })
}

fn rng_seed(base: u64, stream: u64) -> u64 {
    crate::seed::derive_seed(base, &[stream])
}
