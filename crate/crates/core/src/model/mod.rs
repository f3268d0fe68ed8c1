//! Decoder-only transformer with pre-norm residual blocks, learned absolute
//! position embeddings and a two-way modality embedding.

mod checkpoint;
mod forward;
mod scalar;
mod step;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use forward::{backward, forward, forward_batch, ForwardOutput, Mode, Tape};
pub use scalar::Scalar;
pub use step::{forward_step, speech_step, text_step, StepCache, StreamCache};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng_for;
use crate::tokens::VocabSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab: VocabSpec,
    pub max_positions: usize,
    pub dropout_p: f64,
}

impl ModelConfig {
    /// Desk-scale defaults for a given vocabulary.
    pub fn desk(vocab: VocabSpec) -> Self {
        Self { n_layers: 2, d_model: 64, n_heads: 8, d_ff: 128, vocab, max_positions: 256, dropout_p: 0.1 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_positions == 0 {
            return Err(Error::Config("max_positions must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("dropout_p must lie in [0, 1), got {}", self.dropout_p)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.total() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct LayerOffsets {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub w_qkv: usize,
    pub b_qkv: usize,
    pub w_o: usize,
    pub b_o: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w_1: usize,
    pub b_1: usize,
    pub w_2: usize,
    pub b_2: usize,
}

/// Flat parameter layout: every tensor is a contiguous row-major slice.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    tensors: Vec<TensorInfo>,
    pub(crate) tok: usize,
    pub(crate) pos: usize,
    pub(crate) modality: usize,
    pub(crate) layers: Vec<LayerOffsets>,
    pub(crate) lnf_g: usize,
    pub(crate) lnf_b: usize,
    pub(crate) w_out: usize,
    pub(crate) b_out: usize,
    total: usize,
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let mut tensors = Vec::new();
        let mut total = 0;
        let mut add = |name: String, shape: Vec<usize>| {
            let offset = total;
            total += shape.iter().product::<usize>();
            tensors.push(TensorInfo { name, shape, offset });
            offset
        };
        let (d, f, v) = (cfg.d_model, cfg.d_ff, cfg.vocab_size());
        let tok = add("embed.token".into(), vec![v, d]);
        let pos = add("embed.position".into(), vec![cfg.max_positions, d]);
        let modality = add("embed.modality".into(), vec![2, d]);
        let layers = (0..cfg.n_layers)
            .map(|l| LayerOffsets {
                ln1_g: add(format!("layers.{l}.ln1.gain"), vec![d]),
                ln1_b: add(format!("layers.{l}.ln1.offset"), vec![d]),
                w_qkv: add(format!("layers.{l}.attn.qkv.weight"), vec![d, 3 * d]),
                b_qkv: add(format!("layers.{l}.attn.qkv.bias"), vec![3 * d]),
                w_o: add(format!("layers.{l}.attn.out.weight"), vec![d, d]),
                b_o: add(format!("layers.{l}.attn.out.bias"), vec![d]),
                ln2_g: add(format!("layers.{l}.ln2.gain"), vec![d]),
                ln2_b: add(format!("layers.{l}.ln2.offset"), vec![d]),
                w_1: add(format!("layers.{l}.ffn.up.weight"), vec![d, f]),
                b_1: add(format!("layers.{l}.ffn.up.bias"), vec![f]),
                w_2: add(format!("layers.{l}.ffn.down.weight"), vec![f, d]),
                b_2: add(format!("layers.{l}.ffn.down.bias"), vec![d]),
            })
            .collect();
        let lnf_g = add("final_ln.gain".into(), vec![d]);
        let lnf_b = add("final_ln.offset".into(), vec![d]);
        let w_out = add("output.weight".into(), vec![d, v]);
        let b_out = add("output.bias".into(), vec![v]);
        Self { tensors, tok, pos, modality, layers, lnf_g, lnf_b, w_out, b_out, total }
    }

    pub fn tensors(&self) -> &[TensorInfo] {
        &self.tensors
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn find(&self, name: &str) -> Option<&TensorInfo> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F> {
    config: ModelConfig,
    layout: ParamLayout,
    pub data: Vec<F>,
}

impl<F: Scalar> ModelParams<F> {
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        let data = vec![F::zero(); layout.total()];
        Ok(Self { config, layout, data })
    }

    pub fn from_data(config: ModelConfig, data: Vec<F>) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        if data.len() != layout.total() {
            return Err(Error::Shape(format!("{} values for {} parameters", data.len(), layout.total())));
        }
        Ok(Self { config, layout, data })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn tensor(&self, name: &str) -> Option<&[F]> {
        self.layout.find(name).map(|t| &self.data[t.offset..t.offset + t.len()])
    }

    pub(crate) fn slice(&self, offset: usize, len: usize) -> &[F] {
        &self.data[offset..offset + len]
    }

    pub fn cast<G: Scalar>(&self) -> ModelParams<G> {
        ModelParams {
            config: self.config.clone(),
            layout: self.layout.clone(),
            data: self.data.iter().map(|v| G::of(v.f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Scaled-normal weights (std `1/sqrt(d_model)`), zero biases, unit gains.
/// The learned position table starts from sinusoids of the same scale.
pub fn init_params<F: Scalar>(config: &ModelConfig, seed: u64) -> Result<ModelParams<F>> {
    let mut params = ModelParams::<F>::zeros(config.clone())?;
    let normal = Normal::new(0.0, 1.0 / (config.d_model as f64).sqrt()).expect("valid std");
    let tensors = params.layout.tensors.clone();
    for (ix, t) in tensors.iter().enumerate() {
        let slot = &mut params.data[t.offset..t.offset + t.len()];
        if t.name.ends_with(".gain") {
            slot.iter_mut().for_each(|v| *v = F::one());
        } else if t.name == "embed.position" {
            sinusoid_table(slot, config.d_model);
        } else if t.shape.len() == 2 {
            let mut rng = rng_for(seed, &[0x1417, ix as u64]);
            slot.iter_mut().for_each(|v| *v = F::of(normal.sample(&mut rng)));
        }
    }
    Ok(params)
}

/// Rows `[sin(p w_0), cos(p w_0), sin(p w_1), ...]` with `w_i = 10000^(-2i/d)`,
/// scaled so each row has squared norm 1 like a scaled-normal row.
fn sinusoid_table<F: Scalar>(slot: &mut [F], d: usize) {
    let amp = (2.0 / d as f64).sqrt();
    for (p, row) in slot.chunks_mut(d).enumerate() {
        for i in 0..d / 2 {
            let w = 10000f64.powf(-2.0 * i as f64 / d as f64);
            row[2 * i] = F::of(amp * (p as f64 * w).sin());
            row[2 * i + 1] = F::of(amp * (p as f64 * w).cos());
        }
    }
}
