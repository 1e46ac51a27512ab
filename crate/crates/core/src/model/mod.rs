// SPDX-License-Identifier: MIT OR Apache-2.0

//! LLaMA-style micro decoder-only transformer.
//!
//! Each block is pre-RMSNorm multi-head causal attention followed by a
//! SwiGLU MLP, so all seven editable projections (`W_q`, `W_k`, `W_v`,
//! `W_o`, `W_gate`, `W_up`, `W_down`) exist at every layer. Positions are
//! learned absolute embeddings.
//!
//! Layer indices are zero-based throughout the crate: layer `l` is the
//! `l + 1`-th block from the input.

mod graph;
mod hooks;
mod infer;

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::numerics::Matrix;
use crate::rng;

pub(crate) use graph::{build_graph, AdapterVars, ParamVars, SiteVars};
pub use hooks::{EmbeddingNoise, FreezeSpec, PatchSpec, RunOutput, RunSpec, Site, TraceCapture};
pub use infer::{argmax, generate, next_token_prob, sequence_prob, teacher_forced_argmax};

/// Reserved beginning-of-sequence token id.
pub const BOS: u32 = 0;
/// Reserved unknown-word token id.
pub const UNK: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub norm_eps: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 8,
            d_model: 64,
            n_heads: 4,
            d_ff: 128,
            vocab_size: 300,
            max_seq: 64,
            norm_eps: 1e-6,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq", self.max_seq),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(contract!("{name} must be at least 1"));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(contract!(
                "d_model {} not divisible by n_heads {}",
                self.d_model,
                self.n_heads
            ));
        }
        if self.vocab_size < 2 {
            return Err(contract!("vocabulary must hold the BOS and UNK tokens"));
        }
        if !(self.norm_eps >= 0.0 && self.norm_eps.is_finite()) {
            return Err(contract!("norm_eps must be finite and non-negative"));
        }
        Ok(())
    }
}

/// The seven editable projections of a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum WeightName {
    #[serde(rename = "W_q")]
    Q,
    #[serde(rename = "W_k")]
    K,
    #[serde(rename = "W_v")]
    V,
    #[serde(rename = "W_o")]
    O,
    #[serde(rename = "W_gate")]
    Gate,
    #[serde(rename = "W_up")]
    Up,
    #[serde(rename = "W_down")]
    Down,
}

impl WeightName {
    pub const ALL: [WeightName; 7] = [
        WeightName::Q,
        WeightName::K,
        WeightName::V,
        WeightName::O,
        WeightName::Gate,
        WeightName::Up,
        WeightName::Down,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            WeightName::Q => "W_q",
            WeightName::K => "W_k",
            WeightName::V => "W_v",
            WeightName::O => "W_o",
            WeightName::Gate => "W_gate",
            WeightName::Up => "W_up",
            WeightName::Down => "W_down",
        }
    }

    pub fn is_attention(self) -> bool {
        matches!(
            self,
            WeightName::Q | WeightName::K | WeightName::V | WeightName::O
        )
    }

    /// `(out, in)` shape of the host matrix.
    pub fn shape(self, config: &ModelConfig) -> (usize, usize) {
        let (d, f) = (config.d_model, config.d_ff);
        match self {
            WeightName::Q | WeightName::K | WeightName::V | WeightName::O => (d, d),
            WeightName::Gate | WeightName::Up => (f, d),
            WeightName::Down => (d, f),
        }
    }

    fn slot(self) -> usize {
        self as usize
    }
}

impl fmt::Display for WeightName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for WeightName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        WeightName::ALL
            .into_iter()
            .find(|w| w.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| contract!("unknown weight name {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    weights: [Matrix; 7],
    pub attn_norm: Matrix,
    pub mlp_norm: Matrix,
}

impl LayerWeights {
    pub fn weight(&self, name: WeightName) -> &Matrix {
        &self.weights[name.slot()]
    }

    pub fn weight_mut(&mut self, name: WeightName) -> &mut Matrix {
        &mut self.weights[name.slot()]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MicroTransformer {
    config: ModelConfig,
    pub tok_emb: Matrix,
    pub pos_emb: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Matrix,
    pub unembed: Matrix,
}

const INIT_STD: f64 = 0.02;

impl MicroTransformer {
    /// Seeded Gaussian initialisation; residual-output projections are
    /// scaled down by `sqrt(2 L)`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut r = rng::seeded(rng::sub_seed(config.seed, "model-init"));
        let mut gauss = |rows: usize, cols: usize, std: f64| {
            Matrix::new(rows, cols, rng::gaussian_vec(&mut r, rows * cols, std))
        };
        let (d, v) = (config.d_model, config.vocab_size);
        let out_std = INIT_STD / libm::sqrt(2.0 * config.n_layers as f64);
        let tok_emb = gauss(v, d, INIT_STD)?;
        let pos_emb = gauss(config.max_seq, d, INIT_STD)?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let mut ws = Vec::with_capacity(7);
            for w in WeightName::ALL {
                let (o, i) = w.shape(&config);
                let std = if matches!(w, WeightName::O | WeightName::Down) {
                    out_std
                } else {
                    INIT_STD
                };
                ws.push(gauss(o, i, std)?);
            }
            let weights: [Matrix; 7] = ws.try_into().expect("seven weights");
            layers.push(LayerWeights {
                weights,
                attn_norm: Matrix::filled(1, d, 1.0),
                mlp_norm: Matrix::filled(1, d, 1.0),
            });
        }
        let unembed = gauss(v, d, INIT_STD)?;
        Ok(Self {
            tok_emb,
            pos_emb,
            layers,
            final_norm: Matrix::filled(1, d, 1.0),
            unembed,
            config,
        })
    }

    /// A model whose every weight and embedding is zero; all logits are 0.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        let mut m = Self::new(config)?;
        for (_, t) in m.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        Ok(m)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Every tensor with its stable name, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::with_capacity(4 + 9 * self.layers.len());
        out.push(("tok_emb".into(), &self.tok_emb));
        out.push(("pos_emb".into(), &self.pos_emb));
        for (l, layer) in self.layers.iter().enumerate() {
            for w in WeightName::ALL {
                out.push((format!("layers.{l}.{w}"), layer.weight(w)));
            }
            out.push((format!("layers.{l}.attn_norm"), &layer.attn_norm));
            out.push((format!("layers.{l}.mlp_norm"), &layer.mlp_norm));
        }
        out.push(("final_norm".into(), &self.final_norm));
        out.push(("unembed".into(), &self.unembed));
        out
    }

    /// Mutable counterpart of [`MicroTransformer::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = Vec::with_capacity(4 + 9 * self.layers.len());
        out.push(("tok_emb".into(), &mut self.tok_emb));
        out.push(("pos_emb".into(), &mut self.pos_emb));
        for (l, layer) in self.layers.iter_mut().enumerate() {
            let LayerWeights {
                weights,
                attn_norm,
                mlp_norm,
            } = layer;
            for (w, m) in WeightName::ALL.into_iter().zip(weights.iter_mut()) {
                out.push((format!("layers.{l}.{w}"), m));
            }
            out.push((format!("layers.{l}.attn_norm"), attn_norm));
            out.push((format!("layers.{l}.mlp_norm"), mlp_norm));
        }
        out.push(("final_norm".into(), &mut self.final_norm));
        out.push(("unembed".into(), &mut self.unembed));
        out
    }

    /// Rebuilds a model from named tensors, checking every shape.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<(String, Matrix)>) -> Result<Self> {
        let mut model = Self::zeros(config)?;
        let mut slots = model.tensors_mut();
        if slots.len() != tensors.len() {
            return Err(contract!(
                "expected {} tensors, got {}",
                slots.len(),
                tensors.len()
            ));
        }
        for ((name, slot), (tname, t)) in slots.iter_mut().zip(tensors) {
            if *name != tname {
                return Err(contract!("tensor {tname:?} where {name:?} was expected"));
            }
            if slot.shape() != t.shape() {
                return Err(contract!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                ));
            }
            **slot = t;
        }
        drop(slots);
        Ok(model)
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Validates token ids against the vocabulary and sequence limit.
    pub fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(contract!("empty token sequence"));
        }
        if tokens.len() > self.config.max_seq {
            return Err(contract!(
                "sequence of {} tokens exceeds max_seq {}",
                tokens.len(),
                self.config.max_seq
            ));
        }
        if let Some(&id) = tokens
            .iter()
            .find(|&&t| t as usize >= self.config.vocab_size)
        {
            return Err(Error::Vocab {
                id,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }
}

/// Anything that can run the transformer forward pass.
pub trait LanguageModel {
    fn config(&self) -> &ModelConfig;

    /// Runs several independent sequences in one packed pass.
    fn forward_batch(&self, runs: &[RunSpec<'_>]) -> Result<Vec<RunOutput>>;

    fn forward(&self, run: &RunSpec<'_>) -> Result<RunOutput> {
        let mut out = self.forward_batch(core::slice::from_ref(run))?;
        Ok(out.pop().expect("one run in, one output out"))
    }
}

impl LanguageModel for MicroTransformer {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn forward_batch(&self, runs: &[RunSpec<'_>]) -> Result<Vec<RunOutput>> {
        let mut tape = crate::numerics::Tape::new();
        let params = ParamVars::bind(&mut tape, self, false);
        let out = build_graph(&mut tape, self, &params, None, runs)?;
        Ok(out.into_outputs(&tape, runs))
    }
}

#[cfg(test)]
mod tests;
