// SPDX-License-Identifier: MIT OR Apache-2.0

//! Causal tracing: clean, corrupted and corrupted-with-restoration runs.
//!
//! The corrupted run adds Gaussian noise to the input embeddings of the
//! subject tokens. Restoration patches a single `(token, layer)` state with
//! its clean-run value and records the probability of the answer; the grid
//! of those probabilities is the [`ImpactMatrix`]. Module-severed variants
//! restore one sublayer output while pinning the other sublayer of the same
//! token to its corrupted value over a window of layers.

use alloc::string::String;
use alloc::vec::Vec;
use core::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::model::{
    next_token_prob, sequence_prob, EmbeddingNoise, FreezeSpec, LanguageModel, PatchSpec, RunSpec,
    Site, TraceCapture,
};
use crate::rng;

/// Noise multiplier applied to the subject-embedding standard deviation.
pub const NOISE_MULTIPLIER: f64 = 3.0;
/// Default number of noise draws per trace.
pub const DEFAULT_SAMPLES: usize = 10;
/// Runs packed into a single forward pass while tracing.
const RUNS_PER_PASS: usize = 24;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    /// Standard deviation `v` of the embedding noise.
    pub std: f64,
    pub n_samples: usize,
    pub seed: u64,
    /// Token indices of the subject mention.
    pub subject_span: Range<usize>,
}

impl NoiseSpec {
    /// Seed of the `k`-th draw. A one-sample spec seeded with
    /// `sample_seed(k)` reproduces that draw exactly.
    pub fn sample_seed(&self, k: usize) -> u64 {
        self.seed.wrapping_add(k as u64)
    }

    fn validate(&self, prompt_len: usize) -> Result<()> {
        if !(self.std >= 0.0 && self.std.is_finite()) {
            return Err(contract!("noise std must be finite and non-negative"));
        }
        if self.n_samples == 0 {
            return Err(contract!("noise needs at least one sample"));
        }
        if self.subject_span.is_empty() || self.subject_span.end > prompt_len {
            return Err(contract!(
                "subject span {:?} outside a {prompt_len}-token prompt",
                self.subject_span
            ));
        }
        Ok(())
    }

    /// The `k`-th noise draw over the subject span.
    pub fn draw(&self, k: usize, d_model: usize) -> EmbeddingNoise {
        let mut r = rng::seeded(rng::sub_seed(self.sample_seed(k), "embedding-noise"));
        EmbeddingNoise {
            rows: self
                .subject_span
                .clone()
                .map(|t| (t, rng::gaussian_vec(&mut r, d_model, self.std)))
                .collect(),
        }
    }
}

/// Which state a trace restores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetModule {
    /// The residual stream after each block.
    Full,
    /// Attention outputs, with MLP outputs pinned to the corrupted run.
    Attn,
    /// MLP outputs, with attention outputs pinned to the corrupted run.
    Mlp,
}

impl TargetModule {
    fn sites(self) -> (Site, Option<Site>) {
        match self {
            TargetModule::Full => (Site::Residual, None),
            TargetModule::Attn => (Site::AttnOut, Some(Site::MlpOut)),
            TargetModule::Mlp => (Site::MlpOut, Some(Site::AttnOut)),
        }
    }
}

/// `T x L` grid of restored answer probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpactMatrix {
    pub example_id: String,
    pub target_module: TargetModule,
    pub p_clean: f64,
    pub p_corrupted: f64,
    pub n_tokens: usize,
    pub n_layers: usize,
    /// Row-major, token-major values.
    pub values: Vec<f64>,
    pub noise: NoiseSpec,
}

impl ImpactMatrix {
    pub fn get(&self, token: usize, layer: usize) -> f64 {
        self.values[token * self.n_layers + layer]
    }

    pub fn row(&self, token: usize) -> &[f64] {
        &self.values[token * self.n_layers..(token + 1) * self.n_layers]
    }

    pub fn max(&self) -> f64 {
        self.values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Entry-wise scaling; used to check scale invariance downstream.
    pub fn scaled(&self, factor: f64) -> Self {
        let mut m = self.clone();
        for v in &mut m.values {
            *v *= factor;
        }
        m
    }
}

/// Result of the noised runs of a trace.
#[derive(Debug, Clone)]
pub struct CorruptedRun {
    /// Answer probability averaged over the draws.
    pub p_corrupted: f64,
    pub samples: Vec<CorruptedSample>,
}

#[derive(Debug, Clone)]
pub struct CorruptedSample {
    pub noise: EmbeddingNoise,
    pub prob: f64,
    pub capture: TraceCapture,
}

fn teacher_input(prompt: &[u32], answer: &[u32]) -> Result<Vec<u32>> {
    if prompt.is_empty() {
        return Err(contract!("empty prompt"));
    }
    if answer.is_empty() {
        return Err(contract!("answer must contain at least one token"));
    }
    let mut seq = prompt.to_vec();
    seq.extend_from_slice(&answer[..answer.len() - 1]);
    Ok(seq)
}

/// Running mean that returns `x` exactly when every input equals `x`.
#[derive(Default)]
struct Mean {
    value: f64,
    n: usize,
}

impl Mean {
    fn push(&mut self, x: f64) {
        self.n += 1;
        self.value += (x - self.value) / self.n as f64;
    }
}

/// Clean run: answer probability and every captured hidden state.
pub fn clean_run<M: LanguageModel + ?Sized>(
    model: &M,
    prompt: &[u32],
    answer: &[u32],
) -> Result<(f64, TraceCapture)> {
    let seq = teacher_input(prompt, answer)?;
    let out = model.forward(&RunSpec::clean(&seq).capturing())?;
    let p = sequence_prob(&out.logits, prompt.len(), answer)?;
    Ok((p, out.capture.expect("capture requested")))
}

/// Noised runs, one per draw, with their captures kept for restoration.
pub fn corrupted_run<M: LanguageModel + ?Sized>(
    model: &M,
    prompt: &[u32],
    answer: &[u32],
    noise: &NoiseSpec,
) -> Result<CorruptedRun> {
    noise.validate(prompt.len())?;
    let seq = teacher_input(prompt, answer)?;
    let d = model.config().d_model;
    let draws: Vec<EmbeddingNoise> = (0..noise.n_samples).map(|k| noise.draw(k, d)).collect();
    let runs: Vec<RunSpec<'_>> = draws
        .iter()
        .map(|n| RunSpec::clean(&seq).with_noise(n).capturing())
        .collect();
    let mut samples = Vec::with_capacity(noise.n_samples);
    let mut mean = Mean::default();
    for chunk in runs.chunks(RUNS_PER_PASS) {
        for (run, out) in chunk.iter().zip(model.forward_batch(chunk)?) {
            let prob = sequence_prob(&out.logits, prompt.len(), answer)?;
            mean.push(prob);
            samples.push(CorruptedSample {
                noise: run.noise.expect("noised run").clone(),
                prob,
                capture: out.capture.expect("capture requested"),
            });
        }
    }
    Ok(CorruptedRun {
        p_corrupted: mean.value,
        samples,
    })
}

/// Restoration grid for one example.
///
/// `window` limits how many layers (starting at the restored one) keep the
/// other sublayer frozen in module-severed traces; `None` freezes through
/// the top of the network and `Some(0)` restores the sublayer without
/// freezing anything.
#[allow(clippy::too_many_arguments)]
pub fn trace_impact<M: LanguageModel + ?Sized>(
    model: &M,
    example_id: &str,
    prompt: &[u32],
    answer: &[u32],
    noise: &NoiseSpec,
    target: TargetModule,
    window: Option<usize>,
) -> Result<ImpactMatrix> {
    let n_layers = model.config().n_layers;
    let n_tokens = prompt.len();
    let (p_clean, clean) = clean_run(model, prompt, answer)?;
    let corrupted = corrupted_run(model, prompt, answer, noise)?;
    let seq = teacher_input(prompt, answer)?;
    let (restore_site, frozen_site) = target.sites();

    let mut cells: Vec<Mean> = (0..n_tokens * n_layers).map(|_| Mean::default()).collect();
    for sample in &corrupted.samples {
        let mut runs = Vec::with_capacity(n_tokens * n_layers);
        for i in 0..n_tokens {
            for l in 0..n_layers {
                let patch = PatchSpec {
                    site: restore_site,
                    token: i,
                    layer: l,
                    value: clean.get(restore_site, i, l).to_vec(),
                };
                let freezes = match frozen_site.filter(|_| window != Some(0)) {
                    Some(site) => {
                        let end = window.map_or(n_layers, |w| (l + w).min(n_layers));
                        alloc::vec![FreezeSpec {
                            site,
                            token: i,
                            first_layer: l,
                            values: (l..end)
                                .map(|fl| sample.capture.get(site, i, fl).to_vec())
                                .collect(),
                        }]
                    }
                    None => Vec::new(),
                };
                runs.push(
                    RunSpec::clean(&seq)
                        .with_noise(&sample.noise)
                        .with_patches(alloc::vec![patch])
                        .with_freezes(freezes),
                );
            }
        }
        let mut cell = 0;
        for chunk in runs.chunks(RUNS_PER_PASS) {
            for out in model.forward_batch(chunk)? {
                cells[cell].push(sequence_prob(&out.logits, n_tokens, answer)?);
                cell += 1;
            }
        }
    }

    Ok(ImpactMatrix {
        example_id: example_id.into(),
        target_module: target,
        p_clean,
        p_corrupted: corrupted.p_corrupted,
        n_tokens,
        n_layers,
        values: cells.into_iter().map(|m| m.value).collect(),
        noise: noise.clone(),
    })
}

/// Standard deviation of all token-embedding entries of the given subject
/// tokens, pooled over every occurrence.
pub fn subject_embedding_std(
    model: &crate::model::MicroTransformer,
    subjects: &[&[u32]],
) -> Result<f64> {
    let mut vals = Vec::new();
    for s in subjects {
        model.check_tokens(s)?;
        for &t in *s {
            vals.extend_from_slice(model.tok_emb.row(t as usize));
        }
    }
    if vals.len() < 2 {
        return Err(contract!(
            "need at least one subject token to measure embedding spread"
        ));
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(libm::sqrt(var))
}

/// Clean-run probability convenience wrapper.
pub fn clean_prob<M: LanguageModel + ?Sized>(
    model: &M,
    prompt: &[u32],
    answer: &[u32],
) -> Result<f64> {
    next_token_prob(model, &RunSpec::clean(prompt), answer)
}
