// SPDX-License-Identifier: MIT OR Apache-2.0

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::numerics::Matrix;

/// A hookable activation inside a block.
///
/// `Residual` is the residual stream after block `l` (attention and MLP both
/// applied); `AttnOut` and `MlpOut` are the sublayer outputs before they are
/// added to the residual stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    Residual,
    AttnOut,
    MlpOut,
}

impl Site {
    pub(crate) fn slot(self) -> usize {
        self as usize
    }
}

/// Overrides one site output with a fixed vector after it is computed.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSpec {
    pub site: Site,
    pub token: usize,
    pub layer: usize,
    pub value: Vec<f64>,
}

/// Pins a sublayer output at one token to stored values over a contiguous
/// layer window starting at `first_layer` (one vector per layer).
#[derive(Debug, Clone, PartialEq)]
pub struct FreezeSpec {
    pub site: Site,
    pub token: usize,
    pub first_layer: usize,
    pub values: Vec<Vec<f64>>,
}

impl FreezeSpec {
    pub fn layers(&self) -> core::ops::Range<usize> {
        self.first_layer..self.first_layer + self.values.len()
    }
}

/// Explicit noise vectors added to the input token embeddings.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingNoise {
    pub rows: Vec<(usize, Vec<f64>)>,
}

/// Arguments of one forward run.
#[derive(Debug, Clone, Default)]
pub struct RunSpec<'a> {
    pub tokens: &'a [u32],
    pub noise: Option<&'a EmbeddingNoise>,
    pub patches: Vec<PatchSpec>,
    pub freezes: Vec<FreezeSpec>,
    pub capture: bool,
}

impl<'a> RunSpec<'a> {
    pub fn clean(tokens: &'a [u32]) -> Self {
        Self {
            tokens,
            ..Self::default()
        }
    }

    pub fn with_noise(mut self, noise: &'a EmbeddingNoise) -> Self {
        self.noise = Some(noise);
        self
    }

    pub fn with_patches(mut self, patches: Vec<PatchSpec>) -> Self {
        self.patches = patches;
        self
    }

    pub fn with_freezes(mut self, freezes: Vec<FreezeSpec>) -> Self {
        self.freezes = freezes;
        self
    }

    pub fn capturing(mut self) -> Self {
        self.capture = true;
        self
    }
}

/// Per-layer activations of one run, after any overrides.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceCapture {
    pub(crate) sites: [Vec<Matrix>; 3],
}

impl TraceCapture {
    /// All tokens of `site` at `layer`, as a `T x d` matrix.
    pub fn layer(&self, site: Site, layer: usize) -> &Matrix {
        &self.sites[site.slot()][layer]
    }

    pub fn get(&self, site: Site, token: usize, layer: usize) -> &[f64] {
        self.layer(site, layer).row(token)
    }

    pub fn n_layers(&self) -> usize {
        self.sites[0].len()
    }

    pub fn n_tokens(&self) -> usize {
        self.sites[0].first().map_or(0, Matrix::rows)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    /// `T x vocab` logits, one row per input position.
    pub logits: Matrix,
    pub capture: Option<TraceCapture>,
}
