// SPDX-License-Identifier: MIT OR Apache-2.0

//! Layer-wise scalable low-rank adapters.
//!
//! A site on weight `W0` (out x in) adds `(alpha / r) * B A x` to `W0 x`,
//! with `B` out x r initialised to zero and `A` r x in drawn from
//! N(0, 0.02^2). Sites exist only where the selected weight's layer has
//! rank at least one.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{contract, shape_err, Result};
use crate::model::{
    build_graph, LanguageModel, MicroTransformer, ModelConfig, ParamVars, RunOutput, RunSpec,
    WeightName,
};
use crate::model::{AdapterVars, SiteVars};
use crate::numerics::{Matrix, Tape};
use crate::rng;
use crate::scaling::{ScalePair, ScaleSet};

const A_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterSite {
    pub layer: usize,
    pub weight: WeightName,
    /// out x r
    pub b: Matrix,
    /// r x in
    pub a: Matrix,
    pub alpha: f64,
    pub rank: usize,
}

impl AdapterSite {
    /// `alpha / r`.
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// `(alpha / r) * B A`, the weight update this site represents.
    pub fn delta_weight(&self) -> Result<Matrix> {
        Ok(self.b.matmul(&self.a)?.scale(self.scale()))
    }

    pub fn parameter_count(&self) -> usize {
        self.b.len() + self.a.len()
    }

    fn check(&self, config: &ModelConfig) -> Result<()> {
        let (out, inp) = self.weight.shape(config);
        if self.rank == 0 {
            return Err(contract!("adapter sites need rank at least 1"));
        }
        if self.layer >= config.n_layers {
            return Err(contract!(
                "adapter on layer {} of {}",
                self.layer,
                config.n_layers
            ));
        }
        if self.b.shape() != (out, self.rank) || self.a.shape() != (self.rank, inp) {
            return Err(shape_err!(
                "adapter {}@{} has B {:?} and A {:?}, expected ({out}, {r}) and ({r}, {inp})",
                self.weight,
                self.layer,
                self.b.shape(),
                self.a.shape(),
                r = self.rank
            ));
        }
        Ok(())
    }
}

/// `(alpha / r) * B (A x)`.
pub fn site_delta(site: &AdapterSite, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != site.a.cols() {
        return Err(shape_err!(
            "adapter input of width {} for A with {} columns",
            x.len(),
            site.a.cols()
        ));
    }
    let ax = site.a.matmul(&Matrix::col_vector(x))?;
    let bax = site.b.matmul(&ax)?;
    let s = site.scale();
    Ok(bax.data().iter().map(|v| s * v).collect())
}

/// `W0 x + (alpha / r) * B (A x)` given the precomputed `W0 x`.
pub fn site_output(site: &AdapterSite, w0_product: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    if w0_product.len() != site.b.rows() {
        return Err(shape_err!(
            "base product of width {} for B with {} rows",
            w0_product.len(),
            site.b.rows()
        ));
    }
    let delta = site_delta(site, x)?;
    Ok(w0_product.iter().zip(&delta).map(|(w, d)| w + d).collect())
}

/// Non-empty set of adapted weights.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<WeightName>", into = "Vec<WeightName>")]
pub struct WeightSelection(BTreeSet<WeightName>);

impl WeightSelection {
    /// Named presets, one per row of the editable-weight comparison.
    pub const PRESETS: [(&'static str, &'static [WeightName]); 9] = {
        use WeightName::*;
        [
            ("v", &[V]),
            ("k", &[K]),
            ("o", &[O]),
            ("qvko", &[Q, V, K, O]),
            ("down", &[Down]),
            ("gate", &[Gate]),
            ("udg", &[Up, Down, Gate]),
            ("qvudg", &[Q, V, Up, Down, Gate]),
            ("all", &[Q, V, K, O, Up, Down, Gate]),
        ]
    };

    pub fn new(names: impl IntoIterator<Item = WeightName>) -> Result<Self> {
        let set: BTreeSet<_> = names.into_iter().collect();
        if set.is_empty() {
            return Err(contract!("weight selection must not be empty"));
        }
        Ok(Self(set))
    }

    pub fn all() -> Self {
        Self(WeightName::ALL.into_iter().collect())
    }

    /// Attention projections only.
    pub fn attention() -> Self {
        Self(
            WeightName::ALL
                .into_iter()
                .filter(|w| w.is_attention())
                .collect(),
        )
    }

    /// MLP projections only.
    pub fn mlp() -> Self {
        Self(
            WeightName::ALL
                .into_iter()
                .filter(|w| !w.is_attention())
                .collect(),
        )
    }

    pub fn preset(name: &str) -> Result<Self> {
        Self::PRESETS
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, ws)| Self::new(ws.iter().copied()))
            .unwrap_or_else(|| Err(contract!("unknown weight preset {name:?}")))
    }

    pub fn contains(&self, w: WeightName) -> bool {
        self.0.contains(&w)
    }

    pub fn iter(&self) -> impl Iterator<Item = WeightName> + '_ {
        self.0.iter().copied()
    }
}

impl Default for WeightSelection {
    fn default() -> Self {
        Self::all()
    }
}

impl TryFrom<Vec<WeightName>> for WeightSelection {
    type Error = crate::Error;

    fn try_from(v: Vec<WeightName>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<WeightSelection> for Vec<WeightName> {
    fn from(s: WeightSelection) -> Self {
        s.0.into_iter().collect()
    }
}

/// `W_q+W_v`-style listing in canonical order.
impl fmt::Display for WeightSelection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, w) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str("+")?;
            }
            write!(f, "{w}")?;
        }
        Ok(())
    }
}

/// Accepts a preset name or `+`/`,`-separated weight names.
impl FromStr for WeightSelection {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Ok(p) = Self::preset(s) {
            return Ok(p);
        }
        let names = s
            .split(['+', ','])
            .map(|n| n.trim().parse::<WeightName>())
            .collect::<Result<Vec<_>>>()?;
        Self::new(names)
    }
}

/// A frozen base model with adapter sites.
#[derive(Debug, Clone)]
pub struct AdaptedModel<'a> {
    base: &'a MicroTransformer,
    selection: WeightSelection,
    scales: ScalePair,
    sites: Vec<AdapterSite>,
}

fn scales_for(pair: &ScalePair, w: WeightName) -> &ScaleSet {
    if w.is_attention() {
        &pair.attn
    } else {
        &pair.mlp
    }
}

/// Attaches fresh sites: `B = 0`, `A` seeded per site from `init_seed`.
pub fn attach<'a>(
    base: &'a MicroTransformer,
    selection: &WeightSelection,
    scales: &ScalePair,
    init_seed: u64,
) -> Result<AdaptedModel<'a>> {
    let cfg = base.config();
    for set in [&scales.attn, &scales.mlp] {
        if set.n_layers() != cfg.n_layers || set.rank.len() != cfg.n_layers {
            return Err(contract!(
                "scale set over {} layers for a {}-layer model",
                set.n_layers(),
                cfg.n_layers
            ));
        }
    }
    let mut sites = Vec::new();
    for layer in 0..cfg.n_layers {
        for w in selection.iter() {
            let set = scales_for(scales, w);
            let rank = set.rank[layer];
            if rank == 0 {
                continue;
            }
            let (out, inp) = w.shape(cfg);
            let seed = rng::indexed_seed(
                rng::sub_seed(init_seed, "adapter-init"),
                (layer * WeightName::ALL.len() + w as usize) as u64,
            );
            let mut r = rng::seeded(seed);
            sites.push(AdapterSite {
                layer,
                weight: w,
                b: Matrix::zeros(out, rank),
                a: Matrix::new(rank, inp, rng::gaussian_vec(&mut r, rank * inp, A_INIT_STD))?,
                alpha: set.alpha[layer],
                rank,
            });
        }
    }
    Ok(AdaptedModel {
        base,
        selection: selection.clone(),
        scales: scales.clone(),
        sites,
    })
}

impl<'a> AdaptedModel<'a> {
    /// Reassembles an adapted model from stored sites, checking that they
    /// agree with the selection and scales.
    pub fn from_parts(
        base: &'a MicroTransformer,
        selection: WeightSelection,
        scales: ScalePair,
        sites: Vec<AdapterSite>,
    ) -> Result<Self> {
        let expected = attach(base, &selection, &scales, 0)?;
        if expected.sites.len() != sites.len() {
            return Err(contract!(
                "{} adapter sites where the scales imply {}",
                sites.len(),
                expected.sites.len()
            ));
        }
        for (e, s) in expected.sites.iter().zip(&sites) {
            s.check(base.config())?;
            if (e.layer, e.weight, e.rank) != (s.layer, s.weight, s.rank) || e.alpha != s.alpha {
                return Err(contract!(
                    "adapter {}@{} does not match its scale set",
                    s.weight,
                    s.layer
                ));
            }
        }
        Ok(Self {
            base,
            selection,
            scales,
            sites,
        })
    }

    pub fn base(&self) -> &'a MicroTransformer {
        self.base
    }

    pub fn selection(&self) -> &WeightSelection {
        &self.selection
    }

    pub fn scales(&self) -> &ScalePair {
        &self.scales
    }

    pub fn sites(&self) -> &[AdapterSite] {
        &self.sites
    }

    pub fn sites_mut(&mut self) -> &mut [AdapterSite] {
        &mut self.sites
    }

    /// Sum over sites of `r (d + k)`.
    pub fn trainable_parameters(&self) -> usize {
        self.sites.iter().map(AdapterSite::parameter_count).sum()
    }

    /// Binds every site's `B` and `A` on `tape`.
    pub(crate) fn bind_sites(&self, tape: &mut Tape, trainable: bool) -> AdapterVars {
        self.sites
            .iter()
            .map(|s| {
                let (b, a) = if trainable {
                    (tape.parameter(s.b.clone()), tape.parameter(s.a.clone()))
                } else {
                    (tape.constant(s.b.clone()), tape.constant(s.a.clone()))
                };
                (
                    (s.layer, s.weight),
                    SiteVars {
                        b,
                        a,
                        scale: s.scale(),
                    },
                )
            })
            .collect()
    }

    /// Folds every site into a copy of the base weights.
    pub fn merge(&self) -> Result<MicroTransformer> {
        let mut merged = self.base.clone();
        for s in &self.sites {
            merged.layers[s.layer]
                .weight_mut(s.weight)
                .add_assign(&s.delta_weight()?)?;
        }
        Ok(merged)
    }

    /// The base model, untouched by anything done to the adapters.
    pub fn detach(self) -> &'a MicroTransformer {
        self.base
    }
}

impl LanguageModel for AdaptedModel<'_> {
    fn config(&self) -> &ModelConfig {
        self.base.config()
    }

    fn forward_batch(&self, runs: &[RunSpec<'_>]) -> Result<Vec<RunOutput>> {
        let mut tape = Tape::new();
        let params = ParamVars::bind(&mut tape, self.base, false);
        let adapters = self.bind_sites(&mut tape, false);
        let out = build_graph(&mut tape, self.base, &params, Some(&adapters), runs)?;
        Ok(out.into_outputs(&tape, runs))
    }
}

/// Name of an adapter tensor in checkpoints, e.g. `layers.3.W_v.B`.
pub fn tensor_name(layer: usize, weight: WeightName, factor: char) -> String {
    alloc::format!("layers.{layer}.{weight}.{factor}")
}
