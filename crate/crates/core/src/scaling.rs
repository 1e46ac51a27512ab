// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-layer adapter scales from impact matrices.
//!
//! The alpha profile of one knowledge item sums the subject-token rows of
//! its impact matrix; the rank profile sums the same rows over a whole
//! dataset. Both are max-min normalised, then multiplied by `alpha_o` and
//! `r_o` (the rank is rounded up, so only layers with zero impact lose
//! their adapter).

use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::rng;
use crate::tracing::{ImpactMatrix, TargetModule};

pub const DEFAULT_ALPHA_O: f64 = 24.0;
pub const DEFAULT_R_O: usize = 8;
/// Allowed values of `alpha_o` and `r_o` in hyper-parameter sweeps.
pub const SEARCH_GRID: [usize; 6] = [2, 8, 24, 32, 64, 128];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProfileKind {
    Alpha,
    Rank,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpactProfile {
    pub values: Vec<f64>,
    pub kind: ProfileKind,
    pub source_module: TargetModule,
}

/// How per-layer scales are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Traced alpha and rank profiles.
    Medlasa,
    /// `alpha_o` and `r_o` at every layer.
    Fixed,
    /// Seeded uniform draws per layer.
    Random,
    /// Traced alpha, fixed rank (scaled rank removed).
    NoSr,
    /// Traced rank, fixed alpha (scaled alpha removed).
    NoSa,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Medlasa,
        Strategy::Fixed,
        Strategy::Random,
        Strategy::NoSr,
        Strategy::NoSa,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Medlasa => "medlasa",
            Strategy::Fixed => "fixed",
            Strategy::Random => "random",
            Strategy::NoSr => "no_sr",
            Strategy::NoSa => "no_sa",
        }
    }

    /// Whether the strategy reads impact matrices.
    pub fn needs_traces(self) -> bool {
        matches!(self, Strategy::Medlasa | Strategy::NoSr | Strategy::NoSa)
    }
}

impl core::str::FromStr for Strategy {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| contract!("unknown strategy {s:?}"))
    }
}

/// Per-layer `(alpha, rank)` pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleSet {
    pub alpha: Vec<f64>,
    pub rank: Vec<usize>,
    pub strategy: Strategy,
    pub alpha_o: f64,
    pub r_o: usize,
}

impl ScaleSet {
    pub fn n_layers(&self) -> usize {
        self.alpha.len()
    }

    pub fn fixed(n_layers: usize, alpha_o: f64, r_o: usize) -> Self {
        Self {
            alpha: vec![alpha_o; n_layers],
            rank: vec![r_o; n_layers],
            strategy: Strategy::Fixed,
            alpha_o,
            r_o,
        }
    }
}

/// Scales for attention-weight adapters and MLP-weight adapters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalePair {
    pub attn: ScaleSet,
    pub mlp: ScaleSet,
}

impl ScalePair {
    pub fn both(set: ScaleSet) -> Self {
        Self {
            attn: set.clone(),
            mlp: set,
        }
    }
}

/// `(x - min) / (max - min)`; an all-equal input maps to all ones.
pub fn max_min_norm(x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(contract!("max-min normalisation of an empty vector"));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(contract!("max-min normalisation of non-finite values"));
    }
    let min = x.iter().copied().fold(f64::INFINITY, f64::min);
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == min {
        return Ok(vec![1.0; x.len()]);
    }
    let span = max - min;
    Ok(x.iter().map(|v| (v - min) / span).collect())
}

fn subject_row_sum(m: &ImpactMatrix, span: &Range<usize>, acc: &mut [f64]) -> Result<()> {
    if span.is_empty() {
        return Err(contract!("empty subject span"));
    }
    if span.end > m.n_tokens {
        return Err(contract!(
            "subject span {span:?} outside {} traced tokens",
            m.n_tokens
        ));
    }
    for t in span.clone() {
        for (a, v) in acc.iter_mut().zip(m.row(t)) {
            *a += v;
        }
    }
    Ok(())
}

/// Alpha impact of one item: normalised column sums over subject rows.
pub fn alpha_profile(m: &ImpactMatrix, subject_span: Range<usize>) -> Result<ImpactProfile> {
    let mut acc = vec![0.0; m.n_layers];
    subject_row_sum(m, &subject_span, &mut acc)?;
    Ok(ImpactProfile {
        values: max_min_norm(&acc)?,
        kind: ProfileKind::Alpha,
        source_module: m.target_module,
    })
}

/// Rank impact over a dataset: normalised double sum over items and their
/// subject rows.
pub fn rank_profile(traces: &[(&ImpactMatrix, Range<usize>)]) -> Result<ImpactProfile> {
    let (first, _) = traces
        .first()
        .ok_or_else(|| contract!("rank profile needs at least one trace"))?;
    let n_layers = first.n_layers;
    let mut acc = vec![0.0; n_layers];
    for (m, span) in traces {
        if m.n_layers != n_layers {
            return Err(contract!(
                "trace {} has {} layers, expected {n_layers}",
                m.example_id,
                m.n_layers
            ));
        }
        subject_row_sum(m, span, &mut acc)?;
    }
    Ok(ImpactProfile {
        values: max_min_norm(&acc)?,
        kind: ProfileKind::Rank,
        source_module: first.target_module,
    })
}

/// `alpha^l = alpha_o * I_alpha^l`, `r^l = ceil(r_o * I_r^l)`.
pub fn make_scale_set(
    i_alpha: &[f64],
    i_rank: &[f64],
    alpha_o: f64,
    r_o: usize,
) -> Result<ScaleSet> {
    check_hyper(alpha_o, r_o)?;
    if i_alpha.len() != i_rank.len() {
        return Err(contract!(
            "alpha profile has {} layers, rank profile {}",
            i_alpha.len(),
            i_rank.len()
        ));
    }
    if i_alpha
        .iter()
        .chain(i_rank)
        .any(|v| !(0.0..=1.0).contains(v))
    {
        return Err(contract!("impact profiles must lie in [0, 1]"));
    }
    Ok(ScaleSet {
        alpha: i_alpha.iter().map(|i| alpha_o * i).collect(),
        rank: i_rank
            .iter()
            .map(|i| libm::ceil(r_o as f64 * i) as usize)
            .collect(),
        strategy: Strategy::Medlasa,
        alpha_o,
        r_o,
    })
}

fn check_hyper(alpha_o: f64, r_o: usize) -> Result<()> {
    if !(alpha_o > 0.0 && alpha_o.is_finite()) {
        return Err(contract!("alpha_o must be positive, got {alpha_o}"));
    }
    if r_o == 0 {
        return Err(contract!("r_o must be at least 1"));
    }
    Ok(())
}

/// Inputs available when choosing scales for one edit.
#[derive(Debug, Clone)]
pub struct ScaleContext<'a> {
    pub n_layers: usize,
    pub alpha_o: f64,
    pub r_o: usize,
    /// Seed of the random strategy.
    pub seed: u64,
    /// Trace of the item being edited, with its subject span.
    pub item_trace: Option<(&'a ImpactMatrix, Range<usize>)>,
    /// Traces over the dataset used for the rank profile.
    pub dataset_traces: &'a [(&'a ImpactMatrix, Range<usize>)],
}

pub fn strategy_scales(strategy: Strategy, ctx: &ScaleContext<'_>) -> Result<ScaleSet> {
    check_hyper(ctx.alpha_o, ctx.r_o)?;
    if ctx.n_layers == 0 {
        return Err(contract!("scale set over zero layers"));
    }
    let mut set = match strategy {
        Strategy::Fixed => ScaleSet::fixed(ctx.n_layers, ctx.alpha_o, ctx.r_o),
        Strategy::Random => {
            let mut r = rng::seeded(rng::sub_seed(ctx.seed, "random-scales"));
            let alpha = (0..ctx.n_layers)
                .map(|_| ctx.alpha_o * (1.0 - r.random::<f64>()))
                .collect();
            let rank = (0..ctx.n_layers)
                .map(|_| r.random_range(1..=ctx.r_o))
                .collect();
            ScaleSet {
                alpha,
                rank,
                strategy,
                alpha_o: ctx.alpha_o,
                r_o: ctx.r_o,
            }
        }
        Strategy::Medlasa | Strategy::NoSr | Strategy::NoSa => {
            let (item, span) = ctx
                .item_trace
                .clone()
                .ok_or_else(|| contract!("{} scaling needs the item's trace", strategy.as_str()))?;
            if ctx.dataset_traces.is_empty() {
                return Err(contract!(
                    "{} scaling needs dataset traces for the rank profile",
                    strategy.as_str()
                ));
            }
            let ones = vec![1.0; ctx.n_layers];
            let i_alpha = match strategy {
                Strategy::NoSa => ones.clone(),
                _ => alpha_profile(item, span)?.values,
            };
            let i_rank = match strategy {
                Strategy::NoSr => ones,
                _ => rank_profile(ctx.dataset_traces)?.values,
            };
            if i_alpha.len() != ctx.n_layers || i_rank.len() != ctx.n_layers {
                return Err(contract!("traces do not cover {} layers", ctx.n_layers));
            }
            make_scale_set(&i_alpha, &i_rank, ctx.alpha_o, ctx.r_o)?
        }
    };
    set.strategy = strategy;
    Ok(set)
}
