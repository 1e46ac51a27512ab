// SPDX-License-Identifier: MIT OR Apache-2.0

//! Editing metrics: efficacy, generality, per-class locality, fluency and
//! their average.
//!
//! Percent-valued metrics live in `[0, 100]`. Locality compares argmax
//! predictions of the pre- and post-edit models, never probabilities.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::benchkit::{EditRecord, LocalityClass, Tokenizer};
use crate::error::{contract, Result};
use crate::model::{argmax, generate, teacher_forced_argmax, LanguageModel, RunSpec};

/// Sequences per packed forward pass when scoring many prompts.
const BATCH: usize = 32;

/// Fraction of target positions whose teacher-forced argmax equals the target.
pub fn token_match_accuracy<M: LanguageModel + ?Sized>(
    model: &M,
    prompt: &[u32],
    target: &[u32],
) -> Result<f64> {
    let pred = teacher_forced_argmax(model, prompt, target)?;
    Ok(match_fraction(&pred, target))
}

fn match_fraction(a: &[u32], b: &[u32]) -> f64 {
    let hits = a.iter().zip(b).filter(|(x, y)| x == y).count();
    hits as f64 / b.len() as f64
}

/// Teacher-forced argmax sequences for many `(prompt, target)` pairs, packed
/// into batched forward passes. Same result as calling
/// [`teacher_forced_argmax`] per pair.
pub fn teacher_forced_argmax_batch<M: LanguageModel + ?Sized>(
    model: &M,
    pairs: &[(&[u32], &[u32])],
) -> Result<Vec<Vec<u32>>> {
    let mut seqs = Vec::with_capacity(pairs.len());
    for (prompt, target) in pairs {
        if prompt.is_empty() || target.is_empty() {
            return Err(contract!("teacher forcing needs a prompt and a target"));
        }
        let mut s = prompt.to_vec();
        s.extend_from_slice(&target[..target.len() - 1]);
        seqs.push(s);
    }
    let mut out = Vec::with_capacity(pairs.len());
    for (chunk, pchunk) in seqs.chunks(BATCH).zip(pairs.chunks(BATCH)) {
        let runs: Vec<RunSpec<'_>> = chunk.iter().map(|s| RunSpec::clean(s)).collect();
        let res = model.forward_batch(&runs)?;
        for (r, (prompt, target)) in res.iter().zip(pchunk) {
            out.push(
                (0..target.len())
                    .map(|j| argmax(r.logits.row(prompt.len() - 1 + j)) as u32)
                    .collect(),
            );
        }
    }
    Ok(out)
}

/// Mean token-match accuracy over `(prompt, target)` pairs, in percent.
fn mean_match<M: LanguageModel + ?Sized>(model: &M, pairs: &[(&[u32], &[u32])]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(contract!("no records to score"));
    }
    let preds = teacher_forced_argmax_batch(model, pairs)?;
    let sum: f64 = preds
        .iter()
        .zip(pairs)
        .map(|(p, (_, t))| match_fraction(p, t))
        .sum();
    Ok(100.0 * sum / pairs.len() as f64)
}

/// One tokenized benchmark item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCase {
    /// Edit question, starting with BOS.
    pub prompt: Vec<u32>,
    pub rephrase: Vec<u32>,
    /// Counterfactual answer the edit installs.
    pub target: Vec<u32>,
    /// Answer the base model memorised.
    pub original: Vec<u32>,
    pub locality: BTreeMap<LocalityClass, Vec<(Vec<u32>, Vec<u32>)>>,
}

impl EvalCase {
    pub fn from_record(record: &EditRecord, tok: &Tokenizer) -> Self {
        Self {
            prompt: tok.encode_prompt(&record.question),
            rephrase: tok.encode_prompt(&record.rephrase),
            target: tok.encode(&record.answer_edit),
            original: tok.encode(&record.answer_true),
            locality: record
                .locality
                .iter()
                .map(|(c, qas)| {
                    (
                        *c,
                        qas.iter()
                            .map(|qa| (tok.encode_prompt(&qa.q), tok.encode(&qa.a)))
                            .collect(),
                    )
                })
                .collect(),
        }
    }
}

/// Mean token match of each case's edit prompt against its edit target.
pub fn efficacy<M: LanguageModel + ?Sized>(model: &M, cases: &[EvalCase]) -> Result<f64> {
    let pairs: Vec<_> = cases
        .iter()
        .map(|c| (c.prompt.as_slice(), c.target.as_slice()))
        .collect();
    mean_match(model, &pairs)
}

/// Like [`efficacy`] with the rephrased question as input.
pub fn generality<M: LanguageModel + ?Sized>(model: &M, cases: &[EvalCase]) -> Result<f64> {
    let pairs: Vec<_> = cases
        .iter()
        .map(|c| (c.rephrase.as_slice(), c.target.as_slice()))
        .collect();
    mean_match(model, &pairs)
}

/// Per-record fractions of target positions where the two models' argmax
/// predictions agree.
fn agreement<P, Q>(pre: &P, post: &Q, pairs: &[(Vec<u32>, Vec<u32>)]) -> Result<Vec<f64>>
where
    P: LanguageModel + ?Sized,
    Q: LanguageModel + ?Sized,
{
    let refs: Vec<_> = pairs
        .iter()
        .map(|(q, a)| (q.as_slice(), a.as_slice()))
        .collect();
    let a = teacher_forced_argmax_batch(pre, &refs)?;
    let b = teacher_forced_argmax_batch(post, &refs)?;
    Ok(a.iter()
        .zip(&b)
        .map(|(x, y)| match_fraction(x, y))
        .collect())
}

/// Percent of target positions whose argmax is unchanged by the edit,
/// averaged over records. `None` when there are no records.
pub fn locality<P, Q>(pre: &P, post: &Q, pairs: &[(Vec<u32>, Vec<u32>)]) -> Result<Option<f64>>
where
    P: LanguageModel + ?Sized,
    Q: LanguageModel + ?Sized,
{
    if pairs.is_empty() {
        return Ok(None);
    }
    let agree = agreement(pre, post, pairs)?;
    Ok(Some(100.0 * agree.iter().sum::<f64>() / agree.len() as f64))
}

/// Shannon entropy in bits of the `n`-gram frequency distribution.
pub fn ngram_entropy(tokens: &[u32], n: usize) -> Result<f64> {
    if n == 0 || tokens.len() < n {
        return Err(contract!("{} tokens hold no {n}-grams", tokens.len()));
    }
    let mut counts: BTreeMap<&[u32], usize> = BTreeMap::new();
    for g in tokens.windows(n) {
        *counts.entry(g).or_insert(0) += 1;
    }
    let total = (tokens.len() - n + 1) as f64;
    let h: f64 = counts
        .values()
        .map(|&c| {
            let f = c as f64 / total;
            -f * libm::log2(f)
        })
        .sum();
    // a single distinct n-gram gives -1*log2(1) = -0.0
    Ok(h.max(0.0))
}

/// Bigram and trigram weights of the fluency score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FluencyWeights {
    pub bigram: f64,
    pub trigram: f64,
}

impl Default for FluencyWeights {
    fn default() -> Self {
        Self {
            bigram: 1.0 / 3.0,
            trigram: 2.0 / 3.0,
        }
    }
}

/// Weighted bi- and trigram entropy of a token sequence.
pub fn fluency(tokens: &[u32], w: FluencyWeights) -> Result<f64> {
    if tokens.len() < 3 {
        return Err(contract!(
            "fluency needs at least 3 tokens, got {}",
            tokens.len()
        ));
    }
    if !(w.bigram >= 0.0 && w.trigram >= 0.0 && w.bigram.is_finite() && w.trigram.is_finite()) {
        return Err(contract!("fluency weights must be finite and non-negative"));
    }
    Ok(w.bigram * ngram_entropy(tokens, 2)? + w.trigram * ngram_entropy(tokens, 3)?)
}

/// Fluency of the greedy continuation of `prompt`: `max_new` tokens, fewer
/// when the prompt leaves less room in the context window.
pub fn continuation_fluency<M: LanguageModel + ?Sized>(
    model: &M,
    prompt: &[u32],
    max_new: usize,
    w: FluencyWeights,
) -> Result<f64> {
    let room = (model.config().max_seq + 1).saturating_sub(prompt.len());
    let text = generate(model, prompt, max_new.min(room))?;
    fluency(&text, w)
}

/// `((eff + gen) / 2 + mean(locality)) / 2`.
pub fn average(
    efficacy: f64,
    generality: f64,
    locality: &BTreeMap<LocalityClass, f64>,
) -> Result<f64> {
    if locality.is_empty() {
        return Err(contract!("average needs at least one locality class"));
    }
    let parts = [efficacy, generality]
        .into_iter()
        .chain(locality.values().copied());
    for v in parts {
        if !v.is_finite() {
            return Err(contract!("non-finite metric component {v}"));
        }
    }
    let loc = locality.values().sum::<f64>() / locality.len() as f64;
    Ok(((efficacy + generality) / 2.0 + loc) / 2.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub fluency_weights: FluencyWeights,
    /// Length of the greedy continuation scored for fluency.
    pub fluency_tokens: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            fluency_weights: FluencyWeights::default(),
            fluency_tokens: 50,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fluency_tokens < 3 {
            return Err(contract!("fluency_tokens must be at least 3"));
        }
        fluency(&[0, 1, 2], self.fluency_weights).map(|_| ())
    }
}

/// Raw scores of one edit, before aggregation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditScores {
    /// Token match on the edit prompt, as a fraction.
    pub efficacy: f64,
    pub generality: f64,
    /// Per-record agreement fractions.
    pub locality: BTreeMap<LocalityClass, Vec<f64>>,
    pub fluency: f64,
}

/// Scores `post` (the model after editing `case`) against `pre`.
pub fn score_edit<P, Q>(pre: &P, post: &Q, case: &EvalCase, cfg: &EvalConfig) -> Result<EditScores>
where
    P: LanguageModel + ?Sized,
    Q: LanguageModel + ?Sized,
{
    cfg.validate()?;
    let preds = teacher_forced_argmax_batch(
        post,
        &[
            (case.prompt.as_slice(), case.target.as_slice()),
            (case.rephrase.as_slice(), case.target.as_slice()),
        ],
    )?;
    let mut locality = BTreeMap::new();
    for (class, pairs) in &case.locality {
        if !pairs.is_empty() {
            locality.insert(*class, agreement(pre, post, pairs)?);
        }
    }
    Ok(EditScores {
        efficacy: match_fraction(&preds[0], &case.target),
        generality: match_fraction(&preds[1], &case.target),
        locality,
        fluency: continuation_fluency(post, &case.prompt, cfg.fluency_tokens, cfg.fluency_weights)?,
    })
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalCounts {
    pub edits: usize,
    /// Locality records scored per class.
    pub locality: BTreeMap<LocalityClass, usize>,
    pub fluency_prompts: usize,
}

/// Aggregate metrics of an editing experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub efficacy: f64,
    pub generality: f64,
    /// Classes without any records are absent.
    pub locality: BTreeMap<LocalityClass, f64>,
    pub fluency: f64,
    pub average: f64,
    pub counts: EvalCounts,
}

impl EvalReport {
    /// Means over edits, and over all locality records per class.
    pub fn aggregate(scores: &[EditScores]) -> Result<Self> {
        if scores.is_empty() {
            return Err(contract!("no edits to aggregate"));
        }
        let n = scores.len() as f64;
        let mut pooled: BTreeMap<LocalityClass, Vec<f64>> = BTreeMap::new();
        for s in scores {
            for (c, v) in &s.locality {
                pooled.entry(*c).or_default().extend_from_slice(v);
            }
        }
        let locality: BTreeMap<_, _> = pooled
            .iter()
            .map(|(c, v)| (*c, 100.0 * v.iter().sum::<f64>() / v.len() as f64))
            .collect();
        let efficacy = 100.0 * scores.iter().map(|s| s.efficacy).sum::<f64>() / n;
        let generality = 100.0 * scores.iter().map(|s| s.generality).sum::<f64>() / n;
        let average = average(efficacy, generality, &locality)?;
        Ok(Self {
            efficacy,
            generality,
            fluency: scores.iter().map(|s| s.fluency).sum::<f64>() / n,
            average,
            counts: EvalCounts {
                edits: scores.len(),
                locality: pooled.iter().map(|(c, v)| (*c, v.len())).collect(),
                fluency_prompts: scores.len(),
            },
            locality,
        })
    }

    pub fn locality_mean(&self) -> Option<f64> {
        if self.locality.is_empty() {
            return None;
        }
        Some(self.locality.values().sum::<f64>() / self.locality.len() as f64)
    }

    /// Checks percent ranges and that the average follows from the parts.
    pub fn check(&self) -> Result<()> {
        let percents = [self.efficacy, self.generality, self.average]
            .into_iter()
            .chain(self.locality.values().copied());
        for p in percents {
            if !(0.0..=100.0).contains(&p) {
                return Err(contract!("percent {p} outside [0, 100]"));
            }
        }
        let avg = average(self.efficacy, self.generality, &self.locality)?;
        if (avg - self.average).abs() > 1e-9 {
            return Err(contract!(
                "stored average {} differs from {avg}",
                self.average
            ));
        }
        Ok(())
    }
}
