// SPDX-License-Identifier: MIT OR Apache-2.0

use alloc::vec::Vec;

use super::hooks::RunSpec;
use super::LanguageModel;
use crate::error::{contract, shape_err, Error, Result};
use crate::numerics::matrix::softmax_in_place;
use crate::numerics::Matrix;

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Teacher-forced probability of `target` given logits of a run over
/// `prompt ++ target[..m-1]`: the product of stepwise softmax probabilities.
pub fn sequence_prob(logits: &Matrix, prompt_len: usize, target: &[u32]) -> Result<f64> {
    if prompt_len == 0 {
        return Err(contract!("empty prompt"));
    }
    if target.is_empty() {
        return Err(contract!("empty target"));
    }
    if logits.rows() < prompt_len + target.len() - 1 {
        return Err(shape_err!(
            "{} logit rows cannot score a {}-token target after {prompt_len} prompt tokens",
            logits.rows(),
            target.len()
        ));
    }
    let mut p = 1.0;
    for (j, &t) in target.iter().enumerate() {
        let mut row = logits.row(prompt_len - 1 + j).to_vec();
        if t as usize >= row.len() {
            return Err(Error::Vocab {
                id: t,
                vocab: row.len(),
            });
        }
        softmax_in_place(&mut row);
        p *= row[t as usize];
    }
    Ok(p)
}

/// Input sequence for teacher forcing `target` after `prompt`.
pub(crate) fn teacher_forcing_input(prompt: &[u32], target: &[u32]) -> Vec<u32> {
    let mut seq = Vec::with_capacity(prompt.len() + target.len());
    seq.extend_from_slice(prompt);
    seq.extend_from_slice(&target[..target.len().saturating_sub(1)]);
    seq
}

/// Probability of `target` after the prompt in `run.tokens`, with the run's
/// noise, patches and freezes applied.
pub fn next_token_prob<M: LanguageModel + ?Sized>(
    model: &M,
    run: &RunSpec<'_>,
    target: &[u32],
) -> Result<f64> {
    if run.tokens.is_empty() {
        return Err(contract!("empty prompt"));
    }
    if target.is_empty() {
        return Err(contract!("empty target"));
    }
    let seq = teacher_forcing_input(run.tokens, target);
    let full = RunSpec {
        tokens: &seq,
        noise: run.noise,
        patches: run.patches.clone(),
        freezes: run.freezes.clone(),
        capture: false,
    };
    let out = model.forward(&full)?;
    sequence_prob(&out.logits, run.tokens.len(), target)
}

/// Argmax predictions at each target position under teacher forcing.
pub fn teacher_forced_argmax<M: LanguageModel + ?Sized>(
    model: &M,
    prompt: &[u32],
    target: &[u32],
) -> Result<Vec<u32>> {
    if prompt.is_empty() || target.is_empty() {
        return Err(contract!("teacher forcing needs a prompt and a target"));
    }
    let seq = teacher_forcing_input(prompt, target);
    let out = model.forward(&RunSpec::clean(&seq))?;
    Ok((0..target.len())
        .map(|j| argmax(out.logits.row(prompt.len() - 1 + j)) as u32)
        .collect())
}

/// Greedy decoding of `max_new` tokens.
pub fn generate<M: LanguageModel + ?Sized>(
    model: &M,
    prompt: &[u32],
    max_new: usize,
) -> Result<Vec<u32>> {
    if max_new == 0 {
        return Err(contract!("max_new must be at least 1"));
    }
    if prompt.is_empty() {
        return Err(contract!("empty prompt"));
    }
    let limit = model.config().max_seq;
    if prompt.len() + max_new - 1 > limit {
        return Err(contract!(
            "prompt of {} tokens plus {max_new} new tokens exceeds max_seq {limit}",
            prompt.len()
        ));
    }
    let mut seq = prompt.to_vec();
    let mut out = Vec::with_capacity(max_new);
    for _ in 0..max_new {
        let res = model.forward(&RunSpec::clean(&seq))?;
        let next = argmax(res.logits.row(seq.len() - 1)) as u32;
        out.push(next);
        seq.push(next);
    }
    Ok(out)
}
