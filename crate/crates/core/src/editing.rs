// SPDX-License-Identifier: MIT OR Apache-2.0

//! Base-model pretraining and single-edit adapter training.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::adapters::{attach, AdaptedModel, AdapterSite, WeightSelection};
use crate::error::{contract, Error, Result};
use crate::model::{
    build_graph, teacher_forced_argmax, LanguageModel, MicroTransformer, ModelConfig, ParamVars,
    RunSpec,
};
use crate::numerics::{Matrix, Tape, Var};
use crate::rng;
use crate::scaling::ScalePair;

/// Adam state over a fixed list of tensors.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: i32,
}

impl Adam {
    pub fn new(shapes: impl IntoIterator<Item = (usize, usize)>, lr: f64) -> Self {
        let (m, v) = shapes
            .into_iter()
            .map(|(r, c)| (Matrix::zeros(r, c), Matrix::zeros(r, c)))
            .unzip();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m,
            v,
            t: 0,
        }
    }

    /// One bias-corrected update; a missing gradient counts as zero.
    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[Option<&Matrix>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(contract!(
                "adam tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            ));
        }
        self.t += 1;
        let c1 = 1.0 - libm::pow(self.beta1, f64::from(self.t));
        let c2 = 1.0 - libm::pow(self.beta2, f64::from(self.t));
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let zero;
            let g = match grads[i] {
                Some(g) => g.data(),
                None => {
                    zero = vec![0.0; m.len()];
                    &zero
                }
            };
            for (((w, m), v), g) in p.data_mut().iter_mut().zip(m).zip(v).zip(g) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *w -= self.lr * (*m / c1) / (libm::sqrt(*v / c2) + self.eps);
            }
        }
        Ok(())
    }
}

/// A prompt with the answer it should produce.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fact {
    pub prompt: Vec<u32>,
    pub answer: Vec<u32>,
}

impl Fact {
    fn sequence(&self) -> Vec<u32> {
        let mut s = self.prompt.clone();
        s.extend_from_slice(&self.answer[..self.answer.len() - 1]);
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub max_epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Stop once exact-answer accuracy reaches this fraction.
    pub target_accuracy: f64,
    /// Keep training at least this long even once the target is reached.
    pub min_epochs: usize,
    /// Epochs between accuracy checks.
    pub eval_every: usize,
    pub clip_norm: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 120,
            lr: 3e-3,
            batch_size: 16,
            target_accuracy: 0.99,
            min_epochs: 0,
            eval_every: 5,
            clip_norm: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub model: MicroTransformer,
    /// Mean next-token loss per epoch.
    pub losses: Vec<f64>,
    pub accuracy: f64,
    pub epochs: usize,
}

/// Fraction of facts whose greedy answer matches exactly.
pub fn fact_accuracy<M: LanguageModel + ?Sized>(model: &M, facts: &[Fact]) -> Result<f64> {
    if facts.is_empty() {
        return Err(contract!("accuracy over zero facts"));
    }
    let mut hits = 0usize;
    for f in facts {
        if teacher_forced_argmax(model, &f.prompt, &f.answer)? == f.answer {
            hits += 1;
        }
    }
    Ok(hits as f64 / facts.len() as f64)
}

fn clip(grads: &mut [Option<Matrix>], max_norm: f64) {
    let sq: f64 = grads
        .iter()
        .flatten()
        .map(|g| g.data().iter().map(|x| x * x).sum::<f64>())
        .sum();
    let norm = libm::sqrt(sq);
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
}

/// Next-token training of every parameter on `prompt ++ answer`
/// sequences, packed into mini-batches.
pub fn pretrain_base(
    facts: &[Fact],
    model_config: &ModelConfig,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<PretrainOutcome> {
    if facts.is_empty() {
        return Err(contract!("pretraining corpus is empty"));
    }
    if cfg.batch_size == 0 || cfg.max_epochs == 0 || !(cfg.lr > 0.0) {
        return Err(contract!(
            "batch size, epochs and learning rate must be positive"
        ));
    }
    let mut model = MicroTransformer::new(ModelConfig {
        seed: rng::sub_seed(seed, "pretrain-init"),
        ..model_config.clone()
    })?;
    let seqs: Vec<Vec<u32>> = facts
        .iter()
        .map(|f| {
            if f.prompt.is_empty() || f.answer.is_empty() {
                return Err(contract!("facts need a prompt and an answer"));
            }
            let s = f.sequence();
            model.check_tokens(&s)?;
            Ok(s)
        })
        .collect::<Result<_>>()?;
    let mut adam = Adam::new(model.tensors().iter().map(|(_, t)| t.shape()), cfg.lr);
    let mut order: Vec<usize> = (0..facts.len()).collect();
    let mut r = rng::seeded(rng::sub_seed(seed, "pretrain-order"));
    let mut losses = Vec::new();
    let mut accuracy = 0.0;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut r);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let runs: Vec<RunSpec<'_>> = batch.iter().map(|&i| RunSpec::clean(&seqs[i])).collect();
            let mut tape = Tape::new();
            let params = ParamVars::bind(&mut tape, &model, true);
            let out = build_graph(&mut tape, &model, &params, None, &runs)?;
            // every position after BOS is a target
            let mut targets = Vec::new();
            for (&i, seg) in batch.iter().zip(&out.segments) {
                let f = &facts[i];
                let full: Vec<u32> = f.prompt.iter().chain(&f.answer).copied().collect();
                for p in 0..seg.len() {
                    targets.push((seg.start + p, full[p + 1] as usize));
                }
            }
            let loss = tape.cross_entropy(out.logits, &targets)?;
            total += tape.value(loss).as_scalar()? * batch.len() as f64;
            let grads = tape.backward(loss)?;
            let vars: Vec<Var> = params.ordered();
            let mut g: Vec<Option<Matrix>> = vars.iter().map(|v| grads.get(*v).cloned()).collect();
            clip(&mut g, cfg.clip_norm);
            let grefs: Vec<Option<&Matrix>> = g.iter().map(Option::as_ref).collect();
            let mut ps: Vec<&mut Matrix> =
                model.tensors_mut().into_iter().map(|(_, t)| t).collect();
            adam.step(&mut ps, &grefs)?;
        }
        let mean = total / facts.len() as f64;
        if !mean.is_finite() {
            return Err(Error::TrainingFailure {
                accuracy,
                epochs: epoch,
            });
        }
        losses.push(mean);
        let due = epoch % cfg.eval_every.max(1) == 0 && epoch >= cfg.min_epochs;
        if due || epoch == cfg.max_epochs {
            accuracy = fact_accuracy(&model, facts)?;
            if accuracy >= cfg.target_accuracy {
                return Ok(PretrainOutcome {
                    model,
                    losses,
                    accuracy,
                    epochs: epoch,
                });
            }
        }
    }
    Err(Error::TrainingFailure {
        accuracy,
        epochs: cfg.max_epochs,
    })
}

/// Hyper-parameters of the single-edit loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub max_steps: usize,
    /// Stop once the mean NLL of the target tokens falls below this.
    pub target_nll_stop: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            max_steps: 100,
            target_nll_stop: 0.01,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(contract!("learning rate must be positive"));
        }
        if self.max_steps == 0 {
            return Err(contract!("max_steps must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditOutcome {
    pub selection: WeightSelection,
    pub scales: ScalePair,
    pub sites: Vec<AdapterSite>,
    /// Loss before each update and after the last one.
    pub losses: Vec<f64>,
    /// Optimizer updates taken.
    pub steps: usize,
    pub trainable_parameters: usize,
}

impl EditOutcome {
    pub fn final_loss(&self) -> f64 {
        *self.losses.last().expect("at least one loss")
    }

    /// Rebuilds the trained adapted model over `base`.
    pub fn adapted<'a>(&self, base: &'a MicroTransformer) -> Result<AdaptedModel<'a>> {
        AdaptedModel::from_parts(
            base,
            self.selection.clone(),
            self.scales.clone(),
            self.sites.clone(),
        )
    }
}

fn edit_loss(
    model: &AdaptedModel<'_>,
    seq: &[u32],
    prompt_len: usize,
    target: &[u32],
    with_grad: bool,
) -> Result<(f64, Option<Vec<Option<Matrix>>>)> {
    let base = model.base();
    let mut tape = Tape::new();
    let params = ParamVars::bind(&mut tape, base, false);
    let sites = model.bind_sites(&mut tape, with_grad);
    let out = build_graph(
        &mut tape,
        base,
        &params,
        Some(&sites),
        &[RunSpec::clean(seq)],
    )?;
    let targets: Vec<(usize, usize)> = target
        .iter()
        .enumerate()
        .map(|(j, &t)| (prompt_len - 1 + j, t as usize))
        .collect();
    let loss = tape.cross_entropy(out.logits, &targets)?;
    let value = tape.value(loss).as_scalar()?;
    if !with_grad {
        return Ok((value, None));
    }
    let grads = tape.backward(loss)?;
    let g = model
        .sites()
        .iter()
        .flat_map(|s| {
            let v = sites[&(s.layer, s.weight)];
            [grads.get(v.b).cloned(), grads.get(v.a).cloned()]
        })
        .collect();
    Ok((value, Some(g)))
}

/// Attaches adapters to `base` and trains them so that `prompt` maps to
/// `target`, with teacher-forced cross-entropy on the target tokens only.
pub fn apply_edit(
    base: &MicroTransformer,
    prompt: &[u32],
    target: &[u32],
    selection: &WeightSelection,
    scales: &ScalePair,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<EditOutcome> {
    cfg.validate()?;
    if prompt.is_empty() || target.is_empty() {
        return Err(contract!("an edit needs a prompt and a target"));
    }
    let mut model = attach(base, selection, scales, rng::sub_seed(seed, "edit-init"))?;
    let mut seq = prompt.to_vec();
    seq.extend_from_slice(&target[..target.len() - 1]);
    base.check_tokens(&seq)?;
    base.check_tokens(target)?;

    let mut adam = Adam::new(
        model
            .sites()
            .iter()
            .flat_map(|s| [s.b.shape(), s.a.shape()]),
        cfg.lr,
    );
    let mut losses = Vec::new();
    let mut steps = 0;
    loop {
        let train = steps < cfg.max_steps && model.trainable_parameters() > 0;
        let (loss, grads) = edit_loss(&model, &seq, prompt.len(), target, train)?;
        if !loss.is_finite() {
            return Err(contract!("edit loss diverged at step {steps}"));
        }
        losses.push(loss);
        let Some(grads) = grads.filter(|_| loss >= cfg.target_nll_stop) else {
            break;
        };
        let grefs: Vec<Option<&Matrix>> = grads.iter().map(Option::as_ref).collect();
        let mut ps: Vec<&mut Matrix> = model
            .sites_mut()
            .iter_mut()
            .flat_map(|s| [&mut s.b, &mut s.a])
            .collect();
        adam.step(&mut ps, &grefs)?;
        steps += 1;
    }
    Ok(EditOutcome {
        selection: selection.clone(),
        scales: scales.clone(),
        trainable_parameters: model.trainable_parameters(),
        sites: model.sites().to_vec(),
        losses,
        steps,
    })
}
