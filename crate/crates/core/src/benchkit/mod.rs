// SPDX-License-Identifier: MIT OR Apache-2.0

//! Desk-scale counterfactual editing benchmark.
//!
//! A synthetic KG is rendered into QA pairs; each triple becomes an edit
//! record with a counterfactual target, a paraphrase, and five locality
//! challenge sets:
//!
//! * `td`: other heads sharing the tail
//! * `em`: other relations of the same head
//! * `ss`: nearest triples in RotatE score space
//! * `ts`: nearest questions by character 3-gram TF-IDF
//! * `ct`: questions from relations of the same topic

mod kg;
mod rotate;
mod text;
mod tfidf;

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;
use core::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::rng;

pub use kg::{
    default_templates, gen_synthetic_kg, sample_counterfactual, Kg, RelationTemplate, Triple,
};
pub use rotate::{train_rotate, KgEmbedding, RotateConfig};
pub use text::{normalize, rephrase, triple_to_qa, words, AnswerStyle, Qa, Tokenizer};
pub use tfidf::TfIdfIndex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LocalityClass {
    Td,
    Em,
    Ss,
    Ts,
    Ct,
}

impl LocalityClass {
    pub const ALL: [LocalityClass; 5] = [
        LocalityClass::Td,
        LocalityClass::Em,
        LocalityClass::Ss,
        LocalityClass::Ts,
        LocalityClass::Ct,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LocalityClass::Td => "td",
            LocalityClass::Em => "em",
            LocalityClass::Ss => "ss",
            LocalityClass::Ts => "ts",
            LocalityClass::Ct => "ct",
        }
    }
}

impl fmt::Display for LocalityClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalityQa {
    pub q: String,
    pub a: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditRecord {
    pub id: String,
    /// Knowledge type: the relation name.
    #[serde(rename = "type")]
    pub kind: String,
    pub question: String,
    pub subject: String,
    /// Word positions of the subject in the question, end exclusive.
    pub subject_span: [usize; 2],
    pub answer_true: String,
    pub answer_edit: String,
    pub rephrase: String,
    pub topic: String,
    pub locality: BTreeMap<LocalityClass, Vec<LocalityQa>>,
}

impl EditRecord {
    /// Subject token positions in the prompt, which starts with BOS.
    pub fn prompt_subject_span(&self) -> core::ops::Range<usize> {
        self.subject_span[0] + 1..self.subject_span[1] + 1
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        [
            self.question.as_str(),
            self.rephrase.as_str(),
            self.answer_true.as_str(),
            self.answer_edit.as_str(),
        ]
        .into_iter()
        .chain(
            self.locality
                .values()
                .flatten()
                .flat_map(|qa| [qa.q.as_str(), qa.a.as_str()]),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub n_entities: usize,
    pub n_relations: usize,
    pub n_triples: usize,
    pub style: AnswerStyle,
    /// Locality QAs per class per record.
    pub k: usize,
    pub rotate: RotateConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_entities: 40,
            n_relations: 6,
            n_triples: 200,
            style: AnswerStyle::Entity,
            k: 3,
            rotate: RotateConfig::default(),
        }
    }
}

impl AnswerStyle {
    pub fn dataset_name(self) -> &'static str {
        match self {
            AnswerStyle::Entity => "medcf",
            AnswerStyle::Explanation => "medfe",
        }
    }
}

/// Everything produced while building a dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub style: AnswerStyle,
    pub kg: Kg,
    pub embedding: KgEmbedding,
    pub rotate_losses: Vec<f64>,
    pub records: Vec<EditRecord>,
    /// Omitted locality classes with their reasons.
    pub notes: Vec<String>,
}

impl Dataset {
    pub fn name(&self) -> &'static str {
        self.style.dataset_name()
    }
}

/// Shared inputs of the locality builders.
pub struct LocalityContext<'a> {
    pub kg: &'a Kg,
    pub embedding: &'a KgEmbedding,
    /// Index over the main-template question of every triple, in KG order.
    pub questions: &'a TfIdfIndex,
    pub style: AnswerStyle,
    pub k: usize,
    pub seed: u64,
}

fn qa_of(ctx: &LocalityContext<'_>, i: usize) -> Result<LocalityQa> {
    let qa = triple_to_qa(ctx.kg, &ctx.kg.triples[i], ctx.style)?;
    Ok(LocalityQa {
        q: qa.question,
        a: qa.answer,
    })
}

fn sample(mut pool: Vec<usize>, k: usize, seed: u64) -> Vec<usize> {
    let mut r = rng::seeded(seed);
    pool.shuffle(&mut r);
    pool.truncate(k);
    pool.sort_unstable();
    pool
}

/// Euclidean distance between triples in RotatE score space.
pub fn ss_distance(emb: &KgEmbedding, a: &Triple, b: &Triple) -> f64 {
    let (fa, fb) = (emb.triple_features(a), emb.triple_features(b));
    libm::sqrt(fa.iter().zip(&fb).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// Indices of the `k` candidates ranked best by `key` (ties by index).
fn nearest(cands: Vec<usize>, k: usize, key: impl Fn(usize) -> f64) -> Vec<usize> {
    let mut scored: Vec<(f64, usize)> = cands.into_iter().map(|i| (key(i), i)).collect();
    scored.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap_or(Ordering::Equal)
            .then(a.1.cmp(&b.1))
    });
    scored.into_iter().take(k).map(|(_, i)| i).collect()
}

/// Locality sets for triple `edit`, as triple indices. Infeasible classes
/// are left out and explained in the returned notes.
pub fn locality_indices(
    ctx: &LocalityContext<'_>,
    edit: usize,
) -> Result<(BTreeMap<LocalityClass, Vec<usize>>, Vec<String>)> {
    if ctx.k == 0 {
        return Err(contract!("k must be at least 1"));
    }
    let triples = &ctx.kg.triples;
    let e = triples[edit];
    let others = || (0..triples.len()).filter(move |&i| i != edit);
    let class_seed =
        |c: LocalityClass| rng::indexed_seed(rng::sub_seed(ctx.seed, c.as_str()), edit as u64);
    let mut out = BTreeMap::new();

    let td_pool: Vec<usize> = others()
        .filter(|&i| triples[i].tail == e.tail && triples[i].head != e.head)
        .collect();
    let td = sample(td_pool, ctx.k, class_seed(LocalityClass::Td));
    let em_pool: Vec<usize> = others().filter(|&i| triples[i].head == e.head).collect();
    let em = sample(em_pool, ctx.k, class_seed(LocalityClass::Em));
    let ss_pool: Vec<usize> = others()
        .filter(|i| !td.contains(i) && !em.contains(i))
        .collect();
    let ss = nearest(ss_pool, ctx.k, |i| {
        ss_distance(ctx.embedding, &e, &triples[i])
    });
    let ts = nearest(others().collect(), ctx.k, |i| {
        -ctx.questions.cosine(edit, i)
    });
    let topic = &ctx.kg.relation(e.relation).topic;
    let ct_pool: Vec<usize> = others()
        .filter(|&i| ctx.kg.relation(triples[i].relation).topic == *topic)
        .collect();
    let ct = sample(ct_pool, ctx.k, class_seed(LocalityClass::Ct));

    let mut notes = Vec::new();
    for (class, set) in [
        (LocalityClass::Td, td),
        (LocalityClass::Em, em),
        (LocalityClass::Ss, ss),
        (LocalityClass::Ts, ts),
        (LocalityClass::Ct, ct),
    ] {
        if set.is_empty() {
            notes.push(alloc::format!("triple {edit}: no candidates for {class}"));
        } else {
            out.insert(class, set);
        }
    }
    Ok((out, notes))
}

pub fn build_locality_sets(
    ctx: &LocalityContext<'_>,
    edit: usize,
) -> Result<(BTreeMap<LocalityClass, Vec<LocalityQa>>, Vec<String>)> {
    let (idx, notes) = locality_indices(ctx, edit)?;
    let mut out = BTreeMap::new();
    for (class, set) in idx {
        out.insert(
            class,
            set.into_iter()
                .map(|i| qa_of(ctx, i))
                .collect::<Result<_>>()?,
        );
    }
    Ok((out, notes))
}

/// Generates the KG, trains RotatE and renders one record per triple.
pub fn build_dataset(cfg: &DatasetConfig, seed: u64) -> Result<Dataset> {
    let kg = gen_synthetic_kg(cfg.n_entities, cfg.n_relations, cfg.n_triples, seed)?;
    kg.audit()?;
    let (embedding, rotate_losses) = train_rotate(&kg, &cfg.rotate, seed)?;
    let questions: Vec<String> = kg
        .triples
        .iter()
        .map(|t| triple_to_qa(&kg, t, cfg.style).map(|qa| qa.question))
        .collect::<Result<_>>()?;
    let index = TfIdfIndex::build(&questions);
    let ctx = LocalityContext {
        kg: &kg,
        embedding: &embedding,
        questions: &index,
        style: cfg.style,
        k: cfg.k,
        seed: rng::sub_seed(seed, "locality"),
    };
    let cf_seed = rng::sub_seed(seed, "counterfactual");
    let mut records = Vec::with_capacity(kg.triples.len());
    let mut notes = Vec::new();
    for (i, t) in kg.triples.iter().enumerate() {
        let qa = triple_to_qa(&kg, t, cfg.style)?;
        let (reph, _) = rephrase(&kg, t)?;
        let star = sample_counterfactual(&kg, t, rng::indexed_seed(cf_seed, i as u64))?;
        let (locality, n) = build_locality_sets(&ctx, i)?;
        notes.extend(n);
        let rel = kg.relation(t.relation);
        records.push(EditRecord {
            id: alloc::format!("{}-{:04}", cfg.style.dataset_name(), i),
            kind: rel.name.clone(),
            question: qa.question,
            subject: qa.subject,
            subject_span: [qa.subject_span.start, qa.subject_span.end],
            answer_true: qa.answer,
            answer_edit: cfg.style.render(&kg, star),
            rephrase: reph,
            topic: rel.topic.clone(),
            locality,
        });
    }
    Ok(Dataset {
        style: cfg.style,
        kg,
        embedding,
        rotate_losses,
        records,
        notes,
    })
}

/// Tokenizer over every text of the records.
pub fn build_tokenizer(records: &[EditRecord]) -> Tokenizer {
    Tokenizer::build(records.iter().flat_map(EditRecord::texts))
}

/// Export-time validity counts; all zero for a valid dataset.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetAudit {
    pub records: usize,
    pub unk_tokens: usize,
    pub span_failures: usize,
    pub leaks: usize,
}

impl DatasetAudit {
    pub fn is_clean(&self) -> bool {
        self.unk_tokens == 0 && self.span_failures == 0 && self.leaks == 0
    }
}

/// Checks tokenization, subject spans and locality leakage by string
/// comparison.
pub fn audit_dataset(records: &[EditRecord], tok: &Tokenizer) -> DatasetAudit {
    let mut a = DatasetAudit {
        records: records.len(),
        ..Default::default()
    };
    for r in records {
        a.unk_tokens += r.texts().map(|t| tok.count_unk(t)).sum::<usize>();
        let ids = tok.encode(&r.question);
        let [s, e] = r.subject_span;
        if e > ids.len() || s >= e || tok.decode(&ids[s..e]) != normalize(&r.subject) {
            a.span_failures += 1;
        }
        let q = normalize(&r.question);
        let reph = normalize(&r.rephrase);
        for (class, set) in &r.locality {
            for qa in set {
                let lq = normalize(&qa.q);
                if lq == q || lq == reph {
                    a.leaks += 1;
                }
                if *class == LocalityClass::Td && qa.a == r.answer_edit {
                    a.leaks += 1;
                }
            }
        }
        if r.answer_edit == r.answer_true {
            a.leaks += 1;
        }
    }
    a
}

/// Seeded train/valid/test split; valid and test sizes are rounded and
/// train takes the rest.
pub fn split_records(
    records: &[EditRecord],
    ratios: [f64; 3],
    seed: u64,
) -> Result<[Vec<EditRecord>; 3]> {
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r))
        || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(contract!(
            "split ratios {ratios:?} must be in [0, 1] and sum to 1"
        ));
    }
    let n = records.len();
    let n_valid = libm::round(n as f64 * ratios[1]) as usize;
    let n_test = (libm::round(n as f64 * ratios[2]) as usize).min(n - n_valid);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::seeded(rng::sub_seed(seed, "split")));
    let take = |ix: &[usize]| {
        let mut ix = ix.to_vec();
        ix.sort_unstable();
        ix.into_iter()
            .map(|i| records[i].clone())
            .collect::<Vec<_>>()
    };
    let n_train = n - n_valid - n_test;
    Ok([
        take(&order[..n_train]),
        take(&order[n_train..n_train + n_valid]),
        take(&order[n_train + n_valid..]),
    ])
}

/// Record count per knowledge type.
pub fn type_distribution(records: &[EditRecord]) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for r in records {
        *out.entry(r.kind.clone()).or_insert(0) += 1;
    }
    out
}

#[cfg(test)]
mod tests;
