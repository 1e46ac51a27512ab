// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic medical knowledge graph.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub(crate) const ENTITY_NAMES: [&str; 60] = [
    "primaquine",
    "metformin",
    "aspirin",
    "warfarin",
    "lisinopril",
    "atorvastatin",
    "amoxicillin",
    "ibuprofen",
    "omeprazole",
    "prednisone",
    "digoxin",
    "furosemide",
    "heparin",
    "codeine",
    "naproxen",
    "malaria",
    "diabetes",
    "hypertension",
    "asthma",
    "pneumonia",
    "migraine",
    "gout",
    "anemia",
    "arthritis",
    "epilepsy",
    "psoriasis",
    "glaucoma",
    "nausea",
    "dizziness",
    "headache",
    "fatigue",
    "rash",
    "insomnia",
    "cough",
    "edema",
    "tremor",
    "fever",
    "jaundice",
    "bradycardia",
    "hepatitis",
    "tetanus",
    "cirrhosis",
    "lupus",
    "rickets",
    "scurvy",
    "vertigo",
    "pruritus",
    "myalgia",
    "clopidogrel",
    "allopurinol",
    "levothyroxine",
    "methotrexate",
    "tamoxifen",
    "quinine",
    "lithium",
    "insulin",
    "ondansetron",
    "cetirizine",
    "dapsone",
    "colchicine",
];

/// A relation with its question and paraphrase templates. `{}` marks the
/// head-entity slot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationTemplate {
    pub name: String,
    pub question: String,
    pub rephrase: String,
    pub topic: String,
}

pub(crate) const RELATIONS: [(&str, &str, &str, &str); 8] = [
    (
        "side_effect",
        "What side effect is caused by {}?",
        "What adverse effect is attributed to {}?",
        "pharmacology",
    ),
    (
        "interacts_with",
        "Which drug interacts with {}?",
        "What medication has a known interaction with {}?",
        "pharmacology",
    ),
    (
        "treats",
        "Which condition is treated by {}?",
        "What disorder is managed with {}?",
        "therapeutics",
    ),
    (
        "first_line_for",
        "Which drug is prescribed first for {}?",
        "What is the first-line medication for {}?",
        "therapeutics",
    ),
    (
        "symptom_of",
        "What symptom is associated with {}?",
        "What clinical sign accompanies {}?",
        "diagnosis",
    ),
    (
        "comorbid_with",
        "Which disease often occurs with {}?",
        "What condition is commonly comorbid with {}?",
        "diagnosis",
    ),
    (
        "risk_factor",
        "What is a risk factor for {}?",
        "Which exposure raises the risk of {}?",
        "epidemiology",
    ),
    (
        "diagnosed_by",
        "Which test detects {}?",
        "What examination is used to confirm {}?",
        "epidemiology",
    ),
];

/// Default relation templates.
pub fn default_templates() -> Vec<RelationTemplate> {
    RELATIONS
        .iter()
        .map(|(n, q, r, t)| RelationTemplate {
            name: n.to_string(),
            question: q.to_string(),
            rephrase: r.to_string(),
            topic: t.to_string(),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub head: usize,
    pub relation: usize,
    pub tail: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Kg {
    pub entities: Vec<String>,
    pub relations: Vec<RelationTemplate>,
    pub triples: Vec<Triple>,
}

impl Kg {
    pub fn entity(&self, id: usize) -> &str {
        &self.entities[id]
    }

    pub fn relation(&self, id: usize) -> &RelationTemplate {
        &self.relations[id]
    }

    /// Distinct tails of `relation`, ascending.
    pub fn tails_of(&self, relation: usize) -> Vec<usize> {
        self.triples
            .iter()
            .filter(|t| t.relation == relation)
            .map(|t| t.tail)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Checks the degree structure needed by the locality builders: every
    /// relation has at least three distinct tails, and every tail has at
    /// least two distinct heads under some relation.
    pub fn audit(&self) -> Result<()> {
        if self.triples.is_empty() {
            return Err(Error::Generation("empty knowledge graph".to_string()));
        }
        let mut seen = BTreeSet::new();
        for t in &self.triples {
            if t.head == t.tail {
                return Err(Error::Generation(alloc::format!(
                    "self-loop on {}",
                    self.entity(t.head)
                )));
            }
            if !seen.insert((t.head, t.relation)) {
                return Err(Error::Generation(alloc::format!(
                    "duplicate ({}, {})",
                    self.entity(t.head),
                    self.relation(t.relation).name
                )));
            }
        }
        for r in 0..self.relations.len() {
            let n = self.tails_of(r).len();
            if n < 3 {
                return Err(Error::Generation(alloc::format!(
                    "relation {} has {n} distinct tails",
                    self.relation(r).name
                )));
            }
        }
        let mut heads: BTreeMap<(usize, usize), BTreeSet<usize>> = BTreeMap::new();
        for t in &self.triples {
            heads
                .entry((t.tail, t.relation))
                .or_default()
                .insert(t.head);
        }
        let tails: BTreeSet<usize> = self.triples.iter().map(|t| t.tail).collect();
        for tail in tails {
            let ok = heads
                .range((tail, 0)..(tail + 1, 0))
                .any(|(_, hs)| hs.len() >= 2);
            if !ok {
                return Err(Error::Generation(alloc::format!(
                    "tail {} has fewer than two heads under every relation",
                    self.entity(tail)
                )));
            }
        }
        Ok(())
    }
}

const RETRY_BUDGET: u64 = 64;

/// Random KG whose relations draw tails from small per-relation pools, so
/// tails repeat across heads. Retries with fresh draws until the audit
/// passes.
pub fn gen_synthetic_kg(
    n_entities: usize,
    n_relations: usize,
    n_triples: usize,
    seed: u64,
) -> Result<Kg> {
    if n_entities > ENTITY_NAMES.len() || n_entities < 4 {
        return Err(Error::Generation(alloc::format!(
            "n_entities must lie in 4..={}",
            ENTITY_NAMES.len()
        )));
    }
    if n_relations == 0 || n_relations > RELATIONS.len() {
        return Err(Error::Generation(alloc::format!(
            "n_relations must lie in 1..={}",
            RELATIONS.len()
        )));
    }
    if n_triples > n_entities * n_relations {
        return Err(Error::Generation(alloc::format!(
            "{n_triples} triples exceed the {} distinct (head, relation) pairs",
            n_entities * n_relations
        )));
    }
    let entities: Vec<String> = ENTITY_NAMES[..n_entities]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let relations = default_templates().into_iter().take(n_relations).collect();
    if n_triples == 0 {
        return Ok(Kg {
            entities,
            relations,
            triples: Vec::new(),
        });
    }
    // pools sized so each tail averages about five heads
    let per_rel = n_triples.div_ceil(n_relations);
    let pool_size = per_rel.div_ceil(5).clamp(3, n_entities - 1);
    let mut last_err = None;
    for attempt in 0..RETRY_BUDGET {
        let mut r = rng::seeded(rng::indexed_seed(rng::sub_seed(seed, "kg"), attempt));
        let pools: Vec<Vec<usize>> = (0..n_relations)
            .map(|_| {
                let mut ids: Vec<usize> = (0..n_entities).collect();
                ids.shuffle(&mut r);
                ids.truncate(pool_size);
                ids.sort_unstable();
                ids
            })
            .collect();
        let mut pairs: Vec<(usize, usize)> = (0..n_entities)
            .flat_map(|h| (0..n_relations).map(move |rel| (h, rel)))
            .collect();
        pairs.shuffle(&mut r);
        let mut triples = Vec::with_capacity(n_triples);
        for (head, relation) in pairs {
            if triples.len() == n_triples {
                break;
            }
            let pool: Vec<usize> = pools[relation]
                .iter()
                .copied()
                .filter(|&t| t != head)
                .collect();
            let tail = pool[r.random_range(0..pool.len())];
            triples.push(Triple {
                head,
                relation,
                tail,
            });
        }
        if triples.len() < n_triples {
            last_err = Some(Error::Generation(
                "not enough (head, relation) pairs".to_string(),
            ));
            continue;
        }
        triples.sort_unstable();
        let kg = Kg {
            entities: entities.clone(),
            relations: default_templates().into_iter().take(n_relations).collect(),
            triples,
        };
        match kg.audit() {
            Ok(()) => return Ok(kg),
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.unwrap_or_else(|| Error::Generation("retry budget exhausted".to_string())))
}

/// Draws `t*` uniformly from the other tails of the triple's relation.
pub fn sample_counterfactual(kg: &Kg, triple: &Triple, seed: u64) -> Result<usize> {
    let pool: Vec<usize> = kg
        .tails_of(triple.relation)
        .into_iter()
        .filter(|&t| t != triple.tail)
        .collect();
    if pool.is_empty() {
        return Err(Error::Sampling(alloc::format!(
            "no alternative tail for relation {}",
            kg.relation(triple.relation).name
        )));
    }
    let mut r = rng::seeded(rng::sub_seed(seed, "counterfactual"));
    Ok(pool[r.random_range(0..pool.len())])
}
