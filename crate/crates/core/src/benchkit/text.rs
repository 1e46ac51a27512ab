// SPDX-License-Identifier: MIT OR Apache-2.0

//! Word tokenizer and question templating.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::ops::Range;

use serde::{Deserialize, Serialize};

use super::kg::{Kg, Triple};
use crate::error::{contract, Result};
use crate::model::{BOS, UNK};

/// Lowercased words; every punctuation character is its own token.
pub fn words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() {
            cur.extend(c.to_lowercase());
            continue;
        }
        if !cur.is_empty() {
            out.push(core::mem::take(&mut cur));
        }
        if !c.is_whitespace() {
            out.push(c.to_string());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Closed word vocabulary; ids 0 and 1 are BOS and UNK.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Tokenizer {
    vocab: Vec<String>,
    index: BTreeMap<String, u32>,
}

const BOS_TOKEN: &str = "<bos>";
const UNK_TOKEN: &str = "<unk>";

impl Tokenizer {
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<String> = texts.into_iter().flat_map(words).collect();
        let mut vocab = alloc::vec![BOS_TOKEN.to_string(), UNK_TOKEN.to_string()];
        vocab.extend(words);
        Self::from(vocab)
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        words(text)
            .iter()
            .map(|w| self.index.get(w).copied().unwrap_or(UNK))
            .collect()
    }

    /// `BOS` followed by the encoded text.
    pub fn encode_prompt(&self, text: &str) -> Vec<u32> {
        let mut ids = alloc::vec![BOS];
        ids.extend(self.encode(text));
        ids
    }

    pub fn word(&self, id: u32) -> &str {
        self.vocab
            .get(id as usize)
            .map_or(UNK_TOKEN, String::as_str)
    }

    /// Space-joined words.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for (i, &id) in ids.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            out.push_str(self.word(id));
        }
        out
    }

    pub fn count_unk(&self, text: &str) -> usize {
        self.encode(text).iter().filter(|&&t| t == UNK).count()
    }
}

impl From<Vec<String>> for Tokenizer {
    fn from(vocab: Vec<String>) -> Self {
        let index = vocab
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Self { vocab, index }
    }
}

impl From<Tokenizer> for Vec<String> {
    fn from(t: Tokenizer) -> Self {
        t.vocab
    }
}

/// Canonical form used to compare a subject with its detokenized span.
pub fn normalize(text: &str) -> String {
    words(text).join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Qa {
    pub question: String,
    pub answer: String,
    pub subject: String,
    /// Word positions of the subject inside `words(question)`.
    pub subject_span: Range<usize>,
}

fn fill(template: &str, subject: &str) -> Result<(String, Range<usize>)> {
    let Some((pre, post)) = template.split_once("{}") else {
        return Err(contract!("template {template:?} has no subject slot"));
    };
    if post.contains("{}") {
        return Err(contract!("template {template:?} has two subject slots"));
    }
    let start = words(pre).len();
    let span = start..start + words(subject).len();
    Ok((alloc::format!("{pre}{subject}{post}"), span))
}

/// Question and span for the triple's head under the relation template.
pub fn triple_to_qa(kg: &Kg, triple: &Triple, kind: AnswerStyle) -> Result<Qa> {
    let rel = kg
        .relations
        .get(triple.relation)
        .ok_or_else(|| contract!("no template for relation {}", triple.relation))?;
    let subject = kg.entity(triple.head).to_string();
    let (question, subject_span) = fill(&rel.question, &subject)?;
    Ok(Qa {
        question,
        answer: kind.render(kg, triple.tail),
        subject,
        subject_span,
    })
}

/// The relation's paraphrase template applied to the same head.
pub fn rephrase(kg: &Kg, triple: &Triple) -> Result<(String, Range<usize>)> {
    let rel = kg
        .relations
        .get(triple.relation)
        .ok_or_else(|| contract!("no rephrase template for relation {}", triple.relation))?;
    fill(&rel.rephrase, kg.entity(triple.head))
}

/// Short entity answers or templated multi-token explanations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnswerStyle {
    Entity,
    Explanation,
}

const CLASSES: [&str; 5] = ["compound", "disorder", "syndrome", "agent", "finding"];
const ORGANS: [&str; 7] = [
    "cardiac",
    "hepatic",
    "renal",
    "neural",
    "pulmonary",
    "gastric",
    "dermal",
];
const COURSES: [&str; 4] = ["acute", "chronic", "relapsing", "progressive"];

impl AnswerStyle {
    pub fn render(self, kg: &Kg, entity: usize) -> String {
        let name = kg.entity(entity);
        match self {
            AnswerStyle::Entity => name.to_string(),
            AnswerStyle::Explanation => alloc::format!(
                "{name}, a {} of the {} system with a {} course.",
                CLASSES[(entity * 7) % CLASSES.len()],
                ORGANS[(entity * 5 + 1) % ORGANS.len()],
                COURSES[(entity * 3 + 2) % COURSES.len()],
            ),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchkit::kg::{default_templates, gen_synthetic_kg};
    use alloc::vec;

    fn table_one() -> (Kg, Triple) {
        let kg = Kg {
            entities: vec!["Primaquine".into(), "Nausea".into(), "Rash".into()],
            relations: default_templates(),
            triples: vec![Triple {
                head: 0,
                relation: 0,
                tail: 1,
            }],
        };
        let t = kg.triples[0];
        (kg, t)
    }

    #[test]
    fn table_one_templates() {
        let (kg, t) = table_one();
        let qa = triple_to_qa(&kg, &t, AnswerStyle::Entity).unwrap();
        assert_eq!(qa.question, "What side effect is caused by Primaquine?");
        assert_eq!(qa.answer, "Nausea");
        let w = words(&qa.question);
        assert_eq!(
            w[qa.subject_span.clone()].join(" "),
            normalize("Primaquine")
        );
        let (r, span) = rephrase(&kg, &t).unwrap();
        assert_eq!(r, "What adverse effect is attributed to Primaquine?");
        assert_eq!(words(&r)[span].join(" "), "primaquine");
    }

    #[test]
    fn missing_templates() {
        let (mut kg, t) = table_one();
        kg.relations[0].question = "No slot here?".into();
        assert!(triple_to_qa(&kg, &t, AnswerStyle::Entity).is_err());
        let bad = Triple { relation: 42, ..t };
        assert!(triple_to_qa(&kg, &bad, AnswerStyle::Entity).is_err());
        assert!(rephrase(&kg, &bad).is_err());
    }

    #[test]
    fn tokenizer_round_trip() {
        assert_eq!(
            words("What's first-line, X?"),
            vec!["what", "'", "s", "first", "-", "line", ",", "x", "?"]
        );
        let tok = Tokenizer::build(["a b c?", "b d"]);
        assert_eq!(tok.word(BOS), "<bos>");
        assert_eq!(tok.word(UNK), "<unk>");
        assert_eq!(tok.len(), 7);
        let ids = tok.encode_prompt("C b zzz");
        assert_eq!(ids[0], BOS);
        assert_eq!(ids[3], UNK);
        assert_eq!(tok.decode(&ids[1..3]), "c b");
        assert_eq!(tok.count_unk("a zzz yyy"), 2);
        let json: Vec<String> = tok.clone().into();
        assert_eq!(Tokenizer::from(json), tok);
    }

    #[test]
    fn questions_injective_and_rephrases_differ() {
        let kg = gen_synthetic_kg(40, 8, 250, 2).unwrap();
        let mut seen = BTreeSet::new();
        for t in &kg.triples {
            let qa = triple_to_qa(&kg, t, AnswerStyle::Entity).unwrap();
            assert!(seen.insert(qa.question.clone()));
            let (r, span) = rephrase(&kg, t).unwrap();
            assert_ne!(r, qa.question);
            assert_eq!(words(&r)[span].join(" "), normalize(&qa.subject));
        }
    }

    #[test]
    fn explanations_are_long() {
        let kg = gen_synthetic_kg(40, 6, 200, 2).unwrap();
        for e in 0..kg.entities.len() {
            let n = words(&AnswerStyle::Explanation.render(&kg, e)).len();
            assert!((10..=20).contains(&n), "{n}");
        }
    }
}
