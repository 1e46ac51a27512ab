// SPDX-License-Identifier: MIT OR Apache-2.0

use super::*;
use alloc::collections::BTreeSet;

fn default_dataset() -> Dataset {
    build_dataset(&DatasetConfig::default(), 17).unwrap()
}

#[test]
fn default_dataset_is_valid() {
    let ds = default_dataset();
    assert_eq!(ds.records.len(), 200);
    assert!(ds.notes.is_empty(), "{:?}", ds.notes);
    let tok = build_tokenizer(&ds.records);
    let audit = audit_dataset(&ds.records, &tok);
    assert!(audit.is_clean(), "{audit:?}");
    assert!(tok.len() < 300);
    for r in &ds.records {
        assert_eq!(r.locality.len(), 5);
        for qa in &r.locality[&LocalityClass::Td] {
            assert_eq!(qa.a, r.answer_true);
        }
        for qa in &r.locality[&LocalityClass::Em] {
            assert!(normalize(&qa.q).contains(&normalize(&r.subject)));
        }
        assert_ne!(r.answer_edit, r.answer_true);
        let span = r.prompt_subject_span();
        let prompt = tok.encode_prompt(&r.question);
        assert_eq!(tok.decode(&prompt[span]), normalize(&r.subject));
    }
    let ids: BTreeSet<_> = ds.records.iter().map(|r| r.id.clone()).collect();
    assert_eq!(ids.len(), 200);
    assert_eq!(ds.name(), "medcf");
}

fn complex_features(emb: &KgEmbedding, t: &Triple) -> Vec<f64> {
    // h * exp(i phase), written with explicit complex multiplication
    let m = emb.dim;
    let h = &emb.entities[t.head];
    let mut f = Vec::new();
    let mut im = Vec::new();
    for j in 0..m {
        let (a, b) = (h[j], h[m + j]);
        let (c, d) = (
            libm::cos(emb.phases[t.relation][j]),
            libm::sin(emb.phases[t.relation][j]),
        );
        f.push(a * c - b * d);
        im.push(a * d + b * c);
    }
    f.extend(im);
    f.extend_from_slice(&emb.entities[t.tail]);
    f
}

#[test]
fn ss_matches_exhaustive_oracle() {
    let ds = default_dataset();
    let index = TfIdfIndex::build(
        &ds.kg
            .triples
            .iter()
            .map(|t| {
                triple_to_qa(&ds.kg, t, AnswerStyle::Entity)
                    .unwrap()
                    .question
            })
            .collect::<Vec<_>>(),
    );
    let ctx = LocalityContext {
        kg: &ds.kg,
        embedding: &ds.embedding,
        questions: &index,
        style: AnswerStyle::Entity,
        k: 3,
        seed: 4,
    };
    let triples = &ds.kg.triples;
    for edit in 0..triples.len() {
        let (sets, _) = locality_indices(&ctx, edit).unwrap();
        let excluded: BTreeSet<usize> = sets[&LocalityClass::Td]
            .iter()
            .chain(&sets[&LocalityClass::Em])
            .copied()
            .chain([edit])
            .collect();
        let fe = complex_features(&ds.embedding, &triples[edit]);
        let mut all: Vec<(f64, usize)> = (0..triples.len())
            .filter(|i| !excluded.contains(i))
            .map(|i| {
                let fi = complex_features(&ds.embedding, &triples[i]);
                let d2: f64 = fe.iter().zip(&fi).map(|(a, b)| (a - b) * (a - b)).sum();
                (d2, i)
            })
            .collect();
        all.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let oracle: Vec<usize> = all.iter().take(3).map(|x| x.1).collect();
        assert_eq!(sets[&LocalityClass::Ss], oracle, "triple {edit}");

        // TS: brute-force best cosine
        let best = (0..triples.len())
            .filter(|&i| i != edit)
            .map(|i| index.cosine(edit, i))
            .fold(f64::MIN, f64::max);
        assert_eq!(index.cosine(edit, sets[&LocalityClass::Ts][0]), best);
        let topic = &ds.kg.relation(triples[edit].relation).topic;
        for &i in &sets[&LocalityClass::Ct] {
            assert_eq!(&ds.kg.relation(triples[i].relation).topic, topic);
        }
    }
}

#[test]
fn splits() {
    let ds = default_dataset();
    let [train, valid, test] = split_records(&ds.records, [0.6, 0.2, 0.2], 3).unwrap();
    assert_eq!((train.len(), valid.len(), test.len()), (120, 40, 40));
    let mut ids = BTreeSet::new();
    for r in train.iter().chain(&valid).chain(&test) {
        assert!(ids.insert(r.id.clone()));
    }
    assert_eq!(
        split_records(&ds.records, [0.6, 0.2, 0.2], 3).unwrap()[2],
        test
    );
    assert!(split_records(&ds.records, [0.6, 0.3, 0.2], 3).is_err());
    let dist = type_distribution(&ds.records);
    assert_eq!(dist.values().sum::<usize>(), 200);
    assert_eq!(dist.len(), 6);
}

#[test]
fn explanation_dataset() {
    let cfg = DatasetConfig {
        style: AnswerStyle::Explanation,
        n_triples: 60,
        n_entities: 20,
        rotate: RotateConfig {
            epochs: 20,
            ..Default::default()
        },
        ..Default::default()
    };
    let ds = build_dataset(&cfg, 2).unwrap();
    assert_eq!(ds.name(), "medfe");
    let tok = build_tokenizer(&ds.records);
    assert!(audit_dataset(&ds.records, &tok).is_clean());
    for r in &ds.records {
        assert!(words(&r.answer_true).len() >= 10);
        assert!(r.answer_true.starts_with(
            &ds.kg
                .entities
                .iter()
                .find(|e| r.answer_true.starts_with(e.as_str()))
                .unwrap()
                .clone()
        ));
    }
}

#[test]
fn leakage_is_detected() {
    let ds = default_dataset();
    let tok = build_tokenizer(&ds.records);
    let mut r = ds.records[0].clone();
    r.locality.get_mut(&LocalityClass::Ct).unwrap()[0].q = r.rephrase.clone();
    let a = audit_dataset(&[r.clone()], &tok);
    assert_eq!(a.leaks, 1);
    r.subject_span = [0, 1];
    assert_eq!(audit_dataset(&[r], &tok).span_failures, 1);
}
