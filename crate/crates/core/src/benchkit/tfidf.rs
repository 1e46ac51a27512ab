// SPDX-License-Identifier: MIT OR Apache-2.0

//! Character 3-gram TF-IDF with cosine similarity.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

const N: usize = 3;

fn grams(text: &str) -> BTreeMap<String, f64> {
    let chars: Vec<char> = text.to_lowercase().chars().collect();
    let mut out = BTreeMap::new();
    for w in chars.windows(N) {
        *out.entry(w.iter().collect()).or_insert(0.0) += 1.0;
    }
    out
}

/// L2-normalised sparse TF-IDF vectors over a fixed document set.
#[derive(Debug, Clone)]
pub struct TfIdfIndex {
    vectors: Vec<BTreeMap<String, f64>>,
}

impl TfIdfIndex {
    /// Smoothed idf: `ln((1 + n) / (1 + df)) + 1`.
    pub fn build(docs: &[String]) -> Self {
        let counts: Vec<_> = docs.iter().map(|d| grams(d)).collect();
        let mut df: BTreeMap<&str, f64> = BTreeMap::new();
        for c in &counts {
            for g in c.keys() {
                *df.entry(g.as_str()).or_insert(0.0) += 1.0;
            }
        }
        let n = docs.len() as f64;
        let idf: BTreeMap<&str, f64> = df
            .into_iter()
            .map(|(g, d)| (g, libm::log((1.0 + n) / (1.0 + d)) + 1.0))
            .collect();
        let vectors = counts
            .iter()
            .map(|c| {
                let mut v: BTreeMap<String, f64> = c
                    .iter()
                    .map(|(g, tf)| (g.clone(), tf * idf[g.as_str()]))
                    .collect();
                let norm = libm::sqrt(v.values().map(|x| x * x).sum());
                if norm > 0.0 {
                    v.values_mut().for_each(|x| *x /= norm);
                }
                v
            })
            .collect();
        Self { vectors }
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn cosine(&self, a: usize, b: usize) -> f64 {
        let (va, vb) = (&self.vectors[a], &self.vectors[b]);
        let (small, large) = if va.len() <= vb.len() {
            (va, vb)
        } else {
            (vb, va)
        };
        small
            .iter()
            .filter_map(|(g, x)| large.get(g).map(|y| x * y))
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;

    #[test]
    fn cosine_basics() {
        let docs: Vec<String> = [
            "what causes nausea",
            "what causes nausea",
            "which test detects gout",
            "ab",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let idx = TfIdfIndex::build(&docs);
        assert!((idx.cosine(0, 1) - 1.0).abs() < 1e-12);
        assert!(idx.cosine(0, 2) < 0.5);
        assert_eq!(idx.cosine(0, 3), 0.0);
        assert!((idx.cosine(2, 0) - idx.cosine(0, 2)).abs() < 1e-15);
        assert_eq!(
            grams("abab"),
            BTreeMap::from([("aba".to_string(), 1.0), ("bab".to_string(), 1.0)])
        );
    }
}
