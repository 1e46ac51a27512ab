// SPDX-License-Identifier: MIT OR Apache-2.0

//! RotatE knowledge-graph embeddings.
//!
//! Entities are complex vectors and relations are element-wise rotations
//! by a phase, so `d(h, r, t) = -|h o r - t|` (Euclidean over the complex
//! coordinates). Training minimises a margin loss against uniformly
//! corrupted tails with plain SGD.

use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::kg::{Kg, Triple};
use crate::error::{contract, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KgEmbedding {
    pub dim: usize,
    /// Per entity, `dim` real parts then `dim` imaginary parts.
    pub entities: Vec<Vec<f64>>,
    /// Per relation, `dim` phases in `(-pi, pi]`.
    pub phases: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RotateConfig {
    pub dim: usize,
    pub epochs: usize,
    pub margin: f64,
    pub n_neg: usize,
    pub lr: f64,
}

impl Default for RotateConfig {
    fn default() -> Self {
        Self {
            dim: 8,
            epochs: 150,
            margin: 2.0,
            n_neg: 4,
            lr: 0.02,
        }
    }
}

fn wrap_phase(p: f64) -> f64 {
    let mut p = p % (2.0 * PI);
    if p > PI {
        p -= 2.0 * PI;
    } else if p <= -PI {
        p += 2.0 * PI;
    }
    p
}

impl KgEmbedding {
    /// `h o r` as `dim` real parts then `dim` imaginary parts.
    pub fn rotate(&self, head: usize, relation: usize) -> Vec<f64> {
        let (m, h, ph) = (self.dim, &self.entities[head], &self.phases[relation]);
        let mut out = alloc::vec![0.0; 2 * m];
        for j in 0..m {
            let (c, s) = (libm::cos(ph[j]), libm::sin(ph[j]));
            out[j] = h[j] * c - h[m + j] * s;
            out[m + j] = h[j] * s + h[m + j] * c;
        }
        out
    }

    fn distance(&self, t: &Triple) -> f64 {
        let rot = self.rotate(t.head, t.relation);
        let tail = &self.entities[t.tail];
        libm::sqrt(rot.iter().zip(tail).map(|(a, b)| (a - b) * (a - b)).sum())
    }

    /// `-|h o r - t|`; never positive.
    pub fn score(&self, t: &Triple) -> f64 {
        -self.distance(t)
    }

    /// Feature vector of a triple in score space: `[h o r, t]`.
    pub fn triple_features(&self, t: &Triple) -> Vec<f64> {
        let mut f = self.rotate(t.head, t.relation);
        f.extend_from_slice(&self.entities[t.tail]);
        f
    }

    /// Adds `-lr * d|h o r - t| / d(theta)` for one triple, scaled by `sign`.
    fn step(&mut self, t: &Triple, sign: f64, lr: f64) {
        let m = self.dim;
        let rot = self.rotate(t.head, t.relation);
        let dist = self.distance(t);
        if dist < 1e-12 {
            return;
        }
        let g: Vec<f64> = rot
            .iter()
            .zip(&self.entities[t.tail])
            .map(|(a, b)| sign * (a - b) / dist)
            .collect();
        let h = self.entities[t.head].clone();
        let ph = self.phases[t.relation].clone();
        for j in 0..m {
            let (c, s) = (libm::cos(ph[j]), libm::sin(ph[j]));
            let (gr, gi) = (g[j], g[m + j]);
            // rot_re = hr c - hi s, rot_im = hr s + hi c
            let d_hr = gr * c + gi * s;
            let d_hi = -gr * s + gi * c;
            let d_ph = gr * (-h[j] * s - h[m + j] * c) + gi * (h[j] * c - h[m + j] * s);
            self.entities[t.head][j] -= lr * d_hr;
            self.entities[t.head][m + j] -= lr * d_hi;
            self.entities[t.tail][j] += lr * gr;
            self.entities[t.tail][m + j] += lr * gi;
            self.phases[t.relation][j] = wrap_phase(ph[j] - lr * d_ph);
        }
    }
}

/// Mean margin loss `max(0, margin + d(pos) - d(neg))` over the KG with
/// the given negatives.
fn epoch_loss(emb: &KgEmbedding, pairs: &[(Triple, Triple)], margin: f64) -> f64 {
    let sum: f64 = pairs
        .iter()
        .map(|(p, n)| (margin + emb.distance(p) - emb.distance(n)).max(0.0))
        .sum();
    sum / pairs.len().max(1) as f64
}

/// Trains embeddings and returns them with the per-epoch mean loss.
pub fn train_rotate(kg: &Kg, cfg: &RotateConfig, seed: u64) -> Result<(KgEmbedding, Vec<f64>)> {
    if cfg.dim == 0 || cfg.n_neg == 0 || !(cfg.lr > 0.0) || !(cfg.margin > 0.0) {
        return Err(contract!("rotate needs dim, n_neg, lr and margin positive"));
    }
    let mut r = rng::seeded(rng::sub_seed(seed, "rotate"));
    let n_ent = kg.entities.len();
    let mut emb = KgEmbedding {
        dim: cfg.dim,
        entities: (0..n_ent)
            .map(|_| {
                (0..2 * cfg.dim)
                    .map(|_| r.random_range(-0.5..0.5))
                    .collect()
            })
            .collect(),
        phases: (0..kg.relations.len())
            .map(|_| {
                (0..cfg.dim)
                    .map(|_| wrap_phase(r.random_range(-PI..PI)))
                    .collect()
            })
            .collect(),
    };
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..kg.triples.len()).collect();
    for _ in 0..cfg.epochs {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut r);
        let mut pairs = Vec::with_capacity(order.len() * cfg.n_neg);
        for &i in &order {
            let pos = kg.triples[i];
            for _ in 0..cfg.n_neg {
                let neg = Triple {
                    tail: r.random_range(0..n_ent),
                    ..pos
                };
                if emb.distance(&pos) + cfg.margin > emb.distance(&neg) {
                    emb.step(&pos, 1.0, cfg.lr);
                    emb.step(&neg, -1.0, cfg.lr);
                }
                pairs.push((pos, neg));
            }
        }
        losses.push(epoch_loss(&emb, &pairs, cfg.margin));
    }
    Ok((emb, losses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchkit::kg::gen_synthetic_kg;

    #[test]
    fn identity_rotation_scores_zero() {
        let emb = KgEmbedding {
            dim: 2,
            entities: alloc::vec![
                alloc::vec![0.3, -1.0, 2.0, 0.5],
                alloc::vec![1.0, 1.0, 1.0, 1.0]
            ],
            phases: alloc::vec![alloc::vec![0.0, 0.0], alloc::vec![0.7, -2.0]],
        };
        let t = Triple {
            head: 0,
            relation: 0,
            tail: 0,
        };
        assert_eq!(emb.score(&t), 0.0);
        assert!(emb.score(&Triple { tail: 1, ..t }) < 0.0);
        // rotation preserves modulus
        let h = &emb.entities[0];
        let rot = emb.rotate(0, 1);
        for j in 0..2 {
            let before = h[j] * h[j] + h[2 + j] * h[2 + j];
            let after = rot[j] * rot[j] + rot[2 + j] * rot[2 + j];
            assert!((before - after).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let kg = gen_synthetic_kg(10, 2, 12, 1).unwrap();
        let (emb, _) = train_rotate(
            &kg,
            &RotateConfig {
                epochs: 1,
                ..Default::default()
            },
            3,
        )
        .unwrap();
        let t = kg.triples[0];
        // one step with tiny lr moves the distance by about -lr * |grad|^2
        let lr = 1e-7;
        let mut moved = emb.clone();
        moved.step(&t, 1.0, lr);
        let drop = emb.distance(&t) - moved.distance(&t);
        assert!(drop > 0.0);
        let h = 1e-6;
        let mut grad_sq = 0.0;
        for j in 0..2 * emb.dim {
            for ent in [t.head, t.tail] {
                let mut p = emb.clone();
                p.entities[ent][j] += h;
                let mut q = emb.clone();
                q.entities[ent][j] -= h;
                let g = (p.distance(&t) - q.distance(&t)) / (2.0 * h);
                grad_sq += g * g;
            }
        }
        for j in 0..emb.dim {
            let mut p = emb.clone();
            p.phases[t.relation][j] += h;
            let mut q = emb.clone();
            q.phases[t.relation][j] -= h;
            let g = (p.distance(&t) - q.distance(&t)) / (2.0 * h);
            grad_sq += g * g;
        }
        assert!((drop / lr - grad_sq).abs() < 1e-3 * grad_sq.max(1.0));
    }

    #[test]
    fn training_separates_true_triples() {
        let kg = gen_synthetic_kg(40, 6, 200, 0).unwrap();
        let (emb, losses) = train_rotate(&kg, &RotateConfig::default(), 0).unwrap();
        assert!(losses.last().unwrap() < losses.first().unwrap());
        let mut r = rng::seeded(9);
        let (mut pos, mut neg) = (0.0, 0.0);
        for t in &kg.triples {
            pos += emb.score(t);
            neg += emb.score(&Triple {
                tail: r.random_range(0..40),
                ..*t
            });
        }
        assert!(pos > neg);
        for t in &kg.triples {
            assert!(emb.score(t) <= 0.0);
        }
        assert!(emb.phases.iter().flatten().all(|p| *p > -PI && *p <= PI));
    }
}
