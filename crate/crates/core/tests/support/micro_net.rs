// SPDX-License-Identifier: MIT OR Apache-2.0

//! Random two-layer nets composed from tape primitives, with gradients
//! checked against central differences.

use std::ops::Range;

use medlasa_core::numerics::{Matrix, Tape, Var};
use medlasa_core::rng::seeded;
use rand::Rng;

/// Gradients smaller than this are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct MicroNet {
    pub seed: u64,
    ids: Vec<usize>,
    segments: Vec<Range<usize>>,
    heads: usize,
    norm: bool,
    attention: bool,
    gated: bool,
    tanh: bool,
    override_row: Option<Vec<f64>>,
    targets: Vec<(usize, usize)>,
    mix: Matrix,
    /// Embedding, norm gain, q, k, v, up, gate, down, unembedding.
    pub params: Vec<Matrix>,
}

fn uniform(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    Matrix::new(rows, cols, data).unwrap()
}

impl MicroNet {
    pub fn random(seed: u64) -> Self {
        let mut r = seeded(seed);
        let heads = r.random_range(1..=2);
        let d = heads * r.random_range(2..=4);
        let f = r.random_range(2..=6);
        let vocab = r.random_range(3..=6);
        let classes = r.random_range(2..=5);
        let n = r.random_range(2..=5);
        let split = r.random_range(1..=n);
        let segments = if split == n {
            vec![0..n]
        } else {
            vec![0..split, split..n]
        };
        let ids = (0..n).map(|_| r.random_range(0..vocab)).collect();
        let mut targets = Vec::new();
        for i in 0..n {
            if r.random_bool(0.7) {
                targets.push((i, r.random_range(0..classes)));
            }
        }
        if targets.is_empty() {
            targets.push((0, 0));
        }
        let override_row = r
            .random_bool(0.3)
            .then(|| (0..d).map(|_| r.random_range(-1.0..1.0)).collect());
        let params = vec![
            uniform(&mut r, vocab, d),
            uniform(&mut r, 1, d),
            uniform(&mut r, d, d),
            uniform(&mut r, d, d),
            uniform(&mut r, d, d),
            uniform(&mut r, d, f),
            uniform(&mut r, d, f),
            uniform(&mut r, f, d),
            uniform(&mut r, d, classes),
        ];
        Self {
            seed,
            ids,
            segments,
            heads,
            norm: r.random_bool(0.7),
            attention: r.random_bool(0.8),
            gated: r.random_bool(0.5),
            tanh: r.random_bool(0.5),
            override_row,
            targets,
            mix: uniform(&mut r, n, classes),
            params,
        }
    }

    fn graph(&self, tape: &mut Tape, p: &[Var]) -> Var {
        let mut h = tape.gather(p[0], &self.ids).unwrap();
        let x = if self.norm {
            tape.rmsnorm_rows(h, p[1], 1e-6).unwrap()
        } else {
            h
        };
        if self.attention {
            let q = tape.matmul(x, p[2]).unwrap();
            let k = tape.matmul(x, p[3]).unwrap();
            let v = tape.matmul(x, p[4]).unwrap();
            let a = tape
                .causal_attention(q, k, v, self.heads, &self.segments)
                .unwrap();
            h = tape.add(h, a).unwrap();
        } else {
            let v = tape.matmul(x, p[4]).unwrap();
            h = tape.add(h, v).unwrap();
        }
        if let Some(row) = &self.override_row {
            h = tape.override_rows(h, &[(0, row.as_slice())]).unwrap();
        }
        let up = tape.matmul(h, p[5]).unwrap();
        let mut act = if self.tanh {
            tape.tanh(up)
        } else {
            tape.silu(up)
        };
        if self.gated {
            let g = tape.matmul(h, p[6]).unwrap();
            act = tape.mul(act, g).unwrap();
        }
        let down = tape.matmul(act, p[7]).unwrap();
        let h = tape.add(h, down).unwrap();
        let logits = tape.matmul(h, p[8]).unwrap();
        let ce = tape.cross_entropy(logits, &self.targets).unwrap();
        let probs = tape.softmax_rows(logits);
        let mix = tape.constant(self.mix.clone());
        let weighted = tape.mul(probs, mix).unwrap();
        let s = tape.sum(weighted);
        let s = tape.scale(s, 0.5);
        tape.add(ce, s).unwrap()
    }

    pub fn loss(&self, params: &[Matrix]) -> f64 {
        let mut tape = Tape::new();
        let p: Vec<Var> = params.iter().map(|m| tape.constant(m.clone())).collect();
        let l = self.graph(&mut tape, &p);
        tape.value(l).as_scalar().unwrap()
    }

    pub fn analytic(&self) -> Vec<Matrix> {
        let mut tape = Tape::new();
        let p: Vec<Var> = self
            .params
            .iter()
            .map(|m| tape.parameter(m.clone()))
            .collect();
        let l = self.graph(&mut tape, &p);
        let g = tape.backward(l).unwrap();
        p.iter()
            .zip(&self.params)
            .map(|(v, m)| {
                g.get(*v)
                    .cloned()
                    .unwrap_or_else(|| Matrix::zeros(m.rows(), m.cols()))
            })
            .collect()
    }

    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, REL_FLOOR)`
    /// over every parameter entry.
    pub fn max_rel_error(&self, step: f64) -> f64 {
        let analytic = self.analytic();
        let mut worst: f64 = 0.0;
        let mut params = self.params.clone();
        for (pi, g) in analytic.iter().enumerate() {
            for i in 0..g.len() {
                let orig = params[pi].data()[i];
                params[pi].data_mut()[i] = orig + step;
                let up = self.loss(&params);
                params[pi].data_mut()[i] = orig - step;
                let down = self.loss(&params);
                params[pi].data_mut()[i] = orig;
                let num = (up - down) / (2.0 * step);
                let a = g.data()[i];
                let err = (a - num).abs() / a.abs().max(num.abs()).max(REL_FLOOR);
                worst = worst.max(err);
            }
        }
        worst
    }
}
