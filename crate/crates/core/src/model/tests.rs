// SPDX-License-Identifier: MIT OR Apache-2.0

use alloc::vec;
use alloc::vec::Vec;

use super::*;
use crate::model::{generate, next_token_prob, FreezeSpec, PatchSpec, RunSpec, Site};

fn tiny_config(n_layers: usize, vocab: usize) -> ModelConfig {
    ModelConfig {
        n_layers,
        d_model: 8,
        n_heads: 2,
        d_ff: 12,
        vocab_size: vocab,
        max_seq: 16,
        norm_eps: 1e-6,
        seed: 11,
    }
}

/// Model with weights large enough that activations are far from trivial.
fn lively(n_layers: usize, vocab: usize) -> MicroTransformer {
    let mut m = MicroTransformer::new(tiny_config(n_layers, vocab)).unwrap();
    for (i, (_, t)) in m.tensors_mut().into_iter().enumerate() {
        let k = 1.0 + (i % 5) as f64;
        for (j, v) in t.data_mut().iter_mut().enumerate() {
            *v = *v * 6.0 + 0.01 * k * libm::sin(j as f64 * 0.7 + k);
        }
    }
    m
}

// ---- independent scalar oracle -------------------------------------------

fn mat_vec(w: &Matrix, x: &[f64]) -> Vec<f64> {
    (0..w.rows())
        .map(|o| (0..w.cols()).map(|i| w.get(o, i) * x[i]).sum())
        .collect()
}

fn norm(x: &[f64], g: &Matrix, eps: f64) -> Vec<f64> {
    let ms: f64 = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let s = 1.0 / libm::sqrt(ms + eps);
    x.iter()
        .enumerate()
        .map(|(j, v)| v * s * g.get(0, j))
        .collect()
}

fn oracle_logits(m: &MicroTransformer, tokens: &[u32]) -> Vec<Vec<f64>> {
    let cfg = m.config().clone();
    let dh = cfg.d_model / cfg.n_heads;
    let mut xs: Vec<Vec<f64>> = tokens
        .iter()
        .enumerate()
        .map(|(p, &t)| {
            (0..cfg.d_model)
                .map(|j| m.tok_emb.get(t as usize, j) + m.pos_emb.get(p, j))
                .collect()
        })
        .collect();
    for layer in &m.layers {
        let hs: Vec<Vec<f64>> = xs
            .iter()
            .map(|x| norm(x, &layer.attn_norm, cfg.norm_eps))
            .collect();
        let qs: Vec<Vec<f64>> = hs
            .iter()
            .map(|h| mat_vec(layer.weight(WeightName::Q), h))
            .collect();
        let ks: Vec<Vec<f64>> = hs
            .iter()
            .map(|h| mat_vec(layer.weight(WeightName::K), h))
            .collect();
        let vs: Vec<Vec<f64>> = hs
            .iter()
            .map(|h| mat_vec(layer.weight(WeightName::V), h))
            .collect();
        for t in 0..xs.len() {
            let mut att = vec![0.0; cfg.d_model];
            for h in 0..cfg.n_heads {
                let mut scores = Vec::new();
                for s in 0..=t {
                    let mut d = 0.0;
                    for j in h * dh..(h + 1) * dh {
                        d += qs[t][j] * ks[s][j];
                    }
                    scores.push(d / libm::sqrt(dh as f64));
                }
                let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = scores.iter().map(|s| libm::exp(s - mx)).sum();
                for (s, sc) in scores.iter().enumerate() {
                    let w = libm::exp(sc - mx) / z;
                    for j in h * dh..(h + 1) * dh {
                        att[j] += w * vs[s][j];
                    }
                }
            }
            let o = mat_vec(layer.weight(WeightName::O), &att);
            for j in 0..cfg.d_model {
                xs[t][j] += o[j];
            }
        }
        for x in xs.iter_mut() {
            let h = norm(x, &layer.mlp_norm, cfg.norm_eps);
            let g = mat_vec(layer.weight(WeightName::Gate), &h);
            let u = mat_vec(layer.weight(WeightName::Up), &h);
            let inner: Vec<f64> = g
                .iter()
                .zip(&u)
                .map(|(g, u)| g / (1.0 + libm::exp(-g)) * u)
                .collect();
            let d = mat_vec(layer.weight(WeightName::Down), &inner);
            for j in 0..cfg.d_model {
                x[j] += d[j];
            }
        }
    }
    xs.iter()
        .map(|x| mat_vec(&m.unembed, &norm(x, &m.final_norm, cfg.norm_eps)))
        .collect()
}

// ---- tests -----------------------------------------------------------------

#[test]
fn uniform_model_gives_one_over_vocab() {
    let m = MicroTransformer::zeros(tiny_config(2, 4)).unwrap();
    let p = next_token_prob(&m, &RunSpec::clean(&[0, 2, 3]), &[1]).unwrap();
    assert!((p - 0.25).abs() < 1e-15);
    let p2 = next_token_prob(&m, &RunSpec::clean(&[0, 2]), &[1, 3]).unwrap();
    assert!((p2 - 0.0625).abs() < 1e-15);
}

#[test]
fn forward_matches_scalar_oracle() {
    let m = lively(1, 4);
    let tokens = [0u32, 3, 2, 1];
    let out = m.forward(&RunSpec::clean(&tokens)).unwrap();
    let oracle = oracle_logits(&m, &tokens);
    for (t, row) in oracle.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            assert!((out.logits.get(t, j) - v).abs() < 1e-10, "t={t} j={j}");
        }
    }
    // probability through the oracle as well
    let last = &oracle[3];
    let mx = last.iter().cloned().fold(f64::MIN, f64::max);
    let z: f64 = last.iter().map(|v| libm::exp(v - mx)).sum();
    let p_oracle = libm::exp(last[2] - mx) / z;
    let p = next_token_prob(&m, &RunSpec::clean(&tokens), &[2]).unwrap();
    assert!((p - p_oracle).abs() < 1e-12);

    let deep = lively(3, 6);
    let toks = [0u32, 5, 4, 2, 2, 1];
    let out = deep.forward(&RunSpec::clean(&toks)).unwrap();
    for (t, row) in oracle_logits(&deep, &toks).iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            assert!((out.logits.get(t, j) - v).abs() < 1e-10);
        }
    }
}

#[test]
fn causal_mask_hides_the_future() {
    let m = lively(2, 7);
    let a = [0u32, 3, 4, 5, 6];
    let mut b = a;
    b[3] = 2;
    let la = m.forward(&RunSpec::clean(&a)).unwrap().logits;
    let lb = m.forward(&RunSpec::clean(&b)).unwrap().logits;
    for t in 0..3 {
        assert_eq!(la.row(t), lb.row(t));
    }
    assert_ne!(la.row(3), lb.row(3));

    // embedding noise on a future token
    let noise = EmbeddingNoise {
        rows: vec![(4, vec![0.5; 8])],
    };
    let ln = m
        .forward(&RunSpec::clean(&a).with_noise(&noise))
        .unwrap()
        .logits;
    for t in 0..4 {
        assert_eq!(la.row(t), ln.row(t));
    }
}

#[test]
fn packed_batch_equals_separate_runs() {
    let m = lively(2, 7);
    let a = [0u32, 3, 4];
    let b = [0u32, 6, 5, 4, 2];
    let sep_a = m.forward(&RunSpec::clean(&a)).unwrap();
    let sep_b = m.forward(&RunSpec::clean(&b)).unwrap();
    let both = m
        .forward_batch(&[RunSpec::clean(&a), RunSpec::clean(&b)])
        .unwrap();
    assert!(both[0].logits.max_abs_diff(&sep_a.logits).unwrap() < 1e-13);
    assert!(both[1].logits.max_abs_diff(&sep_b.logits).unwrap() < 1e-13);
}

#[test]
fn restoring_final_residual_restores_output() {
    let m = lively(3, 7);
    let tokens = [0u32, 3, 4, 5];
    let clean = m.forward(&RunSpec::clean(&tokens).capturing()).unwrap();
    let cap = clean.capture.unwrap();
    assert_eq!((cap.n_tokens(), cap.n_layers()), (4, 3));
    let noise = EmbeddingNoise {
        rows: vec![
            (1, (0..8).map(|j| libm::sin(j as f64 * 1.3) * 0.8).collect()),
            (2, (0..8).map(|j| libm::cos(j as f64 * 2.1) * 0.8).collect()),
        ],
    };
    let patch = PatchSpec {
        site: Site::Residual,
        token: 3,
        layer: 2,
        value: cap.get(Site::Residual, 3, 2).to_vec(),
    };
    let run = RunSpec::clean(&tokens)
        .with_noise(&noise)
        .with_patches(vec![patch]);
    let target = [argmax(clean.logits.row(3)) as u32];
    let p_restored = next_token_prob(&m, &run, &target).unwrap();
    let p_clean = next_token_prob(&m, &RunSpec::clean(&tokens), &target).unwrap();
    let p_corrupt =
        next_token_prob(&m, &RunSpec::clean(&tokens).with_noise(&noise), &target).unwrap();
    assert!((p_restored - p_clean).abs() < 1e-9);
    assert!((p_corrupt - p_clean).abs() > 1e-6, "{p_clean} {p_corrupt}");
}

#[test]
fn patch_with_own_value_is_idempotent() {
    let m = lively(3, 7);
    let tokens = [0u32, 3, 4, 5];
    let base = m.forward(&RunSpec::clean(&tokens).capturing()).unwrap();
    let cap = base.capture.as_ref().unwrap();
    for site in [Site::Residual, Site::AttnOut, Site::MlpOut] {
        let patch = PatchSpec {
            site,
            token: 1,
            layer: 1,
            value: cap.get(site, 1, 1).to_vec(),
        };
        let out = m
            .forward(
                &RunSpec::clean(&tokens)
                    .with_patches(vec![patch])
                    .capturing(),
            )
            .unwrap();
        assert!(out.logits.bit_eq(&base.logits));
        assert_eq!(out.capture.as_ref(), Some(cap));
    }
}

#[test]
fn frozen_mlp_outputs_stay_pinned() {
    let m = lively(4, 7);
    let tokens = [0u32, 3, 4, 5];
    let base = m.forward(&RunSpec::clean(&tokens).capturing()).unwrap();
    let cap = base.capture.unwrap();
    let pinned: Vec<Vec<f64>> = (1..4)
        .map(|l| cap.get(Site::MlpOut, 2, l).to_vec())
        .collect();
    let freeze = FreezeSpec {
        site: Site::MlpOut,
        token: 2,
        first_layer: 1,
        values: pinned.clone(),
    };
    // perturb attention inputs via a patch and via noise
    let noise = EmbeddingNoise {
        rows: vec![(1, vec![1.0; 8])],
    };
    let patch = PatchSpec {
        site: Site::AttnOut,
        token: 2,
        layer: 1,
        value: vec![0.3; 8],
    };
    let out = m
        .forward(
            &RunSpec::clean(&tokens)
                .with_noise(&noise)
                .with_patches(vec![patch])
                .with_freezes(vec![freeze])
                .capturing(),
        )
        .unwrap();
    let c2 = out.capture.unwrap();
    for (i, l) in (1..4).enumerate() {
        assert_eq!(c2.get(Site::MlpOut, 2, l), pinned[i].as_slice());
    }
    assert_ne!(c2.get(Site::MlpOut, 2, 0), cap.get(Site::MlpOut, 2, 0));
}

#[test]
fn conflicting_patch_and_freeze_rejected() {
    let m = lively(2, 7);
    let tokens = [0u32, 3];
    let run = RunSpec::clean(&tokens)
        .with_patches(vec![PatchSpec {
            site: Site::MlpOut,
            token: 1,
            layer: 1,
            value: vec![0.0; 8],
        }])
        .with_freezes(vec![FreezeSpec {
            site: Site::MlpOut,
            token: 1,
            first_layer: 0,
            values: vec![vec![0.0; 8]; 2],
        }]);
    assert!(matches!(m.forward(&run), Err(Error::Contract(_))));
}

#[test]
fn invalid_inputs_rejected() {
    let m = lively(2, 7);
    assert!(matches!(
        m.forward(&RunSpec::clean(&[0, 9])),
        Err(Error::Vocab { id: 9, vocab: 7 })
    ));
    assert!(m.forward(&RunSpec::clean(&[])).is_err());
    let too_long = [0u32; 17];
    assert!(m.forward(&RunSpec::clean(&too_long)).is_err());
    let bad_patch = RunSpec::clean(&[0, 1]).with_patches(vec![PatchSpec {
        site: Site::Residual,
        token: 2,
        layer: 0,
        value: vec![0.0; 8],
    }]);
    assert!(m.forward(&bad_patch).is_err());
    assert!(next_token_prob(&m, &RunSpec::clean(&[]), &[1]).is_err());
}

#[test]
fn greedy_generation() {
    let m = lively(2, 7);
    let prompt = [0u32, 3, 4];
    let one = generate(&m, &prompt, 1).unwrap();
    let logits = m.forward(&RunSpec::clean(&prompt)).unwrap().logits;
    assert_eq!(one, vec![argmax(logits.row(2)) as u32]);
    let a = generate(&m, &prompt, 8).unwrap();
    let b = generate(&m, &prompt, 8).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 8);
    assert_eq!(a[0], one[0]);
    assert!(generate(&m, &prompt, 0).is_err());
    assert!(generate(&m, &prompt, 15).is_err());
}

#[test]
fn argmax_breaks_ties_low() {
    assert_eq!(argmax(&[0.5, 0.5, 0.1]), 0);
    assert_eq!(argmax(&[0.1, 0.7, 0.7]), 1);
}

#[test]
fn tensor_round_trip() {
    let m = lively(2, 7);
    let named: Vec<(alloc::string::String, Matrix)> = m
        .tensors()
        .into_iter()
        .map(|(n, t)| (n, t.clone()))
        .collect();
    let back = MicroTransformer::from_tensors(m.config().clone(), named.clone()).unwrap();
    assert_eq!(back, m);
    let mut wrong = named;
    wrong[3].1 = Matrix::zeros(1, 1);
    assert!(MicroTransformer::from_tensors(m.config().clone(), wrong).is_err());
}

#[test]
fn config_validation() {
    let mut c = tiny_config(1, 4);
    c.n_heads = 3;
    assert!(c.validate().is_err());
    c = tiny_config(1, 1);
    assert!(c.validate().is_err());
    assert!(ModelConfig::default().validate().is_ok());
    assert_eq!("w_gate".parse::<WeightName>().unwrap(), WeightName::Gate);
    assert!("W_x".parse::<WeightName>().is_err());
}
