// SPDX-License-Identifier: MIT OR Apache-2.0

//! Builds the transformer computation on a [`Tape`] for a packed batch of
//! runs, applying noise, patches and freezes at their hook points.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use super::hooks::{RunOutput, RunSpec, Site, TraceCapture};
use super::{MicroTransformer, WeightName};
use crate::error::{contract, Result};
use crate::numerics::{Matrix, Tape, Var};

pub(crate) struct LayerVars {
    pub w: [Var; 7],
    pub attn_norm: Var,
    pub mlp_norm: Var,
}

/// Tape handles for every model tensor.
pub(crate) struct ParamVars {
    pub tok_emb: Var,
    pub pos_emb: Var,
    pub layers: Vec<LayerVars>,
    pub final_norm: Var,
    pub unembed: Var,
}

impl ParamVars {
    pub fn bind(tape: &mut Tape, model: &MicroTransformer, trainable: bool) -> Self {
        let mut leaf = |m: &Matrix| {
            if trainable {
                tape.parameter(m.clone())
            } else {
                tape.constant(m.clone())
            }
        };
        let tok_emb = leaf(&model.tok_emb);
        let pos_emb = leaf(&model.pos_emb);
        let layers = model
            .layers
            .iter()
            .map(|layer| LayerVars {
                w: WeightName::ALL.map(|w| leaf(layer.weight(w))),
                attn_norm: leaf(&layer.attn_norm),
                mlp_norm: leaf(&layer.mlp_norm),
            })
            .collect();
        let final_norm = leaf(&model.final_norm);
        let unembed = leaf(&model.unembed);
        Self {
            tok_emb,
            pos_emb,
            layers,
            final_norm,
            unembed,
        }
    }

    /// Handles in [`MicroTransformer::tensors`] order.
    pub fn ordered(&self) -> Vec<Var> {
        let mut out = vec![self.tok_emb, self.pos_emb];
        for l in &self.layers {
            out.extend_from_slice(&l.w);
            out.push(l.attn_norm);
            out.push(l.mlp_norm);
        }
        out.push(self.final_norm);
        out.push(self.unembed);
        out
    }
}

/// Tape handles of one low-rank adapter and its `alpha / r` factor.
#[derive(Debug, Clone, Copy)]
pub(crate) struct SiteVars {
    pub b: Var,
    pub a: Var,
    pub scale: f64,
}

pub(crate) type AdapterVars = BTreeMap<(usize, WeightName), SiteVars>;

pub(crate) struct GraphOutput {
    pub logits: Var,
    pub segments: Vec<Range<usize>>,
    /// Per layer, handles of `[residual, attn_out, mlp_out]`; only kept
    /// when a run asked for capture.
    captures: Option<Vec<[Var; 3]>>,
}

impl GraphOutput {
    pub fn into_outputs(self, tape: &Tape, runs: &[RunSpec<'_>]) -> Vec<RunOutput> {
        let logits = tape.value(self.logits);
        runs.iter()
            .zip(&self.segments)
            .map(|(run, seg)| {
                let capture = match (&self.captures, run.capture) {
                    (Some(layers), true) => {
                        let mut sites: [Vec<Matrix>; 3] = Default::default();
                        for vars in layers {
                            for (slot, var) in vars.iter().enumerate() {
                                sites[slot].push(tape.value(*var).slice_rows(seg.start, seg.end));
                            }
                        }
                        Some(TraceCapture { sites })
                    }
                    _ => None,
                };
                RunOutput {
                    logits: logits.slice_rows(seg.start, seg.end),
                    capture,
                }
            })
            .collect()
    }
}

type Overrides<'r> = Vec<[Vec<(usize, &'r [f64])>; 3]>;

fn collect_overrides<'r>(
    model: &MicroTransformer,
    runs: &'r [RunSpec<'_>],
    segments: &[Range<usize>],
) -> Result<Overrides<'r>> {
    let cfg = model.config();
    let (n_layers, d) = (cfg.n_layers, cfg.d_model);
    let mut table: Overrides<'r> = (0..n_layers).map(|_| Default::default()).collect();
    for (run, seg) in runs.iter().zip(segments) {
        let t = run.tokens.len();
        let mut patched = BTreeMap::new();
        for p in &run.patches {
            if p.token >= t || p.layer >= n_layers || p.value.len() != d {
                return Err(contract!(
                    "patch at token {} layer {} (width {}) outside {t} tokens x {n_layers} layers x {d}",
                    p.token,
                    p.layer,
                    p.value.len()
                ));
            }
            patched.insert((p.site, p.token, p.layer), ());
            table[p.layer][p.site.slot()].push((seg.start + p.token, &p.value));
        }
        for f in &run.freezes {
            if f.site == Site::Residual {
                return Err(contract!("only sublayer outputs can be frozen"));
            }
            if f.token >= t || f.layers().end > n_layers || f.values.iter().any(|v| v.len() != d) {
                return Err(contract!(
                    "freeze at token {} layers {:?} outside {t} tokens x {n_layers} layers",
                    f.token,
                    f.layers()
                ));
            }
            for (layer, value) in f.layers().zip(&f.values) {
                if patched.contains_key(&(f.site, f.token, layer)) {
                    return Err(contract!(
                        "patch and freeze both target {:?} at token {} layer {layer}",
                        f.site,
                        f.token
                    ));
                }
                table[layer][f.site.slot()].push((seg.start + f.token, value));
            }
        }
    }
    Ok(table)
}

fn linear(
    tape: &mut Tape,
    x: Var,
    layer: usize,
    name: WeightName,
    params: &ParamVars,
    adapters: Option<&AdapterVars>,
) -> Result<Var> {
    let y = tape.matmul_nt(x, params.layers[layer].w[name as usize])?;
    match adapters.and_then(|a| a.get(&(layer, name))) {
        Some(site) => {
            let ax = tape.matmul_nt(x, site.a)?;
            let bax = tape.matmul_nt(ax, site.b)?;
            let delta = tape.scale(bax, site.scale);
            tape.add(y, delta)
        }
        None => Ok(y),
    }
}

fn apply(tape: &mut Tape, x: Var, rows: &[(usize, &[f64])]) -> Result<Var> {
    if rows.is_empty() {
        Ok(x)
    } else {
        tape.override_rows(x, rows)
    }
}

/// Records the forward pass of all `runs` packed into one matrix.
pub(crate) fn build_graph(
    tape: &mut Tape,
    model: &MicroTransformer,
    params: &ParamVars,
    adapters: Option<&AdapterVars>,
    runs: &[RunSpec<'_>],
) -> Result<GraphOutput> {
    if runs.is_empty() {
        return Err(contract!("forward over zero runs"));
    }
    let cfg = model.config();
    let mut ids = Vec::new();
    let mut positions = Vec::new();
    let mut segments = Vec::with_capacity(runs.len());
    for run in runs {
        model.check_tokens(run.tokens)?;
        let start = ids.len();
        ids.extend(run.tokens.iter().map(|&t| t as usize));
        positions.extend(0..run.tokens.len());
        segments.push(start..ids.len());
    }
    let overrides = collect_overrides(model, runs, &segments)?;
    let n = ids.len();

    let mut x = tape.gather(params.tok_emb, &ids)?;
    if runs.iter().any(|r| r.noise.is_some()) {
        let mut noise = Matrix::zeros(n, cfg.d_model);
        for (run, seg) in runs.iter().zip(&segments) {
            let Some(en) = run.noise else { continue };
            for (tok, v) in &en.rows {
                if *tok >= seg.len() || v.len() != cfg.d_model {
                    return Err(contract!("noise row for token {tok} outside the prompt"));
                }
                for (o, e) in noise.row_mut(seg.start + tok).iter_mut().zip(v) {
                    *o += e;
                }
            }
        }
        let nv = tape.constant(noise);
        x = tape.add(x, nv)?;
    }
    let pos = tape.gather(params.pos_emb, &positions)?;
    x = tape.add(x, pos)?;

    let want_capture = runs.iter().any(|r| r.capture);
    let mut captures = want_capture.then(|| Vec::with_capacity(cfg.n_layers));

    for (l, lv) in params.layers.iter().enumerate() {
        let h = tape.rmsnorm_rows(x, lv.attn_norm, cfg.norm_eps)?;
        let q = linear(tape, h, l, WeightName::Q, params, adapters)?;
        let k = linear(tape, h, l, WeightName::K, params, adapters)?;
        let v = linear(tape, h, l, WeightName::V, params, adapters)?;
        let att = tape.causal_attention(q, k, v, cfg.n_heads, &segments)?;
        let attn_out = linear(tape, att, l, WeightName::O, params, adapters)?;
        let attn_out = apply(tape, attn_out, &overrides[l][Site::AttnOut.slot()])?;
        x = tape.add(x, attn_out)?;

        let h2 = tape.rmsnorm_rows(x, lv.mlp_norm, cfg.norm_eps)?;
        let gate = linear(tape, h2, l, WeightName::Gate, params, adapters)?;
        let up = linear(tape, h2, l, WeightName::Up, params, adapters)?;
        let act = tape.silu(gate);
        let inner = tape.mul(act, up)?;
        let mlp_out = linear(tape, inner, l, WeightName::Down, params, adapters)?;
        let mlp_out = apply(tape, mlp_out, &overrides[l][Site::MlpOut.slot()])?;
        x = tape.add(x, mlp_out)?;
        x = apply(tape, x, &overrides[l][Site::Residual.slot()])?;

        if let Some(c) = captures.as_mut() {
            c.push([x, attn_out, mlp_out]);
        }
    }

    let h = tape.rmsnorm_rows(x, params.final_norm, cfg.norm_eps)?;
    let logits = tape.matmul_nt(h, params.unembed)?;
    Ok(GraphOutput {
        logits,
        segments,
        captures,
    })
}
