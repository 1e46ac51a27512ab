// SPDX-License-Identifier: MIT OR Apache-2.0

//! Causal-trace heatmaps as standalone SVG.
//!
//! Rows are prompt tokens, columns are layers. Output bytes depend only on
//! the trace and the spec.

use std::fmt::Write as _;

use medlasa_core::tracing::{ImpactMatrix, TargetModule};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColorRange {
    /// Probability 0 maps to the first anchor and 1 to the last.
    Absolute,
    /// The trace minimum maps to the first anchor and its maximum to the last.
    Relative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeatmapSpec {
    /// Color anchors as `#rrggbb`; `None` picks a ramp by traced module.
    pub ramp: Option<Vec<String>>,
    pub range: ColorRange,
    /// Cell edge in pixels.
    pub cell: u32,
    pub title: Option<String>,
}

impl Default for HeatmapSpec {
    fn default() -> Self {
        Self {
            ramp: None,
            range: ColorRange::Relative,
            cell: 24,
            title: None,
        }
    }
}

fn default_ramp(module: TargetModule) -> [&'static str; 2] {
    match module {
        TargetModule::Full => ["#ffffff", "#5b2a86"],
        TargetModule::Attn => ["#ffffff", "#b2182b"],
        TargetModule::Mlp => ["#ffffff", "#1b7837"],
    }
}

fn parse_hex(s: &str) -> Result<[f64; 3]> {
    let bad = || LabError::Config(format!("color {s:?} is not #rrggbb"));
    let h = s
        .strip_prefix('#')
        .filter(|h| h.len() == 6)
        .ok_or_else(bad)?;
    let mut out = [0.0; 3];
    for (i, o) in out.iter_mut().enumerate() {
        *o = f64::from(u8::from_str_radix(&h[2 * i..2 * i + 2], 16).map_err(|_| bad())?);
    }
    Ok(out)
}

/// Piecewise-linear color at `t` in `[0, 1]` along evenly spaced anchors.
fn ramp_color(anchors: &[[f64; 3]], t: f64) -> String {
    let t = t.clamp(0.0, 1.0);
    let seg = (anchors.len() - 1) as f64;
    let i = ((t * seg).floor() as usize).min(anchors.len() - 2);
    let f = t * seg - i as f64;
    let c: Vec<u8> = (0..3)
        .map(|k| (anchors[i][k] + f * (anchors[i + 1][k] - anchors[i][k])).round() as u8)
        .collect();
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Renders `trace` with one label per token row. Subject tokens get a `*`.
pub fn render_svg(trace: &ImpactMatrix, tokens: &[String], spec: &HeatmapSpec) -> Result<String> {
    let (t_n, l_n) = (trace.n_tokens, trace.n_layers);
    if trace.values.len() != t_n * l_n || t_n == 0 || l_n == 0 {
        return Err(LabError::Config(format!(
            "trace holds {} values for a {t_n}x{l_n} grid",
            trace.values.len()
        )));
    }
    if tokens.len() != t_n {
        return Err(LabError::Config(format!(
            "{} token labels for {t_n} trace rows",
            tokens.len()
        )));
    }
    let anchors = match &spec.ramp {
        Some(r) if r.len() >= 2 => r.iter().map(|c| parse_hex(c)).collect::<Result<Vec<_>>>()?,
        Some(_) => {
            return Err(LabError::Config(
                "a color ramp needs at least two anchors".into(),
            ))
        }
        None => default_ramp(trace.target_module)
            .iter()
            .map(|c| parse_hex(c))
            .collect::<Result<_>>()?,
    };
    if spec.cell == 0 {
        return Err(LabError::Config(
            "heatmap cell size must be positive".into(),
        ));
    }
    let (lo, hi) = match spec.range {
        ColorRange::Absolute => (0.0, 1.0),
        ColorRange::Relative => (trace.min(), trace.max()),
    };
    let norm = |v: f64| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 };

    let cell = spec.cell as usize;
    let label_w = 8 * tokens
        .iter()
        .map(|t| t.chars().count() + 1)
        .max()
        .unwrap_or(1)
        + 8;
    let top = 40;
    let width = label_w + cell * l_n + 16;
    let height = top + cell * t_n + 36;
    let title = spec.title.clone().unwrap_or_else(|| {
        format!(
            "{} restoration: {} (p_clean {:.4}, p_corrupted {:.4})",
            match trace.target_module {
                TargetModule::Full => "hidden state",
                TargetModule::Attn => "attention",
                TargetModule::Mlp => "MLP",
            },
            trace.example_id,
            trace.p_clean,
            trace.p_corrupted
        )
    });
    let span = &trace.noise.subject_span;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="monospace" font-size="12">"#
    );
    let _ = writeln!(s, r#"<text x="8" y="20">{}</text>"#, escape(&title));
    for (i, tok) in tokens.iter().enumerate() {
        let mark = if span.contains(&i) { "*" } else { "" };
        let y = top + i * cell + cell / 2 + 4;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{y}" text-anchor="end">{}{mark}</text>"#,
            label_w - 6,
            escape(tok)
        );
        for l in 0..l_n {
            let v = trace.get(i, l);
            let _ = writeln!(
                s,
                r#"<rect class="cell" x="{}" y="{}" width="{cell}" height="{cell}" fill="{}"><title>{} L{l}: {v:.6}</title></rect>"#,
                label_w + l * cell,
                top + i * cell,
                ramp_color(&anchors, norm(v)),
                escape(tok)
            );
        }
    }
    for l in 0..l_n {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{l}</text>"#,
            label_w + l * cell + cell / 2,
            top + t_n * cell + 16
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">layer</text>"#,
        label_w + l_n * cell / 2,
        top + t_n * cell + 32
    );
    s.push_str("</svg>\n");
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use medlasa_core::tracing::NoiseSpec;

    fn trace(values: Vec<f64>, t: usize, l: usize) -> ImpactMatrix {
        ImpactMatrix {
            example_id: "x<1>".into(),
            target_module: TargetModule::Mlp,
            p_clean: 0.9,
            p_corrupted: 0.1,
            n_tokens: t,
            n_layers: l,
            values,
            noise: NoiseSpec {
                std: 0.3,
                n_samples: 2,
                seed: 0,
                subject_span: 1..2,
            },
        }
    }

    fn labels(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("t{i}")).collect()
    }

    #[test]
    fn one_rect_per_cell() {
        let svg = render_svg(
            &trace(vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6], 3, 2),
            &labels(3),
            &HeatmapSpec::default(),
        )
        .unwrap();
        assert_eq!(svg.matches(r#"<rect class="cell""#).count(), 6);
        assert!(svg.contains("x&lt;1&gt;"));
        assert!(svg.contains(">t1*</text>"));
    }

    #[test]
    fn constant_trace_is_uniform() {
        let svg = render_svg(
            &trace(vec![0.4; 8], 4, 2),
            &labels(4),
            &HeatmapSpec::default(),
        )
        .unwrap();
        let fills: std::collections::BTreeSet<_> =
            svg.split("fill=\"").skip(1).map(|s| &s[..7]).collect();
        assert_eq!(fills.len(), 1);
    }

    #[test]
    fn ramp_interpolation() {
        let a = [[0.0, 0.0, 0.0], [255.0, 255.0, 255.0], [255.0, 0.0, 0.0]];
        assert_eq!(ramp_color(&a, 0.0), "#000000");
        assert_eq!(ramp_color(&a, 0.5), "#ffffff");
        assert_eq!(ramp_color(&a, 1.0), "#ff0000");
        assert_eq!(ramp_color(&a, 0.25), "#808080");
        assert!(parse_hex("#12345").is_err());
    }

    #[test]
    fn rendering_is_deterministic_and_validates_dims() {
        let t = trace(vec![0.1, 0.7, 0.3, 0.2], 2, 2);
        let spec = HeatmapSpec {
            range: ColorRange::Absolute,
            ..Default::default()
        };
        assert_eq!(
            render_svg(&t, &labels(2), &spec).unwrap(),
            render_svg(&t, &labels(2), &spec).unwrap()
        );
        assert!(render_svg(&t, &labels(3), &spec).is_err());
        assert!(render_svg(&trace(vec![0.1; 3], 2, 2), &labels(2), &spec).is_err());
    }
}
