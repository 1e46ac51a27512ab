// SPDX-License-Identifier: MIT OR Apache-2.0

//! Experiment configuration. Every field has a default, unknown keys are
//! rejected, and all randomness derives from `seed` via named sub-seeds.

use std::path::{Path, PathBuf};

use medlasa_core::adapters::WeightSelection;
use medlasa_core::benchkit::DatasetConfig;
use medlasa_core::editing::{PretrainConfig, TrainConfig};
use medlasa_core::evaluation::EvalConfig;
use medlasa_core::model::ModelConfig;
use medlasa_core::rng::sub_seed;
use medlasa_core::scaling::{Strategy, DEFAULT_ALPHA_O, DEFAULT_R_O};
use medlasa_core::tracing::{TargetModule, DEFAULT_SAMPLES, NOISE_MULTIPLIER};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{LabError, Result};
use crate::heatmap::HeatmapSpec;

/// Pipeline stages owning an independent random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Data,
    Pretrain,
    Trace,
    Edit,
    Eval,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Data => "data",
            Stage::Pretrain => "pretrain",
            Stage::Trace => "trace",
            Stage::Edit => "edit",
            Stage::Eval => "eval",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub generator: DatasetConfig,
    /// Train / valid / test fractions.
    pub splits: [f64; 3],
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            generator: DatasetConfig::default(),
            splits: [0.6, 0.2, 0.2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    /// Noise std as a multiple of the subject-embedding std.
    pub multiplier: f64,
    /// Absolute std; overrides `multiplier` when set.
    pub std: Option<f64>,
    pub n_samples: usize,
    /// Severing window in layers; `None` pins through the last layer and
    /// `Some(0)` disables severing.
    pub window: Option<usize>,
    pub modules: Vec<TargetModule>,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            multiplier: NOISE_MULTIPLIER,
            std: None,
            n_samples: DEFAULT_SAMPLES,
            window: None,
            modules: vec![TargetModule::Full, TargetModule::Attn, TargetModule::Mlp],
        }
    }
}

/// Which traces feed the attention-site and MLP-site scale sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleSource {
    /// Attention traces for attention sites, MLP traces for MLP sites.
    Split,
    /// The full residual trace for both.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Valid,
    Test,
}

impl SplitName {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Valid => "valid",
            SplitName::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EditConfig {
    /// Records edited, taken from the front of `split`.
    pub n_edits: usize,
    pub split: SplitName,
}

impl Default for EditConfig {
    fn default() -> Self {
        Self {
            n_edits: 20,
            split: SplitName::Test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub strategies: Vec<Strategy>,
    /// Independent runs of the random strategy.
    pub random_runs: usize,
    /// Weight selections to sweep; empty uses the experiment's.
    #[serde(serialize_with = "ser_selections", deserialize_with = "de_selections")]
    pub weights: Vec<WeightSelection>,
    /// `alpha_o` values to sweep; empty uses the experiment's.
    pub alpha_o: Vec<f64>,
    pub r_o: Vec<usize>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            strategies: vec![Strategy::Random, Strategy::Fixed, Strategy::Medlasa],
            random_runs: 5,
            weights: Vec::new(),
            alpha_o: Vec::new(),
            r_o: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Existing dataset directory to use instead of `<out>/data`.
    pub data: Option<PathBuf>,
    /// Existing base checkpoint to use instead of `<out>/model/base.mlsa`.
    pub checkpoint: Option<PathBuf>,
    /// Trace file rendered by `heatmap`; all traces when unset.
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub paths: PathsConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub noise: NoiseConfig,
    pub strategy: Strategy,
    #[serde(serialize_with = "ser_selection", deserialize_with = "de_selection")]
    pub weights: WeightSelection,
    pub alpha_o: f64,
    pub r_o: usize,
    pub scale_source: ScaleSource,
    pub train: TrainConfig,
    pub edit: EditConfig,
    pub eval: EvalConfig,
    pub ablate: AblateConfig,
    pub heatmap: HeatmapSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            paths: PathsConfig::default(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig {
                min_epochs: 100,
                ..PretrainConfig::default()
            },
            noise: NoiseConfig::default(),
            strategy: Strategy::Medlasa,
            weights: WeightSelection::all(),
            alpha_o: DEFAULT_ALPHA_O,
            r_o: DEFAULT_R_O,
            scale_source: ScaleSource::Split,
            train: TrainConfig {
                lr: 1e-3,
                target_nll_stop: 0.3,
                ..TrainConfig::default()
            },
            edit: EditConfig::default(),
            eval: EvalConfig::default(),
            ablate: AblateConfig::default(),
            heatmap: HeatmapSpec::default(),
        }
    }
}

fn ser_selection<S: Serializer>(w: &WeightSelection, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&w.to_string())
}

fn ser_selections<S: Serializer>(ws: &[WeightSelection], s: S) -> Result<S::Ok, S::Error> {
    s.collect_seq(ws.iter().map(|w| w.to_string()))
}

/// A preset name, a `+`-joined string, or a list of weight names.
#[derive(Deserialize)]
#[serde(untagged)]
enum SelectionRepr {
    Text(String),
    List(Vec<medlasa_core::model::WeightName>),
}

impl SelectionRepr {
    fn resolve(self) -> Result<WeightSelection, String> {
        match self {
            SelectionRepr::Text(s) => s.parse().map_err(|e| format!("weights {s:?}: {e}")),
            SelectionRepr::List(v) => WeightSelection::new(v).map_err(|e| e.to_string()),
        }
    }
}

fn de_selection<'de, D: Deserializer<'de>>(d: D) -> Result<WeightSelection, D::Error> {
    SelectionRepr::deserialize(d)?
        .resolve()
        .map_err(serde::de::Error::custom)
}

fn de_selections<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<WeightSelection>, D::Error> {
    Vec::<SelectionRepr>::deserialize(d)?
        .into_iter()
        .map(|r| r.resolve().map_err(serde::de::Error::custom))
        .collect()
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(LabError::Config(msg()))
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| LabError::Config(e.to_string()))?;
        if !value.is_object() {
            return Err(LabError::Config("config must be a JSON object".into()));
        }
        let cfg: Self =
            serde_json::from_value(value).map_err(|e| LabError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LabError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            LabError::Config(m) => LabError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// Checks every section before any work starts.
    pub fn validate(&self) -> Result<()> {
        let core = |r: medlasa_core::Result<()>, what: &str| {
            r.map_err(|e| LabError::Config(format!("{what}: {e}")))
        };
        core(self.model.validate(), "model")?;
        core(self.train.validate(), "train")?;
        core(self.eval.validate(), "eval")?;
        let p = &self.pretrain;
        check(
            p.max_epochs >= 1 && p.batch_size >= 1 && p.lr > 0.0 && p.lr.is_finite(),
            || "pretrain needs positive max_epochs, batch_size and lr".into(),
        )?;
        check((0.0..=1.0).contains(&p.target_accuracy), || {
            "pretrain.target_accuracy must lie in [0, 1]".into()
        })?;
        check(p.min_epochs <= p.max_epochs, || {
            "pretrain.min_epochs exceeds max_epochs".into()
        })?;
        let s = self.data.splits;
        check(
            s.iter().all(|x| (0.0..=1.0).contains(x)) && (s.iter().sum::<f64>() - 1.0).abs() < 1e-9,
            || format!("data.splits {s:?} must be fractions summing to 1"),
        )?;
        let g = &self.data.generator;
        check(
            g.n_entities >= 4 && g.n_relations >= 1 && g.n_triples >= 1 && g.k >= 1,
            || "data.generator needs n_entities >= 4 and positive n_relations, n_triples, k".into(),
        )?;
        let n = &self.noise;
        check(n.multiplier >= 0.0 && n.multiplier.is_finite(), || {
            "noise.multiplier must be finite and non-negative".into()
        })?;
        check(n.std.is_none_or(|v| v >= 0.0 && v.is_finite()), || {
            "noise.std must be finite and non-negative".into()
        })?;
        check(n.n_samples >= 1, || {
            "noise.n_samples must be at least 1".into()
        })?;
        check(!n.modules.is_empty(), || "noise.modules is empty".into())?;
        check(self.alpha_o > 0.0 && self.alpha_o.is_finite(), || {
            "alpha_o must be positive".into()
        })?;
        check(self.r_o >= 1, || "r_o must be at least 1".into())?;
        check(self.edit.n_edits >= 1, || {
            "edit.n_edits must be at least 1".into()
        })?;
        let a = &self.ablate;
        check(!a.strategies.is_empty(), || {
            "ablate.strategies is empty".into()
        })?;
        check(
            !a.strategies.contains(&Strategy::Random) || a.random_runs >= 1,
            || "ablate.random_runs must be at least 1".into(),
        )?;
        check(a.alpha_o.iter().all(|v| *v > 0.0 && v.is_finite()), || {
            "ablate.alpha_o values must be positive".into()
        })?;
        check(a.r_o.iter().all(|v| *v >= 1), || {
            "ablate.r_o values must be at least 1".into()
        })?;
        let needs = self.trace_modules_needed();
        for m in needs {
            check(n.modules.contains(&m), || {
                format!("noise.modules must include {m:?} for trace-driven strategies")
            })?;
        }
        if let Some(r) = &self.heatmap.ramp {
            check(r.len() >= 2, || {
                "heatmap.ramp needs at least two colors".into()
            })?;
        }
        check(self.heatmap.cell >= 1, || {
            "heatmap.cell must be positive".into()
        })?;
        Ok(())
    }

    /// Trace modules the configured scale source reads.
    pub fn trace_modules_needed(&self) -> Vec<TargetModule> {
        let traced = std::iter::once(self.strategy)
            .chain(self.ablate.strategies.iter().copied())
            .any(Strategy::needs_traces);
        match (traced, self.scale_source) {
            (false, _) => Vec::new(),
            (true, ScaleSource::Split) => vec![TargetModule::Attn, TargetModule::Mlp],
            (true, ScaleSource::Full) => vec![TargetModule::Full],
        }
    }

    pub fn stage_seed(&self, stage: Stage) -> u64 {
        sub_seed(self.seed, stage.as_str())
    }

    pub fn data_dir(&self) -> PathBuf {
        self.paths
            .data
            .clone()
            .unwrap_or_else(|| self.out_dir.join("data"))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.paths
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.out_dir.join("model").join("base.mlsa"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let back = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(ExperimentConfig::from_json("{}").unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        for text in [
            r#"{"sed": 1}"#,
            r#"{"train": {"lr": 0.1, "momentum": 0.9}}"#,
            "[1]",
        ] {
            let err = ExperimentConfig::from_json(text).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{text}: {err}");
        }
    }

    #[test]
    fn weights_accept_presets_strings_and_lists() {
        let a = ExperimentConfig::from_json(r#"{"weights": "qvudg"}"#).unwrap();
        let b = ExperimentConfig::from_json(
            r#"{"weights": ["W_q", "W_v", "W_up", "W_down", "W_gate"]}"#,
        )
        .unwrap();
        let c =
            ExperimentConfig::from_json(r#"{"weights": "W_gate+W_down+W_up+W_v+W_q"}"#).unwrap();
        assert_eq!(a.weights, b.weights);
        assert_eq!(b.weights, c.weights);
        assert!(ExperimentConfig::from_json(r#"{"weights": "W_x"}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"weights": []}"#).is_err());
        let d = ExperimentConfig::from_json(r#"{"ablate": {"weights": ["v", "udg"]}}"#).unwrap();
        assert_eq!(d.ablate.weights.len(), 2);
    }

    #[test]
    fn invalid_values_are_rejected() {
        for text in [
            r#"{"alpha_o": 0}"#,
            r#"{"r_o": 0}"#,
            r#"{"data": {"splits": [0.5, 0.5, 0.5]}}"#,
            r#"{"model": {"d_model": 10, "n_heads": 4}}"#,
            r#"{"noise": {"modules": ["full"]}}"#,
            r#"{"train": {"lr": -1}}"#,
            r##"{"heatmap": {"ramp": ["#ffffff"]}}"##,
        ] {
            assert!(ExperimentConfig::from_json(text).is_err(), "{text}");
        }
        // a fixed-only experiment does not need severed traces
        ExperimentConfig::from_json(
            r#"{"strategy": "fixed", "ablate": {"strategies": ["fixed"]}, "noise": {"modules": ["full"]}}"#,
        )
        .unwrap();
    }

    #[test]
    fn stage_seeds_are_distinct() {
        let cfg = ExperimentConfig::default();
        let seeds: std::collections::BTreeSet<_> = [
            Stage::Data,
            Stage::Pretrain,
            Stage::Trace,
            Stage::Edit,
            Stage::Eval,
        ]
        .iter()
        .map(|s| cfg.stage_seed(*s))
        .collect();
        assert_eq!(seeds.len(), 5);
    }
}
