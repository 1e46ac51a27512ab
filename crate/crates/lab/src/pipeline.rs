// SPDX-License-Identifier: MIT OR Apache-2.0

//! Pipeline stages. Each stage reads its inputs from the output directory,
//! reports a missing input as an upstream error, and writes its outputs
//! atomically.

use std::ops::Range;
use std::path::{Path, PathBuf};

use medlasa_core::adapters::WeightSelection;
use medlasa_core::benchkit::{
    audit_dataset, build_dataset, build_tokenizer, split_records, type_distribution, EditRecord,
    Tokenizer,
};
use medlasa_core::editing::{apply_edit, pretrain_base, EditOutcome, Fact, PretrainOutcome};
use medlasa_core::evaluation::{score_edit, EditScores, EvalCase, EvalReport};
use medlasa_core::model::MicroTransformer;
use medlasa_core::rng::sub_seed;
use medlasa_core::scaling::{strategy_scales, ScaleContext, ScalePair, Strategy};
use medlasa_core::tracing::{
    subject_embedding_std, trace_impact, ImpactMatrix, NoiseSpec, TargetModule,
};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_adapter, load_model, save_adapter, save_model};
use crate::config::{ExperimentConfig, ScaleSource, SplitName, Stage};
use crate::error::{LabError, Result};
use crate::formats::{
    trace_file_name, type_distribution_csv, write_results_csv, DataMeta, EditLogEntry, ResultRow,
    TraceFile,
};
use crate::heatmap::render_svg;
use crate::io::{read_json, read_upstream, require, write_atomic, write_json, write_json_lines};

const SPLITS: [SplitName; 3] = [SplitName::Train, SplitName::Valid, SplitName::Test];

/// A dataset as exported by `build-data`.
#[derive(Debug, Clone)]
pub struct DataBundle {
    pub meta: DataMeta,
    pub splits: [Vec<EditRecord>; 3],
}

impl DataBundle {
    pub fn split(&self, name: SplitName) -> &[EditRecord] {
        &self.splits[name as usize]
    }

    pub fn records(&self) -> impl Iterator<Item = &EditRecord> {
        self.splits.iter().flatten()
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.meta.tokenizer
    }

    /// Question and rephrase of every record with its true answer.
    pub fn facts(&self) -> Vec<Fact> {
        let tok = self.tokenizer();
        self.records()
            .flat_map(|r| {
                [&r.question, &r.rephrase].map(|q| Fact {
                    prompt: tok.encode_prompt(q),
                    answer: tok.encode(&r.answer_true),
                })
            })
            .collect()
    }
}

fn split_path(dir: &Path, name: SplitName) -> PathBuf {
    dir.join(format!("{}.json", name.as_str()))
}

/// Generates, audits, splits and exports the dataset.
pub fn build_data(cfg: &ExperimentConfig) -> Result<DataBundle> {
    let seed = cfg.stage_seed(Stage::Data);
    let ds = build_dataset(&cfg.data.generator, seed)?;
    let tok = build_tokenizer(&ds.records);
    let audit = audit_dataset(&ds.records, &tok);
    if !audit.is_clean() {
        return Err(
            medlasa_core::Error::Generation(format!("dataset audit failed: {audit:?}")).into(),
        );
    }
    let splits = split_records(&ds.records, cfg.data.splits, seed)?;
    let meta = DataMeta {
        dataset: ds.name().to_string(),
        style: ds.style,
        seed,
        generator: cfg.data.generator.clone(),
        splits: cfg.data.splits,
        split_sizes: [splits[0].len(), splits[1].len(), splits[2].len()],
        audit,
        type_distribution: type_distribution(&ds.records),
        notes: ds.notes,
        rotate_losses: ds.rotate_losses,
        tokenizer: tok,
        kg: ds.kg,
        embedding: ds.embedding,
    };
    let dir = cfg.data_dir();
    for (name, records) in SPLITS.iter().zip(&splits) {
        write_json(&split_path(&dir, *name), records)?;
    }
    write_json(&dir.join("meta.json"), &meta)?;
    write_atomic(
        &dir.join("type_distribution.csv"),
        &type_distribution_csv(&meta.type_distribution),
    )?;
    Ok(DataBundle { meta, splits })
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<DataBundle> {
    let dir = cfg.data_dir();
    let meta: DataMeta = read_upstream(&dir.join("meta.json"), "build-data")?;
    let mut splits: [Vec<EditRecord>; 3] = Default::default();
    for (name, slot) in SPLITS.iter().zip(&mut splits) {
        *slot = read_upstream(&split_path(&dir, *name), "build-data")?;
    }
    Ok(DataBundle { meta, splits })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub facts: usize,
    pub epochs: usize,
    pub accuracy: f64,
    pub losses: Vec<f64>,
    pub seed: u64,
}

/// Trains the base model on every record's true answer and saves it.
pub fn pretrain(cfg: &ExperimentConfig) -> Result<(PretrainOutcome, PretrainSummary)> {
    let data = load_data(cfg)?;
    let vocab = data.tokenizer().len();
    if vocab > cfg.model.vocab_size {
        return Err(LabError::Config(format!(
            "model.vocab_size {} is smaller than the dataset vocabulary {vocab}",
            cfg.model.vocab_size
        )));
    }
    let facts = data.facts();
    let seed = cfg.stage_seed(Stage::Pretrain);
    let out = pretrain_base(&facts, &cfg.model, &cfg.pretrain, seed)?;
    let summary = PretrainSummary {
        facts: facts.len(),
        epochs: out.epochs,
        accuracy: out.accuracy,
        losses: out.losses.clone(),
        seed,
    };
    let path = cfg.checkpoint_path();
    save_model(&out.model, &path)?;
    write_json(&path.with_file_name("pretrain.json"), &summary)?;
    Ok((out, summary))
}

pub fn load_base(cfg: &ExperimentConfig) -> Result<MicroTransformer> {
    let path = cfg.checkpoint_path();
    require(&path, "pretrain")?;
    load_model(&path)
}

/// Per-item traces of one module, aligned with a session's items.
#[derive(Debug, Clone, PartialEq)]
pub struct ModuleTraces {
    pub module: TargetModule,
    pub traces: Vec<ImpactMatrix>,
}

/// Traces feeding the attention-site and MLP-site scales.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleTraces {
    pub attn: ModuleTraces,
    pub mlp: ModuleTraces,
}

/// Data, base model and the records to edit.
#[derive(Debug, Clone)]
pub struct Session {
    pub cfg: ExperimentConfig,
    pub data: DataBundle,
    pub base: MicroTransformer,
    pub items: Vec<EditRecord>,
    pub cases: Vec<EvalCase>,
}

impl Session {
    /// Loads data and base; edits the first `edit.n_edits` records of the
    /// configured split.
    pub fn open(cfg: &ExperimentConfig) -> Result<Self> {
        let data = load_data(cfg)?;
        let base = load_base(cfg)?;
        let pool = data.split(cfg.edit.split);
        if cfg.edit.n_edits > pool.len() {
            return Err(LabError::Config(format!(
                "edit.n_edits {} exceeds the {} records of the {} split",
                cfg.edit.n_edits,
                pool.len(),
                cfg.edit.split.as_str()
            )));
        }
        let items = pool[..cfg.edit.n_edits].to_vec();
        Ok(Self::with_items(cfg.clone(), data, base, items))
    }

    pub fn with_items(
        cfg: ExperimentConfig,
        data: DataBundle,
        base: MicroTransformer,
        items: Vec<EditRecord>,
    ) -> Self {
        let cases = items
            .iter()
            .map(|r| EvalCase::from_record(r, data.tokenizer()))
            .collect();
        Self {
            cfg,
            data,
            base,
            items,
            cases,
        }
    }

    pub fn dataset(&self) -> &str {
        &self.data.meta.dataset
    }

    /// Noise std: configured directly, or the multiplier times the std of
    /// all subject-token embeddings.
    pub fn noise_std(&self) -> Result<f64> {
        if let Some(v) = self.cfg.noise.std {
            return Ok(v);
        }
        let tok = self.data.tokenizer();
        let subjects: Vec<Vec<u32>> = self
            .data
            .records()
            .map(|r| tok.encode(&r.subject))
            .collect();
        let refs: Vec<&[u32]> = subjects.iter().map(Vec::as_slice).collect();
        Ok(self.cfg.noise.multiplier * subject_embedding_std(&self.base, &refs)?)
    }

    /// Traces item `i` for `module` against its true answer.
    pub fn trace_item(&self, i: usize, module: TargetModule, std: f64) -> Result<TraceFile> {
        let (r, c) = (&self.items[i], &self.cases[i]);
        let noise = NoiseSpec {
            std,
            n_samples: self.cfg.noise.n_samples,
            seed: sub_seed(self.cfg.stage_seed(Stage::Trace), &r.id),
            subject_span: r.prompt_subject_span(),
        };
        let trace = trace_impact(
            &self.base,
            &r.id,
            &c.prompt,
            &c.original,
            &noise,
            module,
            self.cfg.noise.window,
        )?;
        let tok = self.data.tokenizer();
        Ok(TraceFile {
            tokens: c.prompt.iter().map(|&t| tok.word(t).to_string()).collect(),
            answer: c
                .original
                .iter()
                .map(|&t| tok.word(t).to_string())
                .collect(),
            trace,
        })
    }

    /// Traces every item for every configured module, in memory.
    pub fn compute_traces(&self) -> Result<Vec<TraceFile>> {
        let std = self.noise_std()?;
        let mut out = Vec::new();
        for i in 0..self.items.len() {
            for &m in &self.cfg.noise.modules {
                out.push(self.trace_item(i, m, std)?);
            }
        }
        Ok(out)
    }

    fn trace_dir(&self) -> PathBuf {
        self.cfg.out_dir.join("traces")
    }

    /// Reads the traces the scale source needs from `traces/`.
    pub fn load_scale_traces(&self) -> Result<ScaleTraces> {
        let dir = self.trace_dir();
        let load = |module| -> Result<ModuleTraces> {
            let traces = self
                .items
                .iter()
                .map(|r| {
                    let f: TraceFile =
                        read_upstream(&dir.join(trace_file_name(&r.id, module)), "trace")?;
                    Ok(f.trace)
                })
                .collect::<Result<_>>()?;
            Ok(ModuleTraces { module, traces })
        };
        let (a, m) = self.scale_modules();
        Ok(ScaleTraces {
            attn: load(a)?,
            mlp: load(m)?,
        })
    }

    /// Builds scale traces from in-memory trace files.
    pub fn scale_traces_from(&self, files: &[TraceFile]) -> Result<ScaleTraces> {
        let pick = |module| -> Result<ModuleTraces> {
            let traces = self
                .items
                .iter()
                .map(|r| {
                    files
                        .iter()
                        .find(|f| f.trace.example_id == r.id && f.trace.target_module == module)
                        .map(|f| f.trace.clone())
                        .ok_or_else(|| {
                            LabError::Config(format!("no {module:?} trace for {}", r.id))
                        })
                })
                .collect::<Result<_>>()?;
            Ok(ModuleTraces { module, traces })
        };
        let (a, m) = self.scale_modules();
        Ok(ScaleTraces {
            attn: pick(a)?,
            mlp: pick(m)?,
        })
    }

    fn scale_modules(&self) -> (TargetModule, TargetModule) {
        match self.cfg.scale_source {
            ScaleSource::Split => (TargetModule::Attn, TargetModule::Mlp),
            ScaleSource::Full => (TargetModule::Full, TargetModule::Full),
        }
    }

    fn spans(&self) -> Vec<Range<usize>> {
        self.items
            .iter()
            .map(EditRecord::prompt_subject_span)
            .collect()
    }

    /// Scales for item `i`. `traces` may be `None` for strategies that do
    /// not read them.
    pub fn scales_for(
        &self,
        i: usize,
        strategy: Strategy,
        alpha_o: f64,
        r_o: usize,
        item_seed: u64,
        traces: Option<&ScaleTraces>,
    ) -> Result<ScalePair> {
        if strategy.needs_traces() && traces.is_none() {
            return Err(LabError::Config(format!(
                "strategy {} needs traces",
                strategy.as_str()
            )));
        }
        let spans = self.spans();
        let side = |mt: Option<&ModuleTraces>, tag: &str| {
            let dataset: Vec<(&ImpactMatrix, Range<usize>)> = mt
                .map(|m| m.traces.iter().zip(spans.iter().cloned()).collect())
                .unwrap_or_default();
            strategy_scales(
                strategy,
                &ScaleContext {
                    n_layers: self.base.config().n_layers,
                    alpha_o,
                    r_o,
                    seed: sub_seed(item_seed, tag),
                    item_trace: mt.map(|m| (&m.traces[i], spans[i].clone())),
                    dataset_traces: &dataset,
                },
            )
        };
        Ok(ScalePair {
            attn: side(traces.map(|t| &t.attn), "attn")?,
            mlp: side(traces.map(|t| &t.mlp), "mlp")?,
        })
    }

    /// Edits every item independently from the base model.
    pub fn edit_all(&self, run: &RunSpec<'_>) -> Result<Vec<(EditOutcome, EditLogEntry)>> {
        let edit_seed = sub_seed(run.seed, Stage::Edit.as_str());
        let mut out = Vec::with_capacity(self.items.len());
        for (i, (r, c)) in self.items.iter().zip(&self.cases).enumerate() {
            let item_seed = sub_seed(edit_seed, &r.id);
            let scales =
                self.scales_for(i, run.strategy, run.alpha_o, run.r_o, item_seed, run.traces)?;
            let o = apply_edit(
                &self.base,
                &c.prompt,
                &c.target,
                run.weights,
                &scales,
                &self.cfg.train,
                item_seed,
            )?;
            let log = EditLogEntry {
                id: r.id.clone(),
                strategy: run.strategy,
                weights: run.weights.to_string(),
                alpha_o: run.alpha_o,
                r_o: run.r_o,
                seed: item_seed,
                steps: o.steps,
                initial_loss: o.losses.first().copied().unwrap_or(f64::NAN),
                final_loss: o.losses.last().copied().unwrap_or(f64::NAN),
                trainable_parameters: o.trainable_parameters,
                scales,
            };
            out.push((o, log));
        }
        Ok(out)
    }

    /// Scores each edit against the base and aggregates.
    pub fn evaluate(&self, outcomes: &[EditOutcome]) -> Result<(EvalReport, Vec<EditScores>)> {
        if outcomes.len() != self.cases.len() {
            return Err(LabError::Config(format!(
                "{} edits for {} items",
                outcomes.len(),
                self.cases.len()
            )));
        }
        let mut scores = Vec::with_capacity(outcomes.len());
        for (o, c) in outcomes.iter().zip(&self.cases) {
            let merged = o.adapted(&self.base)?.merge()?;
            scores.push(score_edit(&self.base, &merged, c, &self.cfg.eval)?);
        }
        Ok((EvalReport::aggregate(&scores)?, scores))
    }

    /// The unedited base scored against itself.
    pub fn pre_edit_report(&self) -> Result<EvalReport> {
        let scores = self
            .cases
            .iter()
            .map(|c| score_edit(&self.base, &self.base, c, &self.cfg.eval))
            .collect::<medlasa_core::Result<Vec<_>>>()?;
        Ok(EvalReport::aggregate(&scores)?)
    }

    /// Edits and evaluates one configuration in memory.
    pub fn run(&self, run: &RunSpec<'_>) -> Result<(ResultRow, Vec<EditLogEntry>)> {
        let edits = self.edit_all(run)?;
        let (outcomes, logs): (Vec<_>, Vec<_>) = edits.into_iter().unzip();
        let (report, _) = self.evaluate(&outcomes)?;
        let row = ResultRow::new(
            self.dataset(),
            run.strategy,
            run.weights,
            run.alpha_o,
            run.r_o,
            &report,
            run.seed,
        );
        Ok((row, logs))
    }
}

/// One editing configuration.
#[derive(Debug, Clone, Copy)]
pub struct RunSpec<'a> {
    pub strategy: Strategy,
    pub weights: &'a WeightSelection,
    pub alpha_o: f64,
    pub r_o: usize,
    /// Run seed; edit seeds derive from it.
    pub seed: u64,
    pub traces: Option<&'a ScaleTraces>,
}

/// Traces the edit items and writes `traces/{id}_{module}.json`.
pub fn trace(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let s = Session::open(cfg)?;
    let dir = s.trace_dir();
    let mut paths = Vec::new();
    for f in s.compute_traces()? {
        let p = dir.join(trace_file_name(&f.trace.example_id, f.trace.target_module));
        write_json(&p, &f)?;
        paths.push(p);
    }
    Ok(paths)
}

fn edit_dir(cfg: &ExperimentConfig, strategy: Strategy) -> PathBuf {
    cfg.out_dir.join("edits").join(strategy.as_str())
}

fn traces_if_needed(s: &Session, strategy: Strategy) -> Result<Option<ScaleTraces>> {
    if strategy.needs_traces() {
        s.load_scale_traces().map(Some)
    } else {
        Ok(None)
    }
}

/// Edits with the configured strategy and saves one adapter per item.
pub fn edit(cfg: &ExperimentConfig) -> Result<Vec<EditLogEntry>> {
    let s = Session::open(cfg)?;
    let traces = traces_if_needed(&s, cfg.strategy)?;
    let run = RunSpec {
        strategy: cfg.strategy,
        weights: &cfg.weights,
        alpha_o: cfg.alpha_o,
        r_o: cfg.r_o,
        seed: cfg.seed,
        traces: traces.as_ref(),
    };
    let dir = edit_dir(cfg, cfg.strategy);
    let mut logs = Vec::new();
    for (o, log) in s.edit_all(&run)? {
        save_adapter(&o, s.base.config(), &dir.join(format!("{}.mlsa", log.id)))?;
        logs.push(log);
    }
    write_json_lines(&dir.join("runlog.jsonl"), &logs)?;
    Ok(logs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditEval {
    pub id: String,
    pub scores: EditScores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalFile {
    pub row: ResultRow,
    pub pre_edit: EvalReport,
    pub post_edit: EvalReport,
    pub edits: Vec<EditEval>,
}

/// Scores saved adapters of the configured strategy.
pub fn eval(cfg: &ExperimentConfig) -> Result<EvalFile> {
    let s = Session::open(cfg)?;
    let dir = edit_dir(cfg, cfg.strategy);
    let outcomes = s
        .items
        .iter()
        .map(|r| {
            let p = dir.join(format!("{}.mlsa", r.id));
            require(&p, "edit")?;
            load_adapter(&p, &s.base)
        })
        .collect::<Result<Vec<_>>>()?;
    let weights = outcomes
        .first()
        .map_or(cfg.weights.clone(), |o| o.selection.clone());
    let (post, scores) = s.evaluate(&outcomes)?;
    let file = EvalFile {
        row: ResultRow::new(
            s.dataset(),
            cfg.strategy,
            &weights,
            cfg.alpha_o,
            cfg.r_o,
            &post,
            cfg.seed,
        ),
        pre_edit: s.pre_edit_report()?,
        post_edit: post,
        edits: s
            .items
            .iter()
            .zip(scores)
            .map(|(r, scores)| EditEval {
                id: r.id.clone(),
                scores,
            })
            .collect(),
    };
    let out = cfg.out_dir.join("eval").join(cfg.strategy.as_str());
    write_json(&out.join("report.json"), &file)?;
    write_results_csv(&out.join("results.csv"), std::slice::from_ref(&file.row))?;
    Ok(file)
}

/// Sweeps strategies, weight selections, `alpha_o` and `r_o`.
pub fn ablate(cfg: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    let s = Session::open(cfg)?;
    let a = &cfg.ablate;
    let traced = a.strategies.iter().any(|st| st.needs_traces());
    let traces = if traced {
        Some(s.load_scale_traces()?)
    } else {
        None
    };
    let weights = if a.weights.is_empty() {
        vec![cfg.weights.clone()]
    } else {
        a.weights.clone()
    };
    let alphas = if a.alpha_o.is_empty() {
        vec![cfg.alpha_o]
    } else {
        a.alpha_o.clone()
    };
    let ranks = if a.r_o.is_empty() {
        vec![cfg.r_o]
    } else {
        a.r_o.clone()
    };
    let mut rows = Vec::new();
    let mut logs = Vec::new();
    for w in &weights {
        for &alpha_o in &alphas {
            for &r_o in &ranks {
                for &strategy in &a.strategies {
                    let runs = if strategy == Strategy::Random {
                        a.random_runs
                    } else {
                        1
                    };
                    for k in 0..runs as u64 {
                        let run = RunSpec {
                            strategy,
                            weights: w,
                            alpha_o,
                            r_o,
                            seed: cfg.seed + k,
                            traces: traces.as_ref(),
                        };
                        let (row, l) = s.run(&run)?;
                        rows.push(row);
                        logs.extend(l);
                    }
                }
            }
        }
    }
    let dir = cfg.out_dir.join("ablate");
    write_results_csv(&dir.join("results.csv"), &rows)?;
    write_json_lines(&dir.join("runlog.jsonl"), &logs)?;
    Ok(rows)
}

/// Renders trace files to `heatmaps/*.svg`.
pub fn heatmap(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let inputs = match &cfg.paths.trace {
        Some(p) => {
            require(p, "trace")?;
            vec![p.clone()]
        }
        None => {
            let dir = cfg.out_dir.join("traces");
            require(&dir, "trace")?;
            let mut v: Vec<PathBuf> = std::fs::read_dir(&dir)
                .map_err(|e| LabError::io(&dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "json"))
                .collect();
            v.sort();
            if v.is_empty() {
                return Err(LabError::Upstream {
                    path: dir,
                    command: "trace",
                });
            }
            v
        }
    };
    let out = cfg.out_dir.join("heatmaps");
    let mut written = Vec::new();
    for p in inputs {
        let f: TraceFile = read_json(&p)?;
        let svg = render_svg(&f.trace, &f.tokens, &cfg.heatmap)?;
        let stem = p
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let target = out.join(format!("{stem}.svg"));
        write_atomic(&target, svg.as_bytes())?;
        written.push(target);
    }
    Ok(written)
}

/// Median, sorting in place. NaN when empty.
pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}
