// SPDX-License-Identifier: MIT OR Apache-2.0

//! On-disk records: dataset export, trace files, result rows, run logs.

use std::collections::BTreeMap;
use std::path::Path;

use medlasa_core::adapters::WeightSelection;
use medlasa_core::benchkit::{
    AnswerStyle, DatasetAudit, DatasetConfig, Kg, KgEmbedding, LocalityClass, Tokenizer,
};
use medlasa_core::evaluation::EvalReport;
use medlasa_core::scaling::{ScalePair, Strategy};
use medlasa_core::tracing::ImpactMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::io::write_atomic;

/// Everything about a built dataset besides the split records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataMeta {
    pub dataset: String,
    pub style: AnswerStyle,
    pub seed: u64,
    pub generator: DatasetConfig,
    pub splits: [f64; 3],
    pub split_sizes: [usize; 3],
    pub audit: DatasetAudit,
    pub type_distribution: BTreeMap<String, usize>,
    /// Omitted locality classes and why.
    pub notes: Vec<String>,
    pub rotate_losses: Vec<f64>,
    pub tokenizer: Tokenizer,
    pub kg: Kg,
    pub embedding: KgEmbedding,
}

/// A trace with the words of its prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceFile {
    pub tokens: Vec<String>,
    pub answer: Vec<String>,
    pub trace: ImpactMatrix,
}

/// One CSV row per evaluated configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub dataset: String,
    pub strategy: Strategy,
    pub weights: String,
    pub alpha_o: f64,
    pub r_o: usize,
    pub eff: f64,
    pub gen: f64,
    pub loc_td: Option<f64>,
    pub loc_em: Option<f64>,
    pub loc_ss: Option<f64>,
    pub loc_ts: Option<f64>,
    pub loc_ct: Option<f64>,
    pub flu: f64,
    pub avg: f64,
    pub seed: u64,
}

pub const CSV_COLUMNS: [&str; 15] = [
    "dataset", "strategy", "weights", "alpha_o", "r_o", "eff", "gen", "loc_td", "loc_em", "loc_ss",
    "loc_ts", "loc_ct", "flu", "avg", "seed",
];

/// Four decimals keeps files readable and stable across formatting.
fn round4(v: f64) -> f64 {
    (v * 1e4).round() / 1e4
}

impl ResultRow {
    pub fn new(
        dataset: &str,
        strategy: Strategy,
        weights: &WeightSelection,
        alpha_o: f64,
        r_o: usize,
        report: &EvalReport,
        seed: u64,
    ) -> Self {
        let loc = |c| report.locality.get(&c).copied().map(round4);
        Self {
            dataset: dataset.to_string(),
            strategy,
            weights: weights.to_string(),
            alpha_o,
            r_o,
            eff: round4(report.efficacy),
            gen: round4(report.generality),
            loc_td: loc(LocalityClass::Td),
            loc_em: loc(LocalityClass::Em),
            loc_ss: loc(LocalityClass::Ss),
            loc_ts: loc(LocalityClass::Ts),
            loc_ct: loc(LocalityClass::Ct),
            flu: round4(report.fluency),
            avg: round4(report.average),
            seed,
        }
    }

    pub fn locality(&self) -> Vec<f64> {
        [
            self.loc_td,
            self.loc_em,
            self.loc_ss,
            self.loc_ts,
            self.loc_ct,
        ]
        .into_iter()
        .flatten()
        .collect()
    }

    pub fn locality_mean(&self) -> f64 {
        let l = self.locality();
        l.iter().sum::<f64>() / l.len() as f64
    }
}

pub fn results_csv(rows: &[ResultRow]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    w.write_record(CSV_COLUMNS)
        .and_then(|_| rows.iter().try_for_each(|r| w.serialize(r)))
        .map_err(|e| LabError::Config(format!("csv: {e}")))?;
    w.into_inner()
        .map_err(|e| LabError::Config(format!("csv: {e}")))
}

pub fn write_results_csv(path: &Path, rows: &[ResultRow]) -> Result<()> {
    write_atomic(path, &results_csv(rows)?)
}

pub fn read_results_csv(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| LabError::format(path, e))?;
    let header: Vec<String> = r
        .headers()
        .map_err(|e| LabError::format(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    if header != CSV_COLUMNS {
        return Err(LabError::format(
            path,
            format!("unexpected columns {header:?}"),
        ));
    }
    r.deserialize()
        .map(|row| row.map_err(|e| LabError::format(path, e)))
        .collect()
}

/// `type,count` rows.
pub fn type_distribution_csv(dist: &BTreeMap<String, usize>) -> Vec<u8> {
    let mut out = String::from("type,count\n");
    for (k, v) in dist {
        out.push_str(&format!("{k},{v}\n"));
    }
    out.into_bytes()
}

/// One line of an edit run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditLogEntry {
    pub id: String,
    pub strategy: Strategy,
    pub weights: String,
    pub alpha_o: f64,
    pub r_o: usize,
    pub seed: u64,
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub trainable_parameters: usize,
    pub scales: ScalePair,
}

pub fn trace_file_name(id: &str, module: medlasa_core::tracing::TargetModule) -> String {
    let m = match module {
        medlasa_core::tracing::TargetModule::Full => "full",
        medlasa_core::tracing::TargetModule::Attn => "attn",
        medlasa_core::tracing::TargetModule::Mlp => "mlp",
    };
    format!("{id}_{m}.json")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report() -> EvalReport {
        let mut locality = BTreeMap::new();
        locality.insert(LocalityClass::Td, 87.123456);
        locality.insert(LocalityClass::Ct, 100.0);
        EvalReport {
            efficacy: 100.0,
            generality: 55.0,
            locality,
            fluency: 2.654321,
            average: 85.38,
            counts: Default::default(),
        }
    }

    #[test]
    fn csv_has_fixed_columns_and_round_trips() {
        let w = WeightSelection::preset("qvko").unwrap();
        let rows = vec![
            ResultRow::new("medcf", Strategy::Medlasa, &w, 24.0, 8, &report(), 0),
            ResultRow::new("medcf", Strategy::Random, &w, 24.0, 8, &report(), 3),
        ];
        let bytes = results_csv(&rows).unwrap();
        let text = String::from_utf8(bytes).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), CSV_COLUMNS.join(","));
        assert_eq!(
            lines.next().unwrap(),
            "medcf,medlasa,W_q+W_k+W_v+W_o,24.0,8,100.0,55.0,87.1235,,,,100.0,2.6543,85.38,0"
        );
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        write_results_csv(&p, &rows).unwrap();
        let back = read_results_csv(&p).unwrap();
        assert_eq!(back, rows);
        assert!((back[0].locality_mean() - (87.1235 + 100.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn wrong_header_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        std::fs::write(&p, "a,b\n1,2\n").unwrap();
        assert!(read_results_csv(&p).is_err());
    }
}
