// SPDX-License-Identifier: MIT OR Apache-2.0

use medlasa_core::scaling::Strategy as EditStrategy;
use medlasa_core::tracing::{ImpactMatrix, NoiseSpec, TargetModule};
use medlasa_lab::config::{ExperimentConfig, SplitName};
use medlasa_lab::formats::{read_results_csv, write_results_csv, ResultRow, TraceFile};
use medlasa_lab::pipeline;
use proptest::prelude::*;

#[test]
fn exported_dataset_reloads_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::default();
    cfg.out_dir = dir.path().to_path_buf();
    let built = pipeline::build_data(&cfg).unwrap();
    let loaded = pipeline::load_data(&cfg).unwrap();
    assert_eq!(built.meta, loaded.meta);
    assert_eq!(built.splits, loaded.splits);
    let sizes = built.splits.each_ref().map(Vec::len);
    assert_eq!(sizes, built.meta.split_sizes);
    assert_eq!(sizes.iter().sum::<usize>(), 200);
    assert_eq!(loaded.split(SplitName::Test).len(), sizes[2]);
    assert_eq!(loaded.facts().len(), 400);
}

fn float() -> impl Strategy<Value = f64> {
    prop_oneof![
        any::<f64>().prop_filter("finite", |v| v.is_finite()),
        0.0f64..1.0
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn trace_files_round_trip_bit_exact(values in proptest::collection::vec(float(), 1..24), p in float(), seed in any::<u64>()) {
        let n = values.len();
        let file = TraceFile {
            tokens: (0..n).map(|i| format!("w{i}")).collect(),
            answer: vec!["yes".into()],
            trace: ImpactMatrix {
                example_id: "x".into(),
                target_module: TargetModule::Mlp,
                p_clean: p,
                p_corrupted: p / 3.0,
                n_tokens: n,
                n_layers: 1,
                values,
                noise: NoiseSpec { std: 0.1, n_samples: 3, seed, subject_span: 0..1 },
            },
        };
        let text = serde_json::to_string(&file).unwrap();
        let back: TraceFile = serde_json::from_str(&text).unwrap();
        prop_assert_eq!(back, file);
    }

    #[test]
    fn result_rows_round_trip(eff in 0.0f64..100.0, loc in proptest::option::of(0.0f64..100.0), seed in any::<u64>(), r_o in 1usize..64) {
        let round = |v: f64| (v * 1e4).round() / 1e4;
        let row = ResultRow {
            dataset: "medfe".into(),
            strategy: EditStrategy::Fixed,
            weights: "W_q+W_v".into(),
            alpha_o: 24.0,
            r_o,
            eff: round(eff),
            gen: 50.0,
            loc_td: None,
            loc_em: None,
            loc_ss: loc.map(round),
            loc_ts: Some(100.0),
            loc_ct: loc.map(round),
            flu: 2.5,
            avg: round(eff / 2.0),
            seed,
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        write_results_csv(&p, std::slice::from_ref(&row)).unwrap();
        prop_assert_eq!(read_results_csv(&p).unwrap(), vec![row]);
    }
}

#[test]
fn config_json_round_trips() {
    let mut cfg = ExperimentConfig::default();
    cfg.seed = 17;
    cfg.alpha_o = 12.0;
    let back = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
    assert_eq!(back, cfg);
}
