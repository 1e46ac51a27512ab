// SPDX-License-Identifier: MIT OR Apache-2.0

//! `average()` against published editing results: every row's Avg cell must
//! follow from its own Eff/Gen/Loc cells within 0.01.

use std::collections::BTreeMap;

use medlasa_core::benchkit::LocalityClass::{self, Ct, Em, Ss, Td, Ts};
use medlasa_core::evaluation::average;

mod support;

use support::reported_table::ROWS;

fn loc(pairs: &[(LocalityClass, f64)]) -> BTreeMap<LocalityClass, f64> {
    pairs.iter().copied().collect()
}

#[test]
fn every_reported_average_reconstructs() {
    let mut worst: f64 = 0.0;
    for (name, fe, cf) in ROWS {
        let a = average(fe[0], fe[1], &loc(&[(Ct, fe[2]), (Ts, fe[3])])).unwrap();
        assert!((a - fe[4]).abs() < 0.01, "{name} medfe: {a} vs {}", fe[4]);
        let b = average(
            cf[0],
            cf[1],
            &loc(&[(Td, cf[2]), (Em, cf[3]), (Ss, cf[4]), (Ts, cf[5])]),
        )
        .unwrap();
        assert!((b - cf[6]).abs() < 0.01, "{name} medcf: {b} vs {}", cf[6]);
        worst = worst.max((a - fe[4]).abs()).max((b - cf[6]).abs());
    }
    // rounding of two-decimal cells alone explains the residue
    assert!(worst < 0.008, "{worst}");
}
