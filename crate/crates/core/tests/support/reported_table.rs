// SPDX-License-Identifier: MIT OR Apache-2.0

//! Published editing results (two-decimal cells).

/// Method, then MedFE (eff, gen, ct, ts, avg), then MedCF (eff, gen, td, em, ss, ts, avg).
/// Fluency columns are omitted.
pub const ROWS: [(&str, [f64; 5], [f64; 7]); 12] = [
    (
        "FT/chatdoctor",
        [61.39, 61.04, 73.09, 70.78, 66.57],
        [61.55, 61.48, 60.74, 63.02, 59.66, 58.74, 61.03],
    ),
    (
        "LoRA/chatdoctor",
        [94.45, 88.56, 83.24, 79.75, 86.50],
        [72.01, 71.90, 93.52, 91.88, 91.76, 92.72, 82.21],
    ),
    (
        "MEND/chatdoctor",
        [40.66, 40.51, 50.43, 44.52, 44.03],
        [24.72, 24.71, 75.29, 75.17, 74.85, 75.24, 49.92],
    ),
    (
        "ROME/chatdoctor",
        [84.01, 69.37, 92.88, 81.98, 82.06],
        [72.73, 72.51, 92.27, 61.20, 89.41, 86.51, 77.48],
    ),
    (
        "MEMIT/chatdoctor",
        [84.59, 70.23, 95.80, 82.46, 83.27],
        [82.20, 82.03, 94.61, 62.12, 92.09, 91.01, 83.54],
    ),
    (
        "MedLaSA/chatdoctor",
        [98.11, 93.58, 89.25, 84.11, 91.26],
        [72.37, 70.80, 96.16, 95.24, 95.59, 95.19, 83.56],
    ),
    (
        "FT/meditron",
        [62.82, 62.68, 67.62, 64.94, 64.51],
        [65.97, 65.36, 48.91, 50.39, 48.13, 46.25, 57.04],
    ),
    (
        "LoRA/meditron",
        [94.01, 89.29, 83.75, 79.13, 86.55],
        [72.19, 71.80, 92.29, 91.11, 91.36, 92.42, 81.90],
    ),
    (
        "MEND/meditron",
        [34.21, 31.34, 30.03, 34.23, 32.46],
        [22.87, 22.93, 71.16, 71.21, 71.03, 72.29, 47.16],
    ),
    (
        "ROME/meditron",
        [84.59, 69.22, 95.78, 86.44, 84.01],
        [72.69, 72.91, 92.79, 61.80, 90.06, 86.93, 77.84],
    ),
    (
        "MEMIT/meditron",
        [84.91, 70.80, 95.40, 82.02, 83.28],
        [83.10, 83.23, 95.01, 62.62, 92.99, 90.50, 84.22],
    ),
    (
        "MedLaSA/meditron",
        [98.77, 94.81, 87.41, 81.67, 90.66],
        [72.37, 71.06, 95.71, 94.84, 95.04, 94.90, 83.42],
    ),
];
