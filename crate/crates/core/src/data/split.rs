use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::TableDataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitMode {
    /// Nested column sets v1, v1+v2, v1+v2+v3 over disjoint row thirds.
    Incremental,
    /// Two overlapping column sets over disjoint row halves.
    Transfer,
    /// Three disjoint column sets over disjoint row thirds.
    ZeroShot,
}

impl std::str::FromStr for SplitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "incremental" => Ok(SplitMode::Incremental),
            "transfer" => Ok(SplitMode::Transfer),
            "zeroshot" | "zero-shot" => Ok(SplitMode::ZeroShot),
            other => Err(Error::Config(format!("unknown split mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub mode: SplitMode,
    pub seed: u64,
    /// Fraction of columns shared by the two transfer sets.
    pub overlap_ratio: f64,
}

impl SplitSpec {
    pub fn new(mode: SplitMode, seed: u64) -> Self {
        SplitSpec {
            mode,
            seed,
            overlap_ratio: 0.5,
        }
    }
}

/// Splits a table into the column/row subsets of the incremental, transfer
/// and zero-shot protocols. Columns and rows are shuffled by a ChaCha8
/// generator seeded with `spec.seed`; each subset keeps the original column
/// and row order.
pub fn split_columns(dataset: &TableDataset, spec: &SplitSpec) -> Result<Vec<TableDataset>> {
    let c = dataset.schema.len();
    let required = match spec.mode {
        SplitMode::Transfer => 2,
        _ => 3,
    };
    if c < required {
        return Err(Error::TooFewColumns {
            required,
            actual: c,
        });
    }
    if spec.mode == SplitMode::Transfer && !(0.0..=1.0).contains(&spec.overlap_ratio) {
        return Err(Error::Config(format!(
            "overlap_ratio {} outside [0, 1]",
            spec.overlap_ratio
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut cols: Vec<usize> = (0..c).collect();
    cols.shuffle(&mut rng);
    let mut rows: Vec<usize> = (0..dataset.len()).collect();
    rows.shuffle(&mut rng);

    let column_sets: Vec<Vec<usize>> = match spec.mode {
        SplitMode::Incremental => {
            let parts = chunks(&cols, 3);
            vec![
                parts[0].clone(),
                [parts[0].clone(), parts[1].clone()].concat(),
                parts.concat(),
            ]
        }
        SplitMode::ZeroShot => chunks(&cols, 3),
        SplitMode::Transfer => {
            let (size, shared) = transfer_sizes(c, spec.overlap_ratio);
            let own = (size - shared).min((c - shared) / 2);
            let common = &cols[..shared];
            let first = &cols[shared..shared + own];
            let second = &cols[shared + own..shared + 2 * own];
            vec![[common, first].concat(), [common, second].concat()]
        }
    };
    let row_sets = chunks(&rows, column_sets.len());

    Ok(column_sets
        .into_iter()
        .zip(row_sets)
        .enumerate()
        .map(|(k, (mut cs, mut rs))| {
            cs.sort_unstable();
            rs.sort_unstable();
            dataset.subset(format!("{}_set{}", dataset.name, k + 1), &cs, &rs)
        })
        .collect())
}

/// Per-set column count `ceil((1 + r) C / 2)` and shared count `round(r C)`.
pub(crate) fn transfer_sizes(c: usize, r: f64) -> (usize, usize) {
    let size = ((1.0 + r) * c as f64 / 2.0).ceil() as usize;
    let shared = ((r * c as f64).round() as usize).min(c);
    (size.min(c).max(shared), shared)
}

/// Contiguous near-equal parts with boundaries `floor(k n / parts)`.
fn chunks(items: &[usize], parts: usize) -> Vec<Vec<usize>> {
    let n = items.len();
    (0..parts)
        .map(|k| items[k * n / parts..(k + 1) * n / parts].to_vec())
        .collect()
}
