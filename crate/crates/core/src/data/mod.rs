//! Column schemas, table storage and preprocessing.

mod csv_io;
mod manifest;
mod split;

pub use csv_io::{load_csv, load_labeled_csv, write_csv, CsvOptions};
pub use manifest::{parse_manifest, read_manifest, write_manifest};
pub use split::{split_columns, SplitMode, SplitSpec};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ColumnKind {
    Categorical,
    Binary,
    Numerical,
}

impl ColumnKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ColumnKind::Categorical => "categorical",
            ColumnKind::Binary => "binary",
            ColumnKind::Numerical => "numerical",
        }
    }
}

impl fmt::Display for ColumnKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ColumnKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "categorical" | "cat" | "text" | "textual" => Ok(ColumnKind::Categorical),
            "binary" | "bin" | "bool" => Ok(ColumnKind::Binary),
            "numerical" | "num" | "numeric" => Ok(ColumnKind::Numerical),
            other => Err(Error::Schema(format!("unknown column kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColumnSchema {
    pub name: String,
    pub kind: ColumnKind,
    /// Fitted numerical range; set by [`fit_normalization`].
    pub range: Option<(f64, f64)>,
    /// Raw code to descriptive text, categorical columns only.
    pub codebook: BTreeMap<String, String>,
}

impl ColumnSchema {
    pub fn new(name: impl Into<String>, kind: ColumnKind) -> Result<Self> {
        let name = name.into().trim().to_string();
        if name.is_empty() {
            return Err(Error::Schema("column name is empty".into()));
        }
        Ok(ColumnSchema {
            name,
            kind,
            range: None,
            codebook: BTreeMap::new(),
        })
    }

    pub fn categorical(name: impl Into<String>) -> Result<Self> {
        Self::new(name, ColumnKind::Categorical)
    }

    pub fn binary(name: impl Into<String>) -> Result<Self> {
        Self::new(name, ColumnKind::Binary)
    }

    pub fn numerical(name: impl Into<String>) -> Result<Self> {
        Self::new(name, ColumnKind::Numerical)
    }

    pub fn with_codebook<K, V>(mut self, entries: impl IntoIterator<Item = (K, V)>) -> Result<Self>
    where
        K: Into<String>,
        V: Into<String>,
    {
        for (k, v) in entries {
            let k = k.into();
            if self.codebook.insert(k.clone(), v.into()).is_some() {
                return Err(Error::Schema(format!(
                    "duplicate codebook key `{k}` in column `{}`",
                    self.name
                )));
            }
        }
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.trim().is_empty() {
            return Err(Error::Schema("column name is empty".into()));
        }
        if let Some((lo, hi)) = self.range {
            if lo.partial_cmp(&hi).is_none_or(|o| o.is_gt()) {
                return Err(Error::Schema(format!(
                    "column `{}` has min {lo} > max {hi}",
                    self.name
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Missing,
    Text(String),
    Binary(bool),
    Number(f64),
}

impl Cell {
    pub fn is_missing(&self) -> bool {
        matches!(self, Cell::Missing)
    }

    fn conforms_to(&self, kind: ColumnKind) -> bool {
        matches!(
            (self, kind),
            (Cell::Missing, _)
                | (Cell::Text(_), ColumnKind::Categorical)
                | (Cell::Binary(_), ColumnKind::Binary)
                | (Cell::Number(_), ColumnKind::Numerical)
        )
    }
}

/// A table: ordered schema, rows of cells in schema order, optional labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TableDataset {
    pub name: String,
    pub schema: Vec<ColumnSchema>,
    pub rows: Vec<Vec<Cell>>,
    pub labels: Option<Vec<usize>>,
}

impl TableDataset {
    pub fn new(
        name: impl Into<String>,
        schema: Vec<ColumnSchema>,
        rows: Vec<Vec<Cell>>,
        labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        let ds = TableDataset {
            name: name.into(),
            schema,
            rows,
            labels,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for col in &self.schema {
            col.validate()?;
            if !seen.insert(col.name.as_str()) {
                return Err(Error::Schema(format!("duplicate column `{}`", col.name)));
            }
        }
        for (r, row) in self.rows.iter().enumerate() {
            if row.len() != self.schema.len() {
                return Err(Error::Dataset(format!(
                    "row {r} has {} cells, schema has {} columns",
                    row.len(),
                    self.schema.len()
                )));
            }
            for (cell, col) in row.iter().zip(&self.schema) {
                if !cell.conforms_to(col.kind) {
                    return Err(Error::Dataset(format!(
                        "row {r}, column `{}`: {cell:?} is not a {} value",
                        col.name, col.kind
                    )));
                }
            }
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.rows.len() {
                return Err(Error::Dataset(format!(
                    "{} labels for {} rows",
                    labels.len(),
                    self.rows.len()
                )));
            }
            let classes = labels.iter().max().map_or(0, |m| m + 1);
            let mut present = vec![false; classes];
            labels.iter().for_each(|&l| present[l] = true);
            if present.iter().any(|p| !p) {
                return Err(Error::Dataset(
                    "class ids must be contiguous integers starting at 0".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.labels
            .as_ref()
            .map(|l| l.iter().max().map_or(0, |m| m + 1))
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.schema.iter().position(|c| c.name == name)
    }

    pub fn column_names(&self) -> Vec<&str> {
        self.schema.iter().map(|c| c.name.as_str()).collect()
    }

    pub fn cell(&self, row: usize, column: &str) -> Option<&Cell> {
        self.column_index(column).map(|c| &self.rows[row][c])
    }

    /// Keeps only the named columns (in the given order) and the given rows.
    pub fn subset(&self, name: impl Into<String>, columns: &[usize], rows: &[usize]) -> Self {
        TableDataset {
            name: name.into(),
            schema: columns.iter().map(|&c| self.schema[c].clone()).collect(),
            rows: rows
                .iter()
                .map(|&r| columns.iter().map(|&c| self.rows[r][c].clone()).collect())
                .collect(),
            labels: self
                .labels
                .as_ref()
                .map(|l| rows.iter().map(|&r| l[r]).collect()),
        }
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let all: Vec<usize> = (0..self.schema.len()).collect();
        self.subset(self.name.clone(), &all, rows)
    }
}

/// Fits min/max on every numerical column and rescales cells to `[0, 1]`.
///
/// Constant columns map to 0.
pub fn fit_normalization(dataset: &TableDataset) -> Result<TableDataset> {
    if dataset.is_empty() {
        return Err(Error::Dataset("cannot fit normalization on an empty table".into()));
    }
    let mut schema = dataset.schema.clone();
    for (c, col) in schema.iter_mut().enumerate() {
        if col.kind != ColumnKind::Numerical {
            continue;
        }
        let range = dataset
            .rows
            .iter()
            .filter_map(|row| match row[c] {
                Cell::Number(x) => Some(x),
                _ => None,
            })
            .fold(None, |acc: Option<(f64, f64)>, x| match acc {
                None => Some((x, x)),
                Some((lo, hi)) => Some((lo.min(x), hi.max(x))),
            });
        col.range = range;
    }
    apply_normalization(dataset, &schema)
}

/// Rescales numerical cells using the ranges in `fitted`, clamping to `[0, 1]`.
///
/// Columns are matched by name; numerical columns absent from `fitted` or
/// without a fitted range are left untouched.
pub fn apply_normalization(dataset: &TableDataset, fitted: &[ColumnSchema]) -> Result<TableDataset> {
    let mut out = dataset.clone();
    for (c, col) in out.schema.iter_mut().enumerate() {
        if col.kind != ColumnKind::Numerical {
            continue;
        }
        let Some(range) = fitted.iter().find(|f| f.name == col.name).and_then(|f| f.range) else {
            continue;
        };
        col.range = Some(range);
        for row in &mut out.rows {
            if let Cell::Number(x) = &mut row[c] {
                *x = min_max(*x, range);
            }
        }
    }
    Ok(out)
}

pub(crate) fn min_max(x: f64, (lo, hi): (f64, f64)) -> f64 {
    if hi <= lo {
        return 0.0;
    }
    ((x - lo) / (hi - lo)).clamp(0.0, 1.0)
}

/// Replaces categorical codes with their codebook descriptions.
pub fn apply_codebook(dataset: &TableDataset) -> TableDataset {
    let mut out = dataset.clone();
    for (c, col) in dataset.schema.iter().enumerate() {
        if col.kind != ColumnKind::Categorical || col.codebook.is_empty() {
            continue;
        }
        for row in &mut out.rows {
            if let Cell::Text(s) = &mut row[c] {
                if let Some(desc) = col.codebook.get(s.as_str()) {
                    *s = desc.clone();
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numeric_table(values: &[f64]) -> TableDataset {
        TableDataset::new(
            "t",
            vec![ColumnSchema::numerical("weight").unwrap()],
            values.iter().map(|&v| vec![Cell::Number(v)]).collect(),
            None,
        )
        .unwrap()
    }

    #[test]
    fn min_max_examples() {
        let out = fit_normalization(&numeric_table(&[10.0, 20.0, 30.0])).unwrap();
        let vals: Vec<_> = out.rows.iter().map(|r| r[0].clone()).collect();
        assert_eq!(
            vals,
            vec![Cell::Number(0.0), Cell::Number(0.5), Cell::Number(1.0)]
        );
        assert_eq!(out.schema[0].range, Some((10.0, 30.0)));

        let constant = fit_normalization(&numeric_table(&[5.0, 5.0])).unwrap();
        assert!(constant.rows.iter().all(|r| r[0] == Cell::Number(0.0)));

        let test = apply_normalization(&numeric_table(&[40.0, 0.0]), &out.schema).unwrap();
        assert_eq!(test.rows[0][0], Cell::Number(1.0));
        assert_eq!(test.rows[1][0], Cell::Number(0.0));
    }

    #[test]
    fn normalization_keeps_missing() {
        let mut t = numeric_table(&[1.0, 3.0]);
        t.rows.push(vec![Cell::Missing]);
        let out = fit_normalization(&t).unwrap();
        assert_eq!(out.rows[2][0], Cell::Missing);
        assert!(fit_normalization(&numeric_table(&[])).is_err());
    }

    #[test]
    fn codebook_examples() {
        let gender = ColumnSchema::categorical("gender")
            .unwrap()
            .with_codebook([("1", "female"), ("0", "male")])
            .unwrap();
        let color = ColumnSchema::categorical("color").unwrap();
        let t = TableDataset::new(
            "t",
            vec![gender, color],
            vec![
                vec![Cell::Text("1".into()), Cell::Text("red".into())],
                vec![Cell::Text("unknown-code".into()), Cell::Missing],
            ],
            None,
        )
        .unwrap();
        let out = apply_codebook(&t);
        assert_eq!(out.rows[0][0], Cell::Text("female".into()));
        assert_eq!(out.rows[0][1], Cell::Text("red".into()));
        assert_eq!(out.rows[1][0], Cell::Text("unknown-code".into()));
    }

    #[test]
    fn duplicate_codebook_key_rejected() {
        let r = ColumnSchema::categorical("g")
            .unwrap()
            .with_codebook([("1", "a"), ("1", "b")]);
        assert!(r.is_err());
    }

    #[test]
    fn schema_invariants() {
        assert!(ColumnSchema::numerical("   ").is_err());
        let mut c = ColumnSchema::numerical("x").unwrap();
        c.range = Some((2.0, 1.0));
        assert!(c.validate().is_err());
    }

    #[test]
    fn dataset_invariants() {
        let schema = vec![ColumnSchema::binary("b").unwrap()];
        let bad_cell = TableDataset::new("t", schema.clone(), vec![vec![Cell::Number(1.0)]], None);
        assert!(bad_cell.is_err());
        let short_labels = TableDataset::new(
            "t",
            schema.clone(),
            vec![vec![Cell::Binary(true)], vec![Cell::Binary(false)]],
            Some(vec![0]),
        );
        assert!(short_labels.is_err());
        let gap = TableDataset::new(
            "t",
            schema,
            vec![vec![Cell::Binary(true)], vec![Cell::Binary(false)]],
            Some(vec![0, 2]),
        );
        assert!(gap.is_err());
    }
}
