use std::fs::File;
use std::io::Write;
use std::path::Path;

use super::{Cell, ColumnKind, ColumnSchema, TableDataset};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsvOptions {
    pub has_header: bool,
    /// Column holding integer class ids. Without a header it is the column
    /// right after the schema columns.
    pub label_column: Option<String>,
    /// Fail when the label column is absent instead of loading unlabeled.
    pub require_labels: bool,
}

impl Default for CsvOptions {
    fn default() -> Self {
        CsvOptions {
            has_header: true,
            label_column: Some("label".into()),
            require_labels: false,
        }
    }
}

/// Loads an unlabeled table.
pub fn load_csv(path: impl AsRef<Path>, schema: &[ColumnSchema], has_header: bool) -> Result<TableDataset> {
    load_labeled_csv(
        path,
        schema,
        &CsvOptions {
            has_header,
            label_column: None,
            require_labels: false,
        },
    )
}

pub fn load_labeled_csv(
    path: impl AsRef<Path>,
    schema: &[ColumnSchema],
    options: &CsvOptions,
) -> Result<TableDataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(options.has_header)
        .flexible(false)
        .from_reader(file);

    let (positions, label_pos) = if options.has_header {
        let header: Vec<String> = reader
            .headers()?
            .iter()
            .map(|h| h.trim().to_string())
            .collect();
        let positions = schema
            .iter()
            .map(|col| {
                header
                    .iter()
                    .position(|h| *h == col.name)
                    .ok_or_else(|| Error::MissingColumn {
                        column: col.name.clone(),
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        let label_pos = options
            .label_column
            .as_ref()
            .and_then(|l| header.iter().position(|h| h == l));
        (positions, label_pos)
    } else {
        let label_pos = options.label_column.as_ref().map(|_| schema.len());
        ((0..schema.len()).collect(), label_pos)
    };
    if options.require_labels && label_pos.is_none() {
        return Err(Error::MissingColumn {
            column: options.label_column.clone().unwrap_or_default(),
        });
    }

    let mut rows = Vec::new();
    let mut labels = label_pos.map(|_| Vec::new());
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let row_no = i + 1;
        let row = schema
            .iter()
            .zip(&positions)
            .map(|(col, &p)| parse_cell(record.get(p).unwrap_or(""), col, row_no))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
        if let (Some(p), Some(labels)) = (label_pos, labels.as_mut()) {
            let raw = record.get(p).unwrap_or("").trim();
            let label = raw.parse::<usize>().map_err(|_| Error::Parse {
                row: row_no,
                column: options.label_column.clone().unwrap_or_default(),
                message: format!("label `{raw}` is not a non-negative integer class id"),
            })?;
            labels.push(label);
        }
    }

    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "table".into());
    TableDataset::new(name, schema.to_vec(), rows, labels)
}

fn parse_cell(raw: &str, col: &ColumnSchema, row: usize) -> Result<Cell> {
    let raw = raw.trim();
    if raw.is_empty() {
        return Ok(Cell::Missing);
    }
    Ok(match col.kind {
        ColumnKind::Categorical => Cell::Text(raw.to_string()),
        ColumnKind::Numerical => match raw.parse::<f64>() {
            Ok(x) if x.is_finite() => Cell::Number(x),
            _ => Cell::Missing,
        },
        ColumnKind::Binary => match raw.to_ascii_lowercase().as_str() {
            "1" | "true" | "yes" => Cell::Binary(true),
            "0" | "false" | "no" => Cell::Binary(false),
            _ => {
                return Err(Error::Parse {
                    row,
                    column: col.name.clone(),
                    message: format!("`{raw}` is not a binary value"),
                })
            }
        },
    })
}

/// Writes the table with a header; labels, when present, go to a trailing
/// `label` column.
pub fn write_csv(dataset: &TableDataset, out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<&str> = dataset.column_names();
    if dataset.labels.is_some() {
        header.push("label");
    }
    w.write_record(&header)?;
    for (r, row) in dataset.rows.iter().enumerate() {
        let mut record: Vec<String> = row
            .iter()
            .map(|cell| match cell {
                Cell::Missing => String::new(),
                Cell::Text(s) => s.clone(),
                Cell::Binary(b) => if *b { "1" } else { "0" }.to_string(),
                Cell::Number(x) => format!("{x}"),
            })
            .collect();
        if let Some(labels) = &dataset.labels {
            record.push(labels[r].to_string());
        }
        w.write_record(&record)?;
    }
    w.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn loads_categorical_cell() {
        let f = write_tmp("gender\nmale\n");
        let schema = vec![ColumnSchema::categorical("gender").unwrap()];
        let ds = load_csv(f.path(), &schema, true).unwrap();
        assert_eq!(ds.rows, vec![vec![Cell::Text("male".into())]]);
    }

    #[test]
    fn empty_numerical_is_missing() {
        let f = write_tmp("weight,age\n,3\n");
        let schema = vec![ColumnSchema::numerical("weight").unwrap()];
        let ds = load_csv(f.path(), &schema, true).unwrap();
        assert_eq!(ds.rows, vec![vec![Cell::Missing]]);
    }

    #[test]
    fn bad_binary_names_row_and_column() {
        let f = write_tmp("smoker\nmaybe\n");
        let schema = vec![ColumnSchema::binary("smoker").unwrap()];
        let err = load_csv(f.path(), &schema, true).unwrap_err();
        match err {
            Error::Parse { row, column, .. } => {
                assert_eq!(row, 1);
                assert_eq!(column, "smoker");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn binary_spellings() {
        let f = write_tmp("b\nYES\nfalse\nTrue\n0\n");
        let schema = vec![ColumnSchema::binary("b").unwrap()];
        let ds = load_csv(f.path(), &schema, true).unwrap();
        let vals: Vec<_> = ds.rows.iter().map(|r| r[0].clone()).collect();
        assert_eq!(
            vals,
            [true, false, true, false].map(Cell::Binary).to_vec()
        );
    }

    #[test]
    fn missing_column_and_missing_file() {
        let f = write_tmp("a\n1\n");
        let schema = vec![ColumnSchema::numerical("b").unwrap()];
        assert!(matches!(
            load_csv(f.path(), &schema, true),
            Err(Error::MissingColumn { .. })
        ));
        assert!(matches!(
            load_csv("/nonexistent/x.csv", &schema, true),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn headerless_positional_with_labels() {
        let f = write_tmp("1.5,red,1\n2.5,blue,0\n");
        let schema = vec![
            ColumnSchema::numerical("x").unwrap(),
            ColumnSchema::categorical("c").unwrap(),
        ];
        let opts = CsvOptions {
            has_header: false,
            ..CsvOptions::default()
        };
        let ds = load_labeled_csv(f.path(), &schema, &opts).unwrap();
        assert_eq!(ds.labels, Some(vec![1, 0]));
        assert_eq!(ds.rows[1][1], Cell::Text("blue".into()));
    }

    #[test]
    fn require_labels() {
        let f = write_tmp("x\n1\n");
        let schema = vec![ColumnSchema::numerical("x").unwrap()];
        let opts = CsvOptions {
            require_labels: true,
            ..CsvOptions::default()
        };
        assert!(load_labeled_csv(f.path(), &schema, &opts).is_err());
        let ok = load_labeled_csv(f.path(), &schema, &CsvOptions::default()).unwrap();
        assert_eq!(ok.labels, None);
    }
}
