//! Row featurization and the token-level embedding matrix.
//!
//! A row becomes a variable-length token sequence: categorical features
//! contribute `name ++ value` words, binary features contribute their name
//! only when set, numerical features contribute their name tokens scaled by
//! the normalized value. Missing cells contribute nothing.

use crate::autograd::{Graph, Var};
use crate::data::{Cell, ColumnKind, ColumnSchema, TableDataset};
use crate::error::{Error, Result};
use crate::model::{Model, NumericNorm, Pathway};
use crate::tensor::{Tensor, LAYER_NORM_EPS};
use crate::tokenizer::{tokenize, Vocabulary, OVERFLOW_BUCKETS};

/// Additive attention bias for padded keys.
pub const MASK_NEG: f64 = -1e9;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeaturizedRow {
    pub cat_ids: Vec<usize>,
    pub bin_ids: Vec<usize>,
    pub num_col_ids: Vec<Vec<usize>>,
    pub num_values: Vec<f64>,
}

impl FeaturizedRow {
    /// Sequence length after embedding, including `[cls]`.
    pub fn token_count(&self) -> usize {
        self.cat_ids.len()
            + self.bin_ids.len()
            + self.num_col_ids.iter().map(Vec::len).sum::<usize>()
            + 1
    }

    pub fn is_empty(&self) -> bool {
        self.token_count() == 1
    }

    pub fn max_id(&self) -> Option<usize> {
        self.cat_ids
            .iter()
            .chain(&self.bin_ids)
            .chain(self.num_col_ids.iter().flatten())
            .copied()
            .max()
    }
}

fn encode(vocab: &mut Vocabulary, text: &str, allow_grow: bool) -> Vec<usize> {
    vocab.encode(&tokenize(text), allow_grow)
}

/// Featurizes a single row. `row_index` is only used in the empty-row error.
pub fn featurize_row(
    row: &[Cell],
    schema: &[ColumnSchema],
    vocab: &mut Vocabulary,
    allow_grow: bool,
    row_index: usize,
) -> Result<FeaturizedRow> {
    let mut fr = FeaturizedRow::default();
    for (cell, col) in row.iter().zip(schema) {
        match (col.kind, cell) {
            (_, Cell::Missing) => {}
            (ColumnKind::Categorical, Cell::Text(value)) => {
                fr.cat_ids.extend(encode(vocab, &col.name, allow_grow));
                fr.cat_ids.extend(encode(vocab, value, allow_grow));
            }
            (ColumnKind::Binary, Cell::Binary(true)) => {
                fr.bin_ids.extend(encode(vocab, &col.name, allow_grow));
            }
            (ColumnKind::Binary, Cell::Binary(false)) => {}
            (ColumnKind::Numerical, Cell::Number(x)) => {
                let ids = encode(vocab, &col.name, allow_grow);
                if !ids.is_empty() {
                    fr.num_col_ids.push(ids);
                    fr.num_values.push(*x);
                }
            }
            (kind, cell) => {
                return Err(Error::Dataset(format!(
                    "row {row_index}, column `{}`: {cell:?} is not a {kind} value",
                    col.name
                )))
            }
        }
    }
    if fr.is_empty() {
        return Err(Error::EmptyRow { row: row_index });
    }
    Ok(fr)
}

/// Featurizes every row of a table, optionally restricted to a column subset.
pub fn featurize_table(
    dataset: &TableDataset,
    columns: Option<&[usize]>,
    vocab: &mut Vocabulary,
    allow_grow: bool,
) -> Result<Vec<FeaturizedRow>> {
    let all: Vec<usize> = (0..dataset.schema.len()).collect();
    let columns = columns.unwrap_or(&all);
    let schema: Vec<ColumnSchema> = columns.iter().map(|&c| dataset.schema[c].clone()).collect();
    dataset
        .rows
        .iter()
        .enumerate()
        .map(|(r, row)| {
            let cells: Vec<Cell> = columns.iter().map(|&c| row[c].clone()).collect();
            featurize_row(&cells, &schema, vocab, allow_grow, r)
        })
        .collect()
}

/// Embedding rows for token ids, drawing overflow ids from the hashed
/// bucket table.
pub fn lookup(g: &mut Graph, model: &Model, ids: &[usize]) -> Result<Var> {
    let known = model.token_rows();
    let limit = known + OVERFLOW_BUCKETS;
    if let Some(&bad) = ids.iter().find(|&&id| id >= limit) {
        return Err(Error::TokenOutOfRange {
            id: bad,
            rows: limit,
        });
    }
    let tokens = g.param(model.embedding.tokens);
    if ids.iter().all(|&id| id < known) {
        return Ok(g.select_rows(tokens, ids));
    }
    let overflow = g.param(model.embedding.overflow);
    if ids.iter().all(|&id| id >= known) {
        let rows: Vec<usize> = ids.iter().map(|id| id - known).collect();
        return Ok(g.select_rows(overflow, &rows));
    }
    let (inside, outside): (Vec<usize>, Vec<usize>) = ids.iter().partition(|&&id| id < known);
    let a = g.select_rows(tokens, &inside);
    let rows: Vec<usize> = outside.iter().map(|id| id - known).collect();
    let b = g.select_rows(overflow, &rows);
    let both = g.concat_rows(&[a, b]);
    let (mut next_in, mut next_out) = (0, inside.len());
    let order: Vec<usize> = ids
        .iter()
        .map(|&id| {
            let slot = if id < known { &mut next_in } else { &mut next_out };
            *slot += 1;
            *slot - 1
        })
        .collect();
    Ok(g.select_rows(both, &order))
}

fn normalize(g: &mut Graph, model: &Model, x: Var, pathway: Pathway) -> Var {
    let p = model.embedding.norm(pathway);
    let (gain, bias) = (g.param(p.gain), g.param(p.bias));
    g.layer_norm(x, gain, bias, LAYER_NORM_EPS)
}

fn align(g: &mut Graph, model: &Model, x: Var) -> Var {
    let w = g.param(model.embedding.align_weight);
    let b = g.param(model.embedding.align_bias);
    g.linear(x, w, Some(b))
}

/// `x * E[column]` for every numerical cell, stacked, before any layer norm.
pub fn scaled_numerical_tokens(g: &mut Graph, model: &Model, fr: &FeaturizedRow) -> Result<Option<Var>> {
    if fr.num_col_ids.is_empty() {
        return Ok(None);
    }
    let mut parts = Vec::with_capacity(fr.num_col_ids.len());
    for (ids, &x) in fr.num_col_ids.iter().zip(&fr.num_values) {
        let col = lookup(g, model, ids)?;
        parts.push(g.scale(col, x));
    }
    Ok(Some(if parts.len() == 1 {
        parts[0]
    } else {
        g.concat_rows(&parts)
    }))
}

/// The numerical block as it enters the alignment layer.
pub fn numerical_block(g: &mut Graph, model: &Model, fr: &FeaturizedRow) -> Result<Option<Var>> {
    match model.config.numeric_norm {
        NumericNorm::ScaleThenNorm => Ok(scaled_numerical_tokens(g, model, fr)?
            .map(|block| normalize(g, model, block, Pathway::Numerical))),
        NumericNorm::NormThenScale => {
            if fr.num_col_ids.is_empty() {
                return Ok(None);
            }
            let mut parts = Vec::with_capacity(fr.num_col_ids.len());
            for (ids, &x) in fr.num_col_ids.iter().zip(&fr.num_values) {
                let col = lookup(g, model, ids)?;
                let normed = normalize(g, model, col, Pathway::Numerical);
                parts.push(g.scale(normed, x));
            }
            Ok(Some(if parts.len() == 1 {
                parts[0]
            } else {
                g.concat_rows(&parts)
            }))
        }
    }
}

/// Embeds one row as an `[n x d]` matrix: aligned categorical, numerical and
/// binary blocks followed by the raw `[cls]` embedding.
pub fn embed_row(g: &mut Graph, model: &Model, fr: &FeaturizedRow) -> Result<Var> {
    let mut blocks = Vec::with_capacity(4);
    if !fr.cat_ids.is_empty() {
        let e = lookup(g, model, &fr.cat_ids)?;
        let e = normalize(g, model, e, Pathway::Categorical);
        blocks.push(align(g, model, e));
    }
    if let Some(e) = numerical_block(g, model, fr)? {
        blocks.push(align(g, model, e));
    }
    if !fr.bin_ids.is_empty() {
        let e = lookup(g, model, &fr.bin_ids)?;
        let e = normalize(g, model, e, Pathway::Binary);
        blocks.push(align(g, model, e));
    }
    blocks.push(g.param(model.embedding.cls));
    Ok(g.concat_rows(&blocks))
}

/// A right-padded batch laid out as `[(B * n_max) x d]`.
#[derive(Debug, Clone)]
pub struct EmbeddedBatch {
    pub tokens: Var,
    /// `[B x n_max]`, 1 for real tokens and 0 for padding.
    pub mask: Tensor,
    pub lengths: Vec<usize>,
    pub max_len: usize,
}

impl EmbeddedBatch {
    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    /// Flat row of each sample's `[cls]` token (last real position).
    pub fn cls_rows(&self) -> Vec<usize> {
        self.lengths
            .iter()
            .enumerate()
            .map(|(b, &n)| b * self.max_len + n - 1)
            .collect()
    }
}

pub fn embed_batch(g: &mut Graph, model: &Model, rows: &[&FeaturizedRow]) -> Result<EmbeddedBatch> {
    if rows.is_empty() {
        return Err(Error::Dataset("cannot embed an empty batch".into()));
    }
    let lengths: Vec<usize> = rows.iter().map(|r| r.token_count()).collect();
    let max_len = *lengths.iter().max().expect("non-empty");
    let d = model.dim();
    let mut parts = Vec::with_capacity(2 * rows.len());
    let mut mask = Tensor::zeros(&[rows.len(), max_len]);
    for (b, fr) in rows.iter().enumerate() {
        parts.push(embed_row(g, model, fr)?);
        let n = lengths[b];
        mask.row_mut(b)[..n].iter_mut().for_each(|m| *m = 1.0);
        if n < max_len {
            parts.push(g.constant(Tensor::zeros(&[max_len - n, d])));
        }
    }
    let tokens = if parts.len() == 1 {
        parts[0]
    } else {
        g.concat_rows(&parts)
    };
    Ok(EmbeddedBatch {
        tokens,
        mask,
        lengths,
        max_len,
    })
}

/// Detached padded batch: `[B x n_max x d]` values and the `[B x n_max]` mask.
pub fn pad_batch(model: &Model, rows: &[FeaturizedRow]) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new(&model.store);
    let refs: Vec<&FeaturizedRow> = rows.iter().collect();
    let batch = embed_batch(&mut g, model, &refs)?;
    let values = g
        .value(batch.tokens)
        .clone()
        .reshape(&[rows.len(), batch.max_len, model.dim()])?;
    Ok((values, batch.mask))
}
