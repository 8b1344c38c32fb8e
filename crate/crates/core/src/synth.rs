//! Synthetic tables with a known logistic ground truth.
//!
//! Each generated table draws its label from `sigmoid(eta)` where `eta` is a
//! weighted sum of factors read from designated signal columns. Signal
//! columns are named `"<concept> <suffix>"`: a concept keeps its weight and
//! column kind across every table, shared columns keep the exact same name,
//! and unshared signal columns swap the suffix for a table-specific word.
//! That gives related tables a common vocabulary at the word level even
//! when their column names differ.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::sigmoid;
use crate::data::{Cell, ColumnKind, ColumnSchema, TableDataset};
use crate::error::{Error, Result};
use crate::tensor::mix_seed;

const CONCEPTS: &[&str] = &[
    "glucose", "pressure", "cholesterol", "weight", "heart", "smoking", "kidney", "sodium",
    "insulin", "platelet", "albumin", "oxygen", "fever", "calcium", "lipase", "ferritin",
    "protein", "urea", "cortisol", "thyroid", "lactate", "bilirubin", "potassium", "troponin",
];

const NOISE: &[&str] = &[
    "ward", "shift", "visit", "clinic", "region", "batch", "device", "staff", "season", "floor",
    "queue", "record", "cohort", "site", "route", "bed", "desk", "badge", "locker", "parcel",
    "sticker", "folder", "ticket", "channel",
];

const SHARED_SUFFIX: &str = "level";
const TABLE_SUFFIXES: &[&str] = &["alpha", "beta", "gamma", "delta", "epsilon"];
const LEVELS: [(&str, f64); 3] = [("low", -1.0), ("medium", 0.0), ("high", 1.0)];

/// Generator parameters. `rows` has one entry per table (two for a pair,
/// three for a triple).
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub seed: u64,
    pub rows: Vec<usize>,
    pub signal_columns: usize,
    pub noise_columns: usize,
    /// Columns with identical names and semantics in every table. Signal
    /// columns are shared first, then noise columns.
    pub shared_columns: usize,
    /// Scales the logit, in `[0, 1]`; 0 gives labels independent of the data.
    pub signal_strength: f64,
    /// Logit scale at full strength.
    pub gain: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            seed: 0,
            rows: vec![1000, 1000],
            signal_columns: 6,
            noise_columns: 4,
            shared_columns: 5,
            signal_strength: 1.0,
            gain: 10.0,
        }
    }
}

impl SynthSpec {
    pub fn columns(&self) -> usize {
        self.signal_columns + self.noise_columns
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=TABLE_SUFFIXES.len()).contains(&self.rows.len()) {
            return Err(Error::Config(format!(
                "between 2 and {} tables can be generated, got {}",
                TABLE_SUFFIXES.len(),
                self.rows.len()
            )));
        }
        if self.signal_columns == 0 {
            return Err(Error::Config("at least one signal column is required".into()));
        }
        if self.signal_columns > CONCEPTS.len() || self.noise_columns > NOISE.len() {
            return Err(Error::Config(format!(
                "at most {} signal and {} noise columns are supported",
                CONCEPTS.len(),
                NOISE.len()
            )));
        }
        if self.shared_columns > self.columns() {
            return Err(Error::Config(format!(
                "{} shared columns exceed the {} columns per table",
                self.shared_columns,
                self.columns()
            )));
        }
        if !(0.0..=1.0).contains(&self.signal_strength) {
            return Err(Error::Config(format!(
                "signal strength {} outside [0, 1]",
                self.signal_strength
            )));
        }
        if !self.gain.is_finite() || self.gain < 0.0 {
            return Err(Error::Config(format!("gain {} must be finite and >= 0", self.gain)));
        }
        Ok(())
    }
}

/// Generated tables plus the ground-truth `P(y = 1 | x)` of every row.
#[derive(Debug, Clone)]
pub struct SynthTables {
    pub tables: Vec<TableDataset>,
    pub bayes: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
struct Concept {
    word: &'static str,
    kind: ColumnKind,
    weight: f64,
    /// Raw numerical range, so that normalization is not a no-op.
    range: (f64, f64),
}

fn kind_for(i: usize) -> ColumnKind {
    match i % 3 {
        0 => ColumnKind::Numerical,
        1 => ColumnKind::Categorical,
        _ => ColumnKind::Binary,
    }
}

fn concepts(spec: &SynthSpec, pool: &'static [&'static str], count: usize, stream: &str) -> Vec<Concept> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, stream));
    (0..count)
        .map(|i| {
            let magnitude = rng.gen_range(0.5..1.5);
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let lo = rng.gen_range(-50.0..50.0);
            let width = rng.gen_range(1.0..100.0);
            Concept {
                word: pool[i],
                kind: kind_for(i),
                weight: sign * magnitude,
                range: (lo, lo + width),
            }
        })
        .collect()
}

/// Draws a cell and its factor in `[-1, 1]`.
fn draw(concept: &Concept, rng: &mut ChaCha8Rng) -> (Cell, f64) {
    match concept.kind {
        ColumnKind::Numerical => {
            let u: f64 = rng.gen();
            let (lo, hi) = concept.range;
            (Cell::Number(lo + u * (hi - lo)), 2.0 * u - 1.0)
        }
        ColumnKind::Categorical => {
            let (word, f) = LEVELS[rng.gen_range(0..LEVELS.len())];
            (Cell::Text(word.to_string()), f)
        }
        ColumnKind::Binary => {
            let b = rng.gen_bool(0.5);
            (Cell::Binary(b), if b { 1.0 } else { -1.0 })
        }
    }
}

/// Generates a pair or triple of related tables.
pub fn synth_tables(spec: &SynthSpec) -> Result<SynthTables> {
    spec.validate()?;
    let signal = concepts(spec, CONCEPTS, spec.signal_columns, "synth.signal");
    let noise = concepts(spec, NOISE, spec.noise_columns, "synth.noise");
    let shared_signal = spec.shared_columns.min(spec.signal_columns);
    let shared_noise = spec.shared_columns - shared_signal;
    let scale = spec.signal_strength * spec.gain / (spec.signal_columns as f64).sqrt();

    let mut tables = Vec::with_capacity(spec.rows.len());
    let mut bayes = Vec::with_capacity(spec.rows.len());
    for (t, &rows) in spec.rows.iter().enumerate() {
        let suffix = TABLE_SUFFIXES[t];
        let mut columns: Vec<(String, &Concept, bool)> = Vec::new();
        for (i, c) in signal.iter().enumerate() {
            let tail = if i < shared_signal { SHARED_SUFFIX } else { suffix };
            columns.push((format!("{} {tail}", c.word), c, true));
        }
        for (i, c) in noise.iter().enumerate() {
            let tail = if i < shared_noise { SHARED_SUFFIX } else { suffix };
            columns.push((format!("{} {tail}", c.word), c, false));
        }
        let schema = columns
            .iter()
            .map(|(name, c, _)| ColumnSchema::new(name.clone(), c.kind))
            .collect::<Result<Vec<_>>>()?;

        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, &format!("synth.rows.{t}")));
        let mut cells = Vec::with_capacity(rows);
        let mut labels = Vec::with_capacity(rows);
        let mut scores = Vec::with_capacity(rows);
        for _ in 0..rows {
            let mut eta = 0.0;
            let mut row = Vec::with_capacity(columns.len());
            for (_, c, is_signal) in &columns {
                let (cell, f) = draw(c, &mut rng);
                if *is_signal {
                    eta += c.weight * f;
                }
                row.push(cell);
            }
            let p = sigmoid(scale * eta);
            labels.push(usize::from(rng.gen::<f64>() < p));
            scores.push(p);
            cells.push(row);
        }
        // Class ids must be contiguous; a degenerate draw (tiny tables) gets
        // one flipped label rather than an invalid dataset.
        if rows >= 2 && labels.iter().all(|&l| l == labels[0]) {
            labels[0] = 1 - labels[0];
        }
        tables.push(TableDataset::new(format!("synth_table{}", t + 1), schema, cells, Some(labels))?);
        bayes.push(scores);
    }
    Ok(SynthTables { tables, bayes })
}
