use std::collections::HashMap;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use varitab::autograd::{Graph, ParamStore};
use varitab::data::{
    fit_normalization, load_labeled_csv, split_columns, write_csv, Cell, ColumnSchema, CsvOptions, SplitMode,
    SplitSpec, TableDataset,
};
use varitab::metrics::evaluate_auroc;
use varitab::tokenizer::{tokenize, Vocabulary};
use varitab::vpcl::{
    partition_columns, sample_partition_pair_with, self_vpcl_loss, sup_vpcl_loss, ContrastBatch, Convention,
    PartitionSpec,
};
use varitab::Tensor;

fn batch(values: &[f64], rows: usize, views: usize, labels: Option<Vec<usize>>) -> ContrastBatch {
    let d = values.len() / rows;
    ContrastBatch {
        projections: Tensor::matrix(rows, d, values[..rows * d].to_vec()).unwrap(),
        labels,
        views,
    }
}

/// Signed permutation: an orthogonal map that is exact in floating point
/// up to reordering of the dot-product sums.
fn rotate(values: &[f64], d: usize, perm: &[usize], signs: &[bool]) -> Vec<f64> {
    values
        .chunks(d)
        .flat_map(|row| (0..d).map(|j| if signs[j] { -row[perm[j]] } else { row[perm[j]] }))
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn contrastive_losses_ignore_row_scale_and_rotation(
        values in prop::collection::vec(-1.0f64..1.0, 36),
        scales in prop::collection::vec(0.1f64..10.0, 6),
        perm in Just((0..6).collect::<Vec<usize>>()).prop_shuffle(),
        signs in prop::collection::vec(any::<bool>(), 6),
    ) {
        prop_assume!(values.chunks(6).all(|r| r.iter().map(|x| x * x).sum::<f64>() > 1e-3));
        let labels = Some(vec![0, 1, 1]);
        let base = batch(&values, 6, 2, labels.clone());
        let scaled: Vec<f64> = values.chunks(6).zip(&scales).flat_map(|(r, s)| r.iter().map(move |x| x * s)).collect();
        let rotated = rotate(&values, 6, &perm, &signs);
        for conv in [Convention::AsWritten, Convention::ExcludeSelf] {
            let want_self = self_vpcl_loss(&base, conv).unwrap();
            let want_sup = sup_vpcl_loss(&base, conv).unwrap();
            for other in [&scaled, &rotated] {
                let b = batch(other, 6, 2, labels.clone());
                prop_assert!((self_vpcl_loss(&b, conv).unwrap() - want_self).abs() < 1e-9);
                prop_assert!((sup_vpcl_loss(&b, conv).unwrap() - want_sup).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized(values in prop::collection::vec(-50.0f64..50.0, 4 * 8)) {
        prop_assume!(values.chunks(8).all(|r| {
            let m = r.iter().sum::<f64>() / 8.0;
            r.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 8.0 > 1e-2
        }));
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::matrix(4, 8, values).unwrap());
        let gain = g.constant(Tensor::full(&[8], 1.0));
        let bias = g.constant(Tensor::zeros(&[8]));
        let y = g.layer_norm(x, gain, bias, 1e-5);
        let out = g.value(y);
        for r in 0..4 {
            let row = out.row(r);
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 8.0;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn vocabulary_growth_keeps_existing_ids(
        first in prop::collection::vec("[a-z]{1,6}( [a-z]{1,6}){0,2}", 1..10),
        second in prop::collection::vec("[a-z]{1,6}( [a-z]{1,6}){0,2}", 1..10),
    ) {
        let mut vocab = Vocabulary::new();
        let before: Vec<Vec<usize>> = first.iter().map(|t| vocab.encode_text(t, true).ids).collect();
        for t in &second {
            vocab.encode_text(t, true);
        }
        for (t, ids) in first.iter().zip(&before) {
            prop_assert_eq!(&vocab.encode_text(t, false).ids, ids);
        }
        let restored = Vocabulary::from_text(&vocab.to_text()).unwrap();
        prop_assert_eq!(restored.tokens(), vocab.tokens());
    }

    #[test]
    fn auroc_is_rank_based(
        scores in prop::collection::vec(-5.0f64..5.0, 4..40),
        seed in any::<u64>(),
    ) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut labels: Vec<bool> = scores.iter().map(|_| rng.gen_bool(0.5)).collect();
        labels[0] = true;
        labels[1] = false;
        let a = evaluate_auroc(&scores, &labels).unwrap();
        let squashed: Vec<f64> = scores.iter().map(|s| s.exp() / (1.0 + s.exp())).collect();
        prop_assert!((evaluate_auroc(&squashed, &labels).unwrap() - a).abs() < 1e-12);
        let flipped: Vec<bool> = labels.iter().map(|l| !l).collect();
        prop_assert!((evaluate_auroc(&scores, &flipped).unwrap() - (1.0 - a)).abs() < 1e-12);
    }
}

#[test]
fn partition_pairs_are_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for k in [3usize, 4, 5] {
        let mut counts: HashMap<(usize, usize), usize> = HashMap::new();
        let draws = 10_000;
        for _ in 0..draws {
            *counts.entry(sample_partition_pair_with(k, &mut rng).unwrap()).or_default() += 1;
        }
        let pairs = k * (k - 1) / 2;
        assert_eq!(counts.len(), pairs);
        let p = 1.0 / pairs as f64;
        let expected = draws as f64 * p;
        // +-5% for three partitions; a 4-sigma binomial band otherwise, since
        // 5% of 1000 is under two standard deviations.
        let band = if k == 3 { 0.05 * expected } else { 4.0 * (draws as f64 * p * (1.0 - p)).sqrt() };
        for (pair, n) in counts {
            assert!((n as f64 - expected).abs() <= band, "K={k} pair {pair:?}: {n} vs {expected}");
        }
    }
}

#[test]
fn partitions_cover_every_column() {
    for columns in 2..12 {
        for count in 1..=columns {
            for overlap in [0.0, 0.3, 0.5] {
                let spec = PartitionSpec { count, overlap_ratio: overlap, seed: 0 };
                let parts = partition_columns(columns, &spec).unwrap();
                assert_eq!(parts.len(), count);
                let mut seen: Vec<usize> = parts.iter().flatten().copied().collect();
                seen.sort_unstable();
                seen.dedup();
                assert_eq!(seen, (0..columns).collect::<Vec<_>>());
                assert!(parts.iter().all(|p| !p.is_empty()));
                if overlap == 0.0 {
                    assert_eq!(parts.iter().map(Vec::len).sum::<usize>(), columns);
                }
            }
        }
    }
}

fn table(rows: usize) -> TableDataset {
    let schema = vec![
        ColumnSchema::numerical("age").unwrap(),
        ColumnSchema::categorical("chest pain").unwrap(),
        ColumnSchema::binary("smoker").unwrap(),
        ColumnSchema::numerical("resting blood pressure").unwrap(),
        ColumnSchema::categorical("gender").unwrap(),
        ColumnSchema::binary("fasting sugar").unwrap(),
    ];
    let cells = (0..rows)
        .map(|r| {
            vec![
                if r % 7 == 0 { Cell::Missing } else { Cell::Number(30.0 + r as f64 * 0.5) },
                Cell::Text(["typical", "atypical, \"rare\"", "none"][r % 3].into()),
                Cell::Binary(r % 2 == 0),
                Cell::Number(-(r as f64) / 3.0),
                Cell::Text(if r % 5 == 0 { "female".into() } else { "male".into() }),
                if r % 4 == 0 { Cell::Missing } else { Cell::Binary(r % 3 == 0) },
            ]
        })
        .collect();
    TableDataset::new("heart", schema, cells, Some((0..rows).map(|r| r % 2).collect())).unwrap()
}

#[test]
fn splits_partition_rows_and_are_deterministic() {
    // Every cell identifies its row, so subsets can be traced back.
    let schema: Vec<ColumnSchema> = (0..6)
        .map(|c| if c % 2 == 0 { ColumnSchema::numerical(format!("n{c}")) } else { ColumnSchema::categorical(format!("c{c}")) })
        .collect::<Result<_, _>>()
        .unwrap();
    let rows = (0..31)
        .map(|r| (0..6).map(|c| if c % 2 == 0 { Cell::Number((r * 6 + c) as f64) } else { Cell::Text(format!("v{r}")) }).collect())
        .collect();
    let t = TableDataset::new("ids", schema, rows, None).unwrap();
    for mode in [SplitMode::Incremental, SplitMode::Transfer, SplitMode::ZeroShot] {
        for seed in 0..5 {
            let spec = SplitSpec::new(mode, seed);
            let parts = split_columns(&t, &spec).unwrap();
            assert_eq!(parts, split_columns(&t, &spec).unwrap());
            let total: usize = parts.iter().map(TableDataset::len).sum();
            assert_eq!(total, t.len());
            let mut used = vec![false; t.len()];
            for p in &parts {
                let cols: Vec<usize> = p.column_names().iter().map(|n| t.column_index(n).unwrap()).collect();
                for row in &p.rows {
                    let hit = (0..t.len())
                        .find(|&r| !used[r] && cols.iter().zip(row).all(|(&c, cell)| t.rows[r][c] == *cell))
                        .expect("row comes from the source");
                    used[hit] = true;
                }
            }
            assert!(used.iter().all(|&u| u));
        }
    }
}

#[test]
fn normalized_cells_lie_in_unit_interval() {
    let t = fit_normalization(&table(50)).unwrap();
    for row in &t.rows {
        for cell in row {
            if let Cell::Number(x) = cell {
                assert!((0.0..=1.0).contains(x));
            }
        }
    }
}

#[test]
fn csv_round_trip() {
    let t = table(20);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("heart.csv");
    let mut buf = Vec::new();
    write_csv(&t, &mut buf).unwrap();
    std::fs::write(&path, &buf).unwrap();
    let back = load_labeled_csv(&path, &t.schema, &CsvOptions::default()).unwrap();
    assert_eq!(back, t);
}

#[test]
fn tokenizer_lowercases_and_splits_on_punctuation() {
    assert_eq!(tokenize("Resting Blood-Pressure (mm/Hg)"), ["resting", "blood", "pressure", "mm", "hg"]);
    assert!(tokenize(" ,;- ").is_empty());
}
