//! Vertical-partition contrastive learning: column partitions as views of a
//! sample, and the self-supervised and supervised contrastive objectives
//! over cosine similarities of projected `[cls]` embeddings.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartitionSpec {
    /// Number of partitions K.
    pub count: usize,
    /// Fraction of each partition borrowed from the tail of its left
    /// neighbour, in `[0, 1)`.
    pub overlap_ratio: f64,
    pub seed: u64,
}

impl Default for PartitionSpec {
    fn default() -> Self {
        PartitionSpec {
            count: 2,
            overlap_ratio: 0.0,
            seed: 0,
        }
    }
}

/// Splits `columns` schema-ordered columns into `spec.count` contiguous
/// partitions. Partition `k > 0` is extended on the left by
/// `round(overlap_ratio * |base_k|)` columns from the end of `base_{k-1}`.
pub fn partition_columns(columns: usize, spec: &PartitionSpec) -> Result<Vec<Vec<usize>>> {
    let k = spec.count;
    if k < 1 {
        return Err(Error::Partition("partition count must be at least 1".into()));
    }
    if k > columns {
        return Err(Error::Partition(format!(
            "{k} partitions requested for {columns} columns"
        )));
    }
    if !(0.0..1.0).contains(&spec.overlap_ratio) {
        return Err(Error::Partition(format!(
            "overlap ratio {} outside [0, 1)",
            spec.overlap_ratio
        )));
    }
    let bounds: Vec<(usize, usize)> = (0..k)
        .map(|p| (p * columns / k, (p + 1) * columns / k))
        .collect();
    Ok(bounds
        .iter()
        .enumerate()
        .map(|(p, &(start, end))| {
            let borrow = if p == 0 {
                0
            } else {
                let (prev_start, prev_end) = bounds[p - 1];
                let o = (spec.overlap_ratio * (end - start) as f64).round() as usize;
                o.min(prev_end - prev_start)
            };
            (start - borrow..end).collect()
        })
        .collect())
}

/// Uniform unordered pair of distinct partition indices (0-based, ascending).
pub fn sample_partition_pair(count: usize, seed: u64) -> Result<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_partition_pair_with(count, &mut rng)
}

pub fn sample_partition_pair_with(count: usize, rng: &mut impl Rng) -> Result<(usize, usize)> {
    if count < 2 {
        return Err(Error::Partition(format!(
            "need at least 2 partitions to sample a pair, got {count}"
        )));
    }
    if count == 2 {
        return Ok((0, 1));
    }
    let a = rng.gen_range(0..count);
    let mut b = rng.gen_range(0..count - 1);
    if b >= a {
        b += 1;
    }
    Ok((a.min(b), a.max(b)))
}

pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Shape(format!("cosine of {} vs {} values", u.len(), v.len())));
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 {
        return Err(Error::ZeroNorm(0));
    }
    if nv == 0.0 {
        return Err(Error::ZeroNorm(1));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Projections of `B` samples under `views` partitions each; row
/// `i * views + k` holds view `k` of sample `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastBatch {
    pub projections: Tensor,
    pub labels: Option<Vec<usize>>,
    pub views: usize,
}

impl ContrastBatch {
    pub fn batch_size(&self) -> usize {
        self.projections.rows() / self.views.max(1)
    }
}

/// Denominator convention for the contrastive losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Convention {
    /// Self-VPCL keeps the anchor's self-similarity in the denominator;
    /// supervised VPCL counts the anchor as its own positive and uses only
    /// other-class terms in the denominator.
    #[default]
    AsWritten,
    /// InfoNCE/SupCon style: the anchor never appears as its own positive
    /// and the denominator is every other row.
    ExcludeSelf,
}

/// Row-normalized similarity matrix `S` of the projections.
fn cosine_matrix(g: &mut Graph, proj: Var) -> Result<Var> {
    let sq = g.mul(proj, proj);
    let norms = g.sum_rows(sq);
    if let Some(row) = g.value(norms).data().iter().position(|&s| s.sqrt() <= 1e-12) {
        return Err(Error::ZeroNorm(row));
    }
    let inv = g.pow(norms, -0.5);
    let unit = g.mul_col(proj, inv);
    let t = g.transpose(unit);
    Ok(g.matmul(unit, t))
}

/// `-sum(S * pos) + sum_r pos_count[r] * log(sum(exp(S) * den)[r])`.
fn contrastive_from_masks(g: &mut Graph, sim: Var, pos: Tensor, den: Tensor) -> Var {
    let m = pos.rows();
    let counts: Vec<f64> = (0..m).map(|r| pos.row(r).iter().sum()).collect();
    let pos = g.constant(pos);
    let den = g.constant(den);
    let counts = g.constant(Tensor::matrix(m, 1, counts).expect("m counts"));
    let e = g.exp(sim);
    let masked = g.mul(e, den);
    let total = g.sum_rows(masked);
    let log_total = g.log(total);
    let weighted = g.mul(log_total, counts);
    let denom_term = g.sum(weighted);
    let pos_sim = g.mul(sim, pos);
    let pos_term = g.sum(pos_sim);
    g.sub(denom_term, pos_term)
}

/// Self-supervised VPCL on a `[(B * views) x d]` projection node.
pub fn self_vpcl_graph(g: &mut Graph, proj: Var, views: usize, convention: Convention) -> Result<Var> {
    if views < 2 {
        return Err(Error::DegenerateBatch(format!(
            "self-supervised VPCL needs at least 2 views, got {views}"
        )));
    }
    let m = g.shape(proj).0;
    if !m.is_multiple_of(views) {
        return Err(Error::Shape(format!("{m} projections not divisible by {views} views")));
    }
    let sim = cosine_matrix(g, proj)?;
    let mut pos = Tensor::zeros(&[m, m]);
    let mut den = Tensor::full(&[m, m], 1.0);
    for r in 0..m {
        for c in 0..m {
            if r != c && r / views == c / views {
                pos.data_mut()[r * m + c] = 1.0;
            }
        }
        if convention == Convention::ExcludeSelf {
            den.data_mut()[r * m + r] = 0.0;
        }
    }
    Ok(contrastive_from_masks(g, sim, pos, den))
}

/// Supervised VPCL; `labels[i]` is the class of sample `i`.
pub fn sup_vpcl_graph(
    g: &mut Graph,
    proj: Var,
    views: usize,
    labels: &[usize],
    convention: Convention,
) -> Result<Var> {
    let m = g.shape(proj).0;
    if views == 0 || m != labels.len() * views {
        return Err(Error::Shape(format!(
            "{m} projections for {} labels x {views} views",
            labels.len()
        )));
    }
    let first = labels.first().copied();
    if labels.iter().all(|&y| Some(y) == first) {
        return Err(Error::DegenerateBatch(
            "supervised VPCL needs at least two classes in the batch".into(),
        ));
    }
    let sim = cosine_matrix(g, proj)?;
    let class = |r: usize| labels[r / views];
    let mut pos = Tensor::zeros(&[m, m]);
    let mut den = Tensor::zeros(&[m, m]);
    for r in 0..m {
        for c in 0..m {
            let same = class(r) == class(c);
            let (p, d) = match convention {
                Convention::AsWritten => (same, !same),
                Convention::ExcludeSelf => (same && r != c, r != c),
            };
            pos.data_mut()[r * m + c] = f64::from(u8::from(p));
            den.data_mut()[r * m + c] = f64::from(u8::from(d));
        }
    }
    Ok(contrastive_from_masks(g, sim, pos, den))
}

fn evaluate(batch: &ContrastBatch, f: impl FnOnce(&mut Graph, Var) -> Result<Var>) -> Result<f64> {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let proj = g.constant(batch.projections.clone());
    let loss = f(&mut g, proj)?;
    Ok(g.value(loss).item())
}

pub fn self_vpcl_loss(batch: &ContrastBatch, convention: Convention) -> Result<f64> {
    evaluate(batch, |g, p| self_vpcl_graph(g, p, batch.views, convention))
}

pub fn sup_vpcl_loss(batch: &ContrastBatch, convention: Convention) -> Result<f64> {
    let labels = batch
        .labels
        .as_deref()
        .ok_or_else(|| Error::DegenerateBatch("supervised VPCL needs labels".into()))?;
    evaluate(batch, |g, p| sup_vpcl_graph(g, p, batch.views, labels, convention))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_examples() {
        let spec = |count, overlap_ratio| PartitionSpec {
            count,
            overlap_ratio,
            seed: 0,
        };
        assert_eq!(
            partition_columns(4, &spec(2, 0.0)).unwrap(),
            vec![vec![0, 1], vec![2, 3]]
        );
        assert_eq!(partition_columns(4, &spec(1, 0.0)).unwrap(), vec![vec![0, 1, 2, 3]]);
        assert_eq!(
            partition_columns(4, &spec(2, 0.5)).unwrap(),
            vec![vec![0, 1], vec![1, 2, 3]]
        );
        assert!(partition_columns(2, &spec(3, 0.0)).is_err());
        assert!(partition_columns(2, &spec(0, 0.0)).is_err());
        assert!(partition_columns(4, &spec(2, 1.0)).is_err());
    }

    #[test]
    fn pair_sampling() {
        for seed in 0..20 {
            assert_eq!(sample_partition_pair(2, seed).unwrap(), (0, 1));
            let (a, b) = sample_partition_pair(3, seed).unwrap();
            assert!(a < b && b < 3);
            assert_eq!(sample_partition_pair(3, seed).unwrap(), (a, b));
        }
        assert!(sample_partition_pair(1, 0).is_err());
    }

    #[test]
    fn pair_frequencies_are_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut counts = [0usize; 3];
        let draws = 10_000;
        for _ in 0..draws {
            let idx = match sample_partition_pair_with(3, &mut rng).unwrap() {
                (0, 1) => 0,
                (0, 2) => 1,
                (1, 2) => 2,
                other => panic!("bad pair {other:?}"),
            };
            counts[idx] += 1;
        }
        for c in counts {
            let freq = c as f64 / draws as f64;
            assert!((freq - 1.0 / 3.0).abs() <= 0.05 / 3.0, "frequency {freq}");
        }
    }

    #[test]
    fn cosine_examples() {
        let v = [0.3, -2.0, 1.5];
        assert!((cosine_sim(&v, &v).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        assert!((cosine_sim(&v, &neg).unwrap() + 1.0).abs() < 1e-15);
        assert!(matches!(cosine_sim(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::ZeroNorm(0))));
    }

    #[test]
    fn self_vpcl_identical_views() {
        // Every similarity is 1: each of the two anchors contributes log 2.
        let batch = ContrastBatch {
            projections: Tensor::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0]]),
            labels: None,
            views: 2,
        };
        let loss = self_vpcl_loss(&batch, Convention::AsWritten).unwrap();
        assert!((loss - 2.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn self_vpcl_orthogonal_views() {
        let batch = ContrastBatch {
            projections: Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 3.0]]),
            labels: None,
            views: 2,
        };
        let loss = self_vpcl_loss(&batch, Convention::AsWritten).unwrap();
        // Each anchor: -log(e^0 / (e^1 + e^0)) = log(1 + e).
        let expect = 2.0 * (1.0 + 1f64.exp()).ln();
        assert!((loss - expect).abs() < 1e-12);
        assert!((loss - 2.6265).abs() < 1e-4);
    }

    #[test]
    fn sup_vpcl_orthogonal_two_classes() {
        let batch = ContrastBatch {
            projections: Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]),
            labels: Some(vec![0, 1]),
            views: 1,
        };
        let loss = sup_vpcl_loss(&batch, Convention::AsWritten).unwrap();
        assert!((loss + 2.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_batches() {
        let single_class = ContrastBatch {
            projections: Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]),
            labels: Some(vec![1, 1]),
            views: 1,
        };
        assert!(matches!(
            sup_vpcl_loss(&single_class, Convention::AsWritten),
            Err(Error::DegenerateBatch(_))
        ));
        let one_view = ContrastBatch {
            projections: Tensor::from_rows(&[vec![1.0, 0.0]]),
            labels: None,
            views: 1,
        };
        assert!(self_vpcl_loss(&one_view, Convention::AsWritten).is_err());
        let zero = ContrastBatch {
            projections: Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]),
            labels: None,
            views: 2,
        };
        assert!(matches!(
            self_vpcl_loss(&zero, Convention::AsWritten),
            Err(Error::ZeroNorm(1))
        ));
    }
}
