//! Optimization loops: supervised training with early stopping, contrastive
//! pretraining over several tables, finetuning with a fresh head, and
//! prediction against a frozen vocabulary.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Graph;
use crate::data::TableDataset;
use crate::encoder::{classify, encode, project};
use crate::error::{Error, Result};
use crate::input::{embed_batch, featurize_row, featurize_table, FeaturizedRow};
use crate::metrics::{auroc_for_classes, macro_auroc};
use crate::model::Model;
use crate::optim::{AdamConfig, AdamState};
use crate::tensor::{mix_seed, Tensor};
use crate::vpcl::{
    partition_columns, sample_partition_pair_with, self_vpcl_graph, sup_vpcl_graph, Convention,
    PartitionSpec,
};

/// Rows per forward pass when scoring.
const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum VpclMode {
    #[default]
    SelfSupervised,
    Supervised,
}

impl std::str::FromStr for VpclMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "self" | "self-supervised" => Ok(VpclMode::SelfSupervised),
            "supervised" | "sup" => Ok(VpclMode::Supervised),
            other => Err(Error::Config(format!("unknown VPCL mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct VpclConfig {
    pub partition: PartitionSpec,
    pub mode: VpclMode,
    pub convention: Convention,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub pretrain_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Fraction of training rows held out to monitor early stopping.
    pub eval_fraction: f64,
    pub vpcl: VpclConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 64,
            max_epochs: 100,
            pretrain_epochs: 50,
            patience: 10,
            seed: 0,
            eval_fraction: 0.2,
            vpcl: VpclConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.patience > self.max_epochs {
            return Err(Error::Config(format!(
                "patience {} exceeds max epochs {}",
                self.patience, self.max_epochs
            )));
        }
        if !(self.eval_fraction > 0.0 && self.eval_fraction < 1.0) {
            return Err(Error::Config(format!(
                "eval fraction {} outside (0, 1)",
                self.eval_fraction
            )));
        }
        Ok(())
    }

    fn adam(&self) -> AdamState {
        AdamState::new(AdamConfig::with_lr(self.learning_rate))
    }

    fn rng(&self, stream: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(mix_seed(self.seed, stream))
    }
}

/// Patience-based stopping on a metric where larger is better.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<f64>,
    pub best_epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            best_epoch: 0,
            stale: 0,
        }
    }

    /// Records `metric` for `epoch`; returns `(improved, stop)`.
    pub fn update(&mut self, epoch: usize, metric: f64) -> (bool, bool) {
        let improved = self.best.is_none_or(|b| metric > b);
        if improved {
            self.best = Some(metric);
            self.best_epoch = epoch;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        (improved, self.stale >= self.patience)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// AUROC on the held-out split, or on the training rows when no split
    /// was possible.
    pub val_auroc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_auroc: Option<f64>,
    pub stop_epoch: usize,
    pub skipped_batches: usize,
    /// Whether `val_auroc` was measured on held-out rows.
    pub held_out: bool,
}

impl TrainReport {
    /// `epoch,train_loss,val_auroc` with an empty field for missing AUROC.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_auroc\n");
        for e in &self.epochs {
            let auroc = e.val_auroc.map(|a| a.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{}", e.epoch, e.train_loss, auroc);
        }
        out
    }

    pub fn to_log(&self) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            let auroc = e.val_auroc.map_or("n/a".to_string(), |a| format!("{a:.6}"));
            let _ = writeln!(out, "epoch {} loss {:.6} auroc {auroc}", e.epoch, e.train_loss);
        }
        let best = self.best_auroc.map_or("n/a".to_string(), |a| format!("{a:.6}"));
        let _ = writeln!(
            out,
            "best_epoch {} best_auroc {best} stop_epoch {} skipped_batches {} held_out {}",
            self.best_epoch, self.stop_epoch, self.skipped_batches, self.held_out
        );
        out
    }
}

fn require_growable(model: &Model) -> Result<()> {
    if model.vocab.is_frozen() {
        return Err(Error::Frozen(
            "vocabulary is frozen; load the checkpoint in extend mode to train".into(),
        ));
    }
    Ok(())
}

fn labels_of(dataset: &TableDataset) -> Result<&[usize]> {
    let labels = dataset
        .labels
        .as_deref()
        .ok_or_else(|| Error::Dataset(format!("table `{}` has no labels", dataset.name)))?;
    if dataset.is_empty() {
        return Err(Error::Dataset(format!("table `{}` is empty", dataset.name)));
    }
    Ok(labels)
}

/// Seeded, unstratified hold-out. If the draw leaves a class out of either
/// side, the nearest rows of the missing class are swapped in, so AUROC is
/// defined whenever the table has two classes with at least two rows each.
pub fn validation_split(labels: &[usize], fraction: f64, seed: u64) -> Option<(Vec<usize>, Vec<usize>)> {
    let n = labels.len();
    if n < 4 {
        return None;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, "trainer.validation")));
    let n_val = ((fraction * n as f64).round() as usize).clamp(2, n - 2);
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    for c in 0..classes.min(2) {
        for side_is_val in [true, false] {
            let (lo, hi) = if side_is_val { (0, n_val) } else { (n_val, n) };
            if order[lo..hi].iter().any(|&r| labels[r] == c) {
                continue;
            }
            let (olo, ohi) = if side_is_val { (n_val, n) } else { (0, n_val) };
            let donors = order[olo..ohi].iter().filter(|&&r| labels[r] == c).count();
            if donors < 2 {
                return None;
            }
            let from = (olo..ohi).find(|&i| labels[order[i]] == c)?;
            let to = (lo..hi).find(|&i| {
                let l = labels[order[i]];
                order[lo..hi].iter().filter(|&&r| labels[r] == l).count() > 1
            })?;
            order.swap(from, to);
        }
    }
    let mut val = order[..n_val].to_vec();
    let mut train = order[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    Some((train, val))
}

/// Softmax cross-entropy of logits against labels, averaged over rows. A
/// single logit column is read as the class-1 logit against a fixed 0.
fn cross_entropy(g: &mut Graph, logits: crate::autograd::Var, labels: &[usize]) -> crate::autograd::Var {
    let (rows, width) = g.shape(logits);
    let logits = if width == 1 {
        let zero = g.constant(Tensor::zeros(&[rows, 1]));
        g.concat_cols(&[zero, logits])
    } else {
        logits
    };
    let classes = width.max(2);
    let mut onehot = Tensor::zeros(&[rows, classes]);
    for (r, &y) in labels.iter().enumerate() {
        onehot.data_mut()[r * classes + y] = 1.0;
    }
    let probs = g.softmax_rows(logits);
    let logp = g.log(probs);
    let target = g.constant(onehot);
    let picked = g.mul(logp, target);
    let total = g.sum(picked);
    g.scale(total, -1.0 / rows as f64)
}

/// Mean cross-entropy of `rows` (no parameter update).
pub fn batch_loss(model: &Model, rows: &[&FeaturizedRow], labels: &[usize]) -> Result<f64> {
    let mut g = Graph::new(&model.store);
    let batch = embed_batch(&mut g, model, rows)?;
    let z = encode(&mut g, model, &batch)?;
    let logits = classify(&mut g, model, z);
    let loss = cross_entropy(&mut g, logits, labels);
    Ok(g.value(loss).item())
}

fn check_labels(model: &Model, labels: &[usize]) -> Result<()> {
    if let Some(&bad) = labels.iter().find(|&&y| y >= model.config.classes) {
        return Err(Error::Dataset(format!(
            "label {bad} out of range for a {}-class head",
            model.config.classes
        )));
    }
    Ok(())
}

/// One Adam step on the cross-entropy of a batch; returns the batch loss.
fn supervised_step(
    model: &mut Model,
    adam: &mut AdamState,
    rows: &[&FeaturizedRow],
    labels: &[usize],
) -> Result<f64> {
    let (value, grads) = {
        let mut g = Graph::new(&model.store);
        let batch = embed_batch(&mut g, model, rows)?;
        let z = encode(&mut g, model, &batch)?;
        let logits = classify(&mut g, model, z);
        let loss = cross_entropy(&mut g, logits, labels);
        (g.value(loss).item(), g.backward(loss)?)
    };
    model.store.zero_grads();
    model.store.accumulate(&grads);
    adam.step(&mut model.store)?;
    Ok(value)
}

/// Class probabilities of featurized rows, `[rows x classes]`.
pub fn predict_featurized(model: &Model, rows: &[FeaturizedRow]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(rows.len());
    for chunk in rows.chunks(EVAL_CHUNK) {
        let refs: Vec<&FeaturizedRow> = chunk.iter().collect();
        let mut g = Graph::new(&model.store);
        let batch = embed_batch(&mut g, model, &refs)?;
        let z = encode(&mut g, model, &batch)?;
        let logits = classify(&mut g, model, z);
        let t = g.value(logits);
        for r in 0..t.rows() {
            let row = t.row(r);
            if row.len() == 1 {
                let p = crate::autograd::sigmoid(row[0]);
                out.push(vec![1.0 - p, p]);
            } else {
                let probs = Tensor::from_rows(&[row.to_vec()]).softmax_rows();
                out.push(probs.data().to_vec());
            }
        }
    }
    Ok(out)
}

fn auroc_of(probs: &[Vec<f64>], labels: &[usize]) -> Option<f64> {
    if probs.first().map_or(0, Vec::len) == 2 {
        let scores: Vec<f64> = probs.iter().map(|p| p[1]).collect();
        auroc_for_classes(&scores, labels).ok()
    } else {
        macro_auroc(probs, labels).ok()
    }
}

/// Trains on the given featurized rows, monitoring `monitor` rows for
/// early stopping, and restores the best epoch's parameters.
fn fit(
    model: &mut Model,
    rows: &[FeaturizedRow],
    labels: &[usize],
    train_idx: &[usize],
    monitor_idx: &[usize],
    held_out: bool,
    config: &TrainConfig,
) -> Result<TrainReport> {
    let mut adam = config.adam();
    let mut rng = config.rng("trainer.shuffle");
    let mut stopper = EarlyStopping::new(config.patience);
    let mut report = TrainReport {
        held_out,
        ..TrainReport::default()
    };
    let monitor_rows: Vec<FeaturizedRow> = monitor_idx.iter().map(|&i| rows[i].clone()).collect();
    let monitor_labels: Vec<usize> = monitor_idx.iter().map(|&i| labels[i]).collect();
    let mut best_values = model.store.values();
    let mut order = train_idx.to_vec();

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let refs: Vec<&FeaturizedRow> = batch.iter().map(|&i| &rows[i]).collect();
            let ys: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            total += supervised_step(model, &mut adam, &refs, &ys)? * batch.len() as f64;
        }
        let train_loss = total / order.len() as f64;
        if !train_loss.is_finite() {
            return Err(Error::Config(format!(
                "training diverged at epoch {epoch} (loss {train_loss}); lower the learning rate"
            )));
        }
        let probs = predict_featurized(model, &monitor_rows)?;
        let auroc = auroc_of(&probs, &monitor_labels);
        report.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_auroc: auroc,
        });
        report.stop_epoch = epoch;
        // Without a defined AUROC the loss is the only signal left.
        let (improved, stop) = stopper.update(epoch, auroc.unwrap_or(-train_loss));
        if improved {
            best_values = model.store.values();
            report.best_epoch = epoch;
            report.best_auroc = auroc;
        }
        if stop {
            break;
        }
    }
    model.store.restore_values(best_values);
    Ok(report)
}

/// Supervised training with a seeded validation hold-out and AUROC-based
/// early stopping. The returned model carries the best epoch's parameters.
///
/// When the table is too small or too unbalanced for a hold-out with both
/// classes on each side, AUROC is monitored on the training rows instead.
pub fn train_supervised(model: &mut Model, dataset: &TableDataset, config: &TrainConfig) -> Result<TrainReport> {
    config.validate()?;
    require_growable(model)?;
    let labels = labels_of(dataset)?;
    check_labels(model, labels)?;
    let rows = featurize_table(dataset, None, &mut model.vocab, true)?;
    model.sync_vocab();
    let all: Vec<usize> = (0..rows.len()).collect();
    match validation_split(labels, config.eval_fraction, config.seed) {
        Some((train, val)) => fit(model, &rows, labels, &train, &val, true, config),
        None => fit(model, &rows, labels, &all, &all, false, config),
    }
}

/// Supervised training on every row, monitoring training AUROC.
pub fn train_on_all_rows(model: &mut Model, dataset: &TableDataset, config: &TrainConfig) -> Result<TrainReport> {
    config.validate()?;
    require_growable(model)?;
    let labels = labels_of(dataset)?;
    check_labels(model, labels)?;
    let rows = featurize_table(dataset, None, &mut model.vocab, true)?;
    model.sync_vocab();
    let all: Vec<usize> = (0..rows.len()).collect();
    fit(model, &rows, labels, &all, &all, false, config)
}

/// Replaces the classifier for the target's class count, then trains as
/// [`train_supervised`]. Every other parameter starts from the pretrained
/// values; unseen tokens get fresh embedding rows.
pub fn finetune(model: &mut Model, dataset: &TableDataset, config: &TrainConfig) -> Result<TrainReport> {
    config.validate()?;
    require_growable(model)?;
    let classes = labels_of(dataset)?
        .iter()
        .max()
        .map_or(2, |m| (m + 1).max(2));
    model.reset_classifier(classes)?;
    train_supervised(model, dataset, config)
}

/// Continues supervised training through tables whose columns grow over
/// time, keeping the classifier between stages.
pub fn train_incremental(model: &mut Model, stages: &[TableDataset], config: &TrainConfig) -> Result<Vec<TrainReport>> {
    if stages.is_empty() {
        return Err(Error::Dataset("incremental training needs at least one table".into()));
    }
    stages.iter().map(|s| train_supervised(model, s, config)).collect()
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PretrainReport {
    /// Mean contrastive loss per epoch over the batches that ran.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
    /// Batches dropped for having a single class (supervised mode) or no
    /// sample with two non-empty views.
    pub skipped_batches: usize,
    /// Views actually used per sample in each step.
    pub views_per_step: usize,
}

impl PretrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,vpcl_loss\n");
        for (e, l) in self.epoch_losses.iter().enumerate() {
            let _ = writeln!(out, "{},{}", e + 1, l);
        }
        out
    }
}

/// Per-partition featurized views of one table; `None` where a row has no
/// tokens in that partition.
struct TableViews {
    views: Vec<Vec<Option<FeaturizedRow>>>,
    labels: Option<Vec<usize>>,
    rows: usize,
}

fn table_views(model: &mut Model, dataset: &TableDataset, spec: &PartitionSpec) -> Result<TableViews> {
    let parts = partition_columns(dataset.schema.len(), spec)?;
    let mut views = Vec::with_capacity(parts.len());
    for cols in &parts {
        let schema: Vec<_> = cols.iter().map(|&c| dataset.schema[c].clone()).collect();
        let mut view = Vec::with_capacity(dataset.len());
        for (r, row) in dataset.rows.iter().enumerate() {
            let cells: Vec<_> = cols.iter().map(|&c| row[c].clone()).collect();
            match featurize_row(&cells, &schema, &mut model.vocab, true, r) {
                Ok(fr) => view.push(Some(fr)),
                Err(Error::EmptyRow { .. }) => view.push(None),
                Err(e) => return Err(e),
            }
        }
        views.push(view);
    }
    Ok(TableViews {
        views,
        labels: dataset.labels.clone(),
        rows: dataset.len(),
    })
}

/// Contrastive pretraining over one or more tables. Batches are drawn
/// round-robin by table; each batch contrasts two column partitions (a
/// random pair when more than two are configured).
pub fn pretrain_vpcl(model: &mut Model, datasets: &[TableDataset], config: &TrainConfig) -> Result<PretrainReport> {
    config.validate()?;
    require_growable(model)?;
    if datasets.is_empty() {
        return Err(Error::Dataset("pretraining needs at least one table".into()));
    }
    let vpcl = config.vpcl;
    if vpcl.mode == VpclMode::Supervised {
        for d in datasets {
            labels_of(d)?;
        }
    }
    if vpcl.mode == VpclMode::SelfSupervised && vpcl.partition.count < 2 {
        return Err(Error::Config(
            "self-supervised VPCL needs at least two partitions".into(),
        ));
    }
    let tables = datasets
        .iter()
        .map(|d| table_views(model, d, &vpcl.partition))
        .collect::<Result<Vec<_>>>()?;
    model.sync_vocab();

    let mut adam = config.adam();
    let mut rng = config.rng("trainer.pretrain");
    let used_views = vpcl.partition.count.min(2);
    let mut report = PretrainReport {
        views_per_step: used_views,
        ..PretrainReport::default()
    };

    for _ in 0..config.pretrain_epochs {
        let mut queues: Vec<Vec<Vec<usize>>> = tables
            .iter()
            .map(|t| {
                let mut order: Vec<usize> = (0..t.rows).collect();
                order.shuffle(&mut rng);
                order.chunks(config.batch_size).rev().map(<[usize]>::to_vec).collect()
            })
            .collect();
        let (mut total, mut count) = (0.0, 0usize);
        loop {
            let mut any = false;
            for (t, queue) in queues.iter_mut().enumerate() {
                let Some(batch) = queue.pop() else { continue };
                any = true;
                let pair = if used_views == 2 {
                    let (a, b) = sample_partition_pair_with(vpcl.partition.count, &mut rng)?;
                    vec![a, b]
                } else {
                    vec![0]
                };
                match contrastive_step(model, &mut adam, &tables[t], &batch, &pair, &vpcl)? {
                    Some(loss) => {
                        total += loss;
                        count += 1;
                        report.steps += 1;
                    }
                    None => report.skipped_batches += 1,
                }
            }
            if !any {
                break;
            }
        }
        report
            .epoch_losses
            .push(if count == 0 { f64::NAN } else { total / count as f64 });
    }
    Ok(report)
}

fn contrastive_step(
    model: &mut Model,
    adam: &mut AdamState,
    table: &TableViews,
    batch: &[usize],
    views: &[usize],
    vpcl: &VpclConfig,
) -> Result<Option<f64>> {
    let samples: Vec<usize> = batch
        .iter()
        .copied()
        .filter(|&r| views.iter().all(|&k| table.views[k][r].is_some()))
        .collect();
    if samples.is_empty() {
        return Ok(None);
    }
    let labels: Vec<usize> = match (&table.labels, vpcl.mode) {
        (Some(l), VpclMode::Supervised) => samples.iter().map(|&r| l[r]).collect(),
        _ => Vec::new(),
    };
    if vpcl.mode == VpclMode::Supervised && labels.iter().all(|&y| y == labels[0]) {
        return Ok(None);
    }
    let rows: Vec<&FeaturizedRow> = samples
        .iter()
        .flat_map(|&r| views.iter().map(move |&k| table.views[k][r].as_ref().expect("filtered")))
        .collect();
    let (value, grads) = {
        let mut g = Graph::new(&model.store);
        let batch = embed_batch(&mut g, model, &rows)?;
        let z = encode(&mut g, model, &batch)?;
        let proj = project(&mut g, model, z);
        let loss = match vpcl.mode {
            VpclMode::SelfSupervised => self_vpcl_graph(&mut g, proj, views.len(), vpcl.convention)?,
            VpclMode::Supervised => sup_vpcl_graph(&mut g, proj, views.len(), &labels, vpcl.convention)?,
        };
        (g.value(loss).item(), g.backward(loss)?)
    };
    model.store.zero_grads();
    model.store.accumulate(&grads);
    adam.step(&mut model.store)?;
    Ok(Some(value))
}

/// Class probabilities for every row, featurized against a frozen copy of
/// the vocabulary (unknown words land in the overflow buckets).
pub fn predict_proba(model: &Model, dataset: &TableDataset) -> Result<Vec<Vec<f64>>> {
    let mut vocab = model.vocab.clone();
    vocab.freeze();
    let rows = featurize_table(dataset, None, &mut vocab, false)?;
    predict_featurized(model, &rows)
}

/// Probability of class 1 for every row. Never mutates the model.
pub fn zero_shot_predict(model: &Model, dataset: &TableDataset) -> Result<Vec<f64>> {
    Ok(predict_proba(model, dataset)?.into_iter().map(|p| p[1]).collect())
}

/// AUROC of the model's class-1 scores (macro one-vs-rest for multiclass).
pub fn evaluate(model: &Model, dataset: &TableDataset) -> Result<f64> {
    let labels = labels_of(dataset)?;
    let probs = predict_proba(model, dataset)?;
    if model.config.classes == 2 {
        let scores: Vec<f64> = probs.iter().map(|p| p[1]).collect();
        auroc_for_classes(&scores, labels)
    } else {
        macro_auroc(&probs, labels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Cell, ColumnSchema};
    use crate::model::ModelConfig;

    fn small_model(seed: u64) -> Model {
        Model::new(ModelConfig {
            dim: 8,
            heads: 2,
            layers: 1,
            classes: 2,
            seed,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    fn toy(name: &str, cols: &[&str], n: usize) -> TableDataset {
        let schema = cols
            .iter()
            .map(|c| ColumnSchema::numerical(*c).unwrap())
            .collect();
        let rows = (0..n)
            .map(|r| {
                cols.iter()
                    .enumerate()
                    .map(|(c, _)| Cell::Number(((r * (c + 3)) % 7) as f64 / 6.0))
                    .collect()
            })
            .collect();
        let labels = (0..n).map(|r| usize::from((r * 3) % 7 >= 3)).collect();
        TableDataset::new(name, schema, rows, Some(labels)).unwrap()
    }

    fn state(m: &Model) -> (Vec<String>, Vec<Tensor>) {
        (m.vocab.tokens().to_vec(), m.store.values())
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            learning_rate: 1e-2,
            batch_size: 8,
            max_epochs: 3,
            pretrain_epochs: 2,
            patience: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn early_stopping_flat_sequence() {
        let mut s = EarlyStopping::new(10);
        let mut stopped = None;
        for epoch in 1..=100 {
            let metric = if epoch <= 4 { epoch as f64 / 10.0 } else { 0.4 };
            if s.update(epoch, metric).1 {
                stopped = Some(epoch);
                break;
            }
        }
        assert_eq!(s.best_epoch, 4);
        assert_eq!(stopped, Some(14));
    }

    #[test]
    fn config_invariants() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            patience: 200,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            eval_fraction: 1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn validation_split_keeps_both_classes() {
        let labels = vec![0, 0, 0, 0, 0, 0, 0, 0, 1, 1];
        for seed in 0..20 {
            let (train, val) = validation_split(&labels, 0.2, seed).unwrap();
            assert_eq!(train.len() + val.len(), 10);
            for side in [&train, &val] {
                assert!(side.iter().any(|&r| labels[r] == 1));
                assert!(side.iter().any(|&r| labels[r] == 0));
            }
        }
        assert!(validation_split(&[0, 1, 0], 0.2, 0).is_none());
    }

    #[test]
    fn unlabeled_and_empty_rejected() {
        let mut m = small_model(1);
        let mut ds = toy("t", &["a b"], 6);
        ds.labels = None;
        assert!(train_supervised(&mut m, &ds, &quick()).is_err());
        let empty = TableDataset::new("e", ds.schema.clone(), vec![], Some(vec![])).unwrap();
        assert!(train_supervised(&mut m, &empty, &quick()).is_err());
    }

    #[test]
    fn report_best_is_max() {
        let mut m = small_model(2);
        let ds = toy("t", &["age", "blood pressure"], 30);
        let report = train_supervised(&mut m, &ds, &quick()).unwrap();
        let max = report
            .epochs
            .iter()
            .filter_map(|e| e.val_auroc)
            .fold(f64::MIN, f64::max);
        assert_eq!(report.best_auroc, Some(max));
        assert!(report.to_csv().lines().count() == report.epochs.len() + 1);
    }

    #[test]
    fn deterministic_training() {
        let ds = toy("t", &["age", "blood pressure"], 30);
        let run = || {
            let mut m = small_model(3);
            let r = train_supervised(&mut m, &ds, &quick()).unwrap();
            (r, m.store.values())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn one_row_descent() {
        let mut m = small_model(4);
        let ds = toy("t", &["age"], 2).select_rows(&[1]);
        let rows = featurize_table(&ds, None, &mut m.vocab, true).unwrap();
        m.sync_vocab();
        let refs: Vec<&FeaturizedRow> = rows.iter().collect();
        let y = ds.labels.clone().unwrap();
        let before = batch_loss(&m, &refs, &y).unwrap();
        let cfg = TrainConfig {
            learning_rate: 1e-4,
            max_epochs: 1,
            patience: 1,
            ..quick()
        };
        train_on_all_rows(&mut m, &ds, &cfg).unwrap();
        let after = batch_loss(&m, &refs, &y).unwrap();
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn finetune_keeps_encoder_and_swaps_head() {
        let ds = toy("t", &["age", "blood pressure"], 30);
        let mut m = small_model(5);
        pretrain_vpcl(&mut m, std::slice::from_ref(&ds), &quick()).unwrap();
        let before: Vec<(String, Tensor)> = m
            .encoder_parameters()
            .into_iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        m.reset_classifier(3).unwrap();
        let after: Vec<(String, Tensor)> = m
            .encoder_parameters()
            .into_iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        assert_eq!(before, after);
        assert_eq!(m.store.value(m.heads.classifier_weight).shape(), &[8, 3]);

        let mut grown = small_model(5);
        train_supervised(&mut grown, &ds, &quick()).unwrap();
        let len = grown.vocab.len();
        let novel = toy("n", &["age", "heart rate"], 30);
        finetune(&mut grown, &novel, &quick()).unwrap();
        assert_eq!(grown.vocab.len(), len + 2);
        assert_eq!(grown.token_rows(), grown.vocab.len());
    }

    #[test]
    fn pretrain_uses_two_views() {
        let ds = toy("t", &["a1", "b2", "c3", "d4", "e5"], 20);
        for count in [2, 5] {
            let mut m = small_model(6);
            let cfg = TrainConfig {
                vpcl: VpclConfig {
                    partition: PartitionSpec {
                        count,
                        ..PartitionSpec::default()
                    },
                    ..VpclConfig::default()
                },
                ..quick()
            };
            let r = pretrain_vpcl(&mut m, std::slice::from_ref(&ds), &cfg).unwrap();
            assert_eq!(r.views_per_step, 2);
            assert!(r.steps > 0);
        }
    }

    #[test]
    fn pretrain_shares_vocabulary() {
        let a = toy("a", &["age", "weight"], 12);
        let b = toy("b", &["age", "height"], 12);
        let mut m = small_model(7);
        pretrain_vpcl(&mut m, &[a, b], &quick()).unwrap();
        let count = m.vocab.tokens().iter().filter(|t| *t == "age").count();
        assert_eq!(count, 1);
        assert!(m.vocab.id("height").is_some());
    }

    #[test]
    fn supervised_pretrain_requires_labels() {
        let mut ds = toy("t", &["age", "weight"], 12);
        ds.labels = None;
        let cfg = TrainConfig {
            vpcl: VpclConfig {
                mode: VpclMode::Supervised,
                ..VpclConfig::default()
            },
            ..quick()
        };
        assert!(pretrain_vpcl(&mut small_model(8), &[ds], &cfg).is_err());
    }

    #[test]
    fn zero_shot_is_pure() {
        let ds = toy("t", &["age", "weight"], 20);
        let mut m = small_model(9);
        train_supervised(&mut m, &ds, &quick()).unwrap();
        let snapshot = state(&m);
        let first = zero_shot_predict(&m, &ds).unwrap();
        let other = toy("o", &["colour", "shape"], 20);
        let scores = zero_shot_predict(&m, &other).unwrap();
        assert!(scores.iter().all(|&p| p > 0.0 && p < 1.0));
        assert_eq!(first, zero_shot_predict(&m, &ds).unwrap());
        assert_eq!(snapshot, state(&m));
    }

    #[test]
    fn frozen_vocab_blocks_training() {
        let ds = toy("t", &["age"], 10);
        let mut m = small_model(10);
        m.vocab.freeze();
        assert!(matches!(train_supervised(&mut m, &ds, &quick()), Err(Error::Frozen(_))));
    }
}
