//! Learnable state: embedding tables, gated encoder layers, heads and the
//! vocabulary snapshot they are indexed by.

use crate::autograd::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{InitScheme, Initializer, Tensor};
use crate::tokenizer::{Vocabulary, OVERFLOW_BUCKETS};

/// Where the numerical pathway applies its layer norm relative to the
/// value scaling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NumericNorm {
    /// `LayerNorm(x_u * E_col)`. Row-wise normalization cancels the
    /// magnitude of `x_u`, leaving mostly its sign.
    ScaleThenNorm,
    /// `x_u * LayerNorm(E_col)`; the block fed to the alignment layer is
    /// linear in `x_u`.
    NormThenScale,
}

impl NumericNorm {
    pub fn as_str(self) -> &'static str {
        match self {
            NumericNorm::ScaleThenNorm => "scale-then-norm",
            NumericNorm::NormThenScale => "norm-then-scale",
        }
    }
}

impl std::str::FromStr for NumericNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scale-then-norm" => Ok(NumericNorm::ScaleThenNorm),
            "norm-then-scale" => Ok(NumericNorm::NormThenScale),
            other => Err(Error::Config(format!("unknown numeric norm `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    /// Embedding width.
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    /// Task class count; two classes use a single logit.
    pub classes: usize,
    pub seed: u64,
    pub numeric_norm: NumericNorm,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 128,
            heads: 8,
            layers: 2,
            classes: 2,
            seed: 0,
            numeric_norm: NumericNorm::ScaleThenNorm,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.layers == 0 {
            return Err(Error::Config("at least one encoder layer is required".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config(format!("class count {} < 2", self.classes)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Classifier output width for a class count.
pub fn logit_width(classes: usize) -> usize {
    if classes == 2 {
        1
    } else {
        classes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pathway {
    Categorical,
    Numerical,
    Binary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbeddingTables {
    /// `[vocab_len x d]`, grows with the vocabulary.
    pub tokens: ParamId,
    /// `[OVERFLOW_BUCKETS x d]` rows for hashed unknown tokens.
    pub overflow: ParamId,
    /// `[1 x d]`, appended raw after the aligned blocks.
    pub cls: ParamId,
    pub align_weight: ParamId,
    pub align_bias: ParamId,
    pub categorical_norm: LayerNormParams,
    pub numerical_norm: LayerNormParams,
    pub binary_norm: LayerNormParams,
}

impl EmbeddingTables {
    pub fn norm(&self, pathway: Pathway) -> LayerNormParams {
        match pathway {
            Pathway::Categorical => self.categorical_norm,
            Pathway::Numerical => self.numerical_norm,
            Pathway::Binary => self.binary_norm,
        }
    }
}

/// One gated transformer layer. Query/key/value matrices pack all heads:
/// head `i` owns columns `[i * d/h, (i + 1) * d/h)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderLayerParams {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    pub output: ParamId,
    /// `[d x 1]` token gate.
    pub gate: ParamId,
    pub inner_weight: ParamId,
    pub inner_bias: ParamId,
    /// `[2d x d]` applied to the concatenated gated and inner branches.
    pub outer_weight: ParamId,
    pub outer_bias: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Heads {
    pub classifier_weight: ParamId,
    pub classifier_bias: ParamId,
    /// Bias-free `[d x d]` projection used by the contrastive losses.
    pub projector: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub vocab: Vocabulary,
    pub embedding: EmbeddingTables,
    pub layers: Vec<EncoderLayerParams>,
    pub heads: Heads,
    /// Bumped on each classifier replacement so re-initializations differ.
    pub head_generation: u64,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        Self::with_vocab(config, Vocabulary::new())
    }

    pub fn with_vocab(config: ModelConfig, vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        let init = Initializer::new(config.seed);
        let d = config.dim;
        let fan = |n: usize| InitScheme::UniformFan { fan_in: n };
        let mut store = ParamStore::new();

        let add = |store: &mut ParamStore, name: &str, shape: &[usize], scheme: InitScheme| {
            store.add(name, init.init(name, shape, scheme))
        };
        let ones = |store: &mut ParamStore, name: &str| store.add(name, Tensor::full(&[d], 1.0));

        let tokens = store.add("embedding.tokens", Tensor::zeros(&[0, d]));
        let overflow = add(&mut store, "embedding.overflow", &[OVERFLOW_BUCKETS, d], fan(d));
        let cls = add(&mut store, "embedding.cls", &[1, d], fan(d));
        let align_weight = add(&mut store, "embedding.align.weight", &[d, d], fan(d));
        let align_bias = add(&mut store, "embedding.align.bias", &[d], InitScheme::Zeros);
        let norm = |store: &mut ParamStore, name: &str| LayerNormParams {
            gain: ones(store, &format!("embedding.norm.{name}.gain")),
            bias: store.add(format!("embedding.norm.{name}.bias"), Tensor::zeros(&[d])),
        };
        let categorical_norm = norm(&mut store, "categorical");
        let numerical_norm = norm(&mut store, "numerical");
        let binary_norm = norm(&mut store, "binary");

        let layers = (0..config.layers)
            .map(|l| {
                let p = |s: &str| format!("layers.{l}.{s}");
                EncoderLayerParams {
                    query: add(&mut store, &p("query"), &[d, d], fan(d)),
                    key: add(&mut store, &p("key"), &[d, d], fan(d)),
                    value: add(&mut store, &p("value"), &[d, d], fan(d)),
                    output: add(&mut store, &p("output"), &[d, d], fan(d)),
                    gate: add(&mut store, &p("gate"), &[d, 1], fan(d)),
                    inner_weight: add(&mut store, &p("inner.weight"), &[d, d], fan(d)),
                    inner_bias: add(&mut store, &p("inner.bias"), &[d], InitScheme::Zeros),
                    outer_weight: add(&mut store, &p("outer.weight"), &[2 * d, d], fan(2 * d)),
                    outer_bias: add(&mut store, &p("outer.bias"), &[d], InitScheme::Zeros),
                }
            })
            .collect();

        let out = logit_width(config.classes);
        let heads = Heads {
            classifier_weight: add(&mut store, "head.classifier.weight", &[d, out], fan(d)),
            classifier_bias: add(&mut store, "head.classifier.bias", &[out], InitScheme::Zeros),
            projector: add(&mut store, "head.projector.weight", &[d, d], fan(d)),
        };

        let mut model = Model {
            config,
            store,
            vocab,
            embedding: EmbeddingTables {
                tokens,
                overflow,
                cls,
                align_weight,
                align_bias,
                categorical_norm,
                numerical_norm,
                binary_norm,
            },
            layers,
            heads,
            head_generation: 0,
        };
        model.sync_vocab();
        Ok(model)
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn token_rows(&self) -> usize {
        self.store.value(self.embedding.tokens).rows()
    }

    /// Appends embedding rows for vocabulary entries added since the last
    /// sync. Returns the number of rows added.
    pub fn sync_vocab(&mut self) -> usize {
        let have = self.token_rows();
        let want = self.vocab.len();
        if want <= have {
            return 0;
        }
        let d = self.dim();
        let init = Initializer::new(self.config.seed);
        let mut table = self.store.value(self.embedding.tokens).clone();
        for id in have..want {
            let token = self.vocab.token(id).expect("id below vocab len");
            let row = init.init(
                &format!("embedding.tokens.{token}"),
                &[1, d],
                InitScheme::UniformFan { fan_in: d },
            );
            table.append_rows(&row).expect("row width is d");
        }
        let grad_rows = want - have;
        let param = self.store.get_mut(self.embedding.tokens);
        param.value = table;
        param.grad = Tensor::zeros(param.value.shape());
        grad_rows
    }

    /// Replaces the classifier with a freshly initialized head for `classes`.
    pub fn reset_classifier(&mut self, classes: usize) -> Result<()> {
        if classes < 2 {
            return Err(Error::Config(format!("class count {classes} < 2")));
        }
        self.head_generation += 1;
        self.config.classes = classes;
        let d = self.dim();
        let out = logit_width(classes);
        let init = Initializer::new(self.config.seed);
        let w = init.init(
            &format!("head.classifier.weight.g{}", self.head_generation),
            &[d, out],
            InitScheme::UniformFan { fan_in: d },
        );
        self.store.replace(self.heads.classifier_weight, w);
        self.store
            .replace(self.heads.classifier_bias, Tensor::zeros(&[out]));
        Ok(())
    }

    /// Checks that every parameter shape agrees with the configuration.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let d = self.dim();
        let check = |id: ParamId, shape: &[usize]| -> Result<()> {
            let p = self.store.get(id);
            if p.value.shape() != shape {
                return Err(Error::Shape(format!(
                    "parameter `{}` has shape {:?}, expected {shape:?}",
                    p.name,
                    p.value.shape()
                )));
            }
            Ok(())
        };
        let e = &self.embedding;
        check(e.tokens, &[self.vocab.len(), d])?;
        check(e.overflow, &[OVERFLOW_BUCKETS, d])?;
        check(e.cls, &[1, d])?;
        check(e.align_weight, &[d, d])?;
        check(e.align_bias, &[d])?;
        for n in [e.categorical_norm, e.numerical_norm, e.binary_norm] {
            check(n.gain, &[d])?;
            check(n.bias, &[d])?;
        }
        for l in &self.layers {
            for id in [l.query, l.key, l.value, l.output, l.inner_weight] {
                check(id, &[d, d])?;
            }
            check(l.gate, &[d, 1])?;
            check(l.inner_bias, &[d])?;
            check(l.outer_weight, &[2 * d, d])?;
            check(l.outer_bias, &[d])?;
        }
        let out = logit_width(self.config.classes);
        check(self.heads.classifier_weight, &[d, out])?;
        check(self.heads.classifier_bias, &[out])?;
        check(self.heads.projector, &[d, d])?;
        Ok(())
    }

    /// Parameters other than the classifier head, as `(name, value)` pairs.
    pub fn encoder_parameters(&self) -> Vec<(&str, &Tensor)> {
        self.store
            .iter()
            .filter(|(id, _)| {
                *id != self.heads.classifier_weight && *id != self.heads.classifier_bias
            })
            .map(|(_, p)| (p.name.as_str(), &p.value))
            .collect()
    }
}
