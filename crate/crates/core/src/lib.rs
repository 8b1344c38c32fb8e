//! Transferable tabular transformer.
//!
//! Rows of tables with arbitrary column sets are featurized into token
//! sequences contextualized by their column names, encoded with gated
//! transformer layers and trained with a supervised objective or with
//! vertical-partition contrastive learning. A single vocabulary and
//! embedding table is shared by every table a model sees, which is what
//! lets a checkpoint trained on one table be finetuned on, or predict for,
//! tables with different columns.

pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod input;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod synth;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;
pub mod vpcl;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig};
pub use tensor::Tensor;
