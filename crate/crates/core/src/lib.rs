//! Word-level and character-word (CW) LSTM language models.
//!
//! A CW model feeds the LSTM the concatenation of a word embedding and a fixed
//! number of character embeddings taken from the word's surface form. Everything
//! here is implemented directly on `ndarray`: the stacked LSTM, its exact
//! backward pass, truncated-BPTT training with SGD, perplexity evaluation and a
//! binary checkpoint format.

pub mod char_encoding;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod embedding;
pub mod evaluation;
pub mod grid;
pub mod pipeline;
pub mod network;
pub mod real;
pub mod trainer;

pub use char_encoding::{char_sequence, random_char_sequence, CWConfig, CharEncoder, CharOrder};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};
pub use config::{parse_config, ConfigError, Preset, RunConfig};
pub use corpus::{batchify, tokenize_lines, Batch, CharVocab, CorpusError, TokenStream, Vocabulary};
pub use embedding::{param_count, EmbeddingParams, SizeSpec};
pub use evaluation::{
    oov_followup_analysis, perplexity, relative_change, relative_improvement, EvalReport,
    OovReport,
};
pub use network::{clip_global_norm, DropoutMasks, ModelParams, ModelShape, NetworkState};
pub use real::Real;
pub use trainer::{init_params, lr_at_epoch, sgd_step, train, TrainConfig, TrainLog, Trainer};
