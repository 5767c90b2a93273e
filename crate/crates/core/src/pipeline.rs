//! End-to-end runs: read splits, train, score, write artifacts.

use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::checkpoint::{char_encoder, save_checkpoint, Checkpoint, CheckpointError};
use crate::config::RunConfig;
use crate::corpus::{tokenize_lines, CharVocab, CorpusError, TokenStream, Vocabulary};
use crate::embedding::param_count;
use crate::evaluation::{perplexity, EvalError, EvalReport};
use crate::trainer::{EpochRecord, TrainError, TrainLog, Trainer};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("missing `{0}` path in the configuration")]
    MissingPath(&'static str),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub fn read_text(path: &Path) -> Result<String, PipelineError> {
    fs::read_to_string(path).map_err(|source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_text(path: &Path, text: &str) -> Result<(), PipelineError> {
    fs::write(path, text).map_err(|source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Vocabularies plus encoded splits.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub vocab: Vocabulary,
    pub char_vocab: CharVocab,
    pub train: TokenStream,
    pub valid: TokenStream,
    pub test: Option<TokenStream>,
}

impl PreparedData {
    /// Both vocabularies come from the training split only.
    pub fn from_texts(train: &str, valid: &str, test: Option<&str>, vocab_size: usize) -> Result<Self, PipelineError> {
        let train_tokens = tokenize_lines(train);
        let vocab = Vocabulary::build(train_tokens.iter().copied(), vocab_size)?;
        let char_vocab = CharVocab::build(train_tokens.iter().copied());
        Ok(Self {
            train: vocab.encode_stream(&train_tokens),
            valid: vocab.encode_stream(&tokenize_lines(valid)),
            test: test.map(|t| vocab.encode_stream(&tokenize_lines(t))),
            vocab,
            char_vocab,
        })
    }

    pub fn load(cfg: &RunConfig) -> Result<Self, PipelineError> {
        let train = cfg.train_path.as_deref().ok_or(PipelineError::MissingPath("train"))?;
        let valid = cfg.valid_path.as_deref().ok_or(PipelineError::MissingPath("valid"))?;
        let test = cfg.test_path.as_deref().map(read_text).transpose()?;
        Self::from_texts(&read_text(train)?, &read_text(valid)?, test.as_deref(), cfg.vocab_size)
    }

    /// Re-encode an extra split with this vocabulary.
    pub fn encode(&self, text: &str) -> TokenStream {
        self.vocab.encode_stream(&tokenize_lines(text))
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub checkpoint: Checkpoint<f32>,
    pub log: TrainLog,
    pub valid: EvalReport,
    pub test: Option<EvalReport>,
    pub param_count: u64,
}

/// Train per `cfg`, score validation (and test, when present) and, with an
/// output directory, write `config.txt`, `train.log` and `model.ckpt` there.
pub fn run_training(
    cfg: &RunConfig,
    data: &PreparedData,
    out: Option<&Path>,
    progress: &mut dyn FnMut(&EpochRecord),
) -> Result<RunResult, PipelineError> {
    cfg.validate().map_err(|(_, msg)| PipelineError::Config(msg))?;
    let log_path = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|source| PipelineError::Io {
                path: dir.to_path_buf(),
                source,
            })?;
            write_text(&dir.join("config.txt"), &cfg.to_text())?;
            let p = dir.join("train.log");
            write_text(&p, "")?;
            Some(p)
        }
        None => None,
    };
    let encoder = char_encoder(cfg, &data.char_vocab);
    let mut trainer = Trainer::<f32>::new(&cfg.train, data.vocab.len(), &encoder, &data.train, &data.valid)?;
    while trainer.epochs_done() < cfg.train.total_epochs {
        let record = trainer.run_epoch()?;
        progress(record);
        if let Some(p) = &log_path {
            let mut f = OpenOptions::new()
                .append(true)
                .open(p)
                .and_then(|mut f| writeln!(f, "{}", record.to_line()).map(|_| f))
                .map_err(|source| PipelineError::Io { path: p.clone(), source })?;
            f.flush().ok();
        }
    }
    let log = trainer.log().clone();
    let params = trainer.params().clone();
    let unroll = cfg.train.unroll;
    let valid = perplexity(&params, &encoder, &data.valid, unroll, false)?;
    let test = data
        .test
        .as_ref()
        .map(|t| perplexity(&params, &encoder, t, unroll, false))
        .transpose()?;
    let shape = Checkpoint::<f32>::expected_shape(cfg, &data.vocab, &data.char_vocab);
    let count = param_count(&shape.size_spec(), false).expect("validated above");
    let checkpoint = Checkpoint {
        config: cfg.clone(),
        vocab: data.vocab.clone(),
        char_vocab: data.char_vocab.clone(),
        params,
    };
    if let Some(dir) = out {
        save_checkpoint(&checkpoint, &dir.join("model.ckpt"))?;
    }
    Ok(RunResult {
        checkpoint,
        log,
        valid,
        test,
        param_count: count,
    })
}
