//! SGD training with truncated BPTT, a flat-then-exponential learning-rate
//! schedule and global-norm clipping.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::char_encoding::{CharEncoder, CwConfigError};
use crate::corpus::{batchify, Batch, CorpusError, TokenStream};
use crate::evaluation::{perplexity, EvalError};
use crate::network::{
    axpy, clip_global_norm, loss_and_grads, DropoutMasks, ModelParams, ModelShape, NetworkError,
    NetworkState,
};
use crate::real::Real;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("invalid character configuration: {0}")]
    Config(#[from] CwConfigError),
    #[error("epoch {epoch} is outside 1..={total}")]
    EpochOutOfRange { epoch: usize, total: usize },
    #[error("non-finite training loss at epoch {epoch}, batch {batch} (lr {lr})")]
    NonFinite { epoch: usize, batch: usize, lr: f64 },
}

/// Optimization and network-size settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Hidden size; the total embedding size is the same.
    pub hidden: usize,
    pub layers: usize,
    pub batch_size: usize,
    pub unroll: usize,
    pub keep_prob: f64,
    pub init_range: f64,
    /// Epochs trained at learning rate 1.
    pub flat_epochs: usize,
    pub lr_decay: f64,
    pub total_epochs: usize,
    pub clip: f64,
    pub seed: u64,
}

impl TrainConfig {
    /// 2 × 200 units, 13 epochs.
    pub fn small() -> Self {
        Self {
            hidden: 200,
            layers: 2,
            batch_size: 20,
            unroll: 20,
            keep_prob: 0.75,
            init_range: 0.1,
            flat_epochs: 4,
            lr_decay: 0.5,
            total_epochs: 13,
            clip: 5.0,
            seed: 1,
        }
    }

    /// 2 × 650 units, 39 epochs.
    pub fn large() -> Self {
        Self {
            hidden: 650,
            layers: 2,
            batch_size: 20,
            unroll: 35,
            keep_prob: 0.5,
            init_range: 0.05,
            flat_epochs: 6,
            lr_decay: 0.8,
            total_epochs: 39,
            clip: 5.0,
            seed: 1,
        }
    }
}

/// Learning rate of epoch `epoch` (1-based): 1 for the first `flat_epochs`
/// epochs, then multiplied by `lr_decay` every epoch.
pub fn lr_at_epoch(epoch: usize, cfg: &TrainConfig) -> Result<f64, TrainError> {
    if epoch == 0 || epoch > cfg.total_epochs {
        return Err(TrainError::EpochOutOfRange {
            epoch,
            total: cfg.total_epochs,
        });
    }
    let decays = epoch.saturating_sub(cfg.flat_epochs);
    Ok(cfg.lr_decay.powi(decays as i32))
}

/// Every weight and bias i.i.d. uniform on `[-init_range, init_range]`.
pub fn init_params<F: Real, R: Rng + ?Sized>(shape: &ModelShape, init_range: f64, rng: &mut R) -> ModelParams<F> {
    let mut params = ModelParams::zeros(shape);
    for tensor in params.tensors_mut() {
        for v in tensor.iter_mut() {
            *v = F::from_f64(rng.random_range(-init_range..=init_range));
        }
    }
    params
}

/// `p ← p − lr · g` for every tensor.
pub fn sgd_step<F: Real>(params: &mut ModelParams<F>, grads: &ModelParams<F>, lr: F) {
    axpy(params, -lr, grads);
}

/// Independent sub-seeds from one master seed (splitmix64 finalizer).
pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    let mut z = master
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub const SEED_INIT: u64 = 1;
pub const SEED_DROPOUT: u64 = 2;
pub const SEED_CHARS: u64 = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_ppl: f64,
    pub valid_ppl: f64,
    pub seconds: f64,
}

impl EpochRecord {
    /// `epoch<TAB>lr<TAB>train_ppl<TAB>valid_ppl<TAB>seconds`
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{:.4}\t{:.4}\t{:.3}",
            self.epoch, self.lr, self.train_ppl, self.valid_ppl, self.seconds
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            writeln!(out, "{}", e.to_line()).unwrap();
        }
        out
    }

    /// Bitwise equality of everything except wall-clock time.
    pub fn same_numbers(&self, other: &TrainLog) -> bool {
        self.epochs.len() == other.epochs.len()
            && self.epochs.iter().zip(&other.epochs).all(|(a, b)| {
                a.epoch == b.epoch
                    && a.lr.to_bits() == b.lr.to_bits()
                    && a.train_ppl.to_bits() == b.train_ppl.to_bits()
                    && a.valid_ppl.to_bits() == b.valid_ppl.to_bits()
            })
    }
}

/// Owns one training run.
pub struct Trainer<'a, F> {
    cfg: TrainConfig,
    encoder: &'a CharEncoder,
    batches: Vec<Batch>,
    valid: &'a TokenStream,
    params: ModelParams<F>,
    log: TrainLog,
}

impl<'a, F: Real> Trainer<'a, F> {
    pub fn new(
        cfg: &TrainConfig,
        vocab_size: usize,
        encoder: &'a CharEncoder,
        train: &TokenStream,
        valid: &'a TokenStream,
    ) -> Result<Self, TrainError> {
        let cw = encoder.config();
        cw.check(cfg.hidden)?;
        let shape = ModelShape::with_chars(vocab_size, encoder.char_vocab().len(), cfg.hidden, cfg.layers, cw);
        let batches = batchify(train, cfg.batch_size, cfg.unroll, encoder)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SEED_INIT, 0));
        let params = init_params(&shape, cfg.init_range, &mut rng);
        Ok(Self {
            cfg: cfg.clone(),
            encoder,
            batches,
            valid,
            params,
            log: TrainLog::default(),
        })
    }

    pub fn params(&self) -> &ModelParams<F> {
        &self.params
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    pub fn epochs_done(&self) -> usize {
        self.log.epochs.len()
    }

    /// Train one epoch, then score the validation stream in eval mode.
    pub fn run_epoch(&mut self) -> Result<&EpochRecord, TrainError> {
        let epoch = self.epochs_done() + 1;
        let lr = lr_at_epoch(epoch, &self.cfg)?;
        let start = Instant::now();
        let shape = self.params.shape();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, SEED_DROPOUT, epoch as u64));
        let mut state = NetworkState::for_model(&self.params, self.cfg.batch_size);
        let mut total = 0.0f64;
        for (k, batch) in self.batches.iter().enumerate() {
            let masks = (self.cfg.keep_prob < 1.0)
                .then(|| DropoutMasks::sample(&mut rng, &shape, self.cfg.batch_size, self.cfg.keep_prob));
            let (loss, mut grads, next) = loss_and_grads(&self.params, batch, &state, masks.as_ref())?;
            if !loss.is_finite() {
                return Err(TrainError::NonFinite { epoch, batch: k, lr });
            }
            clip_global_norm(&mut grads, self.cfg.clip);
            sgd_step(&mut self.params, &grads, F::from_f64(lr));
            state = next;
            total += loss.to_f64();
        }
        let train_ppl = (total / self.batches.len() as f64).exp();
        let valid_ppl = perplexity(&self.params, self.encoder, self.valid, self.cfg.unroll, false)?.perplexity;
        self.log.epochs.push(EpochRecord {
            epoch,
            lr,
            train_ppl,
            valid_ppl,
            seconds: start.elapsed().as_secs_f64(),
        });
        Ok(self.log.epochs.last().expect("just pushed"))
    }

    pub fn run(mut self) -> Result<(ModelParams<F>, TrainLog), TrainError> {
        while self.epochs_done() < self.cfg.total_epochs {
            self.run_epoch()?;
        }
        Ok((self.params, self.log))
    }
}

/// Full fixed-budget run: `total_epochs` epochs, no early stopping.
pub fn train<F: Real>(
    cfg: &TrainConfig,
    vocab_size: usize,
    encoder: &CharEncoder,
    train: &TokenStream,
    valid: &TokenStream,
) -> Result<(ModelParams<F>, TrainLog), TrainError> {
    Trainer::new(cfg, vocab_size, encoder, train, valid)?.run()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::char_encoding::{CWConfig, CharOrder};
    use crate::corpus::{tokenize_lines, CharVocab, Vocabulary};
    use crate::network::ModelShape;

    #[test]
    fn schedules() {
        let small = TrainConfig::small();
        let got: Vec<f64> = (1..=13).map(|i| lr_at_epoch(i, &small).unwrap()).collect();
        let mut expected = vec![1.0; 4];
        let mut lr = 1.0;
        for _ in 5..=13 {
            lr *= 0.5;
            expected.push(lr);
        }
        assert_eq!(got, expected);
        assert_eq!(lr_at_epoch(6, &small).unwrap(), 0.25);

        let large = TrainConfig::large();
        assert_eq!(lr_at_epoch(6, &large).unwrap(), 1.0);
        assert_eq!(lr_at_epoch(7, &large).unwrap(), 0.8);
        assert!(matches!(lr_at_epoch(0, &large), Err(TrainError::EpochOutOfRange { .. })));
        assert!(lr_at_epoch(40, &large).is_err());
        for i in 2..=39 {
            assert!(lr_at_epoch(i, &large).unwrap() <= lr_at_epoch(i - 1, &large).unwrap());
        }
    }

    fn shape() -> ModelShape {
        ModelShape {
            vocab: 300,
            char_vocab: 20,
            hidden: 40,
            layers: 2,
            n_chars: 3,
            char_emb: 5,
            shared: false,
        }
    }

    #[test]
    fn init_bounds_and_determinism() {
        let a: ModelParams<f64> = init_params(&shape(), 0.1, &mut ChaCha8Rng::seed_from_u64(4));
        let b: ModelParams<f64> = init_params(&shape(), 0.1, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(a, b);
        let values: Vec<f64> = a.tensors().iter().flat_map(|t| t.2.iter().copied()).collect();
        assert!(values.len() > 40_000);
        assert!(values.iter().all(|v| v.abs() <= 0.1));

        // Moments of U(-r, r): mean 0, variance r^2 / 3.
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let target_var = 0.01 / 3.0;
        assert!(mean.abs() < 3.0 * (target_var / n).sqrt());
        assert!((var - target_var).abs() < 0.05 * target_var);
    }

    #[test]
    fn sgd_examples() {
        let s = ModelShape {
            vocab: 2,
            char_vocab: 0,
            hidden: 1,
            layers: 0,
            n_chars: 0,
            char_emb: 0,
            shared: false,
        };
        let mut p = ModelParams::<f64>::zeros(&s);
        p.embedding.word.fill(1.0);
        let mut g = ModelParams::<f64>::zeros(&s);
        g.embedding.word = ndarray::arr2(&[[0.5], [-0.5]]);
        let before = p.clone();
        sgd_step(&mut p, &g, 0.0);
        assert_eq!(p, before);
        sgd_step(&mut p, &g, 1.0);
        assert_eq!(p.embedding.word.column(0).to_vec(), [0.5, 1.5]);
        assert_eq!(p.softmax, before.softmax);
    }

    #[test]
    fn two_steps_equal_one_summed_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p0: ModelParams<f64> = init_params(&shape(), 1.0, &mut rng);
        let g1: ModelParams<f64> = init_params(&shape(), 1.0, &mut rng);
        let g2: ModelParams<f64> = init_params(&shape(), 1.0, &mut rng);
        let (a, b) = (0.25, 0.5);
        let mut twice = p0.clone();
        sgd_step(&mut twice, &g1, a);
        sgd_step(&mut twice, &g2, b);
        let mut combined = g1.clone();
        for (c, (x, y)) in combined
            .tensors_mut()
            .into_iter()
            .zip(g1.tensors().into_iter().zip(g2.tensors()))
        {
            for ((c, x), y) in c.iter_mut().zip(x.2).zip(y.2) {
                *c = a * x + b * y;
            }
        }
        let mut once = p0;
        sgd_step(&mut once, &combined, 1.0);
        for (x, y) in twice.tensors().iter().zip(once.tensors()) {
            for (u, v) in x.2.iter().zip(y.2) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    fn tiny_corpus() -> (Vocabulary, CharEncoder, TokenStream, TokenStream) {
        let sentences = [
            "the cat sat on the mat",
            "the dog sat on the log",
            "a cat and a dog met on the mat",
            "the bird sang on the log",
        ];
        let mut text = String::new();
        for i in 0..60 {
            writeln!(text, "{}", sentences[i % 4]).unwrap();
        }
        let tokens = tokenize_lines(&text);
        let vocab = Vocabulary::build(tokens.iter().copied(), 100).unwrap();
        let cv = CharVocab::build(tokens.iter().copied());
        let encoder = CharEncoder::new(CWConfig::new(2, 2, CharOrder::Forward), cv, 0);
        let stream = vocab.encode_stream(&tokens);
        let valid = vocab.encode_stream(&tokenize_lines("the cat sat on the log\nthe dog sang on the mat\n"));
        (vocab, encoder, stream, valid)
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            hidden: 16,
            batch_size: 4,
            unroll: 5,
            keep_prob: 0.9,
            flat_epochs: 2,
            total_epochs: 3,
            seed: 9,
            ..TrainConfig::small()
        }
    }

    #[test]
    fn zero_epochs_returns_initial_params() {
        let (vocab, enc, train_s, valid_s) = tiny_corpus();
        let cfg = TrainConfig { total_epochs: 0, ..tiny_config() };
        let trainer = Trainer::<f32>::new(&cfg, vocab.len(), &enc, &train_s, &valid_s).unwrap();
        let init = trainer.params().clone();
        let (params, log) = train::<f32>(&cfg, vocab.len(), &enc, &train_s, &valid_s).unwrap();
        assert_eq!(params, init);
        assert!(log.epochs.is_empty());
    }

    #[test]
    fn learning_happens_and_is_deterministic() {
        let (vocab, enc, train_s, valid_s) = tiny_corpus();
        let cfg = tiny_config();
        let trainer = Trainer::<f32>::new(&cfg, vocab.len(), &enc, &train_s, &valid_s).unwrap();
        let initial = perplexity(trainer.params(), &enc, &valid_s, cfg.unroll, false).unwrap().perplexity;
        let (_, log) = trainer.run().unwrap();
        assert_eq!(log.epochs.len(), 3);
        assert!(log.epochs[2].valid_ppl < initial, "{} vs {initial}", log.epochs[2].valid_ppl);
        assert!(log.epochs.iter().all(|e| e.valid_ppl.is_finite() && e.valid_ppl >= 1.0));
        assert_eq!(log.epochs.iter().map(|e| e.lr).collect::<Vec<_>>(), [1.0, 1.0, 0.5]);

        let (_, again) = train::<f32>(&cfg, vocab.len(), &enc, &train_s, &valid_s).unwrap();
        assert!(log.same_numbers(&again));
        let line = log.epochs[0].to_line();
        assert_eq!(line.split('\t').count(), 5);
    }

    #[test]
    fn update_only_touches_tensors_with_gradient() {
        let (vocab, enc, train_s, _) = tiny_corpus();
        let cfg = tiny_config();
        let s = ModelShape {
            vocab: vocab.len(),
            char_vocab: enc.char_vocab().len(),
            hidden: 16,
            layers: 2,
            n_chars: 2,
            char_emb: 2,
            shared: false,
        };
        let params: ModelParams<f64> = init_params(&s, 0.1, &mut ChaCha8Rng::seed_from_u64(1));
        let batches = batchify(&train_s, cfg.batch_size, cfg.unroll, &enc).unwrap();
        let (_, grads, _) =
            loss_and_grads(&params, &batches[0], &NetworkState::for_model(&params, cfg.batch_size), None).unwrap();
        let mut updated = params.clone();
        sgd_step(&mut updated, &grads, 1.0);
        for ((old, new), g) in params.tensors().iter().zip(updated.tensors()).zip(grads.tensors()) {
            for ((o, n), g) in old.2.iter().zip(new.2).zip(g.2) {
                assert_eq!(*g == 0.0, o == n);
            }
        }
    }
}
