//! Perplexity, relative improvements and the OOV follow-up comparison.

use std::fmt::Write as _;

use thiserror::Error;

use crate::char_encoding::CharEncoder;
use crate::corpus::{sequential_batches, TokenStream, Vocabulary};
use crate::network::{forward, target_log_probs, time_major_targets, ModelParams, NetworkError, NetworkState};
use crate::real::Real;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),
    #[error("stream has {0} tokens; at least 2 are needed to score a prediction")]
    TooShort(usize),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

/// Probability differences below this count as ties.
pub const TIE_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub tokens: usize,
    pub mean_nll: f64,
    pub perplexity: f64,
    /// How the stream was fed to the network.
    pub layout: String,
    /// Natural-log probability of every scored target, in stream order.
    pub trace: Option<Vec<f64>>,
}

impl EvalReport {
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        writeln!(out, "tokens = {}", self.tokens).unwrap();
        writeln!(out, "mean_nll = {:.6}", self.mean_nll).unwrap();
        writeln!(out, "perplexity = {:.4}", self.perplexity).unwrap();
        writeln!(out, "layout = {}", self.layout).unwrap();
        out
    }

    /// Single-line machine-readable form.
    pub fn summary_line(&self) -> String {
        format!(
            "tokens={} mean_nll={:.6} ppl={:.4} layout={}",
            self.tokens, self.mean_nll, self.perplexity, self.layout
        )
    }
}

fn check_vocab<F: Real>(params: &ModelParams<F>, encoder: &CharEncoder, stream: &TokenStream) -> Result<(), EvalError> {
    let v = params.vocab_size();
    if params.embedding.vocab_size() != v {
        return Err(EvalError::VocabMismatch(format!(
            "embedding has {} rows, softmax {v} columns",
            params.embedding.vocab_size()
        )));
    }
    if let Some(bad) = stream.ids.iter().find(|&&id| id as usize >= v) {
        return Err(EvalError::VocabMismatch(format!("word id {bad} outside model vocabulary of {v}")));
    }
    if params.embedding.n_chars != encoder.n_chars() {
        return Err(EvalError::VocabMismatch(format!(
            "model has {} character slots, encoder {}",
            params.embedding.n_chars,
            encoder.n_chars()
        )));
    }
    if let Some(t) = params.embedding.chars.first() {
        if t.nrows() != encoder.char_vocab().len() {
            return Err(EvalError::VocabMismatch(format!(
                "model has {} character rows, character vocabulary {}",
                t.nrows(),
                encoder.char_vocab().len()
            )));
        }
    }
    Ok(())
}

/// Log-probability of every next token, scoring the stream with batch size 1
/// and the state carried across blocks of `unroll` steps.
pub fn log_prob_trace<F: Real>(
    params: &ModelParams<F>,
    encoder: &CharEncoder,
    stream: &TokenStream,
    unroll: usize,
) -> Result<Vec<f64>, EvalError> {
    check_vocab(params, encoder, stream)?;
    if stream.len() < 2 {
        return Err(EvalError::TooShort(stream.len()));
    }
    let mut state = NetworkState::for_model(params, 1);
    let mut trace = Vec::with_capacity(stream.len() - 1);
    for batch in sequential_batches(stream, unroll, encoder) {
        let fwd = forward(params, &batch, &state, None)?;
        let lp = target_log_probs(&fwd.logits, &time_major_targets(&batch));
        trace.extend(lp.into_iter().map(Real::to_f64));
        state = fwd.state;
    }
    Ok(trace)
}

/// `exp` of the mean next-token negative log-likelihood over the whole
/// stream, `<eos>` included.
pub fn perplexity<F: Real>(
    params: &ModelParams<F>,
    encoder: &CharEncoder,
    stream: &TokenStream,
    unroll: usize,
    keep_trace: bool,
) -> Result<EvalReport, EvalError> {
    let trace = log_prob_trace(params, encoder, stream, unroll)?;
    let mean_nll = -trace.iter().sum::<f64>() / trace.len() as f64;
    Ok(EvalReport {
        tokens: trace.len(),
        mean_nll,
        perplexity: mean_nll.exp(),
        layout: format!("batch=1 unroll={unroll} carried-state"),
        trace: keep_trace.then_some(trace),
    })
}

/// Percentage by which `candidate` improves on `baseline`; positive is better.
pub fn relative_improvement(candidate_ppl: f64, baseline_ppl: f64) -> f64 {
    assert!(baseline_ppl > 0.0, "baseline perplexity must be positive");
    100.0 * (baseline_ppl - candidate_ppl) / baseline_ppl
}

/// Percentage change of `candidate` relative to `reference`; negative means
/// lower perplexity.
pub fn relative_change(candidate_ppl: f64, reference_ppl: f64) -> f64 {
    -relative_improvement(candidate_ppl, reference_ppl)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OovReport {
    /// Positions whose input word is out of vocabulary.
    pub oov_occurrences: usize,
    pub cw_higher: usize,
    pub word_higher: usize,
    pub ties: usize,
}

impl OovReport {
    pub fn compared(&self) -> usize {
        self.cw_higher + self.word_higher + self.ties
    }

    pub fn to_key_values(&self) -> String {
        format!(
            "oov_occurrences = {}\ncw_higher = {}\nword_higher = {}\nties = {}\n",
            self.oov_occurrences, self.cw_higher, self.word_higher, self.ties
        )
    }

    pub fn summary_line(&self) -> String {
        format!(
            "oov={} cw_higher={} word_higher={} ties={}",
            self.oov_occurrences, self.cw_higher, self.word_higher, self.ties
        )
    }
}

/// A scorable model: parameters plus the character encoder they were trained with.
#[derive(Debug, Clone, Copy)]
pub struct ScoredModel<'a, F> {
    pub params: &'a ModelParams<F>,
    pub encoder: &'a CharEncoder,
}

/// At every position whose input word maps to `<unk>`, compare the two
/// models' probabilities of the observed next token.
pub fn oov_followup_analysis<F: Real>(
    cw: ScoredModel<'_, F>,
    word: ScoredModel<'_, F>,
    stream: &TokenStream,
    unroll: usize,
) -> Result<OovReport, EvalError> {
    if cw.params.vocab_size() != word.params.vocab_size() {
        return Err(EvalError::VocabMismatch(format!(
            "models disagree on vocabulary size ({} vs {})",
            cw.params.vocab_size(),
            word.params.vocab_size()
        )));
    }
    let mut report = OovReport {
        oov_occurrences: stream.ids.iter().filter(|&&id| id == Vocabulary::UNK_ID).count(),
        ..OovReport::default()
    };
    if stream.len() < 2 {
        return Ok(report);
    }
    let a = log_prob_trace(cw.params, cw.encoder, stream, unroll)?;
    let b = log_prob_trace(word.params, word.encoder, stream, unroll)?;
    for (pos, &id) in stream.ids[..stream.len() - 1].iter().enumerate() {
        if id != Vocabulary::UNK_ID {
            continue;
        }
        let (pa, pb) = (a[pos].exp(), b[pos].exp());
        if (pa - pb).abs() < TIE_EPSILON {
            report.ties += 1;
        } else if pa > pb {
            report.cw_higher += 1;
        } else {
            report.word_higher += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::char_encoding::CWConfig;
    use crate::corpus::CharVocab;
    use crate::network::ModelShape;
    use approx::assert_abs_diff_eq;

    fn word_shape(vocab: usize) -> ModelShape {
        ModelShape {
            vocab,
            char_vocab: 0,
            hidden: 3,
            layers: 1,
            n_chars: 0,
            char_emb: 0,
            shared: false,
        }
    }

    fn encoder() -> CharEncoder {
        CharEncoder::new(CWConfig::word_level(), CharVocab::build(["abc"]), 0)
    }

    fn stream(ids: &[u32]) -> TokenStream {
        TokenStream {
            ids: ids.to_vec(),
            surfaces: ids.iter().map(|i| format!("w{i}")).collect(),
        }
    }

    #[test]
    fn zero_model_has_perplexity_v() {
        let p = ModelParams::<f64>::zeros(&word_shape(9));
        let r = perplexity(&p, &encoder(), &stream(&[2, 3, 4, 5, 1, 2, 8]), 4, true).unwrap();
        assert_eq!(r.tokens, 6);
        assert_abs_diff_eq!(r.perplexity, 9.0, epsilon = 1e-12);
        assert_eq!(r.perplexity, r.mean_nll.exp());
        assert_eq!(r.trace.unwrap().len(), 6);
    }

    #[test]
    fn softmax_bias_only_model_by_hand() {
        // Zero weights leave only the softmax bias: p = softmax([0, 0, ln 2, ln 4]) = [1, 1, 2, 4] / 8.
        let mut p = ModelParams::<f64>::zeros(&word_shape(4));
        p.softmax.bias = ndarray::arr1(&[0.0, 0.0, 2f64.ln(), 4f64.ln()]);
        let s = stream(&[1, 3, 2, 3, 0]);
        let r = perplexity(&p, &encoder(), &s, 2, false).unwrap();
        let nll = -((4.0f64 / 8.0).ln() + (2.0f64 / 8.0).ln() + (4.0f64 / 8.0).ln() + (1.0f64 / 8.0).ln()) / 4.0;
        assert_abs_diff_eq!(r.mean_nll, nll, epsilon = 1e-12);
        assert_abs_diff_eq!(r.perplexity, nll.exp(), epsilon = 1e-12);
    }

    #[test]
    fn vocabulary_mismatch_and_short_streams() {
        let p = ModelParams::<f64>::zeros(&word_shape(4));
        assert!(matches!(
            perplexity(&p, &encoder(), &stream(&[1, 7]), 2, false),
            Err(EvalError::VocabMismatch(_))
        ));
        assert_eq!(perplexity(&p, &encoder(), &stream(&[1]), 2, false), Err(EvalError::TooShort(1)));
        let q = ModelParams::<f64>::zeros(&word_shape(5));
        let enc = encoder();
        let a = ScoredModel { params: &p, encoder: &enc };
        let b = ScoredModel { params: &q, encoder: &enc };
        assert!(oov_followup_analysis(a, b, &stream(&[0, 1]), 2).is_err());
    }

    #[test]
    fn improvements() {
        assert_abs_diff_eq!(relative_improvement(85.69, 88.39), 3.05, epsilon = 0.005);
        assert_eq!(relative_improvement(7.0, 7.0), 0.0);
        assert_eq!(relative_improvement(50.0, 100.0), 50.0);
        assert_eq!(relative_change(50.0, 100.0), -50.0);
        for (a, b) in [(1.0, 2.0), (3.0, 2.5), (80.0, 80.5)] {
            assert_eq!(relative_improvement(a, b) > 0.0, a < b);
            assert_eq!(relative_improvement(b, a) > 0.0, b < a);
        }
    }

    fn biased(vocab: usize, favourite: usize, strength: f64) -> ModelParams<f64> {
        let mut p = ModelParams::<f64>::zeros(&word_shape(vocab));
        p.softmax.bias[favourite] = strength;
        p
    }

    #[test]
    fn oov_identity_and_no_oov() {
        let enc = encoder();
        let p = biased(3, 2, 1.0);
        let m = ScoredModel { params: &p, encoder: &enc };
        let r = oov_followup_analysis(m, m, &stream(&[0, 2, 0, 1, 2]), 3).unwrap();
        assert_eq!(r, OovReport { oov_occurrences: 2, cw_higher: 0, word_higher: 0, ties: 2 });

        let r = oov_followup_analysis(m, m, &stream(&[1, 2, 2, 1]), 3).unwrap();
        assert_eq!(r, OovReport::default());
    }

    #[test]
    fn oov_constructed_oracle() {
        // Two real words plus specials; every <unk> is followed by word 2.
        // Model A puts more mass on word 2 than model B everywhere.
        let enc = encoder();
        let ids = [2, 0, 2, 3, 0, 2, 1, 0, 2, 3, 0];
        let followed = ids[..ids.len() - 1].iter().filter(|&&i| i == 0).count();
        let a = biased(4, 2, 3.0);
        let b = biased(4, 2, 1.0);
        let ma = ScoredModel { params: &a, encoder: &enc };
        let mb = ScoredModel { params: &b, encoder: &enc };
        let r = oov_followup_analysis(ma, mb, &stream(&ids), 4).unwrap();
        assert_eq!(r.cw_higher, followed);
        assert_eq!(r.oov_occurrences, 4);
        assert_eq!(r.compared(), followed);

        let swapped = oov_followup_analysis(mb, ma, &stream(&ids), 4).unwrap();
        assert_eq!((swapped.cw_higher, swapped.word_higher), (r.word_higher, r.cw_higher));
    }
}
