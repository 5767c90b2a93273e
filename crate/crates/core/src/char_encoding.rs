//! Fixed-length character slots for a word's surface form.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::{CharVocab, TokenStream, Vocabulary, EOS, UNK};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum CharOrder {
    /// Word-initial characters, in reading order.
    #[default]
    Forward,
    /// Word-final characters, last character first.
    Backward,
    /// First half of the slots forward, second half backward.
    Both,
}

impl FromStr for CharOrder {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "forward" => Ok(Self::Forward),
            "backward" => Ok(Self::Backward),
            "both" => Ok(Self::Both),
            other => Err(format!("unknown character order `{other}` (forward|backward|both)")),
        }
    }
}

impl fmt::Display for CharOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Forward => "forward",
            Self::Backward => "backward",
            Self::Both => "both",
        })
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CwConfigError {
    #[error("char_order = both needs an even number of character slots, got {0}")]
    OddBoth(usize),
    #[error("character part {n} x {char_emb} = {} must be smaller than the embedding size {embedding}", n * char_emb)]
    CharsTooWide {
        n: usize,
        char_emb: usize,
        embedding: usize,
    },
    #[error("character embedding size must be positive when characters are used")]
    ZeroCharEmb,
}

/// Character-word architecture knobs. `n_chars == 0` is the pure word model.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CWConfig {
    pub n_chars: usize,
    pub char_emb: usize,
    pub order: CharOrder,
    pub shared_weights: bool,
    /// Take characters from the raw surface of out-of-vocabulary tokens
    /// instead of padding them out.
    pub use_oov_surfaces: bool,
    /// Replace real characters by uniformly drawn ones, fixed per surface.
    pub random_control: bool,
    /// Upper bound of the random "word" length; 0 means `n_chars`.
    pub random_max_len: usize,
}

impl CWConfig {
    pub fn word_level() -> Self {
        Self::default()
    }

    pub fn new(n_chars: usize, char_emb: usize, order: CharOrder) -> Self {
        Self {
            n_chars,
            char_emb,
            order,
            ..Self::default()
        }
    }

    /// Width of the concatenated character part.
    pub fn char_width(&self) -> usize {
        self.n_chars * self.char_emb
    }

    pub fn check(&self, embedding: usize) -> Result<(), CwConfigError> {
        if self.n_chars == 0 {
            return Ok(());
        }
        if self.char_emb == 0 {
            return Err(CwConfigError::ZeroCharEmb);
        }
        if self.order == CharOrder::Both && self.n_chars % 2 == 1 {
            return Err(CwConfigError::OddBoth(self.n_chars));
        }
        if self.char_width() >= embedding {
            return Err(CwConfigError::CharsTooWide {
                n: self.n_chars,
                char_emb: self.char_emb,
                embedding,
            });
        }
        Ok(())
    }

    pub fn effective_random_max_len(&self) -> usize {
        if self.random_max_len == 0 {
            self.n_chars.max(1)
        } else {
            self.random_max_len
        }
    }
}

/// Character ids for `surface` in exactly `n` slots, padded at the end.
pub fn char_sequence(surface: &str, n: usize, order: CharOrder, cv: &CharVocab) -> Vec<u32> {
    let mut out = Vec::with_capacity(n);
    match order {
        CharOrder::Forward => push_forward(&mut out, surface, n, cv),
        CharOrder::Backward => push_backward(&mut out, surface, n, cv),
        CharOrder::Both => {
            let front = n / 2;
            push_forward(&mut out, surface, front, cv);
            push_backward(&mut out, surface, n - front, cv);
        }
    }
    out
}

fn push_forward(out: &mut Vec<u32>, surface: &str, slots: usize, cv: &CharVocab) {
    let start = out.len();
    out.extend(surface.chars().take(slots).map(|c| cv.encode(c)));
    out.resize(start + slots, CharVocab::PAD_ID);
}

fn push_backward(out: &mut Vec<u32>, surface: &str, slots: usize, cv: &CharVocab) {
    let start = out.len();
    out.extend(surface.chars().rev().take(slots).map(|c| cv.encode(c)));
    out.resize(start + slots, CharVocab::PAD_ID);
}

/// A random "word": length uniform on `[1, max_len]`, characters uniform over
/// the real (non-special) ids, padded to `n`.
pub fn random_char_sequence<R: Rng + ?Sized>(
    rng: &mut R,
    n: usize,
    max_len: usize,
    cv: &CharVocab,
) -> Vec<u32> {
    assert!(max_len >= 1, "max_len must be at least 1");
    assert!(cv.real_count() >= 1, "character vocabulary has no real characters");
    let len = rng.random_range(1..=max_len);
    let real = cv.real_ids();
    let mut out: Vec<u32> = (0..len.min(n))
        .map(|_| rng.random_range(real.clone()))
        .collect();
    out.resize(n, CharVocab::PAD_ID);
    out
}

/// FNV-1a; stable across platforms and releases, unlike `DefaultHasher`.
fn stable_hash(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Turns (word id, surface) pairs into character slots according to a
/// [`CWConfig`].
#[derive(Debug, Clone)]
pub struct CharEncoder {
    cfg: CWConfig,
    cv: CharVocab,
    seed: u64,
}

impl CharEncoder {
    /// `seed` only matters in random-control mode.
    pub fn new(cfg: CWConfig, cv: CharVocab, seed: u64) -> Self {
        Self { cfg, cv, seed }
    }

    pub fn config(&self) -> &CWConfig {
        &self.cfg
    }

    pub fn char_vocab(&self) -> &CharVocab {
        &self.cv
    }

    pub fn n_chars(&self) -> usize {
        self.cfg.n_chars
    }

    /// The surface characters are read from, if any.
    fn source<'a>(&self, id: u32, surface: &'a str) -> Option<&'a str> {
        let usable = !surface.is_empty() && surface != UNK && surface != EOS;
        match id {
            Vocabulary::EOS_ID => None,
            Vocabulary::UNK_ID if !self.cfg.use_oov_surfaces => None,
            _ if usable => Some(surface),
            _ => None,
        }
    }

    pub fn encode_token(&self, id: u32, surface: &str) -> Vec<u32> {
        let n = self.cfg.n_chars;
        match self.source(id, surface) {
            None => vec![CharVocab::PAD_ID; n],
            Some(s) if self.cfg.random_control => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ stable_hash(s));
                random_char_sequence(&mut rng, n, self.cfg.effective_random_max_len(), &self.cv)
            }
            Some(s) => char_sequence(s, n, self.cfg.order, &self.cv),
        }
    }

    /// Flattened `[len × n]` character ids for a whole stream.
    pub fn encode_stream(&self, stream: &TokenStream) -> Vec<u32> {
        let n = self.cfg.n_chars;
        if n == 0 {
            return Vec::new();
        }
        let mut cache: HashMap<(u32, &str), Vec<u32>> = HashMap::new();
        let mut out = Vec::with_capacity(stream.len() * n);
        for (&id, surface) in stream.ids.iter().zip(&stream.surfaces) {
            let seq = cache
                .entry((id, surface.as_str()))
                .or_insert_with(|| self.encode_token(id, surface));
            out.extend_from_slice(seq);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn alpha() -> CharVocab {
        CharVocab::build(["abcdefghijklmnopqrstuvwxyz"])
    }

    fn ids(cv: &CharVocab, s: &str) -> Vec<u32> {
        s.chars()
            .map(|c| if c == '_' { CharVocab::PAD_ID } else { cv.encode(c) })
            .collect()
    }

    #[test]
    fn order_examples() {
        let cv = alpha();
        assert_eq!(char_sequence("cat", 5, CharOrder::Forward, &cv), ids(&cv, "cat__"));
        assert_eq!(char_sequence("felicity", 5, CharOrder::Forward, &cv), ids(&cv, "felic"));
        assert_eq!(char_sequence("cat", 5, CharOrder::Backward, &cv), ids(&cv, "tac__"));
        assert_eq!(char_sequence("overfit", 6, CharOrder::Both, &cv), ids(&cv, "ovetif"));
        assert_eq!(char_sequence("ab", 6, CharOrder::Both, &cv), ids(&cv, "ab_ba_"));
        assert!(char_sequence("cat", 0, CharOrder::Backward, &cv).is_empty());
    }

    #[test]
    fn unseen_characters_map_to_unk() {
        let cv = CharVocab::build(["ab"]);
        assert_eq!(
            char_sequence("aXb", 3, CharOrder::Forward, &cv),
            [cv.encode('a'), CharVocab::UNK_ID, cv.encode('b')]
        );
    }

    #[test]
    fn config_checks() {
        assert_eq!(CWConfig::word_level().check(1), Ok(()));
        assert_eq!(CWConfig::new(3, 5, CharOrder::Both).check(200), Err(CwConfigError::OddBoth(3)));
        assert!(matches!(
            CWConfig::new(30, 25, CharOrder::Forward).check(200),
            Err(CwConfigError::CharsTooWide { .. })
        ));
        assert!(CWConfig::new(8, 25, CharOrder::Forward).check(200).is_err());
        assert_eq!(CWConfig::new(7, 25, CharOrder::Forward).check(200), Ok(()));
        assert_eq!(CWConfig::new(2, 0, CharOrder::Forward).check(200), Err(CwConfigError::ZeroCharEmb));
    }

    #[test]
    fn specials_and_oov_surfaces() {
        let cv = alpha();
        let mut cfg = CWConfig::new(3, 2, CharOrder::Forward);
        let enc = CharEncoder::new(cfg.clone(), cv.clone(), 0);
        let pads = vec![CharVocab::PAD_ID; 3];
        assert_eq!(enc.encode_token(Vocabulary::EOS_ID, "<eos>"), pads);
        assert_eq!(enc.encode_token(Vocabulary::UNK_ID, "zebra"), pads);
        assert_eq!(enc.encode_token(5, "dog"), ids(&cv, "dog"));

        cfg.use_oov_surfaces = true;
        let enc = CharEncoder::new(cfg, cv.clone(), 0);
        assert_eq!(enc.encode_token(Vocabulary::UNK_ID, "zebra"), ids(&cv, "zeb"));
        assert_eq!(enc.encode_token(Vocabulary::UNK_ID, "<unk>"), pads);
    }

    #[test]
    fn random_control_is_fixed_per_surface() {
        let cv = alpha();
        let mut cfg = CWConfig::new(4, 2, CharOrder::Forward);
        cfg.random_control = true;
        let enc = CharEncoder::new(cfg.clone(), cv.clone(), 11);
        let a = enc.encode_token(7, "whale");
        assert_eq!(a, enc.encode_token(7, "whale"));
        assert_eq!(a.len(), 4);
        assert_ne!(a, char_sequence("whale", 4, CharOrder::Forward, &cv));
        let other_seed = CharEncoder::new(cfg, cv, 12);
        let differs = ["whale", "ship", "sea", "oar", "mast"]
            .iter()
            .any(|w| enc.encode_token(7, w) != other_seed.encode_token(7, w));
        assert!(differs);
    }

    #[test]
    fn random_sequence_deterministic_and_in_range() {
        let cv = alpha();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50)
                .map(|_| random_char_sequence(&mut rng, 6, 10, &cv))
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(3), draw(3));
        for seq in draw(3) {
            assert_eq!(seq.len(), 6);
            let real = seq.iter().take_while(|&&c| c != CharVocab::PAD_ID).count();
            assert!(real >= 1);
            assert!(seq[..real].iter().all(|c| cv.real_ids().contains(c)));
            assert!(seq[real..].iter().all(|&c| c == CharVocab::PAD_ID));
        }
    }

    #[test]
    fn random_characters_are_uniform() {
        // Monte-Carlo oracle: 100k draws, max_len 10, n large enough to keep
        // every drawn character. Each count ~ Binomial(total, 1/26).
        let cv = alpha();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut counts = vec![0u64; cv.len()];
        let mut lengths = [0u64; 11];
        for _ in 0..100_000 {
            let seq = random_char_sequence(&mut rng, 10, 10, &cv);
            let real: Vec<_> = seq.into_iter().filter(|&c| c != CharVocab::PAD_ID).collect();
            lengths[real.len()] += 1;
            for c in real {
                counts[c as usize] += 1;
            }
        }
        let total: u64 = counts.iter().sum();
        let p = 1.0 / cv.real_count() as f64;
        let mean = total as f64 * p;
        let sd = (total as f64 * p * (1.0 - p)).sqrt();
        for id in cv.real_ids() {
            assert!((counts[id as usize] as f64 - mean).abs() < 3.0 * sd, "char {id}");
        }
        assert_eq!(counts[0] + counts[1], 0);
        let lsd = (100_000.0f64 * 0.1 * 0.9).sqrt();
        for len in 1..=10 {
            assert!((lengths[len] as f64 - 10_000.0).abs() < 3.0 * lsd);
        }
    }

    proptest! {
        #[test]
        fn slot_properties(word in "[a-z]{1,12}", n in 1usize..10) {
            let cv = alpha();
            let fwd = char_sequence(&word, n, CharOrder::Forward, &cv);
            let bwd = char_sequence(&word, n, CharOrder::Backward, &cv);
            prop_assert_eq!(fwd.len(), n);
            prop_assert_eq!(bwd.len(), n);
            let chars: Vec<u32> = word.chars().map(|c| cv.encode(c)).collect();
            if chars.len() >= n {
                prop_assert_eq!(&fwd[..], &chars[..n]);
                let mut suffix = chars[chars.len() - n..].to_vec();
                suffix.reverse();
                prop_assert_eq!(&bwd[..], &suffix[..]);
            }
            if chars.len() == n {
                let mut rev = fwd.clone();
                rev.reverse();
                prop_assert_eq!(&bwd, &rev);
            }
            let both = char_sequence(&word, 2 * n, CharOrder::Both, &cv);
            prop_assert_eq!(&both[..n], &fwd[..]);
            prop_assert_eq!(&both[n..], &bwd[..]);
        }
    }
}
