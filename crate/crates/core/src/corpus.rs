//! Tokenization, vocabularies and truncated-BPTT batching.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::ops::Range;

use ndarray::{Array2, Array3};
use thiserror::Error;

use crate::char_encoding::CharEncoder;

pub const UNK: &str = "<unk>";
pub const EOS: &str = "<eos>";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("input too short: need at least {needed} tokens, got {got}")]
    InputTooShort { needed: usize, got: usize },
    #[error("vocabulary budget {0} leaves no room for <unk> and <eos>")]
    VocabTooSmall(usize),
    #[error("vocabulary file line {line}: {msg}")]
    VocabFile { line: usize, msg: String },
}

/// Split line-delimited text on runs of spaces/tabs, appending `<eos>` after
/// every line. Blank lines still produce an `<eos>`, except for a trailing
/// newline at end of input.
pub fn tokenize_lines(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for line in text.lines() {
        out.extend(line.split([' ', '\t', '\r']).filter(|t| !t.is_empty()));
        out.push(EOS);
    }
    out
}

fn is_special(token: &str) -> bool {
    token == UNK || token == EOS
}

/// Word vocabulary. Ids 0 and 1 are `<unk>` and `<eos>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    id_of: HashMap<String, u32>,
    surface_of: Vec<String>,
}

impl Vocabulary {
    pub const UNK_ID: u32 = 0;
    pub const EOS_ID: u32 = 1;

    /// Keep the `max_size - 2` most frequent tokens; ties at the cutoff go to
    /// the lexicographically smaller token.
    pub fn build<'a, I>(tokens: I, max_size: usize) -> Result<Self, CorpusError>
    where
        I: IntoIterator<Item = &'a str>,
    {
        if max_size < 2 {
            return Err(CorpusError::VocabTooSmall(max_size));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for tok in tokens {
            if !is_special(tok) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_unstable_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(max_size - 2);
        Ok(Self::from_surfaces(ranked.into_iter().map(|(t, _)| t.to_string())))
    }

    fn from_surfaces(real: impl IntoIterator<Item = String>) -> Self {
        let mut surface_of = vec![UNK.to_string(), EOS.to_string()];
        surface_of.extend(real);
        let id_of = surface_of
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i as u32))
            .collect();
        Self { id_of, surface_of }
    }

    /// Parse the one-token-per-line format written by [`Vocabulary::to_text`].
    pub fn from_text(text: &str) -> Result<Self, CorpusError> {
        let lines: Vec<&str> = text.lines().collect();
        let bad = |line: usize, msg: &str| CorpusError::VocabFile {
            line: line + 1,
            msg: msg.to_string(),
        };
        if lines.first() != Some(&UNK) {
            return Err(bad(0, "expected <unk>"));
        }
        if lines.get(1) != Some(&EOS) {
            return Err(bad(1, "expected <eos>"));
        }
        let mut seen = BTreeSet::new();
        for (i, tok) in lines.iter().enumerate().skip(2) {
            if tok.is_empty() || tok.contains([' ', '\t']) {
                return Err(bad(i, "empty or whitespace-bearing token"));
            }
            if is_special(tok) || !seen.insert(*tok) {
                return Err(bad(i, "duplicate token"));
            }
        }
        Ok(Self::from_surfaces(lines[2..].iter().map(|s| s.to_string())))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for s in &self.surface_of {
            writeln!(out, "{s}").unwrap();
        }
        out
    }

    pub fn len(&self) -> usize {
        self.surface_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surface_of.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.id_of.get(token).copied()
    }

    /// Never fails: out-of-vocabulary tokens map to `<unk>`.
    pub fn encode(&self, token: &str) -> u32 {
        self.id(token).unwrap_or(Self::UNK_ID)
    }

    pub fn surface(&self, id: u32) -> &str {
        &self.surface_of[id as usize]
    }

    pub fn surfaces(&self) -> &[String] {
        &self.surface_of
    }

    pub fn encode_stream(&self, tokens: &[&str]) -> TokenStream {
        TokenStream {
            ids: tokens.iter().map(|t| self.encode(t)).collect(),
            surfaces: tokens.iter().map(|t| t.to_string()).collect(),
        }
    }
}

/// Word ids together with the raw surface each id was encoded from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenStream {
    pub ids: Vec<u32>,
    pub surfaces: Vec<String>,
}

impl TokenStream {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Character vocabulary. Id 0 is padding, id 1 the unknown character; real
/// characters follow in code-point order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CharVocab {
    chars: Vec<char>,
    id_of: HashMap<char, u32>,
}

impl CharVocab {
    pub const PAD_ID: u32 = 0;
    pub const UNK_ID: u32 = 1;
    const FIRST_REAL: u32 = 2;

    /// Special tokens (`<unk>`, `<eos>`) contribute no characters.
    pub fn build<'a, I>(surfaces: I) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let set: BTreeSet<char> = surfaces
            .into_iter()
            .filter(|s| !is_special(s))
            .flat_map(str::chars)
            .collect();
        Self::from_chars(set.into_iter().collect())
    }

    pub fn from_chars(chars: Vec<char>) -> Self {
        let id_of = chars
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, i as u32 + Self::FIRST_REAL))
            .collect();
        Self { chars, id_of }
    }

    /// Total size C including the two specials.
    pub fn len(&self) -> usize {
        self.chars.len() + Self::FIRST_REAL as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn real_count(&self) -> usize {
        self.chars.len()
    }

    pub fn real_ids(&self) -> Range<u32> {
        Self::FIRST_REAL..self.len() as u32
    }

    pub fn encode(&self, c: char) -> u32 {
        self.id_of.get(&c).copied().unwrap_or(Self::UNK_ID)
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn char_of(&self, id: u32) -> Option<char> {
        id.checked_sub(Self::FIRST_REAL)
            .and_then(|i| self.chars.get(i as usize).copied())
    }
}

/// One truncated-BPTT block. `char_inputs[[b, t, k]]` is the k-th character
/// slot of `inputs[[b, t]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Array2<u32>,
    pub char_inputs: Array3<u32>,
    pub targets: Array2<u32>,
}

impl Batch {
    pub fn batch_size(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn unroll(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn n_chars(&self) -> usize {
        self.char_inputs.shape()[2]
    }

    /// Build a block from explicit lane start offsets into an encoded stream.
    fn gather(ids: &[u32], chars: &[u32], n: usize, starts: &[usize], unroll: usize) -> Self {
        let b = starts.len();
        let inputs = Array2::from_shape_fn((b, unroll), |(i, t)| ids[starts[i] + t]);
        let targets = Array2::from_shape_fn((b, unroll), |(i, t)| ids[starts[i] + t + 1]);
        let char_inputs =
            Array3::from_shape_fn((b, unroll, n), |(i, t, k)| chars[(starts[i] + t) * n + k]);
        Self {
            inputs,
            char_inputs,
            targets,
        }
    }
}

/// Split the stream into `batch_size` contiguous lanes and cut them into
/// consecutive `[batch_size × unroll]` blocks. Tokens that do not fill a lane
/// or a whole block are dropped.
pub fn batchify(
    stream: &TokenStream,
    batch_size: usize,
    unroll: usize,
    encoder: &CharEncoder,
) -> Result<Vec<Batch>, CorpusError> {
    assert!(batch_size > 0 && unroll > 0, "batch_size and unroll must be positive");
    let needed = batch_size * (unroll + 1);
    if stream.len() < needed {
        return Err(CorpusError::InputTooShort {
            needed,
            got: stream.len(),
        });
    }
    let chars = encoder.encode_stream(stream);
    let lane = stream.len() / batch_size;
    let count = (lane - 1) / unroll;
    Ok((0..count)
        .map(|k| {
            let starts: Vec<usize> = (0..batch_size).map(|b| b * lane + k * unroll).collect();
            Batch::gather(&stream.ids, &chars, encoder.n_chars(), &starts, unroll)
        })
        .collect())
}

/// Batch-size-1 blocks covering every next-token target of the stream; the
/// last block may be shorter than `unroll`.
pub fn sequential_batches(stream: &TokenStream, unroll: usize, encoder: &CharEncoder) -> Vec<Batch> {
    assert!(unroll > 0, "unroll must be positive");
    if stream.len() < 2 {
        return Vec::new();
    }
    let chars = encoder.encode_stream(stream);
    let positions = stream.len() - 1;
    (0..positions)
        .step_by(unroll)
        .map(|start| {
            let len = unroll.min(positions - start);
            Batch::gather(&stream.ids, &chars, encoder.n_chars(), &[start], len)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::char_encoding::CWConfig;

    fn word_encoder() -> CharEncoder {
        CharEncoder::new(CWConfig::word_level(), CharVocab::build(["ab"]), 0)
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize_lines("the cat sat\n"), ["the", "cat", "sat", EOS]);
        assert!(tokenize_lines("").is_empty());
        assert_eq!(tokenize_lines("a b\nc\n"), ["a", "b", EOS, "c", EOS]);
        assert_eq!(tokenize_lines("  a \t\tb  \r\n"), ["a", "b", EOS]);
    }

    #[test]
    fn vocab_smaller_than_budget() {
        let toks = ["a", "b", "a", "a"];
        let v = Vocabulary::build(toks, 10).unwrap();
        assert_eq!(v.len(), 4);
        assert_eq!(v.surfaces(), [UNK, EOS, "a", "b"]);
    }

    #[test]
    fn vocab_cutoff_tie_break() {
        // Frequencies a=2, b=2, c=1 with room for two real tokens: brute-force
        // ranking by (-count, token) gives [a, b, c].
        let toks = ["c", "b", "a", "b", "a"];
        let mut ranked: Vec<(&str, usize)> = ["a", "b", "c"]
            .iter()
            .map(|w| (*w, toks.iter().filter(|t| *t == w).count()))
            .collect();
        ranked.sort_by(|x, y| y.1.cmp(&x.1).then(x.0.cmp(y.0)));
        let expected: Vec<&str> = ranked[..2].iter().map(|p| p.0).collect();
        assert_eq!(expected, ["a", "b"]);

        let v = Vocabulary::build(toks, 4).unwrap();
        assert_eq!(&v.surfaces()[2..], expected.as_slice());
        assert_eq!(v.encode("c"), Vocabulary::UNK_ID);
    }

    #[test]
    fn vocab_rejects_tiny_budget() {
        assert!(matches!(
            Vocabulary::build(["a"], 1),
            Err(CorpusError::VocabTooSmall(1))
        ));
    }

    #[test]
    fn specials_in_text_are_not_types() {
        let v = Vocabulary::build(["<unk>", "<unk>", "x", "<eos>"], 10).unwrap();
        assert_eq!(v.len(), 3);
        assert_eq!(v.encode("<unk>"), Vocabulary::UNK_ID);
        assert_eq!(v.encode("<eos>"), Vocabulary::EOS_ID);
    }

    #[test]
    fn vocab_file_round_trip_and_errors() {
        let v = Vocabulary::build(["x", "y", "y"], 10).unwrap();
        assert_eq!(Vocabulary::from_text(&v.to_text()).unwrap(), v);
        let err = Vocabulary::from_text("<eos>\n<unk>\n").unwrap_err();
        assert!(matches!(err, CorpusError::VocabFile { line: 1, .. }));
        let err = Vocabulary::from_text("<unk>\n<eos>\na\na\n").unwrap_err();
        assert!(matches!(err, CorpusError::VocabFile { line: 4, .. }));
    }

    #[test]
    fn char_vocab_examples() {
        let cv = CharVocab::build(["abca"]);
        assert_eq!(cv.chars(), ['a', 'b', 'c']);
        assert_eq!(cv.len(), 5);
        assert_eq!(cv.real_count(), 3);
        assert_eq!(cv.encode('z'), CharVocab::UNK_ID);
        assert_ne!(CharVocab::PAD_ID, CharVocab::UNK_ID);

        let cased = CharVocab::build(["Café", "café"]);
        assert_ne!(cased.encode('C'), cased.encode('c'));
        assert_eq!(cased.real_count(), 5);
        assert_eq!(CharVocab::build(["<unk>", "<eos>"]).real_count(), 0);
    }

    #[test]
    fn batch_count_with_target_shift() {
        // 101 ids, 2 lanes of 50; each lane yields 49 (input, target) pairs, so
        // floor(49 / 5) = 9 full blocks.
        let toks: Vec<String> = (0..101).map(|i| format!("w{i}")).collect();
        let refs: Vec<&str> = toks.iter().map(String::as_str).collect();
        let vocab = Vocabulary::build(refs.iter().copied(), 200).unwrap();
        let stream = vocab.encode_stream(&refs);
        let batches = batchify(&stream, 2, 5, &word_encoder()).unwrap();
        assert_eq!(batches.len(), 9);
        for b in &batches {
            assert_eq!(b.inputs.dim(), (2, 5));
            assert_eq!(b.char_inputs.shape(), [2, 5, 0]);
        }
    }

    #[test]
    fn minimal_stream_gives_one_batch() {
        let vocab = Vocabulary::build(["a", "b"], 10).unwrap();
        let stream = vocab.encode_stream(&["a", "b"]);
        let batches = batchify(&stream, 1, 1, &word_encoder()).unwrap();
        assert_eq!(batches.len(), 1);
        assert_eq!(batches[0].targets[[0, 0]], vocab.encode("b"));

        let short = vocab.encode_stream(&["a"]);
        assert!(matches!(
            batchify(&short, 1, 1, &word_encoder()),
            Err(CorpusError::InputTooShort { needed: 2, got: 1 })
        ));
    }

    #[test]
    fn lanes_are_contiguous_across_batches() {
        let toks: Vec<String> = (0..64).map(|i| format!("t{i}")).collect();
        let refs: Vec<&str> = toks.iter().map(String::as_str).collect();
        let vocab = Vocabulary::build(refs.iter().copied(), 100).unwrap();
        let stream = vocab.encode_stream(&refs);
        let batches = batchify(&stream, 3, 4, &word_encoder()).unwrap();
        for b in 0..3 {
            let lane: Vec<u32> = batches
                .iter()
                .flat_map(|x| x.inputs.row(b).to_vec())
                .collect();
            let lane_start = b * (64 / 3);
            assert_eq!(lane, stream.ids[lane_start..lane_start + lane.len()]);
            for (k, x) in batches.iter().enumerate() {
                for t in 0..4 {
                    let next = if t + 1 < 4 {
                        x.inputs[[b, t + 1]]
                    } else if k + 1 < batches.len() {
                        batches[k + 1].inputs[[b, 0]]
                    } else {
                        stream.ids[lane_start + lane.len()]
                    };
                    assert_eq!(x.targets[[b, t]], next);
                }
            }
        }
    }

    #[test]
    fn sequential_batches_cover_every_target() {
        let vocab = Vocabulary::build(["a", "b", "c"], 10).unwrap();
        let stream = vocab.encode_stream(&["a", "b", "c", "a", "b", "c", "a"]);
        let blocks = sequential_batches(&stream, 4, &word_encoder());
        let targets: Vec<u32> = blocks.iter().flat_map(|b| b.targets.iter().copied()).collect();
        assert_eq!(targets, stream.ids[1..]);
        assert_eq!(blocks.iter().map(Batch::unroll).collect::<Vec<_>>(), [4, 2]);
    }
}
