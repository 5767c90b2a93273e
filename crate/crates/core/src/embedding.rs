//! Word and character-word input embeddings, and parameter counting.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayViewMut1};
use thiserror::Error;

use crate::real::Real;

/// Embedding tables. Rows are vocabulary entries, so lookup is row selection.
///
/// The output vector is laid out as `[word part | char slot 0 | char slot 1 | ...]`,
/// each character slot `char_emb` wide. In shared mode every slot reads the same
/// table but keeps its own position in the output.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingParams<F> {
    pub word: Array2<F>,
    /// One `[C × char_emb]` table per slot, or a single table when shared.
    pub chars: Vec<Array2<F>>,
    pub n_chars: usize,
    pub shared: bool,
}

impl<F: Real> EmbeddingParams<F> {
    pub fn zeros(vocab: usize, word_size: usize, n_chars: usize, char_vocab: usize, char_emb: usize, shared: bool) -> Self {
        let tables = match (n_chars, shared) {
            (0, _) => 0,
            (_, true) => 1,
            (n, false) => n,
        };
        Self {
            word: Array2::zeros((vocab, word_size)),
            chars: (0..tables).map(|_| Array2::zeros((char_vocab, char_emb))).collect(),
            n_chars,
            shared,
        }
    }

    pub fn word_size(&self) -> usize {
        self.word.ncols()
    }

    pub fn char_emb(&self) -> usize {
        self.chars.first().map_or(0, |t| t.ncols())
    }

    /// Total width E.
    pub fn size(&self) -> usize {
        self.word_size() + self.n_chars * self.char_emb()
    }

    pub fn vocab_size(&self) -> usize {
        self.word.nrows()
    }

    /// Table backing character slot `k`.
    pub fn table(&self, k: usize) -> &Array2<F> {
        &self.chars[if self.shared { 0 } else { k }]
    }

    pub fn table_mut(&mut self, k: usize) -> &mut Array2<F> {
        let i = if self.shared { 0 } else { k };
        &mut self.chars[i]
    }

    pub fn embed_word(&self, word: u32) -> ArrayView1<'_, F> {
        self.word.row(word as usize)
    }

    pub fn embed_cw(&self, word: u32, chars: &[u32]) -> Array1<F> {
        let mut out = Array1::zeros(self.size());
        self.embed_into(word, chars, out.view_mut());
        out
    }

    pub fn embed_into(&self, word: u32, chars: &[u32], mut out: ArrayViewMut1<'_, F>) {
        assert_eq!(chars.len(), self.n_chars, "character slot count mismatch");
        let ew = self.word_size();
        let ec = self.char_emb();
        out.slice_mut(s![..ew]).assign(&self.embed_word(word));
        for (k, &c) in chars.iter().enumerate() {
            let start = ew + k * ec;
            out.slice_mut(s![start..start + ec])
                .assign(&self.table(k).row(c as usize));
        }
    }

    /// Scatter-add the gradient of one embedded vector back into the tables.
    pub fn accumulate_grad(&mut self, word: u32, chars: &[u32], grad: ArrayView1<'_, F>) {
        let ew = self.word_size();
        let ec = self.char_emb();
        self.word
            .row_mut(word as usize)
            .zip_mut_with(&grad.slice(s![..ew]), |w, &g| *w += g);
        for (k, &c) in chars.iter().enumerate() {
            let start = ew + k * ec;
            self.table_mut(k)
                .row_mut(c as usize)
                .zip_mut_with(&grad.slice(s![start..start + ec]), |w, &g| *w += g);
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ParamCountError {
    #[error("character part {n} x {char_emb} = {} must be smaller than the embedding size {embedding}", n * char_emb)]
    CharsTooWide {
        n: usize,
        char_emb: usize,
        embedding: usize,
    },
}

/// Sizes needed to count parameters. The hidden size equals `embedding`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SizeSpec {
    pub vocab: usize,
    pub embedding: usize,
    pub n_chars: usize,
    pub char_emb: usize,
    pub char_vocab: usize,
    pub shared: bool,
    pub layers: usize,
}

impl SizeSpec {
    pub fn word_level(vocab: usize, embedding: usize) -> Self {
        Self {
            vocab,
            embedding,
            n_chars: 0,
            char_emb: 0,
            char_vocab: 0,
            shared: false,
            layers: 2,
        }
    }
}

/// Number of trainable parameters.
///
/// With `embedding_only`, only the embedding tables are counted:
/// `V·E` for a word model, `V·(E − n·E_c) + n·C·E_c` with one character table
/// per slot, `V·(E − n·E_c) + C·E_c` with a shared table. Otherwise each LSTM
/// layer adds `4·(in + H + 1)·H` and the softmax `(H + 1)·V`.
pub fn param_count(spec: &SizeSpec, embedding_only: bool) -> Result<u64, ParamCountError> {
    let v = spec.vocab as u64;
    let e = spec.embedding as u64;
    let n = spec.n_chars as u64;
    let ec = spec.char_emb as u64;
    let c = spec.char_vocab as u64;
    if n > 0 && n * ec >= e {
        return Err(ParamCountError::CharsTooWide {
            n: spec.n_chars,
            char_emb: spec.char_emb,
            embedding: spec.embedding,
        });
    }
    let embedding = match (n, spec.shared) {
        (0, _) => v * e,
        (_, false) => v * (e - n * ec) + n * (c * ec),
        (_, true) => v * (e - n * ec) + c * ec,
    };
    if embedding_only {
        return Ok(embedding);
    }
    let h = e;
    let lstm: u64 = (0..spec.layers as u64)
        .map(|_| 4 * (e + h + 1) * h)
        .sum();
    Ok(embedding + lstm + (h + 1) * v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec(v: usize, e: usize, n: usize, ec: usize, c: usize, shared: bool) -> SizeSpec {
        SizeSpec {
            vocab: v,
            embedding: e,
            n_chars: n,
            char_emb: ec,
            char_vocab: c,
            shared,
            layers: 2,
        }
    }

    #[test]
    fn embedding_counts() {
        // 10_000 * 475; 10_000 * (650 - 250) + 10 * 48 * 25; 10_000 * 400 + 48 * 25.
        assert_eq!(param_count(&spec(10_000, 475, 0, 0, 0, false), true), Ok(4_750_000));
        assert_eq!(param_count(&spec(10_000, 650, 10, 25, 48, false), true), Ok(4_012_000));
        assert_eq!(param_count(&spec(10_000, 650, 10, 25, 48, true), true), Ok(4_001_200));
        assert_eq!(param_count(&spec(1, 1, 0, 0, 0, false), true), Ok(1));
        assert!(param_count(&spec(10, 200, 30, 25, 48, false), true).is_err());
        assert!(param_count(&spec(10, 200, 8, 25, 48, false), true).is_err());
    }

    #[test]
    fn full_count_adds_lstm_and_softmax() {
        // 2 * 4 * (200 + 200 + 1) * 200 + 201 * 10_000 on top of the 2_000_000 table.
        let full = param_count(&SizeSpec::word_level(10_000, 200), false).unwrap();
        assert_eq!(full, 2_000_000 + 641_600 + 2_010_000);
    }

    #[test]
    fn count_ordering() {
        for n in 1..=10 {
            let word = param_count(&spec(10_000, 650, 0, 0, 0, false), true).unwrap();
            let cw = param_count(&spec(10_000, 650, n, 25, 48, false), true).unwrap();
            let shared = param_count(&spec(10_000, 650, n, 25, 48, true), true).unwrap();
            // One slot means one table either way.
            assert!(cw < word, "n = {n}");
            if n == 1 {
                assert_eq!(shared, cw);
            } else {
                assert!(shared < cw, "n = {n}");
            }
        }
    }

    #[test]
    fn row_selection() {
        let mut p = EmbeddingParams::<f64>::zeros(4, 3, 0, 0, 0, false);
        p.word = Array::from_shape_fn((4, 3), |(i, j)| (i * 10 + j) as f64);
        assert_eq!(p.embed_word(2).to_vec(), [20.0, 21.0, 22.0]);

        let mut id = EmbeddingParams::<f64>::zeros(3, 3, 0, 0, 0, false);
        id.word = Array2::eye(3);
        assert_eq!(id.embed_word(1).to_vec(), [0.0, 1.0, 0.0]);
        assert_eq!(id.embed_cw(1, &[]), id.embed_word(1));
    }

    #[test]
    fn row_selection_matches_one_hot_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = EmbeddingParams::<f64>::zeros(5, 4, 0, 0, 0, false);
        p.word.mapv_inplace(|_| rng.random_range(-1.0..1.0));
        for id in 0..5u32 {
            let one_hot = Array1::from_shape_fn(5, |i| if i == id as usize { 1.0 } else { 0.0 });
            let mut product = Array1::<f64>::zeros(4);
            for j in 0..4 {
                for i in 0..5 {
                    product[j] += one_hot[i] * p.word[[i, j]];
                }
            }
            assert_eq!(p.embed_word(id).to_owned(), product);
        }
    }

    #[test]
    fn unshared_concatenation_by_hand() {
        // V=3, C=4, E_w=2, E_c=1, two unshared tables.
        let mut p = EmbeddingParams::<f64>::zeros(3, 2, 2, 4, 1, false);
        p.word = ndarray::arr2(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]);
        p.chars[0] = ndarray::arr2(&[[10.0], [11.0], [12.0], [13.0]]);
        p.chars[1] = ndarray::arr2(&[[20.0], [21.0], [22.0], [23.0]]);
        assert_eq!(p.embed_cw(1, &[2, 3]).to_vec(), [3.0, 4.0, 12.0, 23.0]);
        assert_eq!(p.embed_cw(2, &[0, 0]).to_vec(), [5.0, 6.0, 10.0, 20.0]);
    }

    #[test]
    fn shared_mode_repeats_equal_characters() {
        let mut p = EmbeddingParams::<f64>::zeros(3, 2, 2, 4, 2, true);
        assert_eq!(p.chars.len(), 1);
        p.chars[0] = Array::from_shape_fn((4, 2), |(i, j)| (i * 2 + j) as f64 + 0.5);
        let e = p.embed_cw(0, &[3, 3]);
        assert_eq!(e.slice(s![2..4]), e.slice(s![4..6]));
        assert_eq!(e.slice(s![2..4]).to_vec(), [6.5, 7.5]);
    }

    #[test]
    fn gradient_scatter_is_the_adjoint_of_lookup() {
        let mut p = EmbeddingParams::<f64>::zeros(3, 2, 2, 4, 1, false);
        let g = Array1::from(vec![1.0, 2.0, 3.0, 4.0]);
        p.accumulate_grad(1, &[2, 0], g.view());
        p.accumulate_grad(1, &[2, 1], g.view());
        assert_eq!(p.word.row(1).to_vec(), [2.0, 4.0]);
        assert_eq!(p.chars[0][[2, 0]], 6.0);
        assert_eq!(p.chars[1][[0, 0]], 4.0);
        assert_eq!(p.chars[1][[1, 0]], 4.0);
        assert_eq!(p.word.row(0).sum() + p.chars[0][[3, 0]], 0.0);
    }
}
