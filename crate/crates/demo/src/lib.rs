//! Browser demo: character slots of a word, embedding parameter counts as
//! the number of slots grows, and the learning-rate schedule of a preset.

use wasm_bindgen::prelude::*;

use cwlm::{char_sequence, lr_at_epoch, param_count, CharOrder, CharVocab, Preset, SizeSpec};

const PAD: char = '·';

/// Slot contents for `word` with `n` slots, pads shown as `·`.
pub fn slots(word: &str, n: usize, order: &str) -> Result<Vec<char>, String> {
    let order: CharOrder = order.parse()?;
    if order == CharOrder::Both && n % 2 == 1 {
        return Err(format!("both needs an even slot count, got {n}"));
    }
    let cv = CharVocab::build([word]);
    Ok(char_sequence(word, n, order, &cv)
        .into_iter()
        .map(|id| cv.char_of(id).unwrap_or(PAD))
        .collect())
}

/// Rows `[n, word, unshared, shared]` for `n` in `0..=max_n`; counts that
/// do not fit the embedding are NaN.
pub fn count_rows(vocab: usize, embedding: usize, char_emb: usize, char_vocab: usize, max_n: usize) -> Vec<[f64; 4]> {
    let count = |n: usize, shared: bool| {
        let spec = SizeSpec {
            vocab,
            embedding,
            n_chars: n,
            char_emb: if n == 0 { 0 } else { char_emb },
            char_vocab,
            shared,
            layers: 2,
        };
        param_count(&spec, true).map_or(f64::NAN, |c| c as f64)
    };
    (0..=max_n)
        .map(|n| [n as f64, count(0, false), count(n, false), count(n, true)])
        .collect()
}

pub fn schedule(preset: &str) -> Result<Vec<f64>, String> {
    let cfg = preset.parse::<Preset>()?.train_config();
    Ok((1..=cfg.total_epochs)
        .map(|i| lr_at_epoch(i, &cfg).expect("epoch within budget"))
        .collect())
}

#[wasm_bindgen]
pub fn char_slots(word: &str, n: usize, order: &str) -> Result<String, JsError> {
    let s = slots(word, n, order).map_err(|e| JsError::new(&e))?;
    Ok(s.iter().map(char::to_string).collect::<Vec<_>>().join(" "))
}

/// Flattened `count_rows`, four numbers per row.
#[wasm_bindgen]
pub fn param_count_curve(vocab: usize, embedding: usize, char_emb: usize, char_vocab: usize, max_n: usize) -> Vec<f64> {
    count_rows(vocab, embedding, char_emb, char_vocab, max_n).concat()
}

#[wasm_bindgen]
pub fn lr_schedule(preset: &str) -> Result<Vec<f64>, JsError> {
    schedule(preset).map_err(|e| JsError::new(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slot_rendering() {
        assert_eq!(slots("cat", 5, "forward").unwrap(), ['c', 'a', 't', PAD, PAD]);
        assert_eq!(slots("cat", 2, "backward").unwrap(), ['t', 'a']);
        assert_eq!(slots("overfit", 6, "both").unwrap(), ['o', 'v', 'e', 't', 'i', 'f']);
        assert!(slots("cat", 3, "both").is_err());
        assert!(slots("cat", 3, "sideways").is_err());
    }

    #[test]
    fn curve_rows() {
        let rows = count_rows(10_000, 650, 25, 48, 30);
        assert_eq!(rows.len(), 31);
        assert_eq!(rows[10], [10.0, 6_500_000.0, 4_012_000.0, 4_001_200.0]);
        assert!(rows[26][2].is_nan());
        assert_eq!(rows[0][2], rows[0][1]);
    }

    #[test]
    fn schedules() {
        let s = schedule("small").unwrap();
        assert_eq!(s.len(), 13);
        assert_eq!(&s[..6], [1.0, 1.0, 1.0, 1.0, 0.5, 0.25]);
        assert_eq!(schedule("large").unwrap().len(), 39);
        assert!(schedule("medium").is_err());
    }
}
