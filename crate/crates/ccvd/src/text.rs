//! Toy text encoder: fixed vocabulary, frozen seeded embedding table, and
//! pluggable trainable rows for concept tokens.

use ndarray::{Array1, Array2};

use crate::engine::Engine;
use crate::error::{Error, Result};
use crate::rng;

/// Reserved row for prompt padding.
pub const NULL_TOKEN: &str = "<null>";
/// Reserved row for out-of-vocabulary ordinary words.
pub const OOV_TOKEN: &str = "<oov>";

/// Ordinary words known to the frozen table. Order is part of the format:
/// row ids are stable across runs and platforms.
const BASE_VOCAB: &[&str] = &[
    "a", "an", "the", "photo", "of", "in", "on", "scene", "background", "dark", "small", "large",
    "left", "right", "top", "bottom", "center", "shape", "moving", "across", "video", "frame",
    "red", "crimson", "blue", "green", "yellow", "white", "gray", "circle", "square", "triangle",
    "sweep", "sweeping", "orbit", "orbiting", "bounce", "bouncing", "still", "sitting", "and",
    "with", "performing", "swims", "pool", "plays",
];

/// One prompt token: an ordinary word or a bracketed concept placeholder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Token {
    Word(String),
    Concept(String),
}

/// Whitespace tokenizer. `[name]` becomes a concept placeholder; everything
/// else is lowercased into an ordinary word.
pub fn tokenize(prompt: &str) -> Vec<Token> {
    prompt
        .split_whitespace()
        .map(|raw| {
            if raw.len() > 2 && raw.starts_with('[') && raw.ends_with(']') {
                Token::Concept(raw[1..raw.len() - 1].to_string())
            } else {
                Token::Word(raw.to_lowercase())
            }
        })
        .collect()
}

/// Deterministic text encoder over a frozen embedding table.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    table: Array2<f64>,
    words: Vec<&'static str>,
    d: usize,
    max_tokens: usize,
}

impl TextEncoder {
    /// Build the frozen table from a seed. Row 0 is the null token, row 1 the
    /// OOV token, followed by the base vocabulary.
    pub fn new(d: usize, max_tokens: usize, seed: u64) -> Self {
        let n = 2 + BASE_VOCAB.len();
        let mut r = rng::named_rng(seed, "text_embed_table");
        let table = rng::normal_array2(&mut r, n, d, 1.0 / (d as f64).sqrt());
        Self {
            table,
            words: BASE_VOCAB.to_vec(),
            d,
            max_tokens,
        }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn max_tokens(&self) -> usize {
        self.max_tokens
    }

    fn word_id(&self, w: &str) -> usize {
        self.words.iter().position(|v| *v == w).map_or(1, |i| i + 2)
    }

    /// Frozen row for an ordinary word (OOV row if unknown).
    pub fn frozen_row(&self, w: &str) -> Array1<f64> {
        self.table.row(self.word_id(w)).to_owned()
    }

    pub fn null_row(&self) -> Array1<f64> {
        self.table.row(0).to_owned()
    }

    /// Encode a token sequence for one denoiser layer as an `[n_e, d]` matrix.
    ///
    /// Ordinary words resolve to frozen rows; concept placeholders resolve
    /// through `concept_row`, which supplies the layer-specific trainable row
    /// (a `[1, d]` tensor on the caller's engine).
    pub fn encode<E: Engine>(
        &self,
        eng: &E,
        tokens: &[Token],
        layer: usize,
        concept_row: &dyn Fn(&str, usize) -> Option<E::T>,
    ) -> Result<E::T> {
        if tokens.len() > self.max_tokens {
            return Err(Error::PromptTooLong {
                got: tokens.len(),
                limit: self.max_tokens,
            });
        }
        let mut parts: Vec<E::T> = Vec::with_capacity(self.max_tokens);
        for tok in tokens {
            match tok {
                Token::Word(w) => {
                    let row = self
                        .table
                        .row(self.word_id(w))
                        .to_owned()
                        .insert_axis(ndarray::Axis(0));
                    parts.push(eng.constant(row));
                }
                Token::Concept(name) => {
                    let t = concept_row(name, layer)
                        .ok_or_else(|| Error::UnknownConceptToken(name.clone()))?;
                    if eng.dims(&t) != (1, self.d) {
                        return Err(Error::shape(
                            format!("concept row `{name}`"),
                            format!("(1, {})", self.d),
                            format!("{:?}", eng.dims(&t)),
                        ));
                    }
                    parts.push(t);
                }
            }
        }
        let null = self.table.row(0).to_owned().insert_axis(ndarray::Axis(0));
        while parts.len() < self.max_tokens {
            parts.push(eng.constant(null.clone()));
        }
        Ok(eng.concat_rows(&parts))
    }

    /// Eager convenience for paths that never need gradients.
    pub fn encode_plain(
        &self,
        tokens: &[Token],
        layer: usize,
        concept_row: &dyn Fn(&str, usize) -> Option<Array2<f64>>,
    ) -> Result<Array2<f64>> {
        self.encode(&crate::engine::EagerEngine, tokens, layer, concept_row)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::EagerEngine;

    fn no_concepts(_: &str, _: usize) -> Option<Array2<f64>> {
        None
    }

    #[test]
    fn empty_prompt_is_all_null_rows() {
        let enc = TextEncoder::new(8, 6, 3);
        let out = enc.encode_plain(&[], 0, &no_concepts).unwrap();
        assert_eq!(out.dim(), (6, 8));
        for r in 0..6 {
            assert_eq!(out.row(r), enc.null_row());
        }
    }

    #[test]
    fn ordinary_words_are_layer_independent() {
        let enc = TextEncoder::new(8, 6, 3);
        let toks = tokenize("a red circle");
        let l0 = enc.encode_plain(&toks, 0, &no_concepts).unwrap();
        let l1 = enc.encode_plain(&toks, 1, &no_concepts).unwrap();
        assert_eq!(l0, l1);
    }

    #[test]
    fn unknown_word_uses_oov_row_not_error() {
        let enc = TextEncoder::new(8, 6, 3);
        let a = enc
            .encode_plain(&tokenize("zorblat"), 0, &no_concepts)
            .unwrap();
        let b = enc
            .encode_plain(&tokenize("quux"), 0, &no_concepts)
            .unwrap();
        assert_eq!(a.row(0), b.row(0));
        assert_ne!(a.row(0), enc.null_row());
    }

    #[test]
    fn unregistered_concept_names_the_token() {
        let enc = TextEncoder::new(8, 6, 3);
        let err = enc
            .encode_plain(&tokenize("a [V9] swims"), 0, &no_concepts)
            .unwrap_err();
        match err {
            Error::UnknownConceptToken(name) => assert_eq!(name, "V9"),
            other => panic!("unexpected {other:?}"),
        }
    }

    /// Row-diff oracle: updating one concept embedding changes exactly that row.
    #[test]
    fn token_update_changes_exactly_one_row() {
        let enc = TextEncoder::new(8, 6, 3);
        let toks = tokenize("a [V1] photo");
        let row_v1 = |fill: f64| {
            move |name: &str, _layer: usize| {
                (name == "V1").then(|| Array2::from_elem((1, 8), fill))
            }
        };
        let before = enc.encode_plain(&toks, 0, &row_v1(0.25)).unwrap();
        let after = enc.encode_plain(&toks, 0, &row_v1(0.5)).unwrap();
        let mut changed = vec![];
        for r in 0..6 {
            if before.row(r) != after.row(r) {
                changed.push(r);
            }
        }
        assert_eq!(changed, vec![1]); // only the [V1] position
    }

    #[test]
    fn prompt_too_long_is_rejected() {
        let enc = TextEncoder::new(8, 3, 3);
        let err = enc
            .encode_plain(&tokenize("a b c d"), 0, &no_concepts)
            .unwrap_err();
        assert!(matches!(err, Error::PromptTooLong { got: 4, limit: 3 }));
    }

    #[test]
    fn deterministic_across_instances() {
        let a = TextEncoder::new(16, 8, 7);
        let b = TextEncoder::new(16, 8, 7);
        assert_eq!(a.frozen_row("red"), b.frozen_row("red"));
        let eng = EagerEngine;
        let t = tokenize("a red circle in the pool");
        let ea = a.encode(&eng, &t, 0, &|_, _| None).unwrap();
        let eb = b.encode(&eng, &t, 0, &|_, _| None).unwrap();
        assert_eq!(ea, eb);
    }
}
