use serde::{Deserialize, Serialize};

/// Reserved id for tokens outside the vocabulary.
pub const UNK_ID: u32 = 0;

/// Lowercases and splits on runs of non-alphanumeric characters.
pub fn split_words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

/// Folds a plural to its stem: `-es` after a sibilant, otherwise a single
/// trailing `s` (but not `ss`). Stems shorter than three characters are left
/// alone.
pub fn fold_plural(word: &str) -> String {
    const SIBILANT_ENDINGS: [&str; 5] = ["s", "x", "z", "ch", "sh"];
    if let Some(stem) = word.strip_suffix("es") {
        if stem.chars().count() >= 3 && SIBILANT_ENDINGS.iter().any(|e| stem.ends_with(e)) {
            return stem.to_string();
        }
    }
    if let Some(stem) = word.strip_suffix('s') {
        if stem.chars().count() >= 3 && !stem.ends_with('s') {
            return stem.to_string();
        }
    }
    word.to_string()
}

/// Canonical form of a class name for lexical comparison: lowercase words,
/// each plural-folded, joined by single spaces.
pub fn canonical_class(name: &str) -> String {
    split_words(name)
        .iter()
        .map(|w| fold_plural(w))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Sorted, deduplicated token list. Id 0 is reserved for unknown tokens; the
/// i-th sorted token has id `i + 1`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenVocab {
    tokens: Vec<String>,
}

impl TokenVocab {
    /// Builds a vocabulary from every word occurring in `texts`.
    pub fn from_texts<I, S>(texts: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut tokens: Vec<String> = texts
            .into_iter()
            .flat_map(|t| split_words(t.as_ref()))
            .collect();
        tokens.sort();
        tokens.dedup();
        Self { tokens }
    }

    /// Rebuilds from an explicit token list, normalizing order.
    pub fn from_tokens(mut tokens: Vec<String>) -> Self {
        tokens.sort();
        tokens.dedup();
        Self { tokens }
    }

    /// This vocabulary plus every word of `texts`.
    pub fn extended<I, S>(&self, texts: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut tokens = self.tokens.clone();
        tokens.extend(texts.into_iter().flat_map(|t| split_words(t.as_ref())));
        Self::from_tokens(tokens)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Number of ids including the reserved unknown id.
    pub fn len(&self) -> usize {
        self.tokens.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        match self.tokens.binary_search_by(|t| t.as_str().cmp(token)) {
            Ok(i) => (i + 1) as u32,
            Err(_) => UNK_ID,
        }
    }

    /// The token for `id`, or `None` for the unknown id.
    pub fn token(&self, id: u32) -> Option<&str> {
        if id == UNK_ID {
            return None;
        }
        self.tokens.get(id as usize - 1).map(String::as_str)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.id(token) != UNK_ID
    }
}

pub fn tokenize(text: &str, vocab: &TokenVocab) -> Vec<u32> {
    split_words(text).iter().map(|w| vocab.id(w)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab() -> TokenVocab {
        TokenVocab::from_texts(["coffee mug", "mug holder", "a photo of a"])
    }

    #[test]
    fn ids_follow_sorted_order() {
        let v = vocab();
        assert_eq!(v.tokens(), ["a", "coffee", "holder", "mug", "of", "photo"]);
        assert_eq!(v.id("a"), 1);
        assert_eq!(v.id("photo"), 6);
        assert_eq!(v.len(), 7);
    }

    #[test]
    fn tokenize_examples() {
        let v = vocab();
        assert_eq!(tokenize("Coffee mug", &v), vec![v.id("coffee"), v.id("mug")]);
        assert!(tokenize("", &v).is_empty());
        assert_eq!(tokenize("mug-holder", &v), vec![v.id("mug"), v.id("holder")]);
        assert_eq!(tokenize("teapot", &v), vec![UNK_ID]);
    }

    #[test]
    fn plural_folding() {
        assert_eq!(fold_plural("chairs"), "chair");
        assert_eq!(fold_plural("chair"), "chair");
        assert_eq!(fold_plural("tables"), "table");
        assert_eq!(fold_plural("boxes"), "box");
        assert_eq!(fold_plural("glasses"), "glass");
        assert_eq!(fold_plural("benches"), "bench");
        assert_eq!(fold_plural("glass"), "glass");
        assert_eq!(fold_plural("bus"), "bus");
        assert_eq!(canonical_class("Watering Cans"), "watering can");
    }

    proptest! {
        #[test]
        fn vocab_is_a_bijection(words in proptest::collection::vec("[a-z]{1,6}", 0..40)) {
            let v = TokenVocab::from_texts(&words);
            for (i, t) in v.tokens().iter().enumerate() {
                prop_assert_eq!(v.id(t), (i + 1) as u32);
                prop_assert_eq!(v.token((i + 1) as u32), Some(t.as_str()));
            }
            prop_assert!(v.tokens().windows(2).all(|w| w[0] < w[1]));
        }

        #[test]
        fn folding_is_idempotent_on_words(w in "[a-z]{1,10}") {
            let once = fold_plural(&w);
            // a second fold may strip again only when the stem itself looks plural
            prop_assert!(once.len() <= w.len());
            prop_assert!(once.len() >= 3.min(w.len()));
        }
    }
}
