//! Referring-expression input: vocabulary, learned token table, and the
//! linguistic state threaded through the encoder.

use std::collections::HashMap;
use std::path::Path;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore, Session};
use crate::rng::Rng;
use crate::tensor::{Mask, Scalar, Tensor};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Maximum expression length.
pub const DEFAULT_MAX_TOKENS: usize = 20;

/// Words of the synthetic scene grammar, after the two reserved entries.
const DEFAULT_WORDS: [&str; 18] = [
    "the", "a", "on", "left", "right", "red", "green", "blue", "yellow", "cyan", "magenta", "white",
    "square", "circle", "of", "in", "object", "frame",
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if tokens.first().map(String::as_str) != Some(PAD_TOKEN)
            || tokens.get(1).map(String::as_str) != Some(UNK_TOKEN)
        {
            return Err(Error::Input(format!(
                "vocabulary must start with `{PAD_TOKEN}` and `{UNK_TOKEN}`"
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Input(format!("vocabulary line {i} is not a single token")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Input(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// The built-in 20-token vocabulary covering the scene grammar.
    pub fn default_scene() -> Self {
        let tokens = [PAD_TOKEN, UNK_TOKEN]
            .into_iter()
            .chain(DEFAULT_WORDS)
            .map(str::to_owned)
            .collect();
        Self::new(tokens).expect("built-in vocabulary is valid")
    }

    /// One token per line; the line number is the id.
    pub fn parse(text: &str) -> Result<Self> {
        let tokens = text
            .lines()
            .map(|l| l.trim_end_matches('\r').to_owned())
            .collect();
        Self::new(tokens)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_file_string(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK_ID)
    }

    /// Lowercased whitespace tokens, truncated to `max_len` and right-padded.
    pub fn encode(&self, expression: &str, max_len: usize) -> Result<TokenIds> {
        let words: Vec<String> = expression
            .split_whitespace()
            .map(str::to_lowercase)
            .take(max_len)
            .collect();
        if words.is_empty() {
            return Err(Error::Input("empty referring expression".into()));
        }
        let mut ids = vec![PAD_ID; max_len];
        let mut valid = vec![false; max_len];
        for (i, w) in words.iter().enumerate() {
            ids[i] = self.id(w);
            valid[i] = true;
        }
        Ok(TokenIds { ids, valid })
    }
}

/// Encoded expression: ids right-padded to the maximum length, with the
/// validity prefix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenIds {
    pub ids: Vec<usize>,
    pub valid: Vec<bool>,
}

impl TokenIds {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// The linguistic features of one expression at some depth of the encoder.
#[derive(Clone, Debug)]
pub struct LanguageState {
    pub ids: Vec<usize>,
    pub valid: Vec<bool>,
    /// `[D×T]` on the session tape.
    pub features: Var,
}

impl LanguageState {
    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }

    /// Key mask of shape `[T]`.
    pub fn mask(&self) -> Mask {
        Mask::from_bits(self.valid.clone())
    }

    pub fn with_features(&self, features: Var) -> Self {
        Self {
            ids: self.ids.clone(),
            valid: self.valid.clone(),
            features,
        }
    }
}

/// Learned word and position embeddings.
#[derive(Clone, Debug)]
pub struct TokenTable {
    pub vocab: Vocab,
    pub table: ParamId,
    pub positions: ParamId,
    pub width: usize,
    pub max_len: usize,
}

impl TokenTable {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut Rng, vocab: Vocab, width: usize, max_len: usize) -> Self {
        let table = store.add_randn("tokens.table", [vocab.len(), width], 1.0, rng);
        let positions = store.add_randn("tokens.positions", [max_len, width], 0.1, rng);
        Self {
            vocab,
            table,
            positions,
            width,
            max_len,
        }
    }

    pub fn encode(&self, expression: &str) -> Result<TokenIds> {
        self.vocab.encode(expression, self.max_len)
    }

    /// Initial linguistic state: token rows plus position rows at valid
    /// positions; padded positions carry the pad row alone.
    pub fn embed<T: Scalar>(&self, s: &mut Session<T>, tokens: &TokenIds) -> Result<LanguageState> {
        if tokens.len() != self.max_len || tokens.valid_count() == 0 {
            return Err(Error::Input(format!(
                "expected {} token slots with at least one valid, got {} / {}",
                self.max_len,
                tokens.len(),
                tokens.valid_count()
            )));
        }
        let table = s.param(self.table);
        let rows = s.embedding(table, &tokens.ids)?;
        let positions = s.param(self.positions);
        let keep = s.constant(Tensor::from_vec(
            [self.max_len, 1],
            tokens.valid.iter().map(|&v| if v { T::one() } else { T::zero() }).collect(),
        )?);
        let positions = s.mul(positions, keep)?;
        let summed = s.add(rows, positions)?;
        let features = s.transpose(summed)?;
        Ok(LanguageState {
            ids: tokens.ids.clone(),
            valid: tokens.valid.clone(),
            features,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    #[test]
    fn default_vocabulary_has_twenty_tokens() {
        let v = Vocab::default_scene();
        assert_eq!(v.len(), 20);
        assert_eq!(v.id(PAD_TOKEN), PAD_ID);
        assert_eq!(v.id(UNK_TOKEN), UNK_ID);
        assert_eq!(Vocab::parse(&v.to_file_string()).unwrap(), v);
    }

    #[test]
    fn vocabulary_file_must_reserve_pad_and_unk() {
        assert!(Vocab::parse("the\n<unk>\n").is_err());
        assert!(Vocab::parse("<pad>\n<unk>\nx\nx\n").is_err());
        assert!(Vocab::parse("<pad>\n<unk>\nswan\n").is_ok());
    }

    #[test]
    fn encode_black_swan() {
        let v = Vocab::default_scene();
        let t = v.encode("a black swan", 20).unwrap();
        assert_eq!(t.valid_count(), 3);
        assert_eq!(&t.valid[..4], &[true, true, true, false]);
        assert_eq!(t.ids[0], v.id("a"));
        assert_eq!(t.ids[1], UNK_ID);
        assert!(t.ids[3..].iter().all(|&i| i == PAD_ID));
    }

    #[test]
    fn encode_truncates_and_lowercases() {
        let v = Vocab::default_scene();
        let long = vec!["Red"; 25].join(" ");
        let t = v.encode(&long, 20).unwrap();
        assert_eq!(t.valid_count(), 20);
        assert!(t.ids.iter().all(|&i| i == v.id("red")));
        let one = v.encode("square", 20).unwrap();
        assert_eq!(one.valid_count(), 1);
        assert!(v.encode("   ", 20).is_err());
    }

    #[test]
    fn embed_adds_positions_only_at_valid_slots() {
        let mut store = ParamStore::<f64>::new();
        let table = TokenTable::new(&mut store, &mut Rng::new(1), Vocab::default_scene(), 4, 5);
        let ids = table.encode("the red square").unwrap();
        let mut tape = Tape::new();
        let mut s = Session::new(&mut tape, &store);
        let lang = table.embed(&mut s, &ids).unwrap();
        let f = s.value(lang.features).clone();
        assert_eq!(f.shape(), &[4, 5]);
        let rows = store.get(table.table);
        let pos = store.get(table.positions);
        for c in 0..4 {
            assert_eq!(f.at(&[c, 1]), rows.at(&[ids.ids[1], c]) + pos.at(&[1, c]));
            assert_eq!(f.at(&[c, 4]), rows.at(&[PAD_ID, c]));
        }
    }
}
