use std::collections::HashMap;
use std::str::FromStr;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type TokenId = u32;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TokenizerError {
    #[error("unknown token id {0}")]
    UnknownToken(TokenId),
    #[error("token stream does not decode to valid UTF-8")]
    InvalidUtf8,
}

/// Reversible text/token mapping plus a terminator id used by the packer to
/// separate texts.
///
/// `decode(encode(s)) == s` holds for byte tokenization on any string, and
/// for whitespace tokenization on strings whose words are separated by
/// single spaces (other whitespace is normalized away).
pub trait Tokenizer: Send + Sync {
    fn encode(&self, text: &str) -> Vec<TokenId>;
    fn decode(&self, tokens: &[TokenId]) -> Result<String, TokenizerError>;
    /// Id the packer appends after each text. Never produced by `encode`
    /// unless the input text itself contains the terminator sentinel.
    fn terminator_id(&self) -> TokenId;
    fn name(&self) -> &'static str;
}

/// Sentinel word the whitespace tokenizer reserves as its terminator.
pub const TERMINATOR_SENTINEL: &str = "</s>";

/// Splits on whitespace and interns each distinct word, first come first
/// numbered. The vocabulary lives in the tokenizer instance, so ids are only
/// meaningful to the instance that produced them.
pub struct WhitespaceTokenizer {
    inner: Mutex<Interner>,
}

struct Interner {
    ids: HashMap<String, TokenId>,
    words: Vec<String>,
}

impl WhitespaceTokenizer {
    pub fn new() -> Self {
        // The sentinel takes id 0 so terminator_id is stable no matter what
        // gets encoded later.
        let mut ids = HashMap::new();
        ids.insert(TERMINATOR_SENTINEL.to_string(), 0);
        WhitespaceTokenizer {
            inner: Mutex::new(Interner {
                ids,
                words: vec![TERMINATOR_SENTINEL.to_string()],
            }),
        }
    }

    /// Number of distinct words seen so far, sentinel included.
    pub fn vocab_size(&self) -> usize {
        self.inner.lock().unwrap().words.len()
    }
}

impl Default for WhitespaceTokenizer {
    fn default() -> Self {
        Self::new()
    }
}

impl Tokenizer for WhitespaceTokenizer {
    fn encode(&self, text: &str) -> Vec<TokenId> {
        let mut inner = self.inner.lock().unwrap();
        text.split_whitespace()
            .map(|word| match inner.ids.get(word) {
                Some(&id) => id,
                None => {
                    let id = inner.words.len() as TokenId;
                    inner.ids.insert(word.to_string(), id);
                    inner.words.push(word.to_string());
                    id
                }
            })
            .collect()
    }

    fn decode(&self, tokens: &[TokenId]) -> Result<String, TokenizerError> {
        let inner = self.inner.lock().unwrap();
        let mut words = Vec::with_capacity(tokens.len());
        for &id in tokens {
            let word = inner
                .words
                .get(id as usize)
                .ok_or(TokenizerError::UnknownToken(id))?;
            words.push(word.as_str());
        }
        Ok(words.join(" "))
    }

    fn terminator_id(&self) -> TokenId {
        0
    }

    fn name(&self) -> &'static str {
        "whitespace"
    }
}

/// Identity mapping over UTF-8 bytes: token id == byte value. The terminator
/// is 256, one past the byte range, so it can never collide with text.
pub struct ByteTokenizer;

pub const BYTE_TERMINATOR: TokenId = 256;

impl Tokenizer for ByteTokenizer {
    fn encode(&self, text: &str) -> Vec<TokenId> {
        text.bytes().map(TokenId::from).collect()
    }

    fn decode(&self, tokens: &[TokenId]) -> Result<String, TokenizerError> {
        let mut bytes = Vec::with_capacity(tokens.len());
        for &id in tokens {
            bytes.push(u8::try_from(id).map_err(|_| TokenizerError::UnknownToken(id))?);
        }
        String::from_utf8(bytes).map_err(|_| TokenizerError::InvalidUtf8)
    }

    fn terminator_id(&self) -> TokenId {
        BYTE_TERMINATOR
    }

    fn name(&self) -> &'static str {
        "byte"
    }
}

/// Selects a tokenizer implementation by name ("whitespace" or "byte").
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenizerKind {
    #[default]
    Whitespace,
    Byte,
}

impl TokenizerKind {
    pub fn create(&self) -> Box<dyn Tokenizer> {
        match self {
            TokenizerKind::Whitespace => Box::new(WhitespaceTokenizer::new()),
            TokenizerKind::Byte => Box::new(ByteTokenizer),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TokenizerKind::Whitespace => "whitespace",
            TokenizerKind::Byte => "byte",
        }
    }
}

impl FromStr for TokenizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "whitespace" => Ok(TokenizerKind::Whitespace),
            "byte" => Ok(TokenizerKind::Byte),
            other => Err(format!(
                "unknown tokenizer {other:?} (expected \"whitespace\" or \"byte\")"
            )),
        }
    }
}

impl std::fmt::Display for TokenizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}
