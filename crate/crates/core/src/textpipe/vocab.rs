use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use crate::error::{bail, Error, Result};
use crate::taxonomy::FashionSymbol;

pub type TokenId = u32;

pub const PAD: &str = "[PAD]";
pub const CLS: &str = "[CLS]";
pub const MASK: &str = "[MASK]";
pub const BLANK: &str = "[BLANK]";
pub const UNK: &str = "[UNK]";

pub const PAD_ID: TokenId = 0;
pub const CLS_ID: TokenId = 1;
pub const MASK_ID: TokenId = 2;
pub const BLANK_ID: TokenId = 3;
/// First of the nine symbol ids, in [`FashionSymbol::code`] order.
pub const SYMBOL_BASE_ID: TokenId = 4;
pub const UNK_ID: TokenId = 13;
/// First id available to corpus words.
pub const FIRST_WORD_ID: TokenId = 14;

/// Id of the special token for `symbol`.
pub fn symbol_id(symbol: FashionSymbol) -> TokenId {
    SYMBOL_BASE_ID + symbol.code() as TokenId
}

/// True for the structural tokens that never carry caption content (`[UNK]` is not one).
pub fn is_special(id: TokenId) -> bool {
    id < UNK_ID
}

fn reserved_tokens() -> Vec<String> {
    let mut out: Vec<String> = [PAD, CLS, MASK, BLANK].iter().map(|s| s.to_string()).collect();
    out.extend(FashionSymbol::ALL.iter().map(|s| s.token().to_string()));
    out.push(UNK.to_string());
    out
}

/// Token <-> id bijection with fixed reserved ids. Frozen after construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Reserved tokens followed by `words` in sorted, de-duplicated order.
    pub fn build<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let reserved = reserved_tokens();
        let mut extra: Vec<String> = words
            .into_iter()
            .map(|w| w.as_ref().to_string())
            .filter(|w| !w.is_empty() && !reserved.contains(w))
            .collect();
        extra.sort();
        extra.dedup();
        let mut tokens = reserved;
        tokens.extend(extra);
        Self::from_tokens(tokens).expect("constructed vocabulary is a bijection")
    }

    /// Builds from an explicit id-ordered token list, which must start with the reserved block.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let reserved = reserved_tokens();
        if tokens.len() < reserved.len() || tokens[..reserved.len()] != reserved[..] {
            bail!(Format, "vocabulary does not start with the reserved tokens");
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains(char::is_whitespace) {
                bail!(Format, "invalid vocabulary token at line {}", i + 1);
            }
            if index.insert(t.clone(), i as TokenId).is_some() {
                bail!(Format, "duplicate vocabulary token `{t}`");
            }
        }
        Ok(Self { tokens, index })
    }

    /// Reads a newline-separated token file; line number (from 0) is the id.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for t in &self.tokens {
            writeln!(f, "{t}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
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

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    /// Id of `word`, or `[UNK]`.
    pub fn encode_word(&self, word: &str) -> TokenId {
        self.id(word).unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn num_words(&self) -> usize {
        self.len() - FIRST_WORD_ID as usize
    }

    /// Inverse of [`symbol_id`], for any id in the symbol block.
    pub fn symbol_of(&self, id: TokenId) -> Option<FashionSymbol> {
        self.token(id).and_then(FashionSymbol::from_token)
    }
}

/// Token ids with a right-padded attention mask.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    pub ids: Vec<TokenId>,
    pub attention_mask: Vec<u8>,
}

impl TokenSequence {
    /// Pads (or truncates) `ids` to `max_len`.
    pub fn from_ids(mut ids: Vec<TokenId>, max_len: usize) -> Self {
        ids.truncate(max_len);
        let real = ids.len();
        ids.resize(max_len, PAD_ID);
        let mut attention_mask = vec![1u8; real];
        attention_mask.resize(max_len, 0);
        Self {
            ids,
            attention_mask,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of unpadded positions.
    pub fn real_len(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m == 1).count()
    }

    pub fn real_ids(&self) -> &[TokenId] {
        &self.ids[..self.real_len()]
    }

    /// Checks equal lengths and that the mask is a run of 1s followed by 0s.
    pub fn validate(&self) -> Result<()> {
        if self.ids.len() != self.attention_mask.len() {
            bail!(InvalidInput, "ids and mask lengths differ");
        }
        let real = self.real_len();
        if self.attention_mask[..real].iter().any(|&m| m != 1)
            || self.attention_mask[real..].iter().any(|&m| m != 0)
        {
            bail!(InvalidInput, "attention mask is not right-padded");
        }
        Ok(())
    }
}

/// Lowercases, splits punctuation into standalone tokens and splits on whitespace.
/// Hyphens and apostrophes stay inside words ("t-shirt", "men's").
pub fn words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut cur = String::new();
        for c in chunk.chars() {
            if c.is_ascii_punctuation() && c != '-' && c != '\'' {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(c.to_string());
            } else {
                cur.extend(c.to_lowercase());
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

/// Word-level tokenization padded/truncated to `max_len`; no special tokens are added.
pub fn tokenize(text: &str, vocab: &Vocabulary, max_len: usize) -> TokenSequence {
    let ids = words(text).iter().map(|w| vocab.encode_word(w)).collect();
    TokenSequence::from_ids(ids, max_len)
}

/// Tokens at unpadded positions joined by single spaces.
pub fn detokenize(seq: &TokenSequence, vocab: &Vocabulary) -> String {
    seq.real_ids()
        .iter()
        .map(|&id| vocab.token(id).unwrap_or(UNK))
        .collect::<Vec<_>>()
        .join(" ")
}
