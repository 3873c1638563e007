use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};

pub const DEFAULT_LEXICON_JSON: &str = include_str!("../../data/lexicon.json");

/// Small antonym/synonym table standing in for a full lexical database.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LexicalResource {
    #[serde(default)]
    pub antonyms: BTreeMap<String, String>,
    #[serde(default)]
    pub synonyms: BTreeMap<String, Vec<String>>,
}

impl LexicalResource {
    pub fn from_json(json: &str) -> Result<Self> {
        let lex: LexicalResource = serde_json::from_str(json)?;
        lex.validate()?;
        Ok(lex)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn bundled() -> Self {
        Self::from_json(DEFAULT_LEXICON_JSON).expect("bundled lexicon is valid")
    }

    pub fn validate(&self) -> Result<()> {
        for (w, a) in &self.antonyms {
            if w == a {
                bail!(Schema, "`{w}` is listed as its own antonym");
            }
        }
        for (w, syns) in &self.synonyms {
            if syns.iter().any(|s| s.is_empty()) {
                bail!(Schema, "empty synonym for `{w}`");
            }
        }
        Ok(())
    }

    pub fn antonym(&self, word: &str) -> Option<&str> {
        self.antonyms.get(word).map(String::as_str)
    }

    pub fn synonyms(&self, word: &str) -> &[String] {
        self.synonyms.get(word).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Every word the table mentions, for vocabulary building.
    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.antonyms
            .iter()
            .flat_map(|(k, v)| [k.as_str(), v.as_str()])
            .chain(
                self.synonyms
                    .iter()
                    .flat_map(|(k, v)| std::iter::once(k.as_str()).chain(v.iter().map(String::as_str))),
            )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_is_valid() {
        let lex = LexicalResource::bundled();
        assert_eq!(lex.antonym("long"), Some("short"));
        assert_eq!(lex.synonyms("jacket"), ["coat".to_string()]);
        assert!(lex.synonyms("nothing").is_empty());
    }

    #[test]
    fn self_antonym_rejected() {
        assert!(LexicalResource::from_json(r#"{"antonyms":{"red":"red"}}"#).is_err());
    }
}
