//! Attribute prompt templates and pre-training sequence layout.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::vocab::{symbol_id, words, TokenId, TokenSequence, Vocabulary, CLS_ID};
use crate::error::{bail, Result};
use crate::taxonomy::FashionSymbol;

/// Key-value attribute whose value comes from a finite per-name set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnumAttribute {
    pub name: String,
    pub value: String,
}

/// Presence flag for a labelled feature.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryAttribute {
    pub label: String,
    pub present: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Attribute {
    Enum(EnumAttribute),
    Binary(BinaryAttribute),
}

fn slot(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// `the image attribute {name} is {value}`
pub fn render_enum_prompt(attr: &EnumAttribute) -> Result<String> {
    let (name, value) = (slot(&attr.name), slot(&attr.value));
    if name.is_empty() || value.is_empty() {
        bail!(InvalidInput, "enumerable attribute needs a name and a value");
    }
    Ok(format!("the image attribute {name} is {value}"))
}

/// `is image attribute {label}? {yes|no}`
pub fn render_binary_prompt(attr: &BinaryAttribute) -> Result<String> {
    let label = slot(&attr.label);
    if label.is_empty() {
        bail!(InvalidInput, "binary attribute needs a label");
    }
    let answer = if attr.present { "yes" } else { "no" };
    Ok(format!("is image attribute {label}? {answer}"))
}

/// A rendered prompt with the word spans of its name and value slots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptParts {
    pub text: String,
    pub words: Vec<String>,
    /// Attribute name (or binary label) words.
    pub name_span: Range<usize>,
    /// Attribute value (or yes/no answer) words.
    pub value_span: Range<usize>,
}

impl Attribute {
    pub fn render(&self) -> Result<String> {
        match self {
            Attribute::Enum(a) => render_enum_prompt(a),
            Attribute::Binary(a) => render_binary_prompt(a),
        }
    }

    pub fn parts(&self) -> Result<PromptParts> {
        let text = self.render()?;
        let (name_words, value_words) = match self {
            Attribute::Enum(a) => (words(&a.name), words(&a.value)),
            Attribute::Binary(a) => (
                words(&a.label),
                vec![if a.present { "yes" } else { "no" }.to_string()],
            ),
        };
        let all = words(&text);
        let name_start = 3;
        let name_span = name_start..name_start + name_words.len();
        // one template word ("is" or "?") sits between the slots
        let value_start = name_span.end + 1;
        let value_span = value_start..value_start + value_words.len();
        debug_assert_eq!(all[name_span.clone()], name_words[..]);
        debug_assert_eq!(all[value_span.clone()], value_words[..]);
        Ok(PromptParts {
            text,
            words: all,
            name_span,
            value_span,
        })
    }

    /// Words carried by the value slot.
    pub fn value_words(&self) -> Vec<String> {
        match self {
            Attribute::Enum(a) => words(&a.value),
            Attribute::Binary(a) => vec![if a.present { "yes" } else { "no" }.to_string()],
        }
    }
}

/// Where each part of a text sequence landed after layout and truncation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceLayout {
    pub seq: TokenSequence,
    /// Positions of caption tokens.
    pub caption: Range<usize>,
    /// Positions of prompt tokens (empty when no prompt was appended).
    pub prompt: Range<usize>,
}

impl SequenceLayout {
    /// Maps a word span of the prompt to sequence positions, clipped to what survived truncation.
    pub fn prompt_span(&self, span: &Range<usize>) -> Range<usize> {
        let start = (self.prompt.start + span.start).min(self.prompt.end);
        let end = (self.prompt.start + span.end).min(self.prompt.end);
        start..end
    }
}

/// Lays out `[CLS] [SYMBOL]? caption prompt?` and pads to `max_len`.
pub fn layout_sequence(
    caption: &str,
    symbol: Option<FashionSymbol>,
    prompt: Option<&str>,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<SequenceLayout> {
    let head = 1 + usize::from(symbol.is_some());
    if max_len < head.max(2) {
        bail!(InvalidConfig, "max_len {max_len} cannot hold the leading special tokens");
    }
    let mut ids: Vec<TokenId> = vec![CLS_ID];
    if let Some(s) = symbol {
        ids.push(symbol_id(s));
    }
    ids.extend(words(caption).iter().map(|w| vocab.encode_word(w)));
    let caption_end = ids.len().min(max_len);
    if let Some(p) = prompt {
        ids.extend(words(p).iter().map(|w| vocab.encode_word(w)));
    }
    let prompt_end = ids.len().min(max_len);
    Ok(SequenceLayout {
        seq: TokenSequence::from_ids(ids, max_len),
        caption: head.min(max_len)..caption_end,
        prompt: caption_end..prompt_end,
    })
}

/// Pre-training text sequence: `[CLS] [SYMBOL] caption prompt`, padded to `max_len`.
pub fn build_pretrain_sequence(
    caption: &str,
    symbol: FashionSymbol,
    prompt: Option<&str>,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<TokenSequence> {
    Ok(layout_sequence(caption, Some(symbol), prompt, vocab, max_len)?.seq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textpipe::vocab::PAD_ID;

    fn vocab() -> Vocabulary {
        Vocabulary::build(
            "black shirt the image attribute season is summer".split(' '),
        )
    }

    #[test]
    fn enum_template() {
        let a = EnumAttribute {
            name: "season".into(),
            value: "summer".into(),
        };
        assert_eq!(render_enum_prompt(&a).unwrap(), "the image attribute season is summer");
        let bad = EnumAttribute {
            name: "".into(),
            value: "red".into(),
        };
        assert!(render_enum_prompt(&bad).is_err());
    }

    #[test]
    fn binary_template() {
        let a = BinaryAttribute {
            label: "pure cotton".into(),
            present: true,
        };
        assert_eq!(render_binary_prompt(&a).unwrap(), "is image attribute pure cotton? yes");
        let b = BinaryAttribute {
            label: "red".into(),
            present: false,
        };
        assert_eq!(render_binary_prompt(&b).unwrap(), "is image attribute red? no");
        let bad = BinaryAttribute {
            label: "  ".into(),
            present: true,
        };
        assert!(render_binary_prompt(&bad).is_err());
    }

    #[test]
    fn spans_of_multiword_slots() {
        let p = Attribute::Enum(EnumAttribute {
            name: "sleeve length".into(),
            value: "three quarter".into(),
        })
        .parts()
        .unwrap();
        assert_eq!(p.words[p.name_span.clone()], ["sleeve", "length"]);
        assert_eq!(p.words[p.value_span.clone()], ["three", "quarter"]);
        let b = Attribute::Binary(BinaryAttribute {
            label: "pure cotton".into(),
            present: false,
        })
        .parts()
        .unwrap();
        assert_eq!(b.words[b.name_span.clone()], ["pure", "cotton"]);
        assert_eq!(b.words[b.value_span.clone()], ["no"]);
    }

    #[test]
    fn pretrain_layout() {
        let v = vocab();
        let id = |w: &str| v.id(w).unwrap();
        let s = build_pretrain_sequence("black shirt", FashionSymbol::Tops, None, &v, 6).unwrap();
        assert_eq!(s.ids, vec![id("[CLS]"), id("[TOPS]"), id("black"), id("shirt"), PAD_ID, PAD_ID]);

        let p = "the image attribute season is summer";
        let s = build_pretrain_sequence("black shirt", FashionSymbol::Tops, Some(p), &v, 12).unwrap();
        let tail: Vec<_> = p.split(' ').map(id).collect();
        assert_eq!(s.ids[4..10], tail[..]);
        assert_eq!(s.real_len(), 10);

        let s = build_pretrain_sequence("black shirt", FashionSymbol::Tops, None, &v, 3).unwrap();
        assert_eq!(s.ids, vec![id("[CLS]"), id("[TOPS]"), id("black")]);

        assert!(build_pretrain_sequence("x", FashionSymbol::Tops, None, &v, 1).is_err());
    }

    #[test]
    fn truncated_prompt_span_is_clipped() {
        let v = vocab();
        let l = layout_sequence(
            "black shirt",
            Some(FashionSymbol::Tops),
            Some("the image attribute season is summer"),
            &v,
            8,
        )
        .unwrap();
        assert_eq!(l.caption, 2..4);
        assert_eq!(l.prompt, 4..8);
        assert_eq!(l.prompt_span(&(3..4)), 7..8);
        assert_eq!(l.prompt_span(&(5..6)), 8..8);
    }
}
