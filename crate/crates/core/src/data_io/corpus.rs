//! JSONL corpus of fashion items.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::image::RawImage;
use crate::error::{Error, Result};
use crate::textpipe::{words, Attribute, BinaryAttribute, EnumAttribute, LexicalResource, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One corpus item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FashionRecord {
    pub item_id: String,
    pub caption: String,
    pub category: String,
    pub subcategory: String,
    #[serde(default)]
    pub enum_attrs: Vec<EnumAttribute>,
    #[serde(default)]
    pub binary_attrs: Vec<BinaryAttribute>,
    /// Image path, relative to the image directory unless absolute.
    pub image_ref: String,
    pub split: Split,
}

impl FashionRecord {
    /// Enumerable attributes first, then binary ones.
    pub fn attributes(&self) -> Vec<Attribute> {
        self.enum_attrs
            .iter()
            .cloned()
            .map(Attribute::Enum)
            .chain(self.binary_attrs.iter().cloned().map(Attribute::Binary))
            .collect()
    }

    pub fn enum_value(&self, name: &str) -> Option<&str> {
        self.enum_attrs.iter().find(|a| a.name == name).map(|a| a.value.as_str())
    }

    pub fn image_path(&self, image_dir: &Path) -> PathBuf {
        let p = Path::new(&self.image_ref);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            image_dir.join(p)
        }
    }
}

/// Parses one JSONL corpus; line numbers in errors are 1-based.
pub fn parse_corpus(text: &str, path: &Path) -> Result<Vec<FashionRecord>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message: e.to_string(),
        })?;
        let rec: FashionRecord = serde_json::from_value(value)
            .map_err(|e| Error::Schema(format!("{}: line {line_no}: {e}", path.display())))?;
        if rec.item_id.is_empty() {
            return Err(Error::Schema(format!("{}: line {line_no}: empty item_id", path.display())));
        }
        if !seen.insert(rec.item_id.clone()) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: line_no,
                message: format!("duplicate item_id `{}`", rec.item_id),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn load_corpus(path: &Path) -> Result<Vec<FashionRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text, path)
}

pub fn corpus_to_string(records: &[FashionRecord]) -> Result<String> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    Ok(s)
}

pub fn write_corpus(path: &Path, records: &[FashionRecord]) -> Result<()> {
    let s = corpus_to_string(records)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(s.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Loads every record's image, resized to `size`, in record order.
pub fn load_images(records: &[FashionRecord], image_dir: &Path, size: usize) -> Result<Vec<RawImage>> {
    records
        .par_iter()
        .map(|r| RawImage::load_resized(&r.image_path(image_dir), size))
        .collect()
}

/// Vocabulary over captions, rendered prompts, lexicon words and `extra` texts.
pub fn build_vocabulary(records: &[FashionRecord], extra: &[&str], lex: &LexicalResource) -> Vocabulary {
    let mut all: Vec<String> = Vec::new();
    for r in records {
        all.extend(words(&r.caption));
        for a in r.attributes() {
            if let Ok(t) = a.render() {
                all.extend(words(&t));
            }
        }
    }
    for t in extra {
        all.extend(words(t));
    }
    all.extend(lex.words().flat_map(words));
    all.extend(["yes", "no", "the", "image", "attribute", "is", "?"].map(String::from));
    Vocabulary::build(all)
}

/// A text-modified retrieval triple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TmirTriple {
    pub candidate_id: String,
    pub candidate_image: String,
    pub target_id: String,
    pub target_image: String,
    pub text: String,
    pub split: Split,
}

pub fn load_tmir(path: &Path) -> Result<Vec<TmirTriple>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let t: TmirTriple = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if t.candidate_id == t.target_id {
            return Err(Error::Schema(format!(
                "{}: line {}: candidate and target are both `{}`",
                path.display(),
                i + 1,
                t.candidate_id
            )));
        }
        out.push(t);
    }
    Ok(out)
}

pub fn write_tmir(path: &Path, triples: &[TmirTriple]) -> Result<()> {
    let mut s = String::new();
    for t in triples {
        s.push_str(&serde_json::to_string(t)?);
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}
