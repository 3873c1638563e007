//! Fashion symbols: a nine-way concept layer over heterogeneous dataset categories.
//!
//! Category strings from different corpora ("jeans", "toptee", "Slim Trousers") are
//! normalized and looked up in a data-driven [`CategoryTable`]. Lookup is total: anything
//! the table does not know resolves to [`FashionSymbol::Others`].

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};

/// The bundled seed table.
pub const DEFAULT_TABLE_JSON: &str = include_str!("../data/categories.json");

/// Abstract fashion concept grouping categories by body part or function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum FashionSymbol {
    Tops,
    Dresses,
    Skirts,
    Coats,
    Pants,
    Shoes,
    Bags,
    Accessories,
    Others,
}

impl FashionSymbol {
    pub const ALL: [FashionSymbol; 9] = [
        FashionSymbol::Tops,
        FashionSymbol::Dresses,
        FashionSymbol::Skirts,
        FashionSymbol::Coats,
        FashionSymbol::Pants,
        FashionSymbol::Shoes,
        FashionSymbol::Bags,
        FashionSymbol::Accessories,
        FashionSymbol::Others,
    ];

    /// Stable integer code, 0..=8.
    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Option<Self> {
        Self::ALL.get(code).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            FashionSymbol::Tops => "TOPS",
            FashionSymbol::Dresses => "DRESSES",
            FashionSymbol::Skirts => "SKIRTS",
            FashionSymbol::Coats => "COATS",
            FashionSymbol::Pants => "PANTS",
            FashionSymbol::Shoes => "SHOES",
            FashionSymbol::Bags => "BAGS",
            FashionSymbol::Accessories => "ACCESSORIES",
            FashionSymbol::Others => "OTHERS",
        }
    }

    /// The bracketed special token, e.g. `[TOPS]`.
    pub fn token(self) -> &'static str {
        match self {
            FashionSymbol::Tops => "[TOPS]",
            FashionSymbol::Dresses => "[DRESSES]",
            FashionSymbol::Skirts => "[SKIRTS]",
            FashionSymbol::Coats => "[COATS]",
            FashionSymbol::Pants => "[PANTS]",
            FashionSymbol::Shoes => "[SHOES]",
            FashionSymbol::Bags => "[BAGS]",
            FashionSymbol::Accessories => "[ACCESSORIES]",
            FashionSymbol::Others => "[OTHERS]",
        }
    }

    pub fn from_token(token: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.token() == token)
    }
}

impl fmt::Display for FashionSymbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FashionSymbol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|sym| sym.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown fashion symbol `{s}`")))
    }
}

/// Returns the special token for `symbol`.
pub fn symbol_token(symbol: FashionSymbol) -> &'static str {
    symbol.token()
}

/// Where a table entry came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    /// Listed in the reference symbol table.
    Table,
    /// One of the three FashionIQ category names.
    Fashioniq,
    /// Added by applying the body-part / function rules to further category names.
    Extension,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct TableFile {
    version: u32,
    entries: BTreeMap<String, FashionSymbol>,
    #[serde(default)]
    provenance: BTreeMap<String, Vec<String>>,
}

/// Normalized category string to symbol mapping. Immutable once built.
#[derive(Debug, Clone)]
pub struct CategoryTable {
    version: u32,
    entries: BTreeMap<String, (FashionSymbol, Provenance)>,
}

/// Lowercase, trim and collapse internal whitespace.
pub fn normalize_category(raw: &str) -> String {
    raw.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

impl CategoryTable {
    /// Parses a seed table in the `{"version": n, "entries": {...}}` format.
    pub fn from_json(json: &str) -> Result<Self> {
        let file: TableFile = serde_json::from_str(json)?;
        let mut entries = BTreeMap::new();
        for (raw, symbol) in file.entries {
            let key = normalize_category(&raw);
            if key.is_empty() {
                bail!(Schema, "empty category key in taxonomy table");
            }
            let provenance = if file.provenance.get("table").is_some_and(|v| v.contains(&raw)) {
                Provenance::Table
            } else if file
                .provenance
                .get("fashioniq")
                .is_some_and(|v| v.contains(&raw))
            {
                Provenance::Fashioniq
            } else {
                Provenance::Extension
            };
            if entries.insert(key.clone(), (symbol, provenance)).is_some() {
                bail!(Schema, "category `{key}` appears twice after normalization");
            }
        }
        Ok(Self {
            version: file.version,
            entries,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn version(&self) -> u32 {
        self.version
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, FashionSymbol, Provenance)> {
        self.entries.iter().map(|(k, (s, p))| (k.as_str(), *s, *p))
    }

    /// Exact lookup of an already-normalized key, trying a singular form on a miss.
    fn lookup(&self, key: &str) -> Option<FashionSymbol> {
        if let Some((symbol, _)) = self.entries.get(key) {
            return Some(*symbol);
        }
        key.strip_suffix('s')
            .filter(|k| !k.is_empty())
            .and_then(|k| self.entries.get(k))
            .map(|(s, _)| *s)
    }

    /// Like [`map_category`] but reports whether the fallback was taken.
    pub fn resolve(&self, category: &str) -> Result<(FashionSymbol, bool)> {
        let key = normalize_category(category);
        if key.is_empty() {
            bail!(InvalidInput, "category is empty");
        }
        match self.lookup(&key) {
            Some(symbol) => Ok((symbol, false)),
            None => Ok((FashionSymbol::Others, true)),
        }
    }
}

impl Default for CategoryTable {
    fn default() -> Self {
        Self::from_json(DEFAULT_TABLE_JSON).expect("bundled taxonomy table is valid")
    }
}

/// Maps a raw category string to its fashion symbol; unknown categories become `OTHERS`.
pub fn map_category(category: &str, table: &CategoryTable) -> Result<FashionSymbol> {
    let (symbol, fallback) = table.resolve(category)?;
    if fallback {
        log::warn!("unknown category `{}`, mapping to OTHERS", category.trim());
    }
    Ok(symbol)
}
