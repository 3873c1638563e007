use std::path::Path;

use rand::Rng;

use super::corpus::{build_vocabulary, load_corpus, write_corpus, FashionRecord};
use crate::error::Result;
use crate::pretrain::step_rng;
use crate::textpipe::{synonym_substitute, LexicalResource, Vocabulary};

/// Replaces a word of one uniformly chosen attribute field (enum name, enum value or binary
/// label) by a synonym; records without attributes, or fields without synonyms, are unchanged.
pub fn substitute_attribute<R: Rng + ?Sized>(rec: &FashionRecord, lex: &LexicalResource, rng: &mut R) -> FashionRecord {
    let mut out = rec.clone();
    let n_enum = out.enum_attrs.len();
    let fields = 2 * n_enum + out.binary_attrs.len();
    if fields == 0 {
        return out;
    }
    let k = rng.random_range(0..fields);
    let slot = if k < 2 * n_enum {
        let a = &mut out.enum_attrs[k / 2];
        if k % 2 == 0 {
            &mut a.name
        } else {
            &mut a.value
        }
    } else {
        &mut out.binary_attrs[k - 2 * n_enum].label
    };
    *slot = synonym_substitute(slot, lex, rng);
    out
}

/// Record `i` draws from the stream `(seed, i)`, so output does not depend on sharding.
pub fn preprocess(records: &[FashionRecord], lex: &LexicalResource, seed: u64) -> Vec<FashionRecord> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| substitute_attribute(r, lex, &mut step_rng(seed, i as u64)))
        .collect()
}

/// Reads `input`, writes the substituted corpus to `out` and its vocabulary to `vocab_out`.
pub fn preprocess_files(input: &Path, vocab_out: &Path, lex: &LexicalResource, seed: u64, out: &Path) -> Result<Vocabulary> {
    let records = load_corpus(input)?;
    let prepped = preprocess(&records, lex, seed);
    let vocab = build_vocabulary(&prepped, &[], lex);
    write_corpus(out, &prepped)?;
    vocab.save(vocab_out)?;
    Ok(vocab)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_io::{synthesize, SynthSpec};

    fn lex() -> LexicalResource {
        LexicalResource::from_json(r#"{"antonyms": {}, "synonyms": {"color": ["colour"], "red": ["crimson"]}}"#).unwrap()
    }

    #[test]
    fn exactly_one_field_changes_at_most() {
        let c = synthesize(&SynthSpec { n_items: 40, ..Default::default() }).unwrap();
        let out = preprocess(&c.records, &lex(), 3);
        let mut changed = 0;
        for (a, b) in c.records.iter().zip(&out) {
            assert_eq!(a.caption, b.caption);
            let diffs = a.enum_attrs.iter().zip(&b.enum_attrs).map(|(x, y)| (x.name != y.name) as usize + (x.value != y.value) as usize).sum::<usize>()
                + a.binary_attrs.iter().zip(&b.binary_attrs).filter(|(x, y)| x.label != y.label).count();
            assert!(diffs <= 1);
            changed += diffs;
        }
        assert!(changed > 0);
        assert_eq!(out, preprocess(&c.records, &lex(), 3));
    }

    #[test]
    fn empty_lexicon_is_identity() {
        let c = synthesize(&SynthSpec { n_items: 10, ..Default::default() }).unwrap();
        let empty = LexicalResource::from_json(r#"{"antonyms": {}, "synonyms": {}}"#).unwrap();
        assert_eq!(preprocess(&c.records, &empty, 1), c.records);
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let c = synthesize(&SynthSpec { n_items: 8, ..Default::default() }).unwrap();
        let input = dir.path().join("in.jsonl");
        write_corpus(&input, &c.records).unwrap();
        let (vp, op) = (dir.path().join("vocab.txt"), dir.path().join("prepped.jsonl"));
        let v = preprocess_files(&input, &vp, &lex(), 5, &op).unwrap();
        assert_eq!(Vocabulary::load(&vp).unwrap(), v);
        assert_eq!(load_corpus(&op).unwrap().len(), 8);
        assert!(v.id("colour").is_some() || v.id("crimson").is_some() || v.id("red").is_some());
    }
}
