//! Stochastic input constructions: prompt blanking, masked-LM masking, token replacement
//! and synonym substitution. All are pure functions of their inputs and the generator.

use std::collections::BTreeMap;
use std::ops::Range;

use rand::seq::index::sample;
use rand::Rng;

use super::lexicon::LexicalResource;
use super::vocab::{is_special, TokenId, TokenSequence, Vocabulary, BLANK_ID, FIRST_WORD_ID, MASK_ID};
use crate::error::{bail, Result};

/// Fraction of the caption+value stream chosen for replacement.
pub const TRP_RATIO_PERCENT: usize = 15;
pub const MLM_RATIO: f64 = 0.15;

/// Which slot of the prompt was blanked.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlankBranch {
    Name,
    Value,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Blanked {
    pub ids: Vec<TokenId>,
    /// Position -> original id, at blanked positions only.
    pub targets: BTreeMap<usize, TokenId>,
    pub branch: BlankBranch,
}

/// Blanks the whole value span with probability 0.5, otherwise the whole name span.
pub fn apply_ptp_blanking<R: Rng + ?Sized>(
    ids: &[TokenId],
    name_span: Range<usize>,
    value_span: Range<usize>,
    rng: &mut R,
) -> Result<Blanked> {
    if name_span.end > ids.len() || value_span.end > ids.len() {
        bail!(InvalidInput, "attribute span lies outside the sequence");
    }
    if name_span.start < value_span.end && value_span.start < name_span.end {
        bail!(InvalidInput, "name and value spans overlap");
    }
    let branch = if rng.random_bool(0.5) {
        BlankBranch::Value
    } else {
        BlankBranch::Name
    };
    let span = match branch {
        BlankBranch::Value => value_span,
        BlankBranch::Name => name_span,
    };
    let mut out = ids.to_vec();
    let mut targets = BTreeMap::new();
    if span.is_empty() {
        log::debug!("selected prompt span is empty, nothing blanked");
    }
    for pos in span {
        targets.insert(pos, out[pos]);
        out[pos] = BLANK_ID;
    }
    Ok(Blanked {
        ids: out,
        targets,
        branch,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Masked {
    pub ids: Vec<TokenId>,
    pub targets: BTreeMap<usize, TokenId>,
}

/// Replaces `ceil(ratio * n)` of the `n` unpadded non-special positions by `[MASK]`.
pub fn apply_mlm_masking<R: Rng + ?Sized>(
    seq: &TokenSequence,
    ratio: f64,
    rng: &mut R,
) -> Result<Masked> {
    if !(ratio > 0.0 && ratio < 1.0) {
        bail!(InvalidConfig, "mask ratio {ratio} outside (0, 1)");
    }
    let eligible: Vec<usize> = (0..seq.len())
        .filter(|&i| seq.attention_mask[i] == 1 && !is_special(seq.ids[i]))
        .collect();
    let mut ids = seq.ids.clone();
    let mut targets = BTreeMap::new();
    if eligible.is_empty() {
        return Ok(Masked { ids, targets });
    }
    let k = ((ratio * eligible.len() as f64).ceil() as usize).min(eligible.len());
    for j in sample(rng, eligible.len(), k) {
        let pos = eligible[j];
        targets.insert(pos, ids[pos]);
        ids[pos] = MASK_ID;
    }
    Ok(Masked { ids, targets })
}

/// How a position of a corrupted stream was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Replacement {
    Kept,
    Antonym,
    /// Assigned to the antonym half but no usable antonym exists.
    AntonymFallback,
    Random,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorruptionOutcome {
    pub ids: Vec<TokenId>,
    pub original: Vec<TokenId>,
    /// 1 where the token was replaced.
    pub labels: Vec<u8>,
    pub kinds: Vec<Replacement>,
}

impl CorruptionOutcome {
    /// Original ids at replaced positions.
    pub fn targets(&self) -> BTreeMap<usize, TokenId> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == 1)
            .map(|(i, _)| (i, self.original[i]))
            .collect()
    }
}

fn random_other_word<R: Rng + ?Sized>(vocab: &Vocabulary, original: TokenId, rng: &mut R) -> TokenId {
    let n = vocab.num_words() as TokenId;
    assert!(n >= 2, "vocabulary needs at least two words for replacement");
    loop {
        let id = FIRST_WORD_ID + rng.random_range(0..n);
        if id != original {
            return id;
        }
    }
}

/// Number of positions chosen from a stream of `n` tokens: `ceil(0.15 n)`.
pub fn trp_count(n: usize) -> usize {
    (n * TRP_RATIO_PERCENT).div_ceil(100)
}

/// Corrupts the stream `caption ++ value`: `ceil(0.15 n)` positions are chosen uniformly;
/// half go to antonym replacement and half to random vocabulary tokens. When the count is
/// odd the extra position joins either half with probability 0.5.
pub fn apply_trp_corruption<R: Rng + ?Sized>(
    caption_ids: &[TokenId],
    value_ids: &[TokenId],
    lex: &LexicalResource,
    vocab: &Vocabulary,
    rng: &mut R,
) -> CorruptionOutcome {
    let original: Vec<TokenId> = caption_ids.iter().chain(value_ids).copied().collect();
    let n = original.len();
    let mut ids = original.clone();
    let mut labels = vec![0u8; n];
    let mut kinds = vec![Replacement::Kept; n];
    let k = trp_count(n);
    let antonym_count = k / 2 + usize::from(k % 2 == 1 && rng.random_bool(0.5));
    for (j, pos) in sample(rng, n, k).into_iter().enumerate() {
        let orig = original[pos];
        let (new, kind) = if j < antonym_count {
            let antonym = vocab
                .token(orig)
                .and_then(|w| lex.antonym(w))
                .and_then(|a| vocab.id(a))
                .filter(|&a| a != orig);
            match antonym {
                Some(a) => (a, Replacement::Antonym),
                None => (random_other_word(vocab, orig, rng), Replacement::AntonymFallback),
            }
        } else {
            (random_other_word(vocab, orig, rng), Replacement::Random)
        };
        ids[pos] = new;
        labels[pos] = 1;
        kinds[pos] = kind;
    }
    CorruptionOutcome {
        ids,
        original,
        labels,
        kinds,
    }
}

/// Replaces one randomly chosen word that has synonyms by one of them.
pub fn synonym_substitute<R: Rng + ?Sized>(text: &str, lex: &LexicalResource, rng: &mut R) -> String {
    let mut toks: Vec<String> = text.split_whitespace().map(str::to_string).collect();
    let candidates: Vec<usize> = toks
        .iter()
        .enumerate()
        .filter(|(_, w)| !lex.synonyms(&w.to_lowercase()).is_empty())
        .map(|(i, _)| i)
        .collect();
    if candidates.is_empty() {
        return text.to_string();
    }
    let pos = candidates[rng.random_range(0..candidates.len())];
    let syns = lex.synonyms(&toks[pos].to_lowercase());
    toks[pos] = syns[rng.random_range(0..syns.len())].clone();
    toks.join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxonomy::FashionSymbol;
    use crate::textpipe::prompt::{build_pretrain_sequence, layout_sequence, Attribute, EnumAttribute};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vocab() -> Vocabulary {
        Vocabulary::build(
            "the image attribute season is summer long short red blue a b c d e f g h i j k l m n o p q r s t"
                .split(' '),
        )
    }

    fn prompt_layout(v: &Vocabulary) -> (Vec<TokenId>, Range<usize>, Range<usize>) {
        let parts = Attribute::Enum(EnumAttribute {
            name: "season".into(),
            value: "summer".into(),
        })
        .parts()
        .unwrap();
        let l = layout_sequence("red", Some(FashionSymbol::Tops), Some(&parts.text), v, 16).unwrap();
        let (n, val) = (l.prompt_span(&parts.name_span), l.prompt_span(&parts.value_span));
        (l.seq.ids, n, val)
    }

    #[test]
    fn blanking_both_branches() {
        let v = vocab();
        let (ids, name, value) = prompt_layout(&v);
        let mut seen = [false, false];
        for seed in 0..64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b = apply_ptp_blanking(&ids, name.clone(), value.clone(), &mut rng).unwrap();
            match b.branch {
                BlankBranch::Value => {
                    seen[0] = true;
                    assert_eq!(b.ids[value.start], BLANK_ID);
                    assert_eq!(b.targets, BTreeMap::from([(value.start, v.id("summer").unwrap())]));
                    assert_eq!(b.ids[name.start], v.id("season").unwrap());
                }
                BlankBranch::Name => {
                    seen[1] = true;
                    assert_eq!(b.ids[name.start], BLANK_ID);
                    assert_eq!(b.targets, BTreeMap::from([(name.start, v.id("season").unwrap())]));
                }
            }
        }
        assert!(seen[0] && seen[1]);
    }

    #[test]
    fn blanking_rejects_bad_spans() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(apply_ptp_blanking(&[1, 2, 3], 0..2, 1..3, &mut rng).is_err());
        assert!(apply_ptp_blanking(&[1, 2, 3], 0..1, 2..5, &mut rng).is_err());
    }

    #[test]
    fn mlm_masks_ceiling_count() {
        let v = vocab();
        let caption: String = "a b c d e f g h i j k l m n o p q r s t".into();
        let seq = build_pretrain_sequence(&caption, FashionSymbol::Pants, None, &v, 24).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = apply_mlm_masking(&seq, MLM_RATIO, &mut rng).unwrap();
        assert_eq!(m.targets.len(), 3);
        assert!(!m.targets.contains_key(&0) && !m.targets.contains_key(&1));
        for (&p, &orig) in &m.targets {
            assert_eq!(m.ids[p], MASK_ID);
            assert_eq!(seq.ids[p], orig);
        }
    }

    #[test]
    fn mlm_on_all_special_sequence_is_noop() {
        let seq = TokenSequence::from_ids(vec![1, 4], 6);
        let m = apply_mlm_masking(&seq, 0.15, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(m.targets.is_empty());
        assert_eq!(m.ids, seq.ids);
        assert!(apply_mlm_masking(&seq, 1.0, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn trp_count_and_labels() {
        let v = vocab();
        let lex = LexicalResource::bundled();
        let caption: Vec<TokenId> = (0..19).map(|i| FIRST_WORD_ID + i).collect();
        let value = [v.id("summer").unwrap()];
        for seed in 0..20 {
            let out = apply_trp_corruption(&caption, &value, &lex, &v, &mut ChaCha8Rng::seed_from_u64(seed));
            assert_eq!(out.labels.iter().filter(|&&l| l == 1).count(), 3);
            for i in 0..out.ids.len() {
                assert_eq!(out.labels[i] == 1, out.ids[i] != out.original[i]);
            }
        }
        assert_eq!(trp_count(20), 3);
        assert_eq!(trp_count(1), 1);
        assert_eq!(trp_count(0), 0);
    }

    #[test]
    fn trp_uses_antonym_when_assigned() {
        let v = vocab();
        let lex = LexicalResource::bundled();
        let long = v.id("long").unwrap();
        // a single-token stream gets k=1, assigned to the antonym half half of the time
        let mut hit = false;
        for seed in 0..32 {
            let out = apply_trp_corruption(&[long], &[], &lex, &v, &mut ChaCha8Rng::seed_from_u64(seed));
            if out.kinds[0] == Replacement::Antonym {
                assert_eq!(out.ids[0], v.id("short").unwrap());
                hit = true;
            }
        }
        assert!(hit);
    }

    #[test]
    fn synonym_substitution() {
        let lex = LexicalResource {
            synonyms: BTreeMap::from([("jacket".to_string(), vec!["coat".to_string()])]),
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(synonym_substitute("jacket", &lex, &mut rng), "coat");
        assert_eq!(
            synonym_substitute("jacket", &LexicalResource::default(), &mut rng),
            "jacket"
        );
        let a = synonym_substitute("red season", &LexicalResource::bundled(), &mut ChaCha8Rng::seed_from_u64(9));
        let b = synonym_substitute("red season", &LexicalResource::bundled(), &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }
}
