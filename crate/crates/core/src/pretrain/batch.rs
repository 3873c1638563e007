use rand::seq::index::sample;
use rand::Rng;

use crate::data_io::{FashionRecord, RawImage};
use crate::error::Result;
use crate::taxonomy::{map_category, CategoryTable, FashionSymbol};
use crate::textpipe::vocab::MASK_ID;
use crate::textpipe::{
    apply_mlm_masking, apply_ptp_blanking, apply_trp_corruption, layout_sequence, Attribute, LexicalResource,
    TokenId, TokenSequence, Vocabulary,
};

/// A supervised row: `(group, position, target)`.
pub type Target = (usize, usize, usize);

/// Every input stream of one pre-training step.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchBundle {
    pub item_ids: Vec<String>,
    pub symbols: Vec<FashionSymbol>,
    /// `[CLS] [SYMBOL] caption`.
    pub clean: Vec<TokenSequence>,
    pub mlm: Vec<TokenSequence>,
    pub mlm_targets: Vec<Target>,
    /// Prompt-appended, blanked sequences; only for records with attributes.
    pub prompt: Vec<TokenSequence>,
    /// Batch index of each prompt sequence.
    pub prompt_groups: Vec<usize>,
    /// Groups index into `prompt`.
    pub ptp_targets: Vec<Target>,
    pub trp: Vec<TokenSequence>,
    /// Target is 1 for replaced tokens.
    pub trp_labels: Vec<Target>,
    pub images: Vec<RawImage>,
}

impl BatchBundle {
    pub fn len(&self) -> usize {
        self.clean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clean.is_empty()
    }
}

/// Shared read-only resources for batch assembly.
#[derive(Clone, Copy)]
pub struct TextResources<'a> {
    pub vocab: &'a Vocabulary,
    pub lex: &'a LexicalResource,
    pub table: &'a CategoryTable,
    pub max_len: usize,
    pub mlm_ratio: f64,
    pub prompts_per_record: usize,
}

fn with_ids(seq: &TokenSequence, ids: Vec<TokenId>) -> TokenSequence {
    TokenSequence {
        ids,
        attention_mask: seq.attention_mask.clone(),
    }
}

/// Builds the clean, masked, prompt and corrupted streams for `records`.
/// Records with an empty caption are skipped with a warning.
pub fn build_batch<R: Rng + ?Sized>(
    records: &[&FashionRecord],
    images: &[&RawImage],
    res: &TextResources<'_>,
    rng: &mut R,
) -> Result<BatchBundle> {
    let mut b = BatchBundle {
        item_ids: Vec::new(),
        symbols: Vec::new(),
        clean: Vec::new(),
        mlm: Vec::new(),
        mlm_targets: Vec::new(),
        prompt: Vec::new(),
        prompt_groups: Vec::new(),
        ptp_targets: Vec::new(),
        trp: Vec::new(),
        trp_labels: Vec::new(),
        images: Vec::new(),
    };
    for (rec, img) in records.iter().zip(images) {
        if rec.caption.trim().is_empty() {
            log::warn!("record {} has no caption; skipped", rec.item_id);
            continue;
        }
        let group = b.clean.len();
        let symbol = map_category(&rec.category, res.table)?;
        let clean = layout_sequence(&rec.caption, Some(symbol), None, res.vocab, res.max_len)?;

        let masked = apply_mlm_masking(&clean.seq, res.mlm_ratio, rng)?;
        b.mlm_targets
            .extend(masked.targets.iter().map(|(&p, &t)| (group, p, t as usize)));
        b.mlm.push(with_ids(&clean.seq, masked.ids));

        let attrs = rec.attributes();
        let k = res.prompts_per_record.min(attrs.len());
        let chosen: Vec<&Attribute> = sample(rng, attrs.len(), k).into_iter().map(|i| &attrs[i]).collect();
        let parts = chosen.iter().map(|a| a.parts()).collect::<Result<Vec<_>>>()?;

        if !parts.is_empty() {
            let text = parts.iter().map(|p| p.text.as_str()).collect::<Vec<_>>().join(" ");
            let lay = layout_sequence(&rec.caption, Some(symbol), Some(&text), res.vocab, res.max_len)?;
            let mut ids = lay.seq.ids.clone();
            let mut offset = 0;
            let row = b.prompt.len();
            for p in &parts {
                let shift = |r: &std::ops::Range<usize>| r.start + offset..r.end + offset;
                let name = lay.prompt_span(&shift(&p.name_span));
                let value = lay.prompt_span(&shift(&p.value_span));
                let blanked = apply_ptp_blanking(&ids, name, value, rng)?;
                b.ptp_targets
                    .extend(blanked.targets.iter().map(|(&pos, &t)| (row, pos, t as usize)));
                ids = blanked.ids;
                offset += p.words.len();
            }
            b.prompt.push(with_ids(&lay.seq, ids));
            b.prompt_groups.push(group);
        }

        // caption plus the value words of the first chosen attribute
        let first = parts.first();
        let trp_lay = layout_sequence(
            &rec.caption,
            Some(symbol),
            first.map(|p| p.text.as_str()),
            res.vocab,
            res.max_len,
        )?;
        let mut positions: Vec<usize> = trp_lay.caption.clone().collect();
        if let Some(p) = first {
            positions.extend(trp_lay.prompt_span(&p.value_span));
        }
        let cap_ids: Vec<TokenId> = positions.iter().map(|&i| trp_lay.seq.ids[i]).collect();
        let out = apply_trp_corruption(&cap_ids, &[], res.lex, res.vocab, rng);
        let mut ids = trp_lay.seq.ids.clone();
        for (j, &pos) in positions.iter().enumerate() {
            ids[pos] = out.ids[j];
            b.trp_labels.push((group, pos, out.labels[j] as usize));
        }
        debug_assert!(ids.iter().all(|&i| i != MASK_ID));
        b.trp.push(with_ids(&trp_lay.seq, ids));

        b.item_ids.push(rec.item_id.clone());
        b.symbols.push(symbol);
        b.clean.push(clean.seq);
        b.images.push((*img).clone());
    }
    Ok(b)
}
