use std::io::Write;

use rand::seq::index::sample;
use serde_json::json;

use super::retrieval::caption_sequences;
use super::FinetuneConfig;
use crate::data_io::{FashionRecord, RawImage};
use crate::error::{bail, Error, Result};
use crate::objectives::LossReport;
use crate::pretrain::{pretrain_step, step_rng, AdamW, BatchBundle, FeatureQueue, LossSet, Trainer};
use crate::textpipe::Vocabulary;

/// A batch carrying only `[CLS] caption` sequences and images.
pub fn retrieval_batch(
    records: &[&FashionRecord],
    images: &[&RawImage],
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<BatchBundle> {
    if records.len() != images.len() {
        bail!(InvalidInput, "{} records but {} images", records.len(), images.len());
    }
    let owned: Vec<FashionRecord> = records.iter().map(|&r| r.clone()).collect();
    Ok(BatchBundle {
        item_ids: owned.iter().map(|r| r.item_id.clone()).collect(),
        symbols: Vec::new(),
        clean: caption_sequences(&owned, vocab, max_len)?,
        mlm: Vec::new(),
        mlm_targets: Vec::new(),
        prompt: Vec::new(),
        prompt_groups: Vec::new(),
        ptp_targets: Vec::new(),
        trp: Vec::new(),
        trp_labels: Vec::new(),
        images: images.iter().map(|&i| i.clone()).collect(),
    })
}

/// Continues training a pre-trained model on the similarity and matching losses only.
/// The optimizer and the feature queue start fresh; the momentum encoder is kept.
/// Writes `{"step","its","itm","total"}` lines to `log` when given.
pub fn finetune_retrieval(
    trainer: &mut Trainer,
    records: &[FashionRecord],
    images: &[RawImage],
    ft: &FinetuneConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<Vec<LossReport>> {
    ft.validate()?;
    if records.len() < 2 || records.len() != images.len() {
        bail!(InvalidInput, "need at least 2 records with one image each");
    }
    let cfg = trainer.model.clone();
    trainer.state.optimizer = AdamW::new(ft.adamw(), &trainer.state.pair.online);
    trainer.state.queue = FeatureQueue::new(cfg.queue_size, cfg.d);
    let settings = crate::pretrain::StepSettings {
        losses: LossSet::RETRIEVAL,
        ..trainer.settings()
    };
    let mut reports = Vec::with_capacity(ft.steps as usize);
    for step in 0..ft.steps {
        let mut rng = step_rng(ft.seed, step);
        let pick = sample(&mut rng, records.len(), ft.batch_size.min(records.len())).into_vec();
        let recs: Vec<&FashionRecord> = pick.iter().map(|&i| &records[i]).collect();
        let imgs: Vec<&RawImage> = pick.iter().map(|&i| &images[i]).collect();
        let batch = retrieval_batch(&recs, &imgs, &trainer.vocab, cfg.max_text_len)?;
        let report = pretrain_step(&mut trainer.state, &cfg, &batch, &settings, &mut rng)?;
        if let Some(w) = log.as_deref_mut() {
            let line = json!({"step": step, "its": report.its, "itm": report.itm, "total": report.total});
            writeln!(w, "{line}").map_err(|e| Error::io("finetune log", e))?;
        }
        reports.push(report);
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_io::corpus::build_vocabulary;
    use crate::data_io::{synthesize, SynthSpec};
    use crate::model::ModelConfig;
    use crate::pretrain::TrainConfig;
    use crate::textpipe::LexicalResource;

    #[test]
    fn log_has_only_retrieval_parts() {
        let c = synthesize(&SynthSpec { n_items: 6, ..Default::default() }).unwrap();
        let vocab = build_vocabulary(&c.records, &[], &LexicalResource::bundled());
        let mut t = Trainer::new(ModelConfig::desk(), TrainConfig::desk(), vocab).unwrap();
        let mut buf = Vec::new();
        let ft = FinetuneConfig { steps: 3, batch_size: 4, ..Default::default() };
        let reports = finetune_retrieval(&mut t, &c.records, &c.images, &ft, Some(&mut buf)).unwrap();
        for r in &reports {
            assert_eq!((r.fsis, r.ptp, r.trp), (0.0, 0.0, 0.0));
            assert!((r.total - (r.its + r.itm)).abs() < 1e-12);
        }
        let text = String::from_utf8(buf).unwrap();
        for line in text.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
            assert_eq!(keys, vec!["itm", "its", "step", "total"]);
        }
        assert_eq!(text.lines().count(), 3);
    }

    #[test]
    fn batch_has_no_symbol() {
        let c = synthesize(&SynthSpec { n_items: 3, ..Default::default() }).unwrap();
        let vocab = build_vocabulary(&c.records, &[], &LexicalResource::bundled());
        let recs: Vec<&FashionRecord> = c.records.iter().collect();
        let imgs: Vec<&RawImage> = c.images.iter().collect();
        let b = retrieval_batch(&recs, &imgs, &vocab, 24).unwrap();
        let first = crate::textpipe::words(&c.records[0].caption)[0].clone();
        assert_eq!(b.clean[0].ids[1], vocab.encode_word(&first));
        assert!(b.symbols.is_empty());
    }
}
