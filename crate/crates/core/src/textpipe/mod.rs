//! Text side of the pipeline: vocabulary and tokenization, attribute prompt templates,
//! and the randomized input variants used by the text objectives.

pub mod corrupt;
pub mod lexicon;
pub mod prompt;
pub mod vocab;

pub use corrupt::{
    apply_mlm_masking, apply_ptp_blanking, apply_trp_corruption, synonym_substitute, BlankBranch,
    Blanked, CorruptionOutcome, Masked, Replacement,
};
pub use lexicon::LexicalResource;
pub use prompt::{
    build_pretrain_sequence, layout_sequence, render_binary_prompt, render_enum_prompt, Attribute,
    BinaryAttribute, EnumAttribute, PromptParts, SequenceLayout,
};
pub use vocab::{detokenize, tokenize, words, TokenId, TokenSequence, Vocabulary};
