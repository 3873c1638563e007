//! Corpus records, image containers, the synthetic corpus generator and configuration files.

pub mod config;
pub mod corpus;
pub mod image;
pub mod prep;
pub mod synth;

pub use corpus::{load_corpus, load_images, load_tmir, write_corpus, write_tmir, FashionRecord, Split, TmirTriple};
pub use image::{write_pgm, RawImage};
pub use synth::{generate_synthetic, synthesize, ItemSpec, SynthCorpus, SynthPaths, SynthSpec};
pub use config::{apply_seed_override, parse_config, parse_config_str, SEED_ENV};
pub use prep::{preprocess, preprocess_files, substitute_attribute};
