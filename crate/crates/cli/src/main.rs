use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use fashionsap::data_io::corpus::build_vocabulary;
use fashionsap::data_io::{
    generate_synthetic, load_corpus, load_images, load_tmir, parse_config, preprocess_files, FashionRecord, RawImage,
    Split, SynthSpec,
};
use fashionsap::downstream::{
    evaluate_classifier, finetune_classify, finetune_retrieval, finetune_tmir, full_protocol_eval, grad_cam,
    init_classifier_heads, init_tmir_head, subset_protocol_eval, tmir_evaluate, FinetuneConfig, LabelMaps,
    ModelBundle, ProtocolConfig, RetrievalIndex, TmirSample,
};
use fashionsap::model::checkpoint::Checkpoint;
use fashionsap::model::ModelConfig;
use fashionsap::pretrain::{pretrain, step_rng, PretrainInputs, TrainConfig, Trainer};
use fashionsap::taxonomy::{map_category, CategoryTable};
use fashionsap::textpipe::{layout_sequence, LexicalResource, Vocabulary};

#[derive(Parser, Debug)]
#[command(name = "fashionsap", version, about = "Fashion vision-language pre-training toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Category table queries.
    Taxonomy {
        #[command(subcommand)]
        command: TaxonomyCommand,
    },
    /// Writes a synthetic corpus, TMIR triples and images.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        items: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        image_size: usize,
    },
    /// Attribute synonym substitution and vocabulary construction.
    Preprocess {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// Lexical resource; the bundled one when absent.
        #[arg(long)]
        lex: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    Pretrain(PretrainArgs),
    Finetune {
        #[command(subcommand)]
        task: FinetuneTask,
    },
    Eval {
        #[command(subcommand)]
        task: EvalTask,
    },
    /// Cross-attention map of one caption word over the image patches.
    Gradcam {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        item: String,
        #[arg(long)]
        word: String,
        #[arg(long, default_value_t = 1)]
        layer: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand, Debug)]
enum TaxonomyCommand {
    /// Prints the fashion symbol of a category.
    Lookup {
        category: String,
        #[arg(long)]
        table: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct PretrainArgs {
    /// Flat JSON of model and training fields; desk defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Vocabulary file; built from the corpus when absent.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    lex: Option<PathBuf>,
    #[arg(long)]
    table: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DataArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    images: PathBuf,
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 300)]
    steps: u64,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl FinetuneArgs {
    fn config(&self) -> FinetuneConfig {
        FinetuneConfig {
            lr: self.lr,
            batch_size: self.batch_size,
            steps: self.steps,
            seed: self.seed,
            ..FinetuneConfig::default()
        }
    }
}

#[derive(Subcommand, Debug)]
enum FinetuneTask {
    Retrieval {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        ft: FinetuneArgs,
        /// Per-step loss log (JSONL).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    Classify {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        ft: FinetuneArgs,
    },
    Tmir {
        /// TMIR triples (JSONL).
        #[arg(long)]
        triples: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[command(flatten)]
        ft: FinetuneArgs,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Protocol {
    Subset,
    Full,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

impl SplitArg {
    fn keeps(self, s: Split) -> bool {
        match self {
            SplitArg::Train => s == Split::Train,
            SplitArg::Val => s == Split::Val,
            SplitArg::Test => s == Split::Test,
            SplitArg::All => true,
        }
    }
}

#[derive(Args, Debug)]
struct EvalCommon {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Also writes the JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum EvalTask {
    Retrieval {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        common: EvalCommon,
        #[arg(long, value_enum, default_value = "subset")]
        protocol: Protocol,
        #[arg(long, default_value_t = 100)]
        queries: usize,
        #[arg(long, default_value_t = 7)]
        negatives: usize,
        #[arg(long, default_value_t = 5)]
        sets: usize,
        #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
        k: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Inserts the category symbol into the text side, as in pre-training.
        #[arg(long)]
        symbols: bool,
        #[arg(long)]
        table: Option<PathBuf>,
    },
    Classify {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        common: EvalCommon,
    },
    Tmir {
        #[arg(long)]
        triples: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[command(flatten)]
        common: EvalCommon,
        /// Gallery size: the target images of the first N selected triples.
        #[arg(long, default_value_t = 50)]
        gallery: usize,
        #[arg(long, value_delimiter = ',', default_value = "1,10,50")]
        k: Vec<usize>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Taxonomy {
            command: TaxonomyCommand::Lookup { category, table },
        } => {
            let table = load_table(table.as_deref())?;
            println!("{}", map_category(&category, &table)?.name());
        }
        Command::Synth {
            out,
            items,
            seed,
            image_size,
        } => {
            let spec = SynthSpec {
                n_items: items,
                seed,
                image_size,
                ..SynthSpec::default()
            };
            let paths = generate_synthetic(&spec, &out)?;
            println!("{}", paths.corpus.display());
        }
        Command::Preprocess {
            input,
            vocab,
            lex,
            seed,
            out,
        } => {
            let lex = load_lex(lex.as_deref())?;
            let v = preprocess_files(&input, &vocab, &lex, seed, &out)?;
            log::info!("vocabulary of {} tokens", v.len());
        }
        Command::Pretrain(a) => run_pretrain(a)?,
        Command::Finetune { task } => run_finetune(task)?,
        Command::Eval { task } => run_eval(task)?,
        Command::Gradcam {
            data,
            ckpt,
            item,
            word,
            layer,
            out,
        } => {
            let b = ModelBundle::load(&ckpt)?;
            let records = load_corpus(&data.corpus)?;
            let rec = records
                .iter()
                .find(|r| r.item_id == item)
                .ok_or_else(|| anyhow!("no item `{item}` in {}", data.corpus.display()))?;
            let image = RawImage::load_resized(&rec.image_path(&data.images), b.config.image_size)?;
            let layout = layout_sequence(&rec.caption, None, None, &b.vocab, b.config.max_text_len)?;
            let id = b.vocab.id(&word.to_lowercase()).ok_or_else(|| anyhow!("`{word}` is not in the vocabulary"))?;
            let pos = layout
                .caption
                .clone()
                .find(|&p| layout.seq.ids[p] == id)
                .ok_or_else(|| anyhow!("`{word}` does not occur in the caption of `{item}`"))?;
            let map = grad_cam(b.view(), &layout.seq, &image, layer, pos)?;
            map.write_pgm(&out)?;
        }
    }
    Ok(())
}

fn load_table(path: Option<&Path>) -> Result<CategoryTable> {
    Ok(match path {
        Some(p) => CategoryTable::load(p)?,
        None => CategoryTable::default(),
    })
}

fn load_lex(path: Option<&Path>) -> Result<LexicalResource> {
    Ok(match path {
        Some(p) => LexicalResource::load(p)?,
        None => LexicalResource::bundled(),
    })
}

fn load_split(data: &DataArgs, split: SplitArg, size: usize) -> Result<(Vec<FashionRecord>, Vec<RawImage>)> {
    let records: Vec<FashionRecord> = load_corpus(&data.corpus)?.into_iter().filter(|r| split.keeps(r.split)).collect();
    if records.is_empty() {
        bail!("no records in the {split:?} split of {}", data.corpus.display());
    }
    let images = load_images(&records, &data.images, size)?;
    Ok((records, images))
}

fn run_pretrain(a: PretrainArgs) -> Result<()> {
    let (model, mut train) = match &a.config {
        Some(p) => parse_config(p)?,
        None => {
            let mut t = TrainConfig::desk();
            if let Ok(v) = std::env::var(fashionsap::data_io::SEED_ENV) {
                fashionsap::data_io::apply_seed_override(&mut t, Some(&v))?;
            }
            (ModelConfig::desk(), t)
        }
    };
    if let Some(s) = a.seed {
        train.seed = s;
    }
    if let Some(s) = a.steps {
        train.steps = s;
    }
    let lex = load_lex(a.lex.as_deref())?;
    let table = load_table(a.table.as_deref())?;
    let records = load_corpus(&a.corpus)?;
    let images = load_images(&records, &a.images, model.image_size)?;
    let vocab = match &a.vocab {
        Some(p) => Vocabulary::load(p)?,
        None => build_vocabulary(&records, &[], &lex),
    };
    let inputs = PretrainInputs {
        records: &records,
        images: &images,
        vocab,
        lex: &lex,
        table: &table,
    };
    let path = pretrain(model, train, inputs, &a.out, a.resume.as_deref())?;
    println!("{}", path.display());
    Ok(())
}

fn run_finetune(task: FinetuneTask) -> Result<()> {
    match task {
        FinetuneTask::Retrieval { data, ft, log } => {
            let ck = Checkpoint::load(&ft.ckpt)?;
            let b = ModelBundle::from_checkpoint(&ck)?;
            let train: TrainConfig = match ck.metadata.get("train_config") {
                Some(v) => serde_json::from_value(v.clone())?,
                None => TrainConfig::desk(),
            };
            let (records, images) = load_split(&data, SplitArg::Train, b.config.image_size)?;
            let mut trainer = Trainer::from_params(b.config.clone(), train, b.vocab.clone(), b.params)?;
            let mut sink = match &log {
                Some(p) => Some(File::create(p).with_context(|| format!("creating {}", p.display()))?),
                None => None,
            };
            let reports = finetune_retrieval(
                &mut trainer,
                &records,
                &images,
                &ft.config(),
                sink.as_mut().map(|f| f as &mut dyn Write),
            )?;
            if let Some(r) = reports.last() {
                log::info!("final loss {:.4}", r.total);
            }
            let out = ModelBundle {
                kind: "retrieval".into(),
                params: trainer.state.pair.online,
                ..ModelBundle::from_checkpoint(&ck)?
            };
            out.save(&ft.out)?;
        }
        FinetuneTask::Classify { data, ft } => {
            let mut b = ModelBundle::load(&ft.ckpt)?;
            let (records, images) = load_split(&data, SplitArg::Train, b.config.image_size)?;
            let labels = LabelMaps::from_records(&records);
            init_classifier_heads(&mut b.params, &b.config, &labels, &mut step_rng(ft.seed, u64::MAX));
            finetune_classify(&b.config, &mut b.params, &b.vocab, &labels, &records, &images, &ft.config())?;
            b.kind = "classify".into();
            b.labels = Some(labels);
            b.save(&ft.out)?;
        }
        FinetuneTask::Tmir { triples, images, ft } => {
            let mut b = ModelBundle::load(&ft.ckpt)?;
            let triples: Vec<_> = load_tmir(&triples)?.into_iter().filter(|t| t.split == Split::Train).collect();
            if triples.len() < 2 {
                bail!("TMIR fine-tuning needs at least 2 training triples");
            }
            let size = b.config.image_size;
            let cands = triples
                .iter()
                .map(|t| RawImage::load_resized(&images.join(&t.candidate_image), size))
                .collect::<fashionsap::Result<Vec<_>>>()?;
            let targets = triples
                .iter()
                .map(|t| RawImage::load_resized(&images.join(&t.target_image), size))
                .collect::<fashionsap::Result<Vec<_>>>()?;
            let samples: Vec<TmirSample> = triples
                .iter()
                .zip(cands.iter().zip(&targets))
                .map(|(t, (c, g))| TmirSample {
                    text: &t.text,
                    candidate: c,
                    target: g,
                    target_id: &t.target_id,
                })
                .collect();
            init_tmir_head(&mut b.params, &b.config, &mut step_rng(ft.seed, u64::MAX));
            finetune_tmir(&b.config, &mut b.params, &b.vocab, &samples, &ft.config())?;
            b.kind = "tmir".into();
            b.save(&ft.out)?;
        }
    }
    Ok(())
}

fn emit(report: serde_json::Value, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string(&report)?;
    println!("{text}");
    if let Some(p) = out {
        std::fs::write(p, format!("{text}\n")).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn run_eval(task: EvalTask) -> Result<()> {
    match task {
        EvalTask::Retrieval {
            data,
            common,
            protocol,
            queries,
            negatives,
            sets,
            k,
            seed,
            symbols,
            table,
        } => {
            let b = ModelBundle::load(&common.ckpt)?;
            let (records, images) = load_split(&data, common.split, b.config.image_size)?;
            let table = if symbols { Some(load_table(table.as_deref())?) } else { None };
            let index = RetrievalIndex::build_with_symbols(b.view(), &records, &images, &b.vocab, table.as_ref())?;
            let report = match protocol {
                Protocol::Subset => {
                    let subs: Vec<String> = records.iter().map(|r| r.subcategory.clone()).collect();
                    let cfg = ProtocolConfig {
                        n_queries: queries,
                        n_negatives: negatives,
                        n_sets: sets,
                        seed,
                        ks: k,
                    };
                    subset_protocol_eval(&index, &subs, &cfg)?
                }
                Protocol::Full => full_protocol_eval(&index, &k)?,
            };
            emit(report.to_json(), common.out.as_deref())?;
        }
        EvalTask::Classify { data, common } => {
            let b = ModelBundle::load(&common.ckpt)?;
            let labels = b
                .labels
                .as_ref()
                .ok_or_else(|| anyhow!("{} is not a classification checkpoint", common.ckpt.display()))?;
            let (records, images) = load_split(&data, common.split, b.config.image_size)?;
            let r = evaluate_classifier(b.view(), labels, &records, &images, &b.vocab)?;
            emit(serde_json::to_value(r)?, common.out.as_deref())?;
        }
        EvalTask::Tmir {
            triples,
            images,
            common,
            gallery,
            k,
        } => {
            let b = ModelBundle::load(&common.ckpt)?;
            let triples: Vec<_> = load_tmir(&triples)?.into_iter().filter(|t| common.split.keeps(t.split)).take(gallery).collect();
            if triples.is_empty() {
                bail!("no TMIR triples in the {:?} split", common.split);
            }
            let size = b.config.image_size;
            let load = |name: &str| RawImage::load_resized(&images.join(name), size);
            let cands = triples.iter().map(|t| load(&t.candidate_image)).collect::<fashionsap::Result<Vec<_>>>()?;
            let targets = triples.iter().map(|t| load(&t.target_image)).collect::<fashionsap::Result<Vec<_>>>()?;
            let samples: Vec<TmirSample> = triples
                .iter()
                .zip(cands.iter().zip(&targets))
                .map(|(t, (c, g))| TmirSample {
                    text: &t.text,
                    candidate: c,
                    target: g,
                    target_id: &t.target_id,
                })
                .collect();
            let gal: Vec<(&str, &RawImage)> = triples.iter().zip(&targets).map(|(t, g)| (t.target_id.as_str(), g)).collect();
            let recalls = tmir_evaluate(b.view(), &b.vocab, &samples, &gal, &k)?;
            let by_k: serde_json::Map<String, serde_json::Value> =
                k.iter().zip(&recalls).map(|(k, r)| (format!("R@{k}"), json!(r))).collect();
            emit(json!({"tmir": by_k, "gallery": gal.len(), "queries": samples.len()}), common.out.as_deref())?;
        }
    }
    Ok(())
}
