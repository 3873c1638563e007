use std::path::Path;

use fashionsap::data_io::corpus::build_vocabulary;
use fashionsap::data_io::{generate_synthetic, load_corpus, load_images, load_tmir, synthesize, SynthSpec};
use fashionsap::downstream::ModelBundle;
use fashionsap::model::checkpoint::{Checkpoint, Precision};
use fashionsap::model::ModelConfig;
use fashionsap::pretrain::{checkpoint_name, pretrain, PretrainInputs, TrainConfig, Trainer};
use fashionsap::taxonomy::CategoryTable;
use fashionsap::textpipe::LexicalResource;

fn small() -> (ModelConfig, TrainConfig) {
    let model = ModelConfig { image_size: 16, max_text_len: 40, ..ModelConfig::tiny() };
    let train = TrainConfig { batch_size: 4, steps: 6, checkpoint_every: 3, ..TrainConfig::desk() };
    (model, train)
}

fn run(dir: &Path, train: TrainConfig, resume: Option<&Path>) -> std::path::PathBuf {
    let c = synthesize(&SynthSpec { n_items: 10, seed: 2, image_size: 16, ..Default::default() }).unwrap();
    let lex = LexicalResource::bundled();
    let table = CategoryTable::default();
    let inputs = PretrainInputs {
        records: &c.records,
        images: &c.images,
        vocab: build_vocabulary(&c.records, &[], &lex),
        lex: &lex,
        table: &table,
    };
    pretrain(small().0, train, inputs, dir, resume).unwrap()
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let (_, train) = small();
    let a = tempfile::tempdir().unwrap();
    let full = run(a.path(), train.clone(), None);
    assert!(a.path().join(checkpoint_name(3)).exists());

    let b = tempfile::tempdir().unwrap();
    run(b.path(), TrainConfig { steps: 3, ..train.clone() }, None);
    let resumed = run(b.path(), train, Some(&b.path().join(checkpoint_name(3))));

    let x = Trainer::from_checkpoint(&Checkpoint::load(&full).unwrap()).unwrap();
    let y = Trainer::from_checkpoint(&Checkpoint::load(&resumed).unwrap()).unwrap();
    assert_eq!(x, y);
    let log = |d: &Path| std::fs::read_to_string(d.join("loss.jsonl")).unwrap();
    assert_eq!(log(a.path()), log(b.path()));
    assert_eq!(log(a.path()).lines().count(), 6);
}

#[test]
fn single_precision_checkpoints_stay_close() {
    let (_, train) = small();
    let dir = tempfile::tempdir().unwrap();
    let ck = Checkpoint::load(&run(dir.path(), train, None)).unwrap();
    let back = Checkpoint::from_bytes(&ck.to_bytes(Precision::F32)).unwrap();
    assert_eq!(back.config, ck.config);
    for (name, m) in &ck.tensors {
        let n = &back.tensors[name];
        for (a, b) in m.iter().zip(n.iter()) {
            assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0), "{name}");
        }
    }
    assert_eq!(ModelBundle::from_checkpoint(&ck).unwrap().kind, "pretrain");
}

#[test]
fn synthetic_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec { n_items: 12, seed: 9, image_size: 16, ..Default::default() };
    let paths = generate_synthetic(&spec, dir.path()).unwrap();
    let mem = synthesize(&spec).unwrap();
    let records = load_corpus(&paths.corpus).unwrap();
    assert_eq!(records, mem.records);
    assert_eq!(load_images(&records, &paths.image_dir, 16).unwrap(), mem.images);
    assert_eq!(load_tmir(&paths.tmir).unwrap(), mem.triples);
}
