//! Decoders must reject malformed input with an error, never a panic, and
//! whatever they accept must survive a write/read round trip. These are
//! the same properties the fuzz targets check, run here on mutations of
//! valid encodings.

mod common;

use common::{micro, random};
use melstyle::autograd::{Adam, AdamConfig, Tensor};
use melstyle::backbone::Vocabulary;
use melstyle::config::Config;
use melstyle::pipeline::checkpoint::Checkpoint;
use melstyle::pipeline::corpus::{manifest_line, parse_manifest, ToyCorpus, ToySpec};
use melstyle::pipeline::model::Model;
use proptest::prelude::*;

fn checkpoint_bytes() -> Vec<u8> {
    let cfg = Config { preset: "tiny".into(), model: micro(), train: melstyle::config::TrainConfig::tiny() };
    let model = Model::new(cfg.model.clone(), 1).unwrap();
    Checkpoint::capture(&cfg, &model, &Adam::new(AdamConfig::default()), 3).to_bytes()
}

fn manifest_text() -> String {
    "a\t1 2 3\t2 1 4\t0 2\t1\t0\tpitch/a.gstn\tmel/a.gstn\n\
     b\t4\t3\t0\t0\t2\tpitch/b.gstn\tmel/b.gstn\temb/b.gstn\n"
        .to_string()
}

#[derive(Clone, Debug)]
enum Edit {
    Flip(usize, u8),
    Truncate(usize),
    Insert(usize, u8),
}

fn edits() -> impl Strategy<Value = Vec<Edit>> {
    let edit = prop_oneof![
        (any::<usize>(), any::<u8>()).prop_map(|(i, b)| Edit::Flip(i, b)),
        any::<usize>().prop_map(Edit::Truncate),
        (any::<usize>(), any::<u8>()).prop_map(|(i, b)| Edit::Insert(i, b)),
    ];
    proptest::collection::vec(edit, 1..4)
}

fn mutate(mut bytes: Vec<u8>, edits: &[Edit]) -> Vec<u8> {
    for e in edits {
        let n = bytes.len().max(1);
        match *e {
            Edit::Flip(i, b) if !bytes.is_empty() => bytes[i % n] ^= b.max(1),
            Edit::Flip(..) => {}
            Edit::Truncate(i) => bytes.truncate(i % n),
            Edit::Insert(i, b) => bytes.insert(i % (bytes.len() + 1), b),
        }
    }
    bytes
}

fn check_gstn(data: &[u8]) {
    if let Ok(t) = Tensor::from_gstn(data) {
        assert_eq!(Tensor::from_gstn(&t.to_gstn()).unwrap().dims(), t.dims());
    }
    if let Ok((_, used)) = Tensor::read_gstn_prefix(data) {
        assert!(used <= data.len());
    }
}

fn check_checkpoint(data: &[u8]) {
    if let Ok(ck) = Checkpoint::from_bytes(data) {
        let bytes = ck.to_bytes();
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap().to_bytes(), bytes);
        let _ = ck.restore();
    }
}

fn check_text(data: &[u8]) {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(records) = parse_manifest(text) {
        let written: String = records.iter().map(|r| manifest_line(r) + "\n").collect();
        assert_eq!(parse_manifest(&written).unwrap(), records);
    }
    if let Ok(cfg) = Config::parse(text) {
        assert_eq!(Config::parse(&cfg.to_text()).unwrap(), cfg);
    }
    if let Ok(v) = Vocabulary::parse(text) {
        assert_eq!(Vocabulary::parse(&v.to_text()).unwrap(), v);
    }
}

#[test]
fn valid_encodings_round_trip() {
    check_gstn(&random(&[3, 5], 1).to_gstn());
    check_checkpoint(&checkpoint_bytes());
    assert_eq!(parse_manifest(&manifest_text()).unwrap().len(), 2);
    let cfg = Config::preset("tiny").unwrap();
    assert_eq!(Config::parse(&cfg.to_text()).unwrap(), cfg);
    let vocab = ToyCorpus::new(ToySpec::default(), 0).unwrap().vocab;
    assert_eq!(Vocabulary::parse(&vocab.to_text()).unwrap(), vocab);
}

#[test]
fn fuzz_seeds_decode_and_round_trip() {
    let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus");
    let seeds = |dir: &str| {
        let mut files: Vec<_> = std::fs::read_dir(root.join(dir)).unwrap().map(|e| e.unwrap().path()).collect();
        files.sort();
        assert!(!files.is_empty(), "no seeds in {dir}");
        files.into_iter().map(|p| (p.display().to_string(), std::fs::read(&p).unwrap()))
    };
    for (name, data) in seeds("gstn") {
        assert!(Tensor::from_gstn(&data).is_ok(), "{name}");
        check_gstn(&data);
    }
    for (name, data) in seeds("checkpoint") {
        // Truncated seeds exercise the error path; the rest must load.
        assert_eq!(Checkpoint::from_bytes(&data).is_ok(), !name.contains("truncated"), "{name}");
        check_checkpoint(&data);
    }
    for (name, data) in seeds("manifest") {
        assert!(parse_manifest(std::str::from_utf8(&data).unwrap()).is_ok(), "{name}");
        check_text(&data);
    }
    for (name, data) in seeds("config") {
        assert!(Config::parse(std::str::from_utf8(&data).unwrap()).is_ok(), "{name}");
        check_text(&data);
    }
    for (name, data) in seeds("vocab") {
        assert!(Vocabulary::parse(std::str::from_utf8(&data).unwrap()).is_ok(), "{name}");
        check_text(&data);
    }
}

#[test]
fn non_finite_config_values_are_rejected() {
    for (k, v) in [("lr", "NaN"), ("lr", "inf"), ("temperature", "NaN"), ("mix_alpha", "-inf"), ("vq_beta", "nan")] {
        assert!(Config::parse(&format!("preset = tiny\n{k} = {v}\n")).is_err(), "{k} = {v}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 300, ..ProptestConfig::default() })]

    #[test]
    fn arbitrary_bytes_never_panic(data in proptest::collection::vec(any::<u8>(), 0..256)) {
        check_gstn(&data);
        check_checkpoint(&data);
        check_text(&data);
    }

    #[test]
    fn mutated_gstn_never_panics(e in edits()) {
        check_gstn(&mutate(random(&[4, 3], 2).to_gstn(), &e));
    }

    #[test]
    fn mutated_text_formats_never_panic(e in edits(), which in 0usize..3) {
        let seed = match which {
            0 => manifest_text(),
            1 => Config::preset("tiny").unwrap().to_text(),
            _ => ToyCorpus::new(ToySpec::default(), 0).unwrap().vocab.to_text(),
        };
        check_text(&mutate(seed.into_bytes(), &e));
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 60, ..ProptestConfig::default() })]

    #[test]
    fn mutated_checkpoints_never_panic(e in edits()) {
        check_checkpoint(&mutate(checkpoint_bytes(), &e));
    }
}
