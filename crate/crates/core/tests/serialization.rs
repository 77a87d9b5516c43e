use std::fs;

use hci_core::aux_caption::AcLevel;
use hci_core::embedding_io::{
    decode_heb, encode_heb, generate_synthetic, make_batches, read_bundle, write_bundle, Bundle,
    EmbeddingSequence, Modality, PairRecord, Split, SyntheticConfig, EMBEDDINGS_FILE, PAIRS_FILE,
};
use hci_core::model::{Model, ModelConfig};
use hci_core::rng::Rng;
use hci_core::trainer::{load_checkpoint, save_checkpoint, Checkpoint};
use hci_core::Tensor;
use proptest::prelude::*;

fn f32_values(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gaussian() as f32 as f64).collect()
}

/// A bundle with `items` audio/text pairs of random lengths, some captioned.
fn random_bundle(seed: u64, items: usize, dim: usize) -> Bundle {
    let mut rng = Rng::new(seed);
    let mut seqs = Vec::new();
    let mut pairs = Vec::new();
    for k in 0..items {
        let (a, t, c) = (format!("a{k}"), format!("t{k}"), format!("c{k}"));
        let nf = 1 + rng.below(5);
        seqs.push(EmbeddingSequence {
            item_id: a.clone(),
            modality: Modality::Audio,
            matrix: Tensor::new(vec![nf, dim], f32_values(&mut rng, nf * dim)).unwrap(),
            cls: None,
        });
        let nw = 1 + rng.below(5);
        seqs.push(EmbeddingSequence {
            item_id: t.clone(),
            modality: Modality::Text,
            matrix: Tensor::new(vec![nw, dim], f32_values(&mut rng, nw * dim)).unwrap(),
            cls: Some(Tensor::new(vec![1, dim], f32_values(&mut rng, dim)).unwrap()),
        });
        let captioned = rng.below(3) > 0;
        if captioned {
            let tokens = rng.below(3);
            let cls = Tensor::new(vec![1, dim], f32_values(&mut rng, dim)).unwrap();
            let (matrix, cls) = if tokens == 0 {
                (cls, None)
            } else {
                let m = Tensor::new(vec![tokens, dim], f32_values(&mut rng, tokens * dim)).unwrap();
                (m, Some(cls))
            };
            seqs.push(EmbeddingSequence {
                item_id: c.clone(),
                modality: Modality::Caption,
                matrix,
                cls,
            });
        }
        pairs.push(PairRecord {
            split: Split::from_hash(&a),
            audio_id: a,
            text_id: t,
            caption_id: captioned.then_some(c),
        });
    }
    Bundle::new(dim, seqs, pairs).unwrap()
}

fn dir_bytes(dir: &std::path::Path) -> (Vec<u8>, Vec<u8>) {
    (
        fs::read(dir.join(EMBEDDINGS_FILE)).unwrap(),
        fs::read(dir.join(PAIRS_FILE)).unwrap(),
    )
}

#[test]
fn fifty_random_bundles_round_trip_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    for seed in 0..50u64 {
        let b = random_bundle(seed, 1 + (seed as usize % 20), 1 + (seed as usize % 8));
        let first = tmp.path().join(format!("b{seed}"));
        let second = tmp.path().join(format!("b{seed}-again"));
        write_bundle(&b, &first).unwrap();
        let loaded = read_bundle(&first).unwrap();
        assert_eq!(loaded, b, "seed {seed}");
        write_bundle(&loaded, &second).unwrap();
        assert_eq!(dir_bytes(&first), dir_bytes(&second), "seed {seed}");
    }
}

#[test]
fn single_zero_audio_bundle_is_header_plus_one_record() {
    let b = Bundle::new(
        1,
        vec![EmbeddingSequence {
            item_id: "x".into(),
            modality: Modality::Audio,
            matrix: Tensor::zeros(&[1, 1]),
            cls: None,
        }],
        vec![],
    )
    .unwrap();
    let bytes = encode_heb(1, b.sequences()).unwrap();
    let (dim, seqs) = decode_heb(&bytes).unwrap();
    assert_eq!(dim, 1);
    assert_eq!(seqs, b.sequences());
    let header = encode_heb(1, &[]).unwrap().len();
    assert!(bytes.len() > header);
}

#[test]
fn synthetic_bundle_reloads_equal() {
    let tmp = tempfile::tempdir().unwrap();
    let b = generate_synthetic(&SyntheticConfig::default()).unwrap();
    write_bundle(&b, tmp.path()).unwrap();
    assert_eq!(read_bundle(tmp.path()).unwrap(), b);
    assert_eq!(generate_synthetic(&SyntheticConfig::default()).unwrap(), b);
}

#[test]
fn truncated_file_reports_unexpected_end() {
    let b = random_bundle(3, 4, 3);
    let bytes = encode_heb(b.dim(), b.sequences()).unwrap();
    for cut in [bytes.len() - 1, bytes.len() / 2, 20] {
        let err = decode_heb(&bytes[..cut]).unwrap_err();
        assert!(!err.is_usage());
        assert!(err.to_string().contains("unexpected end of file"), "{err}");
    }
}

#[test]
fn corrupted_magic_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    write_bundle(&random_bundle(4, 3, 2), tmp.path()).unwrap();
    let path = tmp.path().join(EMBEDDINGS_FILE);
    let mut bytes = fs::read(&path).unwrap();
    bytes[0] ^= 0xff;
    fs::write(&path, bytes).unwrap();
    let err = read_bundle(tmp.path()).unwrap_err();
    assert!(!err.is_usage());
}

#[test]
fn dangling_pair_reference_names_the_id() {
    let tmp = tempfile::tempdir().unwrap();
    write_bundle(&random_bundle(5, 3, 2), tmp.path()).unwrap();
    let path = tmp.path().join(PAIRS_FILE);
    let text = fs::read_to_string(&path)
        .unwrap()
        .replace("\"t1\"", "\"ghost-text\"");
    fs::write(&path, text).unwrap();
    let err = read_bundle(tmp.path()).unwrap_err();
    assert!(err.to_string().contains("ghost-text"), "{err}");
}

#[test]
fn unwritable_destination_leaves_nothing_behind() {
    let tmp = tempfile::tempdir().unwrap();
    let blocker = tmp.path().join("file");
    fs::write(&blocker, b"x").unwrap();
    let err = write_bundle(&random_bundle(6, 2, 2), blocker.join("sub")).unwrap_err();
    assert!(!err.is_usage());
    assert_eq!(fs::read(&blocker).unwrap(), b"x");
}

#[test]
fn batching_examples() {
    let pairs: Vec<PairRecord> = (0..10)
        .map(|k| PairRecord {
            audio_id: format!("a{k}"),
            text_id: format!("t{k}"),
            caption_id: None,
            split: Split::Train,
        })
        .collect();
    let seqs = (0..10)
        .flat_map(|k| {
            [
                EmbeddingSequence {
                    item_id: format!("a{k}"),
                    modality: Modality::Audio,
                    matrix: Tensor::zeros(&[1, 2]),
                    cls: None,
                },
                EmbeddingSequence {
                    item_id: format!("t{k}"),
                    modality: Modality::Text,
                    matrix: Tensor::zeros(&[1, 2]),
                    cls: None,
                },
            ]
        })
        .collect();
    let b = Bundle::new(2, seqs, pairs).unwrap();
    let sizes = |drop| -> Vec<usize> {
        make_batches(&b, Split::Train, 4, 1, drop)
            .unwrap()
            .batches
            .iter()
            .map(|x| x.len())
            .collect()
    };
    assert_eq!(sizes(true), vec![4, 4]);
    assert_eq!(sizes(false), vec![4, 4, 2]);
    assert_eq!(
        make_batches(&b, Split::Train, 4, 9, false).unwrap(),
        make_batches(&b, Split::Train, 4, 9, false).unwrap()
    );
    assert!(!make_batches(&b, Split::Test, 4, 1, false)
        .unwrap_err()
        .is_usage());
}

fn model_checkpoint(seed: u64) -> Checkpoint {
    let mut rng = Rng::new(seed);
    let dim = [4, 8, 12][rng.below(3)];
    let mut config = ModelConfig::new(dim);
    config.hierarchy.segments = 1 + rng.below(4);
    config.hierarchy.phrases = 1 + rng.below(4);
    config.hierarchy.projection_enabled = rng.below(2) == 0;
    config.ac.level = [AcLevel::Off, AcLevel::DaAcfi, AcLevel::DaAcfiTcm][rng.below(3)];
    config.ac.heads = [1, 2, 4][rng.below(3)];
    let model = Model::init(config, seed).unwrap();
    Checkpoint::from_model(&model, None, seed * 7)
}

#[test]
fn fifty_random_checkpoints_round_trip_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    for seed in 0..50u64 {
        let ck = model_checkpoint(seed);
        let path = tmp.path().join(format!("ck{seed}.bin"));
        save_checkpoint(&ck, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded, ck);
        assert_eq!(loaded.encode().unwrap(), fs::read(&path).unwrap());
        let model = loaded.model().unwrap();
        assert_eq!(model.named_params(), ck.params);
    }
}

#[test]
fn corrupted_checkpoints_are_data_errors() {
    let bytes = model_checkpoint(1).encode().unwrap();
    let mut bad = bytes.clone();
    bad[3] = b'?';
    assert!(!Checkpoint::decode(&bad).unwrap_err().is_usage());
    let mut version = bytes.clone();
    version[8] = 9;
    let err = Checkpoint::decode(&version).unwrap_err();
    assert!(err.to_string().contains("version"), "{err}");
    let err = Checkpoint::decode(&bytes[..bytes.len() / 2]).unwrap_err();
    assert!(!err.is_usage());
}

#[test]
fn checkpoint_with_other_dimension_names_the_shape() {
    let ck = model_checkpoint(2);
    let mut other = ck.meta.model.clone();
    other.hierarchy.dim += 4;
    let err = Model::from_params(other, &ck.params).unwrap_err();
    assert!(!err.is_usage());
    assert!(err.to_string().contains("shape"), "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn synthetic_generation_is_reproducible(seed in any::<u64>(), items in 8usize..40) {
        let c = SyntheticConfig { items, classes: 4, seed, segments: 2, ..SyntheticConfig::default() };
        prop_assert_eq!(generate_synthetic(&c).unwrap(), generate_synthetic(&c).unwrap());
    }

    #[test]
    fn heb_encoding_is_bijective(seed in any::<u64>(), items in 1usize..12, dim in 1usize..6) {
        let b = random_bundle(seed, items, dim);
        let bytes = encode_heb(b.dim(), b.sequences()).unwrap();
        let (d, seqs) = decode_heb(&bytes).unwrap();
        prop_assert_eq!(d, dim);
        prop_assert_eq!(encode_heb(d, &seqs).unwrap(), bytes);
    }
}
