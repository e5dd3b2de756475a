//! Round trips and corruption handling of the on-disk formats.

use std::path::Path;

use bnta::{checkpoint, manifest, ppm};
use bnta_core::model::{ModelBundle, ModelConfig};
use bnta_core::rng;
use bnta_core::synth::{build_benchmark, BenchmarkSpec};
use bnta_core::Tensor;
use proptest::prelude::*;

fn small_model(seed: u64) -> ModelBundle {
    let cfg = ModelConfig {
        image_height: 6,
        image_width: 3,
        channels: vec![3, 4],
        strides: vec![1, 1],
        instance_norm: vec![true, false],
        stripes: 3,
        part_dim: 3,
        num_ids: 3,
        ..ModelConfig::default()
    };
    ModelBundle::new(cfg, &mut rng::stream(seed, "init")).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn ppm_round_trip_is_exact_after_quantizing(
        h in 1usize..6,
        w in 1usize..6,
        seed in any::<u64>(),
    ) {
        use rand::Rng;
        let mut r = rng::stream(seed, "ppm");
        let data = (0..3 * h * w).map(|_| r.random_range(0.0..1.0)).collect();
        let image = ppm::quantize(&Tensor::new(&[3, h, w], data).unwrap());
        let back = ppm::decode(&ppm::encode(&image).unwrap(), Path::new("mem.ppm")).unwrap();
        prop_assert_eq!(back.shape(), image.shape());
        prop_assert_eq!(back.data(), image.data());
    }

    #[test]
    fn any_flipped_byte_is_detected(seed in 0u64..4, position in any::<prop::sample::Index>(), mask in 1u8..) {
        let model = small_model(seed);
        let mut bytes = checkpoint::to_bytes(&model, seed);
        let i = position.index(bytes.len());
        bytes[i] ^= mask;
        // Header edits that still parse (a seed digit, say) may load, but
        // tensor data never changes silently.
        if let Ok(ck) = checkpoint::from_bytes(&bytes, Path::new("mem.ckpt")) {
            prop_assert_eq!(ck.model.params(), model.params());
        }
    }

    #[test]
    fn truncation_is_refused(seed in 0u64..4, cut in any::<prop::sample::Index>()) {
        let bytes = checkpoint::to_bytes(&small_model(seed), seed);
        let keep = cut.index(bytes.len());
        prop_assert!(checkpoint::from_bytes(&bytes[..keep], Path::new("mem.ckpt")).is_err());
    }
}

#[test]
fn checkpoint_round_trip_keeps_every_tensor_and_the_seed() {
    let model = small_model(9);
    let ck = checkpoint::from_bytes(&checkpoint::to_bytes(&model, 9), Path::new("mem.ckpt")).unwrap();
    assert_eq!(ck.header.seed, 9);
    assert_eq!(ck.model.params(), model.params());
    assert_eq!(checkpoint::tensor_hashes(&ck.model), checkpoint::tensor_hashes(&model));
    assert!(checkpoint::diff(&model, &ck.model).unwrap().is_empty());
}

#[test]
fn manifests_round_trip_through_disk() {
    let spec = BenchmarkSpec {
        train_ids: 3,
        images_per_id: 2,
        test_ids: 4,
        ..BenchmarkSpec::default()
    };
    let bench = build_benchmark(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let names: Vec<String> = (0..spec.sources.len()).map(|i| format!("source_{i}")).collect();
    let train_path = manifest::save_train(&dir.path().join("train"), &bench.train, &names).unwrap();
    let test_path = manifest::save_test(&dir.path().join("test"), &bench.test, "target").unwrap();

    let train = manifest::load_train(&train_path).unwrap();
    assert_eq!(train.labels, bench.train.labels);
    assert_eq!(train.num_ids, bench.train.num_ids);
    for (a, b) in train.images.iter().zip(&bench.train.images) {
        assert_eq!(a.data(), ppm::quantize(b).data());
    }

    let test = manifest::load_test(&test_path).unwrap();
    assert_eq!(test.num_ids, bench.test.num_ids);
    assert_eq!(test.images.len(), bench.test.images.len());
    let m = manifest::load_manifest(&test_path).unwrap();
    assert_eq!(m.counts.probe, spec.test_ids);
    assert_eq!(m.counts.gallery, spec.test_ids * (spec.test_views - 1));
}

#[test]
fn manifest_version_mismatch_is_refused() {
    let bench = build_benchmark(&BenchmarkSpec {
        train_ids: 2,
        images_per_id: 1,
        test_ids: 2,
        ..BenchmarkSpec::default()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = manifest::save_test(dir.path(), &bench.test, "target").unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    std::fs::write(&path, text.replacen("\"format_version\": 1", "\"format_version\": 7", 1)).unwrap();
    let err = manifest::load_manifest(&path).unwrap_err().to_string();
    assert!(err.contains("format version 7"), "{err}");
}
