//! Dataset layout, checkpoints and tiled inference working together.

use mantis_core::blocks::UnitVariant;
use mantis_core::inference::{sliding_inference, window_count, InferenceConfig};
use mantis_core::mantis::{Mantis, MantisConfig};
use mantis_core::pipeline::io::{load_split, write_sample};
use mantis_core::pipeline::synth_dataset;
use mantis_core::substrate::param::init_rng;
use mantis_core::substrate::Tensor;

#[test]
fn dataset_layout_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let chips = synth_dataset(3, 16, 2).unwrap();
    for (i, c) in chips.iter().enumerate() {
        write_sample(&dir.path().join("train"), &format!("c{i}"), c).unwrap();
    }
    let loaded = load_split(dir.path(), "train").unwrap();
    assert_eq!(loaded.len(), 3);
    for ((name, got), (i, want)) in loaded.iter().zip(chips.iter().enumerate()) {
        assert_eq!(name, &format!("c{i}"));
        assert_eq!(got.mask, want.mask);
        assert_eq!(got.distance, want.distance);
        assert_eq!(got.boundary, want.boundary);
        // 8-bit PNG quantisation
        let err = got.t1.zip_map(&want.t1, |a, b| (a - b).abs()).unwrap().max_abs();
        assert!(err <= 0.5 / 255.0 + 1e-12, "{err}");
    }
}

#[test]
fn checkpointed_model_tiles_an_unaligned_raster() {
    let model = Mantis::new(MantisConfig {
        seed: 11,
        ..MantisConfig::new(2, 4, UnitVariant::CeecnetV1)
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    model.save(dir.path()).unwrap();
    let back = Mantis::load(dir.path()).unwrap();
    assert_eq!(back.config, model.config);

    let mut rng = init_rng(11);
    let r1 = Tensor::rand_uniform(&[3, 27, 41], 0.0, 1.0, &mut rng);
    let r2 = Tensor::rand_uniform(&[3, 27, 41], 0.0, 1.0, &mut rng);
    let cfg = InferenceConfig::new(16, 8);
    let a = sliding_inference(&model, &r1, &r2, &cfg).unwrap();
    let b = sliding_inference(&back, &r1, &r2, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.shape(), &[27, 41]);
    assert!(a.data().iter().all(|p| (0.0..=1.0).contains(p)));
    assert_eq!(window_count(27, 41, &cfg).unwrap(), 3 * 5);
}
