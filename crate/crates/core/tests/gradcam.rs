mod common;

use nmfnet::dataset::{make_batch, FrameCache, LoadOptions};
use nmfnet::evaltools::{grad_cam, CamBranch};
use nmfnet::nmfnet::{ModalitySet, Model};
use nmfnet::simworld::Archetype;
use nmfnet::trainer::{train, TrainConfig};
use nmfnet::Error;

#[test]
fn maps_are_normalized_at_input_resolution() {
    let (dir, manifest) = common::small_dataset(&Archetype::ALL, 1, 8, 21);
    let opts = LoadOptions {
        n_sample: 64,
        ..LoadOptions::default()
    };
    let cache = FrameCache::load(dir.path(), &manifest.records, ModalitySet::ALL, &opts).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        net: common::small_net(),
        ..TrainConfig::default()
    };
    let model = train(&cache, &manifest.records, &cfg).unwrap().model;
    let mut nonzero = 0;
    for r in manifest.records.iter().step_by(3) {
        let batch = make_batch(&cache, &[r.frame_id], ModalitySet::ALL).unwrap();
        for (branch, h, w) in [(CamBranch::Rgb, 60, 80), (CamBranch::Laser, 40, 80)] {
            let map = grad_cam(&model, &batch.input, branch).unwrap();
            assert_eq!((map.height, map.width, map.values.len()), (h, w, h * w));
            assert!(map.values.iter().all(|v| (0.0..=1.0).contains(v)));
            let max = map.values.iter().copied().fold(0.0f32, f32::max);
            // normalized before upsampling, so the peak may fall between pixels
            assert!(max == 0.0 || max > 0.5, "max {max}");
            nonzero += usize::from(max > 0.0);
        }
    }
    assert!(nonzero > 0);
}

#[test]
fn zero_head_gives_an_empty_map() {
    let (dir, manifest) = common::small_dataset(&[Archetype::Cave], 1, 2, 22);
    let cache = FrameCache::load(dir.path(), &manifest.records, ModalitySet::ALL, &LoadOptions::default()).unwrap();
    let model = Model::new(&common::small_net(), 3).unwrap();
    let batch = make_batch(&cache, &[manifest.records[1].frame_id], ModalitySet::ALL).unwrap();
    for branch in [CamBranch::Rgb, CamBranch::Laser] {
        let map = grad_cam(&model, &batch.input, branch).unwrap();
        assert!(map.values.iter().all(|&v| v == 0.0));
    }
}

#[test]
fn absent_branch_and_multi_frame_input_are_config_errors() {
    let (dir, manifest) = common::small_dataset(&[Archetype::City], 1, 2, 23);
    let rgb: ModalitySet = "rgb".parse().unwrap();
    let cache = FrameCache::load(dir.path(), &manifest.records, rgb, &LoadOptions::default()).unwrap();
    let net = nmfnet::nmfnet::NetConfig {
        modalities: rgb,
        ..common::small_net()
    };
    let model = Model::new(&net, 0).unwrap();
    let ids: Vec<u64> = manifest.records.iter().map(|r| r.frame_id).collect();
    let one = make_batch(&cache, &ids[..1], rgb).unwrap();
    assert!(matches!(grad_cam(&model, &one.input, CamBranch::Laser), Err(Error::Config(_))));
    let two = make_batch(&cache, &ids, rgb).unwrap();
    assert!(matches!(grad_cam(&model, &two.input, CamBranch::Rgb), Err(Error::Config(_))));
}
