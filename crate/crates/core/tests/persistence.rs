mod common;

use hoi_core::checkpoint::{Checkpoint, TrainProgress};
use hoi_core::data::{AnnotationFile, PredictionFile};
use hoi_core::evaluation::ImageDetection;
use hoi_core::inference::{predict, Detection};
use hoi_core::model::HoiModel;
use hoi_core::trainer::Trainer;
use proptest::prelude::*;

fn bits(a: &ndarray::Array2<f64>) -> Vec<u64> {
    a.iter().map(|v| v.to_bits()).collect()
}

#[test]
fn checkpoint_file_round_trip_preserves_forward_pass() {
    common::determinism_and_persistence(2).unwrap();
}

#[test]
fn restored_model_predicts_bit_identically() {
    let cfg = common::probe_config(|_| {});
    let data = common::synthetic(2, 4, 3, 21);
    let mut t = Trainer::new(cfg);
    t.train_epoch(&data).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.bin");
    t.checkpoint().save(&path).unwrap();
    let restored = Checkpoint::load(&path).unwrap().restore_model().unwrap();
    let samples: Vec<_> = data.samples.iter().collect();
    let a = predict(&t.model, &samples, 2).unwrap();
    let b = predict(&restored, &samples, 2).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(bits(x.class_probs.as_ref().unwrap()), bits(y.class_probs.as_ref().unwrap()));
        assert_eq!(bits(x.action_probs.as_ref().unwrap()), bits(y.action_probs.as_ref().unwrap()));
        assert_eq!(bits(x.human_boxes.as_ref().unwrap()), bits(y.human_boxes.as_ref().unwrap()));
        assert_eq!(bits(x.object_boxes.as_ref().unwrap()), bits(y.object_boxes.as_ref().unwrap()));
    }
}

#[test]
fn checkpoint_rejects_other_architecture_on_restore() {
    let small = HoiModel::new(common::probe_config(|_| {}).model, 0);
    let mut ck = Checkpoint::capture(&small, common::probe_config(|_| {}).to_config(), None, TrainProgress::default());
    ck.config.model.dec_head_layers = 4;
    assert!(ck.restore_model().is_err());
}

#[test]
fn synthetic_annotations_round_trip() {
    let ds = hoi_core::data::generate_synthetic(&hoi_core::data::SyntheticSpec { n_images: 20, ..Default::default() })
        .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = ds.write(dir.path()).unwrap();
    let back = AnnotationFile::load(&path).unwrap();
    assert_eq!(back, ds.annotations);
}

fn coord() -> impl Strategy<Value = f64> {
    (0.0f64..1.0).prop_map(|v| v * 97.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn prediction_json_is_lossless(
        rows in proptest::collection::vec((coord(), coord(), coord(), coord(), 0usize..6, 0usize..5, 0.0f64..=1.0), 0..20)
    ) {
        let dets: Vec<ImageDetection> = rows
            .iter()
            .enumerate()
            .map(|(i, &(a, b, c, d, cls, act, score))| ImageDetection {
                image_id: i as u64 % 3,
                detection: Detection {
                    human_box: [a.min(c), b.min(d), a.max(c), b.max(d)],
                    object_box: [a / 3.0, b / 7.0, c, d],
                    object_class: cls,
                    action: act,
                    score,
                },
            })
            .collect();
        let file = PredictionFile::new(dets);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pred.json");
        file.save(&p).unwrap();
        let back = PredictionFile::load(&p).unwrap();
        prop_assert_eq!(&back, &file);
        for (x, y) in back.detections.iter().zip(&file.detections) {
            prop_assert_eq!(x.detection.score.to_bits(), y.detection.score.to_bits());
        }
    }

    #[test]
    fn annotation_json_is_lossless(seed in 0u64..1000, jitter in proptest::collection::vec(0.0f64..1.0, 8)) {
        let mut ann = hoi_core::data::generate_synthetic(
            &hoi_core::data::SyntheticSpec { n_images: 3, seed, ..Default::default() },
        )
        .unwrap()
        .annotations;
        for (t, j) in ann.triplets.iter_mut().zip(jitter.iter().cycle()) {
            t.human_box[0] = (t.human_box[0] + j / 3.0).min(t.human_box[2]);
        }
        let text = serde_json::to_string(&ann).unwrap();
        let back = AnnotationFile::from_json_str(&text, std::path::Path::new("mem")).unwrap();
        prop_assert_eq!(back, ann);
    }
}
