mod common;

use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use interformer::data::{
    convert_mask_files, load_dataset, read_labels, roundtrip, synth_generate, synth_samples, write_labels,
    DatasetSpec, Split, SynthSpec, DEFAULT_MEAN, DEFAULT_STD,
};
use interformer::domain::{labels_to_masks, masks_to_labels, Class, LabelMap};
use interformer::metrics::illusion_rate;
use interformer::Error;
use ndarray::Array2;

fn write_pair(root: &Path, stem: &str, labels: &LabelMap, shade: u8) {
    std::fs::create_dir_all(root.join("images")).unwrap();
    std::fs::create_dir_all(root.join("labels")).unwrap();
    let (h, w) = labels.dim();
    let img = RgbImage::from_pixel(w as u32, h as u32, Rgb([shade, shade, shade]));
    img.save(root.join("images").join(format!("{stem}.png"))).unwrap();
    write_labels(&root.join("labels").join(format!("{stem}.png")), labels).unwrap();
}

fn labels(h: usize, w: usize, v: u8) -> LabelMap {
    Array2::from_shape_fn((h, w), |(y, x)| if (y + x) % 3 == 0 { v } else { 0 })
}

#[test]
fn three_pairs_in_basename_order() {
    let tmp = tempfile::tempdir().unwrap();
    for (stem, v) in [("b", 2), ("c", 3), ("a", 1)] {
        write_pair(tmp.path(), stem, &labels(10, 12, v), 100);
    }
    let spec = DatasetSpec::new(tmp.path(), Split::Test, 8);
    let samples = load_dataset(&spec).unwrap();
    let ids: Vec<&str> = samples.iter().map(|s| s.id.as_str()).collect();
    assert_eq!(ids, ["a", "b", "c"]);
    assert!(samples.iter().all(|s| (s.height(), s.width()) == (8, 8)));
}

#[test]
fn split_directory_preferred() {
    let tmp = tempfile::tempdir().unwrap();
    write_pair(&tmp.path().join("train"), "x", &labels(8, 8, 1), 0);
    write_pair(tmp.path(), "y", &labels(8, 8, 1), 0);
    let train = load_dataset(&DatasetSpec::new(tmp.path(), Split::Train, 8)).unwrap();
    assert_eq!(train[0].id, "x");
    let test = load_dataset(&DatasetSpec::new(tmp.path(), Split::Test, 8)).unwrap();
    assert_eq!(test[0].id, "y");
}

#[test]
fn bad_label_value_names_the_file() {
    let tmp = tempfile::tempdir().unwrap();
    write_pair(tmp.path(), "good", &labels(8, 8, 1), 0);
    std::fs::create_dir_all(tmp.path().join("images")).unwrap();
    RgbImage::new(8, 8).save(tmp.path().join("images/bad.png")).unwrap();
    let mut g = GrayImage::new(8, 8);
    g.put_pixel(3, 3, Luma([7]));
    g.save(tmp.path().join("labels/bad.png")).unwrap();
    let err = load_dataset(&DatasetSpec::new(tmp.path(), Split::Test, 8)).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("bad.png"), "{msg}");
    assert!(msg.contains('7'), "{msg}");
}

#[test]
fn missing_label_is_a_sample_error() {
    let tmp = tempfile::tempdir().unwrap();
    write_pair(tmp.path(), "a", &labels(8, 8, 1), 0);
    RgbImage::new(8, 8).save(tmp.path().join("images/orphan.png")).unwrap();
    match load_dataset(&DatasetSpec::new(tmp.path(), Split::Test, 8)) {
        Err(Error::Sample { path, .. }) => assert!(path.ends_with("orphan.png"), "{path:?}"),
        other => panic!("expected a sample error, got {other:?}"),
    }
}

#[test]
fn normalization_uses_default_constants() {
    assert_eq!(DEFAULT_MEAN, [106.011, 95.400, 87.429]);
    assert_eq!(DEFAULT_STD, [64.357, 60.889, 61.419]);
    let tmp = tempfile::tempdir().unwrap();
    write_pair(tmp.path(), "a", &labels(8, 8, 1), 200);
    let s = &load_dataset(&DatasetSpec::new(tmp.path(), Split::Test, 8)).unwrap()[0];
    for c in 0..3 {
        let want = (200.0 - DEFAULT_MEAN[c]) / DEFAULT_STD[c];
        assert!((s.pixels[[0, 0, c]] - want).abs() < 1e-5);
    }
}

#[test]
fn labels_round_trip_through_masks_and_disk() {
    let mut r = common::rng(11);
    let tmp = tempfile::tempdir().unwrap();
    for i in 0..20 {
        let l = common::random_labels(&mut r, 9, 7, 0.5, [1.0; 5]);
        assert_eq!(roundtrip(&l).unwrap(), l);
        assert_eq!(masks_to_labels(&labels_to_masks(&l).unwrap()).unwrap(), l);
        let p = tmp.path().join(format!("{i}.png"));
        write_labels(&p, &l).unwrap();
        assert_eq!(read_labels(&p).unwrap(), l);
    }
}

#[test]
fn converts_per_class_mask_files() {
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("masks");
    std::fs::create_dir_all(&src).unwrap();
    let mut lh = GrayImage::new(4, 3);
    lh.put_pixel(0, 0, Luma([255]));
    lh.save(src.join("frame_lh.png")).unwrap();
    let mut to = GrayImage::new(4, 3);
    to.put_pixel(3, 2, Luma([1]));
    to.save(src.join("frame_to.png")).unwrap();
    let n = convert_mask_files(&src, &tmp.path().join("labels")).unwrap();
    assert_eq!(n, 1);
    let l = read_labels(&tmp.path().join("labels/frame.png")).unwrap();
    assert_eq!(l[[0, 0]], Class::LeftHand.label());
    assert_eq!(l[[2, 3]], Class::TwoHandObject.label());
    assert_eq!(l.iter().filter(|&&v| v != 0).count(), 2);
}

#[test]
fn synthetic_generation_is_byte_identical_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        seed: 5,
        count: 6,
        size: 48,
        ..Default::default()
    };
    synth_generate(&spec, &tmp.path().join("a")).unwrap();
    synth_generate(&spec, &tmp.path().join("b")).unwrap();
    for sub in ["images", "labels"] {
        let mut names: Vec<_> = std::fs::read_dir(tmp.path().join("a").join(sub))
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        names.sort();
        assert_eq!(names.len(), 6);
        for n in names {
            let a = std::fs::read(tmp.path().join("a").join(sub).join(&n)).unwrap();
            let b = std::fs::read(tmp.path().join("b").join(sub).join(&n)).unwrap();
            assert_eq!(a, b, "{sub}/{n:?}");
        }
    }
    let loaded = load_dataset(&DatasetSpec::new(tmp.path().join("a"), Split::Train, 48)).unwrap();
    assert_eq!(loaded.len(), 6);
}

#[test]
fn left_only_scenes_have_no_right_side_labels() {
    let (samples, _) = synth_samples(&SynthSpec {
        seed: 2,
        count: 150,
        p_left: 1.0,
        p_right: 0.0,
        ..Default::default()
    })
    .unwrap();
    for s in &samples {
        for c in [Class::RightHand, Class::RightObject, Class::TwoHandObject] {
            assert!(!s.labels.iter().any(|&v| v == c.label()), "{} has {c:?}", s.id);
        }
    }
}

#[test]
fn synthetic_ground_truth_has_no_illusions() {
    let (samples, summary) = synth_samples(&SynthSpec {
        seed: 9,
        count: 300,
        ..Default::default()
    })
    .unwrap();
    assert_eq!(summary.count, 300);
    let masks: Vec<_> = samples.iter().map(|s| labels_to_masks(&s.labels).unwrap()).collect();
    assert_eq!(illusion_rate(&masks, 0).unwrap(), 0.0);
    // every class occurs somewhere
    for c in Class::ALL {
        assert!(masks.iter().any(|m| m.count(c) > 0), "{c:?} never generated");
    }
}

#[test]
fn too_small_synthetic_size_is_rejected() {
    let r = synth_samples(&SynthSpec {
        size: 8,
        ..Default::default()
    });
    assert!(r.is_err());
}
