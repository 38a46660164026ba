use std::fs;

use instadepth::colormap::{color, colorize};
use instadepth::dataset::{
    cm_to_depth, depth_to_cm, generated_scene, read_sample, read_split, write_sample, write_split, GenOptions, Split,
};
use instadepth::error::Error;
use instadepth::masks::MaskProvider;
use instadepth::pnm::{decode_pgm, decode_ppm, encode_pgm, encode_ppm, write_pgm, GrayImage, RgbImage};
use instadepth_core::seg::merge_masks;
use instadepth_core::Tensor;
use proptest::prelude::*;

proptest! {
    #[test]
    fn pgm_round_trip(w in 1usize..20, h in 1usize..20, maxval in 1u16..=65535, seed in any::<u64>()) {
        let data = (0..w * h).map(|i| ((seed.wrapping_mul(i as u64 + 1) >> 7) % (maxval as u64 + 1)) as u16).collect();
        let img = GrayImage::new(w, h, maxval, data);
        let back = decode_pgm(&encode_pgm(&img), "p.pgm".as_ref()).unwrap();
        prop_assert_eq!(back, img);
    }

    #[test]
    fn ppm_round_trip(w in 1usize..20, h in 1usize..20, seed in any::<u8>()) {
        let data = (0..3 * w * h).map(|i| (i as u8).wrapping_mul(seed)).collect();
        let img = RgbImage { width: w, height: h, data };
        prop_assert_eq!(decode_ppm(&encode_ppm(&img), "p.ppm".as_ref()).unwrap(), img);
    }

    #[test]
    fn centimeter_quantization(d in 0.0f32..600.0) {
        prop_assert!((cm_to_depth(depth_to_cm(d)) - d).abs() <= 0.005 + 1e-4);
    }
}

#[test]
fn depth_saturates_at_16_bits() {
    assert_eq!(depth_to_cm(1e6), 65535);
    assert_eq!(depth_to_cm(-1.0), 0);
}

#[test]
fn sample_round_trip_quantizes_only() {
    let t = tempfile::tempdir().unwrap();
    let opts = GenOptions {
        count: 1,
        seed: 11,
        height: 32,
        width: 64,
        objects: 3,
    };
    let s = generated_scene(&opts, 0).unwrap();
    let files = write_sample(t.path(), &s).unwrap();
    assert_eq!(files.len(), 3 + s.instances.len());
    let back = read_sample(&t.path().join(&s.scene_id)).unwrap();
    assert_eq!(back.scene_id, s.scene_id);
    assert_eq!(back.condition, s.condition);
    assert_eq!(back.instances, s.instances);
    for (a, b) in back.depth_gt.data().iter().zip(s.depth_gt.data()) {
        assert!((a - b).abs() <= 0.005 + 1e-5);
        assert_eq!(*a > 0.0, *b > 0.0);
    }
    for (a, b) in back.rgb.data().iter().zip(s.rgb.data()) {
        assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
    }
}

#[test]
fn broken_sample_names_file_and_field() {
    let t = tempfile::tempdir().unwrap();
    let s = generated_scene(
        &GenOptions {
            count: 1,
            seed: 0,
            height: 32,
            width: 32,
            objects: 1,
        },
        0,
    )
    .unwrap();
    write_sample(t.path(), &s).unwrap();
    let dir = t.path().join(&s.scene_id);
    fs::write(dir.join("depth.pgm"), b"P5\n32 32\n65535\n\0\0").unwrap();
    match read_sample(&dir) {
        Err(Error::Format { path, field, .. }) => {
            assert!(path.ends_with("depth.pgm"));
            assert_eq!(field, "raster");
        }
        other => panic!("{other:?}"),
    }
    fs::write(dir.join("manifest.txt"), "scene=x\ncolour=red\n").unwrap();
    assert!(matches!(read_sample(&dir), Err(Error::Format { field: "key", .. })));
}

#[test]
fn split_file_round_trip() {
    let t = tempfile::tempdir().unwrap();
    let split = Split {
        train: vec!["a".into(), "b".into()],
        val: vec!["c".into()],
    };
    write_split(t.path(), &split).unwrap();
    assert_eq!(read_split(t.path()).unwrap(), split);
    fs::write(t.path().join("split.txt"), "test a\n").unwrap();
    assert!(matches!(read_split(t.path()), Err(Error::Format { field: "line", .. })));
}

fn mask(h: usize, w: usize, on: &[usize]) -> GrayImage {
    let mut d = vec![0u16; h * w];
    for &i in on {
        d[i] = 255;
    }
    GrayImage::new(w, h, 255, d)
}

#[test]
fn mask_provider_modes() {
    let t = tempfile::tempdir().unwrap();
    let s = generated_scene(
        &GenOptions {
            count: 1,
            seed: 5,
            height: 32,
            width: 32,
            objects: 2,
        },
        0,
    )
    .unwrap();
    let gt = MaskProvider::GroundTruth.example(s.clone()).unwrap();
    assert_eq!(gt.masks, s.instances);

    // directory of detections
    let dir = t.path().join("det").join(&s.scene_id);
    fs::create_dir_all(&dir).unwrap();
    write_pgm(&dir.join("b.pgm"), &mask(32, 32, &[5, 6])).unwrap();
    write_pgm(&dir.join("a.pgm"), &mask(32, 32, &[0])).unwrap();
    fs::write(dir.join("notes.txt"), "ignored").unwrap();
    let pattern = format!("file:{}/det/{{scene}}", t.path().display());
    let provider: MaskProvider = pattern.parse().unwrap();
    let ex = provider.example(s.clone()).unwrap();
    assert_eq!(ex.masks.len(), 2);
    assert_eq!(ex.masks[0].data()[0], 1.0);
    assert_eq!(ex.sample.instances, s.instances);

    // nothing detected: the merged prior is all zero
    for e in fs::read_dir(&dir).unwrap() {
        fs::remove_file(e.unwrap().path()).unwrap();
    }
    let ex = provider.example(s.clone()).unwrap();
    assert!(ex.masks.is_empty());
    let merged = merge_masks::<f32>(&[], 32, 32).unwrap();
    assert!(merged.data().iter().all(|&v| v == 0.0));

    // single file, non-binary values rejected
    let single = t.path().join("one.pgm");
    write_pgm(&single, &GrayImage::new(32, 32, 255, vec![7; 1024])).unwrap();
    let provider: MaskProvider = format!("file:{}", single.display()).parse().unwrap();
    assert!(matches!(provider.example(s.clone()), Err(Error::Format { field: "raster", .. })));

    // wrong extent
    write_pgm(&single, &mask(16, 16, &[0])).unwrap();
    assert!(provider.example(s).is_err());

    assert!("yolo".parse::<MaskProvider>().is_err());
}

#[test]
fn colormap_is_deterministic_and_monotone_in_index() {
    let d = Tensor::new(&[1, 1, 4], vec![0.0f32, 5.0, 40.0, 80.0]).unwrap();
    let a = colorize(&d);
    assert_eq!(a, colorize(&d));
    assert_eq!(&a.data[..3], &[0, 0, 0]);
    assert_eq!(color(40.0), color(40.0));
    assert_ne!(color(5.0), color(75.0));
    assert_eq!(color(80.0), color(500.0));
}
