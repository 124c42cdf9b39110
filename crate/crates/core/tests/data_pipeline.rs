mod common;

use proptest::prelude::*;
use rand::Rng;
use segkit::data::*;
use segkit::mask::LabelMask;
use segkit::postprocess::{connected_components_with_stats, Connectivity};
use segkit::tensor::Tensor;
use segkit::Error;

fn random_sample(h: usize, w: usize, seed: u64) -> Sample {
    let mut rng = common::rng(seed);
    let image = Tensor::from_fn(vec![3, h, w], |_| rng.random::<f32>()).unwrap();
    let mask = LabelMask::from_fn(h, w, |_, _| rng.random::<f64>() < 0.3);
    Sample::new(image, Some(mask), "s").unwrap()
}

fn write_rgb(path: &std::path::Path, w: u32, h: u32, f: impl Fn(u32, u32) -> [u8; 3]) {
    image::RgbImage::from_fn(w, h, |x, y| image::Rgb(f(x, y))).save(path).unwrap();
}

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("id_{i:03}")).collect()
}

fn centroid(m: &LabelMask) -> (f64, f64) {
    let (mut sr, mut sc, mut n) = (0.0, 0.0, 0.0);
    for r in 0..m.height() {
        for c in 0..m.width() {
            if m.get(r, c) {
                sr += r as f64;
                sc += c as f64;
                n += 1.0;
            }
        }
    }
    (sr / n, sc / n)
}

#[test]
fn load_sample_rescales_and_binarizes() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("a.png");
    write_rgb(&img, 576, 576, |x, y| if (x, y) == (0, 0) { [255, 0, 128] } else { [10, 20, 30] });
    let mask = dir.path().join("a_mask.png");
    image::GrayImage::from_fn(576, 576, |x, _| image::Luma([if x < 10 { 200 } else if x < 20 { 127 } else { 0 }]))
        .save(&mask)
        .unwrap();
    let s = load_sample(&img, Some(&mask)).unwrap();
    assert_eq!(s.image.shape(), &[3, 576, 576]);
    assert_eq!(s.image.data()[0], 1.0);
    assert_eq!(s.image.data()[576 * 576], 0.0);
    assert_eq!(s.image.data()[2 * 576 * 576], 128.0 / 255.0);
    let m = s.mask.unwrap();
    assert_eq!(m.count(), 10 * 576);
    assert_eq!(s.source_id, "a");

    let black = dir.path().join("black.png");
    image::GrayImage::new(576, 576).save(&black).unwrap();
    assert!(load_sample(&img, Some(&black)).unwrap().mask.unwrap().is_empty());
}

#[test]
fn load_sample_accepts_jpeg_masks() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("a.png");
    write_rgb(&img, 32, 32, |_, _| [0, 0, 0]);
    let mask = dir.path().join("a.jpg");
    image::GrayImage::from_fn(32, 32, |x, _| image::Luma([if x < 16 { 255 } else { 0 }]))
        .save(&mask)
        .unwrap();
    let m = load_sample(&img, Some(&mask)).unwrap().mask.unwrap();
    // lossy edges may shift by a column at most
    assert!((m.count() as i64 - 16 * 32).abs() <= 32);
    assert!(m.get(5, 2) && !m.get(5, 29));
}

#[test]
fn load_sample_errors() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.png");
    match load_sample(&missing, None) {
        Err(Error::Io { path, .. }) => assert_eq!(path, missing),
        other => panic!("expected I/O error, got {other:?}"),
    }
    let gray = dir.path().join("gray.png");
    image::GrayImage::new(4, 4).save(&gray).unwrap();
    assert!(matches!(load_sample(&gray, None), Err(Error::Format { .. })));
    let corrupt = dir.path().join("bad.png");
    std::fs::write(&corrupt, b"not a png").unwrap();
    assert!(matches!(load_sample(&corrupt, None), Err(Error::Format { .. })));
}

#[test]
fn center_crop_offsets() {
    let mut s = random_sample(576, 576, 1);
    let mut m = LabelMask::empty(576, 576);
    m.set(300, 300, true);
    s.mask = Some(m);
    let c = center_crop(&s, 512).unwrap();
    assert_eq!(c.image.shape(), &[3, 512, 512]);
    let m = c.mask.as_ref().unwrap();
    assert!(m.get(268, 268));
    assert_eq!(m.count(), 1);
    // offset 32 on both axes, every channel
    for ch in 0..3 {
        assert_eq!(c.image.data()[ch * 512 * 512], s.image.data()[ch * 576 * 576 + 32 * 576 + 32]);
    }
    assert_eq!(center_crop(&s, 576).unwrap(), s);
    assert!(center_crop(&s, 600).is_err());
}

#[test]
fn standardize_cases() {
    let s = random_sample(8, 8, 2);
    assert_eq!(standardize(&s, [0.0; 3], [1.0; 3]).unwrap(), s);

    let mean = IMAGENET_MEAN;
    let constant = Sample::new(
        Tensor::from_fn(vec![3, 4, 4], |i| mean[i / 16]).unwrap(),
        None,
        "c",
    )
    .unwrap();
    assert!(standardize(&constant, mean, IMAGENET_STD).unwrap().image.data().iter().all(|&v| v == 0.0));

    // own moments, recomputed in f64
    let plane = 64;
    let mut m = [0f32; 3];
    let mut sd = [0f32; 3];
    for c in 0..3 {
        let vals: Vec<f64> = s.image.data()[c * plane..(c + 1) * plane].iter().map(|&v| f64::from(v)).collect();
        let mu = vals.iter().sum::<f64>() / plane as f64;
        let var = vals.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / plane as f64;
        m[c] = mu as f32;
        sd[c] = var.sqrt() as f32;
    }
    let z = standardize(&s, m, sd).unwrap();
    for c in 0..3 {
        let mu: f64 = z.image.data()[c * plane..(c + 1) * plane].iter().map(|&v| f64::from(v)).sum::<f64>() / plane as f64;
        assert!(mu.abs() < 1e-5, "channel {c} mean {mu}");
    }
    assert!(standardize(&s, [0.0; 3], [1.0, 0.0, 1.0]).is_err());
}

#[test]
fn fold_sizes() {
    for seed in 0..20 {
        let split = split_folds(&ids(299), 5, seed).unwrap();
        assert_eq!(split.sizes(), vec![60, 60, 60, 60, 59]);
    }
    assert_eq!(split_folds(&ids(10), 5, 1).unwrap().sizes(), vec![2; 5]);
    assert_eq!(split_folds(&ids(299), 5, 7).unwrap(), split_folds(&ids(299), 5, 7).unwrap());
    assert_ne!(split_folds(&ids(299), 5, 7).unwrap(), split_folds(&ids(299), 5, 8).unwrap());
    assert!(split_folds(&ids(3), 5, 1).is_err());
    assert!(split_folds(&ids(3), 1, 1).is_err());
}

#[test]
fn fold_table_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("folds.csv");
    let split = split_folds(&ids(23), 4, 3).unwrap();
    split.write_csv(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("sample_id,fold\n"));
    let back = FoldSplit::read_csv(&path).unwrap();
    assert_eq!(back.k(), 4);
    for (id, f) in split.assignment() {
        assert_eq!(back.fold_of(id), Some(*f));
    }
}

#[test]
fn identity_augmentation_is_bit_exact() {
    let s = random_sample(32, 32, 4);
    let mut rng = common::rng(9);
    assert_eq!(augment(&s, &AugmentParams::identity(), &mut rng), s);
    assert_eq!(AffineTransform::default().apply(&s), s);
}

#[test]
fn horizontal_flip_reverses_columns() {
    let s = random_sample(16, 16, 5);
    let t = AffineTransform { hflip: true, ..Default::default() }.apply(&s);
    let (m0, m1) = (s.mask.as_ref().unwrap(), t.mask.as_ref().unwrap());
    assert_eq!(m0.count(), m1.count());
    for r in 0..16 {
        for c in 0..16 {
            assert_eq!(m1.get(r, c), m0.get(r, 15 - c));
            for ch in 0..3 {
                assert_eq!(t.image.data()[ch * 256 + r * 16 + c], s.image.data()[ch * 256 + r * 16 + 15 - c]);
            }
        }
    }
}

#[test]
fn rotation_moves_blob_centroid() {
    let n = 64;
    let center = (20.0, 44.0);
    let mask = render_blob(n, n, center, (5.0, 5.0), 0.0);
    let image = Tensor::zeros(vec![3, n, n]).unwrap();
    let s = Sample::new(image, Some(mask), "b").unwrap();
    let t = AffineTransform { rotation_deg: 90.0, ..Default::default() };
    let out = t.apply(&s);
    let got = centroid(out.mask.as_ref().unwrap());
    // analytic: +90 deg about (31.5, 31.5) in (x, y) = (col, row): x' = cx + dy, y' = cy - dx
    let c = (n as f64 - 1.0) / 2.0;
    let (dx, dy) = (center.1 - c, center.0 - c);
    let expected = (c - dx, c + dy);
    assert!((got.0 - expected.0).abs() <= 1.0 && (got.1 - expected.1).abs() <= 1.0, "{got:?} vs {expected:?}");
    let mapped = t.map_point(center.1, center.0, n, n);
    assert!((mapped.1 - expected.0).abs() < 1e-9 && (mapped.0 - expected.1).abs() < 1e-9);
    assert_eq!(out.mask.unwrap().count(), s.mask.unwrap().count());
}

#[test]
fn image_and_mask_stay_aligned() {
    // the image is the mask itself, so a warped image thresholded at 0.5
    // should agree with the warped mask away from edges
    let n = 48;
    let mask = render_blob(n, n, (18.0, 27.0), (9.0, 6.0), 0.4);
    let image = Tensor::from_fn(vec![3, n, n], |i| f32::from(mask.data()[i % (n * n)])).unwrap();
    let s = Sample::new(image, Some(mask), "a").unwrap();
    let mut rng = common::rng(11);
    for _ in 0..10 {
        let mut p = AugmentParams::default();
        p.hsv = HsvJitter::none();
        let out = augment(&s, &p, &mut rng);
        let m = out.mask.as_ref().unwrap();
        let disagree = (0..n * n)
            .filter(|&i| (out.image.data()[i] > 0.5) != m.data()[i].eq(&1))
            .count();
        assert!(disagree as f64 <= 0.15 * m.count().max(1) as f64, "{disagree} of {}", m.count());
    }
}

#[test]
fn hsv_conversions() {
    assert_eq!(rgb_to_hsv(1.0, 0.0, 0.0), (0.0, 1.0, 1.0));
    let (h, s, v) = rgb_to_hsv(0.0, 0.0, 1.0);
    assert_eq!((h, s, v), (240.0, 1.0, 1.0));
    let mut rng = common::rng(12);
    let img = Tensor::from_fn(vec![3, 16, 16], |_| rng.random::<f32>()).unwrap();
    let mut max_dev = 0.0f64;
    let plane = 256;
    for i in 0..plane {
        let d = img.data();
        let (r, g, b) = (f64::from(d[i]), f64::from(d[plane + i]), f64::from(d[2 * plane + i]));
        let (h, s, v) = rgb_to_hsv(r, g, b);
        let (r2, g2, b2) = hsv_to_rgb(h, s, v);
        max_dev = max_dev.max((r - r2).abs()).max((g - g2).abs()).max((b - b2).abs());
    }
    assert!(max_dev <= 1e-6);
    let out = augment_hsv(&img, &HsvJitter::none(), &mut rng);
    assert_eq!(out, img);
}

#[test]
fn value_jitter_halves_gray() {
    let gray = Tensor::from_fn(vec![3, 4, 4], |i| 0.2 + 0.04 * (i % 16) as f32).unwrap();
    let out = shift_hsv(&gray, 0.0, 1.0, 0.5);
    for (a, b) in out.data().iter().zip(gray.data()) {
        assert!((a - b * 0.5).abs() <= 1e-6);
    }
}

#[test]
fn hue_jitter_wraps() {
    let (r, g, b) = hsv_to_rgb(350.0 + 20.0 - 360.0, 1.0, 1.0);
    let (h, _, _) = rgb_to_hsv(r, g, b);
    assert!((h - 10.0).abs() < 1e-9);
}

#[test]
fn synth_blobs_properties() {
    let params = SynthParams::default();
    let samples = synth_blobs(5, 200, &params).unwrap();
    assert_eq!(samples.len(), 200);
    let mut counts = vec![0usize; params.max_lesions + 1];
    for s in &samples {
        assert_eq!(s.image.shape(), &[3, 64, 64]);
        assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let m = s.mask.as_ref().unwrap();
        assert!(m.count() <= 64 * 64);
        let comps = connected_components_with_stats(&m.to_binary(), Connectivity::Eight);
        if comps.is_empty() {
            assert!(m.is_empty());
        }
        assert!(comps.iter().all(|c| c.area >= 300), "every synthetic lesion survives the area filter");
        counts[comps.len()] += 1;
    }
    // skewed toward one lesion per image
    let mode = counts.iter().enumerate().max_by_key(|(_, c)| **c).unwrap().0;
    assert_eq!(mode, 1, "{counts:?}");
    assert!(counts[0] > 0);
    assert_eq!(synth_blobs(5, 20, &params).unwrap(), samples[..20].to_vec());
}

#[test]
fn synth_weights_sum_to_one() {
    let w = SynthParams::default().count_weights();
    assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!((w[0] - 0.1).abs() < 1e-12);
}

#[test]
fn render_blob_rasterization() {
    let m = render_blob(64, 64, (30.0, 22.0), (5.0, 5.0), 0.0);
    let area = m.count();
    assert!((60..=100).contains(&area), "area {area}");
    let (r, c) = centroid(&m);
    assert!((r - 30.0).abs() <= 1.0 && (c - 22.0).abs() <= 1.0);
}

#[test]
fn dataset_directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let samples = synth_blobs(1, 6, &SynthParams::default()).unwrap();
    write_dataset(&samples, dir.path()).unwrap();
    std::fs::write(dir.path().join("images").join("notes.txt"), "x").unwrap();
    let entries = scan_dataset(dir.path()).unwrap();
    assert_eq!(entries.len(), 6);
    let loaded = load_entries(&entries, None).unwrap();
    for (a, b) in samples.iter().zip(&loaded) {
        assert_eq!(a.source_id, b.source_id);
        assert_eq!(a.mask, b.mask);
        let max_err = a.image.data().iter().zip(b.image.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max);
        assert!(max_err <= 0.5 / 255.0 + 1e-6);
    }
    assert!(scan_dataset(&dir.path().join("missing")).is_err());
}

#[test]
fn batch_stacks_samples() {
    let a = random_sample(8, 8, 20);
    let b = random_sample(8, 8, 21);
    let (x, y) = make_batch(&[&a, &b]).unwrap();
    assert_eq!(x.shape(), &[2, 3, 8, 8]);
    assert_eq!(y.shape(), &[2, 1, 8, 8]);
    assert_eq!(&x.data()[192..], b.image.data());
    assert!(make_batch(&[&a, &random_sample(4, 4, 1)]).is_err());
}

proptest! {
    #[test]
    fn split_is_partition(n in 5usize..400, k in 2usize..8, seed in any::<u64>()) {
        prop_assume!(n >= k);
        let all = ids(n);
        let split = split_folds(&all, k, seed).unwrap();
        let sizes = split.sizes();
        prop_assert_eq!(sizes.iter().sum::<usize>(), n);
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        let mut members: Vec<&str> = (0..k).flat_map(|f| split.members(f)).collect();
        members.sort();
        let mut expected: Vec<&str> = all.iter().map(|s| s.as_str()).collect();
        expected.sort();
        prop_assert_eq!(members, expected);
    }
}
