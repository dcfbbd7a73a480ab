use std::fs;

use kanseg::dataset::{
    axis_origins, class_color, colorize, sliding_window, synth_tile, Augment, DataConfig, Dataset, DatasetManifest, LabelMap,
    Patch, RgbImage, Split, SynthSpec, MANIFEST_FILE,
};
use proptest::prelude::*;

fn small_config() -> DataConfig {
    DataConfig { tiles: 3, tile_size: 128, test_tiles: 1, patch: 64, train_stride: 64, test_stride: 32, ..Default::default() }
}

#[test]
fn synthesis_is_deterministic_per_seed_and_index() {
    let spec = SynthSpec::default();
    let a = synth_tile(7, 2, 128, &spec).unwrap();
    let b = synth_tile(7, 2, 128, &spec).unwrap();
    assert_eq!(a, b);
    let c = synth_tile(7, 3, 128, &spec).unwrap();
    let d = synth_tile(8, 2, 128, &spec).unwrap();
    assert_ne!(a.1, c.1);
    assert_ne!(a.1, d.1);
}

#[test]
fn every_foreground_class_meets_the_coverage_floor() {
    let spec = SynthSpec::default();
    for index in 0..6 {
        let (image, label) = synth_tile(7, index, 256, &spec).unwrap();
        assert_eq!((image.width, image.height, label.width, label.height), (256, 256, 256, 256));
        let hist = label.histogram();
        let total = (256 * 256) as f64;
        for (class, &n) in hist.iter().enumerate().take(5) {
            let frac = n as f64 / total;
            assert!(frac >= spec.min_fraction, "tile {index} class {class} covers {frac}");
        }
        assert!(hist[6..].iter().all(|&n| n == 0), "labels outside the class set");
    }
}

#[test]
fn impossible_coverage_is_reported() {
    let spec = SynthSpec { min_fraction: 0.5, max_attempts: 3, ..SynthSpec::default() };
    assert!(synth_tile(7, 0, 128, &spec).is_err());
}

#[test]
fn classes_have_distinct_mean_colors() {
    let (image, label) = synth_tile(7, 0, 256, &SynthSpec::default()).unwrap();
    let mut sums = [[0f64; 3]; 6];
    let mut counts = [0f64; 6];
    for (i, &c) in label.data.iter().enumerate() {
        for (sum, &v) in sums[c as usize].iter_mut().zip(&image.data[i * 3..i * 3 + 3]) {
            *sum += v as f64;
        }
        counts[c as usize] += 1.0;
    }
    let means: Vec<[f64; 3]> = (0..5).map(|c| sums[c].map(|s| s / counts[c])).collect();
    for a in 0..5 {
        for b in a + 1..5 {
            let dist = (0..3).map(|i| (means[a][i] - means[b][i]).powi(2)).sum::<f64>().sqrt();
            assert!(dist > 20.0, "classes {a} and {b} are only {dist} apart");
        }
    }
}

#[test]
fn sliding_window_matches_brute_force_enumeration() {
    for &(extent, patch, stride) in &[(512, 256, 128), (512, 256, 256), (300, 128, 100), (64, 64, 7), (100, 33, 10)] {
        let brute: Vec<usize> = {
            let mut v: Vec<usize> = (0..=extent - patch).filter(|o| o % stride == 0).collect();
            if *v.last().unwrap() != extent - patch {
                v.push(extent - patch);
            }
            v
        };
        assert_eq!(axis_origins(extent, patch, stride).unwrap(), brute);
    }
    assert_eq!(sliding_window(512, 512, 256, 128).unwrap().len(), 9);
}

proptest! {
    #[test]
    fn windows_cover_every_pixel(h in 8usize..90, w in 8usize..90, patch in 1usize..8, stride_frac in 0.05f64..1.0) {
        let stride = ((patch as f64 * stride_frac).ceil() as usize).max(1);
        let origins = sliding_window(h, w, patch, stride).unwrap();
        let mut seen = vec![0u32; h * w];
        for &(y, x) in &origins {
            prop_assert!(y + patch <= h && x + patch <= w);
            for yy in y..y + patch {
                for xx in x..x + patch {
                    seen[yy * w + xx] += 1;
                }
            }
        }
        prop_assert!(seen.iter().all(|&n| n > 0));
        let mut sorted = origins.clone();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), origins.len());
    }

    #[test]
    fn augmentation_permutes_pixels_consistently(size in 1usize..12, turns in 0u8..4, hflip: bool, vflip: bool, seed: u64) {
        // Encode each pixel's source position in its color so the label can be checked against it.
        let n = size * size;
        let label: Vec<u8> = (0..n).map(|i| ((i as u64).wrapping_mul(seed | 1) % 6) as u8).collect();
        let image: Vec<u8> = (0..n).flat_map(|i| [(i % 256) as u8, (i / 256) as u8, label[i]]).collect();
        let p = Patch { size, image, label };
        let a = Augment { quarter_turns: turns, hflip, vflip };
        let q = a.apply(&p).unwrap();
        let mut sources: Vec<usize> = Vec::with_capacity(n);
        for i in 0..n {
            let px = &q.image[i * 3..i * 3 + 3];
            let src = px[0] as usize + 256 * px[1] as usize;
            prop_assert_eq!(q.label[i], p.label[src]);
            prop_assert_eq!(px[2], q.label[i]);
            sources.push(src);
        }
        sources.sort_unstable();
        prop_assert_eq!(sources, (0..n).collect::<Vec<_>>());
    }
}

#[test]
fn four_quarter_turns_are_the_identity() {
    let p = Patch { size: 3, image: (0..27).collect(), label: (0..9).collect() };
    let turn = Augment { quarter_turns: 1, ..Augment::identity() };
    let once = turn.apply(&p).unwrap();
    assert_ne!(once, p);
    let back = (0..3).try_fold(once, |q, _| turn.apply(&q)).unwrap();
    assert_eq!(back, p);
    // One clockwise turn sends the top-left pixel to the top-right corner.
    assert_eq!(turn.apply(&p).unwrap().label[2], 0);
    let flip = Augment { hflip: true, ..Augment::identity() };
    assert_eq!(flip.apply(&flip.apply(&p).unwrap()).unwrap(), p);
}

#[test]
fn augmentation_rejects_ragged_samples() {
    let p = Patch { size: 2, image: vec![0; 11], label: vec![0; 4] };
    assert!(Augment::identity().apply(&p).is_err());
}

#[test]
fn dataset_save_load_round_trip() {
    let cfg = small_config();
    let data = Dataset::synthesize(&cfg, 11).unwrap();
    assert_eq!(data.split(Split::Train).len(), 2);
    assert_eq!(data.split(Split::Test).len(), 1);
    assert_eq!(data.train_patches().unwrap().len(), 2 * 4);

    let dir = tempfile::tempdir().unwrap();
    data.save(dir.path()).unwrap();
    let loaded = Dataset::load(dir.path()).unwrap();
    assert_eq!(loaded.manifest, data.manifest);
    for (a, b) in loaded.tiles.iter().zip(&data.tiles) {
        assert_eq!(a.image, b.image);
        assert_eq!(a.label, b.label);
    }

    // A second synthesis writes byte-identical files.
    let dir2 = tempfile::tempdir().unwrap();
    Dataset::synthesize(&cfg, 11).unwrap().save(dir2.path()).unwrap();
    for entry in fs::read_dir(dir.path()).unwrap() {
        let name = entry.unwrap().file_name();
        assert_eq!(fs::read(dir.path().join(&name)).unwrap(), fs::read(dir2.path().join(&name)).unwrap());
    }
}

#[test]
fn manifest_round_trip_and_validation() {
    let data = Dataset::synthesize(&small_config(), 3).unwrap();
    let text = data.manifest.to_toml().unwrap();
    assert!(text.contains("[[tile]]"));
    assert_eq!(DatasetManifest::from_toml(&text).unwrap(), data.manifest);
    assert!(DatasetManifest::from_toml(&format!("{text}\nbogus = 1\n")).is_err());
    assert!(DatasetManifest::from_toml(&text.replace("patch = 64", "patch = 0")).is_err());
}

#[test]
fn load_reports_mismatched_rasters() {
    let data = Dataset::synthesize(&small_config(), 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    data.save(dir.path()).unwrap();
    LabelMap::new(10, 10, 0).save(&dir.path().join(&data.tiles[0].record.label)).unwrap();
    assert!(Dataset::load(dir.path()).is_err());
    fs::remove_file(dir.path().join(MANIFEST_FILE)).unwrap();
    assert!(Dataset::load(dir.path()).is_err());
}

#[test]
fn data_config_validation() {
    assert!(small_config().validate().is_ok());
    assert!(DataConfig { test_tiles: 3, ..small_config() }.validate().is_err());
    assert!(DataConfig { patch: 200, ..small_config() }.validate().is_err());
    assert!(DataConfig { test_stride: 0, ..small_config() }.validate().is_err());
}

#[test]
fn color_map_and_rasters() {
    assert_eq!(class_color(0), [255, 255, 255]);
    assert_eq!(class_color(1), [0, 0, 255]);
    assert_eq!(class_color(2), [0, 255, 255]);
    assert_eq!(class_color(3), [0, 255, 0]);
    assert_eq!(class_color(4), [255, 255, 0]);
    assert_eq!(class_color(5), [255, 0, 0]);
    let mut l = LabelMap::new(2, 1, 0);
    l.set(1, 0, 4);
    let c = colorize(&l);
    assert_eq!(c.pixel(1, 0), [255, 255, 0]);
    assert_eq!(RgbImage::from_ppm(&c.to_ppm()).unwrap(), c);
    assert_eq!(LabelMap::from_pgm(&l.to_pgm()).unwrap(), l);
    assert!(LabelMap::from_pgm(b"P5\n2 2\n255\n\x00").is_err());
    assert!(RgbImage::from_ppm(b"P5\n1 1\n255\n\x00").is_err());
}
