mod common;

use std::collections::BTreeMap;
use std::fs;
use std::sync::Arc;

use kanseg::autograd::{Graph, Tensor};
use kanseg::checkpoint;
use kanseg::config::{RunConfig, DEFAULT_CONFIG, MICRO_CONFIG};
use kanseg::dataset::{DataConfig, Dataset, RgbImage, Split};
use kanseg::model::{Model, ModelConfig, Variant};
use kanseg::nn::ParamStore;
use kanseg::trainer::{
    argmax, evaluate_tiles, stitch_tile, train_loop, train_step, Predictor, Sgd, TrainConfig, TrainOptions, LAST_CHECKPOINT,
    TRAIN_LOG,
};
use kanseg::Error;

fn tiny_data(seed: u64) -> Dataset {
    let cfg = DataConfig { tiles: 3, tile_size: 64, test_tiles: 1, patch: 32, train_stride: 32, test_stride: 16, ..Default::default() };
    Dataset::synthesize(&cfg, seed).unwrap()
}

fn tiny_train(epochs: usize) -> TrainConfig {
    TrainConfig { epochs, milestones: vec![1], batch: 4, ..Default::default() }
}

#[test]
fn cross_entropy_matches_per_pixel_mean() {
    let mut r = common::rng(3);
    let (b, c, s) = (2, 6, 5);
    let logits = common::random_tensor(&mut r, vec![b, c, 1, s], 3.0);
    let targets: Vec<u8> = vec![0, 5, 255, 2, 3, 1, 1, 255, 4, 0];
    let mut g = Graph::new();
    let x = g.input("x", logits.clone());
    let loss = g.cross_entropy(x, Arc::new(targets.clone()), 255).unwrap();
    let got = g.value(loss).data()[0];

    let d = logits.data();
    let (mut sum, mut n) = (0.0, 0);
    for bi in 0..b {
        for p in 0..s {
            let t = targets[bi * s + p];
            if t == 255 {
                continue;
            }
            let at = |k: usize| d[(bi * c + k) * s + p];
            let lse = (0..c).map(|k| at(k).exp()).sum::<f64>().ln();
            sum += lse - at(t as usize);
            n += 1;
        }
    }
    assert!((got - sum / n as f64).abs() < 1e-12);
}

#[test]
fn sgd_follows_the_heavy_ball_recurrence() {
    let mut store = ParamStore::<f64>::new();
    store.insert("w", Tensor::from_vec(vec![2], vec![1.0, -2.0]));
    store.insert("frozen", Tensor::from_vec(vec![1], vec![3.0]));
    let mut opt = Sgd::new();
    let (lr, mu, wd) = (0.1, 0.9, 0.01);
    let grads_seq = [[0.5, 0.1], [-0.2, 0.4], [0.3, -0.3]];

    let (mut w, mut v) = ([1.0f64, -2.0], [0.0f64; 2]);
    let (mut f, mut fv) = (3.0f64, 0.0f64);
    for g in grads_seq {
        let grads: BTreeMap<String, Vec<f64>> = [("w".to_string(), g.to_vec())].into();
        opt.step(&mut store, &grads, lr, mu, wd).unwrap();
        for i in 0..2 {
            v[i] = mu * v[i] + (g[i] + wd * w[i]);
            w[i] -= lr * v[i];
        }
        fv = mu * fv + wd * f;
        f -= lr * fv;
    }
    assert_eq!(store.param("w").unwrap().data(), &w);
    assert_eq!(store.param("frozen").unwrap().data(), &[f]);
    assert_eq!(opt.steps(), 3);
}

#[test]
fn sgd_rejects_non_finite_gradients_without_updating() {
    let mut store = ParamStore::<f64>::new();
    store.insert("a", Tensor::from_vec(vec![1], vec![1.0]));
    store.insert("b", Tensor::from_vec(vec![1], vec![1.0]));
    let grads: BTreeMap<String, Vec<f64>> = [("a".to_string(), vec![0.5]), ("b".to_string(), vec![f64::NAN])].into();
    let err = Sgd::new().step(&mut store, &grads, 0.1, 0.9, 0.0).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)));
    assert_eq!(store.param("a").unwrap().data(), &[1.0]);
}

#[test]
fn learning_rate_steps_at_milestones() {
    let cfg = TrainConfig::default();
    let lrs: Vec<f64> = (0..50).map(|e| cfg.lr_at_epoch(e)).collect();
    assert!(lrs[..25].iter().all(|&l| l == 0.01));
    assert!(lrs[25..35].iter().all(|&l| l == 0.001));
    assert!(lrs[35..45].iter().all(|&l| l == 0.0001));
    assert!(lrs[45..].iter().all(|&l| l == 0.00001));
}

#[test]
fn train_config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    assert!(TrainConfig { milestones: vec![30, 20], ..Default::default() }.validate().is_err());
    assert!(TrainConfig { epochs: 20, ..Default::default() }.validate().is_err());
    assert!(TrainConfig { batch: 0, ..Default::default() }.validate().is_err());
    assert!(TrainConfig { lr0: -1.0, ..Default::default() }.validate().is_err());
}

struct Constant(usize);

impl Predictor for Constant {
    fn num_classes(&self) -> usize {
        6
    }

    fn logits(&self, images: Tensor<f32>) -> kanseg::Result<Tensor<f32>> {
        let s = images.shape().to_vec();
        let plane = s[2] * s[3];
        Ok(Tensor::from_fn(vec![s[0], 6, s[2], s[3]], |i| if (i / plane) % 6 == self.0 { 1.0 } else { 0.0 }))
    }
}

/// Class-0 logit is the window's top-left red value, class 1 is zero.
struct Corner;

impl Predictor for Corner {
    fn num_classes(&self) -> usize {
        2
    }

    fn logits(&self, images: Tensor<f32>) -> kanseg::Result<Tensor<f32>> {
        let s = images.shape().to_vec();
        let plane = s[2] * s[3];
        let d = images.data();
        Ok(Tensor::from_fn(vec![s[0], 2, s[2], s[3]], |i| {
            let (b, c) = (i / (2 * plane), (i / plane) % 2);
            if c == 0 {
                d[b * 3 * plane]
            } else {
                0.0
            }
        }))
    }
}

fn norm(v: u8) -> f32 {
    (v as f32 / 255.0 - 0.5) / 0.25
}

#[test]
fn stitching_with_stride_equal_to_patch_visits_each_pixel_once() {
    let img = RgbImage::new(96, 64);
    let s = stitch_tile(&Constant(3), &img, 32, 32).unwrap();
    assert!(s.counts.iter().all(|&n| n == 1));
    assert!(s.prediction.data.iter().all(|&c| c == 3));
}

#[test]
fn overlapping_windows_average_their_logits() {
    // 4×6 tile, 4-pixel windows at x = 0 and x = 2.
    let mut img = RgbImage::new(6, 4);
    for y in 0..4 {
        for x in 0..6 {
            img.put(x, y, [(x * 100) as u8 % 255, 0, 0]);
        }
    }
    let s = stitch_tile(&Corner, &img, 4, 2).unwrap();
    let (a, b) = (norm(0), norm(200));
    let plane = 24;
    for y in 0..4 {
        for x in 0..6 {
            let p = y * 6 + x;
            let expected_count = if (2..4).contains(&x) { 2 } else { 1 };
            assert_eq!(s.counts[p], expected_count);
            let expected = match x {
                0 | 1 => a,
                2 | 3 => (a + b) / 2.0,
                _ => b,
            };
            assert_eq!(s.mean_logits[p], expected, "pixel ({x}, {y})");
            assert_eq!(s.mean_logits[plane + p], 0.0);
            assert_eq!(s.prediction.get(x, y), if expected > 0.0 { 0 } else { 1 });
        }
    }
}

#[test]
fn argmax_breaks_ties_toward_the_lowest_class() {
    assert_eq!(argmax([0.5, 2.0, 2.0, 1.0].into_iter()), 1);
    assert_eq!(argmax([0.0f32; 6].into_iter()), 0);
}

#[test]
fn stitching_rejects_bad_geometry() {
    let img = RgbImage::new(32, 32);
    assert!(stitch_tile(&Constant(0), &img, 64, 32).is_err());
    assert!(stitch_tile(&Constant(0), &img, 32, 0).is_err());
    assert!(stitch_tile(&Constant(0), &img, 16, 17).is_err());
}

#[test]
fn evaluation_of_a_perfect_predictor_scores_one() {
    let data = tiny_data(4);
    let test = data.split(Split::Test);
    let ev = evaluate_tiles(&Constant(0), &test, 32, 16).unwrap();
    let m = ev.report().means().unwrap();
    assert!(m.miou < 1.0);
    assert_eq!(ev.predictions.len(), 1);
    assert_eq!(ev.cm.total(), 64 * 64);
}

#[test]
fn untrained_model_refuses_eval_mode() {
    let model = Model::new(ModelConfig::micro(), 1).unwrap();
    let err = model.predict(Tensor::zeros(vec![1, 3, 32, 32])).unwrap_err();
    assert!(matches!(err, Error::Uninitialized(_)));
}

#[test]
fn every_variant_takes_a_training_step() {
    let data = tiny_data(5);
    let batch: Vec<_> = data.tiles[..2].iter().map(|t| t.crop(0, 0, 64)).collect();
    for v in Variant::ALL {
        let mut model = Model::new(ModelConfig::micro().with_variant(v), 2).unwrap();
        let before = model.store.clone();
        let mut opt = Sgd::new();
        let loss = train_step(&mut model, &batch, &TrainConfig::default(), 0.01, &mut opt).unwrap();
        assert!(loss.is_finite() && loss > 0.0, "{v}: {loss}");
        let still: Vec<&str> =
            model.store.params().filter(|(n, t)| before.param(n).unwrap().bit_eq(t)).map(|(n, _)| n).collect();
        // Key biases shift every score in a softmax row equally and get no gradient.
        let still: Vec<&str> = still.into_iter().filter(|n| !n.ends_with("attn.k.bias")).collect();
        assert!(still.is_empty(), "{v}: {still:?} did not move");
        assert!(model.store.buffers().count() > 0);
    }
}

#[test]
fn checkpoints_round_trip_exactly() {
    let data = tiny_data(6);
    let mut model = Model::new(ModelConfig::micro().with_variant(Variant::DeepKan), 3).unwrap();
    let batch: Vec<_> = data.train_patches().unwrap().into_iter().take(2).collect();
    train_step(&mut model, &batch, &TrainConfig::default(), 0.01, &mut Sgd::new()).unwrap();

    let bytes = checkpoint::to_bytes(&model, 4, Some(0.5)).unwrap();
    assert_eq!(&bytes[..8], b"KSEGCKPT");
    let (back, info) = checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!((info.epoch, info.test_miou), (4, Some(0.5)));
    assert_eq!(back.config(), model.config());
    assert_eq!(checkpoint::to_bytes(&back, 4, Some(0.5)).unwrap(), bytes);
    let x = Tensor::from_fn(vec![1, 3, 32, 32], |i| (i % 7) as f32 * 0.1);
    assert!(model.predict(x.clone()).unwrap().bit_eq(&back.predict(x).unwrap()));

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(checkpoint::from_bytes(&bad).is_err());
    assert!(checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
}

#[test]
fn training_is_bit_reproducible() {
    let data = tiny_data(7);
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let mut model = Model::new(ModelConfig::micro(), 7).unwrap();
        let opts = TrainOptions { out_dir: Some(dir.path().to_path_buf()), verbose: false };
        let outcome = train_loop(&mut model, &data, &tiny_train(2), 7, &opts).unwrap();
        let log = fs::read_to_string(dir.path().join(TRAIN_LOG)).unwrap();
        let ckpt = fs::read(dir.path().join(LAST_CHECKPOINT)).unwrap();
        (outcome.epochs.len(), log, ckpt)
    };
    let (n, log_a, ckpt_a) = run();
    let (_, log_b, ckpt_b) = run();
    assert_eq!(n, 2);
    assert_eq!(log_a.lines().count(), 2);
    assert!(log_a.starts_with("epoch=0 lr=0.01 loss="));
    assert!(log_a.lines().nth(1).unwrap().starts_with("epoch=1 lr=0.001 loss="));
    assert_eq!(log_a, log_b);
    assert_eq!(ckpt_a, ckpt_b);
}

#[test]
fn shipped_config_is_the_default() {
    assert_eq!(RunConfig::from_toml(DEFAULT_CONFIG).unwrap(), RunConfig::default());
    assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    let round = RunConfig::from_toml(&RunConfig::default().to_toml().unwrap()).unwrap();
    assert_eq!(round, RunConfig::default());
    let micro = RunConfig::from_toml(MICRO_CONFIG).unwrap();
    assert_eq!(micro.model, ModelConfig::micro());
}

#[test]
fn config_errors_are_config_errors() {
    let cases = [
        "sed = 3",
        "[model]\nencoder_chanels = [1, 2, 3, 4]",
        "[train]\nmilestones = [30, 20]",
        "[data]\npatch = 100",
        "[model]\nheads = 3",
        "[model.grid]\nintervals = 0",
        "seed = \"seven\"",
    ];
    for text in cases {
        let err = RunConfig::from_toml(text).unwrap_err();
        assert!(err.is_config(), "{text:?} gave {err}");
    }
    let partial = RunConfig::from_toml("seed = 3\n[train]\nepochs = 60").unwrap();
    assert_eq!(partial.seed, 3);
    assert_eq!(partial.train.epochs, 60);
    assert_eq!(partial.model, ModelConfig::default());
}
