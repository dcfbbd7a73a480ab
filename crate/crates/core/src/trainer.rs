//! Optimization, the training loop and sliding-window evaluation.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use kanseg_autograd::{par, Graph, Real, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::dataset::{sliding_window, Augment, Dataset, LabelMap, Patch, RgbImage, Split, Tile};
use crate::error::{Error, Result};
use crate::metrics::{ConfusionMatrix, Report, VOID};
use crate::model::Model;
use crate::nn::{Ctx, Mode, ParamStore};

pub const TRAIN_LOG: &str = "train.log";
pub const THROUGHPUT_LOG: &str = "throughput.log";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";

/// Windows evaluated per forward pass during tiled inference.
const EVAL_BATCH: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub milestones: Vec<usize>,
    pub gamma: f64,
    pub batch: usize,
    pub ignore_index: u8,
    pub augment: bool,
    /// Evaluate on the test split after every epoch (needed for best-checkpoint selection).
    pub eval_each_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.01,
            momentum: 0.9,
            weight_decay: 0.0005,
            epochs: 50,
            milestones: vec![25, 35, 45],
            gamma: 0.1,
            batch: 10,
            ignore_index: VOID,
            augment: true,
            eval_each_epoch: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr0 > 0.0 && self.gamma > 0.0) {
            return bad(format!("lr0 ({}) and gamma ({}) must be positive", self.lr0, self.gamma));
        }
        if self.epochs == 0 || self.batch == 0 {
            return bad("epochs and batch must be at least 1".into());
        }
        if self.milestones.windows(2).any(|w| w[1] <= w[0]) {
            return bad(format!("milestones {:?} must be strictly increasing", self.milestones));
        }
        if self.milestones.last().is_some_and(|&m| m >= self.epochs) {
            return bad(format!("milestones {:?} must be below epochs ({})", self.milestones, self.epochs));
        }
        if !(self.momentum >= 0.0 && self.weight_decay >= 0.0) {
            return bad("momentum and weight_decay must be nonnegative".into());
        }
        Ok(())
    }

    /// `lr0 · γ^(number of milestones ≤ epoch)`, with epochs counted from 0.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        self.milestones.iter().filter(|&&m| m <= epoch).fold(self.lr0, |lr, _| lr * self.gamma)
    }
}

/// Heavy-ball SGD: `g′ = g + wd·w`, `v ← μ·v + g′`, `w ← w − lr·v`.
#[derive(Debug, Clone, Default)]
pub struct Sgd<T> {
    velocity: BTreeMap<String, Vec<T>>,
    steps: u64,
}

impl<T: Real> Sgd<T> {
    pub fn new() -> Self {
        Sgd { velocity: BTreeMap::new(), steps: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn velocity(&self, name: &str) -> Option<&[T]> {
        self.velocity.get(name).map(Vec::as_slice)
    }

    /// Updates every stored parameter; a missing gradient counts as zero.
    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &BTreeMap<String, Vec<T>>,
        lr: f64,
        momentum: f64,
        weight_decay: f64,
    ) -> Result<()> {
        for (name, g) in grads {
            let p = store.param(name)?;
            if g.len() != p.numel() {
                return Err(Error::Shape(format!("gradient for {name} has {} values, parameter has {}", g.len(), p.numel())));
            }
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {name} at index {i} is {}", g[i].as_f64())));
            }
        }
        let (lr, mu, wd) = (T::lit(lr), T::lit(momentum), T::lit(weight_decay));
        for (name, p) in store.params_mut() {
            let v = self.velocity.entry(name.to_string()).or_insert_with(|| vec![T::zero(); p.numel()]);
            let g = grads.get(name);
            let w = p.data_mut();
            for i in 0..w.len() {
                let gi = g.map_or(T::zero(), |g| g[i]) + wd * w[i];
                v[i] = mu * v[i] + gi;
                w[i] -= lr * v[i];
            }
        }
        self.steps += 1;
        Ok(())
    }
}

/// Gradients of every stored parameter that took part in `graph`.
pub fn collect_grads<T: Real>(graph: &Graph<T>, store: &ParamStore<T>) -> BTreeMap<String, Vec<T>> {
    store
        .params()
        .filter_map(|(name, _)| graph.grad_by_name(name).map(|g| (name.to_string(), g.to_vec())))
        .collect()
}

fn normalize(v: u8) -> f32 {
    (v as f32 / 255.0 - 0.5) / 0.25
}

/// Interleaved RGB windows to a normalized `B × 3 × S × S` tensor.
pub fn images_to_tensor(images: &[&[u8]], size: usize) -> Result<Tensor<f32>> {
    let plane = size * size;
    let mut data = vec![0f32; images.len() * 3 * plane];
    for (b, img) in images.iter().enumerate() {
        if img.len() != 3 * plane {
            return Err(Error::Shape(format!("window {b} has {} bytes, expected {}", img.len(), 3 * plane)));
        }
        for (i, px) in img.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[(b * 3 + c) * plane + i] = normalize(px[c]);
            }
        }
    }
    Ok(Tensor::new(vec![images.len(), 3, size, size], data)?)
}

pub fn batch_tensors(batch: &[Patch]) -> Result<(Tensor<f32>, Arc<Vec<u8>>)> {
    let size = batch.first().ok_or_else(|| Error::Data("empty batch".into()))?.size;
    let images: Vec<&[u8]> = batch.iter().map(|p| p.image.as_slice()).collect();
    let targets = batch.iter().flat_map(|p| p.label.iter().copied()).collect();
    Ok((images_to_tensor(&images, size)?, Arc::new(targets)))
}

/// One forward/backward/update on `batch`; returns the mean loss.
pub fn train_step(model: &mut Model, batch: &[Patch], cfg: &TrainConfig, lr: f64, opt: &mut Sgd<f32>) -> Result<f64> {
    let (images, targets) = batch_tensors(batch)?;
    let (loss, grads, updates) = {
        let mut ctx = Ctx::new(&model.store, Mode::Train);
        let x = ctx.input("image", images);
        let logits = model.net.forward(&mut ctx, x)?;
        let loss = ctx.graph.cross_entropy(logits, targets, cfg.ignore_index)?;
        let (mut graph, updates) = ctx.finish();
        graph.backward_scalar(loss)?;
        let value = graph.value(loss).data()[0] as f64;
        (value, collect_grads(&graph, &model.store), updates)
    };
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss is {loss}")));
    }
    model.store.apply_bn_updates(&updates);
    opt.step(&mut model.store, &grads, lr, cfg.momentum, cfg.weight_decay)?;
    Ok(loss)
}

fn norm_summary(store: &ParamStore<f32>) -> String {
    let norms: Vec<(&str, f64)> = store.params().map(|(n, t)| (n, t.norm() as f64)).collect();
    let global = norms.iter().map(|(_, n)| n * n).sum::<f64>().sqrt();
    let worst = norms.iter().max_by(|a, b| a.1.total_cmp(&b.1)).map(|(n, v)| format!("{n} {v:.3e}"));
    format!("parameter norms: global {global:.3e}, largest {}", worst.unwrap_or_default())
}

/// Class logits for normalized image batches.
pub trait Predictor: Sync {
    fn num_classes(&self) -> usize;
    fn logits(&self, images: Tensor<f32>) -> Result<Tensor<f32>>;
}

impl Predictor for Model {
    fn num_classes(&self) -> usize {
        self.config().num_classes
    }

    fn logits(&self, images: Tensor<f32>) -> Result<Tensor<f32>> {
        self.predict(images)
    }
}

/// Full-tile prediction assembled from overlapping windows.
#[derive(Debug, Clone)]
pub struct Stitched {
    pub prediction: LabelMap,
    /// Number of windows covering each pixel.
    pub counts: Vec<u32>,
    /// Averaged logits, `C × H × W`.
    pub mean_logits: Vec<f32>,
}

fn crop_rgb(img: &RgbImage, y: usize, x: usize, patch: usize) -> Vec<u8> {
    let w = img.width;
    (y..y + patch).flat_map(|row| img.data[(row * w + x) * 3..(row * w + x + patch) * 3].iter().copied()).collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: impl Iterator<Item = f32>) -> usize {
    let mut best = (0, f32::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

pub fn stitch_tile<P: Predictor>(model: &P, image: &RgbImage, patch: usize, stride: usize) -> Result<Stitched> {
    if stride == 0 || stride > patch {
        return Err(Error::Config(format!("evaluation stride {stride} must be in 1..={patch}")));
    }
    let (h, w) = (image.height, image.width);
    if patch > h.min(w) {
        return Err(Error::Data(format!("tile {h}×{w} is smaller than the {patch}-pixel window")));
    }
    let origins = sliding_window(h, w, patch, stride)?;
    let groups: Vec<&[(usize, usize)]> = origins.chunks(EVAL_BATCH).collect();
    let outputs = par::map_indices(groups.len(), |gi| {
        let crops: Vec<Vec<u8>> = groups[gi].iter().map(|&(y, x)| crop_rgb(image, y, x, patch)).collect();
        let refs: Vec<&[u8]> = crops.iter().map(Vec::as_slice).collect();
        model.logits(images_to_tensor(&refs, patch)?)
    });
    let nc = model.num_classes();
    let plane = h * w;
    let mut sums = vec![0f32; nc * plane];
    let mut counts = vec![0u32; plane];
    for (group, out) in groups.iter().zip(outputs) {
        let out = out?;
        if out.shape() != [group.len(), nc, patch, patch] {
            return Err(Error::Shape(format!("window logits have shape {:?}", out.shape())));
        }
        let d = out.data();
        for (b, &(y0, x0)) in group.iter().enumerate() {
            for py in 0..patch {
                for px in 0..patch {
                    let p = (y0 + py) * w + x0 + px;
                    counts[p] += 1;
                    for c in 0..nc {
                        sums[c * plane + p] += d[((b * nc + c) * patch + py) * patch + px];
                    }
                }
            }
        }
    }
    let mut prediction = LabelMap::new(w, h, 0);
    for p in 0..plane {
        let n = counts[p] as f32;
        for c in 0..nc {
            sums[c * plane + p] /= n;
        }
        prediction.data[p] = argmax((0..nc).map(|c| sums[c * plane + p])) as u8;
    }
    Ok(Stitched { prediction, counts, mean_logits: sums })
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub cm: ConfusionMatrix,
    pub predictions: Vec<LabelMap>,
}

impl Evaluation {
    pub fn report(&self) -> Report {
        Report::new(self.cm.clone())
    }
}

pub fn evaluate_tiles<P: Predictor>(model: &P, tiles: &[&Tile], patch: usize, stride: usize) -> Result<Evaluation> {
    let mut cm = ConfusionMatrix::new(model.num_classes());
    let mut predictions = Vec::with_capacity(tiles.len());
    for t in tiles {
        let s = stitch_tile(model, &t.image, patch, stride)?;
        cm.update(&s.prediction.data, &t.label.data)?;
        predictions.push(s.prediction);
    }
    Ok(Evaluation { cm, predictions })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub test_miou: Option<f64>,
    pub samples_per_sec: f64,
}

impl EpochRecord {
    /// Deterministic log line; throughput is kept out so reruns are byte-identical.
    pub fn log_line(&self) -> String {
        let miou = self.test_miou.map_or_else(|| "-".to_string(), |m| format!("{m:.6}"));
        format!("epoch={} lr={} loss={:.9} test_miou={miou}", self.epoch, self.lr, self.loss)
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Directory for logs and checkpoints; nothing is written when unset.
    pub out_dir: Option<PathBuf>,
    /// Echo per-epoch progress to stderr.
    pub verbose: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochRecord>,
    pub best: Option<(usize, f64)>,
}

fn append(path: &Path, line: &str) -> Result<()> {
    let mut f = File::options().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

/// Trains `model` on the training split of `data`.
pub fn train_loop(model: &mut Model, data: &Dataset, cfg: &TrainConfig, seed: u64, opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    let patches = data.train_patches()?;
    if patches.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let test: Vec<&Tile> = data.split(Split::Test);
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for f in [TRAIN_LOG, THROUGHPUT_LOG] {
            let p = dir.join(f);
            fs::write(&p, "").map_err(|e| Error::io(&p, e))?;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x5eed);
    let mut opt = Sgd::new();
    let mut order: Vec<usize> = (0..patches.len()).collect();
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64)> = None;
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at_epoch(epoch);
        order.shuffle(&mut rng);
        let start = Instant::now();
        let (mut loss_sum, mut n_batches) = (0.0, 0usize);
        for (bi, idx) in order.chunks(cfg.batch).enumerate() {
            let batch: Vec<Patch> = idx
                .iter()
                .map(|&i| if cfg.augment { Augment::random(&mut rng).apply(&patches[i]) } else { Ok(patches[i].clone()) })
                .collect::<Result<_>>()?;
            let loss = train_step(model, &batch, cfg, lr, &mut opt).map_err(|e| match e {
                Error::NonFinite(_) | Error::Tensor(kanseg_autograd::TensorError::NonFinite { .. }) => {
                    Error::NonFinite(format!("epoch {epoch}, batch {bi}: {e}; {}", norm_summary(&model.store)))
                }
                other => other,
            })?;
            loss_sum += loss;
            n_batches += 1;
        }
        let elapsed = start.elapsed().as_secs_f64();
        let test_miou = if cfg.eval_each_epoch && !test.is_empty() {
            let ev = evaluate_tiles(model, &test, data.manifest.patch, data.manifest.test_stride)?;
            Some(ev.report().means()?.miou)
        } else {
            None
        };
        let rec = EpochRecord {
            epoch,
            lr,
            loss: loss_sum / n_batches as f64,
            test_miou,
            samples_per_sec: patches.len() as f64 / elapsed.max(1e-9),
        };
        if opts.verbose {
            eprintln!("{} samples_per_sec={:.2}", rec.log_line(), rec.samples_per_sec);
        }
        let improved = match (test_miou, best) {
            (Some(m), Some((_, b))) => m > b,
            (Some(_), None) => true,
            _ => false,
        };
        if improved {
            best = test_miou.map(|m| (epoch, m));
        }
        if let Some(dir) = &opts.out_dir {
            append(&dir.join(TRAIN_LOG), &rec.log_line())?;
            append(&dir.join(THROUGHPUT_LOG), &format!("epoch={} samples_per_sec={:.3}", epoch, rec.samples_per_sec))?;
            if improved {
                checkpoint::save(&dir.join(BEST_CHECKPOINT), model, epoch + 1, test_miou)?;
            }
        }
        records.push(rec);
    }
    if let Some(dir) = &opts.out_dir {
        let last_miou = records.last().and_then(|r| r.test_miou);
        checkpoint::save(&dir.join(LAST_CHECKPOINT), model, cfg.epochs, last_miou)?;
    }
    Ok(TrainOutcome { epochs: records, best })
}
