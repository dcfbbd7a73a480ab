use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use kanseg::autograd::{par, Tensor};
use kanseg::dataset::{DataConfig, Dataset, Patch};
use kanseg::model::{Model, ModelConfig};
use kanseg::nn::{Ctx, InitRng, KanBlock, Mode, ParamStore};
use kanseg::spline::{GridSpec, SplineGrid};
use kanseg::trainer::{stitch_tile, train_step, Sgd, TrainConfig};
use rand::{Rng, SeedableRng};

const MODES: [(&str, bool); 2] = [("parallel", false), ("sequential", true)];

fn kan_block(c: &mut Criterion) {
    let grid = Arc::new(SplineGrid::new(GridSpec::default()).unwrap());
    let block = KanBlock::new("b", 64, 64, grid);
    let mut store = ParamStore::<f32>::new();
    block.init(&mut store, &mut InitRng::seed_from_u64(0));
    let mut rng = InitRng::seed_from_u64(1);
    let z = Tensor::from_fn(vec![2, 32 * 32, 64], |_| rng.gen_range(-1.0f32..1.0));

    let mut group = c.benchmark_group("kan_block_fwd_bwd");
    for (name, seq) in MODES {
        par::set_sequential(seq);
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                let mut ctx = Ctx::new(&store, Mode::Train);
                let x = ctx.input("z", z.clone().with_requires_grad(true));
                let y = block.forward(&mut ctx, x, 32, 32).unwrap();
                let s = ctx.graph.mean(y).unwrap();
                let (mut g, _) = ctx.finish();
                g.backward_scalar(s).unwrap();
            })
        });
    }
    par::set_sequential(false);
    group.finish();
}

fn data() -> Dataset {
    let cfg = DataConfig { tiles: 2, tile_size: 128, test_tiles: 1, patch: 64, train_stride: 64, test_stride: 32, ..Default::default() };
    Dataset::synthesize(&cfg, 3).unwrap()
}

fn micro_train_step(c: &mut Criterion) {
    let data = data();
    let batch: Vec<Patch> = data.train_patches().unwrap();
    let cfg = TrainConfig::default();

    let mut group = c.benchmark_group("micro_train_step");
    group.sample_size(10);
    for (name, seq) in MODES {
        par::set_sequential(seq);
        let mut model = Model::new(ModelConfig::micro(), 7).unwrap();
        let mut opt = Sgd::new();
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| train_step(&mut model, &batch, &cfg, 1e-3, &mut opt).unwrap())
        });
    }
    par::set_sequential(false);
    group.finish();
}

fn micro_stitch(c: &mut Criterion) {
    let data = data();
    let mut model = Model::new(ModelConfig::micro(), 7).unwrap();
    let batch = data.train_patches().unwrap();
    train_step(&mut model, &batch, &TrainConfig::default(), 1e-3, &mut Sgd::new()).unwrap();
    let image = &data.tiles[1].image;

    let mut group = c.benchmark_group("micro_stitch_128");
    group.sample_size(10);
    for (name, seq) in MODES {
        par::set_sequential(seq);
        group.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| stitch_tile(&model, image, 64, 32).unwrap()));
    }
    par::set_sequential(false);
    group.finish();
}

criterion_group!(benches, kan_block, micro_train_step, micro_stitch);
criterion_main!(benches);
