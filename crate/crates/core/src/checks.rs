//! Finite-difference gradient checks for every layer family, at 64-bit.

use std::fmt;
use std::sync::Arc;

use kanseg_autograd::{grad_check, GradCheckOptions, GradCheckReport, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::GlobalLocalAttention;
use crate::deepkan::DeepKanModule;
use crate::encoder::BasicBlock;
use crate::error::Result;
use crate::glkan::GlkanBlock;
use crate::kan::KanLayerParams;
use crate::model::{ModelConfig, Network};
use crate::nn::{Ctx, InitRng, KanBlock, Mode, ParamStore};
use crate::spline::{GridSpec, SplineGrid};

pub const LAYER_TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct FamilyReport {
    pub family: &'static str,
    pub report: GradCheckReport,
}

impl FamilyReport {
    pub fn passed(&self) -> bool {
        self.report.passed()
    }
}

impl fmt::Display for FamilyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<16} max_rel_error {:.3e}  threshold {:.0e}  checked {:>4}  skipped {:>3}  {}",
            self.family,
            self.report.max_rel_error(),
            self.report.tolerance,
            self.report.checked(),
            self.report.skipped(),
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

fn random_input(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

fn check(family: &'static str, ctx: Ctx<f64>, out: Var, tolerance: f64, max_coords: Option<usize>, seed: u64) -> Result<FamilyReport> {
    let (mut graph, _) = ctx.finish();
    let inputs: Vec<Var> = graph.trainable_inputs().into_iter().map(|(_, v)| v).collect();
    let opts = GradCheckOptions { tolerance, max_coords_per_input: max_coords, seed, ..Default::default() };
    let report = grad_check(&mut graph, out, &inputs, &opts)?;
    Ok(FamilyReport { family, report })
}

fn grid() -> Arc<SplineGrid> {
    Arc::new(SplineGrid::new(GridSpec::default()).expect("default grid is valid"))
}

pub fn kan_layer(seed: u64) -> Result<FamilyReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params: KanLayerParams<f64> = KanLayerParams::random(grid(), 4, 3, &mut rng);
    let store = ParamStore::new();
    let mut ctx = Ctx::new(&store, Mode::Train);
    let x = ctx.input("x", random_input(&mut rng, vec![2, 4], 1.3).with_requires_grad(true));
    let y = params.forward(&mut ctx.graph, "kan", x)?;
    check("kan_layer", ctx, y, LAYER_TOLERANCE, None, seed)
}

pub fn kan_block(seed: u64) -> Result<FamilyReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let block = KanBlock::new("block", 4, 5, grid());
    let mut store = ParamStore::new();
    block.init(&mut store, &mut InitRng::seed_from_u64(seed));
    let mut ctx = Ctx::new(&store, Mode::Train);
    let z = ctx.input("z", random_input(&mut rng, vec![2, 9, 4], 1.0).with_requires_grad(true));
    let y = block.forward(&mut ctx, z, 3, 3)?;
    check("kan_block", ctx, y, LAYER_TOLERANCE, None, seed)
}

pub fn deepkan_module(seed: u64) -> Result<FamilyReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let module = DeepKanModule::new("deepkan.0", 4, &grid());
    let mut store = ParamStore::new();
    module.init(&mut store, &mut InitRng::seed_from_u64(seed));
    let mut ctx = Ctx::new(&store, Mode::Train);
    let z = ctx.input("z", random_input(&mut rng, vec![2, 9, 4], 1.0).with_requires_grad(true));
    let y = module.forward(&mut ctx, z, 3, 3)?;
    check("deepkan_module", ctx, y, LAYER_TOLERANCE, None, seed)
}

pub fn glattn(seed: u64) -> Result<FamilyReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let attn = GlobalLocalAttention::new("attn", 8, 2, 2)?;
    let mut store = ParamStore::new();
    attn.init(&mut store, &mut InitRng::seed_from_u64(seed));
    let mut ctx = Ctx::new(&store, Mode::Train);
    let x = ctx.input("x", random_input(&mut rng, vec![1, 8, 3, 3], 1.0).with_requires_grad(true));
    let y = attn.forward_map(&mut ctx, x)?;
    check("glattn", ctx, y, LAYER_TOLERANCE, None, seed)
}

pub fn glkan_block(seed: u64) -> Result<FamilyReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let block = GlkanBlock::new("block", 8, 2, 2, Some(&grid()))?;
    let mut store = ParamStore::new();
    block.init(&mut store, &mut InitRng::seed_from_u64(seed));
    let mut ctx = Ctx::new(&store, Mode::Train);
    let x = ctx.input("x", random_input(&mut rng, vec![2, 8, 3, 3], 1.0).with_requires_grad(true));
    let y = block.forward_map(&mut ctx, x)?;
    check("glkan_block", ctx, y, LAYER_TOLERANCE, Some(24), seed)
}

pub fn encoder_stage(seed: u64) -> Result<FamilyReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let block = BasicBlock::new("stage", 3, 6, 2);
    let mut store = ParamStore::new();
    block.init(&mut store, &mut InitRng::seed_from_u64(seed));
    let mut ctx = Ctx::new(&store, Mode::Train);
    let x = ctx.input("x", random_input(&mut rng, vec![2, 3, 6, 6], 1.0).with_requires_grad(true));
    let y = block.forward(&mut ctx, x)?;
    check("encoder_stage", ctx, y, LAYER_TOLERANCE, Some(24), seed)
}

/// End-to-end check of the micro configuration on a 64×64 batch.
pub fn full_model(seed: u64) -> Result<FamilyReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = Network::new(ModelConfig::micro())?;
    let store: ParamStore<f64> = net.init(seed);
    let mut ctx = Ctx::new(&store, Mode::Train);
    let x = ctx.input("image", random_input(&mut rng, vec![2, 3, 64, 64], 1.0));
    let y = net.forward(&mut ctx, x)?;
    check("full_model", ctx, y, MODEL_TOLERANCE, Some(3), seed)
}

/// Runs every family in a fixed order.
pub fn run_all(seed: u64) -> Result<Vec<FamilyReport>> {
    let families: [fn(u64) -> Result<FamilyReport>; 7] =
        [kan_layer, kan_block, deepkan_module, glattn, glkan_block, encoder_stage, full_model];
    families.iter().map(|f| f(seed)).collect()
}
