//! Deep feature refinement of the deepest encoder map.

use std::sync::Arc;

use kanseg_autograd::{Real, Var};

use crate::error::{Error, Result};
use crate::nn::{dims4, map_to_tokens, tokens_to_map, Ctx, InitRng, KanBlock, LayerNorm, ParamStore};
use crate::spline::SplineGrid;

/// One refinement module: a layer norm followed by three KAN blocks.
#[derive(Debug, Clone)]
pub struct DeepKanModule {
    pub ln: LayerNorm,
    pub blocks: [KanBlock; 3],
}

impl DeepKanModule {
    pub fn new(name: &str, channels: usize, grid: &Arc<SplineGrid>) -> Self {
        let block = |i: usize| KanBlock::new(&format!("{name}.block{i}"), channels, channels, Arc::clone(grid));
        DeepKanModule { ln: LayerNorm::new(format!("{name}.ln"), channels), blocks: [block(0), block(1), block(2)] }
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut InitRng) {
        self.ln.init(store);
        self.blocks.iter().for_each(|b| b.init(store, rng));
    }

    pub fn num_params(&self) -> usize {
        self.ln.num_params() + self.blocks.iter().map(KanBlock::num_params).sum::<usize>()
    }

    /// Applies the module to `B × L × C` tokens.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, z: Var, h: usize, w: usize) -> Result<Var> {
        let mut y = self.ln.forward(ctx, z)?;
        for b in &self.blocks {
            y = b.forward(ctx, y, h, w)?;
        }
        Ok(y)
    }
}

/// `N` stacked [`DeepKanModule`]s operating at a fixed width.
#[derive(Debug, Clone)]
pub struct DeepKan {
    pub channels: usize,
    pub modules: Vec<DeepKanModule>,
    /// Wraps every module in an identity shortcut when set.
    pub residual: bool,
}

impl DeepKan {
    pub fn new(name: &str, channels: usize, n_modules: usize, residual: bool, grid: &Arc<SplineGrid>) -> Result<Self> {
        if n_modules == 0 {
            return Err(Error::Config("deepkan needs at least one module".into()));
        }
        let modules = (0..n_modules).map(|i| DeepKanModule::new(&format!("{name}.{i}"), channels, grid)).collect();
        Ok(DeepKan { channels, modules, residual })
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut InitRng) {
        self.modules.iter().for_each(|m| m.init(store, rng));
    }

    pub fn num_params(&self) -> usize {
        self.modules.iter().map(DeepKanModule::num_params).sum()
    }

    /// Refines `F4: B × C × h × w`, returning a tensor of the same shape.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, f4: Var) -> Result<Var> {
        let (_, c, h, w) = dims4(ctx.shape(f4))?;
        if c != self.channels {
            return Err(Error::Shape(format!("deepkan expects {} channels, got {c}", self.channels)));
        }
        let mut z = map_to_tokens(ctx, f4)?;
        for m in &self.modules {
            let y = m.forward(ctx, z, h, w)?;
            z = if self.residual { ctx.graph.add(z, y)? } else { y };
        }
        tokens_to_map(ctx, z, h, w)
    }
}
