//! GLKAN decoder: global-local attention blocks with KAN feed-forward paths.

use std::sync::Arc;

use kanseg_autograd::ops::UpsampleMode;
use kanseg_autograd::{Real, Tensor, Var};

use crate::attention::GlobalLocalAttention;
use crate::error::{Error, Result};
use crate::nn::{dims4, map_to_tokens, tokens_to_map, Conv2d, Ctx, InitRng, KanBlock, LayerNorm, Linear, ParamStore};
use crate::spline::SplineGrid;

pub const FUSE_EPS: f64 = 1e-4;

/// Feed-forward path of a GLKAN block: two KAN blocks, or two linear+ReLU layers.
#[derive(Debug, Clone)]
pub enum FeedForward {
    Kan([KanBlock; 2]),
    Linear([Linear; 2]),
}

impl FeedForward {
    fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut InitRng) {
        match self {
            FeedForward::Kan(b) => b.iter().for_each(|b| b.init(store, rng)),
            FeedForward::Linear(l) => l.iter().for_each(|l| l.init(store, rng)),
        }
    }

    fn num_params(&self) -> usize {
        match self {
            FeedForward::Kan(b) => b.iter().map(KanBlock::num_params).sum(),
            FeedForward::Linear(l) => l.iter().map(Linear::num_params).sum(),
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, z: Var, h: usize, w: usize) -> Result<Var> {
        let mut y = z;
        match self {
            FeedForward::Kan(blocks) => {
                for b in blocks {
                    y = b.forward(ctx, y, h, w)?;
                }
            }
            FeedForward::Linear(layers) => {
                for l in layers {
                    let t = l.forward(ctx, y)?;
                    y = ctx.graph.relu(t)?;
                }
            }
        }
        Ok(y)
    }
}

/// `F̂ = GLAttn(LN(F)) + F`, `out = FFN(LN(F̂)) + F̂`.
#[derive(Debug, Clone)]
pub struct GlkanBlock {
    pub channels: usize,
    pub ln1: LayerNorm,
    pub attn: GlobalLocalAttention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}

impl GlkanBlock {
    pub fn new(name: &str, channels: usize, heads: usize, window: usize, kan_ffn: Option<&Arc<SplineGrid>>) -> Result<Self> {
        let ffn = match kan_ffn {
            Some(grid) => FeedForward::Kan([0, 1].map(|i| {
                KanBlock::new(&format!("{name}.ffn.{i}"), channels, channels, Arc::clone(grid))
            })),
            None => FeedForward::Linear([0, 1].map(|i| Linear::new(format!("{name}.ffn.{i}"), channels, channels))),
        };
        Ok(GlkanBlock {
            channels,
            ln1: LayerNorm::new(format!("{name}.ln1"), channels),
            attn: GlobalLocalAttention::new(&format!("{name}.attn"), channels, heads, window)?,
            ln2: LayerNorm::new(format!("{name}.ln2"), channels),
            ffn,
        })
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut InitRng) {
        self.ln1.init(store);
        self.attn.init(store, rng);
        self.ln2.init(store);
        self.ffn.init(store, rng);
    }

    pub fn num_params(&self) -> usize {
        self.ln1.num_params() + self.attn.num_params() + self.ln2.num_params() + self.ffn.num_params()
    }

    /// Token-level form on `B × L × C`.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, z: Var, h: usize, w: usize) -> Result<Var> {
        let y = self.ln1.forward(ctx, z)?;
        let a = self.attn.forward(ctx, y, h, w)?;
        let zh = ctx.graph.add(a, z)?;
        let y = self.ln2.forward(ctx, zh)?;
        let f = self.ffn.forward(ctx, y, h, w)?;
        Ok(ctx.graph.add(f, zh)?)
    }

    /// Map-level form on `B × C × h × w`.
    pub fn forward_map<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let (_, c, h, w) = dims4(ctx.shape(x))?;
        if c != self.channels {
            return Err(Error::Shape(format!("glkan block expects {} channels, got {c}", self.channels)));
        }
        let z = map_to_tokens(ctx, x)?;
        let y = self.forward(ctx, z, h, w)?;
        tokens_to_map(ctx, y, h, w)
    }
}

/// One decoding stage: block, 2× upsample, channel projection, skip fusion.
#[derive(Debug, Clone)]
pub struct DecoderStage {
    pub block: GlkanBlock,
    pub up_proj: Conv2d,
    pub skip_proj: Conv2d,
    /// Name of the two fusion weights `[a, b]`.
    pub fuse: String,
}

impl DecoderStage {
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var, skip: Var) -> Result<Var> {
        let y = self.block.forward_map(ctx, x)?;
        let y = ctx.graph.upsample(y, 2, UpsampleMode::Bilinear)?;
        let y = self.up_proj.forward(ctx, y)?;
        let s = self.skip_proj.forward(ctx, skip)?;
        let wts = ctx.param(&self.fuse)?;
        let wts = ctx.graph.relu(wts)?;
        Ok(ctx.graph.weighted_fuse(y, s, wts, FUSE_EPS)?)
    }
}

#[derive(Debug, Clone)]
pub struct DecoderSpec {
    /// Encoder channels `C1..C4`.
    pub encoder: [usize; 4],
    /// Stage widths for `j = 4, 3, 2`.
    pub widths: [usize; 3],
    pub heads: usize,
    pub window: usize,
    pub num_classes: usize,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub spec: DecoderSpec,
    pub proj_in: Conv2d,
    pub stages: Vec<DecoderStage>,
    pub classifier: Conv2d,
}

impl Decoder {
    pub fn new(name: &str, spec: DecoderSpec, kan_ffn: Option<&Arc<SplineGrid>>) -> Result<Self> {
        let [c1, c2, c3, c4] = spec.encoder;
        let [d4, d3, d2] = spec.widths;
        let plan = [(4, d4, d3, c3), (3, d3, d2, c2), (2, d2, d2, c1)];
        let stages = plan
            .iter()
            .map(|&(j, width, next, skip_c)| {
                let s = format!("{name}.stage{j}");
                Ok(DecoderStage {
                    block: GlkanBlock::new(&s, width, spec.heads, spec.window, kan_ffn)?,
                    up_proj: Conv2d::new(format!("{s}.up_proj"), width, next, 1, 1, true),
                    skip_proj: Conv2d::new(format!("{s}.skip_proj"), skip_c, next, 1, 1, true),
                    fuse: format!("{s}.fuse"),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Decoder {
            proj_in: Conv2d::new(format!("{name}.proj_in"), c4, d4, 1, 1, true),
            classifier: Conv2d::new(format!("{name}.classifier"), d2, spec.num_classes, 1, 1, true),
            stages,
            spec,
        })
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut InitRng) {
        self.proj_in.init(store, rng);
        for s in &self.stages {
            s.block.init(store, rng);
            s.up_proj.init(store, rng);
            s.skip_proj.init(store, rng);
            store.insert(s.fuse.clone(), Tensor::full(vec![2], 1.0));
        }
        self.classifier.init(store, rng);
    }

    pub fn num_params(&self) -> usize {
        let stages: usize =
            self.stages.iter().map(|s| s.block.num_params() + s.up_proj.num_params() + s.skip_proj.num_params() + 2).sum();
        self.proj_in.num_params() + stages + self.classifier.num_params()
    }

    /// Decodes `F′4` with skips `[F1, F2, F3]` into logits at 4× the resolution of `F1`.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, refined: Var, skips: [Var; 3]) -> Result<Var> {
        self.check_pyramid(ctx, refined, &skips)?;
        let mut x = self.proj_in.forward(ctx, refined)?;
        for (stage, &skip) in self.stages.iter().zip(skips.iter().rev()) {
            x = stage.forward(ctx, x, skip)?;
        }
        let logits = self.classifier.forward(ctx, x)?;
        Ok(ctx.graph.upsample(logits, 4, UpsampleMode::Bilinear)?)
    }

    fn check_pyramid<T: Real>(&self, ctx: &Ctx<T>, refined: Var, skips: &[Var; 3]) -> Result<()> {
        let (b, _, h, w) = dims4(ctx.shape(refined))?;
        let [c1, c2, c3, c4] = self.spec.encoder;
        let expected = [
            vec![b, c1, 8 * h, 8 * w],
            vec![b, c2, 4 * h, 4 * w],
            vec![b, c3, 2 * h, 2 * w],
            vec![b, c4, h, w],
        ];
        let actual = [ctx.shape(skips[0]), ctx.shape(skips[1]), ctx.shape(skips[2]), ctx.shape(refined)];
        if expected.iter().zip(actual).any(|(e, a)| e.as_slice() != a) {
            return Err(Error::Shape(format!("inconsistent pyramid: expected {expected:?}, got {actual:?}")));
        }
        Ok(())
    }
}
