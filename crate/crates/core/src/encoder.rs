//! ResNet-style convolutional encoder producing a four-level feature pyramid.

use kanseg_autograd::{Real, Var};

use crate::error::{Error, Result};
use crate::nn::{dims4, BatchNorm, Conv2d, Ctx, InitRng, ParamStore};

/// Output stride of the deepest pyramid level.
pub const MAX_STRIDE: usize = 32;

/// Encoder features `F1..F4` at strides 4, 8, 16, 32.
#[derive(Debug, Clone, Copy)]
pub struct FeaturePyramid {
    pub levels: [Var; 4],
}

/// Two 3×3 conv/BN layers with an additive shortcut.
#[derive(Debug, Clone)]
pub struct BasicBlock {
    pub conv1: Conv2d,
    pub bn1: BatchNorm,
    pub conv2: Conv2d,
    pub bn2: BatchNorm,
    pub shortcut: Option<(Conv2d, BatchNorm)>,
}

impl BasicBlock {
    pub fn new(name: &str, cin: usize, cout: usize, stride: usize) -> Self {
        let shortcut = (stride != 1 || cin != cout).then(|| {
            (Conv2d::new(format!("{name}.down"), cin, cout, 1, stride, false), BatchNorm::new(format!("{name}.down_bn"), cout))
        });
        BasicBlock {
            conv1: Conv2d::new(format!("{name}.conv1"), cin, cout, 3, stride, false),
            bn1: BatchNorm::new(format!("{name}.bn1"), cout),
            conv2: Conv2d::new(format!("{name}.conv2"), cout, cout, 3, 1, false),
            bn2: BatchNorm::new(format!("{name}.bn2"), cout),
            shortcut,
        }
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut InitRng) {
        self.conv1.init(store, rng);
        self.bn1.init(store);
        self.conv2.init(store, rng);
        self.bn2.init(store);
        if let Some((c, bn)) = &self.shortcut {
            c.init(store, rng);
            bn.init(store);
        }
    }

    pub fn num_params(&self) -> usize {
        let sc = self.shortcut.as_ref().map_or(0, |(c, bn)| c.num_params() + bn.num_params());
        self.conv1.num_params() + self.bn1.num_params() + self.conv2.num_params() + self.bn2.num_params() + sc
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let y = self.conv1.forward(ctx, x)?;
        let y = self.bn1.forward(ctx, y)?;
        let y = ctx.graph.relu(y)?;
        let y = self.conv2.forward(ctx, y)?;
        let y = self.bn2.forward(ctx, y)?;
        let s = match &self.shortcut {
            Some((c, bn)) => {
                let s = c.forward(ctx, x)?;
                bn.forward(ctx, s)?
            }
            None => x,
        };
        let y = ctx.graph.add(y, s)?;
        Ok(ctx.graph.relu(y)?)
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub channels: [usize; 4],
    pub stem: Conv2d,
    pub stem_bn: BatchNorm,
    pub stages: Vec<BasicBlock>,
}

impl Encoder {
    pub fn new(name: &str, in_channels: usize, channels: [usize; 4]) -> Self {
        let stages = (0..4)
            .map(|i| {
                let cin = if i == 0 { channels[0] } else { channels[i - 1] };
                let stride = if i == 0 { 1 } else { 2 };
                BasicBlock::new(&format!("{name}.stage{}", i + 1), cin, channels[i], stride)
            })
            .collect();
        Encoder {
            channels,
            stem: Conv2d::new(format!("{name}.stem"), in_channels, channels[0], 3, 2, false),
            stem_bn: BatchNorm::new(format!("{name}.stem_bn"), channels[0]),
            stages,
        }
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut InitRng) {
        self.stem.init(store, rng);
        self.stem_bn.init(store);
        self.stages.iter().for_each(|s| s.init(store, rng));
    }

    pub fn num_params(&self) -> usize {
        self.stem.num_params() + self.stem_bn.num_params() + self.stages.iter().map(BasicBlock::num_params).sum::<usize>()
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, image: Var) -> Result<FeaturePyramid> {
        let (_, c, h, w) = dims4(ctx.shape(image))?;
        if c != self.stem.cin {
            return Err(Error::Shape(format!("encoder expects {} input channels, got {c}", self.stem.cin)));
        }
        if h % MAX_STRIDE != 0 || w % MAX_STRIDE != 0 {
            return Err(Error::Shape(format!("input extent {h}×{w} must be divisible by {MAX_STRIDE}")));
        }
        let x = self.stem.forward(ctx, image)?;
        let x = self.stem_bn.forward(ctx, x)?;
        let x = ctx.graph.relu(x)?;
        let mut x = ctx.graph.max_pool2d(x, 2, 2)?;
        let mut levels = [x; 4];
        for (i, stage) in self.stages.iter().enumerate() {
            x = stage.forward(ctx, x)?;
            levels[i] = x;
        }
        Ok(FeaturePyramid { levels })
    }
}
