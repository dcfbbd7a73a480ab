//! The full segmentation network and its ablation variants.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use kanseg_autograd::{Real, Tensor, Var};
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::deepkan::DeepKan;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::glkan::{Decoder, DecoderSpec};
use crate::nn::{Ctx, InitRng, Mode, ParamStore};
use crate::spline::{GridSpec, SplineGrid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub encoder_channels: [usize; 4],
    pub decoder_channels: [usize; 3],
    pub deepkan_modules: usize,
    pub deepkan_residual: bool,
    pub num_classes: usize,
    pub window: usize,
    pub heads: usize,
    pub use_deepkan: bool,
    pub use_glkan_ffn: bool,
    pub grid: GridSpec,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 3,
            encoder_channels: [64, 128, 256, 512],
            decoder_channels: [256, 128, 64],
            deepkan_modules: 4,
            deepkan_residual: false,
            num_classes: 6,
            window: 8,
            heads: 4,
            use_deepkan: true,
            use_glkan_ffn: true,
            grid: GridSpec::default(),
        }
    }
}

impl ModelConfig {
    /// A small configuration for tests and gradient checks.
    pub fn micro() -> Self {
        ModelConfig {
            encoder_channels: [8, 16, 32, 64],
            decoder_channels: [16, 8, 8],
            deepkan_modules: 1,
            ..Default::default()
        }
    }

    pub fn with_variant(mut self, v: Variant) -> Self {
        (self.use_deepkan, self.use_glkan_ffn) = v.flags();
        self
    }

    pub fn variant(&self) -> Variant {
        Variant::from_flags(self.use_deepkan, self.use_glkan_ffn)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes < 2 {
            return bad(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if self.in_channels == 0 || self.encoder_channels.contains(&0) || self.decoder_channels.contains(&0) {
            return bad("channel counts must be positive".into());
        }
        if self.heads == 0 || self.decoder_channels.iter().any(|c| c % self.heads != 0) {
            return bad(format!("decoder widths {:?} must be divisible by {} heads", self.decoder_channels, self.heads));
        }
        if self.window == 0 {
            return bad("window must be positive".into());
        }
        if self.use_deepkan && self.deepkan_modules == 0 {
            return bad("deepkan_modules must be at least 1 when deepkan is enabled".into());
        }
        SplineGrid::new(self.grid)?;
        Ok(())
    }
}

/// The four ablation rows: baseline, +DeepKAN, +GLKAN, both.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    Baseline,
    DeepKan,
    Glkan,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Baseline, Variant::DeepKan, Variant::Glkan, Variant::Full];

    /// `(use_deepkan, use_glkan_ffn)`
    pub fn flags(self) -> (bool, bool) {
        match self {
            Variant::Baseline => (false, false),
            Variant::DeepKan => (true, false),
            Variant::Glkan => (false, true),
            Variant::Full => (true, true),
        }
    }

    pub fn from_flags(deepkan: bool, glkan: bool) -> Self {
        match (deepkan, glkan) {
            (false, false) => Variant::Baseline,
            (true, false) => Variant::DeepKan,
            (false, true) => Variant::Glkan,
            (true, true) => Variant::Full,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::DeepKan => "deepkan",
            Variant::Glkan => "glkan",
            Variant::Full => "full",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}; expected baseline, deepkan, glkan or full")))
    }
}

/// Layer layout of a configured network (no parameter values).
#[derive(Debug, Clone)]
pub struct Network {
    pub config: ModelConfig,
    pub grid: Arc<SplineGrid>,
    pub encoder: Encoder,
    pub deepkan: Option<DeepKan>,
    pub decoder: Decoder,
}

impl Network {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let grid = Arc::new(SplineGrid::new(config.grid)?);
        let encoder = Encoder::new("encoder", config.in_channels, config.encoder_channels);
        let deepkan = if config.use_deepkan {
            let c4 = config.encoder_channels[3];
            Some(DeepKan::new("deepkan", c4, config.deepkan_modules, config.deepkan_residual, &grid)?)
        } else {
            None
        };
        let spec = DecoderSpec {
            encoder: config.encoder_channels,
            widths: config.decoder_channels,
            heads: config.heads,
            window: config.window,
            num_classes: config.num_classes,
        };
        let decoder = Decoder::new("decoder", spec, config.use_glkan_ffn.then_some(&grid))?;
        Ok(Network { config, grid, encoder, deepkan, decoder })
    }

    /// Fresh parameters. Each component draws from its own stream of the seed,
    /// so variants share identical encoder and decoder initializations.
    pub fn init<T: Real>(&self, seed: u64) -> ParamStore<T> {
        let mut store = ParamStore::new();
        let rng = |stream: u64| {
            let mut r = InitRng::seed_from_u64(seed);
            r.set_stream(stream);
            r
        };
        self.encoder.init(&mut store, &mut rng(0));
        if let Some(dk) = &self.deepkan {
            dk.init(&mut store, &mut rng(1));
        }
        self.decoder.init(&mut store, &mut rng(2));
        store
    }

    /// Closed-form parameter count of the layout.
    pub fn num_params(&self) -> usize {
        self.encoder.num_params() + self.deepkan.as_ref().map_or(0, DeepKan::num_params) + self.decoder.num_params()
    }

    /// `image: B × 3 × H × W` to logits `B × C′ × H × W`.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, image: Var) -> Result<Var> {
        let pyr = self.encoder.forward(ctx, image)?;
        let [f1, f2, f3, f4] = pyr.levels;
        let refined = match &self.deepkan {
            Some(dk) => dk.forward(ctx, f4)?,
            None => f4,
        };
        self.decoder.forward(ctx, refined, [f1, f2, f3])
    }
}

/// A network together with its trained (or initial) parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub net: Network,
    pub store: ParamStore<f32>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let net = Network::new(config)?;
        let store = net.init(seed);
        Ok(Model { net, store })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.config
    }

    pub fn num_params(&self) -> usize {
        self.store.num_params()
    }

    /// Eval-mode logits for a batch of normalized images.
    pub fn predict(&self, images: Tensor<f32>) -> Result<Tensor<f32>> {
        let mut ctx = Ctx::new(&self.store, Mode::Eval);
        let x = ctx.input("image", images);
        let y = self.net.forward(&mut ctx, x)?;
        Ok(ctx.graph.value(y).clone())
    }
}
