//! Synthetic tiles, manifests, sliding-window sampling and augmentation.

mod augment;
mod raster;
mod synth;
mod window;

use std::fs;
use std::path::Path;

use kanseg_autograd::par;
use serde::{Deserialize, Serialize};

pub use augment::{Augment, Patch};
pub use raster::{class_color, colorize, LabelMap, RgbImage};
pub use synth::{synth_tile, SynthSpec, BUILDING, CAR, IMPERVIOUS, LOW_VEGETATION, TREE};
pub use window::{axis_origins, sliding_window};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TileRecord {
    pub name: String,
    pub image: String,
    pub label: String,
    pub width: usize,
    pub height: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub seed: u64,
    pub patch: usize,
    pub train_stride: usize,
    pub test_stride: usize,
    #[serde(rename = "tile", default)]
    pub tiles: Vec<TileRecord>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.train_stride == 0 || self.test_stride == 0 {
            return Err(Error::Config("patch size and strides must be at least 1".into()));
        }
        for t in &self.tiles {
            if self.patch > t.width.min(t.height) {
                return Err(Error::Config(format!(
                    "patch {} exceeds tile {} ({}×{})",
                    self.patch, t.name, t.width, t.height
                )));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(format!("manifest: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let m: DatasetManifest = toml::from_str(text).map_err(|e| Error::Config(format!("manifest: {e}")))?;
        m.validate()?;
        Ok(m)
    }
}

/// Dataset generation and sampling settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub tiles: usize,
    pub tile_size: usize,
    /// Number of tiles held out for testing; the last tiles are used.
    pub test_tiles: usize,
    pub patch: usize,
    pub train_stride: usize,
    pub test_stride: usize,
    pub synth: SynthSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            tiles: 20,
            tile_size: 512,
            test_tiles: 4,
            patch: 256,
            train_stride: 256,
            test_stride: 128,
            synth: SynthSpec::default(),
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tiles == 0 || self.tile_size == 0 {
            return Err(Error::Config("need at least one tile of positive size".into()));
        }
        if self.test_tiles >= self.tiles {
            return Err(Error::Config(format!(
                "test_tiles ({}) must leave at least one of {} tiles for training",
                self.test_tiles, self.tiles
            )));
        }
        if self.patch == 0 || self.patch > self.tile_size {
            return Err(Error::Config(format!("patch {} must be in 1..={}", self.patch, self.tile_size)));
        }
        if self.train_stride == 0 || self.test_stride == 0 {
            return Err(Error::Config("strides must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Tile {
    pub record: TileRecord,
    pub image: RgbImage,
    pub label: LabelMap,
}

impl Tile {
    /// Cuts the `patch × patch` window at `(y, x)`.
    pub fn crop(&self, y: usize, x: usize, patch: usize) -> Patch {
        let w = self.image.width;
        let mut image = Vec::with_capacity(patch * patch * 3);
        let mut label = Vec::with_capacity(patch * patch);
        for row in y..y + patch {
            image.extend_from_slice(&self.image.data[(row * w + x) * 3..(row * w + x + patch) * 3]);
            label.extend_from_slice(&self.label.data[row * w + x..row * w + x + patch]);
        }
        Patch { size: patch, image, label }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub tiles: Vec<Tile>,
}

impl Dataset {
    pub fn synthesize(cfg: &DataConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let generated = par::map_indices(cfg.tiles, |i| synth_tile(seed, i, cfg.tile_size, &cfg.synth));
        let mut tiles = Vec::with_capacity(cfg.tiles);
        for (i, g) in generated.into_iter().enumerate() {
            let (image, label) = g?;
            let name = format!("tile_{i:03}");
            let split = if i >= cfg.tiles - cfg.test_tiles { Split::Test } else { Split::Train };
            let record = TileRecord {
                image: format!("{name}.ppm"),
                label: format!("{name}.pgm"),
                name,
                width: cfg.tile_size,
                height: cfg.tile_size,
                split,
            };
            tiles.push(Tile { record, image, label });
        }
        let manifest = DatasetManifest {
            seed,
            patch: cfg.patch,
            train_stride: cfg.train_stride,
            test_stride: cfg.test_stride,
            tiles: tiles.iter().map(|t| t.record.clone()).collect(),
        };
        Ok(Dataset { manifest, tiles })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for t in &self.tiles {
            t.image.save(&dir.join(&t.record.image))?;
            t.label.save(&dir.join(&t.record.label))?;
        }
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, self.manifest.to_toml()?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest = DatasetManifest::from_toml(&text)?;
        let mut tiles = Vec::with_capacity(manifest.tiles.len());
        for record in &manifest.tiles {
            let image = RgbImage::load(&dir.join(&record.image))?;
            let label = LabelMap::load(&dir.join(&record.label))?;
            let dims = [(image.width, image.height), (label.width, label.height)];
            if dims.iter().any(|&d| d != (record.width, record.height)) {
                return Err(Error::Data(format!(
                    "tile {} is listed as {}×{} but its rasters are {dims:?}",
                    record.name, record.width, record.height
                )));
            }
            tiles.push(Tile { record: record.clone(), image, label });
        }
        Ok(Dataset { manifest, tiles })
    }

    pub fn split(&self, split: Split) -> Vec<&Tile> {
        self.tiles.iter().filter(|t| t.record.split == split).collect()
    }

    /// Training patches: windows at the training stride over every training tile.
    pub fn train_patches(&self) -> Result<Vec<Patch>> {
        let m = &self.manifest;
        let mut out = Vec::new();
        for t in self.split(Split::Train) {
            for (y, x) in sliding_window(t.record.height, t.record.width, m.patch, m.train_stride)? {
                out.push(t.crop(y, x, m.patch));
            }
        }
        Ok(out)
    }
}
