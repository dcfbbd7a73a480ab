//! Right-angle rotations and flips applied identically to image and labels.

use rand::Rng;

use crate::error::{Error, Result};

/// A square training sample: interleaved RGB plus class indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Patch {
    pub size: usize,
    pub image: Vec<u8>,
    pub label: Vec<u8>,
}

/// Clockwise rotation by `quarter_turns · 90°`, then optional flips.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Augment {
    pub quarter_turns: u8,
    pub hflip: bool,
    pub vflip: bool,
}

impl Augment {
    pub fn identity() -> Self {
        Augment::default()
    }

    pub fn random<R: Rng>(rng: &mut R) -> Self {
        Augment { quarter_turns: rng.gen_range(0..4), hflip: rng.gen_bool(0.5), vflip: rng.gen_bool(0.5) }
    }

    /// Source pixel of output pixel `(x, y)` in an `s × s` patch.
    fn source(&self, s: usize, x: usize, y: usize) -> (usize, usize) {
        let x = if self.hflip { s - 1 - x } else { x };
        let y = if self.vflip { s - 1 - y } else { y };
        // inverse of the clockwise rotation
        match self.quarter_turns % 4 {
            0 => (x, y),
            1 => (y, s - 1 - x),
            2 => (s - 1 - x, s - 1 - y),
            _ => (s - 1 - y, x),
        }
    }

    pub fn apply(&self, p: &Patch) -> Result<Patch> {
        let s = p.size;
        if p.image.len() != s * s * 3 || p.label.len() != s * s {
            return Err(Error::Shape(format!(
                "augmentation needs a square {s}×{s} sample, got {} image bytes and {} labels",
                p.image.len(),
                p.label.len()
            )));
        }
        let mut image = vec![0; p.image.len()];
        let mut label = vec![0; p.label.len()];
        for y in 0..s {
            for x in 0..s {
                let (sx, sy) = self.source(s, x, y);
                let (d, src) = (y * s + x, sy * s + sx);
                label[d] = p.label[src];
                image[3 * d..3 * d + 3].copy_from_slice(&p.image[3 * src..3 * src + 3]);
            }
        }
        Ok(Patch { size: s, image, label })
    }
}
