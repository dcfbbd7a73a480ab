//! Deterministic synthetic aerial scenes with six land-cover classes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::raster::{LabelMap, RgbImage};
use crate::error::{Error, Result};
use crate::metrics::CLUTTER;

pub const IMPERVIOUS: u8 = 0;
pub const BUILDING: u8 = 1;
pub const LOW_VEGETATION: u8 = 2;
pub const TREE: u8 = 3;
pub const CAR: u8 = 4;

const MEAN_COLOR: [[f64; 3]; 6] = [
    [200.0, 200.0, 195.0],
    [70.0, 80.0, 170.0],
    [150.0, 215.0, 120.0],
    [35.0, 110.0, 45.0],
    [235.0, 205.0, 40.0],
    [165.0, 70.0, 55.0],
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    /// Minimum pixel fraction of every foreground class per tile.
    pub min_fraction: f64,
    /// Layout attempts per tile before giving up.
    pub max_attempts: usize,
    /// Standard deviation of per-pixel color noise.
    pub noise: f64,
    /// Car footprint bounds in pixels, short side then long side.
    pub car_short: [usize; 2],
    pub car_long: [usize; 2],
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec { min_fraction: 0.02, max_attempts: 64, noise: 12.0, car_short: [14, 18], car_long: [24, 32] }
    }
}

struct Canvas {
    s: usize,
    label: LabelMap,
}

impl Canvas {
    fn rect(&mut self, x0: isize, y0: isize, w: usize, h: usize, class: u8, only_on: Option<u8>) {
        let s = self.s as isize;
        for y in y0.max(0)..(y0 + h as isize).min(s) {
            for x in x0.max(0)..(x0 + w as isize).min(s) {
                let (x, y) = (x as usize, y as usize);
                if only_on.is_none_or(|c| self.label.get(x, y) == c) {
                    self.label.set(x, y, class);
                }
            }
        }
    }

    fn blob(&mut self, cx: f64, cy: f64, r0: f64, wobble: [(f64, f64, f64); 2], class: u8) {
        let reach = r0 * 1.5;
        let s = self.s as f64;
        let (y0, y1) = ((cy - reach).max(0.0) as usize, (cy + reach).min(s - 1.0).max(0.0) as usize);
        let (x0, x1) = ((cx - reach).max(0.0) as usize, (cx + reach).min(s - 1.0).max(0.0) as usize);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let theta = dy.atan2(dx);
                let r = r0 * (1.0 + wobble.iter().map(|&(a, k, ph)| a * (k * theta + ph).sin()).sum::<f64>());
                if dx * dx + dy * dy <= r * r {
                    self.label.set(x, y, class);
                }
            }
        }
    }
}

fn layout(rng: &mut ChaCha8Rng, s: usize, spec: &SynthSpec) -> LabelMap {
    let sf = s as f64;
    let mut c = Canvas { s, label: LabelMap::new(s, s, CLUTTER as u8) };
    for _ in 0..rng.gen_range(2..=3) {
        let wobble = [
            (rng.gen_range(0.1..0.25), 3.0, rng.gen_range(0.0..6.3)),
            (rng.gen_range(0.05..0.15), 5.0, rng.gen_range(0.0..6.3)),
        ];
        c.blob(rng.gen_range(0.0..sf), rng.gen_range(0.0..sf), sf * rng.gen_range(0.08..0.16), wobble, LOW_VEGETATION);
    }
    for _ in 0..rng.gen_range(3..=5) {
        let (cx, cy) = (rng.gen_range(0.0..sf), rng.gen_range(0.0..sf));
        for _ in 0..rng.gen_range(3..=6) {
            let spread = sf * 0.06;
            let (x, y) = (cx + rng.gen_range(-spread..spread), cy + rng.gen_range(-spread..spread));
            let wobble = [(rng.gen_range(0.05..0.15), 4.0, rng.gen_range(0.0..6.3)), (0.0, 1.0, 0.0)];
            c.blob(x, y, sf * rng.gen_range(0.025..0.05), wobble, TREE);
        }
    }
    let road_w = |rng: &mut ChaCha8Rng| ((sf * rng.gen_range(0.05..0.09)) as usize).max(spec.car_short[1] + 4);
    let w = road_w(rng);
    let y = rng.gen_range(0..s.saturating_sub(w).max(1)) as isize;
    c.rect(0, y, s, w, IMPERVIOUS, None);
    let w = road_w(rng);
    let x = rng.gen_range(0..s.saturating_sub(w).max(1)) as isize;
    c.rect(x, 0, w, s, IMPERVIOUS, None);
    for _ in 0..rng.gen_range(2..=4) {
        let (bw, bh) = ((sf * rng.gen_range(0.1..0.22)) as usize, (sf * rng.gen_range(0.1..0.22)) as usize);
        let bx = rng.gen_range(0..s.saturating_sub(bw).max(1)) as isize;
        let by = rng.gen_range(0..s.saturating_sub(bh).max(1)) as isize;
        c.rect(bx, by, bw.max(1), bh.max(1), BUILDING, None);
    }
    let avg_area = ((spec.car_short[0] + spec.car_short[1]) * (spec.car_long[0] + spec.car_long[1])) as f64 / 4.0;
    let n_cars = ((0.03 * sf * sf / avg_area).round() as usize).max(1);
    let mut placed = 0;
    for _ in 0..n_cars * 50 {
        if placed == n_cars {
            break;
        }
        let short = rng.gen_range(spec.car_short[0]..=spec.car_short[1]);
        let long = rng.gen_range(spec.car_long[0]..=spec.car_long[1]);
        let (cw, ch) = if rng.gen_bool(0.5) { (short, long) } else { (long, short) };
        if cw > s || ch > s {
            break;
        }
        let x = rng.gen_range(0..=s - cw);
        let y = rng.gen_range(0..=s - ch);
        if c.label.get(x + cw / 2, y + ch / 2) == IMPERVIOUS {
            c.rect(x as isize, y as isize, cw, ch, CAR, None);
            placed += 1;
        }
    }
    c.label
}

fn render(rng: &mut ChaCha8Rng, label: &LabelMap, noise: f64) -> RgbImage {
    let n = Normal::new(0.0, noise.max(0.0)).expect("valid noise");
    let mut img = RgbImage::new(label.width, label.height);
    for y in 0..label.height {
        for x in 0..label.width {
            let class = label.get(x, y) as usize;
            let texture = if class == TREE as usize {
                22.0 * ((x as f64 * 0.9).sin() * (y as f64 * 0.7).cos())
            } else {
                0.0
            };
            let mut rgb = [0u8; 3];
            for (ch, v) in rgb.iter_mut().enumerate() {
                let value = MEAN_COLOR[class][ch] + texture + n.sample(rng);
                *v = value.round().clamp(0.0, 255.0) as u8;
            }
            img.put(x, y, rgb);
        }
    }
    img
}

/// Generates tile `index` of the set identified by `seed`.
pub fn synth_tile(seed: u64, index: usize, size: usize, spec: &SynthSpec) -> Result<(RgbImage, LabelMap)> {
    if size == 0 {
        return Err(Error::Config("tile size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    let need = (spec.min_fraction * (size * size) as f64).ceil() as usize;
    for _ in 0..spec.max_attempts.max(1) {
        let label = layout(&mut rng, size, spec);
        let hist = label.histogram();
        if (IMPERVIOUS..=CAR).all(|c| hist[c as usize] >= need) {
            let image = render(&mut rng, &label, spec.noise);
            return Ok((image, label));
        }
    }
    Err(Error::Data(format!(
        "tile {index}: no layout gives every foreground class {:.1}% coverage after {} attempts",
        100.0 * spec.min_fraction,
        spec.max_attempts
    )))
}
