//! Loop-level reference implementations used as independent oracles.
#![allow(dead_code)]

use kanseg::autograd::Tensor;
use kanseg::nn::ParamStore;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Replaces every parameter with random values so identity-like inits cannot hide bugs.
pub fn randomize(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, scale: f64) {
    let names: Vec<String> = store.params().map(|(n, _)| n.to_string()).collect();
    for n in names {
        let shape = store.param(&n).unwrap().shape().to_vec();
        let t = random_tensor(rng, shape, scale);
        store.set(&n, t).unwrap();
    }
}

pub fn p<'a>(store: &'a ParamStore<f64>, name: &str) -> &'a [f64] {
    store.param(name).unwrap_or_else(|_| panic!("missing {name}")).data()
}

/// Cox-de Boor recursion on an explicit knot vector with half-open support.
pub fn cox_de_boor(knots: &[f64], i: usize, k: usize, x: f64) -> f64 {
    if k == 0 {
        return if knots[i] <= x && x < knots[i + 1] { 1.0 } else { 0.0 };
    }
    let left = (x - knots[i]) / (knots[i + k] - knots[i]) * cox_de_boor(knots, i, k - 1, x);
    let right = (knots[i + k + 1] - x) / (knots[i + k + 1] - knots[i + 1]) * cox_de_boor(knots, i + 1, k - 1, x);
    left + right
}

pub fn uniform_knots(min: f64, max: f64, g: usize, k: usize) -> Vec<f64> {
    let h = (max - min) / g as f64;
    (0..=g + 2 * k).map(|j| min + (j as f64 - k as f64) * h).collect()
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Tokens `rows × n_in` through a KAN layer computed edge by edge.
pub fn kan_oracle(x: &[f64], n_in: usize, coeffs: &[f64], wb: &[f64], ws: &[f64], n_out: usize, spec: (f64, f64, usize, usize)) -> Vec<f64> {
    let (min, max, g, k) = spec;
    let knots = uniform_knots(min, max, g, k);
    let nb = g + k;
    let rows = x.len() / n_in;
    let mut out = vec![0.0; rows * n_out];
    for r in 0..rows {
        for q in 0..n_out {
            let mut acc = 0.0;
            for pi in 0..n_in {
                let xv = x[r * n_in + pi];
                let xc = xv.clamp(min, max - 1e-12 * (max - min));
                let spline: f64 = (0..nb).map(|i| coeffs[(q * n_in + pi) * nb + i] * cox_de_boor(&knots, i, k, xc)).sum();
                acc += wb[q * n_in + pi] * silu(xv) + ws[q * n_in + pi] * spline;
            }
            out[r * n_out + q] = acc;
        }
    }
    out
}

/// Layer norm over the last axis (biased variance).
pub fn layer_norm(x: &[f64], c: usize, gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, o) in x.chunks(c).zip(out.chunks_mut(c)) {
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
        for j in 0..c {
            o[j] = (row[j] - mean) / (var + eps).sqrt() * gamma[j] + beta[j];
        }
    }
    out
}

/// Training-mode batch norm on `B × C × H × W` (biased batch variance).
pub fn batch_norm(x: &[f64], b: usize, c: usize, hw: usize, gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        let vals: Vec<f64> = (0..b).flat_map(|bi| (0..hw).map(move |i| (bi, i))).map(|(bi, i)| x[(bi * c + ch) * hw + i]).collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        for bi in 0..b {
            for i in 0..hw {
                let idx = (bi * c + ch) * hw + i;
                out[idx] = (x[idx] - mean) / (var + eps).sqrt() * gamma[ch] + beta[ch];
            }
        }
    }
    out
}

/// Depthwise `k × k` cross-correlation with zero padding `k / 2`, `B × C × H × W`.
pub fn dwconv(x: &[f64], b: usize, c: usize, h: usize, w: usize, weight: &[f64], k: usize, bias: Option<&[f64]>) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = bias.map_or(0.0, |bb| bb[ch]);
                    for dy in 0..k {
                        for dx in 0..k {
                            let sy = y as isize + dy as isize - pad;
                            let sx = xx as isize + dx as isize - pad;
                            if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                                acc += weight[(ch * k + dy) * k + dx] * x[((bi * c + ch) * h + sy as usize) * w + sx as usize];
                            }
                        }
                    }
                    out[((bi * c + ch) * h + y) * w + xx] = acc;
                }
            }
        }
    }
    out
}

/// Pointwise (1×1) convolution, `weight: cout × cin`.
pub fn conv1x1(x: &[f64], b: usize, cin: usize, hw: usize, weight: &[f64], bias: &[f64], cout: usize) -> Vec<f64> {
    let mut out = vec![0.0; b * cout * hw];
    for bi in 0..b {
        for o in 0..cout {
            for i in 0..hw {
                let mut acc = bias[o];
                for ci in 0..cin {
                    acc += weight[o * cin + ci] * x[(bi * cin + ci) * hw + i];
                }
                out[(bi * cout + o) * hw + i] = acc;
            }
        }
    }
    out
}

/// `rows × cin` times `cin × cout` plus bias.
pub fn linear(x: &[f64], cin: usize, weight: &[f64], bias: &[f64], cout: usize) -> Vec<f64> {
    let rows = x.len() / cin;
    let mut out = vec![0.0; rows * cout];
    for r in 0..rows {
        for o in 0..cout {
            out[r * cout + o] = bias[o] + (0..cin).map(|i| x[r * cin + i] * weight[i * cout + o]).sum::<f64>();
        }
    }
    out
}

/// `B × L × C` tokens to `B × C × L` maps and back.
pub fn tokens_to_map(z: &[f64], b: usize, l: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; z.len()];
    for bi in 0..b {
        for t in 0..l {
            for ch in 0..c {
                out[(bi * c + ch) * l + t] = z[(bi * l + t) * c + ch];
            }
        }
    }
    out
}

pub fn map_to_tokens(m: &[f64], b: usize, c: usize, l: usize) -> Vec<f64> {
    let mut out = vec![0.0; m.len()];
    for bi in 0..b {
        for t in 0..l {
            for ch in 0..c {
                out[(bi * l + t) * c + ch] = m[(bi * c + ch) * l + t];
            }
        }
    }
    out
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// KAN block on tokens `B × (h·w) × c_in`: KAN, depthwise 3×3, batch norm, ReLU.
pub fn kan_block(store: &ParamStore<f64>, name: &str, z: &[f64], b: usize, h: usize, w: usize, c_in: usize, c_out: usize, spec: (f64, f64, usize, usize), bn_eps: f64) -> Vec<f64> {
    let y = kan_oracle(
        z,
        c_in,
        p(store, &format!("{name}.kan.coeffs")),
        p(store, &format!("{name}.kan.base_weight")),
        p(store, &format!("{name}.kan.spline_weight")),
        c_out,
        spec,
    );
    let l = h * w;
    let m = tokens_to_map(&y, b, l, c_out);
    let m = dwconv(&m, b, c_out, h, w, p(store, &format!("{name}.dw.weight")), 3, None);
    let m = batch_norm(&m, b, c_out, l, p(store, &format!("{name}.bn.weight")), p(store, &format!("{name}.bn.bias")), bn_eps);
    let m: Vec<f64> = m.into_iter().map(|v| v.max(0.0)).collect();
    map_to_tokens(&m, b, c_out, l)
}

/// Windowed multi-head attention on tokens `B × (h·w) × c`, square windows of side
/// `side`, padded keys excluded. Returns the global branch only.
pub fn window_attention(store: &ParamStore<f64>, name: &str, z: &[f64], b: usize, h: usize, w: usize, c: usize, heads: usize, side: usize) -> Vec<f64> {
    let lin = |s: &str, x: &[f64]| linear(x, c, p(store, &format!("{name}.{s}.weight")), p(store, &format!("{name}.{s}.bias")), c);
    let q = lin("q", z);
    let k = lin("k", z);
    let v = lin("v", z);
    let d = c / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let mut o = vec![0.0; z.len()];
    let (nh, nw) = (h.div_ceil(side), w.div_ceil(side));
    for bi in 0..b {
        for wy in 0..nh {
            for wx in 0..nw {
                let members: Vec<usize> = (0..side * side)
                    .filter_map(|t| {
                        let (y, x) = (wy * side + t / side, wx * side + t % side);
                        (y < h && x < w).then_some(y * w + x)
                    })
                    .collect();
                for hd in 0..heads {
                    for &qi in &members {
                        let scores: Vec<f64> = members
                            .iter()
                            .map(|&ki| {
                                (0..d).map(|j| q[(bi * h * w + qi) * c + hd * d + j] * k[(bi * h * w + ki) * c + hd * d + j]).sum::<f64>()
                                    * scale
                            })
                            .collect();
                        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                        let sum: f64 = e.iter().sum();
                        for j in 0..d {
                            o[(bi * h * w + qi) * c + hd * d + j] =
                                members.iter().zip(&e).map(|(&ki, ei)| ei / sum * v[(bi * h * w + ki) * c + hd * d + j]).sum();
                        }
                    }
                }
            }
        }
    }
    lin("proj", &o)
}

/// Local branch: depthwise 3×3 with bias, then 1×1 with bias, on tokens.
pub fn local_branch(store: &ParamStore<f64>, name: &str, z: &[f64], b: usize, h: usize, w: usize, c: usize) -> Vec<f64> {
    let l = h * w;
    let m = tokens_to_map(z, b, l, c);
    let m = dwconv(&m, b, c, h, w, p(store, &format!("{name}.local_dw.weight")), 3, Some(p(store, &format!("{name}.local_dw.bias"))));
    let m = conv1x1(&m, b, c, l, p(store, &format!("{name}.local_pw.weight")), p(store, &format!("{name}.local_pw.bias")), c);
    map_to_tokens(&m, b, c, l)
}

/// Block `g` of a GLKAN decoder: pre-norm attention and FFN, each with a residual.
pub fn glkan_oracle(store: &ParamStore<f64>, z: &[f64], b: usize, h: usize, w: usize, c: usize, heads: usize, side: usize, kan: bool) -> Vec<f64> {
    let y = layer_norm(z, c, p(store, "g.ln1.weight"), p(store, "g.ln1.bias"), kanseg::nn::LN_EPS);
    let a = add(
        &window_attention(store, "g.attn", &y, b, h, w, c, heads, side),
        &local_branch(store, "g.attn", &y, b, h, w, c),
    );
    let zh = add(&a, z);
    let mut f = layer_norm(&zh, c, p(store, "g.ln2.weight"), p(store, "g.ln2.bias"), kanseg::nn::LN_EPS);
    for i in 0..2 {
        let name = format!("g.ffn.{i}");
        f = if kan {
            kan_block(store, &name, &f, b, h, w, c, c, (-1.0, 1.0, 5, 3), kanseg::nn::BN_EPS)
        } else {
            linear(&f, c, p(store, &format!("{name}.weight")), p(store, &format!("{name}.bias")), c)
                .into_iter()
                .map(|v| v.max(0.0))
                .collect()
        };
    }
    add(&f, &zh)
}

/// Per-pixel recount of TP/FP/FN for class `c`, then (F1, IoU) from their definitions.
pub fn recount_scores(pred: &[u8], truth: &[u8], c: u8) -> Option<(f64, f64)> {
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for (&p, &t) in pred.iter().zip(truth) {
        if t == kanseg::metrics::VOID {
            continue;
        }
        match (p == c, t == c) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    if tp + fp + fn_ == 0 {
        return None;
    }
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    Some((f1, tp as f64 / (tp + fp + fn_) as f64))
}
