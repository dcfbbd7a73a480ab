//! Global-local attention: windowed multi-head self-attention plus a convolutional branch.

use kanseg_autograd::ops::WindowGeom;
use kanseg_autograd::{Real, Tensor, Var};

use crate::error::{Error, Result};
use crate::nn::{dims3, map_to_tokens, tokens_to_map, Conv2d, Ctx, DwConv2d, InitRng, Linear, ParamStore};

/// Additive score for padded keys; softmax weights underflow to exactly zero.
const MASKED: f64 = -1e9;

#[derive(Debug, Clone)]
pub struct GlobalLocalAttention {
    pub channels: usize,
    pub heads: usize,
    pub window: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    pub local_dw: DwConv2d,
    pub local_pw: Conv2d,
}

impl GlobalLocalAttention {
    pub fn new(name: &str, channels: usize, heads: usize, window: usize) -> Result<Self> {
        if heads == 0 || !channels.is_multiple_of(heads) {
            return Err(Error::Config(format!("{channels} channels cannot be split into {heads} heads")));
        }
        if window == 0 {
            return Err(Error::Config("attention window must be positive".into()));
        }
        let lin = |s: &str| Linear::new(format!("{name}.{s}"), channels, channels);
        Ok(GlobalLocalAttention {
            channels,
            heads,
            window,
            q: lin("q"),
            k: lin("k"),
            v: lin("v"),
            proj: lin("proj"),
            local_dw: DwConv2d::new(format!("{name}.local_dw"), channels, 3, true),
            local_pw: Conv2d::new(format!("{name}.local_pw"), channels, channels, 1, 1, true),
        })
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut InitRng) {
        for l in [&self.q, &self.k, &self.v, &self.proj] {
            l.init(store, rng);
        }
        self.local_dw.init(store, rng);
        self.local_pw.init(store, rng);
    }

    pub fn num_params(&self) -> usize {
        4 * self.q.num_params() + self.local_dw.num_params() + self.local_pw.num_params()
    }

    /// Window geometry used on an `h × w` map: square windows no larger than the map.
    pub fn geometry(&self, h: usize, w: usize) -> WindowGeom {
        let side = self.window.min(h.max(w));
        WindowGeom { h, w, wh: side, ww: side }
    }

    /// `B × L × C` tokens in, `B × L × C` out.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, z: Var, h: usize, w: usize) -> Result<Var> {
        let g = self.global(ctx, z, h, w)?;
        let l = self.local(ctx, z, h, w)?;
        Ok(ctx.graph.add(g, l)?)
    }

    /// Map-level entry point, `B × C × h × w` in and out.
    pub fn forward_map<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let s = ctx.shape(x).to_vec();
        let (h, w) = (s[2], s[3]);
        let z = map_to_tokens(ctx, x)?;
        let y = self.forward(ctx, z, h, w)?;
        tokens_to_map(ctx, y, h, w)
    }

    pub fn global<T: Real>(&self, ctx: &mut Ctx<T>, z: Var, h: usize, w: usize) -> Result<Var> {
        let (b, l, c) = dims3(ctx.shape(z))?;
        if c != self.channels || l != h * w {
            return Err(Error::Shape(format!(
                "attention expects B×{}×{} tokens, got {:?}",
                h * w,
                self.channels,
                ctx.shape(z)
            )));
        }
        let geom = self.geometry(h, w);
        let (nh, nw) = geom.windows();
        let n_win = nh * nw;
        let t = geom.tokens();
        let (heads, d) = (self.heads, c / self.heads);
        let x4 = ctx.graph.reshape(z, &[b, h, w, c])?;
        let p = ctx.graph.window_partition(x4, geom)?;
        let split = |ctx: &mut Ctx<T>, lin: &Linear| -> Result<Var> {
            let y = lin.forward(ctx, p)?;
            let y = ctx.graph.reshape(y, &[b * n_win, t, heads, d])?;
            let y = ctx.graph.permute(y, &[0, 2, 1, 3])?;
            Ok(ctx.graph.reshape(y, &[b * n_win * heads, t, d])?)
        };
        let q = split(ctx, &self.q)?;
        let k = split(ctx, &self.k)?;
        let v = split(ctx, &self.v)?;
        let s = ctx.graph.bmm(q, k, true)?;
        let mut s = ctx.graph.scale(s, 1.0 / (d as f64).sqrt())?;
        let pad: Vec<bool> = geom.slots().map(|slot| slot.is_none()).collect();
        if pad.iter().any(|&p| p) {
            let mask = Tensor::from_fn(vec![b * n_win * heads, t, t], |i| {
                let win = (i / (t * t * heads)) % n_win;
                let key = i % t;
                if pad[win * t + key] {
                    T::lit(MASKED)
                } else {
                    T::zero()
                }
            });
            s = ctx.graph.add_const(s, mask)?;
        }
        let a = ctx.graph.softmax(s)?;
        let o = ctx.graph.bmm(a, v, false)?;
        let o = ctx.graph.reshape(o, &[b * n_win, heads, t, d])?;
        let o = ctx.graph.permute(o, &[0, 2, 1, 3])?;
        let o = ctx.graph.reshape(o, &[b * n_win, t, c])?;
        let o = self.proj.forward(ctx, o)?;
        let m = ctx.graph.window_merge(o, geom)?;
        Ok(ctx.graph.reshape(m, &[b, l, c])?)
    }

    pub fn local<T: Real>(&self, ctx: &mut Ctx<T>, z: Var, h: usize, w: usize) -> Result<Var> {
        let m = tokens_to_map(ctx, z, h, w)?;
        let m = self.local_dw.forward(ctx, m)?;
        let m = self.local_pw.forward(ctx, m)?;
        map_to_tokens(ctx, m)
    }
}
