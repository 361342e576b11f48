//! Small U-Net with sinusoidal time embedding, an additive condition
//! embedding and feature-wise scale/shift modulation in every residual block.

use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::tensor::{constant, kaiming_uniform, ParamSet, Real, Tensor};
use crate::error::{ensure, Result};
use crate::rng::RandomStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_ch: usize,
    pub out_ch: usize,
    pub width: usize,
    /// Number of 2× downsamplings.
    pub depth: usize,
    pub blocks: usize,
    pub emb_width: usize,
    pub groups: usize,
    /// Width of the condition vector, 0 for an unconditional network.
    pub cond_width: usize,
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl UNetConfig {
    pub fn channels(&self, level: usize) -> usize {
        if level == 0 {
            self.width
        } else {
            2 * self.width
        }
    }

    pub fn groups_for(&self, ch: usize) -> usize {
        gcd(self.groups, ch).max(1)
    }

    pub fn time_dim(&self) -> usize {
        self.width.max(2) & !1
    }

    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        let f = 1usize << self.depth;
        ensure!(
            h % f == 0 && w % f == 0,
            Invalid,
            "spatial extent {h}x{w} not divisible by 2^{}",
            self.depth
        );
        ensure!(self.blocks >= 1 && self.width >= 1, Invalid, "empty network");
        Ok(())
    }

    /// Parameter count from the layer formulas (independent of `init`).
    pub fn param_count(&self) -> usize {
        let conv = |cin: usize, cout: usize, k: usize| cout * cin * k * k + cout;
        let lin = |i: usize, o: usize| i * o + o;
        let e = self.emb_width;
        let res = |cin: usize, cout: usize| {
            2 * cin + conv(cin, cout, 3) + lin(e, 2 * cout) + 2 * cout + conv(cout, cout, 3)
                + if cin != cout { conv(cin, cout, 1) } else { 0 }
        };
        let mut n = lin(self.time_dim(), e) + lin(e, e);
        if self.cond_width > 0 {
            n += lin(self.cond_width, e);
        }
        n += conv(self.in_ch, self.width, 3);
        let mut cin = self.width;
        for l in 0..=self.depth {
            let c = self.channels(l);
            for b in 0..self.blocks {
                n += res(if b == 0 { cin } else { c }, c);
            }
            cin = c;
            if l < self.depth {
                n += conv(c, c, 3);
            }
        }
        for l in (0..self.depth).rev() {
            let c = self.channels(l);
            for b in 0..self.blocks {
                n += res(if b == 0 { cin + c } else { c }, c);
            }
            cin = c;
        }
        n + 2 * self.width + conv(self.width, self.out_ch, 3)
    }

    /// Fresh parameters; the output convolution starts at exactly zero.
    pub fn init<T: Real>(&self, rs: &mut RandomStream) -> ParamSet<T> {
        let mut ps = ParamSet::new();
        let e = self.emb_width;
        linear_init(&mut ps, "time.l1", self.time_dim(), e, rs);
        linear_init(&mut ps, "time.l2", e, e, rs);
        if self.cond_width > 0 {
            linear_init(&mut ps, "cond.proj", self.cond_width, e, rs);
        }
        conv_init(&mut ps, "in", self.in_ch, self.width, 3, rs);
        let mut cin = self.width;
        for l in 0..=self.depth {
            let c = self.channels(l);
            for b in 0..self.blocks {
                res_init(&mut ps, &format!("enc{l}.{b}"), if b == 0 { cin } else { c }, c, e, rs);
            }
            cin = c;
            if l < self.depth {
                conv_init(&mut ps, &format!("down{l}"), c, c, 3, rs);
            }
        }
        for l in (0..self.depth).rev() {
            let c = self.channels(l);
            for b in 0..self.blocks {
                res_init(&mut ps, &format!("dec{l}.{b}"), if b == 0 { cin + c } else { c }, c, e, rs);
            }
            cin = c;
        }
        ps.insert("out.norm.g", constant(&[self.width], 1.0));
        ps.insert("out.norm.b", constant(&[self.width], 0.0));
        ps.insert("out.w", constant(&[self.out_ch, self.width, 3, 3], 0.0));
        ps.insert("out.b", constant(&[self.out_ch], 0.0));
        ps
    }
}

pub(crate) fn linear_init<T: Real>(ps: &mut ParamSet<T>, name: &str, i: usize, o: usize, rs: &mut RandomStream) {
    ps.insert(format!("{name}.w"), kaiming_uniform(&[o, i], i, rs));
    ps.insert(format!("{name}.b"), constant(&[o], 0.0));
}

pub(crate) fn conv_init<T: Real>(
    ps: &mut ParamSet<T>,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
    rs: &mut RandomStream,
) {
    ps.insert(format!("{name}.w"), kaiming_uniform(&[cout, cin, k, k], cin * k * k, rs));
    ps.insert(format!("{name}.b"), constant(&[cout], 0.0));
}

fn res_init<T: Real>(ps: &mut ParamSet<T>, name: &str, cin: usize, cout: usize, e: usize, rs: &mut RandomStream) {
    ps.insert(format!("{name}.n1.g"), constant(&[cin], 1.0));
    ps.insert(format!("{name}.n1.b"), constant(&[cin], 0.0));
    conv_init(ps, &format!("{name}.c1"), cin, cout, 3, rs);
    linear_init(ps, &format!("{name}.emb"), e, 2 * cout, rs);
    ps.insert(format!("{name}.n2.g"), constant(&[cout], 1.0));
    ps.insert(format!("{name}.n2.b"), constant(&[cout], 0.0));
    conv_init(ps, &format!("{name}.c2"), cout, cout, 3, rs);
    if cin != cout {
        conv_init(ps, &format!("{name}.skip"), cin, cout, 1, rs);
    }
}

/// `[B, dim]` sinusoidal features of integer timesteps.
pub fn sinusoidal<T: Real>(ts: &[usize], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            data.push(T::from_f64((t as f64 * freq).sin()));
        }
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            data.push(T::from_f64((t as f64 * freq).cos()));
        }
    }
    Tensor {
        shape: vec![ts.len(), dim],
        data,
    }
}

pub(crate) fn conv<T: Real>(g: &mut Graph<'_, T>, name: &str, x: Var, stride: usize, pad: usize) -> Var {
    let w = g.p(&format!("{name}.w"));
    let b = g.p(&format!("{name}.b"));
    g.conv2d(x, w, Some(b), stride, pad)
}

pub(crate) fn linear<T: Real>(g: &mut Graph<'_, T>, name: &str, x: Var) -> Var {
    let w = g.p(&format!("{name}.w"));
    let b = g.p(&format!("{name}.b"));
    g.linear(x, w, Some(b))
}

pub(crate) fn norm<T: Real>(g: &mut Graph<'_, T>, name: &str, x: Var, groups: usize) -> Var {
    let ga = g.p(&format!("{name}.g"));
    let be = g.p(&format!("{name}.b"));
    g.group_norm(x, ga, be, groups)
}

/// Handles into a bound U-Net: `prefix` is the name prefix used in `Graph::bind`.
pub struct UNet<'c> {
    pub cfg: &'c UNetConfig,
    pub prefix: String,
}

/// Encoder outputs: one skip per level above the bottleneck, plus the bottleneck.
pub struct Encoded {
    pub skips: Vec<Var>,
    pub mid: Var,
}

impl<'c> UNet<'c> {
    pub fn new(cfg: &'c UNetConfig, prefix: &str) -> Self {
        UNet {
            cfg,
            prefix: prefix.to_string(),
        }
    }

    fn n(&self, s: &str) -> String {
        format!("{}{}", self.prefix, s)
    }

    /// SiLU of (time embedding + projected condition), shape `[B, E]`.
    pub fn embed<T: Real>(&self, g: &mut Graph<'_, T>, ts: &[usize], cond: Option<Var>) -> Result<Var> {
        let sin = g.constant(sinusoidal(ts, self.cfg.time_dim()));
        let h = linear(g, &self.n("time.l1"), sin);
        let h = g.silu(h);
        let mut e = linear(g, &self.n("time.l2"), h);
        if self.cfg.cond_width > 0 {
            let c = cond.expect("conditional network needs a condition vector");
            ensure!(
                g.shape(c) == [ts.len(), self.cfg.cond_width],
                Shape,
                "condition {:?}, expected [{}, {}]",
                g.shape(c),
                ts.len(),
                self.cfg.cond_width
            );
            let p = linear(g, &self.n("cond.proj"), c);
            e = g.add(e, p);
        }
        Ok(g.silu(e))
    }

    fn res_block<T: Real>(&self, g: &mut Graph<'_, T>, name: &str, x: Var, emb: Var) -> Var {
        let cin = g.shape(x)[1];
        let h = norm(g, &format!("{name}.n1"), x, self.cfg.groups_for(cin));
        let h = g.silu(h);
        let h = conv(g, &format!("{name}.c1"), h, 1, 1);
        let cout = g.shape(h)[1];
        let h = norm(g, &format!("{name}.n2"), h, self.cfg.groups_for(cout));
        let ss = linear(g, &format!("{name}.emb"), emb);
        let h = g.scale_shift(h, ss);
        let h = g.silu(h);
        let h = conv(g, &format!("{name}.c2"), h, 1, 1);
        let skip = if g.has_param(&format!("{name}.skip.w")) {
            conv(g, &format!("{name}.skip"), x, 1, 0)
        } else {
            x
        };
        g.add(skip, h)
    }

    pub fn encode<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, emb: Var) -> Result<Encoded> {
        let s = g.shape(x);
        ensure!(s[1] == self.cfg.in_ch, Shape, "input channels {} != {}", s[1], self.cfg.in_ch);
        self.cfg.validate(s[2], s[3])?;
        let mut h = conv(g, &self.n("in"), x, 1, 1);
        let mut skips = Vec::new();
        for l in 0..=self.cfg.depth {
            for b in 0..self.cfg.blocks {
                h = self.res_block(g, &self.n(&format!("enc{l}.{b}")), h, emb);
            }
            g.check_finite(h, &self.n(&format!("enc{l}")))?;
            if l < self.cfg.depth {
                skips.push(h);
                h = conv(g, &self.n(&format!("down{l}")), h, 2, 1);
            }
        }
        Ok(Encoded { skips, mid: h })
    }

    pub fn decode<T: Real>(&self, g: &mut Graph<'_, T>, enc: &Encoded, emb: Var) -> Result<Var> {
        let mut h = enc.mid;
        for l in (0..self.cfg.depth).rev() {
            h = g.upsample2x(h);
            h = g.concat(h, enc.skips[l]);
            for b in 0..self.cfg.blocks {
                h = self.res_block(g, &self.n(&format!("dec{l}.{b}")), h, emb);
            }
            g.check_finite(h, &self.n(&format!("dec{l}")))?;
        }
        let h = norm(g, &self.n("out.norm"), h, self.cfg.groups_for(self.cfg.width));
        let h = g.silu(h);
        let out = conv(g, &self.n("out"), h, 1, 1);
        g.check_finite(out, &self.n("out"))?;
        Ok(out)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, ts: &[usize], cond: Option<Var>) -> Result<Var> {
        let emb = self.embed(g, ts, cond)?;
        let enc = self.encode(g, x, emb)?;
        self.decode(g, &enc, emb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(width: usize) -> UNetConfig {
        UNetConfig {
            in_ch: 6,
            out_ch: 7,
            width,
            depth: 2,
            blocks: 2,
            emb_width: 128,
            groups: 8,
            cond_width: 128,
        }
    }

    #[test]
    fn param_count_formula_matches_enumeration() {
        for w in [4, 8, 16, 32, 64] {
            let c = cfg(w);
            let ps: ParamSet<f32> = c.init(&mut RandomStream::new(0));
            assert_eq!(c.param_count(), ps.num_scalars(), "width {w}");
        }
        let tiny = UNetConfig { depth: 1, blocks: 1, cond_width: 0, ..cfg(4) };
        let ps: ParamSet<f32> = tiny.init(&mut RandomStream::new(0));
        assert_eq!(tiny.param_count(), ps.num_scalars());
    }

    #[test]
    fn zero_output_at_init() {
        let c = UNetConfig { depth: 1, ..cfg(8) };
        let ps: ParamSet<f32> = c.init(&mut RandomStream::new(1));
        let mut g = Graph::inference();
        g.bind(&ps, "", false);
        let mut rs = RandomStream::new(2);
        let x = g.constant(super::super::tensor::normal_init(&[2, 6, 8, 8], 1.0, &mut rs));
        let cnd = g.constant(super::super::tensor::normal_init(&[2, 128], 1.0, &mut rs));
        let out = UNet::new(&c, "").forward(&mut g, x, &[3, 700], Some(cnd)).unwrap();
        assert_eq!(g.shape(out), [2, 7, 8, 8]);
        assert!(g.value(out).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_indivisible_extent() {
        let c = cfg(8);
        let ps: ParamSet<f32> = c.init(&mut RandomStream::new(1));
        let mut g = Graph::inference();
        g.bind(&ps, "", false);
        let x = g.constant(Tensor::zeros(&[1, 6, 6, 6]));
        let cnd = g.constant(Tensor::zeros(&[1, 128]));
        assert!(UNet::new(&c, "").forward(&mut g, x, &[1], Some(cnd)).is_err());
    }
}
