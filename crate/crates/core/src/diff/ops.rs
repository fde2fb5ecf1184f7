//! Differentiable primitives recorded on a [`Graph`].

use rand::Rng;

use super::graph::{Backward, Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::{matmul_at_into, matmul_bt_into, matmul_into, Scalar};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Bilinear taps of a continuous coordinate on a `size`-long axis with zero
/// padding: `[(index, weight, dweight/dcoord); 2]`, index `None` outside.
#[inline]
pub(crate) fn zero_pad_taps<T: Scalar>(coord: T, size: usize) -> [(Option<usize>, T, T); 2] {
    let f = coord.floor();
    let frac = coord - f;
    let i0 = f.to_i64().unwrap_or(i64::MIN / 2);
    let pick = |i: i64| {
        if i >= 0 && (i as usize) < size {
            Some(i as usize)
        } else {
            None
        }
    };
    [
        (pick(i0), T::one() - frac, -T::one()),
        (pick(i0 + 1), frac, T::one()),
    ]
}

/// Half-pixel-aligned taps for 2x upsampling with border clamping.
fn upsample_taps(out_index: usize, in_size: usize) -> (usize, usize, f64) {
    let src = ((out_index as f64 + 0.5) / 2.0 - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(in_size - 1);
    let i1 = (i0 + 1).min(in_size - 1);
    (i0, i1, src - i0 as f64)
}

fn same_shape(op: &'static str, a: &Tensor<impl Scalar>, b: &Tensor<impl Scalar>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?}", a.shape()), format!("{:?}", b.shape())));
    }
    Ok(())
}

struct FnBackward<F>(F);

impl<T: Scalar, F> Backward<T> for FnBackward<F>
where
    F: Fn(&[&Tensor<T>], &Tensor<T>, &[T], &[bool]) -> Vec<Option<Vec<T>>>,
{
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad_out: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        (self.0)(inputs, output, grad_out, needs)
    }
}

fn rule<T: Scalar, F>(f: F) -> Box<dyn Backward<T>>
where
    F: Fn(&[&Tensor<T>], &Tensor<T>, &[T], &[bool]) -> Vec<Option<Vec<T>>> + 'static,
{
    Box::new(FnBackward(f))
}

impl<T: Scalar> Graph<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let data: Vec<T> = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| *x + *y).collect();
        let out = Tensor::new(self.shape(a), data)?;
        Ok(self.push(out, vec![a, b], rule(|_, _, g, _| vec![Some(g.to_vec()), Some(g.to_vec())])))
    }

    /// Sum of several same-shape values.
    pub fn add_n(&mut self, vars: &[Var]) -> Result<Var> {
        let first = *vars.first().ok_or_else(|| Error::InvalidArgument("add_n of nothing".into()))?;
        let mut data = self.value(first).data().to_vec();
        for &v in &vars[1..] {
            same_shape("add_n", self.value(first), self.value(v))?;
            data.iter_mut().zip(self.value(v).data()).for_each(|(a, b)| *a += *b);
        }
        let out = Tensor::new(self.shape(first), data)?;
        let n = vars.len();
        Ok(self.push(out, vars.to_vec(), rule(move |_, _, g, _| (0..n).map(|_| Some(g.to_vec())).collect())))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let data = self.value(a).data().iter().map(|x| *x * s).collect();
        let out = Tensor::new(self.shape(a), data).expect("same length");
        self.push(out, vec![a], rule(move |_, _, g, _| vec![Some(g.iter().map(|x| *x * s).collect())]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| *x * *y).collect();
        let out = Tensor::new(self.shape(a), data)?;
        Ok(self.push(
            out,
            vec![a, b],
            rule(|inp, _, g, needs| {
                let ga = needs[0].then(|| g.iter().zip(inp[1].data()).map(|(g, y)| *g * *y).collect());
                let gb = needs[1].then(|| g.iter().zip(inp[0].data()).map(|(g, x)| *g * *x).collect());
                vec![ga, gb]
            }),
        ))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data = self.value(a).data().iter().map(|&x| if x < T::zero() { T::zero() } else { x }).collect();
        let out = Tensor::new(self.shape(a), data).expect("same length");
        self.push(
            out,
            vec![a],
            rule(|inp, _, g, _| {
                vec![Some(
                    g.iter()
                        .zip(inp[0].data())
                        .map(|(g, x)| if *x > T::zero() { *g } else { T::zero() })
                        .collect(),
                )]
            }),
        )
    }

    /// Inverted dropout; identity in evaluation mode.
    pub fn dropout(&mut self, a: Var, p: f64) -> Var {
        if !self.is_training() || p <= 0.0 {
            return a;
        }
        let keep = T::of(1.0 / (1.0 - p));
        let n = self.value(a).len();
        let mask: Vec<T> = (0..n)
            .map(|_| if self.rng().random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let data = self.value(a).data().iter().zip(&mask).map(|(x, m)| *x * *m).collect();
        let out = Tensor::new(self.shape(a), data).expect("same length");
        self.push(
            out,
            vec![a],
            rule(move |_, _, g, _| vec![Some(g.iter().zip(&mask).map(|(g, m)| *g * *m).collect())]),
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(out, vec![a], rule(|_, _, g, _| vec![Some(g.to_vec())])))
    }

    /// `x[..., in] · w[in, out] + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let din = *xs.last().unwrap_or(&0);
        if ws.len() != 2 || ws[0] != din {
            return Err(Error::shape("linear", format!("weight [{din}, out]"), format!("{ws:?}")));
        }
        let dout = ws[1];
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(Error::shape("linear bias", format!("[{dout}]"), format!("{:?}", self.shape(b))));
            }
        }
        let n = self.value(x).len() / din.max(1);
        let mut out = vec![T::zero(); n * dout];
        if let Some(b) = b {
            let bias = self.value(b).data();
            out.chunks_mut(dout).for_each(|row| row.copy_from_slice(bias));
        }
        matmul_into(n, din, dout, self.value(x).data(), self.value(w).data(), &mut out, b.is_some());
        let mut shape = xs.clone();
        *shape.last_mut().unwrap() = dout;
        let out = Tensor::new(&shape, out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        let has_bias = b.is_some();
        Ok(self.push(
            out,
            parents,
            rule(move |inp, _, g, needs| {
                let (xv, wv) = (inp[0].data(), inp[1].data());
                let gx = needs[0].then(|| {
                    let mut gx = vec![T::zero(); n * din];
                    matmul_bt_into(n, dout, din, g, wv, &mut gx, false);
                    gx
                });
                let gw = needs[1].then(|| {
                    let mut gw = vec![T::zero(); din * dout];
                    matmul_at_into(din, n, dout, xv, g, &mut gw, false);
                    gw
                });
                let mut res = vec![gx, gw];
                if has_bias {
                    res.push(needs[2].then(|| {
                        let mut gb = vec![T::zero(); dout];
                        for row in g.chunks(dout) {
                            gb.iter_mut().zip(row).for_each(|(a, b)| *a += *b);
                        }
                        gb
                    }));
                }
                res
            }),
        ))
    }

    /// `a[n, k] · b[k, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("[n, k] x [k, m] with a = {sa:?}"), format!("{sb:?}")));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); n * m];
        matmul_into(n, k, m, self.value(a).data(), self.value(b).data(), &mut out, false);
        let out = Tensor::new(&[n, m], out)?;
        Ok(self.push(
            out,
            vec![a, b],
            rule(move |inp, _, g, needs| {
                let ga = needs[0].then(|| {
                    let mut ga = vec![T::zero(); n * k];
                    matmul_bt_into(n, m, k, g, inp[1].data(), &mut ga, false);
                    ga
                });
                let gb = needs[1].then(|| {
                    let mut gb = vec![T::zero(); k * m];
                    matmul_at_into(k, n, m, inp[0].data(), g, &mut gb, false);
                    gb
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Transpose of a rank-2 value.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("transpose", "rank 2", format!("{s:?}")));
        }
        let (n, m) = (s[0], s[1]);
        let out = Tensor::new(&[m, n], transpose_buf(self.value(a).data(), n, m))?;
        Ok(self.push(out, vec![a], rule(move |_, _, g, _| vec![Some(transpose_buf(g, m, n))])))
    }

    /// Normalizes the trailing axis, then applies `gamma` and `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm", format!("[{d}]"), format!("{:?}", self.shape(gamma))));
        }
        let eps = T::of(LAYER_NORM_EPS);
        let dn = T::of(d as f64);
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xv.len() / d;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / dn;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                let h = (row[c] - mean) * is;
                xhat[r * d + c] = h;
                out[r * d + c] = h * gv[c] + bv[c];
            }
        }
        let out = Tensor::new(self.shape(x), out)?;
        Ok(self.push(
            out,
            vec![x, gamma, beta],
            rule(move |inp, _, g, needs| {
                let gv = inp[1].data();
                let gx = needs[0].then(|| {
                    let mut gx = vec![T::zero(); g.len()];
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for c in 0..d {
                            let dh = gr[c] * gv[c];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[c];
                        }
                        mean_dh /= dn;
                        mean_dh_h /= dn;
                        for c in 0..d {
                            let dh = gr[c] * gv[c];
                            gx[r * d + c] = inv_std[r] * (dh - mean_dh - hr[c] * mean_dh_h);
                        }
                    }
                    gx
                });
                let ggamma = needs[1].then(|| {
                    let mut gg = vec![T::zero(); d];
                    for r in 0..rows {
                        for c in 0..d {
                            gg[c] += g[r * d + c] * xhat[r * d + c];
                        }
                    }
                    gg
                });
                let gbeta = needs[2].then(|| {
                    let mut gb = vec![T::zero(); d];
                    for row in g.chunks(d) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += *b);
                    }
                    gb
                });
                vec![gx, ggamma, gbeta]
            }),
        ))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", format!("axis < {}", shape.len()), axis));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * len * inner + k * inner + i;
                let m = (0..len).map(|k| xv[at(k)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for k in 0..len {
                    let e = (xv[at(k)] - m).exp();
                    out[at(k)] = e;
                    z += e;
                }
                for k in 0..len {
                    out[at(k)] /= z;
                }
            }
        }
        let out = Tensor::new(&shape, out)?;
        Ok(self.push(
            out,
            vec![x],
            rule(move |_, y, g, _| {
                let yv = y.data();
                let mut gx = vec![T::zero(); g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| o * len * inner + k * inner + i;
                        let dot: T = (0..len).map(|k| g[at(k)] * yv[at(k)]).sum();
                        for k in 0..len {
                            gx[at(k)] = yv[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// 2D cross-correlation of `x[C, H, W]` with `w[O, C, k, k]`, zero padding `pad`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] || ws[2] != ws[3] || stride == 0 {
            return Err(Error::shape("conv2d", format!("x [C,H,W], w [O,{},k,k]", xs.first().unwrap_or(&0)), format!("x {xs:?}, w {ws:?}")));
        }
        let (c, h, wd) = (xs[0], xs[1], xs[2]);
        let (o, k) = (ws[0], ws[2]);
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::shape("conv2d", format!("spatial size >= {k}"), format!("{xs:?}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(Error::shape("conv2d bias", format!("[{o}]"), format!("{:?}", self.shape(b))));
            }
        }
        let geo = ConvGeometry {
            c,
            h,
            w: wd,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (wd + 2 * pad - k) / stride + 1,
        };
        let cols = geo.im2col(self.value(x).data());
        let (ckk, hw) = (c * k * k, geo.ho * geo.wo);
        let mut out = vec![T::zero(); o * hw];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for (oc, chunk) in out.chunks_mut(hw).enumerate() {
                chunk.iter_mut().for_each(|v| *v = bias[oc]);
            }
        }
        matmul_into(o, ckk, hw, self.value(w).data(), &cols, &mut out, b.is_some());
        let out = Tensor::new(&[o, geo.ho, geo.wo], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        let has_bias = b.is_some();
        Ok(self.push(
            out,
            parents,
            rule(move |inp, _, g, needs| {
                let gx = needs[0].then(|| {
                    let mut dcols = vec![T::zero(); ckk * hw];
                    matmul_at_into(ckk, o, hw, inp[1].data(), g, &mut dcols, false);
                    geo.col2im(&dcols)
                });
                let gw = needs[1].then(|| {
                    let mut gw = vec![T::zero(); o * ckk];
                    matmul_bt_into(o, hw, ckk, g, &cols, &mut gw, false);
                    gw
                });
                let mut res = vec![gx, gw];
                if has_bias {
                    res.push(needs[2].then(|| g.chunks(hw).map(|ch| ch.iter().copied().sum()).collect()));
                }
                res
            }),
        ))
    }

    /// 3x3 convolution, stride 1, zero padding 1.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        if self.shape(w).len() != 4 || self.shape(w)[2] != 3 {
            return Err(Error::shape("conv3x3", "[O, C, 3, 3]", format!("{:?}", self.shape(w))));
        }
        self.conv2d(x, w, b, 1, 1)
    }

    /// 2x bilinear upsampling of `x[C, H, W]` with half-pixel alignment.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::shape("upsample2x", "[C, H, W]", format!("{s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (ho, wo) = (2 * h, 2 * w);
        let ty: Vec<(usize, usize, T)> = (0..ho).map(|i| upsample_taps(i, h)).map(|(a, b, f)| (a, b, T::of(f))).collect();
        let tx: Vec<(usize, usize, T)> = (0..wo).map(|i| upsample_taps(i, w)).map(|(a, b, f)| (a, b, T::of(f))).collect();
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); c * ho * wo];
        for ch in 0..c {
            let src = &xv[ch * h * w..(ch + 1) * h * w];
            let dst = &mut out[ch * ho * wo..(ch + 1) * ho * wo];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                let (r0, r1) = (&src[y0 * w..(y0 + 1) * w], &src[y1 * w..(y1 + 1) * w]);
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
                    let bot = r1[x0] + (r1[x1] - r1[x0]) * fx;
                    dst[oy * wo + ox] = top + (bot - top) * fy;
                }
            }
        }
        let out = Tensor::new(&[c, ho, wo], out)?;
        Ok(self.push(
            out,
            vec![x],
            rule(move |_, _, g, _| {
                let mut gx = vec![T::zero(); c * h * w];
                let one = T::one();
                for ch in 0..c {
                    let gs = &g[ch * ho * wo..(ch + 1) * ho * wo];
                    let dst = &mut gx[ch * h * w..(ch + 1) * h * w];
                    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                            let gv = gs[oy * wo + ox];
                            dst[y0 * w + x0] += gv * (one - fy) * (one - fx);
                            dst[y0 * w + x1] += gv * (one - fy) * fx;
                            dst[y1 * w + x0] += gv * fy * (one - fx);
                            dst[y1 * w + x1] += gv * fy * fx;
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Samples `feature[C, H, W]` at continuous `pts[N, 2]` (x, y) in texel
    /// units with zero padding, returning `[N, C]`. Differentiable in both.
    pub fn bilinear_sample(&mut self, feature: Var, pts: Var) -> Result<Var> {
        let fs = self.shape(feature).to_vec();
        let ps = self.shape(pts).to_vec();
        if fs.len() != 3 || ps.len() != 2 || ps[1] != 2 {
            return Err(Error::shape("bilinear_sample", "feature [C,H,W], pts [N,2]", format!("{fs:?}, {ps:?}")));
        }
        let (c, h, w) = (fs[0], fs[1], fs[2]);
        let n = ps[0];
        let fv = self.value(feature).data();
        let pv = self.value(pts).data();
        let mut out = vec![T::zero(); n * c];
        for i in 0..n {
            let tx = zero_pad_taps(pv[2 * i], w);
            let ty = zero_pad_taps(pv[2 * i + 1], h);
            for &(yi, wy, _) in &ty {
                let Some(yi) = yi else { continue };
                for &(xi, wx, _) in &tx {
                    let Some(xi) = xi else { continue };
                    let wgt = wx * wy;
                    for ch in 0..c {
                        out[i * c + ch] += wgt * fv[ch * h * w + yi * w + xi];
                    }
                }
            }
        }
        let out = Tensor::new(&[n, c], out)?;
        Ok(self.push(
            out,
            vec![feature, pts],
            rule(move |inp, _, g, needs| {
                let fv = inp[0].data();
                let pv = inp[1].data();
                let mut gf = needs[0].then(|| vec![T::zero(); c * h * w]);
                let mut gp = needs[1].then(|| vec![T::zero(); n * 2]);
                for i in 0..n {
                    let tx = zero_pad_taps(pv[2 * i], w);
                    let ty = zero_pad_taps(pv[2 * i + 1], h);
                    let go = &g[i * c..(i + 1) * c];
                    for &(yi, wy, dwy) in &ty {
                        let Some(yi) = yi else { continue };
                        for &(xi, wx, dwx) in &tx {
                            let Some(xi) = xi else { continue };
                            let mut dot = T::zero();
                            for ch in 0..c {
                                let idx = ch * h * w + yi * w + xi;
                                if let Some(gf) = gf.as_mut() {
                                    gf[idx] += go[ch] * wx * wy;
                                }
                                dot += go[ch] * fv[idx];
                            }
                            if let Some(gp) = gp.as_mut() {
                                gp[2 * i] += dot * dwx * wy;
                                gp[2 * i + 1] += dot * wx * dwy;
                            }
                        }
                    }
                }
                vec![gf, gp]
            }),
        ))
    }

    /// Multi-head, multi-level deformable sampling core.
    ///
    /// `levels[l]` holds values laid out `[H_l, W_l, d]`; `loc` is
    /// `[Q, heads, levels, points, 2]` in texel units of each level and
    /// `weights` is `[Q, heads, levels * points]`. Head `h` reads channels
    /// `h*d/heads .. (h+1)*d/heads`. Returns `[Q, d]`.
    pub fn deform_sample(&mut self, levels: &[Var], loc: Var, weights: Var) -> Result<Var> {
        let ls = self.shape(loc).to_vec();
        if ls.len() != 5 || ls[4] != 2 || ls[2] != levels.len() {
            return Err(Error::shape("deform_sample", format!("loc [Q, heads, {}, points, 2]", levels.len()), format!("{ls:?}")));
        }
        let (q, nh, nl, np) = (ls[0], ls[1], ls[2], ls[3]);
        if self.shape(weights) != [q, nh, nl * np] {
            return Err(Error::shape("deform_sample weights", format!("[{q}, {nh}, {}]", nl * np), format!("{:?}", self.shape(weights))));
        }
        let mut dims = Vec::with_capacity(nl);
        for &lv in levels {
            let s = self.shape(lv);
            if s.len() != 3 {
                return Err(Error::shape("deform_sample level", "[H, W, d]", format!("{s:?}")));
            }
            dims.push((s[0], s[1], s[2]));
        }
        let d = dims.first().map(|x| x.2).unwrap_or(0);
        if dims.iter().any(|x| x.2 != d) || nh == 0 || d % nh != 0 {
            return Err(Error::shape("deform_sample", format!("channels divisible by {nh} and equal across levels"), format!("{dims:?}")));
        }
        let dh = d / nh;
        let lv_data: Vec<&[T]> = levels.iter().map(|&v| self.value(v).data()).collect();
        let lc = self.value(loc).data();
        let wv = self.value(weights).data();
        let mut out = vec![T::zero(); q * d];
        for qi in 0..q {
            for hh in 0..nh {
                let o = &mut out[qi * d + hh * dh..qi * d + (hh + 1) * dh];
                for l in 0..nl {
                    let (hl, wl, _) = dims[l];
                    let vals = lv_data[l];
                    for k in 0..np {
                        let li = (((qi * nh + hh) * nl + l) * np + k) * 2;
                        let a = wv[(qi * nh + hh) * nl * np + l * np + k];
                        let tx = zero_pad_taps(lc[li], wl);
                        let ty = zero_pad_taps(lc[li + 1], hl);
                        for &(yi, wy, _) in &ty {
                            let Some(yi) = yi else { continue };
                            for &(xi, wx, _) in &tx {
                                let Some(xi) = xi else { continue };
                                let s = a * wx * wy;
                                let base = (yi * wl + xi) * d + hh * dh;
                                for (oc, v) in o.iter_mut().zip(&vals[base..base + dh]) {
                                    *oc += s * *v;
                                }
                            }
                        }
                    }
                }
            }
        }
        let out = Tensor::new(&[q, d], out)?;
        let mut parents = levels.to_vec();
        parents.push(loc);
        parents.push(weights);
        Ok(self.push(
            out,
            parents,
            rule(move |inp, _, g, needs| {
                let lc = inp[nl].data();
                let wv = inp[nl + 1].data();
                let mut gl: Vec<Option<Vec<T>>> = (0..nl)
                    .map(|l| needs[l].then(|| vec![T::zero(); dims[l].0 * dims[l].1 * d]))
                    .collect();
                let mut gloc = needs[nl].then(|| vec![T::zero(); lc.len()]);
                let mut gw = needs[nl + 1].then(|| vec![T::zero(); wv.len()]);
                for qi in 0..q {
                    for hh in 0..nh {
                        let go = &g[qi * d + hh * dh..qi * d + (hh + 1) * dh];
                        for l in 0..nl {
                            let (hl, wl, _) = dims[l];
                            let vals = inp[l].data();
                            for k in 0..np {
                                let li = (((qi * nh + hh) * nl + l) * np + k) * 2;
                                let wi = (qi * nh + hh) * nl * np + l * np + k;
                                let a = wv[wi];
                                let tx = zero_pad_taps(lc[li], wl);
                                let ty = zero_pad_taps(lc[li + 1], hl);
                                let mut sample_dot = T::zero();
                                let (mut dx, mut dy) = (T::zero(), T::zero());
                                for &(yi, wy, dwy) in &ty {
                                    let Some(yi) = yi else { continue };
                                    for &(xi, wx, dwx) in &tx {
                                        let Some(xi) = xi else { continue };
                                        let base = (yi * wl + xi) * d + hh * dh;
                                        let v = &vals[base..base + dh];
                                        let dot: T = go.iter().zip(v).map(|(a, b)| *a * *b).sum();
                                        sample_dot += wx * wy * dot;
                                        dx += dwx * wy * dot;
                                        dy += wx * dwy * dot;
                                        if let Some(gv) = gl[l].as_mut() {
                                            let s = a * wx * wy;
                                            for (t, gg) in gv[base..base + dh].iter_mut().zip(go) {
                                                *t += s * *gg;
                                            }
                                        }
                                    }
                                }
                                if let Some(gw) = gw.as_mut() {
                                    gw[wi] += sample_dot;
                                }
                                if let Some(gloc) = gloc.as_mut() {
                                    gloc[li] += a * dx;
                                    gloc[li + 1] += a * dy;
                                }
                            }
                        }
                    }
                }
                gl.push(gloc);
                gl.push(gw);
                gl
            }),
        ))
    }

    /// Selects rows (leading-axis slices) by index.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() {
            return Err(Error::shape("gather_rows", "rank >= 1", "rank 0"));
        }
        let n = s[0];
        let row: usize = s[1..].iter().product();
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::shape("gather_rows", format!("index < {n}"), bad));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            out.extend_from_slice(&xv[i * row..(i + 1) * row]);
        }
        let mut shape = s.clone();
        shape[0] = idx.len();
        let out = Tensor::new(&shape, out)?;
        let idx = idx.to_vec();
        Ok(self.push(
            out,
            vec![x],
            rule(move |_, _, g, _| {
                let mut gx = vec![T::zero(); n * row];
                for (j, &i) in idx.iter().enumerate() {
                    gx[i * row..(i + 1) * row]
                        .iter_mut()
                        .zip(&g[j * row..(j + 1) * row])
                        .for_each(|(a, b)| *a += *b);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// `out[idx[j]] += scale[j] * x[j]` into `n` zero rows.
    pub fn scatter_rows(&mut self, x: Var, idx: &[usize], scale: &[T], n: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() || s[0] != idx.len() || scale.len() != idx.len() {
            return Err(Error::shape("scatter_rows", format!("{} rows and scales", idx.len()), format!("{s:?}")));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::shape("scatter_rows", format!("index < {n}"), bad));
        }
        let row: usize = s[1..].iter().product();
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); n * row];
        for (j, &i) in idx.iter().enumerate() {
            let sc = scale[j];
            out[i * row..(i + 1) * row]
                .iter_mut()
                .zip(&xv[j * row..(j + 1) * row])
                .for_each(|(a, b)| *a += sc * *b);
        }
        let mut shape = s.clone();
        shape[0] = n;
        let out = Tensor::new(&shape, out)?;
        let idx = idx.to_vec();
        let scale = scale.to_vec();
        Ok(self.push(
            out,
            vec![x],
            rule(move |_, _, g, _| {
                let mut gx = vec![T::zero(); idx.len() * row];
                for (j, &i) in idx.iter().enumerate() {
                    let sc = scale[j];
                    gx[j * row..(j + 1) * row]
                        .iter_mut()
                        .zip(&g[i * row..(i + 1) * row])
                        .for_each(|(a, b)| *a = sc * *b);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Columns `start..start+len` of a rank-2 value.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || start + len > s[1] {
            return Err(Error::shape("slice_cols", format!("[N, >= {}]", start + len), format!("{s:?}")));
        }
        let (n, m) = (s[0], s[1]);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * len);
        for r in 0..n {
            out.extend_from_slice(&xv[r * m + start..r * m + start + len]);
        }
        let out = Tensor::new(&[n, len], out)?;
        Ok(self.push(
            out,
            vec![x],
            rule(move |_, _, g, _| {
                let mut gx = vec![T::zero(); n * m];
                for r in 0..n {
                    gx[r * m + start..r * m + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Concatenates rank-2 values along columns.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let n = xs.first().map(|&v| self.shape(v)[0]).ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?;
        let widths: Vec<usize> = xs.iter().map(|&v| self.shape(v).get(1).copied().unwrap_or(0)).collect();
        for &v in xs {
            if self.shape(v).len() != 2 || self.shape(v)[0] != n {
                return Err(Error::shape("concat_cols", format!("[{n}, _]"), format!("{:?}", self.shape(v))));
            }
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![T::zero(); n * total];
        let mut off = 0;
        for (&v, &wdt) in xs.iter().zip(&widths) {
            let xv = self.value(v).data();
            for r in 0..n {
                out[r * total + off..r * total + off + wdt].copy_from_slice(&xv[r * wdt..(r + 1) * wdt]);
            }
            off += wdt;
        }
        let out = Tensor::new(&[n, total], out)?;
        Ok(self.push(
            out,
            xs.to_vec(),
            rule(move |_, _, g, needs| {
                let mut res = Vec::with_capacity(widths.len());
                let mut off = 0;
                for (i, &wdt) in widths.iter().enumerate() {
                    res.push(needs[i].then(|| {
                        let mut gx = vec![T::zero(); n * wdt];
                        for r in 0..n {
                            gx[r * wdt..(r + 1) * wdt].copy_from_slice(&g[r * total + off..r * total + off + wdt]);
                        }
                        gx
                    }));
                    off += wdt;
                }
                res
            }),
        ))
    }

    /// Row-wise select: row `r` comes from `b` where `use_b[r]`, else from `a`.
    pub fn select_rows(&mut self, a: Var, b: Var, use_b: &[bool]) -> Result<Var> {
        same_shape("select_rows", self.value(a), self.value(b))?;
        let n = self.shape(a)[0];
        if use_b.len() != n {
            return Err(Error::shape("select_rows", n, use_b.len()));
        }
        let row = self.value(a).len() / n.max(1);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = av.to_vec();
        for (r, &ub) in use_b.iter().enumerate() {
            if ub {
                out[r * row..(r + 1) * row].copy_from_slice(&bv[r * row..(r + 1) * row]);
            }
        }
        let out = Tensor::new(self.shape(a), out)?;
        let mask = use_b.to_vec();
        Ok(self.push(
            out,
            vec![a, b],
            rule(move |_, _, g, needs| {
                let pick = |want: bool| {
                    let mut gx = vec![T::zero(); g.len()];
                    for (r, &ub) in mask.iter().enumerate() {
                        if ub == want {
                            gx[r * row..(r + 1) * row].copy_from_slice(&g[r * row..(r + 1) * row]);
                        }
                    }
                    gx
                };
                vec![needs[0].then(|| pick(false)), needs[1].then(|| pick(true))]
            }),
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s: f64 = self.value(x).data().iter().map(|v| v.as_f64()).sum();
        self.push(Tensor::scalar(T::of(s)), vec![x], rule(move |_, _, g, _| vec![Some(vec![g[0]; n])]))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.scale(s, T::one() / T::of(n as f64))
    }

    /// `Σ weights ⊙ x` with constant weights.
    pub fn weighted_sum(&mut self, x: Var, weights: &Tensor<T>) -> Result<Var> {
        same_shape("weighted_sum", self.value(x), weights)?;
        let s: f64 = self.value(x).data().iter().zip(weights.data()).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
        let w = weights.data().to_vec();
        Ok(self.push(Tensor::scalar(T::of(s)), vec![x], rule(move |_, _, g, _| vec![Some(w.iter().map(|v| *v * g[0]).collect())])))
    }

    /// Mean pixel cross-entropy of `logits[C, H, W]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, target: &[u8]) -> Result<Var> {
        self.focal_loss(logits, target, 0.0)
    }

    /// Mean pixel multi-class focal loss `-(1 - p_t)^γ log p_t`.
    pub fn focal_loss(&mut self, logits: Var, target: &[u8], gamma: f64) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 3 || s[1] * s[2] != target.len() {
            return Err(Error::shape("loss", format!("logits [C, H, W] with H*W = {}", target.len()), format!("{s:?}")));
        }
        if gamma < 0.0 {
            return Err(Error::InvalidArgument(format!("focal gamma must be >= 0, got {gamma}")));
        }
        let (c, hw) = (s[0], s[1] * s[2]);
        if let Some(&bad) = target.iter().find(|&&t| t as usize >= c) {
            return Err(Error::InvalidArgument(format!("target class {bad} out of range for {c} classes")));
        }
        let zv = self.value(logits).data();
        let gm = T::of(gamma);
        let mut probs = vec![T::zero(); c * hw];
        let mut logpt = vec![T::zero(); hw];
        let mut total = 0.0f64;
        for p in 0..hw {
            let m = (0..c).map(|k| zv[k * hw + p]).fold(T::neg_infinity(), T::max);
            let z: T = (0..c).map(|k| (zv[k * hw + p] - m).exp()).sum();
            let lse = m + z.ln();
            for k in 0..c {
                probs[k * hw + p] = (zv[k * hw + p] - lse).exp();
            }
            let logp = zv[target[p] as usize * hw + p] - lse;
            logpt[p] = logp;
            let modulating = if gamma == 0.0 { T::one() } else { (-logp.exp_m1()).powf(gm) };
            total -= (modulating * logp).as_f64();
        }
        let inv = T::one() / T::of(hw as f64);
        let target = target.to_vec();
        Ok(self.push(
            Tensor::scalar(T::of(total / hw as f64)),
            vec![logits],
            rule(move |_, _, g, _| {
                let mut gz = vec![T::zero(); c * hw];
                let scale = g[0] * inv;
                for p in 0..hw {
                    let t = target[p] as usize;
                    let logp = logpt[p];
                    // p_t * dL/dp_t; dp_t/dz_k = p_t (δ_tk - p_k)
                    let factor = if gamma == 0.0 {
                        -T::one()
                    } else {
                        let pt = logp.exp();
                        let q = -logp.exp_m1();
                        let first = if q > T::zero() { gm * q.powf(gm - T::one()) * pt * logp } else { T::zero() };
                        first - q.powf(gm)
                    };
                    for k in 0..c {
                        let delta = if k == t { T::one() } else { T::zero() };
                        gz[k * hw + p] = scale * factor * (delta - probs[k * hw + p]);
                    }
                }
                vec![Some(gz)]
            }),
        ))
    }
}

fn transpose_buf<T: Scalar>(x: &[T], n: usize, m: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * m];
    for i in 0..n {
        for j in 0..m {
            out[j * n + i] = x[i * m + j];
        }
    }
    out
}

#[derive(Clone, Copy, Debug)]
struct ConvGeometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeometry {
    fn im2col<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let hw = self.ho * self.wo;
        let mut cols = vec![T::zero(); self.c * self.k * self.k * hw];
        for ch in 0..self.c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ch * self.k + ky) * self.k + kx;
                    let dst = &mut cols[row * hw..(row + 1) * hw];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let src = &x[ch * self.h * self.w + iy as usize * self.w..];
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[oy * self.wo + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im<T: Scalar>(&self, cols: &[T]) -> Vec<T> {
        let hw = self.ho * self.wo;
        let mut x = vec![T::zero(); self.c * self.h * self.w];
        for ch in 0..self.c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ch * self.k + ky) * self.k + kx;
                    let src = &cols[row * hw..(row + 1) * hw];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let base = ch * self.h * self.w + iy as usize * self.w;
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                x[base + ix as usize] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }
}
