//! Deformable attention, distortion-aware spatial cross attention over fisheye
//! views, temporal self attention and plain multi-head attention.

use std::f64::consts::TAU;

use crate::bev::ReferencePointTable;
use crate::diff::{Graph, Init, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DeformConfig {
    pub d: usize,
    pub n_heads: usize,
    pub n_levels: usize,
    pub n_points: usize,
}

impl DeformConfig {
    pub fn new(d: usize, n_heads: usize, n_levels: usize, n_points: usize) -> Result<Self> {
        if n_heads == 0 || n_levels == 0 || n_points == 0 || d == 0 || d % n_heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "deformable attention needs d divisible by heads and non-zero sizes (d {d}, heads {n_heads}, levels {n_levels}, points {n_points})"
            )));
        }
        Ok(Self { d, n_heads, n_levels, n_points })
    }

    /// Sampling locations per query: heads x levels x points.
    pub fn samples(&self) -> usize {
        self.n_heads * self.n_levels * self.n_points
    }
}

/// Initial offsets: head `h` looks along angle `2πh/heads`, point `k` at
/// distance `k + 1` texels.
fn offset_bias(cfg: &DeformConfig) -> Vec<f64> {
    let mut b = Vec::with_capacity(cfg.samples() * 2);
    for h in 0..cfg.n_heads {
        let (s, c) = (TAU * h as f64 / cfg.n_heads as f64).sin_cos();
        for _ in 0..cfg.n_levels {
            for k in 0..cfg.n_points {
                b.push(c * (k + 1) as f64);
                b.push(s * (k + 1) as f64);
            }
        }
    }
    b
}

/// Parameters of one deformable attention block.
///
/// Values are projected per level; offsets and attention weights come from the
/// query; sampled head outputs are concatenated and passed through `output`.
#[derive(Clone, Debug)]
pub struct DeformableAttention {
    pub cfg: DeformConfig,
    pub value: Vec<Linear>,
    pub offset: Linear,
    pub weight: Linear,
    pub output: Linear,
}

impl DeformableAttention {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cfg: DeformConfig) -> Result<Self> {
        let d = cfg.d;
        let value = (0..cfg.n_levels)
            .map(|l| Linear::new(store, &format!("{name}.value.{l}"), d, d, true))
            .collect::<Result<_>>()?;
        let offset = Linear::with_init(
            store,
            &format!("{name}.offset"),
            d,
            cfg.samples() * 2,
            Init::Uniform { bound: 0.01 },
            Init::Values(offset_bias(&cfg)),
        )?;
        let weight = Linear::with_init(
            store,
            &format!("{name}.weight"),
            d,
            cfg.samples(),
            Init::Uniform { bound: 0.01 },
            Init::Zeros,
        )?;
        let output = Linear::new(store, &format!("{name}.output"), d, d, true)?;
        Ok(Self { cfg, value, offset, weight, output })
    }

    /// Projects a level `[d, H, W]` into the channel-last value layout `[H, W, d]`.
    pub fn project_values<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, level: usize, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[0] != self.cfg.d {
            return Err(Error::shape("project_values", format!("[{}, H, W]", self.cfg.d), format!("{s:?}")));
        }
        let flat = g.reshape(x, &[s[0], s[1] * s[2]])?;
        let t = g.transpose(flat)?;
        let v = self.value[level].forward(g, store, t)?;
        g.reshape(v, &[s[1], s[2], s[0]])
    }

    /// Projects rows already laid out `[H*W, d]` into `[H, W, d]`.
    pub fn project_rows<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, level: usize, rows: Var, h: usize, w: usize) -> Result<Var> {
        let v = self.value[level].forward(g, store, rows)?;
        g.reshape(v, &[h, w, self.cfg.d])
    }

    /// Raw offsets `[N, heads*levels*points*2]` and softmax-normalized weights
    /// `[N, heads, levels*points]` for a batch of queries.
    pub fn predict<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, queries: Var) -> Result<(Var, Var)> {
        let n = g.shape(queries)[0];
        let off = self.offset.forward(g, store, queries)?;
        let logits = self.weight.forward(g, store, queries)?;
        let logits = g.reshape(logits, &[n, self.cfg.n_heads, self.cfg.n_levels * self.cfg.n_points])?;
        let attn = g.softmax(logits, 2)?;
        Ok((off, attn))
    }

    /// Samples projected `values` (one `[H, W, d]` per level) around reference
    /// texels `refs` (`[N, levels, 2]` flattened, per-level texel units),
    /// using rows of precomputed offsets and weights. No output projection.
    pub fn sample<T: Scalar>(&self, g: &mut Graph<T>, off: Var, attn: Var, refs: &[f64], values: &[Var]) -> Result<Var> {
        let c = self.cfg;
        let n = g.shape(off)[0];
        if refs.len() != n * c.n_levels * 2 || values.len() != c.n_levels {
            return Err(Error::shape("deformable sample", format!("{} reference coordinates and {} levels", n * c.n_levels * 2, c.n_levels), format!("{} / {}", refs.len(), values.len())));
        }
        let mut base = Vec::with_capacity(n * c.samples() * 2);
        for q in 0..n {
            for _ in 0..c.n_heads {
                for l in 0..c.n_levels {
                    let r = &refs[(q * c.n_levels + l) * 2..(q * c.n_levels + l) * 2 + 2];
                    for _ in 0..c.n_points {
                        base.push(T::of(r[0]));
                        base.push(T::of(r[1]));
                    }
                }
            }
        }
        let shape = [n, c.n_heads, c.n_levels, c.n_points, 2];
        let base = g.constant(Tensor::new(&shape, base)?);
        let off = g.reshape(off, &shape)?;
        let loc = g.add(base, off)?;
        g.deform_sample(values, loc, attn)
    }

    /// Full deformable attention for each query at its reference texels.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, queries: Var, refs: &[f64], values: &[Var]) -> Result<Var> {
        let (off, attn) = self.predict(g, store, queries)?;
        let s = self.sample(g, off, attn, refs, values)?;
        self.output.forward(g, store, s)
    }
}

/// Multi-scale features of one view: `[d, H_l, W_l]` per level.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub levels: Vec<Var>,
    pub strides: Vec<f64>,
}

/// Texel coordinate at a level of the given stride for an image pixel coordinate.
#[inline]
pub fn pixel_to_texel(p: f64, stride: f64) -> f64 {
    p / stride - 0.5
}

/// Distortion-aware spatial cross attention.
///
/// Each cell averages, over its valid views, the sum of deformable attention
/// outputs at its validly projecting anchors. Cells without a valid view get
/// the zero vector.
#[derive(Clone, Debug)]
pub struct SpatialCrossAttention {
    pub attn: DeformableAttention,
}

impl SpatialCrossAttention {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cfg: DeformConfig) -> Result<Self> {
        Ok(Self {
            attn: DeformableAttention::new(store, name, cfg)?,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        queries: Var,
        pyramids: &[FeaturePyramid],
        table: &ReferencePointTable,
    ) -> Result<Var> {
        let cfg = self.attn.cfg;
        let q = g.shape(queries)[0];
        if q != table.cells || pyramids.len() != table.n_cameras {
            return Err(Error::shape(
                "da_sca",
                format!("{} queries and {} views", table.cells, table.n_cameras),
                format!("{q} queries and {} views", pyramids.len()),
            ));
        }
        if let Some(p) = pyramids.iter().find(|p| p.levels.len() != cfg.n_levels || p.strides.len() != cfg.n_levels) {
            return Err(Error::shape("da_sca", format!("{} levels", cfg.n_levels), p.levels.len()));
        }

        // pairs per camera: (cell, anchor)
        let mut per_cam: Vec<Vec<(usize, usize)>> = vec![Vec::new(); table.n_cameras];
        let mut pair_count = vec![0usize; q];
        for cell in 0..q {
            for (i, j) in table.valid_pairs(cell) {
                per_cam[i].push((cell, j));
                pair_count[cell] += 1;
            }
        }

        let (off, attn) = self.attn.predict(g, store, queries)?;
        let mut parts = Vec::new();
        for (i, pairs) in per_cam.iter().enumerate() {
            if pairs.is_empty() {
                continue;
            }
            let pyr = &pyramids[i];
            let values = pyr
                .levels
                .iter()
                .enumerate()
                .map(|(l, &lv)| self.attn.project_values(g, store, l, lv))
                .collect::<Result<Vec<_>>>()?;
            let rows: Vec<usize> = pairs.iter().map(|&(c, _)| c).collect();
            let mut refs = Vec::with_capacity(pairs.len() * cfg.n_levels * 2);
            for &(cell, j) in pairs {
                let rp = table.get(cell, j, i);
                for &s in &pyr.strides {
                    refs.push(pixel_to_texel(rp.u, s));
                    refs.push(pixel_to_texel(rp.v, s));
                }
            }
            let off_i = g.gather_rows(off, &rows)?;
            let attn_i = g.gather_rows(attn, &rows)?;
            let sampled = self.attn.sample(g, off_i, attn_i, &refs, &values)?;
            let scale: Vec<T> = rows.iter().map(|&c| T::one() / T::of(table.valid_views(c).len() as f64)).collect();
            parts.push(g.scatter_rows(sampled, &rows, &scale, q)?);
        }

        let d = cfg.d;
        if parts.is_empty() {
            return Ok(g.constant(Tensor::zeros(&[q, d])));
        }
        let summed = g.add_n(&parts)?;
        // Σ (W s + b) / |V| = W (Σ s / |V|) + (pairs / |V|) b
        let w = g.param(store, self.attn.output.w);
        let projected = g.linear(summed, w, None)?;
        let coef: Vec<T> = (0..q)
            .map(|c| {
                let nv = table.valid_views(c).len();
                if nv == 0 {
                    T::zero()
                } else {
                    T::of(pair_count[c] as f64 / nv as f64)
                }
            })
            .collect();
        let Some(b) = self.attn.output.b else { return Ok(projected) };
        let coef = g.constant(Tensor::new(&[q, 1], coef)?);
        let b = g.param(store, b);
        let b_row = g.reshape(b, &[1, d])?;
        let bias = g.linear(coef, b_row, None)?;
        g.add(projected, bias)
    }
}

/// Temporal self attention: deformable attention of every BEV query at its own
/// cell into two sources, the current query map and the aligned history, with
/// separate offsets and weights per source; the two results are averaged
/// before the output projection. Missing or invalid history falls back to the
/// current queries.
#[derive(Clone, Debug)]
pub struct TemporalSelfAttention {
    pub cfg: DeformConfig,
    pub value: Linear,
    pub offset: Linear,
    pub weight: Linear,
    pub output: Linear,
}

impl TemporalSelfAttention {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize, n_heads: usize, n_points: usize) -> Result<Self> {
        let cfg = DeformConfig::new(d, n_heads, 1, n_points)?;
        let mut bias = offset_bias(&cfg);
        bias.extend(offset_bias(&cfg));
        Ok(Self {
            cfg,
            value: Linear::new(store, &format!("{name}.value"), d, d, true)?,
            offset: Linear::with_init(store, &format!("{name}.offset"), d, 2 * cfg.samples() * 2, Init::Uniform { bound: 0.01 }, Init::Values(bias))?,
            weight: Linear::with_init(store, &format!("{name}.weight"), d, 2 * cfg.samples(), Init::Uniform { bound: 0.01 }, Init::Zeros)?,
            output: Linear::new(store, &format!("{name}.output"), d, d, true)?,
        })
    }

    /// `history` is `(aligned previous features, validity)`; rows flagged
    /// invalid are replaced by the current queries.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        queries: Var,
        history: Option<(Var, &[bool])>,
        h: usize,
        w: usize,
    ) -> Result<Var> {
        let c = self.cfg;
        let q = g.shape(queries)[0];
        if q != h * w || g.shape(queries)[1] != c.d {
            return Err(Error::shape("temporal_self_attention", format!("[{}, {}]", h * w, c.d), format!("{:?}", g.shape(queries))));
        }
        let hist = match history {
            Some((prev, valid)) => {
                if g.shape(prev) != g.shape(queries) {
                    return Err(Error::shape("temporal_self_attention history", format!("{:?}", g.shape(queries)), format!("{:?}", g.shape(prev))));
                }
                let invalid: Vec<bool> = valid.iter().map(|v| !v).collect();
                g.select_rows(prev, queries, &invalid)?
            }
            None => queries,
        };
        let off = self.offset.forward(g, store, queries)?;
        let logits = self.weight.forward(g, store, queries)?;
        let ns = c.samples();
        let mut refs = Vec::with_capacity(q * 2);
        for cell in 0..q {
            refs.push((cell % w) as f64);
            refs.push((cell / w) as f64);
        }
        let mut outs = Vec::with_capacity(2);
        for (k, src) in [queries, hist].into_iter().enumerate() {
            let values = self.value.forward(g, store, src)?;
            let values = g.reshape(values, &[h, w, c.d])?;
            let off_k = g.slice_cols(off, k * ns * 2, ns * 2)?;
            let lg = g.slice_cols(logits, k * ns, ns)?;
            let lg = g.reshape(lg, &[q, c.n_heads, c.n_points])?;
            let attn = g.softmax(lg, 2)?;
            let refs_k = refs.clone();
            outs.push(sample_single_level(g, &c, off_k, attn, &refs_k, values)?);
        }
        let sum = g.add_n(&outs)?;
        let avg = g.scale(sum, T::of(0.5));
        self.output.forward(g, store, avg)
    }
}

fn sample_single_level<T: Scalar>(g: &mut Graph<T>, c: &DeformConfig, off: Var, attn: Var, refs: &[f64], values: Var) -> Result<Var> {
    let n = g.shape(off)[0];
    let mut base = Vec::with_capacity(n * c.samples() * 2);
    for q in 0..n {
        for _ in 0..c.n_heads * c.n_points {
            base.push(T::of(refs[2 * q]));
            base.push(T::of(refs[2 * q + 1]));
        }
    }
    let shape = [n, c.n_heads, 1, c.n_points, 2];
    let base = g.constant(Tensor::new(&shape, base)?);
    let off = g.reshape(off, &shape)?;
    let loc = g.add(base, off)?;
    g.deform_sample(&[values], loc, attn)
}

/// Standard multi-head scaled dot-product attention.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub d: usize,
    pub n_heads: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub output: Linear,
}

/// Result of [`MultiHeadAttention::forward`].
pub struct MhaOutput<T> {
    pub output: Var,
    /// Head-averaged scaled scores `[Nq, Nk]` (pre-softmax), differentiable.
    pub logits: Var,
    /// Attention probabilities `[heads, Nq, Nk]`.
    pub maps: Tensor<T>,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize, n_heads: usize) -> Result<Self> {
        if n_heads == 0 || d % n_heads != 0 {
            return Err(Error::InvalidArgument(format!("d = {d} is not divisible by {n_heads} heads")));
        }
        Ok(Self {
            d,
            n_heads,
            q: Linear::new(store, &format!("{name}.q"), d, d, true)?,
            k: Linear::new(store, &format!("{name}.k"), d, d, true)?,
            v: Linear::new(store, &format!("{name}.v"), d, d, true)?,
            output: Linear::new(store, &format!("{name}.output"), d, d, true)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, q: Var, k: Var, v: Var) -> Result<MhaOutput<T>> {
        let (sq, sk, sv) = (g.shape(q).to_vec(), g.shape(k).to_vec(), g.shape(v).to_vec());
        if sq.len() != 2 || sk.len() != 2 || sq[1] != self.d || sk[1] != self.d || sv != sk {
            return Err(Error::shape("multi_head_attention", format!("q [Nq, {d}], k and v [Nk, {d}]", d = self.d), format!("{sq:?}, {sk:?}, {sv:?}")));
        }
        let (nq, nk) = (sq[0], sk[0]);
        let dh = self.d / self.n_heads;
        let qp = self.q.forward(g, store, q)?;
        let kp = self.k.forward(g, store, k)?;
        let vp = self.v.forward(g, store, v)?;
        let inv = T::one() / T::of(dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.n_heads);
        let mut scores = Vec::with_capacity(self.n_heads);
        let mut maps = Vec::with_capacity(self.n_heads * nq * nk);
        for h in 0..self.n_heads {
            let qh = g.slice_cols(qp, h * dh, dh)?;
            let kh = g.slice_cols(kp, h * dh, dh)?;
            let vh = g.slice_cols(vp, h * dh, dh)?;
            let kt = g.transpose(kh)?;
            let s = g.matmul(qh, kt)?;
            let s = g.scale(s, inv);
            let a = g.softmax(s, 1)?;
            maps.extend_from_slice(g.value(a).data());
            heads.push(g.matmul(a, vh)?);
            scores.push(s);
        }
        let cat = g.concat_cols(&heads)?;
        let output = self.output.forward(g, store, cat)?;
        let total = g.add_n(&scores)?;
        let logits = g.scale(total, T::one() / T::of(self.n_heads as f64));
        Ok(MhaOutput {
            output,
            logits,
            maps: Tensor::new(&[self.n_heads, nq, nk], maps)?,
        })
    }
}
