//! Finite-difference checks of every differentiable primitive, both
//! attention kernels, the four head variants and the two losses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{DeformConfig, DeformableAttention, FeaturePyramid, MultiHeadAttention, SpatialCrossAttention, TemporalSelfAttention};
use crate::bev::{BevGrid, ReferencePointTable};
use crate::diff::{grad_check, grad_check_params, GradCheckOptions, GradReport, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::Result;
use crate::heads::{Head, HeadKind, TaskMode, UpsampleTrunk};
use crate::nn::Linear;
use crate::scalar::Scalar;
use crate::synth::RigConfig;

#[derive(Clone, Debug)]
pub struct GradCase {
    pub name: String,
    pub report: GradReport,
}

struct Gen(ChaCha8Rng);

impl Gen {
    fn uniform<T: Scalar>(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
        Tensor::from_fn(shape, |_| T::of(self.0.random_range(lo..hi)))
    }

    /// Values with magnitude in `[0.1, 1]`, away from activation kinks.
    fn signed<T: Scalar>(&mut self, shape: &[usize]) -> Tensor<T> {
        Tensor::from_fn(shape, |_| {
            let m = self.0.random_range(0.1..1.0);
            T::of(if self.0.random_bool(0.5) { m } else { -m })
        })
    }

    /// Continuous coordinates whose fractional part avoids bilinear kinks.
    fn coords<T: Scalar>(&mut self, shape: &[usize], lo: i32, hi: i32) -> Tensor<T> {
        Tensor::from_fn(shape, |_| T::of(self.0.random_range(lo..hi) as f64 + self.0.random_range(0.2..0.8)))
    }

    fn labels(&mut self, n: usize, classes: u8) -> Vec<u8> {
        (0..n).map(|_| self.0.random_range(0..classes)).collect()
    }
}

/// Scalar probe `Σ w ⊙ x` with fixed random weights.
fn probe<T: Scalar>(g: &mut Graph<T>, x: Var, seed: u64) -> Result<Var> {
    let mut r = Gen(ChaCha8Rng::seed_from_u64(seed));
    let w = r.uniform(g.shape(x), -1.0, 1.0);
    g.weighted_sum(x, &w)
}

fn merge(mut a: GradReport, b: GradReport) -> GradReport {
    a.inputs.extend(b.inputs);
    a
}

/// Minimum distance of any sample location from an integer texel line, so
/// the finite-difference stencil stays inside one bilinear cell.
const KINK_MARGIN: f64 = 1.5e-3;

/// `refs` lists `(offset row, level, reference texel)`; offset columns are
/// laid out `[heads, levels, points, 2]`.
fn away_from_kinks(off: &[f64], width: usize, heads: usize, nl: usize, np: usize, refs: &[(usize, usize, [f64; 2])]) -> bool {
    refs.iter().all(|&(row, l, r)| {
        (0..heads).all(|h| {
            (0..np).all(|p| {
                (0..2).all(|c| {
                    let x = r[c] + off[row * width + ((h * nl + l) * np + p) * 2 + c];
                    let f = x - x.floor();
                    f > KINK_MARGIN && f < 1.0 - KINK_MARGIN
                })
            })
        })
    })
}

/// Redraws the offset bias until every sample location is clear of kinks.
fn place_offsets<T: Scalar>(
    store: &mut ParamStore<T>,
    lin: &Linear,
    queries: &Tensor<T>,
    heads: usize,
    nl: usize,
    np: usize,
    refs: &[(usize, usize, [f64; 2])],
    gen: &mut Gen,
) -> Result<()> {
    let Some(b) = lin.b else { return Ok(()) };
    let shape = store.value(b).shape().to_vec();
    for _ in 0..2000 {
        store.set_value(b, gen.uniform::<T>(&shape, -1.7, 1.7))?;
        let mut g = Graph::new();
        let q = g.constant(queries.clone());
        let off = lin.forward(&mut g, store, q)?;
        let off: Vec<f64> = g.value(off).data().iter().map(|v| v.as_f64()).collect();
        if away_from_kinks(&off, lin.d_out, heads, nl, np, refs) {
            break;
        }
    }
    Ok(())
}

/// Smallest |pre-activation| inside a conv trunk for one BEV input.
fn trunk_margin<T: Scalar>(store: &ParamStore<T>, trunk: &UpsampleTrunk, bev: &Tensor<T>, h: usize, w: usize) -> Result<f64> {
    let mut g = Graph::new();
    let b = g.constant(bev.clone());
    let t = g.transpose(b)?;
    let mut x = g.reshape(t, &[bev.shape()[1], h, w])?;
    let mut m = f64::INFINITY;
    for conv in &trunk.convs {
        let u = g.upsample2x(x)?;
        let c = conv.forward(&mut g, store, u)?;
        m = g.value(c).data().iter().fold(m, |m, v| m.min(v.as_f64().abs()));
        x = g.relu(c);
    }
    Ok(m)
}

/// Redraws trunk weights (small) and biases (clearly signed) until no ReLU
/// sits within reach of the finite-difference stencil.
fn settle_trunk<T: Scalar>(store: &mut ParamStore<T>, trunk: &UpsampleTrunk, bev: &Tensor<T>, h: usize, w: usize, gen: &mut Gen) -> Result<()> {
    for _ in 0..200 {
        for conv in &trunk.convs {
            let ws = store.value(conv.w).shape().to_vec();
            store.set_value(conv.w, gen.uniform::<T>(&ws, -0.03, 0.03))?;
            let n = store.value(conv.b).len();
            let b: Vec<f64> = (0..n)
                .map(|_| {
                    let m = gen.0.random_range(0.6..1.0);
                    if gen.0.random_bool(0.5) { m } else { -m }
                })
                .collect();
            store.set_value(conv.b, Tensor::from_f64(&[n], &b)?)?;
        }
        if trunk_margin(store, trunk, bev, h, w)? > 2e-2 {
            break;
        }
    }
    Ok(())
}

fn all_ids<T: Scalar>(store: &ParamStore<T>) -> Vec<ParamId> {
    store.ids().collect()
}

/// Runs the suite at precision `T`.
pub fn gradient_suite<T: Scalar>(opts: &GradCheckOptions) -> Result<Vec<GradCase>> {
    let mut gen = Gen(ChaCha8Rng::seed_from_u64(opts.seed ^ 0xD1FF));
    let mut cases = Vec::new();
    let mut push = |name: &str, report: GradReport| {
        cases.push(GradCase {
            name: name.to_string(),
            report,
        })
    };

    let (a, b) = (gen.uniform::<T>(&[3, 4], -1.0, 1.0), gen.uniform::<T>(&[3, 4], -1.0, 1.0));
    push("add", grad_check(&[("a", a.clone()), ("b", b.clone())], |g, v| { let y = g.add(v[0], v[1])?; probe(g, y, 1) }, opts)?);
    push("mul", grad_check(&[("a", a.clone()), ("b", b.clone())], |g, v| { let y = g.mul(v[0], v[1])?; probe(g, y, 2) }, opts)?);
    push("scale", grad_check(&[("a", a.clone())], |g, v| { let y = g.scale(v[0], T::of(-1.7)); probe(g, y, 3) }, opts)?);
    push("relu", grad_check(&[("x", gen.signed::<T>(&[4, 5]))], |g, v| { let y = g.relu(v[0]); probe(g, y, 4) }, opts)?);
    push("reshape_transpose", grad_check(&[("x", a.clone())], |g, v| {
        let r = g.reshape(v[0], &[4, 3])?;
        let t = g.transpose(r)?;
        probe(g, t, 5)
    }, opts)?);
    push("matmul", grad_check(&[("a", a.clone()), ("b", gen.uniform::<T>(&[4, 5], -1.0, 1.0))], |g, v| { let y = g.matmul(v[0], v[1])?; probe(g, y, 6) }, opts)?);
    push("linear", grad_check(
        &[("x", gen.uniform::<T>(&[5, 3], -1.0, 1.0)), ("w", gen.uniform::<T>(&[3, 4], -1.0, 1.0)), ("b", gen.uniform::<T>(&[4], -1.0, 1.0))],
        |g, v| { let y = g.linear(v[0], v[1], Some(v[2]))?; probe(g, y, 7) },
        opts,
    )?);
    push("layer_norm", grad_check(
        &[("x", gen.uniform::<T>(&[3, 6], -2.0, 2.0)), ("gamma", gen.uniform::<T>(&[6], 0.5, 1.5)), ("beta", gen.uniform::<T>(&[6], -0.5, 0.5))],
        |g, v| { let y = g.layer_norm(v[0], v[1], v[2])?; probe(g, y, 8) },
        opts,
    )?);
    push("softmax", grad_check(&[("x", gen.uniform::<T>(&[3, 4, 5], -2.0, 2.0))], |g, v| {
        let s0 = g.softmax(v[0], 0)?;
        let s2 = g.softmax(v[0], 2)?;
        let a = probe(g, s0, 9)?;
        let b = probe(g, s2, 10)?;
        g.add(a, b)
    }, opts)?);
    let conv_in = [("x", gen.uniform::<T>(&[2, 6, 6], -1.0, 1.0)), ("w", gen.uniform::<T>(&[3, 2, 3, 3], -0.5, 0.5)), ("b", gen.uniform::<T>(&[3], -0.5, 0.5))];
    push("conv2d", grad_check(&conv_in, |g, v| { let y = g.conv2d(v[0], v[1], Some(v[2]), 1, 1)?; probe(g, y, 11) }, opts)?);
    push("conv2d_strided", grad_check(&conv_in, |g, v| { let y = g.conv2d(v[0], v[1], Some(v[2]), 2, 1)?; probe(g, y, 12) }, opts)?);
    push("upsample2x", grad_check(&[("x", gen.uniform::<T>(&[2, 3, 4], -1.0, 1.0))], |g, v| { let y = g.upsample2x(v[0])?; probe(g, y, 13) }, opts)?);
    push("bilinear_sample", grad_check(
        &[("feature", gen.uniform::<T>(&[2, 4, 5], -1.0, 1.0)), ("pts", gen.coords::<T>(&[7, 2], -1, 5))],
        |g, v| { let y = g.bilinear_sample(v[0], v[1])?; probe(g, y, 14) },
        opts,
    )?);
    push("deform_sample", grad_check(
        &[
            ("level0", gen.uniform::<T>(&[5, 6, 4], -1.0, 1.0)),
            ("level1", gen.uniform::<T>(&[3, 3, 4], -1.0, 1.0)),
            ("loc", gen.coords::<T>(&[3, 2, 2, 2, 2], -1, 5)),
            ("weights", gen.uniform::<T>(&[3, 2, 4], 0.0, 1.0)),
        ],
        |g, v| { let y = g.deform_sample(&v[..2], v[2], v[3])?; probe(g, y, 15) },
        opts,
    )?);
    push("gather_scatter", grad_check(&[("x", gen.uniform::<T>(&[4, 3], -1.0, 1.0))], |g, v| {
        let r = g.gather_rows(v[0], &[2, 0, 2, 3])?;
        let s = g.scatter_rows(r, &[1, 1, 4, 0], &[T::of(0.5), T::of(2.0), T::one(), T::of(-1.0)], 5)?;
        probe(g, s, 16)
    }, opts)?);
    push("slice_concat", grad_check(&[("a", a.clone()), ("b", b.clone())], |g, v| {
        let s = g.slice_cols(v[0], 1, 2)?;
        let c = g.concat_cols(&[s, v[1]])?;
        probe(g, c, 17)
    }, opts)?);
    push("select_rows", grad_check(&[("a", a.clone()), ("b", b.clone())], |g, v| { let y = g.select_rows(v[0], v[1], &[true, false, true])?; probe(g, y, 18) }, opts)?);
    push("sum_mean", grad_check(&[("a", a.clone())], |g, v| {
        let s = g.sum(v[0]);
        let m = g.mean(v[0]);
        let p = g.mul(s, m)?;
        g.add(p, s)
    }, opts)?);
    let logits = gen.uniform::<T>(&[4, 3, 3], -2.0, 2.0);
    let labels = gen.labels(9, 4);
    push("cross_entropy", grad_check(&[("logits", logits.clone())], |g, v| g.cross_entropy(v[0], &labels), opts)?);
    push("focal_loss", grad_check(&[("logits", logits.clone())], |g, v| g.focal_loss(v[0], &labels, 2.0), opts)?);

    // deformable attention kernel
    {
        let cfg = DeformConfig::new(8, 2, 2, 2)?;
        let mut store = ParamStore::<T>::new(opts.seed ^ 21);
        let da = DeformableAttention::new(&mut store, "da", cfg)?;
        let refs: Vec<f64> = (0..3 * 2 * 2).map(|_| gen.0.random_range(0.5..3.5)).collect();
        let q = gen.uniform::<T>(&[3, 8], -1.0, 1.0);
        let pts: Vec<(usize, usize, [f64; 2])> = (0..3).flat_map(|r| (0..2).map(move |l| (r, l))).map(|(r, l)| (r, l, [refs[(r * 2 + l) * 2], refs[(r * 2 + l) * 2 + 1]])).collect();
        place_offsets(&mut store, &da.offset, &q, 2, 2, 2, &pts, &mut gen)?;
        let lv = [gen.uniform::<T>(&[8, 5, 5], -1.0, 1.0), gen.uniform::<T>(&[8, 3, 4], -1.0, 1.0)];
        let f = |g: &mut Graph<T>, st: &ParamStore<T>, q: Var, l0: Var, l1: Var| -> Result<Var> {
            let v0 = da.project_values(g, st, 0, l0)?;
            let v1 = da.project_values(g, st, 1, l1)?;
            let y = da.forward(g, st, q, &refs, &[v0, v1])?;
            probe(g, y, 22)
        };
        let ri = grad_check(&[("queries", q.clone()), ("level0", lv[0].clone()), ("level1", lv[1].clone())], |g, v| f(g, &store, v[0], v[1], v[2]), opts)?;
        let rp = grad_check_params(&store, &all_ids(&store), |g, st| {
            let (q, l0, l1) = (g.constant(q.clone()), g.constant(lv[0].clone()), g.constant(lv[1].clone()));
            f(g, st, q, l0, l1)
        }, opts)?;
        push("deformable_attention", merge(ri, rp));
    }

    // distortion-aware spatial cross attention over a real rig
    {
        let cams = RigConfig::default().build()?;
        let grid = BevGrid::new(3, 3, 3.0, vec![0.0, 0.8], 8)?;
        let table = ReferencePointTable::build(&grid, &cams)?;
        let cfg = DeformConfig::new(8, 2, 3, 1)?;
        let mut store = ParamStore::<T>::new(opts.seed ^ 31);
        let sca = SpatialCrossAttention::new(&mut store, "sca", cfg)?;
        let q = gen.uniform::<T>(&[9, 8], -1.0, 1.0);
        let mut pts = Vec::new();
        for cell in 0..9 {
            for (cam, anchor) in table.valid_pairs(cell) {
                let rp = table.get(cell, anchor, cam);
                for (l, s) in [4.0, 8.0, 16.0].iter().enumerate() {
                    pts.push((cell, l, [crate::attention::pixel_to_texel(rp.u, *s), crate::attention::pixel_to_texel(rp.v, *s)]));
                }
            }
        }
        place_offsets(&mut store, &sca.attn.offset, &q, 2, 3, 1, &pts, &mut gen)?;
        let feats: Vec<Vec<Tensor<T>>> = (0..cams.len())
            .map(|_| [16, 8, 4].iter().map(|&s| gen.uniform::<T>(&[8, s, s], -1.0, 1.0)).collect())
            .collect();
        let f = |g: &mut Graph<T>, st: &ParamStore<T>, q: Var, lv: &[Var]| -> Result<Var> {
            let pyramids: Vec<FeaturePyramid> = lv
                .chunks(3)
                .map(|c| FeaturePyramid {
                    levels: c.to_vec(),
                    strides: vec![4.0, 8.0, 16.0],
                })
                .collect();
            let y = sca.forward(g, st, q, &pyramids, &table)?;
            probe(g, y, 32)
        };
        let mut inputs = vec![("queries", q.clone())];
        let names = ["front", "left", "rear", "right"];
        for (c, levels) in feats.iter().enumerate() {
            inputs.push((names[c], levels[0].clone()));
        }
        // coarser levels enter through the parameter check below
        let ri = grad_check(&inputs, |g, v| {
            let mut lv = Vec::new();
            for (c, levels) in feats.iter().enumerate() {
                lv.push(v[1 + c]);
                lv.push(g.constant(levels[1].clone()));
                lv.push(g.constant(levels[2].clone()));
            }
            f(g, &store, v[0], &lv)
        }, opts)?;
        let rp = grad_check_params(&store, &all_ids(&store), |g, st| {
            let qv = g.constant(q.clone());
            let lv: Vec<Var> = feats.iter().flatten().map(|t| g.constant(t.clone())).collect();
            f(g, st, qv, &lv)
        }, opts)?;
        push("spatial_cross_attention", merge(ri, rp));
    }

    // temporal self attention with partially valid history
    {
        let (h, w, d) = (3, 4, 8);
        let mut store = ParamStore::<T>::new(opts.seed ^ 41);
        let tsa = TemporalSelfAttention::new(&mut store, "tsa", d, 2, 2)?;
        let q = gen.uniform::<T>(&[h * w, d], -1.0, 1.0);
        let pts: Vec<(usize, usize, [f64; 2])> = (0..h * w).map(|c| (c, 0, [(c % w) as f64, (c / w) as f64])).collect();
        // both sources stacked as extra heads
        place_offsets(&mut store, &tsa.offset, &q, 4, 1, 2, &pts, &mut gen)?;
        let hist = gen.uniform::<T>(&[h * w, d], -1.0, 1.0);
        let valid: Vec<bool> = (0..h * w).map(|i| i % 3 != 0).collect();
        let ri = grad_check(&[("queries", q.clone()), ("history", hist.clone())], |g, v| {
            let y = tsa.forward(g, &store, v[0], Some((v[1], &valid)), h, w)?;
            probe(g, y, 42)
        }, opts)?;
        let rp = grad_check_params(&store, &all_ids(&store), |g, st| {
            let (qv, hv) = (g.constant(q.clone()), g.constant(hist.clone()));
            let y = tsa.forward(g, st, qv, Some((hv, &valid)), h, w)?;
            probe(g, y, 43)
        }, opts)?;
        push("temporal_self_attention", merge(ri, rp));
    }

    // multi-head attention
    {
        let mut store = ParamStore::<T>::new(opts.seed ^ 51);
        let mha = MultiHeadAttention::new(&mut store, "mha", 8, 2)?;
        let q = gen.uniform::<T>(&[3, 8], -1.0, 1.0);
        let kv = gen.uniform::<T>(&[5, 8], -1.0, 1.0);
        let f = |g: &mut Graph<T>, st: &ParamStore<T>, q: Var, kv: Var| -> Result<Var> {
            let o = mha.forward(g, st, q, kv, kv)?;
            let a = probe(g, o.output, 52)?;
            let b = probe(g, o.logits, 53)?;
            g.add(a, b)
        };
        let ri = grad_check(&[("q", q.clone()), ("kv", kv.clone())], |g, v| f(g, &store, v[0], v[1]), opts)?;
        let rp = grad_check_params(&store, &all_ids(&store), |g, st| {
            let (a, b) = (g.constant(q.clone()), g.constant(kv.clone()));
            f(g, st, a, b)
        }, opts)?;
        push("multi_head_attention", merge(ri, rp));
    }

    // the four heads, each through its training loss
    for kind in [HeadKind::Attn, HeadKind::Conv] {
        for mode in [TaskMode::Height, TaskMode::Segmentation] {
            let (h, w, d) = (3, 3, 16);
            let mut store = ParamStore::<T>::new(opts.seed ^ 61);
            let head = Head::new(&mut store, kind, mode, d, 4)?;
            let bev = gen.uniform::<T>(&[h * w, d], -1.0, 1.0);
            if let Head::Conv(c) = &head {
                settle_trunk(&mut store, &c.trunk, &bev, h, w, &mut gen)?;
            }
            let task = mode.tasks()[0];
            let side = h * head.scale();
            let labels = gen.labels(side * side, task.classes() as u8);
            let f = |g: &mut Graph<T>, st: &ParamStore<T>, bev: Var| -> Result<Var> {
                let outs = head.forward(g, st, bev, h, w)?;
                let terms = outs[0]
                    .supervised()
                    .iter()
                    .map(|&m| g.cross_entropy(m, &labels))
                    .collect::<Result<Vec<_>>>()?;
                g.add_n(&terms)
            };
            let ri = grad_check(&[("bev", bev.clone())], |g, v| f(g, &store, v[0]), opts)?;
            let rp = grad_check_params(&store, &all_ids(&store), |g, st| {
                let b = g.constant(bev.clone());
                f(g, st, b)
            }, opts)?;
            push(&format!("head_{kind}_{}", task.name()), merge(ri, rp));
        }
    }
    Ok(cases)
}
