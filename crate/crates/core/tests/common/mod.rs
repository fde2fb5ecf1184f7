//! Dense brute-force references for the attention kernels and random instance
//! generators shared by the integration tests.
#![allow(dead_code)]

use f2bev::attention::{DeformConfig, DeformableAttention, FeaturePyramid, SpatialCrossAttention, TemporalSelfAttention};
use f2bev::bev::{align_previous, BevGrid, EgoMotion, ReferencePointTable};
use f2bev::heads::{HeadKind, TaskMode};
use f2bev::metrics::{iou_report, ClassMap};
use f2bev::pipeline::{evaluate, train, Chunk, Frame, Model, ModelConfig, Runner, TrainConfig};
use f2bev::camera::{Distortion, FisheyeCamera, Intrinsics};
use f2bev::geom;
use f2bev::diff::{Graph, ParamStore, Tensor};
use f2bev::nn::Linear;
use f2bev::synth::{build_scene, first_box, generate_sequence, ground_truth_bev, render_view, Palette, RigConfig, SceneConfig, SequenceConfig};
use f2bev::{Camera, Scalar};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct DenseLinear {
    w: Vec<f64>,
    b: Option<Vec<f64>>,
    din: usize,
    dout: usize,
}

impl DenseLinear {
    pub fn from_store(store: &ParamStore<f64>, l: &Linear) -> Self {
        Self {
            w: store.value(l.w).data().to_vec(),
            b: l.b.map(|b| store.value(b).data().to_vec()),
            din: l.d_in,
            dout: l.d_out,
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.din);
        (0..self.dout)
            .map(|o| {
                let mut acc = self.b.as_ref().map_or(0.0, |b| b[o]);
                for (i, xi) in x.iter().enumerate() {
                    acc += xi * self.w[i * self.dout + o];
                }
                acc
            })
            .collect()
    }
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn tent(t: f64) -> f64 {
    (1.0 - t.abs()).max(0.0)
}

/// Channel-last map `[h, w, d]`.
pub struct Map {
    pub data: Vec<f64>,
    pub h: usize,
    pub w: usize,
    pub d: usize,
}

impl Map {
    /// Interpolated read as a sum over every texel with a tent kernel, so
    /// texels outside the map contribute nothing.
    pub fn read(&self, x: f64, y: f64, c0: usize, c1: usize) -> Vec<f64> {
        let mut out = vec![0.0; c1 - c0];
        for i in 0..self.h {
            for j in 0..self.w {
                let k = tent(x - j as f64) * tent(y - i as f64);
                if k == 0.0 {
                    continue;
                }
                for c in c0..c1 {
                    out[c - c0] += k * self.data[(i * self.w + j) * self.d + c];
                }
            }
        }
        out
    }
}

pub struct DenseDeform {
    pub cfg: DeformConfig,
    value: Vec<DenseLinear>,
    offset: DenseLinear,
    weight: DenseLinear,
    output: DenseLinear,
}

impl DenseDeform {
    pub fn new(store: &ParamStore<f64>, m: &DeformableAttention) -> Self {
        Self {
            cfg: m.cfg,
            value: m.value.iter().map(|l| DenseLinear::from_store(store, l)).collect(),
            offset: DenseLinear::from_store(store, &m.offset),
            weight: DenseLinear::from_store(store, &m.weight),
            output: DenseLinear::from_store(store, &m.output),
        }
    }

    /// Value map of level `l` from raw features `[d, h, w]`.
    pub fn project(&self, l: usize, feat: &[f64], h: usize, w: usize) -> Map {
        let d = self.cfg.d;
        let mut data = Vec::with_capacity(h * w * d);
        for y in 0..h {
            for x in 0..w {
                let col: Vec<f64> = (0..d).map(|c| feat[(c * h + y) * w + x]).collect();
                data.extend(self.value[l].apply(&col));
            }
        }
        Map { data, h, w, d }
    }

    /// One query against per-level reference texels, with output projection.
    pub fn query(&self, q: &[f64], refs: &[[f64; 2]], maps: &[Map]) -> Vec<f64> {
        let DeformConfig { d, n_heads, n_levels, n_points } = self.cfg;
        let dh = d / n_heads;
        let off = self.offset.apply(q);
        let logits = self.weight.apply(q);
        let mut out = vec![0.0; d];
        for h in 0..n_heads {
            let a = softmax(&logits[h * n_levels * n_points..(h + 1) * n_levels * n_points]);
            for l in 0..n_levels {
                for k in 0..n_points {
                    let s = (h * n_levels + l) * n_points + k;
                    let v = maps[l].read(refs[l][0] + off[2 * s], refs[l][1] + off[2 * s + 1], h * dh, (h + 1) * dh);
                    for c in 0..dh {
                        out[h * dh + c] += a[l * n_points + k] * v[c];
                    }
                }
            }
        }
        self.output.apply(&out)
    }
}

pub struct DenseTemporal {
    n_heads: usize,
    n_points: usize,
    d: usize,
    value: DenseLinear,
    offset: DenseLinear,
    weight: DenseLinear,
    output: DenseLinear,
}

impl DenseTemporal {
    pub fn new(store: &ParamStore<f64>, m: &TemporalSelfAttention) -> Self {
        Self {
            n_heads: m.cfg.n_heads,
            n_points: m.cfg.n_points,
            d: m.cfg.d,
            value: DenseLinear::from_store(store, &m.value),
            offset: DenseLinear::from_store(store, &m.offset),
            weight: DenseLinear::from_store(store, &m.weight),
            output: DenseLinear::from_store(store, &m.output),
        }
    }

    /// `queries` and `prev` are row-major `[h*w, d]`.
    pub fn forward(&self, queries: &[f64], prev: Option<(&[f64], &[bool])>, h: usize, w: usize) -> Vec<f64> {
        let d = self.d;
        let (nh, np) = (self.n_heads, self.n_points);
        let ns = nh * np;
        let dh = d / nh;
        let hist: Vec<f64> = (0..h * w)
            .flat_map(|c| match prev {
                Some((p, valid)) if valid[c] => p[c * d..(c + 1) * d].to_vec(),
                _ => queries[c * d..(c + 1) * d].to_vec(),
            })
            .collect();
        let maps: Vec<Map> = [queries, &hist[..]]
            .iter()
            .map(|src| Map {
                data: (0..h * w).flat_map(|c| self.value.apply(&src[c * d..(c + 1) * d])).collect(),
                h,
                w,
                d,
            })
            .collect();
        let mut out = Vec::with_capacity(h * w * d);
        for cell in 0..h * w {
            let q = &queries[cell * d..(cell + 1) * d];
            let off = self.offset.apply(q);
            let logits = self.weight.apply(q);
            let (rx, ry) = ((cell % w) as f64, (cell / w) as f64);
            let mut acc = vec![0.0; d];
            for (k, map) in maps.iter().enumerate() {
                for hh in 0..nh {
                    let a = softmax(&logits[k * ns + hh * np..k * ns + (hh + 1) * np]);
                    for p in 0..np {
                        let o = k * ns * 2 + (hh * np + p) * 2;
                        let v = map.read(rx + off[o], ry + off[o + 1], hh * dh, (hh + 1) * dh);
                        for c in 0..dh {
                            acc[hh * dh + c] += 0.5 * a[p] * v[c];
                        }
                    }
                }
            }
            out.extend(self.output.apply(&acc));
        }
        out
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

/// Overwrites every parameter with wide random values so offsets reach past
/// the map borders and weights are far from uniform.
fn randomize(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let p = store.get(id);
        let bound = if p.name.contains("offset.b") { 3.0 } else if p.name.contains(".b") { 0.5 } else { 0.6 };
        let shape = p.value.shape().to_vec();
        let n = p.value.len();
        store.set_value(id, Tensor::from_f64(&shape, &uniform(rng, n, bound)).unwrap()).unwrap();
    }
}

/// Rounds values through `T` so model and reference see identical inputs.
fn through<T: Scalar>(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| T::of(x).as_f64()).collect()
}

fn tensor<T: Scalar>(shape: &[usize], v: &[f64]) -> Tensor<T> {
    Tensor::from_f64(shape, v).unwrap()
}

fn max_diff<T: Scalar>(model: &Tensor<T>, reference: &[f64]) -> f64 {
    assert_eq!(model.len(), reference.len());
    model.data().iter().zip(reference).map(|(a, b)| (a.as_f64() - b).abs()).fold(0.0, f64::max)
}

/// Deformable attention on a random multi-level instance; returns the max
/// absolute difference to the dense reference.
pub fn deformable_instance<T: Scalar>(seed: u64) -> f64 {
    let mut r = rng(seed);
    let n_heads = r.random_range(1..=3);
    let d = n_heads * r.random_range(1..=4);
    let cfg = DeformConfig::new(d, n_heads, r.random_range(1..=3), r.random_range(1..=3)).unwrap();
    let mut store = ParamStore::<f64>::new(seed);
    let m = DeformableAttention::new(&mut store, "da", cfg).unwrap();
    randomize(&mut store, &mut r);
    let st: ParamStore<T> = store.cast();
    let dense = DenseDeform::new(&st.cast(), &m);

    let n = r.random_range(1..=6);
    let sizes: Vec<(usize, usize)> = (0..cfg.n_levels).map(|_| (r.random_range(1..=6), r.random_range(1..=6))).collect();
    let feats: Vec<Vec<f64>> = sizes.iter().map(|&(h, w)| through::<T>(&uniform(&mut r, d * h * w, 1.0))).collect();
    let queries = through::<T>(&uniform(&mut r, n * d, 1.0));
    let mut refs = Vec::with_capacity(n * cfg.n_levels * 2);
    for _ in 0..n {
        for &(h, w) in &sizes {
            refs.push(r.random_range(-1.5..w as f64 + 0.5));
            refs.push(r.random_range(-1.5..h as f64 + 0.5));
        }
    }

    let mut g = Graph::<T>::new();
    let qv = g.input(tensor(&[n, d], &queries));
    let values: Vec<_> = feats
        .iter()
        .zip(&sizes)
        .enumerate()
        .map(|(l, (f, &(h, w)))| {
            let x = g.input(tensor(&[d, h, w], f));
            m.project_values(&mut g, &st, l, x).unwrap()
        })
        .collect();
    let out = m.forward(&mut g, &st, qv, &refs, &values).unwrap();

    let maps: Vec<Map> = feats.iter().zip(&sizes).enumerate().map(|(l, (f, &(h, w)))| dense.project(l, f, h, w)).collect();
    let mut reference = Vec::with_capacity(n * d);
    for qi in 0..n {
        let rf: Vec<[f64; 2]> = (0..cfg.n_levels)
            .map(|l| [refs[(qi * cfg.n_levels + l) * 2], refs[(qi * cfg.n_levels + l) * 2 + 1]])
            .collect();
        reference.extend(dense.query(&queries[qi * d..(qi + 1) * d], &rf, &maps));
    }
    max_diff(g.value(out), &reference)
}

pub const STRIDES: [f64; 3] = [4.0, 8.0, 16.0];

pub fn rig() -> Vec<Camera> {
    RigConfig::default().build().unwrap()
}

/// Random grid around the ego vehicle: small enough to be cheap, wide enough
/// that some cells see one view, some several and some none.
pub fn random_grid(r: &mut ChaCha8Rng, d: usize) -> BevGrid {
    let mut anchors: Vec<f64> = (0..r.random_range(1..=3)).map(|_| r.random_range(0.0..2.0)).collect();
    anchors.sort_by(f64::total_cmp);
    BevGrid::new(r.random_range(2..=5), r.random_range(2..=5), r.random_range(0.8..5.0), anchors, d).unwrap()
}

pub fn random_pyramid(r: &mut ChaCha8Rng, d: usize, sizes: &[(usize, usize)]) -> Vec<Vec<f64>> {
    sizes.iter().map(|&(h, w)| uniform(r, d * h * w, 1.0)).collect()
}

pub struct ScaInstance {
    pub cfg: DeformConfig,
    pub store: ParamStore<f64>,
    pub module: SpatialCrossAttention,
    pub table: ReferencePointTable,
    pub queries: Vec<f64>,
    /// Per camera, per level `[d, h, w]`.
    pub feats: Vec<Vec<Vec<f64>>>,
    pub sizes: Vec<(usize, usize)>,
}

pub fn sca_instance(seed: u64, cameras: &[Camera]) -> ScaInstance {
    let mut r = rng(seed);
    let n_heads = r.random_range(1..=2);
    let d = n_heads * r.random_range(1..=3);
    let cfg = DeformConfig::new(d, n_heads, r.random_range(1..=3), r.random_range(1..=2)).unwrap();
    let grid = random_grid(&mut r, d);
    ScaInstance::new(&mut r, seed, cameras, cfg, &grid)
}

impl ScaInstance {
    pub fn new(r: &mut ChaCha8Rng, seed: u64, cameras: &[Camera], cfg: DeformConfig, grid: &BevGrid) -> Self {
        let table = ReferencePointTable::build(grid, cameras).unwrap();
        let mut store = ParamStore::<f64>::new(seed);
        let module = SpatialCrossAttention::new(&mut store, "sca", cfg).unwrap();
        randomize(&mut store, r);
        let (iw, ih) = (cameras[0].width, cameras[0].height);
        let sizes: Vec<(usize, usize)> = STRIDES[..cfg.n_levels].iter().map(|&s| (ih / s as usize, iw / s as usize)).collect();
        let feats = cameras.iter().map(|_| random_pyramid(r, cfg.d, &sizes)).collect();
        let queries = uniform(r, grid.cells() * cfg.d, 1.0);
        Self { cfg, store, module, table, queries, feats, sizes }
    }

    /// Model output in precision `T`, rows `[cells, d]`.
    pub fn run<T: Scalar>(&self) -> Tensor<T> {
        self.run_with(&self.feats)
    }

    pub fn run_with<T: Scalar>(&self, feats: &[Vec<Vec<f64>>]) -> Tensor<T> {
        let st: ParamStore<T> = self.store.cast();
        let d = self.cfg.d;
        let mut g = Graph::<T>::new();
        let qv = g.input(tensor(&[self.table.cells, d], &self.queries));
        let pyramids: Vec<FeaturePyramid> = feats
            .iter()
            .map(|levels| FeaturePyramid {
                levels: levels.iter().zip(&self.sizes).map(|(f, &(h, w))| g.input(tensor(&[d, h, w], f))).collect(),
                strides: STRIDES[..self.cfg.n_levels].to_vec(),
            })
            .collect();
        let out = self.module.forward(&mut g, &st, qv, &pyramids, &self.table).unwrap();
        g.value(out).clone()
    }

    /// Dense reference: for every cell, the mean over views with at least one
    /// valid anchor of the summed full deformable attention outputs.
    pub fn reference(&self, store: &ParamStore<f64>, feats: &[Vec<Vec<f64>>], queries: &[f64]) -> Vec<f64> {
        let dense = DenseDeform::new(store, &self.module.attn);
        let d = self.cfg.d;
        let maps: Vec<Vec<Map>> = feats
            .iter()
            .map(|levels| levels.iter().zip(&self.sizes).enumerate().map(|(l, (f, &(h, w)))| dense.project(l, f, h, w)).collect())
            .collect();
        let mut out = vec![0.0; self.table.cells * d];
        for cell in 0..self.table.cells {
            let q = &queries[cell * d..(cell + 1) * d];
            let mut acc = vec![0.0; d];
            let mut views = 0;
            for (i, cam_maps) in maps.iter().enumerate() {
                let mut hit = false;
                for j in 0..self.table.n_anchors {
                    let rp = self.table.get(cell, j, i);
                    if !rp.valid {
                        continue;
                    }
                    hit = true;
                    let refs: Vec<[f64; 2]> = STRIDES[..self.cfg.n_levels]
                        .iter()
                        .map(|&s| [(rp.u - s / 2.0) / s, (rp.v - s / 2.0) / s])
                        .collect();
                    for (a, v) in acc.iter_mut().zip(dense.query(q, &refs, cam_maps)) {
                        *a += v;
                    }
                }
                views += hit as usize;
            }
            if views > 0 {
                for (o, a) in out[cell * d..(cell + 1) * d].iter_mut().zip(acc) {
                    *o = a / views as f64;
                }
            }
        }
        out
    }

    /// Same instance with every parameter and input rounded through `T`.
    pub fn rounded<T: Scalar>(&self) -> (ParamStore<f64>, Vec<Vec<Vec<f64>>>, Vec<f64>) {
        let store = self.store.cast::<T>().cast::<f64>();
        let feats = self.feats.iter().map(|c| c.iter().map(|f| through::<T>(f)).collect()).collect();
        (store, feats, through::<T>(&self.queries))
    }
}

/// Spatial cross attention on a random grid over the real rig.
pub fn sca_oracle_diff<T: Scalar>(seed: u64, cameras: &[Camera]) -> f64 {
    let inst = sca_instance(seed, cameras);
    let out = inst.run::<T>();
    let (store, feats, queries) = inst.rounded::<T>();
    max_diff(&out, &inst.reference(&store, &feats, &queries))
}

/// Temporal self attention with a random partially valid history, or none.
pub fn temporal_instance<T: Scalar>(seed: u64) -> f64 {
    let mut r = rng(seed);
    let n_heads = r.random_range(1..=3);
    let d = n_heads * r.random_range(1..=3);
    let n_points = r.random_range(1..=3);
    let (h, w) = (r.random_range(1..=5), r.random_range(1..=5));
    let mut store = ParamStore::<f64>::new(seed);
    let m = TemporalSelfAttention::new(&mut store, "tsa", d, n_heads, n_points).unwrap();
    randomize(&mut store, &mut r);
    let st: ParamStore<T> = store.cast();
    let dense = DenseTemporal::new(&st.cast(), &m);
    let queries = through::<T>(&uniform(&mut r, h * w * d, 1.0));
    let prev = through::<T>(&uniform(&mut r, h * w * d, 1.0));
    let valid: Vec<bool> = (0..h * w).map(|_| r.random_bool(0.7)).collect();
    let with_history = seed % 4 != 0;

    let mut g = Graph::<T>::new();
    let qv = g.input(tensor(&[h * w, d], &queries));
    let pv = g.input(tensor(&[h * w, d], &prev));
    let out = m.forward(&mut g, &st, qv, with_history.then_some((pv, &valid[..])), h, w).unwrap();
    let reference = dense.forward(&queries, with_history.then_some((&prev[..], &valid[..])), h, w);
    max_diff(g.value(out), &reference)
}

pub struct MaskingStats {
    /// Sampled (cell, camera) pairs with the camera outside the cell's valid views.
    pub pairs: usize,
    /// Of those, pairs whose output row changed in any bit.
    pub changed: usize,
    /// Perturbations that changed at least one cell the camera does see.
    pub effective: usize,
}

/// Perturbs the features of one camera at a time and compares output rows of
/// cells that camera cannot see, bit for bit.
pub fn masking_check<T: Scalar>(seed: u64, cameras: &[Camera], pairs: usize) -> MaskingStats {
    let mut r = rng(seed);
    let cfg = DeformConfig::new(8, 2, 3, 2).unwrap();
    let grid = BevGrid::new(12, 12, 1.5, vec![0.0, 0.9, 1.8], 8).unwrap();
    let inst = ScaInstance::new(&mut r, seed, cameras, cfg, &grid);
    let base = inst.run::<T>();
    let candidates: Vec<(usize, usize)> = (0..inst.table.cells)
        .flat_map(|c| (0..cameras.len()).map(move |i| (c, i)))
        .filter(|&(c, i)| !inst.table.valid_views(c).contains(&i))
        .collect();
    assert!(!candidates.is_empty());
    let d = cfg.d;
    let mut stats = MaskingStats { pairs: 0, changed: 0, effective: 0 };
    for _ in 0..pairs {
        let (cell, cam) = candidates[r.random_range(0..candidates.len())];
        let mut feats = inst.feats.clone();
        feats[cam] = random_pyramid(&mut r, d, &inst.sizes);
        let out = inst.run_with::<T>(&feats);
        let row = |t: &Tensor<T>, c: usize| t.data()[c * d..(c + 1) * d].iter().map(|v| v.as_f64().to_bits()).collect::<Vec<_>>();
        stats.pairs += 1;
        if row(&out, cell) != row(&base, cell) {
            stats.changed += 1;
        }
        let seen = (0..inst.table.cells).any(|c| inst.table.valid_views(c).contains(&cam) && row(&out, c) != row(&base, c));
        stats.effective += seen as usize;
    }
    stats
}

#[derive(Clone, Copy, Debug, Default)]
pub struct GeometryStats {
    pub box_cells: usize,
    pub unoccluded: usize,
    pub matched: usize,
}

impl GeometryStats {
    pub fn ratio(&self) -> f64 {
        self.matched as f64 / self.unoccluded.max(1) as f64
    }
}

/// For every BEV cell covered by a scene box, projects the box mid-height
/// point above the cell center into each camera. A camera counts when the
/// pixel is valid and the segment from the camera reaches the box before any
/// other box; the cell matches when one such camera renders the box class at
/// that pixel.
pub fn geometric_consistency(seed: u64, cameras: &[Camera]) -> GeometryStats {
    let scene = build_scene(seed, &SceneConfig::default()).unwrap();
    let grid = BevGrid::new(40, 40, 0.4, vec![0.0], 8).unwrap();
    let palette = Palette::default();
    let renders: Vec<_> = cameras.iter().map(|c| render_view(&scene, c, &scene.ego, &palette).0).collect();
    let (seg, _) = ground_truth_bev(&scene, &grid, &scene.ego, 1);
    let [ex, ey, _] = scene.ego_dims;
    let mut st = GeometryStats::default();
    for y in 0..grid.h {
        for x in 0..grid.w {
            let (xe, ye) = grid.cell_to_world(x, y).unwrap();
            if xe.abs() <= ex / 2.0 && ye.abs() <= ey / 2.0 {
                continue;
            }
            let cls = seg.get(x, y);
            let p = scene.ego.to_world(&[xe, ye, 0.0]);
            let Some((idx, b)) = scene
                .boxes
                .iter()
                .enumerate()
                .filter(|(_, b)| b.contains_xy(p[0], p[1]))
                .max_by(|a, b| a.1.height.total_cmp(&b.1.height))
            else {
                continue;
            };
            assert_eq!(cls, b.class.index());
            st.box_cells += 1;
            let target = [xe, ye, b.height / 2.0];
            let mut visible = false;
            let mut matched = false;
            for (cam, img) in cameras.iter().zip(&renders) {
                let pr = cam.project(&target).unwrap();
                if !pr.valid || !cam.pixel_valid(pr.u, pr.v) {
                    continue;
                }
                let o = scene.ego.to_world(&cam.center());
                let dir = [target[0] - o[0], target[1] - o[1], target[2] - o[2]];
                if first_box(&scene, &o, &dir).map(|(i, _)| i) != Some(idx) {
                    continue;
                }
                visible = true;
                matched |= img.get(pr.u.floor() as usize, pr.v.floor() as usize) == cls;
            }
            st.unoccluded += visible as usize;
            st.matched += matched as usize;
        }
    }
    st
}

#[derive(Clone, Copy, Debug)]
pub struct ProjectionStats {
    pub points: usize,
    /// Smallest cosine between a point's direction and the unprojection of its pixel.
    pub min_cos: f64,
    /// Largest pixel error of project after unproject.
    pub max_px: f64,
    pub seconds: f64,
}

/// Random in-view points per camera: 3D directions that project validly,
/// checked through unprojection, and valid pixels checked through projection.
pub fn projection_fidelity(cameras: &[Camera], per_camera: usize, seed: u64) -> ProjectionStats {
    let mut r = rng(seed);
    let start = std::time::Instant::now();
    let mut st = ProjectionStats { points: 0, min_cos: 1.0, max_px: 0.0, seconds: 0.0 };
    for cam in cameras {
        let rt = geom::transpose(&cam.rotation);
        let center = cam.center();
        let mut n = 0;
        while n < per_camera {
            let z: f64 = r.random_range(-1.0..1.0);
            let phi: f64 = r.random_range(0.0..std::f64::consts::TAU);
            let rho = (1.0 - z * z).sqrt();
            let depth = r.random_range(0.3..30.0);
            let pc = [depth * rho * phi.cos(), depth * rho * phi.sin(), depth * z];
            let pw = geom::add(&geom::mat_vec(&rt, &pc), &center);
            let pr = cam.project(&pw).unwrap();
            if !pr.valid {
                continue;
            }
            let s = cam.unproject(pr.u, pr.v).unwrap();
            st.min_cos = st.min_cos.min(geom::dot(&s, &pc) / depth);
            n += 1;
        }
        let mut n = 0;
        while n < per_camera {
            let (u, v) = (r.random_range(0.0..cam.width as f64), r.random_range(0.0..cam.height as f64));
            if !cam.pixel_valid(u, v) {
                continue;
            }
            let s = cam.unproject(u, v).unwrap();
            let pw = geom::add(&geom::mat_vec(&rt, &geom::scale(&s, r.random_range(0.3..30.0))), &center);
            let pr = cam.project(&pw).unwrap();
            st.max_px = st.max_px.max((pr.u - u).hypot(pr.v - v));
            n += 1;
        }
        st.points += 2 * per_camera;
    }
    st.seconds = start.elapsed().as_secs_f64();
    st
}

/// Largest deviation of a mirror-free, distortion-free camera from the
/// closed-form pinhole projection.
pub fn pinhole_reduction(points: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let (g1, g2, alpha, c1, c2): (f64, f64, f64, f64, f64) = (410.0, 395.0, 0.002, 640.0, 480.0);
    let cam = FisheyeCamera::new(
        Intrinsics { gamma1: g1, gamma2: g2, alpha, c1, c2, xi: 0.0 },
        Distortion::default(),
        1280,
        960,
        geom::rot_z(0.3),
        [0.2, -0.1, 0.5],
        None,
    )
    .unwrap();
    let mut worst: f64 = 0.0;
    for _ in 0..points {
        let pc = [r.random_range(-2.0..2.0), r.random_range(-2.0..2.0), r.random_range(0.5..5.0)];
        let pr = cam.project_camera_frame(&pc).unwrap();
        let u = g1 * (pc[0] / pc[2] + alpha * pc[1] / pc[2]) + c1;
        let v = g2 * pc[1] / pc[2] + c2;
        worst = worst.max((pr.u - u).abs()).max((pr.v - v).abs());
    }
    worst
}

/// Corner and center cells of the 50 x 50, 0.33 m grid against hand-written
/// coordinates. Returns the cells that disagree.
pub fn grid_mismatches() -> Vec<((usize, usize), (f64, f64), (f64, f64))> {
    let grid = BevGrid::new(50, 50, 0.33, vec![0.0, 0.25, 1.8], 8).unwrap();
    let expected = [
        ((0, 0), (-25.0 * 0.33, -25.0 * 0.33)),
        ((49, 0), (24.0 * 0.33, -25.0 * 0.33)),
        ((0, 49), (-25.0 * 0.33, 24.0 * 0.33)),
        ((49, 49), (24.0 * 0.33, 24.0 * 0.33)),
        ((25, 25), (0.0, 0.0)),
    ];
    let mut bad = Vec::new();
    for ((x, y), want) in expected {
        let got = grid.cell_to_world(x, y).unwrap();
        if got != want {
            bad.push(((x, y), got, want));
        }
    }
    if grid.cells() != 2500 || (grid.w as f64 * grid.l - 16.5).abs() > 1e-12 {
        bad.push(((grid.w, grid.h), (grid.w as f64 * grid.l, grid.cells() as f64), (16.5, 2500.0)));
    }
    bad
}

fn class_map(w: usize, h: usize, v: &[u8]) -> ClassMap {
    ClassMap { width: w, height: h, data: v.to_vec() }
}

/// Named metric checks on hand-enumerated maps.
pub fn metric_checks() -> Vec<(&'static str, bool)> {
    let toy = iou_report(&class_map(2, 2, &[0, 0, 1, 1]), &class_map(2, 2, &[0, 1, 1, 1]), 2, &[]).unwrap();
    // target 0 0 0 1 / pred 0 0 1 1: IoU0 = 2/3 on 3 pixels, IoU1 = 1/2 on 1 pixel
    let target = class_map(4, 1, &[0, 0, 0, 1]);
    let pred = class_map(4, 1, &[0, 0, 1, 1]);
    let incl = iou_report(&pred, &target, 2, &[]).unwrap();
    let excl = iou_report(&pred, &target, 2, &[0]).unwrap();
    let absent = iou_report(&class_map(2, 1, &[0, 1]), &class_map(2, 1, &[0, 1]), 3, &[0]).unwrap();
    vec![
        ("toy per-class 1/2, 2/3", toy.per_class == [0.5, 2.0 / 3.0]),
        ("toy mean 7/12", toy.mean == (0.5 + 2.0 / 3.0) / 2.0 && (toy.mean - 7.0 / 12.0).abs() <= f64::EPSILON),
        ("freq-weighted with background", incl.freq_weighted == (3.0 * (2.0 / 3.0) + 0.5) / 4.0),
        ("freq-weighted without background", excl.freq_weighted == 0.5),
        ("exclusion changes the value", incl.freq_weighted != excl.freq_weighted),
        ("mean ignores exclusion", incl.mean == excl.mean),
        ("absent class scores 1 with zero weight", absent.per_class[2] == 1.0 && absent.pixel_counts[2] == 0 && absent.freq_weighted == 1.0),
    ]
}

#[derive(Clone, Copy, Debug)]
pub struct TemporalStats {
    pub frames: usize,
    /// Frames after the first whose logits differ with and without history.
    pub differing: usize,
    pub first_frame_equal: bool,
    pub identity_exact: bool,
}

/// Untrained default model over a moving-ego sequence, run with and without
/// history; plus identity alignment of random features in both precisions.
pub fn temporal_effect(seed: u64) -> TemporalStats {
    let cams = rig();
    let mc = ModelConfig { seed, ..ModelConfig::default() };
    let grid = mc.grid().unwrap();
    let (_, frames) = generate_sequence(&SequenceConfig::new(seed, 4), &grid, &cams).unwrap();
    let model = Model::<f32>::new(mc, &cams).unwrap();
    let mut with = Runner::new(&model, true);
    let mut without = Runner::new(&model, false);
    let mut st = TemporalStats { frames: frames.len(), differing: 0, first_frame_equal: false, identity_exact: false };
    for (i, f) in frames.iter().enumerate() {
        let f = Frame::from_record(f);
        let a = with.step(&f).unwrap();
        let b = without.step(&f).unwrap();
        let same = a.logits.iter().zip(&b.logits).all(|(x, y)| x.1 == y.1);
        if i == 0 {
            st.first_frame_equal = same;
        } else if !same {
            st.differing += 1;
        }
    }
    let mut r = rng(seed);
    let f64s = Tensor::<f64>::from_f64(&[grid.cells(), grid.d], &uniform(&mut r, grid.cells() * grid.d, 3.0)).unwrap();
    let f32s: Tensor<f32> = f64s.cast();
    let (a64, v64) = align_previous(&f64s, &EgoMotion::identity(), &grid).unwrap();
    let (a32, v32) = align_previous(&f32s, &EgoMotion::identity(), &grid).unwrap();
    let bits64 = a64.data().iter().zip(f64s.data()).all(|(x, y)| x.to_bits() == y.to_bits());
    let bits32 = a32.data().iter().zip(f32s.data()).all(|(x, y)| x.to_bits() == y.to_bits());
    st.identity_exact = bits64 && bits32 && v64.iter().chain(&v32).all(|&v| v);
    st
}

/// Eight-frame single-scene dataset with every segmentation class in view.
pub fn overfit_chunk() -> (Vec<Camera>, Chunk) {
    let cams = rig();
    let grid = overfit_config(TaskMode::Height).grid().unwrap();
    let scene = SceneConfig { extent: 12.0, cars: 3, buses: 1, chargers: 2, containers: 0, planters: 2, ..SceneConfig::default() };
    let cfg = SequenceConfig { scene, ..SequenceConfig::new(3, 8) };
    let (_, frames) = generate_sequence(&cfg, &grid, &cams).unwrap();
    let chunk = Chunk { sequence: "overfit".into(), bev_scale: cfg.bev_scale, frames: frames.iter().map(Frame::from_record).collect() };
    (cams, chunk)
}

pub fn overfit_config(task: TaskMode) -> ModelConfig {
    ModelConfig { grid_h: 16, grid_w: 16, d: 32, anchors: vec![0.0, 1.0], blocks: 1, head: HeadKind::Conv, task, ..ModelConfig::default() }
}

#[derive(Clone, Debug)]
pub struct OverfitRun {
    pub steps: usize,
    pub seconds: f64,
    /// Train mean IoU per task, recomputed after training.
    pub iou: Vec<(String, f64)>,
}

/// Trains from scratch with early stopping once every task reaches `target`.
pub fn overfit(task: TaskMode, target: f64, max_steps: usize) -> OverfitRun {
    let (cams, chunk) = overfit_chunk();
    let mut model = Model::<f32>::new(overfit_config(task), &cams).unwrap();
    let tc = TrainConfig { ce_steps: max_steps * 4 / 5, focal_steps: max_steps - max_steps * 4 / 5, eval_every: 50, target_iou: target, log_every: 0, checkpoint_every: 0, ..TrainConfig::default() };
    let chunks = vec![chunk];
    let start = std::time::Instant::now();
    let report = train(&mut model, &chunks, &tc, None, |_| {}).unwrap();
    let seconds = start.elapsed().as_secs_f64();
    let iou = evaluate(&model, &chunks, true).unwrap().mean_iou();
    OverfitRun { steps: report.steps, seconds, iou }
}
