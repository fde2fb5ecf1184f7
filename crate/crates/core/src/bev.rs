//! BEV lattice, reference points and ego-motion alignment.
//!
//! Cell `(x, y)` sits at ego-frame ground position `((x - w/2) l, (y - h/2) l)`
//! with `x` pointing forward and `y` to the left. Cell-major buffers use the
//! index `y * w + x`.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::camera::FisheyeCamera;
use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::geom::{self, Mat3, Vec3};
use crate::scalar::Scalar;

/// Default height anchors in meters.
pub const DEFAULT_ANCHORS: [f64; 3] = [0.0, 0.25, 1.8];

#[derive(Clone, Debug, PartialEq)]
pub struct BevGrid {
    pub h: usize,
    pub w: usize,
    pub l: f64,
    pub anchors: Vec<f64>,
    pub d: usize,
}

impl BevGrid {
    pub fn new(h: usize, w: usize, l: f64, anchors: Vec<f64>, d: usize) -> Result<Self> {
        let g = Self { h, w, l, anchors, d };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.h == 0 || self.w == 0 {
            return Err(Error::InvalidArgument(format!("grid must be at least 1x1, got {}x{}", self.w, self.h)));
        }
        if !(self.l > 0.0 && self.l.is_finite()) {
            return Err(Error::InvalidArgument(format!("cell size must be positive, got {}", self.l)));
        }
        if self.anchors.is_empty() || self.anchors.windows(2).any(|p| p[1] <= p[0]) {
            return Err(Error::InvalidArgument(format!("anchors must be non-empty and strictly increasing: {:?}", self.anchors)));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.h * self.w
    }

    pub fn n_anchors(&self) -> usize {
        self.anchors.len()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.w + x
    }

    /// `(x, y)` of a cell-major index.
    #[inline]
    pub fn coords(&self, cell: usize) -> (usize, usize) {
        (cell % self.w, cell / self.w)
    }

    fn check_cell(&self, x: usize, y: usize) -> Result<()> {
        if x >= self.w || y >= self.h {
            return Err(Error::CellOutOfRange { x, y, w: self.w, h: self.h });
        }
        Ok(())
    }

    /// Ego-frame ground position of a cell.
    pub fn cell_to_world(&self, x: usize, y: usize) -> Result<(f64, f64)> {
        self.check_cell(x, y)?;
        Ok(self.cell_to_world_unchecked(x as f64, y as f64))
    }

    /// Same mapping for fractional cell coordinates.
    pub fn cell_to_world_unchecked(&self, x: f64, y: f64) -> (f64, f64) {
        ((x - self.w as f64 / 2.0) * self.l, (y - self.h as f64 / 2.0) * self.l)
    }

    /// Fractional cell coordinates of an ego-frame ground position.
    pub fn world_to_cell(&self, xr: f64, yr: f64) -> (f64, f64) {
        (xr / self.l + self.w as f64 / 2.0, yr / self.l + self.h as f64 / 2.0)
    }

    /// The cell's reference points, one per height anchor.
    pub fn anchor_points(&self, x: usize, y: usize) -> Result<Vec<Vec3<f64>>> {
        let (xr, yr) = self.cell_to_world(x, y)?;
        Ok(self.anchors.iter().map(|&z| [xr, yr, z]).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RefPoint {
    pub u: f64,
    pub v: f64,
    pub valid: bool,
}

/// Projections of every (cell, anchor) reference point into every camera.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferencePointTable {
    pub cells: usize,
    pub n_anchors: usize,
    pub n_cameras: usize,
    points: Vec<RefPoint>,
    valid_views: Vec<Vec<usize>>,
}

impl ReferencePointTable {
    pub fn build(grid: &BevGrid, cameras: &[FisheyeCamera<f64>]) -> Result<Self> {
        if cameras.is_empty() {
            return Err(Error::InvalidArgument("reference table needs at least one camera".into()));
        }
        grid.validate()?;
        let (na, nc) = (grid.n_anchors(), cameras.len());
        let per_cell: Vec<(Vec<RefPoint>, Vec<usize>)> = (0..grid.cells())
            .into_par_iter()
            .map(|cell| {
                let (x, y) = grid.coords(cell);
                let (xr, yr) = grid.cell_to_world_unchecked(x as f64, y as f64);
                let mut pts = Vec::with_capacity(na * nc);
                let mut seen = vec![false; nc];
                for &z in &grid.anchors {
                    for (i, cam) in cameras.iter().enumerate() {
                        let rp = match cam.project(&[xr, yr, z]) {
                            Ok(p) => RefPoint { u: p.u, v: p.v, valid: p.valid },
                            Err(_) => RefPoint { u: f64::NAN, v: f64::NAN, valid: false },
                        };
                        seen[i] |= rp.valid;
                        pts.push(rp);
                    }
                }
                let views = (0..nc).filter(|&i| seen[i]).collect();
                (pts, views)
            })
            .collect();
        let mut points = Vec::with_capacity(grid.cells() * na * nc);
        let mut valid_views = Vec::with_capacity(grid.cells());
        for (p, v) in per_cell {
            points.extend(p);
            valid_views.push(v);
        }
        Ok(Self {
            cells: grid.cells(),
            n_anchors: na,
            n_cameras: nc,
            points,
            valid_views,
        })
    }

    #[inline]
    pub fn get(&self, cell: usize, anchor: usize, camera: usize) -> RefPoint {
        self.points[(cell * self.n_anchors + anchor) * self.n_cameras + camera]
    }

    /// Cameras with at least one valid anchor projection for `cell`.
    pub fn valid_views(&self, cell: usize) -> &[usize] {
        &self.valid_views[cell]
    }

    /// Valid `(camera, anchor)` pairs of a cell, camera-major.
    pub fn valid_pairs(&self, cell: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.valid_views[cell]
            .iter()
            .flat_map(move |&i| (0..self.n_anchors).filter(move |&j| self.get(cell, j, i).valid).map(move |j| (i, j)))
    }

    /// Same table with camera `i` invalidated everywhere.
    pub fn without_camera(&self, camera: usize) -> Self {
        let mut t = self.clone();
        for (k, p) in t.points.iter_mut().enumerate() {
            if k % t.n_cameras == camera {
                p.valid = false;
            }
        }
        for v in &mut t.valid_views {
            v.retain(|&i| i != camera);
        }
        t
    }

    /// CSV with columns `cell_x, cell_y, anchor_index, camera_index, u, v, valid`.
    pub fn to_csv(&self, grid: &BevGrid) -> String {
        let mut out = String::from("cell_x,cell_y,anchor_index,camera_index,u,v,valid\n");
        for cell in 0..self.cells {
            let (x, y) = grid.coords(cell);
            for j in 0..self.n_anchors {
                for i in 0..self.n_cameras {
                    let p = self.get(cell, j, i);
                    let _ = writeln!(out, "{x},{y},{j},{i},{:.6},{:.6},{}", p.u, p.v, p.valid as u8);
                }
            }
        }
        out
    }
}

/// Rigid motion taking current-frame ego coordinates to previous-frame ego
/// coordinates: `p_prev = R p_cur + T`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EgoMotion {
    pub rotation: Mat3<f64>,
    pub translation: Vec3<f64>,
}

impl Default for EgoMotion {
    fn default() -> Self {
        Self::identity()
    }
}

impl EgoMotion {
    pub fn identity() -> Self {
        Self {
            rotation: geom::identity(),
            translation: [0.0; 3],
        }
    }

    pub fn new(rotation: Mat3<f64>, translation: Vec3<f64>) -> Result<Self> {
        if !geom::is_rotation(&rotation, 1e-9) {
            return Err(Error::InvalidArgument("ego rotation is not a proper rotation".into()));
        }
        Ok(Self { rotation, translation })
    }

    pub fn planar(yaw: f64, tx: f64, ty: f64) -> Self {
        Self {
            rotation: geom::rot_z(yaw),
            translation: [tx, ty, 0.0],
        }
    }

    /// Motion between two absolute ego poses (ego-to-world rotation and position).
    pub fn from_poses(prev: &Pose, cur: &Pose) -> Self {
        let rt = geom::transpose(&prev.rotation);
        Self {
            rotation: geom::mat_mul(&rt, &cur.rotation),
            translation: geom::mat_vec(&rt, &geom::sub(&cur.position, &prev.position)),
        }
    }

    /// Motion over two steps: `self` then `next` (i.e. `next ∘ self`).
    pub fn then(&self, next: &EgoMotion) -> Self {
        Self {
            rotation: geom::mat_mul(&self.rotation, &next.rotation),
            translation: geom::add(&geom::mat_vec(&self.rotation, &next.translation), &self.translation),
        }
    }

    pub fn apply(&self, p: &Vec3<f64>) -> Vec3<f64> {
        geom::add(&geom::mat_vec(&self.rotation, p), &self.translation)
    }

    pub fn yaw(&self) -> f64 {
        self.rotation[1][0].atan2(self.rotation[0][0])
    }
}

/// Absolute ego pose: ego-to-world rotation and ego origin in world coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Mat3<f64>,
    pub position: Vec3<f64>,
}

impl Pose {
    pub fn planar(yaw: f64, x: f64, y: f64) -> Self {
        Self {
            rotation: geom::rot_z(yaw),
            position: [x, y, 0.0],
        }
    }

    pub fn yaw(&self) -> f64 {
        self.rotation[1][0].atan2(self.rotation[0][0])
    }

    /// World point of an ego-frame point.
    pub fn to_world(&self, p: &Vec3<f64>) -> Vec3<f64> {
        geom::add(&geom::mat_vec(&self.rotation, p), &self.position)
    }

    /// Ego-frame point of a world point.
    pub fn to_ego(&self, p: &Vec3<f64>) -> Vec3<f64> {
        geom::mat_t_vec(&self.rotation, &geom::sub(p, &self.position))
    }
}

const SNAP: f64 = 1e-9;

fn snap(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() < SNAP {
        r
    } else {
        x
    }
}

/// Resamples previous-frame BEV features `[h*w, d]` onto the current grid.
///
/// Motion is reduced to yaw plus planar translation. Returns the aligned
/// features and a per-cell validity raster; cells whose source falls outside
/// the previous grid are zero.
pub fn align_previous<T: Scalar>(prev: &Tensor<T>, motion: &EgoMotion, grid: &BevGrid) -> Result<(Tensor<T>, Vec<bool>)> {
    let d = prev.last_dim();
    if prev.shape() != [grid.cells(), d] {
        return Err(Error::shape("align_previous", format!("[{}, d]", grid.cells()), format!("{:?}", prev.shape())));
    }
    let (s, c) = motion.yaw().sin_cos();
    let (tx, ty) = (motion.translation[0], motion.translation[1]);
    let (w, h) = (grid.w, grid.h);
    let src = prev.data();
    let mut out = vec![T::zero(); grid.cells() * d];
    let mut valid = vec![false; grid.cells()];
    for y in 0..h {
        for x in 0..w {
            let (xr, yr) = grid.cell_to_world_unchecked(x as f64, y as f64);
            let (px, py) = grid.world_to_cell(c * xr - s * yr + tx, s * xr + c * yr + ty);
            let (px, py) = (snap(px), snap(py));
            if !(px >= 0.0 && py >= 0.0 && px <= (w - 1) as f64 && py <= (h - 1) as f64) {
                continue;
            }
            let (x0, y0) = (px.floor() as usize, py.floor() as usize);
            let (fx, fy) = (px - x0 as f64, py - y0 as f64);
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let cell = grid.index(x, y);
            valid[cell] = true;
            let dst = &mut out[cell * d..(cell + 1) * d];
            let taps = [
                (grid.index(x0, y0), (1.0 - fx) * (1.0 - fy)),
                (grid.index(x1, y0), fx * (1.0 - fy)),
                (grid.index(x0, y1), (1.0 - fx) * fy),
                (grid.index(x1, y1), fx * fy),
            ];
            for (idx, wgt) in taps {
                if wgt == 0.0 {
                    continue;
                }
                let wgt = T::of(wgt);
                for (o, v) in dst.iter_mut().zip(&src[idx * d..(idx + 1) * d]) {
                    *o += wgt * *v;
                }
            }
        }
    }
    Ok((Tensor::new(prev.shape(), out)?, valid))
}
