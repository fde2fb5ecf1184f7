//! Raycast parking-lot simulator with exact BEV ground truth.
//!
//! World and ego frames use `x` forward, `y` left, `z` up. Scenes are
//! axis-aligned boxes on a flat ground square centered at the world origin.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::bev::{BevGrid, EgoMotion, Pose};
use crate::camera::{Distortion, FisheyeCamera, Intrinsics};
use crate::error::{Error, Result};
use crate::geom::{self, Mat3, Vec3};
use crate::pnm::{GrayImage, RgbImage};

pub const MAX_PLACEMENT_REJECTIONS: usize = 10_000;
pub const MAX_PATH_ATTEMPTS: usize = 10;
pub const CAR_BAND: (f64, f64) = (0.25, 1.8);
pub const EGO_DIMS: [f64; 3] = [4.5, 1.9, 1.6];

/// Image semantic classes. Indices 0-4 coincide with the BEV segmentation classes.
pub mod class {
    pub const GROUND: u8 = 0;
    pub const CAR: u8 = 1;
    pub const BUS: u8 = 2;
    pub const EV_CHARGER: u8 = 3;
    pub const NON_DRIVEABLE: u8 = 4;
    pub const SKY: u8 = 5;
    pub const VOID: u8 = 6;
    pub const COUNT: usize = 7;
}

/// BEV height classes.
pub mod height {
    pub const BELOW: u8 = 0;
    pub const AT: u8 = 1;
    pub const ABOVE: u8 = 2;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BoxClass {
    Car,
    Bus,
    EvCharger,
    NonDriveable,
}

impl BoxClass {
    pub fn index(self) -> u8 {
        match self {
            BoxClass::Car => class::CAR,
            BoxClass::Bus => class::BUS,
            BoxClass::EvCharger => class::EV_CHARGER,
            BoxClass::NonDriveable => class::NON_DRIVEABLE,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneBox {
    pub cx: f64,
    pub cy: f64,
    pub sx: f64,
    pub sy: f64,
    pub height: f64,
    pub class: BoxClass,
}

impl SceneBox {
    pub fn contains_xy(&self, x: f64, y: f64) -> bool {
        (x - self.cx).abs() <= self.sx / 2.0 && (y - self.cy).abs() <= self.sy / 2.0
    }

    fn overlaps(&self, o: &SceneBox, margin: f64) -> bool {
        (self.cx - o.cx).abs() < (self.sx + o.sx) / 2.0 + margin && (self.cy - o.cy).abs() < (self.sy + o.sy) / 2.0 + margin
    }

    fn corners(&self) -> [[f64; 2]; 4] {
        let (hx, hy) = (self.sx / 2.0, self.sy / 2.0);
        [
            [self.cx - hx, self.cy - hy],
            [self.cx + hx, self.cy - hy],
            [self.cx + hx, self.cy + hy],
            [self.cx - hx, self.cy + hy],
        ]
    }

    /// Entry distance of a ray, if it hits the box in front of the origin.
    pub fn ray_hit(&self, o: &Vec3<f64>, d: &Vec3<f64>) -> Option<f64> {
        let lo = [self.cx - self.sx / 2.0, self.cy - self.sy / 2.0, 0.0];
        let hi = [self.cx + self.sx / 2.0, self.cy + self.sy / 2.0, self.height];
        let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
        for k in 0..3 {
            if d[k].abs() < 1e-15 {
                if o[k] < lo[k] || o[k] > hi[k] {
                    return None;
                }
                continue;
            }
            let (a, b) = ((lo[k] - o[k]) / d[k], (hi[k] - o[k]) / d[k]);
            let (a, b) = if a < b { (a, b) } else { (b, a) };
            t0 = t0.max(a);
            t1 = t1.min(b);
            if t0 > t1 {
                return None;
            }
        }
        Some(t0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    /// Side of the square ground area (meters).
    pub extent: f64,
    pub cars: usize,
    pub buses: usize,
    pub chargers: usize,
    /// Tall containers along the lot boundary.
    pub containers: usize,
    /// Low non-driveable islands.
    pub planters: usize,
    /// Minimum gap between boxes (meters).
    pub margin: f64,
    /// Rectangles `[x0, x1, y0, y1]` kept free of boxes.
    pub keep_clear: Vec<[f64; 4]>,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            extent: 30.0,
            cars: 12,
            buses: 1,
            chargers: 2,
            containers: 3,
            planters: 2,
            margin: 0.3,
            keep_clear: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub extent: f64,
    pub boxes: Vec<SceneBox>,
    pub ego: Pose,
    pub ego_dims: [f64; 3],
    pub band: (f64, f64),
}

fn draw(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..=hi)
}

/// Places boxes by rejection sampling; deterministic per seed.
pub fn build_scene(seed: u64, cfg: &SceneConfig) -> Result<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = cfg.extent / 2.0;
    let ego = Pose::planar(0.0, 0.0, 0.0);
    let ego_box = SceneBox {
        cx: 0.0,
        cy: 0.0,
        sx: EGO_DIMS[0],
        sy: EGO_DIMS[1],
        height: EGO_DIMS[2],
        class: BoxClass::Car,
    };
    let clear: Vec<SceneBox> = cfg
        .keep_clear
        .iter()
        .map(|r| SceneBox {
            cx: (r[0] + r[1]) / 2.0,
            cy: (r[2] + r[3]) / 2.0,
            sx: r[1] - r[0],
            sy: r[3] - r[2],
            height: 1.0,
            class: BoxClass::NonDriveable,
        })
        .collect();
    let mut boxes: Vec<SceneBox> = Vec::new();
    let mut rejections = 0usize;
    let mut requests = Vec::new();
    requests.extend(std::iter::repeat_n(BoxClass::NonDriveable, cfg.containers).map(|c| (c, true)));
    requests.extend(std::iter::repeat_n(BoxClass::Bus, cfg.buses).map(|c| (c, false)));
    requests.extend(std::iter::repeat_n(BoxClass::Car, cfg.cars).map(|c| (c, false)));
    requests.extend(std::iter::repeat_n(BoxClass::EvCharger, cfg.chargers).map(|c| (c, false)));
    requests.extend(std::iter::repeat_n(BoxClass::NonDriveable, cfg.planters).map(|c| (c, false)));
    for (cls, boundary) in requests {
        loop {
            let (mut sx, mut sy, height) = match (cls, boundary) {
                (BoxClass::NonDriveable, true) => (6.0, 2.4, draw(&mut rng, 2.6, 3.5)),
                (BoxClass::NonDriveable, false) => (draw(&mut rng, 1.0, 2.5), draw(&mut rng, 0.8, 1.5), draw(&mut rng, 0.1, 0.2)),
                (BoxClass::Bus, _) => (draw(&mut rng, 9.0, 12.0), draw(&mut rng, 2.4, 2.6), draw(&mut rng, 2.8, 3.4)),
                (BoxClass::Car, _) => (draw(&mut rng, 4.0, 4.8), draw(&mut rng, 1.7, 2.0), draw(&mut rng, 1.3, 1.7)),
                (BoxClass::EvCharger, _) => (draw(&mut rng, 0.5, 0.8), draw(&mut rng, 0.4, 0.6), draw(&mut rng, 1.2, 1.6)),
            };
            let (cx, cy) = if boundary {
                let edge = rng.random_range(0..4u8);
                if edge >= 2 {
                    std::mem::swap(&mut sx, &mut sy);
                }
                let along = |len: f64, rng: &mut ChaCha8Rng| draw(rng, -half + len / 2.0, half - len / 2.0);
                match edge {
                    0 => (along(sx, &mut rng), half - sy / 2.0),
                    1 => (along(sx, &mut rng), -half + sy / 2.0),
                    2 => (half - sx / 2.0, along(sy, &mut rng)),
                    _ => (-half + sx / 2.0, along(sy, &mut rng)),
                }
            } else {
                if rng.random_bool(0.5) {
                    std::mem::swap(&mut sx, &mut sy);
                }
                if sx >= cfg.extent || sy >= cfg.extent {
                    (f64::NAN, f64::NAN)
                } else {
                    (draw(&mut rng, -half + sx / 2.0, half - sx / 2.0), draw(&mut rng, -half + sy / 2.0, half - sy / 2.0))
                }
            };
            let b = SceneBox { cx, cy, sx, sy, height, class: cls };
            let ok = cx.is_finite()
                && !b.overlaps(&ego_box, cfg.margin)
                && !clear.iter().any(|c| b.overlaps(c, 0.0))
                && !boxes.iter().any(|o| b.overlaps(o, cfg.margin));
            if ok {
                boxes.push(b);
                break;
            }
            rejections += 1;
            if rejections > MAX_PLACEMENT_REJECTIONS {
                return Err(Error::PlacementFailure { attempts: rejections });
            }
        }
    }
    Ok(Scene {
        extent: cfg.extent,
        boxes,
        ego,
        ego_dims: EGO_DIMS,
        band: CAR_BAND,
    })
}

/// Nearest hit of a world ray: `(distance, class)`, `None` for sky.
pub fn cast_ray(scene: &Scene, o: &Vec3<f64>, d: &Vec3<f64>) -> Option<(f64, u8)> {
    let mut best: Option<(f64, u8)> = None;
    if d[2] < -1e-12 {
        let t = -o[2] / d[2];
        if t > 0.0 {
            let (x, y) = (o[0] + t * d[0], o[1] + t * d[1]);
            best = Some((t, ground_class(scene, x, y)));
        }
    }
    for b in &scene.boxes {
        if let Some(t) = b.ray_hit(o, d) {
            if best.is_none_or(|(bt, _)| t < bt) {
                best = Some((t, b.class.index()));
            }
        }
    }
    best
}

/// Index of the first box hit along a ray, with its entry distance.
pub fn first_box(scene: &Scene, o: &Vec3<f64>, d: &Vec3<f64>) -> Option<(usize, f64)> {
    scene
        .boxes
        .iter()
        .enumerate()
        .filter_map(|(i, b)| b.ray_hit(o, d).map(|t| (i, t)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
}

fn ground_class(scene: &Scene, x: f64, y: f64) -> u8 {
    let half = scene.extent / 2.0;
    if x.abs() <= half && y.abs() <= half {
        class::GROUND
    } else {
        class::NON_DRIVEABLE
    }
}

/// Class palette for pseudo-RGB rendering, indexed by image class.
#[derive(Clone, Debug, PartialEq)]
pub struct Palette {
    pub colors: Vec<[u8; 3]>,
}

impl Default for Palette {
    fn default() -> Self {
        Self {
            colors: vec![
                [128, 128, 128],
                [220, 40, 40],
                [240, 200, 30],
                [40, 200, 80],
                [140, 70, 200],
                [90, 160, 250],
                [0, 0, 0],
            ],
        }
    }
}

impl Palette {
    /// Parses lines `class r g b`; unspecified classes keep their defaults.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut p = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                msg,
            };
            let v: Vec<&str> = line.split_whitespace().collect();
            if v.len() != 4 {
                return Err(err(format!("expected `class r g b`, got {line:?}")));
            }
            let nums = v
                .iter()
                .map(|s| s.parse::<u8>().map_err(|e| err(format!("{s:?}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            let c = nums[0] as usize;
            if c >= class::COUNT {
                return Err(err(format!("class {c} out of range")));
            }
            p.colors[c] = [nums[1], nums[2], nums[3]];
        }
        Ok(p)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Palette color dimmed with hit distance.
    pub fn shade(&self, cls: u8, dist: f64) -> [u8; 3] {
        let base = self.colors[cls as usize];
        if cls == class::SKY || cls == class::VOID {
            return base;
        }
        let f = 0.4 + 0.6 * (-dist / 12.0).exp();
        base.map(|c| (c as f64 * f).round() as u8)
    }
}

/// The four outward-facing fisheye cameras: front, left, rear, right.
#[derive(Clone, Debug)]
pub struct RigConfig {
    pub width: usize,
    pub height: usize,
    pub gamma: f64,
    pub xi: f64,
    pub k: [f64; 4],
    /// Half field of view kept valid (degrees).
    pub max_angle_deg: f64,
    /// `(x, y, z, yaw)` of each camera in the ego frame.
    pub mounts: Vec<[f64; 4]>,
}

impl Default for RigConfig {
    fn default() -> Self {
        use std::f64::consts::FRAC_PI_2;
        Self {
            width: 64,
            height: 64,
            gamma: 27.0,
            xi: 0.95,
            k: [-0.03, 0.002, 0.0004, -0.0003],
            max_angle_deg: 95.0,
            mounts: vec![
                [2.3, 0.0, 0.7, 0.0],
                [0.9, 1.0, 1.0, FRAC_PI_2],
                [-2.3, 0.0, 0.9, std::f64::consts::PI],
                [0.9, -1.0, 1.0, -FRAC_PI_2],
            ],
        }
    }
}

/// Rotation from ego to camera axes (x right, y down, z forward) for a
/// camera looking along `yaw`.
pub fn camera_rotation(yaw: f64) -> Mat3<f64> {
    let (s, c) = yaw.sin_cos();
    [[s, -c, 0.0], [0.0, 0.0, -1.0], [c, s, 0.0]]
}

fn ego_box_hit(dims: &[f64; 3], o: &Vec3<f64>, d: &Vec3<f64>) -> bool {
    let b = SceneBox {
        cx: 0.0,
        cy: 0.0,
        sx: dims[0],
        sy: dims[1],
        height: dims[2],
        class: BoxClass::Car,
    };
    b.ray_hit(o, d).is_some()
}

impl RigConfig {
    /// Builds calibrated cameras with masks covering the lens circle and the ego body.
    pub fn build(&self) -> Result<Vec<FisheyeCamera<f64>>> {
        let cos_max = self.max_angle_deg.to_radians().cos();
        self.mounts
            .iter()
            .map(|m| {
                let r = camera_rotation(m[3]);
                let center = [m[0], m[1], m[2]];
                let t = geom::scale(&geom::mat_vec(&r, &center), -1.0);
                let mut cam = FisheyeCamera::new(
                    Intrinsics {
                        gamma1: self.gamma,
                        gamma2: self.gamma,
                        alpha: 0.0,
                        c1: self.width as f64 / 2.0,
                        c2: self.height as f64 / 2.0,
                        xi: self.xi,
                    },
                    Distortion {
                        k1: self.k[0],
                        k2: self.k[1],
                        k3: self.k[2],
                        k4: self.k[3],
                    },
                    self.width,
                    self.height,
                    r,
                    t,
                    None,
                )?;
                let mask: Vec<bool> = (0..self.width * self.height)
                    .into_par_iter()
                    .map(|i| {
                        let (u, v) = ((i % self.width) as f64 + 0.5, (i / self.width) as f64 + 0.5);
                        match cam.unproject(u, v) {
                            Ok(s) if s[2] > cos_max => {
                                let d = geom::mat_t_vec(&r, &s);
                                !ego_box_hit(&EGO_DIMS, &center, &d)
                            }
                            _ => false,
                        }
                    })
                    .collect();
                cam.valid_mask = mask;
                Ok(cam)
            })
            .collect()
    }
}

/// Ray origin and direction in the world for a camera pixel on an ego pose.
pub fn pixel_ray(cam: &FisheyeCamera<f64>, ego: &Pose, u: f64, v: f64) -> Result<(Vec3<f64>, Vec3<f64>)> {
    let s = cam.unproject(u, v)?;
    let d_ego = geom::mat_t_vec(&cam.rotation, &s);
    let o_ego = cam.center();
    Ok((ego.to_world(&o_ego), geom::mat_vec(&ego.rotation, &d_ego)))
}

/// Semantic and pseudo-RGB renders of one camera.
pub fn render_view(scene: &Scene, cam: &FisheyeCamera<f64>, ego: &Pose, palette: &Palette) -> (GrayImage, RgbImage) {
    let (w, h) = (cam.width, cam.height);
    let px: Vec<(u8, [u8; 3])> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let (x, y) = (i % w, i / w);
            if !cam.valid_mask[i] {
                return (class::VOID, palette.colors[class::VOID as usize]);
            }
            match pixel_ray(cam, ego, x as f64 + 0.5, y as f64 + 0.5) {
                Ok((o, d)) => match cast_ray(scene, &o, &d) {
                    Some((t, c)) => (c, palette.shade(c, t)),
                    None => (class::SKY, palette.colors[class::SKY as usize]),
                },
                Err(_) => (class::VOID, palette.colors[class::VOID as usize]),
            }
        })
        .collect();
    let mut sem = GrayImage::new(w, h);
    let mut rgb = RgbImage::new(w, h);
    for (i, (c, col)) in px.into_iter().enumerate() {
        sem.data[i] = c;
        rgb.data[3 * i..3 * i + 3].copy_from_slice(&col);
    }
    (sem, rgb)
}

/// Segmentation and height classes at an ego-frame ground point.
pub fn classify_point(scene: &Scene, ego: &Pose, xe: f64, ye: f64) -> (u8, u8) {
    let [ex, ey, _] = scene.ego_dims;
    if xe.abs() <= ex / 2.0 && ye.abs() <= ey / 2.0 {
        return (class::CAR, height::AT);
    }
    let p = ego.to_world(&[xe, ye, 0.0]);
    let tallest = scene
        .boxes
        .iter()
        .filter(|b| b.contains_xy(p[0], p[1]))
        .max_by(|a, b| a.height.total_cmp(&b.height));
    match tallest {
        Some(b) => {
            let hc = if b.height < scene.band.0 {
                height::BELOW
            } else if b.height <= scene.band.1 {
                height::AT
            } else {
                height::ABOVE
            };
            (b.class.index(), hc)
        }
        None => (ground_class(scene, p[0], p[1]), height::BELOW),
    }
}

/// Ground-truth BEV maps `(segmentation, height)` at `scale` pixels per cell.
/// Pixel `X` samples cell coordinate `(X + 0.5) / scale - 0.5`, so `scale = 1`
/// samples each cell's own reference point.
pub fn ground_truth_bev(scene: &Scene, grid: &BevGrid, ego: &Pose, scale: usize) -> (GrayImage, GrayImage) {
    let (w, h) = (grid.w * scale, grid.h * scale);
    let mut seg = GrayImage::new(w, h);
    let mut hgt = GrayImage::new(w, h);
    let s = scale as f64;
    for y in 0..h {
        for x in 0..w {
            let (xe, ye) = grid.cell_to_world_unchecked((x as f64 + 0.5) / s - 0.5, (y as f64 + 0.5) / s - 0.5);
            let (c, hc) = classify_point(scene, ego, xe, ye);
            seg.set(x, y, c);
            hgt.set(x, y, hc);
        }
    }
    (seg, hgt)
}

#[derive(Clone, Debug)]
pub struct FrameRecord {
    pub index: usize,
    pub pose: Pose,
    pub images: Vec<RgbImage>,
    pub semantics: Vec<GrayImage>,
    pub bev_seg: GrayImage,
    pub bev_height: GrayImage,
}

#[derive(Clone, Debug)]
pub struct SequenceConfig {
    pub seed: u64,
    pub n_frames: usize,
    pub speed: f64,
    pub dt: f64,
    /// BEV ground-truth pixels per grid cell.
    pub bev_scale: usize,
    pub scene: SceneConfig,
    pub palette: Palette,
}

impl SequenceConfig {
    pub fn new(seed: u64, n_frames: usize) -> Self {
        Self {
            seed,
            n_frames,
            speed: 0.35,
            dt: 0.5,
            bev_scale: 8,
            scene: SceneConfig::default(),
            palette: Palette::default(),
        }
    }
}

/// Planar path: straight on attempt 0, random straight/turn segments after.
fn plan_path(rng: &mut ChaCha8Rng, start: &Pose, n: usize, speed: f64, dt: f64, attempt: usize) -> Vec<Pose> {
    let step = speed * dt;
    let mut yaw = start.yaw();
    let (mut x, mut y) = (start.position[0], start.position[1]);
    let mut poses = Vec::with_capacity(n);
    let mut rate = 0.0;
    let mut left = 0usize;
    for k in 0..n {
        poses.push(Pose::planar(yaw, x, y));
        if k + 1 == n {
            break;
        }
        if attempt > 0 && left == 0 {
            rate = match rng.random_range(0..3u8) {
                0 => 0.0,
                1 => draw(rng, 0.1, 0.3),
                _ => -draw(rng, 0.1, 0.3),
            };
            left = rng.random_range(2..8usize);
        }
        left = left.saturating_sub(1);
        let mid = yaw + rate * dt / 2.0;
        x += step * mid.cos();
        y += step * mid.sin();
        yaw += rate * dt;
    }
    poses
}

fn ego_corners(pose: &Pose, dims: &[f64; 3], inflate: f64) -> [[f64; 2]; 4] {
    let (hx, hy) = (dims[0] / 2.0 + inflate, dims[1] / 2.0 + inflate);
    [[-hx, -hy], [hx, -hy], [hx, hy], [-hx, hy]].map(|[a, b]| {
        let p = pose.to_world(&[a, b, 0.0]);
        [p[0], p[1]]
    })
}

fn polygons_overlap(a: &[[f64; 2]; 4], b: &[[f64; 2]; 4]) -> bool {
    for poly in [a, b] {
        for i in 0..4 {
            let (p, q) = (poly[i], poly[(i + 1) % 4]);
            let axis = [q[1] - p[1], p[0] - q[0]];
            let proj = |pts: &[[f64; 2]; 4]| {
                pts.iter().map(|v| v[0] * axis[0] + v[1] * axis[1]).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)))
            };
            let (a0, a1) = proj(a);
            let (b0, b1) = proj(b);
            if a1 < b0 || b1 < a0 {
                return false;
            }
        }
    }
    true
}

/// True when the ego footprint at every pose avoids all boxes and stays on the lot.
pub fn path_is_clear(scene: &Scene, poses: &[Pose]) -> bool {
    let half = scene.extent / 2.0;
    poses.iter().all(|p| {
        let ego = ego_corners(p, &scene.ego_dims, 0.1);
        ego.iter().all(|c| c[0].abs() <= half && c[1].abs() <= half) && scene.boxes.iter().all(|b| !polygons_overlap(&ego, &b.corners()))
    })
}

/// Generates a scene and renders a drive through it.
pub fn generate_sequence(cfg: &SequenceConfig, grid: &BevGrid, cameras: &[FisheyeCamera<f64>]) -> Result<(Scene, Vec<FrameRecord>)> {
    if cfg.n_frames == 0 {
        return Err(Error::InvalidArgument("a sequence needs at least one frame".into()));
    }
    let travel = cfg.speed * cfg.dt * (cfg.n_frames - 1) as f64;
    let mut scene_cfg = cfg.scene.clone();
    scene_cfg
        .keep_clear
        .push([-EGO_DIMS[0] / 2.0 - 0.2, EGO_DIMS[0] / 2.0 + travel + 0.3, -EGO_DIMS[1] / 2.0 - 0.3, EGO_DIMS[1] / 2.0 + 0.3]);
    let scene = build_scene(cfg.seed, &scene_cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_0F_9A7B);
    let poses = (0..MAX_PATH_ATTEMPTS)
        .map(|a| plan_path(&mut rng, &scene.ego, cfg.n_frames, cfg.speed, cfg.dt, a))
        .find(|p| path_is_clear(&scene, p))
        .ok_or(Error::PathFailure { attempts: MAX_PATH_ATTEMPTS })?;
    let frames = poses
        .iter()
        .enumerate()
        .map(|(index, pose)| {
            let (semantics, images) = cameras.iter().map(|c| render_view(&scene, c, pose, &cfg.palette)).unzip();
            let (bev_seg, bev_height) = ground_truth_bev(&scene, grid, pose, cfg.bev_scale);
            FrameRecord {
                index,
                pose: *pose,
                images,
                semantics,
                bev_seg,
                bev_height,
            }
        })
        .collect();
    Ok((scene, frames))
}

/// Motions between consecutive frames.
pub fn frame_motions(frames: &[FrameRecord]) -> Vec<EgoMotion> {
    frames.windows(2).map(|w| EgoMotion::from_poses(&w[0].pose, &w[1].pose)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scene_is_deterministic_and_disjoint() {
        let cfg = SceneConfig {
            cars: 20,
            buses: 2,
            ..SceneConfig::default()
        };
        let a = build_scene(7, &cfg).unwrap();
        assert_eq!(a, build_scene(7, &cfg).unwrap());
        for (i, p) in a.boxes.iter().enumerate() {
            assert!(p.cx.abs() + p.sx / 2.0 <= 15.0 + 1e-9 && p.cy.abs() + p.sy / 2.0 <= 15.0 + 1e-9);
            for q in &a.boxes[i + 1..] {
                assert!(!p.overlaps(q, 0.0));
            }
        }
        let empty = SceneConfig {
            cars: 0,
            buses: 0,
            chargers: 0,
            containers: 0,
            planters: 0,
            ..SceneConfig::default()
        };
        assert!(build_scene(1, &empty).unwrap().boxes.is_empty());
        let crowded = SceneConfig {
            extent: 8.0,
            cars: 40,
            ..empty
        };
        assert!(matches!(build_scene(1, &crowded), Err(Error::PlacementFailure { .. })));
    }

    #[test]
    fn rig_masks_ego_and_keeps_ground() {
        let cams = RigConfig::default().build().unwrap();
        assert_eq!(cams.len(), 4);
        for c in &cams {
            let n = c.valid_mask.iter().filter(|&&v| v).count();
            assert!(n > c.width * c.height / 3, "{n}");
            assert!(n < c.width * c.height);
        }
    }

    #[test]
    fn empty_scene_renders_ground_and_sky() {
        let scene = Scene {
            extent: 100.0,
            boxes: vec![],
            ego: Pose::planar(0.0, 0.0, 0.0),
            ego_dims: EGO_DIMS,
            band: CAR_BAND,
        };
        let cams = RigConfig::default().build().unwrap();
        let (sem, rgb) = render_view(&scene, &cams[0], &scene.ego, &Palette::default());
        // bottom centre looks down at the ground, top centre at the sky
        assert_eq!(sem.get(32, 50), class::GROUND);
        assert_eq!(sem.get(32, 10), class::SKY);
        assert_eq!(rgb.get(32, 10), Palette::default().colors[class::SKY as usize]);
    }

    #[test]
    fn ground_truth_bands() {
        let mut scene = Scene {
            extent: 40.0,
            boxes: vec![],
            ego: Pose::planar(0.0, 0.0, 0.0),
            ego_dims: EGO_DIMS,
            band: (0.2, 2.0),
        };
        assert_eq!(classify_point(&scene, &scene.ego, 6.0, 0.0), (class::GROUND, height::BELOW));
        assert_eq!(classify_point(&scene, &scene.ego, 0.0, 0.0), (class::CAR, height::AT));
        scene.boxes.push(SceneBox { cx: 6.0, cy: 0.0, sx: 4.0, sy: 2.0, height: 1.0, class: BoxClass::Car });
        assert_eq!(classify_point(&scene, &scene.ego, 6.0, 0.5), (class::CAR, height::AT));
        scene.boxes.push(SceneBox { cx: 0.0, cy: 18.8, sx: 6.0, sy: 2.4, height: 3.5, class: BoxClass::NonDriveable });
        assert_eq!(classify_point(&scene, &scene.ego, 0.0, 18.5), (class::NON_DRIVEABLE, height::ABOVE));
    }

    #[test]
    fn straight_path_step_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = plan_path(&mut rng, &Pose::planar(0.0, 0.0, 0.0), 5, 0.35, 0.5, 0);
        for w in p.windows(2) {
            let m = EgoMotion::from_poses(&w[0], &w[1]);
            assert!((geom::norm(&m.translation) - 0.175).abs() < 1e-12);
        }
    }
}
