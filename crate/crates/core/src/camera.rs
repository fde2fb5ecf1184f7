//! Unified-projection fisheye camera with radial-tangential distortion.
//!
//! A world point is moved into the camera frame by the extrinsics, lifted onto
//! the unit sphere, shifted by the mirror parameter `xi` along the optical axis
//! and projected onto the normalized plane. Radial (`k1`, `k2`) and tangential
//! (`k3`, `k4`) distortion are then applied, and the intrinsic matrix
//!
//! ```text
//! | gamma1  alpha*gamma1  c1 |
//! |   0        gamma2     c2 |
//! |   0          0         1 |
//! ```
//!
//! maps the distorted point to pixels. Pixel `(i, j)` covers `[i, i+1) x [j, j+1)`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geom::{self, Mat3, Vec3};
use crate::pnm::GrayImage;
use crate::scalar::Scalar;

/// Points with `s_z + xi` at or below this value are treated as behind the camera.
pub const FRONT_EPSILON: f64 = 1e-6;
/// Maximum fixed-point iterations in [`FisheyeCamera::undistort`].
pub const UNDISTORT_MAX_ITERS: usize = 50;
/// Step size below which undistortion stops iterating.
pub const UNDISTORT_STEP_TOL: f64 = 1e-12;
/// Required forward-model residual of an undistorted point.
pub const UNDISTORT_RESIDUAL_TOL: f64 = 1e-9;

/// Focal lengths, skew, principal point and mirror parameter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics<T> {
    pub gamma1: T,
    pub gamma2: T,
    pub alpha: T,
    pub c1: T,
    pub c2: T,
    pub xi: T,
}

/// Radial `k1, k2` and tangential `k3, k4` coefficients.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Distortion<T> {
    pub k1: T,
    pub k2: T,
    pub k3: T,
    pub k4: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FisheyeCamera<T> {
    pub gamma1: T,
    pub gamma2: T,
    pub alpha: T,
    pub c1: T,
    pub c2: T,
    pub xi: T,
    pub k1: T,
    pub k2: T,
    pub k3: T,
    pub k4: T,
    pub width: usize,
    pub height: usize,
    /// World (BEV/ego) frame to camera frame.
    pub rotation: Mat3<T>,
    pub translation: Vec3<T>,
    /// Row-major, `true` marks a usable pixel.
    pub valid_mask: Vec<bool>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProjectionStatus {
    Ok,
    BehindCamera,
    OutsideImage,
    MaskedOut,
}

/// Result of projecting a point. Coordinates are NaN for points behind the camera.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection<T> {
    pub u: T,
    pub v: T,
    pub valid: bool,
    pub reason: ProjectionStatus,
}

impl<T: Scalar> FisheyeCamera<T> {
    pub fn new(
        intrinsics: Intrinsics<T>,
        distortion: Distortion<T>,
        width: usize,
        height: usize,
        rotation: Mat3<T>,
        translation: Vec3<T>,
        valid_mask: Option<Vec<bool>>,
    ) -> Result<Self> {
        let cam = Self {
            gamma1: intrinsics.gamma1,
            gamma2: intrinsics.gamma2,
            alpha: intrinsics.alpha,
            c1: intrinsics.c1,
            c2: intrinsics.c2,
            xi: intrinsics.xi,
            k1: distortion.k1,
            k2: distortion.k2,
            k3: distortion.k3,
            k4: distortion.k4,
            width,
            height,
            rotation,
            translation,
            valid_mask: valid_mask.unwrap_or_else(|| vec![true; width * height]),
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if !(self.gamma1 > T::zero() && self.gamma2 > T::zero()) {
            return bad("focal lengths must be positive");
        }
        if !(self.xi >= T::zero()) {
            return bad("mirror parameter xi must be non-negative");
        }
        if self.width == 0 || self.height == 0 {
            return bad("image size must be positive");
        }
        if !geom::is_rotation(&self.rotation, 1e-9) {
            return bad("rotation must be orthonormal with determinant +1");
        }
        if self.valid_mask.len() != self.width * self.height {
            return Err(Error::shape(
                "valid_mask",
                format!("{}x{}", self.width, self.height),
                self.valid_mask.len(),
            ));
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Intrinsics<T> {
        Intrinsics {
            gamma1: self.gamma1,
            gamma2: self.gamma2,
            alpha: self.alpha,
            c1: self.c1,
            c2: self.c2,
            xi: self.xi,
        }
    }

    pub fn distortion(&self) -> Distortion<T> {
        Distortion {
            k1: self.k1,
            k2: self.k2,
            k3: self.k3,
            k4: self.k4,
        }
    }

    /// `R * p + T`.
    pub fn world_to_camera(&self, p_world: &Vec3<T>) -> Vec3<T> {
        geom::add(&geom::mat_vec(&self.rotation, p_world), &self.translation)
    }

    /// Camera center expressed in the world frame.
    pub fn center(&self) -> Vec3<T> {
        geom::scale(&geom::mat_t_vec(&self.rotation, &self.translation), -T::one())
    }

    pub fn project(&self, p_world: &Vec3<T>) -> Result<Projection<T>> {
        self.project_camera_frame(&self.world_to_camera(p_world))
    }

    /// Projection of a point already expressed in the camera frame.
    pub fn project_camera_frame(&self, p_cam: &Vec3<T>) -> Result<Projection<T>> {
        let n = geom::norm(p_cam);
        if !(n > T::of(1e-12)) {
            return Err(Error::DegeneratePoint);
        }
        let s = geom::scale(p_cam, T::one() / n);
        let denom = s[2] + self.xi;
        if denom <= T::of(FRONT_EPSILON) {
            return Ok(Projection {
                u: T::nan(),
                v: T::nan(),
                valid: false,
                reason: ProjectionStatus::BehindCamera,
            });
        }
        let (x, y) = (s[0] / denom, s[1] / denom);
        let (xd, yd) = self.apply_distortion(x, y);
        let (u, v) = self.to_pixel(xd, yd);
        let reason = if !self.in_bounds(u, v) {
            ProjectionStatus::OutsideImage
        } else if !self.pixel_valid(u, v) {
            ProjectionStatus::MaskedOut
        } else {
            ProjectionStatus::Ok
        };
        Ok(Projection {
            u,
            v,
            valid: reason == ProjectionStatus::Ok,
            reason,
        })
    }

    /// Additive distortion offset `D(x, y)` so that `distorted = (x, y) + D`.
    #[inline]
    pub fn distortion_offset(&self, x: T, y: T) -> (T, T) {
        let two = T::of(2.0);
        let rho2 = x * x + y * y;
        let radial = self.k1 * rho2 + self.k2 * rho2 * rho2;
        let dx = x * radial + two * self.k3 * x * y + self.k4 * (rho2 + two * x * x);
        let dy = y * radial + self.k3 * (rho2 + two * y * y) + two * self.k4 * x * y;
        (dx, dy)
    }

    pub fn apply_distortion(&self, x: T, y: T) -> (T, T) {
        let (dx, dy) = self.distortion_offset(x, y);
        (x + dx, y + dy)
    }

    /// Inverts [`apply_distortion`](Self::apply_distortion) by fixed-point iteration.
    pub fn undistort(&self, xd: T, yd: T) -> Result<(T, T)> {
        let step_tol = T::of(UNDISTORT_STEP_TOL.max(8.0 * T::epsilon().as_f64()));
        let (mut x, mut y) = (xd, yd);
        for _ in 0..UNDISTORT_MAX_ITERS {
            let (dx, dy) = self.distortion_offset(x, y);
            let (nx, ny) = (xd - dx, yd - dy);
            let step = (nx - x).abs().max((ny - y).abs());
            x = nx;
            y = ny;
            if !(x.is_finite() && y.is_finite()) {
                return Err(Error::NonConvergent {
                    residual: f64::INFINITY,
                });
            }
            if step < step_tol {
                break;
            }
        }
        let (fx, fy) = self.apply_distortion(x, y);
        let residual = (fx - xd).abs().max((fy - yd).abs()).as_f64();
        let tol = UNDISTORT_RESIDUAL_TOL.max(64.0 * T::epsilon().as_f64());
        if residual.is_finite() && residual < tol {
            Ok((x, y))
        } else {
            Err(Error::NonConvergent { residual })
        }
    }

    /// Pixel to unit viewing ray in the camera frame.
    pub fn unproject(&self, u: T, v: T) -> Result<Vec3<T>> {
        if !self.in_bounds(u, v) {
            return Err(Error::PixelOutOfBounds {
                u: u.as_f64(),
                v: v.as_f64(),
                width: self.width,
                height: self.height,
            });
        }
        let (xd, yd) = self.from_pixel(u, v);
        let (x, y) = self.undistort(xd, yd)?;
        self.lift_to_sphere(x, y)
    }

    /// Inverse of the sphere-plus-mirror mapping for a normalized point.
    pub fn lift_to_sphere(&self, x: T, y: T) -> Result<Vec3<T>> {
        let one = T::one();
        let r2 = x * x + y * y;
        let disc = one + (one - self.xi * self.xi) * r2;
        if !(disc >= T::zero()) {
            return Err(Error::NoPreimage {
                x: x.as_f64(),
                y: y.as_f64(),
            });
        }
        let factor = (self.xi + disc.sqrt()) / (r2 + one);
        if factor <= T::of(FRONT_EPSILON) {
            return Err(Error::NoPreimage {
                x: x.as_f64(),
                y: y.as_f64(),
            });
        }
        let s = [factor * x, factor * y, factor - self.xi];
        Ok(geom::scale(&s, one / geom::norm(&s)))
    }

    #[inline]
    pub fn to_pixel(&self, xd: T, yd: T) -> (T, T) {
        let u = self.gamma1 * xd + self.alpha * self.gamma1 * yd + self.c1;
        let v = self.gamma2 * yd + self.c2;
        (u, v)
    }

    #[inline]
    pub fn from_pixel(&self, u: T, v: T) -> (T, T) {
        let yd = (v - self.c2) / self.gamma2;
        let xd = (u - self.c1 - self.alpha * self.gamma1 * yd) / self.gamma1;
        (xd, yd)
    }

    fn in_bounds(&self, u: T, v: T) -> bool {
        u >= T::zero() && v >= T::zero() && u < T::of(self.width as f64) && v < T::of(self.height as f64)
    }

    /// True iff `(floor u, floor v)` lies in the image and is marked valid.
    pub fn pixel_valid(&self, u: T, v: T) -> bool {
        if !(u.is_finite() && v.is_finite()) {
            return false;
        }
        let (fu, fv) = (u.floor(), v.floor());
        if fu < T::zero() || fv < T::zero() {
            return false;
        }
        let (x, y) = (fu.as_f64() as usize, fv.as_f64() as usize);
        x < self.width && y < self.height && self.valid_mask[y * self.width + x]
    }

    pub fn mask_image(&self) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            data: self.valid_mask.iter().map(|&b| if b { 255 } else { 0 }).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> FisheyeCamera<U> {
        let c = |x: T| U::of(x.as_f64());
        FisheyeCamera {
            gamma1: c(self.gamma1),
            gamma2: c(self.gamma2),
            alpha: c(self.alpha),
            c1: c(self.c1),
            c2: c(self.c2),
            xi: c(self.xi),
            k1: c(self.k1),
            k2: c(self.k2),
            k3: c(self.k3),
            k4: c(self.k4),
            width: self.width,
            height: self.height,
            rotation: self.rotation.map(|row| row.map(c)),
            translation: self.translation.map(c),
            valid_mask: self.valid_mask.clone(),
        }
    }
}

impl FisheyeCamera<f64> {
    /// Parses a calibration file. The mask path, if present, is resolved
    /// relative to the calibration file's directory.
    pub fn load_calibration(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::parse_calibration(&text, path, base)
    }

    pub fn parse_calibration(text: &str, path: &Path, base: &Path) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut scalars = std::collections::HashMap::new();
        let mut rotation = None;
        let mut translation = None;
        let mut mask_path = None;
        for (idx, raw) in text.lines().enumerate() {
            let lineno = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(lineno, format!("expected `key = value`, got {line:?}")))?;
            let key = key.trim();
            let value = value.trim();
            let numbers = || -> Result<Vec<f64>> {
                value
                    .split_whitespace()
                    .map(|t| t.parse::<f64>().map_err(|_| err(lineno, format!("bad number {t:?}"))))
                    .collect()
            };
            match key {
                "R" => {
                    let v = numbers()?;
                    if v.len() != 9 {
                        return Err(err(lineno, format!("R needs 9 values, got {}", v.len())));
                    }
                    rotation = Some([[v[0], v[1], v[2]], [v[3], v[4], v[5]], [v[6], v[7], v[8]]]);
                }
                "T" => {
                    let v = numbers()?;
                    if v.len() != 3 {
                        return Err(err(lineno, format!("T needs 3 values, got {}", v.len())));
                    }
                    translation = Some([v[0], v[1], v[2]]);
                }
                "mask" => mask_path = Some(base.join(value)),
                "gamma1" | "gamma2" | "alpha" | "c1" | "c2" | "xi" | "k1" | "k2" | "k3" | "k4" | "width"
                | "height" => {
                    let v = numbers()?;
                    if v.len() != 1 {
                        return Err(err(lineno, format!("{key} needs exactly one value")));
                    }
                    scalars.insert(key.to_string(), v[0]);
                }
                other => return Err(err(lineno, format!("unknown key {other:?}"))),
            }
        }
        let get = |k: &str| {
            scalars
                .get(k)
                .copied()
                .ok_or_else(|| err(0, format!("missing key {k:?}")))
        };
        let width = get("width")?;
        let height = get("height")?;
        if width < 1.0 || height < 1.0 || width.fract() != 0.0 || height.fract() != 0.0 {
            return Err(err(0, "width and height must be positive integers".into()));
        }
        let (width, height) = (width as usize, height as usize);
        let mask = match mask_path {
            Some(p) => {
                let img = GrayImage::load(&p)?;
                if img.width != width || img.height != height {
                    return Err(Error::shape(
                        "calibration mask",
                        format!("{width}x{height}"),
                        format!("{}x{}", img.width, img.height),
                    ));
                }
                Some(img.data.iter().map(|&b| b >= 128).collect())
            }
            None => None,
        };
        Self::new(
            Intrinsics {
                gamma1: get("gamma1")?,
                gamma2: get("gamma2")?,
                alpha: get("alpha")?,
                c1: get("c1")?,
                c2: get("c2")?,
                xi: get("xi")?,
            },
            Distortion {
                k1: get("k1")?,
                k2: get("k2")?,
                k3: get("k3")?,
                k4: get("k4")?,
            },
            width,
            height,
            rotation.ok_or_else(|| err(0, "missing R".into()))?,
            translation.ok_or_else(|| err(0, "missing T".into()))?,
            mask,
        )
    }

    /// Serializes the calibration; `mask` is the path written on the mask line.
    pub fn calibration_text(&self, mask: Option<&str>) -> String {
        let mut s = String::new();
        for (k, v) in [
            ("gamma1", self.gamma1),
            ("gamma2", self.gamma2),
            ("alpha", self.alpha),
            ("c1", self.c1),
            ("c2", self.c2),
            ("xi", self.xi),
            ("k1", self.k1),
            ("k2", self.k2),
            ("k3", self.k3),
            ("k4", self.k4),
        ] {
            let _ = writeln!(s, "{k} = {v:?}");
        }
        let _ = writeln!(s, "width = {}", self.width);
        let _ = writeln!(s, "height = {}", self.height);
        let r = &self.rotation;
        let _ = writeln!(
            s,
            "R = {:?} {:?} {:?} {:?} {:?} {:?} {:?} {:?} {:?}",
            r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2]
        );
        let t = &self.translation;
        let _ = writeln!(s, "T = {:?} {:?} {:?}", t[0], t[1], t[2]);
        if let Some(m) = mask {
            let _ = writeln!(s, "mask = {m}");
        }
        s
    }

    /// Writes `<stem>.txt` and its mask `<stem>_mask.pgm` into `dir`.
    pub fn save_calibration(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        let mask_name = format!("{stem}_mask.pgm");
        self.mask_image().save(dir.join(&mask_name))?;
        let path = dir.join(format!("{stem}.txt"));
        fs::write(&path, self.calibration_text(Some(&mask_name))).map_err(|e| Error::io(&path, e))
    }
}

/// Worst errors over random round trips through one camera.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoundTrip {
    pub samples: usize,
    /// Pixel distance after unproject then project.
    pub max_pixel_error: f64,
    /// `1 - cos` between a direction and the unprojection of its pixel.
    pub max_ray_error: f64,
}

impl FisheyeCamera<f64> {
    /// `samples` valid pixels through unproject then project, and as many
    /// validly projecting directions through project then unproject.
    pub fn round_trip(&self, samples: usize, seed: u64) -> Result<RoundTrip> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let limit = samples.saturating_mul(1000).max(1000);
        let exhausted = || Error::InvalidArgument("too few valid pixels to sample".into());
        let rt = geom::transpose(&self.rotation);
        let center = self.center();
        let mut out = RoundTrip {
            samples,
            max_pixel_error: 0.0,
            max_ray_error: 0.0,
        };
        let (mut n, mut tries) = (0, 0);
        while n < samples {
            tries += 1;
            if tries > limit {
                return Err(exhausted());
            }
            let (u, v) = (rng.random_range(0.0..self.width as f64), rng.random_range(0.0..self.height as f64));
            if !self.pixel_valid(u, v) {
                continue;
            }
            let s = self.unproject(u, v)?;
            let p = geom::add(&geom::mat_vec(&rt, &geom::scale(&s, rng.random_range(0.3..30.0))), &center);
            let pr = self.project(&p)?;
            out.max_pixel_error = out.max_pixel_error.max((pr.u - u).hypot(pr.v - v));
            n += 1;
        }
        let (mut n, mut tries) = (0, 0);
        while n < samples {
            tries += 1;
            if tries > limit {
                return Err(exhausted());
            }
            let z: f64 = rng.random_range(-1.0..1.0);
            let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let r = (1.0 - z * z).sqrt();
            let dir = [r * phi.cos(), r * phi.sin(), z];
            let pr = self.project_camera_frame(&dir)?;
            if !pr.valid {
                continue;
            }
            let s = self.unproject(pr.u, pr.v)?;
            out.max_ray_error = out.max_ray_error.max(1.0 - geom::dot(&s, &dir));
            n += 1;
        }
        Ok(out)
    }
}
