//! On-disk sequence layout.
//!
//! ```text
//! seq_<id>/meta.txt
//! seq_<id>/calib/cam<i>.txt, cam<i>_mask.pgm
//! seq_<id>/frame_<05d>/cam<i>.ppm, cam<i>_seg.pgm, bev_seg.pgm, bev_height.pgm, ego.txt
//! ```

use std::fmt::Write as _;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use crate::bev::{BevGrid, EgoMotion, Pose};
use crate::camera::FisheyeCamera;
use crate::error::{Error, Result};
use crate::heads::Task;
use crate::pnm::{GrayImage, RgbImage};
use crate::synth::FrameRecord;

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceMeta {
    pub grid_h: usize,
    pub grid_w: usize,
    pub cell_size: f64,
    pub bev_scale: usize,
    pub n_frames: usize,
    pub n_cameras: usize,
    pub seed: u64,
}

impl SequenceMeta {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "grid_h = {}", self.grid_h);
        let _ = writeln!(s, "grid_w = {}", self.grid_w);
        let _ = writeln!(s, "cell_size = {}", self.cell_size);
        let _ = writeln!(s, "bev_scale = {}", self.bev_scale);
        let _ = writeln!(s, "n_frames = {}", self.n_frames);
        let _ = writeln!(s, "n_cameras = {}", self.n_cameras);
        let _ = writeln!(s, "seed = {}", self.seed);
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut kv = std::collections::HashMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                msg: format!("expected `key = value`, got {line:?}"),
            })?;
            kv.insert(k.trim().to_string(), (n + 1, v.trim().to_string()));
        }
        fn get<T: std::str::FromStr>(kv: &std::collections::HashMap<String, (usize, String)>, k: &str, path: &Path) -> Result<T>
        where
            T::Err: std::fmt::Display,
        {
            let (line, v) = kv.get(k).ok_or_else(|| Error::Dataset(format!("{}: missing key {k:?}", path.display())))?;
            v.parse().map_err(|e: T::Err| Error::Parse {
                path: path.to_path_buf(),
                line: *line,
                msg: format!("{k}: {e}"),
            })
        }
        Ok(Self {
            grid_h: get(&kv, "grid_h", path)?,
            grid_w: get(&kv, "grid_w", path)?,
            cell_size: get(&kv, "cell_size", path)?,
            bev_scale: get(&kv, "bev_scale", path)?,
            n_frames: get(&kv, "n_frames", path)?,
            n_cameras: get(&kv, "n_cameras", path)?,
            seed: get(&kv, "seed", path)?,
        })
    }

    /// Errors unless the ground truth was generated for this grid.
    pub fn check_grid(&self, grid: &BevGrid) -> Result<()> {
        if self.grid_h != grid.h || self.grid_w != grid.w || (self.cell_size - grid.l).abs() > 1e-12 {
            return Err(Error::Dataset(format!(
                "dataset grid {}x{} at {} m does not match model grid {}x{} at {} m",
                self.grid_w, self.grid_h, self.cell_size, grid.w, grid.h, grid.l
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Frame {
    pub index: usize,
    pub pose: Pose,
    pub images: Vec<RgbImage>,
    pub bev_seg: GrayImage,
    pub bev_height: GrayImage,
}

impl Frame {
    pub fn from_record(r: &FrameRecord) -> Self {
        Self {
            index: r.index,
            pose: r.pose,
            images: r.images.clone(),
            bev_seg: r.bev_seg.clone(),
            bev_height: r.bev_height.clone(),
        }
    }

    pub fn target(&self, task: Task) -> &GrayImage {
        match task {
            Task::Height => &self.bev_height,
            Task::Segmentation => &self.bev_seg,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Sequence {
    pub id: String,
    pub dir: PathBuf,
    pub meta: SequenceMeta,
    pub cameras: Vec<FisheyeCamera<f64>>,
    /// Frame directories in temporal order.
    pub frames: Vec<PathBuf>,
}

fn pose_text(p: &Pose) -> String {
    let r = &p.rotation;
    let t = &p.position;
    format!(
        "{:e} {:e} {:e} {:e} {:e} {:e} {:e} {:e} {:e}\n{:e} {:e} {:e}\n",
        r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2], t[0], t[1], t[2]
    )
}

fn parse_pose(text: &str, path: &Path) -> Result<Pose> {
    let v = text
        .split_whitespace()
        .map(|s| {
            s.parse::<f64>().map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                msg: format!("{s:?}: {e}"),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if v.len() != 12 {
        return Err(Error::Dataset(format!("{}: expected 12 numbers, found {}", path.display(), v.len())));
    }
    let rotation = [[v[0], v[1], v[2]], [v[3], v[4], v[5]], [v[6], v[7], v[8]]];
    if !crate::geom::is_rotation(&rotation, 1e-6) {
        return Err(Error::Dataset(format!("{}: rotation is not orthonormal", path.display())));
    }
    Ok(Pose {
        rotation,
        position: [v[9], v[10], v[11]],
    })
}

/// Writes a rendered sequence under `root/seq_<id>` and returns its directory.
pub fn write_sequence(root: &Path, id: usize, cameras: &[FisheyeCamera<f64>], frames: &[FrameRecord], meta: &SequenceMeta) -> Result<PathBuf> {
    let dir = root.join(format!("seq_{id:03}"));
    let calib = dir.join("calib");
    fs::create_dir_all(&calib).map_err(|e| Error::io(&calib, e))?;
    for (i, c) in cameras.iter().enumerate() {
        c.save_calibration(&calib, &format!("cam{i}"))?;
    }
    let mpath = dir.join("meta.txt");
    fs::write(&mpath, meta.to_text()).map_err(|e| Error::io(&mpath, e))?;
    for f in frames {
        let fdir = dir.join(format!("frame_{:05}", f.index));
        fs::create_dir_all(&fdir).map_err(|e| Error::io(&fdir, e))?;
        for (i, (img, sem)) in f.images.iter().zip(&f.semantics).enumerate() {
            img.save(fdir.join(format!("cam{i}.ppm")))?;
            sem.save(fdir.join(format!("cam{i}_seg.pgm")))?;
        }
        f.bev_seg.save(fdir.join("bev_seg.pgm"))?;
        f.bev_height.save(fdir.join("bev_height.pgm"))?;
        let p = fdir.join("ego.txt");
        fs::write(&p, pose_text(&f.pose)).map_err(|e| Error::io(&p, e))?;
    }
    Ok(dir)
}

fn frame_number(name: &str) -> Option<usize> {
    name.strip_prefix("frame_").and_then(|s| s.parse().ok())
}

impl Sequence {
    pub fn open(dir: &Path) -> Result<Self> {
        let meta = SequenceMeta::parse(
            &fs::read_to_string(dir.join("meta.txt")).map_err(|e| Error::io(dir.join("meta.txt"), e))?,
            &dir.join("meta.txt"),
        )?;
        let cameras = (0..meta.n_cameras)
            .map(|i| FisheyeCamera::load_calibration(dir.join("calib").join(format!("cam{i}.txt"))))
            .collect::<Result<Vec<_>>>()?;
        let mut numbered = Vec::new();
        for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let entry = entry.map_err(|e| Error::io(dir, e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if name.starts_with("frame_") {
                let n = frame_number(&name).ok_or_else(|| Error::Ordering(format!("{}: malformed frame directory {name:?}", dir.display())))?;
                numbered.push((n, entry.path()));
            }
        }
        numbered.sort();
        for (k, (n, p)) in numbered.iter().enumerate() {
            if *n != k {
                return Err(Error::Ordering(format!("{}: expected frame {k}, found {}", dir.display(), p.display())));
            }
        }
        if numbered.len() != meta.n_frames {
            return Err(Error::Dataset(format!("{}: meta lists {} frames, found {}", dir.display(), meta.n_frames, numbered.len())));
        }
        Ok(Self {
            id: dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
            dir: dir.to_path_buf(),
            meta,
            cameras,
            frames: numbered.into_iter().map(|(_, p)| p).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn load_frame(&self, i: usize) -> Result<Frame> {
        let dir = self.frames.get(i).ok_or_else(|| Error::Dataset(format!("{}: no frame {i}", self.dir.display())))?;
        let images = (0..self.cameras.len())
            .map(|c| RgbImage::load(dir.join(format!("cam{c}.ppm"))))
            .collect::<Result<Vec<_>>>()?;
        for (c, (img, cam)) in images.iter().zip(&self.cameras).enumerate() {
            if img.width != cam.width || img.height != cam.height {
                return Err(Error::Dataset(format!(
                    "{}: cam{c}.ppm is {}x{}, calibration says {}x{}",
                    dir.display(),
                    img.width,
                    img.height,
                    cam.width,
                    cam.height
                )));
            }
        }
        let (w, h) = (self.meta.grid_w * self.meta.bev_scale, self.meta.grid_h * self.meta.bev_scale);
        let bev_seg = GrayImage::load(dir.join("bev_seg.pgm"))?;
        let bev_height = GrayImage::load(dir.join("bev_height.pgm"))?;
        for m in [&bev_seg, &bev_height] {
            if m.width != w || m.height != h {
                return Err(Error::Dataset(format!("{}: BEV map is {}x{}, expected {w}x{h}", dir.display(), m.width, m.height)));
            }
        }
        let p = dir.join("ego.txt");
        let pose = parse_pose(&fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?, &p)?;
        Ok(Frame {
            index: i,
            pose,
            images,
            bev_seg,
            bev_height,
        })
    }

    pub fn load_all(&self) -> Result<Vec<Frame>> {
        (0..self.len()).map(|i| self.load_frame(i)).collect()
    }
}

/// Opens `root` as one sequence (if it holds `meta.txt`) or every `seq_*` below it.
pub fn open_dataset(root: &Path) -> Result<Vec<Sequence>> {
    if root.join("meta.txt").is_file() {
        return Ok(vec![Sequence::open(root)?]);
    }
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        if entry.file_name().to_string_lossy().starts_with("seq_") && entry.path().is_dir() {
            dirs.push(entry.path());
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Dataset(format!("{}: no sequences found", root.display())));
    }
    dirs.iter().map(|d| Sequence::open(d)).collect()
}

/// Motion from the previous frame's ego frame to the current one.
pub fn motion(prev: &Frame, cur: &Frame) -> EgoMotion {
    EgoMotion::from_poses(&prev.pose, &cur.pose)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
    All,
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "all" => Ok(Split::All),
            _ => Err(Error::InvalidArgument(format!("unknown split {s:?} (train, val, test, all)"))),
        }
    }
}

/// Contiguous 70/15/15 chunks of a sequence of `n` frames, so temporal
/// order survives inside every chunk.
pub fn split_range(n: usize, split: Split) -> Range<usize> {
    let a = (n as f64 * 0.70).round() as usize;
    let b = (n as f64 * 0.85).round() as usize;
    match split {
        Split::Train => 0..a,
        Split::Val => a..b,
        Split::Test => b..n,
        Split::All => 0..n,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_partition() {
        for n in [1, 7, 20, 101] {
            let (a, b, c) = (split_range(n, Split::Train), split_range(n, Split::Val), split_range(n, Split::Test));
            assert_eq!((a.start, a.end, b.end, c.end), (0, b.start, c.start, n));
        }
        assert_eq!(split_range(20, Split::Train), 0..14);
    }

    #[test]
    fn pose_round_trip() {
        let p = Pose::planar(0.3, 1.5, -2.0);
        let q = parse_pose(&pose_text(&p), Path::new("ego.txt")).unwrap();
        assert_eq!(p, q);
        assert!(parse_pose("1 2 3", Path::new("ego.txt")).is_err());
    }
}
