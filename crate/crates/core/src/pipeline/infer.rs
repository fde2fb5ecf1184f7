use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::heads::Task;
use crate::metrics::ClassMap;
use crate::pipeline::dataset::Sequence;
use crate::pipeline::model::{Model, Runner};
use crate::pnm::RgbImage;
use crate::scalar::Scalar;
use crate::synth::Palette;

const HEIGHT_COLORS: [[u8; 3]; 3] = [[70, 70, 70], [235, 165, 40], [40, 120, 235]];

pub fn colorize(map: &ClassMap, task: Task) -> RgbImage {
    let pal = Palette::default();
    let mut out = RgbImage::new(map.width, map.height);
    for (i, &c) in map.data.iter().enumerate() {
        let col = match task {
            Task::Height => HEIGHT_COLORS.get(c as usize).copied().unwrap_or([255, 255, 255]),
            Task::Segmentation => pal.colors.get(c as usize).copied().unwrap_or([255, 255, 255]),
        };
        out.data[3 * i..3 * i + 3].copy_from_slice(&col);
    }
    out
}

fn resize_nearest(img: &RgbImage, w: usize, h: usize) -> RgbImage {
    let mut out = RgbImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            out.set(x, y, img.get(x * img.width / w, y * img.height / h));
        }
    }
    out
}

/// Camera views on the top row, colored task maps below.
pub fn collage(views: &[RgbImage], maps: &[(Task, ClassMap)]) -> RgbImage {
    let (cw, ch) = views.first().map(|v| (v.width, v.height)).unwrap_or((64, 64));
    let cols = views.len().max(maps.len()).max(1);
    let mut out = RgbImage::new(cols * cw, 2 * ch);
    for (i, v) in views.iter().enumerate() {
        out.blit(&resize_nearest(v, cw, ch), i * cw, 0);
    }
    for (i, (task, m)) in maps.iter().enumerate() {
        out.blit(&resize_nearest(&colorize(m, *task), cw, ch), i * cw, ch);
    }
    out
}

/// Writes `frame_<05d>_<task>.pgm` class maps and `frame_<05d>_collage.ppm`
/// for every frame of a sequence.
pub fn infer_sequence<T: Scalar>(model: &Model<T>, seq: &Sequence, out: &Path, use_history: bool) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut runner = Runner::new(model, use_history);
    let mut written = Vec::new();
    for i in 0..seq.len() {
        let frame = seq.load_frame(i)?;
        let pred = runner.step(&frame)?;
        for (task, map) in &pred.maps {
            let p = out.join(format!("frame_{i:05}_{}.pgm", task.name()));
            map.save(&p)?;
            written.push(p);
        }
        let p = out.join(format!("frame_{i:05}_collage.ppm"));
        collage(&frame.images, &pred.maps).save(&p)?;
        written.push(p);
    }
    Ok(written)
}
