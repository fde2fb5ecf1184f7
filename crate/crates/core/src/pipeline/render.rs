use std::path::{Path, PathBuf};

use crate::bev::BevGrid;
use crate::error::Result;
use crate::pipeline::dataset::{write_sequence, SequenceMeta};
use crate::synth::{generate_sequence, Palette, RigConfig, SceneConfig, SequenceConfig};

#[derive(Clone, Debug)]
pub struct RenderOptions {
    pub sequences: usize,
    pub frames: usize,
    pub seed: u64,
    pub grid: BevGrid,
    pub bev_scale: usize,
    pub rig: RigConfig,
    pub scene: SceneConfig,
    pub palette: Palette,
}

/// Renders `sequences` drives, sequence `i` seeded with `seed + i`.
pub fn render_dataset(root: &Path, opts: &RenderOptions) -> Result<Vec<PathBuf>> {
    let cameras = opts.rig.build()?;
    (0..opts.sequences)
        .map(|i| {
            let seed = opts.seed + i as u64;
            let cfg = SequenceConfig {
                bev_scale: opts.bev_scale,
                scene: opts.scene.clone(),
                palette: opts.palette.clone(),
                ..SequenceConfig::new(seed, opts.frames)
            };
            let (_, frames) = generate_sequence(&cfg, &opts.grid, &cameras)?;
            let meta = SequenceMeta {
                grid_h: opts.grid.h,
                grid_w: opts.grid.w,
                cell_size: opts.grid.l,
                bev_scale: opts.bev_scale,
                n_frames: frames.len(),
                n_cameras: cameras.len(),
                seed,
            };
            write_sequence(root, i, &cameras, &frames, &meta)
        })
        .collect()
}
