use crate::bev::{EgoMotion, ReferencePointTable};
use crate::camera::FisheyeCamera;
use crate::diff::{checkpoint, Graph, ParamStore, Tensor, Var};
use crate::encoder::{image_tensor, BevState, Encoder};
use crate::error::{Error, Result};
use crate::heads::{Head, HeadOutput, Task};
use crate::metrics::{argmax_map, downscale_nearest, ClassMap};
use crate::pipeline::config::ModelConfig;
use crate::pipeline::dataset::Frame;
use crate::scalar::Scalar;

/// Encoder, head, their parameters and the reference-point table of one rig.
#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub encoder: Encoder,
    pub head: Head,
    pub table: ReferencePointTable,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, cameras: &[FisheyeCamera<f64>]) -> Result<Self> {
        let mut store = ParamStore::new(config.seed);
        let enc_cfg = config.encoder()?;
        let table = ReferencePointTable::build(&enc_cfg.grid, cameras)?;
        let encoder = Encoder::new(&mut store, enc_cfg)?;
        let head = Head::new(&mut store, config.head, config.task, config.d, config.heads)?;
        Ok(Self {
            config,
            store,
            encoder,
            head,
            table,
        })
    }

    pub fn load_checkpoint(&mut self, path: &std::path::Path) -> Result<()> {
        checkpoint::load_into(&mut self.store, path)
    }

    pub fn save_checkpoint(&self, path: &std::path::Path) -> Result<()> {
        checkpoint::save(&self.store, path)
    }

    /// Encodes the views of one frame and runs the head.
    pub fn forward(&self, g: &mut Graph<T>, images: &[Tensor<T>], history: Option<(&Tensor<T>, &[bool])>) -> Result<(Var, Vec<HeadOutput>)> {
        let views: Vec<Var> = images.iter().map(|t| g.constant(t.clone())).collect();
        let bev = self.encoder.forward(g, &self.store, &views, history, &self.table)?;
        let grid = &self.encoder.cfg.grid;
        let outs = self.head.forward(g, &self.store, bev, grid.h, grid.w)?;
        Ok((bev, outs))
    }

    /// Ground truth resampled to the head's output resolution.
    pub fn target(&self, frame: &Frame, task: Task, bev_scale: usize) -> Result<ClassMap> {
        let s = self.head.scale();
        let map = frame.target(task);
        if bev_scale == s {
            return Ok(map.clone());
        }
        if bev_scale % s != 0 {
            return Err(Error::Dataset(format!("ground truth at {bev_scale}x cannot feed a {s}x head")));
        }
        downscale_nearest(map, bev_scale / s)
    }
}

pub fn frame_tensors<T: Scalar>(frame: &Frame) -> Vec<Tensor<T>> {
    frame.images.iter().map(image_tensor).collect()
}

/// Per-task class maps of one frame.
#[derive(Clone, Debug)]
pub struct Prediction<T> {
    pub maps: Vec<(Task, ClassMap)>,
    pub logits: Vec<(Task, Tensor<T>)>,
    pub state: BevState<T>,
}

/// Runs a model frame by frame, carrying the aligned BEV history.
pub struct Runner<'a, T: Scalar> {
    pub model: &'a Model<T>,
    pub use_history: bool,
    prev: Option<BevState<T>>,
}

impl<'a, T: Scalar> Runner<'a, T> {
    pub fn new(model: &'a Model<T>, use_history: bool) -> Self {
        Self {
            model,
            use_history,
            prev: None,
        }
    }

    pub fn reset(&mut self) {
        self.prev = None;
    }

    /// History for `frame` aligned from the previous state, if any.
    pub fn history(&self, frame: &Frame) -> Result<Option<(Tensor<T>, Vec<bool>)>> {
        match (&self.prev, self.use_history) {
            (Some(p), true) => Ok(Some(self.model.encoder.align(p, &EgoMotion::from_poses(&p.pose, &frame.pose))?)),
            _ => Ok(None),
        }
    }

    pub fn step(&mut self, frame: &Frame) -> Result<Prediction<T>> {
        if let Some(p) = &self.prev {
            if frame.index != p.frame + 1 {
                return Err(Error::Ordering(format!("frame {} follows frame {}", frame.index, p.frame)));
            }
        }
        let hist = self.history(frame)?;
        let mut g = Graph::new();
        let (bev, outs) = self
            .model
            .forward(&mut g, &frame_tensors(frame), hist.as_ref().map(|(t, v)| (t, v.as_slice())))?;
        let mut maps = Vec::new();
        let mut logits = Vec::new();
        for o in &outs {
            let v = g.value(o.logits).clone();
            maps.push((o.task, argmax_map(&v)?));
            logits.push((o.task, v));
        }
        let state = BevState {
            features: g.value(bev).clone(),
            frame: frame.index,
            pose: frame.pose,
        };
        self.prev = Some(state.clone());
        Ok(Prediction { maps, logits, state })
    }
}
