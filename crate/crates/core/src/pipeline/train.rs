use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diff::{Graph, Sgd, Var};
use crate::encoder::BevState;
use crate::error::{Error, Result};
use crate::metrics::{cross_entropy, focal_loss};
use crate::pipeline::config::{RunConfig, TrainConfig};
use crate::pipeline::dataset::{split_range, Frame, Sequence, Split};
use crate::pipeline::eval::evaluate;
use crate::pipeline::model::{frame_tensors, Model};
use crate::scalar::Scalar;

/// Consecutive frames of one sequence, in temporal order.
#[derive(Clone, Debug)]
pub struct Chunk {
    pub sequence: String,
    pub bev_scale: usize,
    pub frames: Vec<Frame>,
}

/// Loads the `split` chunk of every sequence.
pub fn load_chunks(sequences: &[Sequence], split: Split) -> Result<Vec<Chunk>> {
    sequences
        .iter()
        .filter_map(|s| {
            let r = split_range(s.len(), split);
            if r.is_empty() {
                return None;
            }
            Some(r.map(|i| s.load_frame(i)).collect::<Result<Vec<_>>>().map(|frames| Chunk {
                sequence: s.id.clone(),
                bev_scale: s.meta.bev_scale,
                frames,
            }))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub phase: &'static str,
    pub loss: f64,
    pub sequence: String,
    pub frame: usize,
    pub history: bool,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub steps: usize,
    pub log: Vec<StepLog>,
    /// Mean IoU per task on the training chunks at the last evaluation.
    pub train_iou: Vec<(String, f64)>,
    pub reached_target: bool,
}

/// Summed task losses of one frame; attention heads supervise every module.
pub fn frame_loss<T: Scalar>(
    g: &mut Graph<T>,
    model: &Model<T>,
    frame: &Frame,
    bev_scale: usize,
    history: Option<(&crate::diff::Tensor<T>, &[bool])>,
    focal_gamma: Option<f64>,
) -> Result<(Var, Var)> {
    let (bev, outs) = model.forward(g, &frame_tensors(frame), history)?;
    let mut task_losses = Vec::new();
    for o in &outs {
        let target = model.target(frame, o.task, bev_scale)?;
        let maps = o.supervised();
        let mut terms = Vec::with_capacity(maps.len());
        for m in &maps {
            terms.push(match focal_gamma {
                Some(gm) => focal_loss(g, *m, &target, gm)?,
                None => cross_entropy(g, *m, &target)?,
            });
        }
        let s = g.add_n(&terms)?;
        task_losses.push(g.scale(s, T::of(1.0 / maps.len() as f64)));
    }
    Ok((g.add_n(&task_losses)?, bev))
}

/// SGD with momentum, cross-entropy first and focal loss after. Frames keep
/// their temporal order within a chunk; each epoch shuffles the chunk order. The aligned previous BEV map is dropped with probability
/// `history_dropout`. With `out`, writes `config.txt`, `loss.csv` and
/// checkpoints there.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    chunks: &[Chunk],
    cfg: &TrainConfig,
    out: Option<&Path>,
    mut on_log: impl FnMut(&StepLog),
) -> Result<TrainReport> {
    let epoch_len: usize = chunks.iter().map(|c| c.frames.len()).sum();
    if epoch_len == 0 {
        return Err(Error::Dataset("no training frames".into()));
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let run = RunConfig {
            model: model.config.clone(),
            train: cfg.clone(),
        };
        fs::write(dir.join("config.txt"), run.to_text()).map_err(|e| Error::io(dir.join("config.txt"), e))?;
    }
    let mut sgd = Sgd::new(cfg.lr, cfg.momentum);
    if cfg.clip_norm > 0.0 {
        sgd = sgd.with_clip(cfg.clip_norm);
    }
    let seed = model.config.seed;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7EA1_11FE);
    let mut prev: Option<BevState<T>> = None;
    let mut log = Vec::new();
    let mut csv = String::from("step,phase,loss,sequence,frame,history\n");
    let mut train_iou = Vec::new();
    let mut reached_target = false;
    let mut steps = 0;
    let mut order: Vec<(usize, usize)> = Vec::with_capacity(epoch_len);
    for step in 0..cfg.total_steps() {
        if step % epoch_len == 0 {
            let mut perm: Vec<usize> = (0..chunks.len()).collect();
            perm.shuffle(&mut rng);
            order = perm.iter().flat_map(|&c| (0..chunks[c].frames.len()).map(move |f| (c, f))).collect();
        }
        let (ci, fi) = order[step % epoch_len];
        let chunk = &chunks[ci];
        let frame = &chunk.frames[fi];
        if fi == 0 {
            prev = None;
        }
        let keep = rng.random::<f64>() >= cfg.history_dropout;
        let hist = match &prev {
            Some(p) if keep => Some(model.encoder.align(p, &crate::bev::EgoMotion::from_poses(&p.pose, &frame.pose))?),
            _ => None,
        };
        let focal = step >= cfg.ce_steps;
        let mut g = Graph::training(seed.wrapping_add(step as u64));
        let (loss, bev) = frame_loss(
            &mut g,
            model,
            frame,
            chunk.bev_scale,
            hist.as_ref().map(|(t, v)| (t, v.as_slice())),
            focal.then_some(cfg.focal_gamma),
        )?;
        let lv = g.value(loss).data()[0].as_f64();
        if !lv.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                detail: format!("{} frame {}", chunk.sequence, frame.index),
            });
        }
        g.backward(loss)?;
        g.accumulate_param_grads(&mut model.store);
        sgd.step(&mut model.store);
        prev = Some(BevState {
            features: g.value(bev).clone(),
            frame: frame.index,
            pose: frame.pose,
        });
        steps = step + 1;
        let entry = StepLog {
            step,
            phase: if focal { "focal" } else { "ce" },
            loss: lv,
            sequence: chunk.sequence.clone(),
            frame: frame.index,
            history: hist.is_some(),
        };
        let _ = writeln!(csv, "{},{},{:.6},{},{},{}", step, entry.phase, lv, entry.sequence, entry.frame, entry.history as u8);
        if cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == cfg.total_steps()) {
            on_log(&entry);
        }
        log.push(entry);
        if let Some(dir) = out {
            if cfg.checkpoint_every > 0 && steps % cfg.checkpoint_every == 0 {
                model.save_checkpoint(&dir.join(format!("step_{steps:06}.ckpt")))?;
            }
        }
        if cfg.eval_every > 0 && steps % cfg.eval_every == 0 {
            let res = evaluate(model, chunks, true)?;
            train_iou = res.mean_iou();
            if train_iou.iter().all(|(_, v)| *v >= cfg.target_iou) {
                reached_target = true;
                break;
            }
        }
    }
    if let Some(dir) = out {
        model.save_checkpoint(&dir.join("model.ckpt"))?;
        fs::write(dir.join("loss.csv"), csv).map_err(|e| Error::io(dir.join("loss.csv"), e))?;
    }
    Ok(TrainReport {
        steps,
        log,
        train_iou,
        reached_target,
    })
}
