mod common;

use std::fs;

use common::*;
use f2bev::bev::BevGrid;
use f2bev::diff::Tensor;
use f2bev::heads::{HeadKind, TaskMode};
use f2bev::pipeline::*;
use f2bev::synth::{RigConfig, SceneConfig};
use f2bev::Error;

fn small(task: TaskMode, head: HeadKind) -> ModelConfig {
    ModelConfig { grid_h: 8, grid_w: 8, cell_size: 1.0, d: 16, blocks: 1, anchors: vec![0.0, 1.0], ffn_hidden: 32, task, head, ..ModelConfig::default() }
}

fn quiet(steps: usize) -> TrainConfig {
    TrainConfig { ce_steps: steps, focal_steps: 0, log_every: 0, checkpoint_every: 0, ..TrainConfig::default() }
}

fn render(dir: &std::path::Path, cfg: &ModelConfig, sequences: usize, frames: usize) -> Vec<Sequence> {
    let opts = RenderOptions {
        sequences,
        frames,
        seed: 11,
        grid: cfg.grid().unwrap(),
        bev_scale: 8,
        rig: RigConfig::default(),
        scene: SceneConfig::default(),
        palette: Default::default(),
    };
    render_dataset(dir, &opts).unwrap();
    open_dataset(dir).unwrap()
}

#[test]
fn one_frame_loss_decreases() {
    let (cams, mut chunk) = overfit_chunk();
    chunk.frames.truncate(1);
    let mut model = Model::<f32>::new(overfit_config(TaskMode::Segmentation), &cams).unwrap();
    let r = train(&mut model, &[chunk], &quiet(200), None, |_| {}).unwrap();
    let first = r.log[0].loss;
    let last = r.log[190..].iter().map(|l| l.loss).sum::<f64>() / 10.0;
    assert!(last < 0.5 * first, "{first} -> {last}");
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small(TaskMode::Multitask, HeadKind::Attn);
    let seqs = render(&tmp.path().join("data"), &cfg, 2, 3);
    let chunks = load_chunks(&seqs, Split::All).unwrap();
    let mut bytes = Vec::new();
    for run in ["a", "b"] {
        let mut model = Model::<f32>::new(cfg.clone(), &seqs[0].cameras).unwrap();
        let out = tmp.path().join(run);
        train(&mut model, &chunks, &TrainConfig { focal_steps: 3, ..quiet(5) }, Some(&out), |_| {}).unwrap();
        bytes.push((fs::read(out.join("model.ckpt")).unwrap(), fs::read_to_string(out.join("loss.csv")).unwrap()));
    }
    assert_eq!(bytes[0], bytes[1]);
    assert_eq!(bytes[0].1.lines().count(), 9);
    assert!(bytes[0].1.contains(",focal,"));
}

#[test]
fn rendered_dataset_loads_back() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small(TaskMode::Height, HeadKind::Conv);
    let seqs = render(tmp.path(), &cfg, 2, 10);
    assert_eq!(seqs.len(), 2);
    assert_eq!(seqs[1].meta.seed, 12);
    let f = seqs[0].load_frame(4).unwrap();
    assert_eq!(f.index, 4);
    assert_eq!(f.images.len(), 4);
    assert_eq!((f.bev_seg.width, f.bev_seg.height), (64, 64));
    let train_chunks = load_chunks(&seqs, Split::Train).unwrap();
    let test_chunks = load_chunks(&seqs, Split::Test).unwrap();
    assert_eq!(train_chunks[0].frames.len(), 7);
    assert_eq!(test_chunks[0].frames.iter().map(|f| f.index).collect::<Vec<_>>(), vec![9]);
}

#[test]
fn sequences_must_be_contiguous() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small(TaskMode::Height, HeadKind::Conv);
    let seqs = render(tmp.path(), &cfg, 1, 3);
    let model = Model::<f32>::new(cfg, &seqs[0].cameras).unwrap();
    let frames = seqs[0].load_all().unwrap();
    let mut runner = Runner::new(&model, true);
    runner.step(&frames[1]).unwrap();
    assert!(matches!(runner.step(&frames[0]), Err(Error::Ordering(_))));
    let chunk = Chunk { sequence: "x".into(), bev_scale: 8, frames: vec![frames[0].clone(), frames[2].clone()] };
    assert!(matches!(evaluate(&model, &[chunk], true), Err(Error::Ordering(_))));
    fs::rename(seqs[0].dir.join("frame_00001"), seqs[0].dir.join("frame_00007")).unwrap();
    assert!(matches!(Sequence::open(&seqs[0].dir), Err(Error::Ordering(_))));
}

#[test]
fn evaluation_is_deterministic_and_oracle_is_perfect() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small(TaskMode::Multitask, HeadKind::Attn);
    let seqs = render(tmp.path(), &cfg, 1, 3);
    let chunks = load_chunks(&seqs, Split::All).unwrap();
    let model = Model::<f32>::new(cfg, &seqs[0].cameras).unwrap();
    let a = evaluate(&model, &chunks, true).unwrap();
    let b = evaluate(&model, &chunks, true).unwrap();
    assert_eq!(a.pooled, b.pooled);
    let o = evaluate_oracle(&chunks, TaskMode::Multitask.tasks()).unwrap();
    for (_, v) in o.mean_iou() {
        assert_eq!(v, 1.0);
    }
    let files = a.write_csv(tmp.path(), "").unwrap();
    let text = fs::read_to_string(&files[1]).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].starts_with("sequence,task,iou_"));
    assert!(lines[0].ends_with("mean_iou,freq_weighted_iou"));
    assert!(lines[2].starts_with("all,segmentation,"));
}

#[test]
fn inference_writes_both_maps_reproducibly() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small(TaskMode::Multitask, HeadKind::Conv);
    let seqs = render(&tmp.path().join("data"), &cfg, 1, 2);
    let model = Model::<f32>::new(cfg, &seqs[0].cameras).unwrap();
    let a = infer_sequence(&model, &seqs[0], &tmp.path().join("a"), true).unwrap();
    let b = infer_sequence(&model, &seqs[0], &tmp.path().join("b"), true).unwrap();
    assert_eq!(a.len(), 6);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap());
    }
    let h = f2bev::pnm::GrayImage::load(tmp.path().join("a/frame_00001_height.pgm")).unwrap();
    assert_eq!((h.width, h.height), (64, 64));
    assert!(h.data.iter().all(|&c| c < 3));
    assert!(tmp.path().join("a/frame_00001_segmentation.pgm").exists());
}

#[test]
fn attention_head_predicts_at_grid_resolution() {
    let (cams, chunk) = overfit_chunk();
    let cfg = ModelConfig { head: HeadKind::Attn, task: TaskMode::Segmentation, ..overfit_config(TaskMode::Segmentation) };
    let model = Model::<f32>::new(cfg, &cams).unwrap();
    let p = Runner::new(&model, true).step(&chunk.frames[0]).unwrap();
    assert_eq!((p.maps[0].1.width, p.maps[0].1.height), (16, 16));
    assert_eq!(model.target(&chunk.frames[0], p.maps[0].0, 8).unwrap().width, 16);
}

#[test]
fn non_finite_loss_aborts() {
    let (cams, chunk) = overfit_chunk();
    let mut model = Model::<f32>::new(overfit_config(TaskMode::Height), &cams).unwrap();
    let id = model.store.ids().next().unwrap();
    let shape = model.store.value(id).shape().to_vec();
    model.store.set_value(id, Tensor::full(&shape, f32::NAN)).unwrap();
    assert!(matches!(train(&mut model, &[chunk], &quiet(3), None, |_| {}), Err(Error::NonFiniteLoss { step: 0, .. })));
}

#[test]
fn dataset_grid_must_match_model() {
    let tmp = tempfile::tempdir().unwrap();
    let seqs = render(tmp.path(), &small(TaskMode::Height, HeadKind::Conv), 1, 1);
    let other = BevGrid::new(16, 16, 0.5, vec![0.0], 8).unwrap();
    assert!(seqs[0].meta.check_grid(&other).is_err());
}
