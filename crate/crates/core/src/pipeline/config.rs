//! `key = value` configuration for models and training runs.

use std::fmt;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::bev::{BevGrid, DEFAULT_ANCHORS};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::heads::{HeadKind, TaskMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    Single,
    Double,
}

impl FromStr for Precision {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" | "f32" => Ok(Precision::Single),
            "double" | "f64" => Ok(Precision::Double),
            _ => Err(Error::InvalidArgument(format!("unknown precision {s:?} (single, double)"))),
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::Single => "single",
            Precision::Double => "double",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub grid_h: usize,
    pub grid_w: usize,
    pub cell_size: f64,
    pub anchors: Vec<f64>,
    pub d: usize,
    pub blocks: usize,
    pub heads: usize,
    pub points: usize,
    pub ffn_hidden: usize,
    pub backbone: [usize; 3],
    pub head: HeadKind,
    pub task: TaskMode,
    pub precision: Precision,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            grid_h: 16,
            grid_w: 16,
            cell_size: 0.5,
            anchors: DEFAULT_ANCHORS.to_vec(),
            d: 32,
            blocks: 3,
            heads: 4,
            points: 4,
            ffn_hidden: 64,
            backbone: [16, 32, 32],
            head: HeadKind::Conv,
            task: TaskMode::Multitask,
            precision: Precision::Single,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn grid(&self) -> Result<BevGrid> {
        BevGrid::new(self.grid_h, self.grid_w, self.cell_size, self.anchors.clone(), self.d)
    }

    pub fn encoder(&self) -> Result<EncoderConfig> {
        let cfg = EncoderConfig {
            n_blocks: self.blocks,
            ffn_hidden: self.ffn_hidden,
            n_heads: self.heads,
            n_points: self.points,
            backbone: self.backbone,
            ..EncoderConfig::new(self.grid()?)
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    /// Cross-entropy steps, followed by `focal_steps` focal-loss steps.
    pub ce_steps: usize,
    pub focal_steps: usize,
    pub focal_gamma: f64,
    pub history_dropout: f64,
    /// Global gradient-norm clip; 0 disables it.
    pub clip_norm: f64,
    pub log_every: usize,
    pub checkpoint_every: usize,
    /// Evaluate on the training frames every this many steps and stop once
    /// every task reaches `target_iou`; 0 disables it.
    pub eval_every: usize,
    pub target_iou: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.02,
            momentum: 0.9,
            ce_steps: 2000,
            focal_steps: 1000,
            focal_gamma: 2.0,
            history_dropout: 0.25,
            clip_norm: 5.0,
            log_every: 10,
            checkpoint_every: 500,
            eval_every: 0,
            target_iou: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn total_steps(&self) -> usize {
        self.ce_steps + self.focal_steps
    }
}

/// A model plus how to train it; parsed from one `key = value` file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn list<T: FromStr>(v: &str) -> std::result::Result<Vec<T>, T::Err> {
    v.split(',').map(|s| s.trim().parse()).collect()
}

impl RunConfig {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut c = Self::default();
        let mut ffn_set = false;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                msg,
            };
            let (k, v) = line.split_once('=').ok_or_else(|| err(format!("expected `key = value`, got {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            macro_rules! num {
                () => {
                    v.parse().map_err(|e| err(format!("{k}: {e}")))?
                };
            }
            let m = &mut c.model;
            let t = &mut c.train;
            match k {
                "grid_h" => m.grid_h = num!(),
                "grid_w" => m.grid_w = num!(),
                "cell_size" => m.cell_size = num!(),
                "anchors" => m.anchors = list(v).map_err(|e| err(format!("{k}: {e}")))?,
                "d" => m.d = num!(),
                "blocks" => m.blocks = num!(),
                "heads" => m.heads = num!(),
                "points" => m.points = num!(),
                "ffn_hidden" => {
                    m.ffn_hidden = num!();
                    ffn_set = true;
                }
                "backbone" => {
                    let b: Vec<usize> = list(v).map_err(|e| err(format!("{k}: {e}")))?;
                    m.backbone = b.try_into().map_err(|_| err("backbone needs three widths".into()))?;
                }
                "head" => m.head = v.parse().map_err(|e: Error| err(e.to_string()))?,
                "task" => m.task = v.parse().map_err(|e: Error| err(e.to_string()))?,
                "precision" => m.precision = v.parse().map_err(|e: Error| err(e.to_string()))?,
                "seed" => m.seed = num!(),
                "lr" => t.lr = num!(),
                "momentum" => t.momentum = num!(),
                "ce_steps" => t.ce_steps = num!(),
                "focal_steps" => t.focal_steps = num!(),
                "focal_gamma" => t.focal_gamma = num!(),
                "history_dropout" => t.history_dropout = num!(),
                "clip_norm" => t.clip_norm = num!(),
                "log_every" => t.log_every = num!(),
                "checkpoint_every" => t.checkpoint_every = num!(),
                "eval_every" => t.eval_every = num!(),
                "target_iou" => t.target_iou = num!(),
                _ => return Err(err(format!("unknown key {k:?}"))),
            }
        }
        if !ffn_set {
            c.model.ffn_hidden = 2 * c.model.d;
        }
        c.model.encoder()?;
        if !(0.0..=1.0).contains(&c.train.history_dropout) {
            return Err(Error::InvalidArgument(format!("history_dropout must lie in [0, 1], got {}", c.train.history_dropout)));
        }
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn to_text(&self) -> String {
        let (m, t) = (&self.model, &self.train);
        let join = |v: &[String]| v.join(",");
        let mut s = String::new();
        let _ = writeln!(s, "grid_h = {}", m.grid_h);
        let _ = writeln!(s, "grid_w = {}", m.grid_w);
        let _ = writeln!(s, "cell_size = {}", m.cell_size);
        let _ = writeln!(s, "anchors = {}", join(&m.anchors.iter().map(|a| a.to_string()).collect::<Vec<_>>()));
        let _ = writeln!(s, "d = {}", m.d);
        let _ = writeln!(s, "blocks = {}", m.blocks);
        let _ = writeln!(s, "heads = {}", m.heads);
        let _ = writeln!(s, "points = {}", m.points);
        let _ = writeln!(s, "ffn_hidden = {}", m.ffn_hidden);
        let _ = writeln!(s, "backbone = {}", join(&m.backbone.iter().map(|a| a.to_string()).collect::<Vec<_>>()));
        let _ = writeln!(s, "head = {}", m.head);
        let _ = writeln!(s, "task = {}", m.task);
        let _ = writeln!(s, "precision = {}", m.precision);
        let _ = writeln!(s, "seed = {}", m.seed);
        let _ = writeln!(s, "lr = {}", t.lr);
        let _ = writeln!(s, "momentum = {}", t.momentum);
        let _ = writeln!(s, "ce_steps = {}", t.ce_steps);
        let _ = writeln!(s, "focal_steps = {}", t.focal_steps);
        let _ = writeln!(s, "focal_gamma = {}", t.focal_gamma);
        let _ = writeln!(s, "history_dropout = {}", t.history_dropout);
        let _ = writeln!(s, "clip_norm = {}", t.clip_norm);
        let _ = writeln!(s, "log_every = {}", t.log_every);
        let _ = writeln!(s, "checkpoint_every = {}", t.checkpoint_every);
        let _ = writeln!(s, "eval_every = {}", t.eval_every);
        let _ = writeln!(s, "target_iou = {}", t.target_iou);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_errors() {
        let p = Path::new("run.cfg");
        let c = RunConfig::parse("d = 16\nhead = attn # comment\ntask = height\nanchors = 0, 1.5\n", p).unwrap();
        assert_eq!(c.model.d, 16);
        assert_eq!(c.model.ffn_hidden, 32);
        assert_eq!(c.model.head, HeadKind::Attn);
        assert_eq!(c.model.anchors, vec![0.0, 1.5]);
        assert_eq!(RunConfig::parse(&c.to_text(), p).unwrap(), c);
        assert!(matches!(RunConfig::parse("bogus = 1", p), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(RunConfig::parse("\nd = x", p), Err(Error::Parse { line: 2, .. })));
        assert!(RunConfig::parse("d = 30", p).is_err());
    }
}
