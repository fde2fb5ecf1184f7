//! Attention-based and convolution-based BEV map heads.

use std::fmt;
use std::str::FromStr;

use crate::attention::MultiHeadAttention;
use crate::diff::{Graph, Init, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv, LayerNorm};
use crate::scalar::Scalar;

pub const HEAD_DROPOUT: f64 = 0.1;
pub const ATTN_HEAD_MODULES: usize = 3;
pub const CONV_UPSAMPLE_BLOCKS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Task {
    Height,
    Segmentation,
}

impl Task {
    pub fn classes(self) -> usize {
        match self {
            Task::Height => 3,
            Task::Segmentation => 5,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Height => "height",
            Task::Segmentation => "segmentation",
        }
    }

    /// Class excluded from frequency weighting.
    pub fn background(self) -> usize {
        0
    }

    pub fn class_names(self) -> &'static [&'static str] {
        match self {
            Task::Height => &["below", "at", "above"],
            Task::Segmentation => &["ground", "car", "bus", "ev_charger", "non_driveable"],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskMode {
    Height,
    Segmentation,
    Multitask,
}

impl TaskMode {
    pub fn tasks(self) -> &'static [Task] {
        match self {
            TaskMode::Height => &[Task::Height],
            TaskMode::Segmentation => &[Task::Segmentation],
            TaskMode::Multitask => &[Task::Height, Task::Segmentation],
        }
    }
}

impl FromStr for TaskMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "height" => Ok(TaskMode::Height),
            "segmentation" | "seg" => Ok(TaskMode::Segmentation),
            "multitask" | "multi" => Ok(TaskMode::Multitask),
            _ => Err(Error::InvalidArgument(format!("unknown task {s:?} (height, segmentation, multitask)"))),
        }
    }
}

impl fmt::Display for TaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskMode::Height => "height",
            TaskMode::Segmentation => "segmentation",
            TaskMode::Multitask => "multitask",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    Attn,
    Conv,
}

impl FromStr for HeadKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attn" => Ok(HeadKind::Attn),
            "conv" => Ok(HeadKind::Conv),
            _ => Err(Error::InvalidArgument(format!("unknown head {s:?} (attn, conv)"))),
        }
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadKind::Attn => "attn",
            HeadKind::Conv => "conv",
        })
    }
}

/// Logits of one task. Attention heads list every module's map in `aux`
/// (the last one equals `logits`); conv heads leave it empty.
#[derive(Clone, Debug)]
pub struct HeadOutput {
    pub task: Task,
    pub logits: Var,
    pub aux: Vec<Var>,
}

impl HeadOutput {
    /// Maps that receive a loss: every attention module, or the single conv output.
    pub fn supervised(&self) -> Vec<Var> {
        if self.aux.is_empty() {
            vec![self.logits]
        } else {
            self.aux.clone()
        }
    }
}

/// Learnable class queries refined through stacked multi-head attention over
/// the BEV features; each module's head-averaged scores are class logits.
#[derive(Clone, Debug)]
pub struct AttnHead {
    pub task: Task,
    pub queries: ParamId,
    pub modules: Vec<MultiHeadAttention>,
    pub norms: Vec<LayerNorm>,
}

impl AttnHead {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, task: Task, d: usize, n_heads: usize) -> Result<Self> {
        let queries = store.add(format!("{name}.queries"), &[task.classes(), d], Init::Normal { std: 0.02 })?;
        let mut modules = Vec::new();
        let mut norms = Vec::new();
        for m in 0..ATTN_HEAD_MODULES {
            modules.push(MultiHeadAttention::new(store, &format!("{name}.mha{m}"), d, n_heads)?);
            norms.push(LayerNorm::new(store, &format!("{name}.norm{m}"), d)?);
        }
        Ok(Self { task, queries, modules, norms })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, bev: Var, h: usize, w: usize) -> Result<HeadOutput> {
        check_bev(g, bev, h, w)?;
        let c = self.task.classes();
        let mut q = g.param(store, self.queries);
        let mut aux = Vec::with_capacity(self.modules.len());
        for (mha, norm) in self.modules.iter().zip(&self.norms) {
            let out = mha.forward(g, store, q, bev, bev)?;
            aux.push(g.reshape(out.logits, &[c, h, w])?);
            let r = g.add(q, out.output)?;
            q = norm.forward(g, store, r)?;
        }
        Ok(HeadOutput {
            task: self.task,
            logits: *aux.last().expect("at least one module"),
            aux,
        })
    }
}

fn check_bev<T: Scalar>(g: &Graph<T>, bev: Var, h: usize, w: usize) -> Result<()> {
    let s = g.shape(bev);
    if s.len() != 2 || s[0] != h * w {
        return Err(Error::shape("head input", format!("[{}, d]", h * w), format!("{s:?}")));
    }
    Ok(())
}

/// Widths of the three upsampling blocks for feature width `d`.
pub fn conv_widths(d: usize) -> [usize; 3] {
    [(d / 2).max(8), (d / 4).max(8), (d / 4).max(8)]
}

/// Three `upsample 2x -> dropout -> conv3x3 -> relu` blocks.
#[derive(Clone, Debug)]
pub struct UpsampleTrunk {
    pub convs: Vec<Conv>,
}

impl UpsampleTrunk {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize) -> Result<Self> {
        let widths = conv_widths(d);
        let mut c_in = d;
        let mut convs = Vec::new();
        for (i, &c_out) in widths.iter().enumerate() {
            convs.push(Conv::new(store, &format!("{name}.up{i}"), c_in, c_out, 3, 1)?);
            c_in = c_out;
        }
        Ok(Self { convs })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, bev: Var, h: usize, w: usize) -> Result<Var> {
        check_bev(g, bev, h, w)?;
        let d = g.shape(bev)[1];
        let t = g.transpose(bev)?;
        let mut x = g.reshape(t, &[d, h, w])?;
        for conv in &self.convs {
            let u = g.upsample2x(x)?;
            let u = g.dropout(u, HEAD_DROPOUT);
            let c = conv.forward(g, store, u)?;
            x = g.relu(c);
        }
        Ok(x)
    }
}

/// Upsampling trunk followed by one 3x3 prediction conv per task.
#[derive(Clone, Debug)]
pub struct ConvHead {
    pub trunk: UpsampleTrunk,
    pub predict: Vec<(Task, Conv)>,
}

impl ConvHead {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, tasks: &[Task], d: usize) -> Result<Self> {
        let trunk = UpsampleTrunk::new(store, &format!("{name}.trunk"), d)?;
        let c = conv_widths(d)[2];
        let predict = tasks
            .iter()
            .map(|&t| Ok((t, Conv::new(store, &format!("{name}.predict.{}", t.name()), c, t.classes(), 3, 1)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { trunk, predict })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, bev: Var, h: usize, w: usize) -> Result<Vec<HeadOutput>> {
        let x = self.trunk.forward(g, store, bev, h, w)?;
        self.predict
            .iter()
            .map(|(task, conv)| {
                Ok(HeadOutput {
                    task: *task,
                    logits: conv.forward(g, store, x)?,
                    aux: Vec::new(),
                })
            })
            .collect()
    }
}

/// Any of the four head variants.
#[derive(Clone, Debug)]
pub enum Head {
    Attn(Vec<AttnHead>),
    Conv(ConvHead),
}

impl Head {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, kind: HeadKind, mode: TaskMode, d: usize, n_heads: usize) -> Result<Self> {
        Ok(match kind {
            HeadKind::Attn => Head::Attn(
                mode.tasks()
                    .iter()
                    .map(|&t| AttnHead::new(store, &format!("head.{}", t.name()), t, d, n_heads))
                    .collect::<Result<_>>()?,
            ),
            HeadKind::Conv => Head::Conv(ConvHead::new(store, "head", mode.tasks(), d)?),
        })
    }

    pub fn kind(&self) -> HeadKind {
        match self {
            Head::Attn(_) => HeadKind::Attn,
            Head::Conv(_) => HeadKind::Conv,
        }
    }

    /// Output resolution multiplier relative to the grid.
    pub fn scale(&self) -> usize {
        match self {
            Head::Attn(_) => 1,
            Head::Conv(_) => 1 << CONV_UPSAMPLE_BLOCKS,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, bev: Var, h: usize, w: usize) -> Result<Vec<HeadOutput>> {
        match self {
            Head::Attn(heads) => heads.iter().map(|hd| hd.forward(g, store, bev, h, w)).collect(),
            Head::Conv(c) => c.forward(g, store, bev, h, w),
        }
    }
}
