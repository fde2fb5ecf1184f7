use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::heads::Task;
use crate::metrics::{ClassMap, Confusion, IoUReport};
use crate::pipeline::model::{Model, Runner};
use crate::pipeline::train::Chunk;
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct SequenceEval {
    pub sequence: String,
    pub confusion: Vec<(Task, Confusion)>,
}

/// Confusion counts per sequence and pooled over all of them.
#[derive(Clone, Debug)]
pub struct EvalResult {
    pub sequences: Vec<SequenceEval>,
    pub pooled: Vec<(Task, Confusion)>,
}

impl EvalResult {
    pub fn report(&self, task: Task) -> Option<IoUReport> {
        self.pooled.iter().find(|(t, _)| *t == task).map(|(_, c)| c.report(&[task.background()]))
    }

    pub fn mean_iou(&self) -> Vec<(String, f64)> {
        self.pooled
            .iter()
            .map(|(t, c)| (t.name().to_string(), c.report(&[t.background()]).mean))
            .collect()
    }

    /// One CSV per task, `eval_<task><suffix>.csv`, with a row per sequence
    /// and a final pooled `all` row.
    pub fn write_csv(&self, dir: &Path, suffix: &str) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut written = Vec::new();
        for (task, pooled) in &self.pooled {
            let ex = [task.background()];
            let mut s = IoUReport::csv_header(task.class_names());
            s.push('\n');
            for seq in &self.sequences {
                if let Some((_, c)) = seq.confusion.iter().find(|(t, _)| t == task) {
                    s.push_str(&c.report(&ex).csv_row(&seq.sequence, task.name()));
                    s.push('\n');
                }
            }
            s.push_str(&pooled.report(&ex).csv_row("all", task.name()));
            s.push('\n');
            let path = dir.join(format!("eval_{}{suffix}.csv", task.name()));
            fs::write(&path, s).map_err(|e| Error::io(&path, e))?;
            written.push(path);
        }
        Ok(written)
    }
}

/// Runs every chunk in temporal order and accumulates confusion counts.
pub fn evaluate<T: Scalar>(model: &Model<T>, chunks: &[Chunk], use_history: bool) -> Result<EvalResult> {
    accumulate(chunks, model.config.task.tasks(), |chunk| {
        let mut runner = Runner::new(model, use_history);
        let mut pairs = Vec::with_capacity(chunk.frames.len());
        for frame in &chunk.frames {
            let pred = runner.step(frame)?;
            let mut per_task = Vec::new();
            for (task, map) in pred.maps {
                per_task.push((map, model.target(frame, task, chunk.bev_scale)?));
            }
            pairs.push(per_task);
        }
        Ok(pairs)
    })
}

/// Scores the ground truth against itself.
pub fn evaluate_oracle(chunks: &[Chunk], tasks: &[Task]) -> Result<EvalResult> {
    accumulate(chunks, tasks, |chunk| {
        Ok(chunk
            .frames
            .iter()
            .map(|f| tasks.iter().map(|&t| (f.target(t).clone(), f.target(t).clone())).collect())
            .collect())
    })
}

/// `predict` yields, per frame, one `(prediction, target)` pair per task.
fn accumulate(chunks: &[Chunk], tasks: &[Task], mut predict: impl FnMut(&Chunk) -> Result<Vec<Vec<(ClassMap, ClassMap)>>>) -> Result<EvalResult> {
    let mut pooled: Vec<(Task, Confusion)> = tasks.iter().map(|&t| (t, Confusion::new(t.classes()))).collect();
    let mut sequences: Vec<SequenceEval> = Vec::new();
    for chunk in chunks {
        let mut conf: Vec<(Task, Confusion)> = tasks.iter().map(|&t| (t, Confusion::new(t.classes()))).collect();
        for frame in predict(chunk)? {
            for ((pred, target), (_, c)) in frame.iter().zip(conf.iter_mut()) {
                c.add(pred, target)?;
            }
        }
        for ((_, p), (_, c)) in pooled.iter_mut().zip(&conf) {
            p.merge(c);
        }
        match sequences.iter_mut().find(|s| s.sequence == chunk.sequence) {
            Some(s) => s.confusion.iter_mut().zip(&conf).for_each(|((_, a), (_, b))| a.merge(b)),
            None => sequences.push(SequenceEval {
                sequence: chunk.sequence.clone(),
                confusion: conf,
            }),
        }
    }
    Ok(EvalResult { sequences, pooled })
}
