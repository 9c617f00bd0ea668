//! Class-incremental training and evaluation.
//!
//! Each task introduces a disjoint set of classes. The model head holds one
//! column per seen class, in the order tasks introduced them; training and
//! evaluation both use a softmax over all seen classes.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{shuffled_indices, Dataset};
use crate::error::{invalid, Error, Result};
use crate::losses::{LossKind, LossSpec};
use crate::mdp::{argmax_rows, mean_entropy};
use crate::model::MlpPolicy;
use crate::optim::{Optimizer, OptimizerSpec};
use crate::rng::{stream, Stream};
use crate::schedule::AnnealState;
use crate::tensor::{softmax_rows, Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Task {
    pub classes: Vec<usize>,
    /// Row indices into the train split.
    pub train: Vec<usize>,
    /// Row indices into the test split.
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSequence {
    tasks: Vec<Task>,
}

impl TaskSequence {
    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Classes of tasks `0..=upto` in head-column order.
    pub fn seen_classes(&self, upto: usize) -> Vec<usize> {
        self.tasks[..=upto].iter().flat_map(|t| t.classes.iter().copied()).collect()
    }
}

/// Shuffles `classes` with the seed's split stream and cuts the result into
/// `n_tasks` contiguous chunks of `len / n_tasks`; the remainder goes to the
/// last chunk.
pub fn split_classes(classes: &[usize], n_tasks: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if n_tasks == 0 || n_tasks > classes.len() {
        return Err(invalid(format!("cannot split {} classes into {n_tasks} tasks", classes.len())));
    }
    let mut sorted = classes.to_vec();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(invalid("duplicate class ids"));
    }
    let mut order = classes.to_vec();
    order.shuffle(&mut stream(seed, Stream::Split));
    let chunk = order.len() / n_tasks;
    Ok((0..n_tasks)
        .map(|t| {
            let end = if t + 1 == n_tasks { order.len() } else { (t + 1) * chunk };
            order[t * chunk..end].to_vec()
        })
        .collect())
}

/// Builds a task sequence over `classes` and attaches each task's train and
/// test rows.
pub fn split_tasks(train: &Dataset, test: &Dataset, classes: &[usize], n_tasks: usize, seed: u64) -> Result<TaskSequence> {
    if let Some(&c) = classes.iter().find(|&&c| c >= train.num_classes) {
        return Err(Error::LabelOutOfRange {
            label: c,
            classes: train.num_classes,
        });
    }
    let tasks = split_classes(classes, n_tasks, seed)?
        .into_iter()
        .map(|cls| Task {
            train: train.indices_of(&cls),
            test: test.indices_of(&cls),
            classes: cls,
        })
        .collect::<Vec<_>>();
    if let Some(t) = tasks.iter().find(|t| t.train.is_empty() || t.test.is_empty()) {
        return Err(invalid(format!("classes {:?} have no train or test samples", t.classes)));
    }
    Ok(TaskSequence { tasks })
}

/// Lower-triangular accuracies: `after_task[j][i]` is `a_{i,j}`, the test
/// accuracy on task `i` after training task `j`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    after_task: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = Self::new();
        for r in rows {
            m.push(r)?;
        }
        Ok(m)
    }

    /// Appends the accuracies measured after the next task.
    pub fn push(&mut self, column: Vec<f64>) -> Result<()> {
        let j = self.after_task.len();
        if column.len() != j + 1 {
            return Err(invalid(format!("after task {j} expected {} accuracies, got {}", j + 1, column.len())));
        }
        if let Some(a) = column.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(invalid(format!("accuracy {a} outside [0, 1]")));
        }
        self.after_task.push(column);
        Ok(())
    }

    pub fn num_tasks(&self) -> usize {
        self.after_task.len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.after_task
    }

    /// `a_{i,j}` for `i <= j`.
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.after_task.get(j)?.get(i).copied()
    }
}

/// Summary of a complete accuracy matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// `A_T`: mean accuracy over all tasks after the last one.
    pub final_accuracy: f64,
    /// `Ã_T`: mean of `A_t` over `t = 1..=T`.
    pub average_accuracy: f64,
    /// `a_{i,T}` for every task.
    pub final_per_task: Vec<f64>,
    /// Diagnostic, not part of the headline metrics: `max_{j<T} a_{i,j} - a_{i,T}`
    /// for every task but the last.
    pub forgetting: Vec<f64>,
}

/// Metrics of a matrix that must cover exactly `n_tasks` tasks.
pub fn metrics(m: &AccuracyMatrix, n_tasks: usize) -> Result<Metrics> {
    if n_tasks == 0 || m.num_tasks() != n_tasks {
        return Err(invalid(format!(
            "accuracy matrix covers {} of {n_tasks} tasks",
            m.num_tasks()
        )));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let per_t: Vec<f64> = m.after_task.iter().map(|r| mean(r)).collect();
    let last = &m.after_task[n_tasks - 1];
    let forgetting = (0..n_tasks - 1)
        .map(|i| {
            let best = (i..n_tasks - 1).map(|j| m.after_task[j][i]).fold(f64::NEG_INFINITY, f64::max);
            best - last[i]
        })
        .collect();
    Ok(Metrics {
        final_accuracy: per_t[n_tasks - 1],
        average_accuracy: mean(&per_t),
        final_per_task: last.clone(),
        forgetting,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub task: usize,
    pub epoch: usize,
    /// Annealing coefficient used at this step; aEPG only.
    pub alpha: Option<f64>,
    pub loss: f64,
    /// Mean softmax entropy of the batch before the update.
    pub entropy: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunTrace {
    pub steps: Vec<StepRecord>,
    pub accuracy: AccuracyMatrix,
}

impl RunTrace {
    /// Mean entropy over the last `n` recorded steps of `task`.
    pub fn tail_entropy(&self, task: usize, n: usize) -> Option<f64> {
        let rows: Vec<f64> = self.steps.iter().filter(|s| s.task == task).map(|s| s.entropy).collect();
        let tail = &rows[rows.len().saturating_sub(n)..];
        (!tail.is_empty()).then(|| tail.iter().sum::<f64>() / tail.len() as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSettings {
    pub loss: LossSpec,
    pub optimizer: OptimizerSpec,
    pub epochs: usize,
    pub batch_size: usize,
    /// The trunk stays frozen for epochs `0..freeze_epochs`.
    pub freeze_epochs: usize,
}

impl TrainSettings {
    /// Optimizer steps needed to train on `n` samples.
    pub fn steps_for(&self, n: usize) -> usize {
        self.epochs * n.div_ceil(self.batch_size)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(invalid("epochs and batch_size must be positive"));
        }
        if self.freeze_epochs > self.epochs {
            return Err(invalid("freeze_epochs exceeds epochs"));
        }
        self.loss.validate()?;
        self.optimizer.validate()
    }
}

/// Trains on one task. `x` holds the task's training rows and `y` their
/// head-column labels. The head must already cover every label.
///
/// Each epoch reshuffles with `batch_rng`; each step reads `α` from
/// `anneal`, then advances it. A non-finite loss aborts with the trace so
/// far, including the offending step.
#[allow(clippy::too_many_arguments)]
pub fn train_task<R: Rng + ?Sized>(
    model: &mut MlpPolicy,
    x: &Tensor,
    y: &[usize],
    task: usize,
    settings: &TrainSettings,
    anneal: &mut AnnealState,
    trace: &mut RunTrace,
    batch_rng: &mut R,
    sample_rng: &mut R,
) -> Result<()> {
    settings.validate()?;
    if x.rows() != y.len() || y.is_empty() {
        return Err(invalid(format!("{} rows but {} labels", x.rows(), y.len())));
    }
    if let Some(&c) = y.iter().find(|&&c| c >= model.num_classes()) {
        return Err(Error::LabelOutOfRange {
            label: c,
            classes: model.num_classes(),
        });
    }
    let mut opt = Optimizer::new(settings.optimizer)?;
    for epoch in 0..settings.epochs {
        model.set_freeze(epoch < settings.freeze_epochs);
        let order = shuffled_indices(y.len(), batch_rng);
        for batch in order.chunks(settings.batch_size) {
            let xb = x.select_rows(batch)?;
            let yb: Vec<usize> = batch.iter().map(|&i| y[i]).collect();
            let mut tape = Tape::new();
            let fwd = model.forward(&mut tape, &xb)?;
            let logits = tape.value(fwd.logits);
            let alpha = anneal.alpha();
            anneal.advance();
            let est = settings.loss.evaluate(logits, &yb, alpha, sample_rng)?;
            trace.steps.push(StepRecord {
                step: trace.steps.len(),
                task,
                epoch,
                alpha: (settings.loss.kind == LossKind::Aepg).then_some(alpha),
                loss: est.loss,
                entropy: mean_entropy(&softmax_rows(logits)),
            });
            if !est.loss.is_finite() || !est.grad.all_finite() {
                return Err(Error::NonFiniteLoss {
                    task,
                    step: trace.steps.len() - 1,
                    loss: est.loss,
                    trace: Box::new(trace.clone()),
                });
            }
            let grads = tape.backward_from(fwd.logits, est.grad)?;
            let grads: Vec<Option<Tensor>> = fwd.params.iter().map(|v| v.map(|v| grads.wrt(v))).collect();
            opt.step(model.params_mut(), &grads)?;
        }
    }
    Ok(())
}

/// Accuracies `a_{i,upto}` for `i <= upto`: argmax over every class seen so
/// far, scored against each task's test rows.
pub fn evaluate(model: &MlpPolicy, test: &Dataset, seq: &TaskSequence, upto: usize) -> Result<Vec<f64>> {
    if upto >= seq.len() {
        return Err(invalid(format!("task {upto} out of range")));
    }
    let seen = seq.seen_classes(upto);
    let cols: Vec<usize> = (0..seen.len()).collect();
    seq.tasks[..=upto]
        .iter()
        .map(|t| {
            let x = test.features.select_rows(&t.test)?;
            let pred = argmax_rows(&model.predict(&x, Some(&cols))?);
            let hits = pred
                .iter()
                .zip(&t.test)
                .filter(|(&p, &i)| seen[p] == test.labels[i])
                .count();
            Ok(hits as f64 / t.test.len() as f64)
        })
        .collect()
}

/// Head-column labels of `rows`, given the seen classes in column order.
pub fn column_labels(labels: &[usize], rows: &[usize], seen: &[usize]) -> Result<Vec<usize>> {
    rows.iter()
        .map(|&i| {
            seen.iter()
                .position(|&c| c == labels[i])
                .ok_or_else(|| invalid(format!("label {} is not a seen class", labels[i])))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gaussian_blobs, BlobSpec, Split};
    use crate::model::Architecture;
    use crate::schedule::{ScheduleKind, Scope};

    #[test]
    fn split_sizes_and_determinism() {
        let ten: Vec<usize> = (0..10).collect();
        let s = split_classes(&ten, 5, 3).unwrap();
        assert!(s.iter().all(|t| t.len() == 2));
        assert_eq!(s, split_classes(&ten, 5, 3).unwrap());
        let eleven: Vec<usize> = (0..11).collect();
        let sizes: Vec<usize> = split_classes(&eleven, 5, 3).unwrap().iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![2, 2, 2, 2, 3]);
        let mut all: Vec<usize> = split_classes(&eleven, 5, 9).unwrap().concat();
        all.sort_unstable();
        assert_eq!(all, eleven);
        assert!(split_classes(&ten, 11, 0).is_err());
    }

    #[test]
    fn metrics_formulas() {
        let m = AccuracyMatrix::from_rows(vec![vec![1.0], vec![0.8, 0.9]]).unwrap();
        let r = metrics(&m, 2).unwrap();
        assert_eq!(r.final_accuracy, (0.8 + 0.9) / 2.0);
        assert_eq!(r.average_accuracy, (1.0 + (0.8 + 0.9) / 2.0) / 2.0);
        assert!((r.forgetting[0] - 0.2).abs() < 1e-15);
        let one = AccuracyMatrix::from_rows(vec![vec![0.7]]).unwrap();
        let r = metrics(&one, 1).unwrap();
        assert_eq!((r.final_accuracy, r.average_accuracy), (0.7, 0.7));
        assert!(metrics(&one, 2).is_err());
        assert!(AccuracyMatrix::from_rows(vec![vec![1.0, 1.0]]).is_err());
        assert!(AccuracyMatrix::from_rows(vec![vec![1.5]]).is_err());
    }

    fn setup() -> (MlpPolicy, Dataset, Dataset, TaskSequence) {
        let spec = BlobSpec {
            num_classes: 4,
            dim: 5,
            n_per_class: 30,
            spread: 0.5,
            margin: 3.0,
        };
        let (tr, te, _) = gaussian_blobs(&spec, 1).unwrap();
        let seq = split_tasks(&tr, &te, &[0, 1, 2, 3], 2, 1).unwrap();
        let mut rng = stream(1, Stream::Init);
        let arch = Architecture {
            input_dim: 5,
            depth: 1,
            width: 8,
            adapter_rank: 0,
        };
        let mut model = MlpPolicy::new(arch, &mut rng).unwrap();
        model.init_head(2, 0.001, &mut rng).unwrap();
        (model, tr, te, seq)
    }

    fn settings(kind: LossKind, lr: f64) -> TrainSettings {
        TrainSettings {
            loss: LossSpec::new(kind),
            optimizer: OptimizerSpec::adam(lr),
            epochs: 3,
            batch_size: 16,
            freeze_epochs: 1,
        }
    }

    #[test]
    fn zero_lr_leaves_model_and_records_trace() {
        let (mut model, tr, _, seq) = setup();
        let before = model.clone();
        let t = &seq.tasks()[0];
        let x = tr.features.select_rows(&t.train).unwrap();
        let y = column_labels(&tr.labels, &t.train, &seq.seen_classes(0)).unwrap();
        let s = settings(LossKind::Ce, 0.0);
        let mut anneal = AnnealState::new(ScheduleKind::default(), Scope::PerTask, 1).unwrap();
        let mut trace = RunTrace::default();
        let (mut a, mut b) = (stream(1, Stream::Batch), stream(1, Stream::Sampling));
        train_task(&mut model, &x, &y, 0, &s, &mut anneal, &mut trace, &mut a, &mut b).unwrap();
        model.set_freeze(before.trunk_frozen());
        assert_eq!(model, before);
        assert_eq!(trace.steps.len(), s.steps_for(x.rows()));
        assert!(trace.steps.windows(2).all(|w| w[0].step < w[1].step));
        assert!(trace.steps.iter().all(|r| r.entropy >= 0.0 && r.alpha.is_none()));
    }

    #[test]
    fn aepg_alpha_endpoints_per_task() {
        let (mut model, tr, _, seq) = setup();
        let t = &seq.tasks()[0];
        let x = tr.features.select_rows(&t.train).unwrap();
        let y = column_labels(&tr.labels, &t.train, &seq.seen_classes(0)).unwrap();
        let s = settings(LossKind::Aepg, 0.01);
        let n = s.steps_for(x.rows());
        let mut anneal = AnnealState::new(ScheduleKind::Sigmoid { tau: 6.0 }, Scope::PerTask, n - 1).unwrap();
        let mut trace = RunTrace::default();
        let (mut a, mut b) = (stream(1, Stream::Batch), stream(1, Stream::Sampling));
        train_task(&mut model, &x, &y, 0, &s, &mut anneal, &mut trace, &mut a, &mut b).unwrap();
        let first = trace.steps.first().unwrap().alpha.unwrap();
        let last = trace.steps.last().unwrap().alpha.unwrap();
        assert_eq!((first * 1e4).round() / 1e4, 0.9975);
        assert_eq!((last * 1e4).round() / 1e4, 0.0025);
    }

    #[test]
    fn frozen_epochs_leave_trunk_untouched() {
        let (mut model, tr, _, seq) = setup();
        let t = &seq.tasks()[0];
        let x = tr.features.select_rows(&t.train).unwrap();
        let y = column_labels(&tr.labels, &t.train, &seq.seen_classes(0)).unwrap();
        let mut s = settings(LossKind::Ce, 0.01);
        s.freeze_epochs = s.epochs;
        let trunk = model.trunk().to_vec();
        let head = model.head().clone();
        let mut anneal = AnnealState::new(ScheduleKind::default(), Scope::PerTask, 1).unwrap();
        let mut trace = RunTrace::default();
        let (mut a, mut b) = (stream(1, Stream::Batch), stream(1, Stream::Sampling));
        train_task(&mut model, &x, &y, 0, &s, &mut anneal, &mut trace, &mut a, &mut b).unwrap();
        assert_eq!(model.trunk(), &trunk[..]);
        assert_ne!(model.head(), &head);
    }

    #[test]
    fn evaluate_is_pure_and_perfect_on_separable_single_task() {
        let (mut model, tr, te, seq) = setup();
        let t = &seq.tasks()[0];
        let x = tr.features.select_rows(&t.train).unwrap();
        let y = column_labels(&tr.labels, &t.train, &seq.seen_classes(0)).unwrap();
        let mut s = settings(LossKind::Ce, 0.05);
        s.epochs = 30;
        s.freeze_epochs = 0;
        let mut anneal = AnnealState::new(ScheduleKind::default(), Scope::PerTask, 1).unwrap();
        let mut trace = RunTrace::default();
        let (mut a, mut b) = (stream(1, Stream::Batch), stream(1, Stream::Sampling));
        train_task(&mut model, &x, &y, 0, &s, &mut anneal, &mut trace, &mut a, &mut b).unwrap();
        let col = evaluate(&model, &te, &seq, 0).unwrap();
        assert_eq!(col, vec![1.0]);
        assert_eq!(col, evaluate(&model, &te, &seq, 0).unwrap());
        assert_eq!(te.split, Split::Test);
        assert!(trace.tail_entropy(0, 5).unwrap() < trace.steps[0].entropy);
    }

    #[test]
    fn untrained_model_scores_chance() {
        // Blob means collapse to the origin, so features carry no label
        // information and predictions are independent of the labels.
        let spec = BlobSpec {
            num_classes: 4,
            dim: 5,
            n_per_class: 1000,
            spread: 1.0,
            margin: 1e-9,
        };
        let (tr, te, _) = gaussian_blobs(&spec, 2).unwrap();
        let seq = split_tasks(&tr, &te, &[0, 1, 2, 3], 1, 2).unwrap();
        let mut rng = stream(2, Stream::Init);
        let arch = Architecture {
            input_dim: 5,
            depth: 2,
            width: 16,
            adapter_rank: 0,
        };
        let mut model = MlpPolicy::new(arch, &mut rng).unwrap();
        model.init_head(4, 0.001, &mut rng).unwrap();
        let acc = evaluate(&model, &te, &seq, 0).unwrap()[0];
        let sigma = (0.25 * 0.75 / te.len() as f64).sqrt();
        assert!((acc - 0.25).abs() < 3.0 * sigma, "{acc}");
    }
}
