//! Config-driven runs over seeds, their output files, and sweeps.
//!
//! Per run, under `<out>/seed_<seed>/`:
//!
//! * `metrics.json`: [`RunMetrics`].
//! * `trace.csv`: `step,task,epoch,alpha,loss,entropy`, `alpha` blank for
//!   losses without a schedule.
//! * `accuracy_matrix.csv`: header `after_task,task_0,..`; row `j` holds
//!   `a_{i,j}` with cells `i > j` blank.
//!
//! Per run set, `summary.json` ([`Summary`]); per sweep, `sweep.csv`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{with_param, DatasetConfig, ExperimentConfig};
use crate::data::{gaussian_blobs, load_csv, load_idx, BlobSpec, Dataset, Split};
use crate::error::{invalid, Result};
use crate::harness::{
    column_labels, evaluate, metrics, split_tasks, train_task, AccuracyMatrix, Metrics, RunTrace, TaskSequence,
    TrainSettings,
};
use crate::losses::LossSpec;
use crate::mdp::{apply_noise, mean_entropy, NoiseChannel};
use crate::model::{Architecture, MlpPolicy};
use crate::optim::OptimizerSpec;
use crate::rng::{stream, Stream};
use crate::schedule::{AnnealState, ScheduleKind, Scope};

/// Contents of `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub seed: u64,
    #[serde(flatten)]
    pub metrics: Metrics,
    pub accuracy_matrix: AccuracyMatrix,
    /// Mean softmax entropy over the test rows of every task, after the
    /// last task.
    pub final_entropy: f64,
    pub config: ExperimentConfig,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub metrics: RunMetrics,
    pub trace: RunTrace,
    pub model: MlpPolicy,
}

fn load_data(cfg: &ExperimentConfig, seed: u64) -> Result<(Dataset, Dataset)> {
    match &cfg.dataset {
        &DatasetConfig::Blobs {
            num_classes,
            dim,
            n_per_class,
            spread,
            margin,
        } => {
            let spec = BlobSpec {
                num_classes,
                dim,
                n_per_class,
                spread,
                margin,
            };
            let (train, test, _) = gaussian_blobs(&spec, seed)?;
            Ok((train, test))
        }
        DatasetConfig::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => {
            let mut train = load_idx(train_images, train_labels, Split::Train)?;
            let mut test = load_idx(test_images, test_labels, Split::Test)?;
            let k = train.num_classes.max(test.num_classes);
            train.num_classes = k;
            test.num_classes = k;
            Ok((train, test))
        }
        DatasetConfig::Csv {
            train,
            test,
            label_column,
        } => {
            let (mut train, stats) = load_csv(train, *label_column, None)?;
            let (mut test, _) = load_csv(test, *label_column, Some(&stats))?;
            let k = train.num_classes.max(test.num_classes);
            train.num_classes = k;
            test.num_classes = k;
            Ok((train, test))
        }
    }
}

/// Trains a fresh trunk with cross-entropy on `classes`, then drops the
/// head.
fn pretrain(
    model: &mut MlpPolicy,
    train: &Dataset,
    classes: &[usize],
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<()> {
    let rows = train.indices_of(classes);
    let x = train.features.select_rows(&rows)?;
    let y = column_labels(&train.labels, &rows, classes)?;
    let mut rng = stream(seed, Stream::Pretrain);
    model.init_head(classes.len(), cfg.model.head_init_std, &mut rng)?;
    let settings = TrainSettings {
        loss: LossSpec::new(crate::losses::LossKind::Ce),
        optimizer: OptimizerSpec::adam(cfg.model.pretrain_lr),
        epochs: cfg.model.pretrain_epochs,
        batch_size: cfg.batch_size,
        freeze_epochs: 0,
    };
    let mut anneal = AnnealState::new(ScheduleKind::Constant { alpha: 1.0 }, Scope::Global, 1)?;
    let mut trace = RunTrace::default();
    let mut sample_rng = stream(seed, Stream::Sampling);
    train_task(model, &x, &y, 0, &settings, &mut anneal, &mut trace, &mut rng, &mut sample_rng)?;
    model.reset_head();
    Ok(())
}

/// Training labels with symmetric noise applied inside each task: a flipped
/// label moves uniformly to one of the task's other classes. Rows outside
/// every task keep their label.
pub fn noisy_task_labels<R: rand::Rng + ?Sized>(
    labels: &[usize],
    seq: &TaskSequence,
    eta: f64,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let mut out = labels.to_vec();
    if eta == 0.0 {
        return Ok(out);
    }
    for task in seq.tasks() {
        let channel = NoiseChannel::new(eta, task.classes.len())?;
        let local = column_labels(labels, &task.train, &task.classes)?;
        for (&row, y) in task.train.iter().zip(apply_noise(&local, &channel, rng)) {
            out[row] = task.classes[y];
        }
    }
    Ok(out)
}

/// One seed of an experiment. Every random choice comes from a sub-stream of
/// `seed`, so the result depends on nothing else.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<RunOutput> {
    cfg.validate()?;
    let (train, test) = load_data(cfg, seed)?;
    let k = train.num_classes;
    let pretext = if cfg.model.pretrain { cfg.tasks.pretext_classes } else { 0 };
    let reserved = cfg.tasks.pretext_classes.min(k);
    if cfg.model.pretrain && pretext >= k {
        return Err(invalid(format!("{pretext} pretext classes leave none of {k} for tasks")));
    }
    let pretext_classes: Vec<usize> = (0..pretext).collect();
    let continual: Vec<usize> = (reserved..k).collect();
    let seq = split_tasks(&train, &test, &continual, cfg.tasks.n_tasks, seed)?;

    let mut init_rng = stream(seed, Stream::Init);
    let arch = Architecture {
        input_dim: train.dim(),
        depth: cfg.model.depth,
        width: cfg.model.width,
        adapter_rank: 0,
    };
    let mut model = MlpPolicy::new(arch, &mut init_rng)?;
    if cfg.model.pretrain {
        pretrain(&mut model, &train, &pretext_classes, cfg, seed)?;
        model.attach_adapters(cfg.model.adapter_rank, &mut init_rng);
    }

    let labels = noisy_task_labels(&train.labels, &seq, cfg.noise_rate, &mut stream(seed, Stream::Noise))?;

    let settings = TrainSettings {
        loss: cfg.loss.spec(),
        optimizer: cfg.optimizer,
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        freeze_epochs: cfg.freeze_epochs(),
    };
    let task_steps: Vec<usize> = seq.tasks().iter().map(|t| settings.steps_for(t.train.len())).collect();
    let global_horizon = task_steps.iter().sum::<usize>().saturating_sub(1).max(1);
    let mut anneal = AnnealState::new(cfg.schedule.kind, cfg.schedule.scope, global_horizon)?;
    let mut batch_rng = stream(seed, Stream::Batch);
    let mut sample_rng = stream(seed, Stream::Sampling);
    let mut trace = RunTrace::default();
    for (j, task) in seq.tasks().iter().enumerate() {
        model.init_head(task.classes.len(), cfg.model.head_init_std, &mut init_rng)?;
        anneal.begin_task(task_steps[j].saturating_sub(1).max(1))?;
        let seen = seq.seen_classes(j);
        let x = train.features.select_rows(&task.train)?;
        let y = column_labels(&labels, &task.train, &seen)?;
        train_task(
            &mut model,
            &x,
            &y,
            j,
            &settings,
            &mut anneal,
            &mut trace,
            &mut batch_rng,
            &mut sample_rng,
        )?;
        trace.accuracy.push(evaluate(&model, &test, &seq, j)?)?;
    }
    model.set_freeze(false);

    let all_test: Vec<usize> = seq.tasks().iter().flat_map(|t| t.test.iter().copied()).collect();
    let final_entropy = mean_entropy(&model.predict_proba(&test.features.select_rows(&all_test)?)?);
    let m = metrics(&trace.accuracy, seq.len())?;
    Ok(RunOutput {
        metrics: RunMetrics {
            seed,
            metrics: m,
            accuracy_matrix: trace.accuracy.clone(),
            final_entropy,
            config: cfg.clone(),
        },
        trace,
        model,
    })
}

/// Mean and sample standard deviation (`n - 1`); the std is `None` for a
/// single value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: Option<f64>,
    pub values: Vec<f64>,
}

impl Aggregate {
    pub fn of(values: Vec<f64>) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.len() > 1).then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
        Self { mean, std, values }
    }
}

/// Contents of `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub seeds: Vec<u64>,
    pub final_accuracy: Aggregate,
    pub average_accuracy: Aggregate,
    pub final_entropy: Aggregate,
}

impl Summary {
    pub fn of(runs: &[RunMetrics]) -> Self {
        let col = |f: fn(&RunMetrics) -> f64| Aggregate::of(runs.iter().map(f).collect());
        Self {
            seeds: runs.iter().map(|r| r.seed).collect(),
            final_accuracy: col(|r| r.metrics.final_accuracy),
            average_accuracy: col(|r| r.metrics.average_accuracy),
            final_entropy: col(|r| r.final_entropy),
        }
    }
}

pub fn trace_csv(trace: &RunTrace) -> String {
    let mut s = String::from("step,task,epoch,alpha,loss,entropy\n");
    for r in &trace.steps {
        let alpha = r.alpha.map(|a| a.to_string()).unwrap_or_default();
        writeln!(s, "{},{},{},{},{},{}", r.step, r.task, r.epoch, alpha, r.loss, r.entropy).expect("string write");
    }
    s
}

pub fn accuracy_csv(m: &AccuracyMatrix) -> String {
    let t = m.num_tasks();
    let mut s = String::from("after_task");
    for i in 0..t {
        write!(s, ",task_{i}").expect("string write");
    }
    s.push('\n');
    for (j, row) in m.rows().iter().enumerate() {
        write!(s, "{j}").expect("string write");
        for i in 0..t {
            match row.get(i) {
                Some(a) => write!(s, ",{a}").expect("string write"),
                None => s.push(','),
            }
        }
        s.push('\n');
    }
    s
}

pub fn write_run(dir: &Path, out: &RunOutput) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&out.metrics)?)?;
    std::fs::write(dir.join("trace.csv"), trace_csv(&out.trace))?;
    std::fs::write(dir.join("accuracy_matrix.csv"), accuracy_csv(&out.metrics.accuracy_matrix))?;
    Ok(())
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| invalid(e.to_string()))
}

/// Runs every seed of `cfg` (up to `jobs` at a time), writes per-run files
/// and `summary.json` under `out`, and returns the summary.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path, jobs: usize) -> Result<Summary> {
    cfg.validate()?;
    let runs: Vec<RunMetrics> = pool(jobs)?.install(|| {
        cfg.seeds
            .par_iter()
            .map(|&seed| {
                let run = run_seed(cfg, seed)?;
                write_run(&out.join(format!("seed_{seed}")), &run)?;
                Ok(run.metrics)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let summary = Summary::of(&runs);
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: String,
    pub summary: Summary,
}

/// One run set per value of `key`, each under `out/<key>=<value>/`, plus
/// `out/sweep.csv`.
pub fn run_sweep(cfg: &ExperimentConfig, key: &str, values: &[String], out: &Path, jobs: usize) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(crate::error::Error::Config("sweep needs at least one value".into()));
    }
    let configs = values
        .iter()
        .map(|v| with_param(cfg, key, v))
        .collect::<Result<Vec<_>>>()?;
    let dirs: Vec<PathBuf> = values.iter().map(|v| out.join(format!("{key}={v}"))).collect();
    let jobs_list: Vec<(usize, u64)> = configs
        .iter()
        .enumerate()
        .flat_map(|(i, c)| c.seeds.iter().map(move |&s| (i, s)))
        .collect();
    let runs: Vec<(usize, RunMetrics)> = pool(jobs)?.install(|| {
        jobs_list
            .par_iter()
            .map(|&(i, seed)| {
                let run = run_seed(&configs[i], seed)?;
                write_run(&dirs[i].join(format!("seed_{seed}")), &run)?;
                Ok((i, run.metrics))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut rows = Vec::with_capacity(values.len());
    let mut csv = String::from("value,final_accuracy_mean,final_accuracy_std,final_entropy_mean\n");
    for (i, v) in values.iter().enumerate() {
        let set: Vec<RunMetrics> = runs.iter().filter(|(j, _)| *j == i).map(|(_, m)| m.clone()).collect();
        let summary = Summary::of(&set);
        std::fs::create_dir_all(&dirs[i])?;
        std::fs::write(dirs[i].join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
        let std = summary.final_accuracy.std.map(|s| s.to_string()).unwrap_or_default();
        writeln!(
            csv,
            "{v},{},{std},{}",
            summary.final_accuracy.mean, summary.final_entropy.mean
        )
        .expect("string write");
        rows.push(SweepRow {
            value: v.clone(),
            summary,
        });
    }
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("sweep.csv"), csv)?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig::from_json(
            r#"{"dataset": {"kind": "blobs", "num_classes": 6, "dim": 4, "n_per_class": 20},
                "tasks": {"n_tasks": 2, "pretext_classes": 2},
                "model": {"depth": 1, "width": 8, "pretrain_epochs": 2},
                "epochs": 2, "batch_size": 16}"#,
        )
        .unwrap()
    }

    #[test]
    fn run_is_deterministic() {
        let a = run_seed(&tiny(), 3).unwrap();
        let b = run_seed(&tiny(), 3).unwrap();
        assert_eq!(
            serde_json::to_string(&a.metrics).unwrap(),
            serde_json::to_string(&b.metrics).unwrap()
        );
        assert_eq!(a.trace, b.trace);
        let c = run_seed(&tiny(), 4).unwrap();
        assert_ne!(a.trace, c.trace);
    }

    #[test]
    fn aggregate_uses_sample_std() {
        let a = Aggregate::of(vec![1.0, 2.0, 3.0]);
        assert_eq!(a.mean, 2.0);
        assert_eq!(a.std, Some(1.0));
        assert_eq!(Aggregate::of(vec![4.0]).std, None);
    }

    #[test]
    fn accuracy_csv_leaves_upper_cells_blank() {
        let m = AccuracyMatrix::from_rows(vec![vec![1.0], vec![0.8, 0.9]]).unwrap();
        assert_eq!(accuracy_csv(&m), "after_task,task_0,task_1\n0,1,\n1,0.8,0.9\n");
    }

    #[test]
    fn noisy_labels_stay_inside_their_task() {
        let spec = BlobSpec {
            num_classes: 9,
            dim: 2,
            n_per_class: 2500,
            spread: 1.0,
            margin: 1.0,
        };
        let (train, test, _) = gaussian_blobs(&spec, 0).unwrap();
        let seq = split_tasks(&train, &test, &(0..9).collect::<Vec<_>>(), 3, 0).unwrap();
        let noisy = noisy_task_labels(&train.labels, &seq, 0.3, &mut stream(0, Stream::Noise)).unwrap();
        let mut flips = 0;
        for task in seq.tasks() {
            for &r in &task.train {
                assert!(task.classes.contains(&noisy[r]));
                flips += usize::from(noisy[r] != train.labels[r]);
            }
        }
        let n = train.len() as f64;
        let rate = flips as f64 / n;
        assert!((rate - 0.3).abs() < 4.0 * (0.3 * 0.7 / n).sqrt(), "{rate}");
        let run = {
            let mut cfg = tiny();
            cfg.noise_rate = 0.4;
            run_seed(&cfg, 1).unwrap()
        };
        assert_eq!(run.metrics.accuracy_matrix.num_tasks(), 2);
    }

    #[test]
    fn scratch_mode_trains_whole_trunk() {
        let mut cfg = tiny();
        cfg.model.pretrain = false;
        let out = run_seed(&cfg, 1).unwrap();
        assert!(out.model.adapters().is_empty());
        assert_eq!(cfg.freeze_epochs(), 0);
    }
}
