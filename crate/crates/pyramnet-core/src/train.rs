//! Deterministic training and evaluation loops.

use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use rand::SeedableRng;
use serde::Serialize;

use crate::checkpoint;
use crate::data::{batch, Batch, Dataset, Task};
use crate::error::{Error, Result};
use crate::model::metrics::{argmax_rows, classification_metrics, segmentation_metrics, MetricReport};
use crate::model::{loss, PyramNet};
use crate::nn::{adam_step, AdamHyper, AdamState, BnSchedule};
use crate::tensor::{backward, cf, NoGradGuard, Rng64, Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub hyper: AdamHyper,
    pub seed: u64,
    pub augment: bool,
    pub eval_every: usize,
    pub checkpoint_every: usize,
    pub bn_schedule: BnSchedule,
    pub log_path: Option<PathBuf>,
    pub checkpoint_path: Option<PathBuf>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 300,
            batch_size: 32,
            hyper: AdamHyper::default(),
            seed: 0,
            augment: true,
            eval_every: 5,
            checkpoint_every: 25,
            bn_schedule: BnSchedule::default(),
            log_path: None,
            checkpoint_path: None,
        }
    }
}

/// One line of the append-only training log.
#[derive(Debug, Clone, Serialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub overall_accuracy: f64,
    pub avg_class_accuracy: f64,
    pub miou: f64,
    pub wall_clock_secs: f64,
}

pub struct TrainSummary {
    pub epochs: usize,
    /// Loss of the very first batch, before any update.
    pub first_batch_loss: f64,
    /// Mean training loss over epoch 0.
    pub epoch0_loss: f64,
    pub final_train: MetricReport,
    pub final_eval: Option<MetricReport>,
    pub best_eval: Option<(usize, MetricReport)>,
}

fn check_compat<T: Scalar>(model: &PyramNet<T>, ds: &Dataset, what: &str) -> Result<()> {
    if ds.task != model.cfg.task {
        return Err(Error::config(format!(
            "{} dataset task {} does not match the model task {}",
            what,
            ds.task.name(),
            model.cfg.task.name()
        )));
    }
    if ds.num_classes != model.cfg.num_classes {
        return Err(Error::config(format!(
            "{} dataset has P={} but the model expects P={}",
            what, ds.num_classes, model.cfg.num_classes
        )));
    }
    ds.validate()?;
    let c = &ds.clouds[0];
    if c.n != model.cfg.n_points || c.f != model.cfg.in_channels {
        return Err(Error::config(format!(
            "{} dataset clouds are {}x{} but the model expects {}x{}",
            what, c.n, c.f, model.cfg.n_points, model.cfg.in_channels
        )));
    }
    Ok(())
}

fn batch_tensor<T: Scalar>(b: &Batch) -> Tensor<T> {
    let data: Vec<T> = b.points.iter().map(|&v| cf::<T>(v as f64)).collect();
    Tensor::from_vec(vec![b.batch, b.n, b.f], data).expect("batch buffer is consistent")
}

fn batch_labels(b: &Batch, task: Task) -> &[usize] {
    match task {
        Task::Classification => &b.cloud_labels,
        _ => &b.point_labels,
    }
}

/// Trains in place. Deterministic for a fixed seed: shuffling, augmentation,
/// and dropout all derive from it.
pub fn train_model<T: Scalar>(
    model: &PyramNet<T>,
    train_ds: &Dataset,
    eval_ds: Option<&Dataset>,
    opts: &TrainOptions,
) -> Result<TrainSummary> {
    check_compat(model, train_ds, "training")?;
    if let Some(ev) = eval_ds {
        check_compat(model, ev, "evaluation")?;
    }
    if opts.batch_size == 0 || opts.epochs == 0 {
        return Err(Error::config("epochs and batch size must be positive"));
    }
    let task = model.cfg.task;
    let p = model.cfg.num_classes;

    let params = model.params();
    let mut adam: Vec<AdamState<T>> = params.iter().map(|(_, t)| AdamState::new(t.len())).collect();
    let mut dropout_rng = Rng64::seed_from_u64(crate::data::synthetic::mix(opts.seed, 0xD509));

    let mut log = match &opts.log_path {
        Some(path) => Some(
            std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)?,
        ),
        None => None,
    };
    let start = Instant::now();

    let mut first_batch_loss = f64::NAN;
    let mut epoch0_loss = f64::NAN;
    let mut best_eval: Option<(usize, MetricReport)> = None;
    let mut final_train: Option<MetricReport> = None;
    let mut final_eval: Option<MetricReport> = None;

    for epoch in 0..opts.epochs {
        model.set_bn_decay(opts.bn_schedule.decay_at(epoch));
        let order = batch::shuffled_indices(
            train_ds.clouds.len(),
            crate::data::synthetic::mix(opts.seed, epoch as u64),
        );

        let mut loss_sum = 0.0f64;
        let mut sample_count = 0usize;
        let mut preds: Vec<usize> = Vec::new();
        let mut gts: Vec<usize> = Vec::new();
        let mut seg_preds: Vec<Vec<usize>> = Vec::new();
        let mut seg_gts: Vec<Vec<usize>> = Vec::new();

        for chunk in order.chunks(opts.batch_size) {
            // The classification head normalizes over the batch axis, which
            // is undefined for a single sample; drop a trailing singleton.
            if task == Task::Classification && chunk.len() < 2 {
                log::warn!("skipping a batch of 1 sample (batch statistics undefined)");
                continue;
            }
            let aug_epoch = epoch as u64;
            let aug_seed = opts.seed;
            let transform = |ci: usize, cloud: &crate::data::PointCloud| {
                crate::data::augment(
                    cloud,
                    crate::data::synthetic::mix(aug_seed, (aug_epoch << 32) ^ ci as u64),
                )
            };
            let assembled = if opts.augment {
                batch::assemble(train_ds, chunk, Some(&transform))?
            } else {
                batch::assemble(train_ds, chunk, None)?
            };
            let points = batch_tensor::<T>(&assembled);
            let labels = batch_labels(&assembled, task);

            let trace = model.forward(&points, true, &mut dropout_rng)?;
            let logits = trace.logits()?;
            let batch_loss = loss(logits, labels, task)?;
            let loss_value = batch_loss.item().to_f64().expect("finite loss");
            if !loss_value.is_finite() {
                return Err(Error::Train(format!(
                    "nonfinite loss at epoch {}",
                    epoch
                )));
            }
            if first_batch_loss.is_nan() {
                first_batch_loss = loss_value;
            }
            backward(&batch_loss)?;
            for ((name, param), state) in params.iter().zip(adam.iter_mut()) {
                let grad = param.grad();
                if let Some(g) = grad {
                    adam_step(name, &mut param.data_mut(), &g, state, &opts.hyper)?;
                }
                param.zero_grad();
            }

            let n_samples = assembled.batch;
            loss_sum += loss_value * n_samples as f64;
            sample_count += n_samples;
            let ld = logits.data();
            match task {
                Task::Classification => {
                    preds.extend(argmax_rows(&ld, n_samples, p));
                    gts.extend_from_slice(labels);
                }
                _ => {
                    let n = assembled.n;
                    let flat = argmax_rows(&ld, n_samples * n, p);
                    for bi in 0..n_samples {
                        seg_preds.push(flat[bi * n..(bi + 1) * n].to_vec());
                        seg_gts.push(labels[bi * n..(bi + 1) * n].to_vec());
                    }
                }
            }
        }
        if sample_count == 0 {
            return Err(Error::config(
                "no trainable batches (dataset smaller than the minimum batch?)",
            ));
        }
        let mean_loss = loss_sum / sample_count as f64;
        if epoch == 0 {
            epoch0_loss = mean_loss;
        }

        let mut train_report = match task {
            Task::Classification => classification_metrics(&preds, &gts, p, &train_ds.class_names)?,
            _ => segmentation_metrics(task, &seg_preds, &seg_gts, p, &train_ds.class_names)?,
        };
        train_report.epoch = epoch;
        train_report.wall_clock_secs = start.elapsed().as_secs_f64();
        write_log(&mut log, epoch, "train", mean_loss, &train_report)?;

        let last_epoch = epoch + 1 == opts.epochs;
        if let Some(ev) = eval_ds {
            if (epoch + 1) % opts.eval_every == 0 || last_epoch {
                let (ev_loss, mut ev_report) = eval_model(model, ev, opts.batch_size)?;
                ev_report.epoch = epoch;
                ev_report.wall_clock_secs = start.elapsed().as_secs_f64();
                write_log(&mut log, epoch, "eval", ev_loss, &ev_report)?;
                let better = best_eval
                    .as_ref()
                    .map(|(_, b)| ev_report.primary() > b.primary())
                    .unwrap_or(true);
                if better {
                    best_eval = Some((epoch, ev_report.clone()));
                    if let Some(path) = &opts.checkpoint_path {
                        let best = path.with_extension("best.ckpt");
                        checkpoint::save_model(&best, model, Some(&adam), epoch)?;
                    }
                }
                if last_epoch {
                    final_eval = Some(ev_report);
                }
            }
        }
        if let Some(path) = &opts.checkpoint_path {
            if (epoch + 1) % opts.checkpoint_every == 0 || last_epoch {
                checkpoint::save_model(path, model, Some(&adam), epoch)?;
            }
        }
        if last_epoch {
            final_train = Some(train_report);
        }
    }

    Ok(TrainSummary {
        epochs: opts.epochs,
        first_batch_loss,
        epoch0_loss,
        final_train: final_train.expect("ran at least one epoch"),
        final_eval,
        best_eval,
    })
}

fn write_log(
    log: &mut Option<std::fs::File>,
    epoch: usize,
    split: &str,
    loss: f64,
    report: &MetricReport,
) -> Result<()> {
    if let Some(file) = log {
        let record = LogRecord {
            epoch,
            split: split.to_string(),
            loss,
            overall_accuracy: report.overall_accuracy,
            avg_class_accuracy: report.avg_class_accuracy,
            miou: report.miou,
            wall_clock_secs: report.wall_clock_secs,
        };
        let line = serde_json::to_string(&record)
            .map_err(|e| Error::internal(format!("log serialization failed: {}", e)))?;
        writeln!(file, "{}", line)?;
    }
    Ok(())
}

/// Inference-mode pass over a dataset: running batch-norm statistics, no
/// dropout, no graph recording. Returns mean loss and the metric report.
pub fn eval_model<T: Scalar>(
    model: &PyramNet<T>,
    ds: &Dataset,
    batch_size: usize,
) -> Result<(f64, MetricReport)> {
    check_compat(model, ds, "evaluation")?;
    let _guard = NoGradGuard::new();
    let task = model.cfg.task;
    let p = model.cfg.num_classes;
    let mut rng = Rng64::seed_from_u64(0);

    let mut loss_sum = 0.0f64;
    let mut count = 0usize;
    let mut preds: Vec<usize> = Vec::new();
    let mut gts: Vec<usize> = Vec::new();
    let mut seg_preds: Vec<Vec<usize>> = Vec::new();
    let mut seg_gts: Vec<Vec<usize>> = Vec::new();

    for b in batch::batches(ds, batch_size, false, 0)? {
        let assembled = b?;
        let points = batch_tensor::<T>(&assembled);
        let labels = batch_labels(&assembled, task);
        let trace = model.forward(&points, false, &mut rng)?;
        let logits = trace.logits()?;
        let l = loss(logits, labels, task)?.item().to_f64().expect("finite");
        loss_sum += l * assembled.batch as f64;
        count += assembled.batch;
        let ld = logits.data();
        match task {
            Task::Classification => {
                preds.extend(argmax_rows(&ld, assembled.batch, p));
                gts.extend_from_slice(labels);
            }
            _ => {
                let n = assembled.n;
                let flat = argmax_rows(&ld, assembled.batch * n, p);
                for bi in 0..assembled.batch {
                    seg_preds.push(flat[bi * n..(bi + 1) * n].to_vec());
                    seg_gts.push(labels[bi * n..(bi + 1) * n].to_vec());
                }
            }
        }
    }
    let report = match task {
        Task::Classification => classification_metrics(&preds, &gts, p, &ds.class_names)?,
        _ => segmentation_metrics(task, &seg_preds, &seg_gts, p, &ds.class_names)?,
    };
    Ok((loss_sum / count as f64, report))
}

/// Per-cloud predictions in inference mode. Classification returns one label
/// per cloud; segmentation returns per-point labels.
pub fn predict<T: Scalar>(
    model: &PyramNet<T>,
    ds: &Dataset,
    batch_size: usize,
) -> Result<Vec<Vec<usize>>> {
    if ds.task != model.cfg.task {
        return Err(Error::config(format!(
            "dataset task {} does not match the model task {}",
            ds.task.name(),
            model.cfg.task.name()
        )));
    }
    let _guard = NoGradGuard::new();
    let p = model.cfg.num_classes;
    let mut rng = Rng64::seed_from_u64(0);
    let mut out = Vec::with_capacity(ds.clouds.len());
    for b in batch::batches(ds, batch_size, false, 0)? {
        let assembled = b?;
        let points = batch_tensor::<T>(&assembled);
        let trace = model.forward(&points, false, &mut rng)?;
        let logits = trace.logits()?;
        let ld = logits.data();
        match model.cfg.task {
            Task::Classification => {
                for lbl in argmax_rows(&ld, assembled.batch, p) {
                    out.push(vec![lbl]);
                }
            }
            _ => {
                let n = assembled.n;
                let flat = argmax_rows(&ld, assembled.batch * n, p);
                for bi in 0..assembled.batch {
                    out.push(flat[bi * n..(bi + 1) * n].to_vec());
                }
            }
        }
    }
    Ok(out)
}
