//! Accuracy and intersection-over-union reporting.

use serde::Serialize;

use crate::data::Task;
use crate::error::{Error, Result};

/// One row of the per-class table. Classes with no ground-truth instances
/// report recall 0 and are excluded from the class-averaged accuracy.
#[derive(Debug, Clone, Serialize)]
pub struct ClassRow {
    pub name: String,
    pub recall: f64,
    pub iou: f64,
    pub support: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricReport {
    pub task: String,
    pub per_class: Vec<ClassRow>,
    pub overall_accuracy: f64,
    pub avg_class_accuracy: f64,
    pub miou: f64,
    pub epoch: usize,
    pub wall_clock_secs: f64,
}

impl MetricReport {
    /// The single number a run optimizes for: accuracy for classification,
    /// mean IoU for segmentation.
    pub fn primary(&self) -> f64 {
        if self.task == "classification" {
            self.overall_accuracy
        } else {
            self.miou
        }
    }
}

impl std::fmt::Display for MetricReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "task={} epoch={} wall={:.1}s",
            self.task, self.epoch, self.wall_clock_secs
        )?;
        writeln!(
            f,
            "overall_accuracy={:.4} avg_class_accuracy={:.4} miou={:.4}",
            self.overall_accuracy, self.avg_class_accuracy, self.miou
        )?;
        writeln!(f, "{:<16} {:>8} {:>8} {:>8}", "class", "recall", "iou", "support")?;
        for row in &self.per_class {
            writeln!(
                f,
                "{:<16} {:>8.4} {:>8.4} {:>8}",
                row.name, row.recall, row.iou, row.support
            )?;
        }
        Ok(())
    }
}

fn class_name(names: &[String], c: usize) -> String {
    names
        .get(c)
        .cloned()
        .unwrap_or_else(|| format!("class_{}", c))
}

struct Confusion {
    counts: Vec<usize>,
    p: usize,
    total: usize,
}

impl Confusion {
    fn new(p: usize) -> Self {
        Confusion {
            counts: vec![0; p * p],
            p,
            total: 0,
        }
    }

    fn add(&mut self, gt: usize, pred: usize) -> Result<()> {
        if gt >= self.p || pred >= self.p {
            return Err(Error::data(format!(
                "label {} or prediction {} out of range [0, {})",
                gt, pred, self.p
            )));
        }
        self.counts[gt * self.p + pred] += 1;
        self.total += 1;
        Ok(())
    }

    fn diag(&self, c: usize) -> usize {
        self.counts[c * self.p + c]
    }

    fn gt_count(&self, c: usize) -> usize {
        (0..self.p).map(|j| self.counts[c * self.p + j]).sum()
    }

    fn pred_count(&self, c: usize) -> usize {
        (0..self.p).map(|i| self.counts[i * self.p + c]).sum()
    }
}

fn report_from_confusion(
    cm: &Confusion,
    task: Task,
    names: &[String],
    miou: f64,
) -> MetricReport {
    let p = cm.p;
    let mut per_class = Vec::with_capacity(p);
    let mut correct = 0usize;
    let mut recall_sum = 0.0;
    let mut present = 0usize;
    for c in 0..p {
        let support = cm.gt_count(c);
        let tp = cm.diag(c);
        correct += tp;
        let recall = if support > 0 {
            tp as f64 / support as f64
        } else {
            0.0
        };
        if support > 0 {
            recall_sum += recall;
            present += 1;
        }
        let union = support + cm.pred_count(c) - tp;
        // Absent and never predicted counts as a vacuous perfect match.
        let iou = if union > 0 { tp as f64 / union as f64 } else { 1.0 };
        per_class.push(ClassRow {
            name: class_name(names, c),
            recall,
            iou,
            support,
        });
    }
    MetricReport {
        task: task.name().to_string(),
        per_class,
        overall_accuracy: correct as f64 / cm.total as f64,
        avg_class_accuracy: if present > 0 {
            recall_sum / present as f64
        } else {
            0.0
        },
        miou,
        epoch: 0,
        wall_clock_secs: 0.0,
    }
}

/// Per-cloud class predictions against ground truth.
pub fn classification_metrics(
    pred: &[usize],
    labels: &[usize],
    p: usize,
    names: &[String],
) -> Result<MetricReport> {
    if pred.is_empty() || pred.len() != labels.len() {
        return Err(Error::data(format!(
            "classification metrics need matching non-empty inputs, got {} vs {}",
            pred.len(),
            labels.len()
        )));
    }
    let mut cm = Confusion::new(p);
    for (&pr, &gt) in pred.iter().zip(labels) {
        cm.add(gt, pr)?;
    }
    // Class-averaged global IoU over classes that occur at all.
    let miou = global_miou(&cm);
    Ok(report_from_confusion(&cm, Task::Classification, names, miou))
}

fn global_miou(cm: &Confusion) -> f64 {
    let mut sum = 0.0;
    let mut used = 0usize;
    for c in 0..cm.p {
        let tp = cm.diag(c);
        let union = cm.gt_count(c) + cm.pred_count(c) - tp;
        if union > 0 {
            sum += tp as f64 / union as f64;
            used += 1;
        }
    }
    if used > 0 {
        sum / used as f64
    } else {
        0.0
    }
}

/// Per-point predictions, one vector per shape.
///
/// Part segmentation averages IoU per shape over all part classes, counting
/// a part absent from both prediction and ground truth as IoU 1, then
/// averages over shapes. Scene segmentation reports class-averaged global
/// IoU instead.
pub fn segmentation_metrics(
    task: Task,
    pred: &[Vec<usize>],
    labels: &[Vec<usize>],
    p: usize,
    names: &[String],
) -> Result<MetricReport> {
    if pred.is_empty() || pred.len() != labels.len() {
        return Err(Error::data(format!(
            "segmentation metrics need matching non-empty inputs, got {} vs {}",
            pred.len(),
            labels.len()
        )));
    }
    let mut cm = Confusion::new(p);
    let mut shape_iou_sum = 0.0;
    for (sp, sl) in pred.iter().zip(labels) {
        if sp.len() != sl.len() || sp.is_empty() {
            return Err(Error::data(
                "per-shape prediction and label lengths disagree or are empty",
            ));
        }
        let mut inter = vec![0usize; p];
        let mut pred_n = vec![0usize; p];
        let mut gt_n = vec![0usize; p];
        for (&pr, &gt) in sp.iter().zip(sl) {
            cm.add(gt, pr)?;
            if pr == gt {
                inter[gt] += 1;
            }
            if pr < p {
                pred_n[pr] += 1;
            }
            gt_n[gt] += 1;
        }
        let mut iou_sum = 0.0;
        for c in 0..p {
            let union = pred_n[c] + gt_n[c] - inter[c];
            iou_sum += if union > 0 {
                inter[c] as f64 / union as f64
            } else {
                1.0
            };
        }
        shape_iou_sum += iou_sum / p as f64;
    }
    let miou = match task {
        Task::PartSeg => shape_iou_sum / pred.len() as f64,
        _ => global_miou(&cm),
    };
    Ok(report_from_confusion(&cm, task, names, miou))
}

/// Index of the row maximum (first one on ties).
pub fn argmax_rows<T: crate::tensor::Scalar>(data: &[T], rows: usize, cols: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(rows);
    for i in 0..rows {
        let row = &data[i * cols..(i + 1) * cols];
        let mut best = 0usize;
        for (j, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                best = j;
            }
        }
        out.push(best);
    }
    out
}
