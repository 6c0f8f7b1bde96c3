//! Point-cloud containers, mesh ingestion, synthetic datasets, and batching.

pub mod batch;
pub mod mesh;
pub mod pcld;
pub mod sample;
pub mod synthetic;

pub use batch::{batches, shuffled_indices, Batch, BatchIter};
pub use mesh::{load_mesh, MeshFormat, TriangleMesh};
pub use sample::{augment, augment_with, normalize_unit_sphere, sample_surface};
pub use synthetic::make_synthetic;

use crate::error::{Error, Result};

/// The three tasks the architecture serves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Classification,
    PartSeg,
    SceneSeg,
}

impl Task {
    pub fn name(&self) -> &'static str {
        match self {
            Task::Classification => "classification",
            Task::PartSeg => "part_seg",
            Task::SceneSeg => "scene_seg",
        }
    }

    pub fn parse(s: &str) -> Result<Task> {
        match s {
            "classification" => Ok(Task::Classification),
            "part_seg" => Ok(Task::PartSeg),
            "scene_seg" => Ok(Task::SceneSeg),
            other => Err(Error::config(format!("unknown task '{}'", other))),
        }
    }

    pub fn is_segmentation(&self) -> bool {
        matches!(self, Task::PartSeg | Task::SceneSeg)
    }

    pub(crate) fn tag(&self) -> u8 {
        match self {
            Task::Classification => 0,
            Task::PartSeg => 1,
            Task::SceneSeg => 2,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Task> {
        match tag {
            0 => Some(Task::Classification),
            1 => Some(Task::PartSeg),
            2 => Some(Task::SceneSeg),
            _ => None,
        }
    }
}

/// One sample: an N×F attribute matrix (row-major) whose first three columns
/// are xyz, plus either a per-cloud class or per-point labels.
#[derive(Debug, Clone)]
pub struct PointCloud {
    pub points: Vec<f32>,
    pub n: usize,
    pub f: usize,
    pub cloud_label: Option<usize>,
    pub point_labels: Option<Vec<usize>>,
}

impl PointCloud {
    pub fn new(points: Vec<f32>, n: usize, f: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::data("point cloud needs at least one point"));
        }
        if f < 3 {
            return Err(Error::data(format!(
                "point cloud needs at least xyz columns, got F={}",
                f
            )));
        }
        if points.len() != n * f {
            return Err(Error::data(format!(
                "point buffer length {} does not match {}x{}",
                points.len(),
                n,
                f
            )));
        }
        Ok(PointCloud {
            points,
            n,
            f,
            cloud_label: None,
            point_labels: None,
        })
    }

    pub fn with_cloud_label(mut self, label: usize) -> Self {
        self.cloud_label = Some(label);
        self
    }

    pub fn with_point_labels(mut self, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != self.n {
            return Err(Error::data(format!(
                "{} point labels for {} points",
                labels.len(),
                self.n
            )));
        }
        self.point_labels = Some(labels);
        Ok(self)
    }

    pub fn xyz(&self, i: usize) -> [f32; 3] {
        let base = i * self.f;
        [
            self.points[base],
            self.points[base + 1],
            self.points[base + 2],
        ]
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.points[i * self.f..(i + 1) * self.f]
    }
}

/// A labeled split of point clouds sharing task, F, and class count.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub clouds: Vec<PointCloud>,
    pub task: Task,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub split: String,
    pub seed: u64,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        if self.clouds.is_empty() {
            return Err(Error::data("dataset has no clouds"));
        }
        let f = self.clouds[0].f;
        for (i, c) in self.clouds.iter().enumerate() {
            if c.f != f {
                return Err(Error::data(format!(
                    "cloud {} has F={} but the dataset uses F={}",
                    i, c.f, f
                )));
            }
            match self.task {
                Task::Classification => {
                    let Some(label) = c.cloud_label else {
                        return Err(Error::data(format!(
                            "classification cloud {} has no cloud label",
                            i
                        )));
                    };
                    if label >= self.num_classes {
                        return Err(Error::data(format!(
                            "cloud {} label {} >= P={}",
                            i, label, self.num_classes
                        )));
                    }
                }
                Task::PartSeg | Task::SceneSeg => {
                    let Some(labels) = &c.point_labels else {
                        return Err(Error::data(format!(
                            "segmentation cloud {} has no point labels",
                            i
                        )));
                    };
                    if let Some(&bad) = labels.iter().find(|&&l| l >= self.num_classes) {
                        return Err(Error::data(format!(
                            "cloud {} contains label {} >= P={}",
                            i, bad, self.num_classes
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn feature_width(&self) -> usize {
        self.clouds.first().map(|c| c.f).unwrap_or(0)
    }
}
