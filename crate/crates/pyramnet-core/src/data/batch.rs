//! Deterministic batching of datasets into dense [B, N, F] buffers.

use rand::{Rng, SeedableRng};

use super::{Dataset, PointCloud, Task};
use crate::error::{Error, Result};
use crate::tensor::Rng64;

/// One assembled batch. `points` is row-major [B, N, F]; `cloud_labels`
/// carries B classification labels, `point_labels` B·N segmentation labels
/// (whichever the task uses, the other is empty).
#[derive(Debug, Clone)]
pub struct Batch {
    pub points: Vec<f32>,
    pub batch: usize,
    pub n: usize,
    pub f: usize,
    pub cloud_labels: Vec<usize>,
    pub point_labels: Vec<usize>,
    pub cloud_indices: Vec<usize>,
}

/// Fisher-Yates permutation of 0..len under a fixed seed.
pub fn shuffled_indices(len: usize, seed: u64) -> Vec<usize> {
    let mut rng = Rng64::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..len).collect();
    for i in (1..len).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

/// Packs the given clouds (optionally transformed per cloud) into one batch.
pub fn assemble(
    ds: &Dataset,
    indices: &[usize],
    transform: Option<&dyn Fn(usize, &PointCloud) -> PointCloud>,
) -> Result<Batch> {
    if indices.is_empty() {
        return Err(Error::data("cannot assemble an empty batch"));
    }
    let first = &ds.clouds[indices[0]];
    let (n, f) = (first.n, first.f);
    let mut points = Vec::with_capacity(indices.len() * n * f);
    let mut cloud_labels = Vec::new();
    let mut point_labels = Vec::new();
    for &ci in indices {
        let cloud = &ds.clouds[ci];
        if cloud.n != n || cloud.f != f {
            return Err(Error::data(format!(
                "cloud {} is {}x{} but the batch shape is {}x{}",
                ci, cloud.n, cloud.f, n, f
            )));
        }
        let owned;
        let used = match transform {
            Some(t) => {
                owned = t(ci, cloud);
                &owned
            }
            None => cloud,
        };
        points.extend_from_slice(&used.points);
        match ds.task {
            Task::Classification => {
                cloud_labels.push(used.cloud_label.ok_or_else(|| {
                    Error::data(format!("cloud {} has no class label", ci))
                })?);
            }
            Task::PartSeg | Task::SceneSeg => {
                let labels = used.point_labels.as_ref().ok_or_else(|| {
                    Error::data(format!("cloud {} has no point labels", ci))
                })?;
                point_labels.extend_from_slice(labels);
            }
        }
    }
    Ok(Batch {
        points,
        batch: indices.len(),
        n,
        f,
        cloud_labels,
        point_labels,
        cloud_indices: indices.to_vec(),
    })
}

/// Streams the dataset in batches. Shuffling is deterministic per seed; the
/// final short batch is emitted.
pub fn batches(ds: &Dataset, batch_size: usize, shuffle: bool, seed: u64) -> Result<BatchIter<'_>> {
    if batch_size == 0 {
        return Err(Error::config("batch size must be >= 1"));
    }
    ds.validate()?;
    let n = ds.clouds[0].n;
    if let Some((i, c)) = ds
        .clouds
        .iter()
        .enumerate()
        .find(|(_, c)| c.n != n)
    {
        return Err(Error::data(format!(
            "cloud {} has N={} but the dataset batches at N={}",
            i, c.n, n
        )));
    }
    let order = if shuffle {
        shuffled_indices(ds.clouds.len(), seed)
    } else {
        (0..ds.clouds.len()).collect()
    };
    Ok(BatchIter {
        ds,
        order,
        batch_size,
        cursor: 0,
    })
}

pub struct BatchIter<'a> {
    ds: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
}

impl Iterator for BatchIter<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let idxs = &self.order[self.cursor..end];
        self.cursor = end;
        Some(assemble(self.ds, idxs, None))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_synthetic;

    fn tiny_dataset(count: usize) -> Dataset {
        make_synthetic(
            Task::Classification,
            &["sphere".to_string(), "cube".to_string()],
            count / 2,
            16,
            1,
        )
        .unwrap()
    }

    #[test]
    fn final_short_batch_is_emitted() {
        let ds = tiny_dataset(10);
        let sizes: Vec<usize> = batches(&ds, 4, false, 0)
            .unwrap()
            .map(|b| b.unwrap().batch)
            .collect();
        assert_eq!(sizes, vec![4, 4, 2]);
    }

    #[test]
    fn same_seed_gives_identical_order() {
        let ds = tiny_dataset(12);
        let a: Vec<Vec<usize>> = batches(&ds, 5, true, 7)
            .unwrap()
            .map(|b| b.unwrap().cloud_indices)
            .collect();
        let b: Vec<Vec<usize>> = batches(&ds, 5, true, 7)
            .unwrap()
            .map(|b| b.unwrap().cloud_indices)
            .collect();
        assert_eq!(a, b);
        let c: Vec<Vec<usize>> = batches(&ds, 5, true, 8)
            .unwrap()
            .map(|b| b.unwrap().cloud_indices)
            .collect();
        assert_ne!(a, c, "different seeds should shuffle differently");
    }

    #[test]
    fn no_shuffle_keeps_dataset_order() {
        let ds = tiny_dataset(6);
        let idx: Vec<usize> = batches(&ds, 2, false, 0)
            .unwrap()
            .flat_map(|b| b.unwrap().cloud_indices)
            .collect();
        assert_eq!(idx, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn mixed_point_counts_are_a_data_error() {
        let mut ds = tiny_dataset(4);
        let small = crate::data::PointCloud::new(vec![0.0; 8 * 3], 8, 3)
            .unwrap()
            .with_cloud_label(0);
        ds.clouds.push(small);
        assert!(matches!(
            batches(&ds, 2, false, 0),
            Err(crate::error::Error::Data(_))
        ));
    }
}
