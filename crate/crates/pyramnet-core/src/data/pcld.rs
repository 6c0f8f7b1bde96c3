//! Binary point-cloud records and dataset directories.
//!
//! One cloud per file: magic "PCLD", format version, N, F, task tag, an
//! optional cloud label, raw little-endian f32 points, and optional u32
//! point labels. A dataset directory holds `manifest.txt` (one
//! `class_id<TAB>name` per line) and one subdirectory per split.

use std::io::{Read, Write};
use std::path::Path;

use super::{Dataset, PointCloud, Task};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"PCLD";
const VERSION: u32 = 1;
const NO_LABEL: u32 = u32::MAX;

pub fn write_cloud(path: &Path, cloud: &PointCloud, task: Task) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + cloud.points.len() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(cloud.n as u32).to_le_bytes());
    buf.extend_from_slice(&(cloud.f as u32).to_le_bytes());
    buf.push(task.tag());
    let cloud_label = cloud.cloud_label.map(|l| l as u32).unwrap_or(NO_LABEL);
    buf.extend_from_slice(&cloud_label.to_le_bytes());
    buf.push(cloud.point_labels.is_some() as u8);
    for &v in &cloud.points {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(labels) = &cloud.point_labels {
        for &l in labels {
            buf.extend_from_slice(&(l as u32).to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

pub fn read_cloud(path: &Path) -> Result<(PointCloud, Task)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let name = path.display().to_string();
    let mut r = Reader::new(&bytes, &name);
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::data(format!("{}: bad magic, not a PCLD file", name)));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::data(format!(
            "{}: unsupported PCLD version {}",
            name, version
        )));
    }
    let n = r.u32()? as usize;
    let f = r.u32()? as usize;
    let task = Task::from_tag(r.u8()?)
        .ok_or_else(|| Error::data(format!("{}: unknown task tag", name)))?;
    let cloud_label = r.u32()?;
    let has_point_labels = r.u8()? != 0;
    let mut points = Vec::with_capacity(n * f);
    for _ in 0..n * f {
        points.push(r.f32()?);
    }
    let mut cloud = PointCloud::new(points, n, f)?;
    if cloud_label != NO_LABEL {
        cloud = cloud.with_cloud_label(cloud_label as usize);
    }
    if has_point_labels {
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            labels.push(r.u32()? as usize);
        }
        cloud = cloud.with_point_labels(labels)?;
    }
    Ok((cloud, task))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    name: &'a str,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], name: &'a str) -> Self {
        Reader { bytes, pos: 0, name }
    }

    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        if self.pos + len > self.bytes.len() {
            return Err(Error::data(format!("{}: truncated PCLD record", self.name)));
        }
        let s = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32(&mut self) -> Result<f32> {
        let b = self.take(4)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn write_manifest(path: &Path, class_names: &[String]) -> Result<()> {
    let mut text = String::new();
    for (i, name) in class_names.iter().enumerate() {
        text.push_str(&format!("{}\t{}\n", i, name));
    }
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)?;
    let name = path.display().to_string();
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut it = line.splitn(2, '\t');
        let id: usize = it
            .next()
            .unwrap_or("")
            .parse()
            .map_err(|_| Error::Parse {
                path: name.clone(),
                line: idx + 1,
                msg: "manifest line must start with a class id".to_string(),
            })?;
        let cname = it.next().unwrap_or("").to_string();
        if id != out.len() {
            return Err(Error::Parse {
                path: name.clone(),
                line: idx + 1,
                msg: format!("class ids must be dense, expected {}", out.len()),
            });
        }
        out.push(cname);
    }
    if out.is_empty() {
        return Err(Error::data(format!("{}: empty manifest", name)));
    }
    Ok(out)
}

/// Writes `manifest.txt` plus one `.pcld` per cloud under `root/<split>/`.
pub fn save_dataset(root: &Path, ds: &Dataset) -> Result<()> {
    std::fs::create_dir_all(root)?;
    write_manifest(&root.join("manifest.txt"), &ds.class_names)?;
    let split_dir = root.join(&ds.split);
    std::fs::create_dir_all(&split_dir)?;
    for (i, cloud) in ds.clouds.iter().enumerate() {
        write_cloud(
            &split_dir.join(format!("cloud_{:05}.pcld", i)),
            cloud,
            ds.task,
        )?;
    }
    Ok(())
}

/// Loads one split of a dataset directory. Files are read in sorted order so
/// loading is deterministic.
pub fn load_dataset(root: &Path, split: &str) -> Result<Dataset> {
    let class_names = read_manifest(&root.join("manifest.txt"))?;
    let split_dir = root.join(split);
    let mut files: Vec<_> = std::fs::read_dir(&split_dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.extension().map(|e| e == "pcld").unwrap_or(false))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::data(format!(
            "no .pcld files under {}",
            split_dir.display()
        )));
    }
    let mut clouds = Vec::with_capacity(files.len());
    let mut task = None;
    for file in &files {
        let (cloud, t) = read_cloud(file)?;
        match task {
            None => task = Some(t),
            Some(prev) if prev != t => {
                return Err(Error::data(format!(
                    "{}: task {} differs from the dataset task {}",
                    file.display(),
                    t.name(),
                    prev.name()
                )));
            }
            _ => {}
        }
        clouds.push(cloud);
    }
    let ds = Dataset {
        clouds,
        task: task.expect("at least one file"),
        num_classes: class_names.len(),
        class_names,
        split: split.to_string(),
        seed: 0,
    };
    ds.validate()?;
    Ok(ds)
}
