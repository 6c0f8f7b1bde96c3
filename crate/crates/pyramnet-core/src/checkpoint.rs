//! Self-describing binary checkpoints.
//!
//! Layout (all integers little-endian): magic "PYRN", format version u32,
//! the model config as a length-prefixed key=value text block, then a
//! length-prefixed list of named records — every parameter, Adam moment, and
//! batch-norm running statistic — each carrying name, shape, dtype tag, and
//! raw data.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, PyramNet};
use crate::nn::AdamState;
use crate::tensor::{cf, Dtype, Scalar};

const MAGIC: &[u8; 4] = b"PYRN";
const VERSION: u32 = 1;

/// One stored tensor, still in raw bytes.
#[derive(Debug, Clone)]
pub struct RawRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    pub bytes: Vec<u8>,
}

impl RawRecord {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Decodes to the requested scalar type, converting across dtypes.
    pub fn values<T: Scalar>(&self) -> Vec<T> {
        let w = self.dtype.byte_width();
        self.bytes
            .chunks(w)
            .map(|c| match self.dtype {
                Dtype::F32 => cf::<T>(f32::read_le(c) as f64),
                Dtype::F64 => cf::<T>(f64::read_le(c)),
            })
            .collect()
    }
}

pub fn write_records<T: Scalar>(
    path: &Path,
    config_text: &str,
    records: &[(String, Vec<usize>, Vec<T>)],
) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = config_text.as_bytes();
    buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    buf.extend_from_slice(cfg);
    buf.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (name, shape, data) in records {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u32).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        buf.push(T::DTYPE.tag());
        for &v in data {
            v.write_le(&mut buf);
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<(String, Vec<RawRecord>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let name = path.display().to_string();
    let mut pos = 0usize;
    let take = |pos: &mut usize, len: usize| -> Result<&[u8]> {
        if *pos + len > bytes.len() {
            return Err(Error::Checkpoint(format!("{}: truncated file", name)));
        }
        let s = &bytes[*pos..*pos + len];
        *pos += len;
        Ok(s)
    };
    let u32_at = |pos: &mut usize| -> Result<u32> {
        let b = take(pos, 4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    };

    if take(&mut pos, 4)? != MAGIC {
        return Err(Error::Checkpoint(format!("{}: bad magic", name)));
    }
    let version = u32_at(&mut pos)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported version {}",
            name, version
        )));
    }
    let cfg_len = u32_at(&mut pos)? as usize;
    let config_text = String::from_utf8(take(&mut pos, cfg_len)?.to_vec())
        .map_err(|_| Error::Checkpoint(format!("{}: config block is not UTF-8", name)))?;
    let count = u32_at(&mut pos)? as usize;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u32_at(&mut pos)? as usize;
        let rec_name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint(format!("{}: record name is not UTF-8", name)))?;
        let rank = u32_at(&mut pos)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32_at(&mut pos)? as usize);
        }
        let dtype = Dtype::from_tag(take(&mut pos, 1)?[0]).ok_or_else(|| {
            Error::Checkpoint(format!("{}: record {} has unknown dtype", name, rec_name))
        })?;
        let numel: usize = shape.iter().product();
        let data = take(&mut pos, numel * dtype.byte_width())?.to_vec();
        records.push(RawRecord {
            name: rec_name,
            shape,
            dtype,
            bytes: data,
        });
    }
    Ok((config_text, records))
}

/// Extra training state carried alongside the model.
pub struct CheckpointMeta {
    pub epoch: usize,
    pub adam_t: u64,
}

/// Saves the model plus (optionally) optimizer moments. Record names:
/// `param.*`, `buffer.*`, `adam.m.*`, `adam.v.*`, `adam.t`, `train.epoch`.
pub fn save_model<T: Scalar>(
    path: &Path,
    model: &PyramNet<T>,
    adam: Option<&[AdamState<T>]>,
    epoch: usize,
) -> Result<()> {
    let params = model.params();
    if let Some(states) = adam {
        if states.len() != params.len() {
            return Err(Error::internal(format!(
                "{} adam states for {} parameters",
                states.len(),
                params.len()
            )));
        }
    }
    let mut records: Vec<(String, Vec<usize>, Vec<T>)> = Vec::new();
    for (name, p) in &params {
        records.push((format!("param.{}", name), p.shape().to_vec(), p.to_vec()));
    }
    for (name, buf) in model.buffers() {
        let data = buf.borrow().clone();
        records.push((format!("buffer.{}", name), vec![data.len()], data));
    }
    if let Some(states) = adam {
        for ((name, _), st) in params.iter().zip(states) {
            records.push((format!("adam.m.{}", name), vec![st.m.len()], st.m.clone()));
            records.push((format!("adam.v.{}", name), vec![st.v.len()], st.v.clone()));
        }
        let t = states.first().map(|s| s.t).unwrap_or(0);
        records.push(("adam.t".to_string(), vec![1], vec![cf::<T>(t as f64)]));
    }
    records.push((
        "train.epoch".to_string(),
        vec![1],
        vec![cf::<T>(epoch as f64)],
    ));
    write_records(path, &model.cfg.to_kv(), &records)
}

/// Rebuilds the model from the embedded config and fills every parameter and
/// buffer, failing on the first name or shape mismatch.
pub fn load_model<T: Scalar>(path: &Path) -> Result<(PyramNet<T>, Vec<AdamState<T>>, CheckpointMeta)> {
    let (config_text, records) = read_records(path)?;
    let cfg = ModelConfig::from_kv(&config_text)?;
    let model = PyramNet::<T>::new(cfg)?;
    let states = load_into(path, &model, &records)?;
    let meta = meta_from(&records);
    Ok((model, states, meta))
}

/// Loads a checkpoint into an existing model (shapes must match).
pub fn load_into_model<T: Scalar>(path: &Path, model: &PyramNet<T>) -> Result<CheckpointMeta> {
    let (_, records) = read_records(path)?;
    load_into(path, model, &records)?;
    Ok(meta_from(&records))
}

fn meta_from(records: &[RawRecord]) -> CheckpointMeta {
    let scalar = |name: &str| -> Option<f64> {
        records
            .iter()
            .find(|r| r.name == name)
            .map(|r| r.values::<f64>()[0])
    };
    CheckpointMeta {
        epoch: scalar("train.epoch").unwrap_or(0.0) as usize,
        adam_t: scalar("adam.t").unwrap_or(0.0) as u64,
    }
}

fn load_into<T: Scalar>(
    path: &Path,
    model: &PyramNet<T>,
    records: &[RawRecord],
) -> Result<Vec<AdamState<T>>> {
    let by_name: std::collections::HashMap<&str, &RawRecord> =
        records.iter().map(|r| (r.name.as_str(), r)).collect();
    let display = path.display();

    let params = model.params();
    for (name, p) in &params {
        let key = format!("param.{}", name);
        let rec = by_name.get(key.as_str()).ok_or_else(|| {
            Error::Checkpoint(format!("{}: missing parameter {}", display, name))
        })?;
        if rec.shape != p.shape() {
            return Err(Error::Checkpoint(format!(
                "{}: parameter {} has shape {:?} but the model expects {:?}",
                display,
                name,
                rec.shape,
                p.shape()
            )));
        }
        *p.data_mut() = rec.values::<T>();
    }
    for (name, buf) in model.buffers() {
        let key = format!("buffer.{}", name);
        let rec = by_name.get(key.as_str()).ok_or_else(|| {
            Error::Checkpoint(format!("{}: missing buffer {}", display, name))
        })?;
        let expect = buf.borrow().len();
        if rec.numel() != expect {
            return Err(Error::Checkpoint(format!(
                "{}: buffer {} has {} values but the model expects {}",
                display,
                name,
                rec.numel(),
                expect
            )));
        }
        *buf.borrow_mut() = rec.values::<T>();
    }
    let adam_t = meta_from(records).adam_t;
    let mut states = Vec::with_capacity(params.len());
    for (name, p) in &params {
        let mk = format!("adam.m.{}", name);
        let vk = format!("adam.v.{}", name);
        let mut st = AdamState::new(p.len());
        if let (Some(m), Some(v)) = (by_name.get(mk.as_str()), by_name.get(vk.as_str())) {
            if m.numel() != p.len() || v.numel() != p.len() {
                return Err(Error::Checkpoint(format!(
                    "{}: adam moments for {} have the wrong length",
                    display, name
                )));
            }
            st.m = m.values::<T>();
            st.v = v.values::<T>();
            st.t = adam_t;
        }
        states.push(st);
    }
    Ok(states)
}
