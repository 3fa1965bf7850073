//! Binary dataset format and the evaluation-label sidecar.
//!
//! Layout, all integers little-endian:
//!   magic "HCTBENCH" | version u32 | n_cls u32 | m u32 | h u32 | w u32 |
//!   d u32 | count u64 | domain u8 | labels_present u8
//! then per video:
//!   label i64 (-1 when withheld) | m*h*w*d feature f64 | m*h*w mask f64

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::array::Array;
use crate::error::{HctError, Result};
use crate::masking::HumanMask;

use super::{Dataset, Domain, VideoRecord};

const MAGIC: &[u8; 8] = b"HCTBENCH";
const VERSION: u32 = 1;

fn fmt_err(path: &Path, detail: impl Into<String>) -> HctError {
    HctError::Format { path: path.display().to_string(), detail: detail.into() }
}

pub fn write_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    let file = File::create(path).map_err(|e| HctError::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let io = |e: std::io::Error| HctError::io(path.display().to_string(), e);

    let first = dataset
        .videos
        .first()
        .ok_or_else(|| HctError::Dataset("refusing to write an empty dataset".into()))?;
    let m = first.clips.len() as u32;
    let h = first.clips[0].shape()[0] as u32;
    let wd = first.clips[0].shape()[1] as u32;
    let d = first.clips[0].shape()[2] as u32;
    let labels_present = first.label.is_some() as u8;
    let n_cls = dataset
        .videos
        .iter()
        .filter_map(|v| v.label)
        .max()
        .map_or(0, |x| x as u32 + 1);

    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&n_cls.to_le_bytes()).map_err(io)?;
    for v in [m, h, wd, d] {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    w.write_all(&(dataset.videos.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&[dataset.domain.label() as u8]).map_err(io)?;
    w.write_all(&[labels_present]).map_err(io)?;

    for video in &dataset.videos {
        let label: i64 = video.label.map_or(-1, |l| l as i64);
        w.write_all(&label.to_le_bytes()).map_err(io)?;
        for clip in &video.clips {
            for &v in clip.data() {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        for mask in &video.masks {
            for &v in mask.grid().data() {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
    }
    w.flush().map_err(io)
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| HctError::io(path.display().to_string(), e))?;
    let mut r = BufReader::new(file);
    let io = |e: std::io::Error| HctError::io(path.display().to_string(), e);

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(fmt_err(path, "bad magic; not a dataset file"));
    }
    let mut u32buf = [0u8; 4];
    let mut read_u32 = |r: &mut BufReader<File>| -> Result<u32> {
        r.read_exact(&mut u32buf).map_err(io)?;
        Ok(u32::from_le_bytes(u32buf))
    };
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(fmt_err(path, format!("unsupported version {}", version)));
    }
    let _n_cls = read_u32(&mut r)?;
    let m = read_u32(&mut r)? as usize;
    let h = read_u32(&mut r)? as usize;
    let w = read_u32(&mut r)? as usize;
    let d = read_u32(&mut r)? as usize;
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u64buf).map_err(io)?;
    let count = u64::from_le_bytes(u64buf) as usize;
    let mut byte = [0u8; 1];
    r.read_exact(&mut byte).map_err(io)?;
    let domain = match byte[0] {
        0 => Domain::Source,
        1 => Domain::Target,
        other => return Err(fmt_err(path, format!("bad domain tag {}", other))),
    };
    r.read_exact(&mut byte).map_err(io)?;

    let clip_len = h * w * d;
    let mask_len = h * w;
    let mut videos = Vec::with_capacity(count);
    let mut f64buf = [0u8; 8];
    for _ in 0..count {
        r.read_exact(&mut f64buf).map_err(io)?;
        let raw_label = i64::from_le_bytes(f64buf);
        let label = if raw_label < 0 { None } else { Some(raw_label as usize) };
        let mut clips = Vec::with_capacity(m);
        for _ in 0..m {
            let mut data = Vec::with_capacity(clip_len);
            for _ in 0..clip_len {
                r.read_exact(&mut f64buf).map_err(io)?;
                data.push(f64::from_le_bytes(f64buf));
            }
            clips.push(Array::new(vec![h, w, d], data)?);
        }
        let mut masks = Vec::with_capacity(m);
        for _ in 0..m {
            let mut data = Vec::with_capacity(mask_len);
            for _ in 0..mask_len {
                r.read_exact(&mut f64buf).map_err(io)?;
                data.push(f64::from_le_bytes(f64buf));
            }
            masks.push(HumanMask::new(Array::new(vec![h, w], data)?)?);
        }
        videos.push(VideoRecord { clips, masks, label, domain });
    }
    Ok(Dataset { domain, videos })
}

/// Held-out labels, written next to the target split and readable only
/// through the evaluation loader.
#[derive(Serialize, Deserialize)]
pub struct EvalLabelFile {
    pub domain: Domain,
    pub labels: Vec<usize>,
}

pub fn write_eval_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let payload = EvalLabelFile { domain: Domain::Target, labels: labels.to_vec() };
    let json = serde_json::to_string_pretty(&payload)
        .map_err(|e| fmt_err(path, format!("serialize: {}", e)))?;
    std::fs::write(path, json).map_err(|e| HctError::io(path.display().to_string(), e))
}

/// Raw label-file read. Training code must not call this; evaluation goes
/// through `evalsuite::load_eval_labels`.
pub fn read_eval_labels_unchecked(path: &Path) -> Result<EvalLabelFile> {
    let text = std::fs::read_to_string(path).map_err(|e| HctError::io(path.display().to_string(), e))?;
    serde_json::from_str(&text).map_err(|e| fmt_err(path, format!("parse: {}", e)))
}
