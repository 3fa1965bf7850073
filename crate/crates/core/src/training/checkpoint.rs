//! Checkpoint format: versioned header, a JSON metadata blob (model config,
//! training snapshot, bank metadata), then named parameter tensors as
//! row-major little-endian f64. Round-trips bit-exactly.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::array::Array;
use crate::error::{HctError, Result};
use crate::prototypes::PrototypeBank;

use super::model::{Banks, ModelConfig, ModelState};
use super::TrainConfig;

const MAGIC: &[u8; 8] = b"HCTCKPT\0";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct BankMeta {
    domain: String,
    kept_fraction: f64,
    inertia_trace: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    model: ModelConfig,
    train: Option<TrainConfig>,
    banks: Option<(BankMeta, BankMeta)>,
}

fn fmt_err(path: &Path, detail: impl Into<String>) -> HctError {
    HctError::Format { path: path.display().to_string(), detail: detail.into() }
}

pub fn save_checkpoint(path: &Path, model: &ModelState) -> Result<()> {
    let file = File::create(path).map_err(|e| HctError::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let io = |e: std::io::Error| HctError::io(path.display().to_string(), e);

    let meta = CheckpointMeta {
        model: model.config.clone(),
        train: model.train_snapshot.clone(),
        banks: model.banks.as_ref().map(|b| {
            (
                BankMeta {
                    domain: b.source.domain.clone(),
                    kept_fraction: b.source.kept_fraction,
                    inertia_trace: b.source.inertia_trace.clone(),
                },
                BankMeta {
                    domain: b.target.domain.clone(),
                    kept_fraction: b.target.kept_fraction,
                    inertia_trace: b.target.inertia_trace.clone(),
                },
            )
        }),
    };
    let meta_json =
        serde_json::to_vec(&meta).map_err(|e| fmt_err(path, format!("serialize meta: {}", e)))?;

    let mut tensors: Vec<(String, &Array)> = model.named_params();
    if let Some(banks) = &model.banks {
        tensors.push(("banks.source.prototypes".into(), &banks.source.prototypes));
        tensors.push(("banks.target.prototypes".into(), &banks.target.prototypes));
    }
    tensors.sort_by(|a, b| a.0.cmp(&b.0));

    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(meta_json.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&meta_json).map_err(io)?;
    w.write_all(&(tensors.len() as u64).to_le_bytes()).map_err(io)?;
    for (name, arr) in tensors {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(name_bytes).map_err(io)?;
        w.write_all(&(arr.shape().len() as u32).to_le_bytes()).map_err(io)?;
        for &d in arr.shape() {
            w.write_all(&(d as u64).to_le_bytes()).map_err(io)?;
        }
        for &v in arr.data() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    let file = File::open(path).map_err(|e| HctError::io(path.display().to_string(), e))?;
    let mut r = BufReader::new(file);
    let io = |e: std::io::Error| HctError::io(path.display().to_string(), e);

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(fmt_err(path, "bad magic; not a checkpoint file"));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf).map_err(io)?;
    let version = u32::from_le_bytes(u32buf);
    if version != VERSION {
        return Err(fmt_err(path, format!("unsupported version {}", version)));
    }
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u64buf).map_err(io)?;
    let meta_len = u64::from_le_bytes(u64buf) as usize;
    let mut meta_json = vec![0u8; meta_len];
    r.read_exact(&mut meta_json).map_err(io)?;
    let meta: CheckpointMeta =
        serde_json::from_slice(&meta_json).map_err(|e| fmt_err(path, format!("parse meta: {}", e)))?;

    r.read_exact(&mut u64buf).map_err(io)?;
    let tensor_count = u64::from_le_bytes(u64buf) as usize;
    let mut tensors: BTreeMap<String, Array> = BTreeMap::new();
    for _ in 0..tensor_count {
        r.read_exact(&mut u32buf).map_err(io)?;
        let name_len = u32::from_le_bytes(u32buf) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(io)?;
        let name = String::from_utf8(name).map_err(|_| fmt_err(path, "tensor name is not utf-8"))?;
        r.read_exact(&mut u32buf).map_err(io)?;
        let rank = u32::from_le_bytes(u32buf) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            r.read_exact(&mut u64buf).map_err(io)?;
            shape.push(u64::from_le_bytes(u64buf) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut u64buf).map_err(io)?;
            data.push(f64::from_le_bytes(u64buf));
        }
        tensors.insert(name, Array::new(shape, data)?);
    }

    let mut model = ModelState::init(meta.model, 0)?;
    model.train_snapshot = meta.train;
    let mut missing = Vec::new();
    model.visit_mut(&mut |name, param| match tensors.remove(&name) {
        Some(arr) if arr.shape() == param.shape() => *param = arr,
        Some(arr) => missing.push(format!("{} has shape {:?}, expected {:?}", name, arr.shape(), param.shape())),
        None => missing.push(format!("{} absent from checkpoint", name)),
    });
    if !missing.is_empty() {
        return Err(fmt_err(path, format!("parameter mismatch: {}", missing.join("; "))));
    }

    model.banks = match (meta.banks, tensors.remove("banks.source.prototypes"), tensors.remove("banks.target.prototypes"))
    {
        (Some((sm, tm)), Some(sp), Some(tp)) => Some(Banks {
            source: PrototypeBank {
                prototypes: sp,
                domain: sm.domain,
                kept_fraction: sm.kept_fraction,
                inertia_trace: sm.inertia_trace,
            },
            target: PrototypeBank {
                prototypes: tp,
                domain: tm.domain,
                kept_fraction: tm.kept_fraction,
                inertia_trace: tm.inertia_trace,
            },
        }),
        (None, None, None) => None,
        _ => return Err(fmt_err(path, "inconsistent bank records")),
    };
    if !tensors.is_empty() {
        let names: Vec<String> = tensors.keys().cloned().collect();
        return Err(fmt_err(path, format!("unexpected tensors: {}", names.join(", "))));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthbench::{generate_dataset, BenchSpec};
    use crate::training::{two_stage_train, ModelConfig, PrototypeCount, StageConfig, TrainConfig, Variant};

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let spec = BenchSpec { n_source: 12, n_target: 12, d: 8, m: 3, n_cls: 3, ..BenchSpec::default() };
        let bench = generate_dataset(&spec).unwrap();
        let model_cfg = ModelConfig {
            m: 3,
            d: 8,
            d_v: 8,
            n_cls: 3,
            k: PrototypeCount::Fixed(3),
            l_e: 1,
            l_d: 1,
            variant: Variant::Full,
            ..ModelConfig::default()
        };
        let cfg = TrainConfig {
            batch_pairs: 4,
            stage1: StageConfig { epochs: 1, ..StageConfig::default() },
            stage2: StageConfig { lr0: 0.001, weight_decay: 0.0, epochs: 1 },
            seed: 9,
            ..TrainConfig::default()
        };
        let out = two_stage_train(&bench.source, &bench.target, model_cfg, &cfg).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.hctc");
        save_checkpoint(&path, &out.model).unwrap();
        let loaded = load_checkpoint(&path).unwrap();

        assert_eq!(loaded.config, out.model.config);
        assert_eq!(loaded.train_snapshot, out.model.train_snapshot);
        for ((na, va), (nb, vb)) in out.model.named_params().iter().zip(&loaded.named_params()) {
            assert_eq!(na, nb);
            let bits_a: Vec<u64> = va.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = vb.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b, "tensor {}", na);
        }
        let (ba, bb) = (out.model.banks.as_ref().unwrap(), loaded.banks.as_ref().unwrap());
        assert_eq!(ba.source.prototypes.data(), bb.source.prototypes.data());
        assert_eq!(ba.target.inertia_trace, bb.target.inertia_trace);

        // Saving the loaded model reproduces the file byte for byte.
        let path2 = dir.path().join("model2.hctc");
        save_checkpoint(&path2, &loaded).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }
}
