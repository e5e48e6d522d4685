//! Binary checkpoints: `MAGIC`, a little-endian `u64` header length, a JSON header, then every
//! tensor as little-endian `f32` in header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use anomaly_nn::{Adam, AdamConfig, ParamStore};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::discriminative::{DiscArch, DiscModel};
use crate::error::{invalid, Error, Result};
use crate::fidelity::{SegArch, SegModel};
use crate::reconstruction::{ReconArch, ReconHyper, ReconModel, ReconOptim, TrainingMode};

pub const MAGIC: &[u8; 8] = b"ARCKPT01";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    meta: Value,
    tensors: Vec<TensorInfo>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: Value,
    pub tensors: Vec<(String, ArrayD<f32>)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&ArrayD<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    fn meta_field<T: for<'de> Deserialize<'de>>(&self, key: &str) -> Result<T> {
        let v = self.meta.get(key).ok_or_else(|| invalid(format!("checkpoint header lacks `{key}`")))?;
        Ok(serde_json::from_value(v.clone())?)
    }

    fn push_store(&mut self, prefix: &str, store: &ParamStore<f32>) {
        for p in store.iter() {
            self.tensors.push((format!("{prefix}/{}", p.name), p.value.clone()));
        }
    }

    fn load_store(&self, prefix: &str, store: &mut ParamStore<f32>) -> Result<()> {
        for p in store.iter_mut() {
            let key = format!("{prefix}/{}", p.name);
            let t = self.get(&key).ok_or_else(|| invalid(format!("checkpoint lacks tensor {key}")))?;
            if t.shape() != p.value.shape() {
                return Err(invalid(format!("tensor {key} has shape {:?}, expected {:?}", t.shape(), p.value.shape())));
            }
            p.value = t.clone();
        }
        Ok(())
    }

    fn push_adam(&mut self, prefix: &str, store: &ParamStore<f32>, adam: &Adam<f32>) {
        for ((p, m), v) in store.iter().zip(&adam.m).zip(&adam.v) {
            self.tensors.push((format!("{prefix}.m/{}", p.name), m.clone()));
            self.tensors.push((format!("{prefix}.v/{}", p.name), v.clone()));
        }
    }

    fn load_adam(&self, prefix: &str, store: &ParamStore<f32>, lr: f64, steps: u64) -> Result<Adam<f32>> {
        let mut adam = Adam::new(AdamConfig::with_lr(lr), store);
        adam.steps = steps;
        for ((p, m), v) in store.iter().zip(adam.m.iter_mut()).zip(adam.v.iter_mut()) {
            for (kind, dst) in [("m", m), ("v", v)] {
                let key = format!("{prefix}.{kind}/{}", p.name);
                let t = self.get(&key).ok_or_else(|| invalid(format!("checkpoint lacks optimizer tensor {key}")))?;
                if t.shape() != dst.shape() {
                    return Err(invalid(format!("optimizer tensor {key} has the wrong shape")));
                }
                *dst = t.clone();
            }
        }
        Ok(adam)
    }
}

/// Writes atomically (temporary file, then rename).
pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let header = Header {
        meta: ck.meta.clone(),
        tensors: ck.tensors.iter().map(|(n, t)| TensorInfo { name: n.clone(), shape: t.shape().to_vec() }).collect(),
    };
    let hbytes = serde_json::to_vec(&header)?;
    let mut bytes = Vec::with_capacity(16 + hbytes.len() + 4 * ck.tensors.iter().map(|(_, t)| t.len()).sum::<usize>());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(hbytes.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&hbytes);
    for (_, t) in &ck.tensors {
        for v in t.as_standard_layout().iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = || invalid(format!("{} is not a valid checkpoint", path.display()));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad());
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(bad)?;
    let header: Header = serde_json::from_slice(body)?;
    let mut off = 16 + hlen;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for info in header.tensors {
        let n: usize = info.shape.iter().product();
        let raw = bytes.get(off..off + 4 * n).ok_or_else(bad)?;
        off += 4 * n;
        let vals: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        tensors.push((info.name, ArrayD::from_shape_vec(IxDyn(&info.shape), vals).map_err(|_| bad())?));
    }
    if off != bytes.len() {
        return Err(bad());
    }
    Ok(Checkpoint { meta: header.meta, tensors })
}

pub fn recon_checkpoint(model: &ReconModel<f32>, opt: Option<&ReconOptim<f32>>) -> Checkpoint {
    let mut ck = Checkpoint {
        meta: json!({
            "kind": "recon",
            "arch": model.arch,
            "hyper": model.hyper,
            "mode": model.mode,
            "steps": model.steps,
            "optimizer": opt.map(|o| json!({
                "encoder_lr": o.encoder.config.lr, "encoder_steps": o.encoder.steps,
                "decoder_lr": o.decoder.config.lr, "decoder_steps": o.decoder.steps,
            })),
        }),
        tensors: Vec::new(),
    };
    ck.push_store("encoder", &model.encoder.store);
    ck.push_store("decoder", &model.decoder.store);
    if let Some(o) = opt {
        ck.push_adam("encoder", &model.encoder.store, &o.encoder);
        ck.push_adam("decoder", &model.decoder.store, &o.decoder);
    }
    ck
}

fn check_kind(ck: &Checkpoint, kind: &str) -> Result<()> {
    let found: String = ck.meta_field("kind")?;
    if found != kind {
        return Err(invalid(format!("checkpoint holds a {found} model, expected {kind}")));
    }
    Ok(())
}

#[derive(Deserialize)]
struct OptMeta {
    encoder_lr: f64,
    encoder_steps: u64,
    decoder_lr: f64,
    decoder_steps: u64,
}

#[derive(Deserialize)]
struct SingleOptMeta {
    lr: f64,
    steps: u64,
}

pub fn recon_from_checkpoint(ck: &Checkpoint) -> Result<(ReconModel<f32>, Option<ReconOptim<f32>>)> {
    check_kind(ck, "recon")?;
    let arch: ReconArch = ck.meta_field("arch")?;
    let hyper: ReconHyper = ck.meta_field("hyper")?;
    let mode: TrainingMode = ck.meta_field("mode")?;
    let mut model = ReconModel::<f32>::new(arch, hyper, mode, 0)?;
    model.steps = ck.meta_field("steps")?;
    ck.load_store("encoder", &mut model.encoder.store)?;
    ck.load_store("decoder", &mut model.decoder.store)?;
    let opt = match ck.meta_field::<Option<OptMeta>>("optimizer")? {
        Some(o) => Some(ReconOptim {
            encoder: ck.load_adam("encoder", &model.encoder.store, o.encoder_lr, o.encoder_steps)?,
            decoder: ck.load_adam("decoder", &model.decoder.store, o.decoder_lr, o.decoder_steps)?,
        }),
        None => None,
    };
    Ok((model, opt))
}

pub fn disc_checkpoint(model: &DiscModel<f32>, opt: Option<&Adam<f32>>) -> Checkpoint {
    let mut ck = Checkpoint {
        meta: json!({
            "kind": "disc",
            "arch": model.arch,
            "steps": model.steps,
            "optimizer": opt.map(|o| json!({"lr": o.config.lr, "steps": o.steps})),
        }),
        tensors: Vec::new(),
    };
    ck.push_store("net", &model.net.store);
    if let Some(o) = opt {
        ck.push_adam("net", &model.net.store, o);
    }
    ck
}

pub fn disc_from_checkpoint(ck: &Checkpoint) -> Result<(DiscModel<f32>, Option<Adam<f32>>)> {
    check_kind(ck, "disc")?;
    let arch: DiscArch = ck.meta_field("arch")?;
    let mut model = DiscModel::<f32>::new(arch, 0)?;
    model.steps = ck.meta_field("steps")?;
    ck.load_store("net", &mut model.net.store)?;
    let opt = match ck.meta_field::<Option<SingleOptMeta>>("optimizer")? {
        Some(o) => Some(ck.load_adam("net", &model.net.store, o.lr, o.steps)?),
        None => None,
    };
    Ok((model, opt))
}

pub fn seg_checkpoint(model: &SegModel<f32>, opt: Option<&Adam<f32>>) -> Checkpoint {
    let mut ck = Checkpoint {
        meta: json!({
            "kind": "seg",
            "arch": model.arch,
            "steps": model.steps,
            "optimizer": opt.map(|o| json!({"lr": o.config.lr, "steps": o.steps})),
        }),
        tensors: Vec::new(),
    };
    ck.push_store("net", &model.store);
    if let Some(o) = opt {
        ck.push_adam("net", &model.store, o);
    }
    ck
}

pub fn seg_from_checkpoint(ck: &Checkpoint) -> Result<(SegModel<f32>, Option<Adam<f32>>)> {
    check_kind(ck, "seg")?;
    let arch: SegArch = ck.meta_field("arch")?;
    let mut model = SegModel::<f32>::new(arch, 0)?;
    model.steps = ck.meta_field("steps")?;
    ck.load_store("net", &mut model.store)?;
    let opt = match ck.meta_field::<Option<SingleOptMeta>>("optimizer")? {
        Some(o) => Some(ck.load_adam("net", &model.store, o.lr, o.steps)?),
        None => None,
    };
    Ok((model, opt))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let mut ck = Checkpoint { meta: json!({"kind": "x"}), tensors: Vec::new() };
        ck.tensors.push(("a".into(), ArrayD::from_elem(IxDyn(&[2, 3]), 1.5f32)));
        write_checkpoint(&p, &ck).unwrap();
        assert_eq!(read_checkpoint(&p).unwrap(), ck);
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(read_checkpoint(&p), Err(Error::InvalidArgument(_))));
        assert!(matches!(read_checkpoint(&dir.path().join("none")), Err(Error::MissingArtifact(_))));
    }
}
