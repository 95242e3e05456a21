//! Versioned binary checkpoints.
//!
//! Layout: magic `VLCK`, a little-endian u32 format version, a
//! length-prefixed JSON metadata blob (config, vocabulary, task, seed,
//! schedule position, optimizer hyperparameters, provenance), then three
//! sections of length-prefixed named f64 buffers: parameters (each with a
//! pretrained flag byte), first moments, second moments. Everything is
//! written in sorted path order, so save -> load -> save is byte-identical.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use vl_core::encoder::{VLConfig, VLModel, Vocabulary};
use vl_core::finetune::TaskSpec;
use vl_core::nn::{Param, ParamStore};
use vl_core::Tensor;

use crate::error::{Result, TrainError};
use crate::optim::{AdamW, OptimHyper};

pub const MAGIC: &[u8; 4] = b"VLCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub revision: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Meta {
    config: VLConfig,
    vocab: Vec<String>,
    task: Option<TaskSpec>,
    seed: u64,
    schedule_step: usize,
    epoch: u64,
    step_in_epoch: u64,
    optim_hyper: Option<OptimHyper>,
    optim_step: usize,
    provenance: Provenance,
}

/// Full training state: enough to resume bit-identically.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: VLConfig,
    pub vocab: Vec<String>,
    pub task: Option<TaskSpec>,
    pub seed: u64,
    pub schedule_step: usize,
    pub epoch: u64,
    pub step_in_epoch: u64,
    pub params: ParamStore,
    pub optimizer: Option<AdamW>,
    pub provenance: Provenance,
}

impl Checkpoint {
    pub fn to_model(&self) -> Result<VLModel> {
        let vocab = Vocabulary::from_tokens(self.vocab.clone())?;
        let cfg = self.config.clone();
        cfg.validate()?;
        Ok(VLModel { config: cfg, vocab, params: self.params.clone() })
    }
}

pub fn config_hash(config: &VLConfig, vocab: &[String]) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(config).expect("config serializes"));
    for t in vocab {
        h.update(t.as_bytes());
        h.update([0]);
    }
    let out = h.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn provenance_for(config: &VLConfig, vocab: &[String]) -> Provenance {
    Provenance {
        config_hash: config_hash(config, vocab),
        revision: format!("vl-{}", env!("CARGO_PKG_VERSION")),
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> TrainError + '_ {
    move |e| TrainError::Io { path: path.display().to_string(), source: e }
}

fn write_buffer(w: &mut impl Write, name: &str, flag: u8, shape: &[usize], data: &[f64]) -> std::io::Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&[flag])?;
    w.write_all(&(shape.len() as u32).to_le_bytes())?;
    for &d in shape {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

struct NamedBuffer {
    name: String,
    flag: u8,
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn read_buffer(r: &mut impl Read) -> std::io::Result<NamedBuffer> {
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b4)?;
    let name_len = u32::from_le_bytes(b4) as usize;
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name)?;
    let mut flag = [0u8; 1];
    r.read_exact(&mut flag)?;
    r.read_exact(&mut b4)?;
    let ndim = u32::from_le_bytes(b4) as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        r.read_exact(&mut b8)?;
        shape.push(u64::from_le_bytes(b8) as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    for _ in 0..numel {
        r.read_exact(&mut b8)?;
        data.push(f64::from_le_bytes(b8));
    }
    Ok(NamedBuffer {
        name: String::from_utf8_lossy(&name).into_owned(),
        flag: flag[0],
        shape,
        data,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let err = io_err(path);
    let file = std::fs::File::create(path).map_err(&err)?;
    let mut w = std::io::BufWriter::new(file);
    w.write_all(MAGIC).map_err(&err)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(&err)?;
    let meta = Meta {
        config: ckpt.config.clone(),
        vocab: ckpt.vocab.clone(),
        task: ckpt.task.clone(),
        seed: ckpt.seed,
        schedule_step: ckpt.schedule_step,
        epoch: ckpt.epoch,
        step_in_epoch: ckpt.step_in_epoch,
        optim_hyper: ckpt.optimizer.as_ref().map(|o| o.hyper),
        optim_step: ckpt.optimizer.as_ref().map(|o| o.step).unwrap_or(0),
        provenance: ckpt.provenance.clone(),
    };
    let meta_bytes = serde_json::to_vec(&meta).expect("meta serializes");
    w.write_all(&(meta_bytes.len() as u64).to_le_bytes()).map_err(&err)?;
    w.write_all(&meta_bytes).map_err(&err)?;

    w.write_all(&(ckpt.params.len() as u64).to_le_bytes()).map_err(&err)?;
    for (path_name, p) in ckpt.params.iter() {
        write_buffer(&mut w, path_name, u8::from(p.pretrained), &p.tensor.shape, &p.tensor.data)
            .map_err(&err)?;
    }
    for section in [
        ckpt.optimizer.as_ref().map(|o| &o.m),
        ckpt.optimizer.as_ref().map(|o| &o.v),
    ] {
        match section {
            Some(map) => {
                w.write_all(&(map.len() as u64).to_le_bytes()).map_err(&err)?;
                for (name, data) in map {
                    write_buffer(&mut w, name, 0, &[data.len()], data).map_err(&err)?;
                }
            }
            None => w.write_all(&0u64.to_le_bytes()).map_err(&err)?,
        }
    }
    w.flush().map_err(&err)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let err = io_err(path);
    let file = std::fs::File::open(path).map_err(&err)?;
    let mut r = std::io::BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(&err)?;
    if &magic != MAGIC {
        return Err(TrainError::CheckpointFormat("bad magic bytes".into()));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4).map_err(&err)?;
    let version = u32::from_le_bytes(b4);
    if version != FORMAT_VERSION {
        return Err(TrainError::CheckpointVersion { found: version, expected: FORMAT_VERSION });
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8).map_err(&err)?;
    let meta_len = u64::from_le_bytes(b8) as usize;
    let mut meta_bytes = vec![0u8; meta_len];
    r.read_exact(&mut meta_bytes).map_err(&err)?;
    let meta: Meta = serde_json::from_slice(&meta_bytes)
        .map_err(|e| TrainError::CheckpointFormat(format!("bad metadata: {e}")))?;

    r.read_exact(&mut b8).map_err(&err)?;
    let n_params = u64::from_le_bytes(b8) as usize;
    let mut params = ParamStore::new();
    for _ in 0..n_params {
        let buf = read_buffer(&mut r).map_err(&err)?;
        let mut tensor = Tensor::new(buf.shape, buf.data)?;
        tensor.requires_grad = true;
        params.insert(&buf.name, tensor);
        if buf.flag != 0 {
            params.get_mut(&buf.name).pretrained = true;
        }
    }

    let mut sections: Vec<BTreeMap<String, Vec<f64>>> = Vec::new();
    for _ in 0..2 {
        r.read_exact(&mut b8).map_err(&err)?;
        let n = u64::from_le_bytes(b8) as usize;
        let mut map = BTreeMap::new();
        for _ in 0..n {
            let buf = read_buffer(&mut r).map_err(&err)?;
            map.insert(buf.name, buf.data);
        }
        sections.push(map);
    }
    let v = sections.pop().unwrap();
    let m = sections.pop().unwrap();
    let optimizer = meta.optim_hyper.map(|hyper| AdamW { hyper, step: meta.optim_step, m, v });

    Ok(Checkpoint {
        config: meta.config,
        vocab: meta.vocab,
        task: meta.task,
        seed: meta.seed,
        schedule_step: meta.schedule_step,
        epoch: meta.epoch,
        step_in_epoch: meta.step_in_epoch,
        params,
        optimizer,
        provenance: meta.provenance,
    })
}

/// Builds a fresh checkpoint around a model (no optimizer state yet).
/// Gradient buffers are transient and never serialized, so they are
/// stripped here to keep save -> load an identity.
pub fn checkpoint_of(model: &VLModel, seed: u64, task: Option<TaskSpec>) -> Checkpoint {
    let mut params = model.params.clone();
    for (_, p) in params.iter_mut() {
        p.tensor.grad = None;
    }
    Checkpoint {
        config: model.config.clone(),
        vocab: model.vocab.tokens().to_vec(),
        task,
        seed,
        schedule_step: 0,
        epoch: 0,
        step_in_epoch: 0,
        params,
        optimizer: None,
        provenance: provenance_for(&model.config, model.vocab.tokens()),
    }
}

/// Carries encoder/projection/fusion weights from a checkpoint into a
/// freshly built model, marking them pretrained. Head weights stay fresh.
pub fn adopt_encoder_weights(model: &mut VLModel, ckpt: &Checkpoint) -> Result<()> {
    if ckpt.vocab != model.vocab.tokens() {
        return Err(TrainError::Config(
            "checkpoint vocabulary does not match the model vocabulary".into(),
        ));
    }
    for (path, Param { tensor, .. }) in ckpt.params.iter() {
        if path.starts_with("head.") || path.starts_with("proxy.") {
            continue;
        }
        if !model.params.contains(path) {
            return Err(TrainError::Config(format!(
                "checkpoint parameter {path} not present in the model"
            )));
        }
        let target = model.params.get_mut(path);
        if target.tensor.shape != tensor.shape {
            return Err(TrainError::Config(format!(
                "checkpoint parameter {path} has shape {:?}, model expects {:?}",
                tensor.shape, target.tensor.shape
            )));
        }
        target.tensor.data = tensor.data.clone();
        target.pretrained = true;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_checkpoint() -> Checkpoint {
        let cfg = VLConfig {
            d_txt: 8,
            d_img: 8,
            d: 12,
            text_layers: 1,
            image_layers: 1,
            fusion_layers: 1,
            heads: 2,
            image_h: 16,
            image_w: 16,
            patch_size: 8,
            image_channels: 3,
            max_text_len: 6,
            ffn_mult: 2,
            dropout: 0.0,
            final_ln: true,
        };
        let vocab = Vocabulary::from_texts(["red square blue circle"]);
        let model = VLModel::new(cfg, vocab, 7).unwrap();
        let mut ckpt = checkpoint_of(&model, 7, None);
        let mut opt = AdamW::new(&ckpt.params, OptimHyper::default());
        opt.step = 3;
        opt.m.get_mut("proj.txt.w").unwrap()[0] = 0.125;
        ckpt.optimizer = Some(opt);
        ckpt.schedule_step = 42;
        ckpt
    }

    #[test]
    fn roundtrip_is_byte_identical() {
        let ckpt = toy_checkpoint();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.vlck");
        let p2 = dir.path().join("b.vlck");
        save_checkpoint(&ckpt, &p1).unwrap();
        let loaded = load_checkpoint(&p1).unwrap();
        assert_eq!(loaded, ckpt);
        save_checkpoint(&loaded, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn version_mismatch_is_an_explicit_error() {
        let ckpt = toy_checkpoint();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.vlck");
        save_checkpoint(&ckpt, &p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[4] = 99; // version field
        std::fs::write(&p, &bytes).unwrap();
        match load_checkpoint(&p) {
            Err(TrainError::CheckpointVersion { found: 99, expected: 1 }) => {}
            other => panic!("expected version error, got {other:?}"),
        }
    }

    #[test]
    fn adopt_marks_encoder_weights_pretrained() {
        let ckpt = toy_checkpoint();
        let mut model = ckpt.to_model().unwrap();
        // fresh model of the same geometry but a different init seed
        let fresh = VLModel::new(model.config.clone(), model.vocab.clone(), 99).unwrap();
        model.params = fresh.params;
        adopt_encoder_weights(&mut model, &ckpt).unwrap();
        assert!(model.params.get("text.tok").pretrained);
        assert_eq!(model.params.get("text.tok").tensor, ckpt.params.get("text.tok").tensor);
    }
}
