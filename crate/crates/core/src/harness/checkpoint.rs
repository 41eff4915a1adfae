//! Checkpoints: a JSON header (config snapshot, iteration, seed, blob
//! index) followed by raw little-endian f64 blobs for parameters and
//! optimizer velocity. Loading reproduces forward outputs bit-for-bit.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::StageError;
use crate::harness::config::TrainConfig;
use crate::model::{ModelConfig, StageModel};
use crate::numerics::optim::SgdMomentum;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"STGC";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    model: ModelConfig,
    train: TrainConfig,
    iteration: usize,
    seed: u64,
    params: Vec<(String, usize)>,
    velocity: Vec<(String, usize)>,
}

pub fn save_checkpoint(
    path: &Path,
    model: &StageModel,
    opt: &SgdMomentum,
    train: &TrainConfig,
    iteration: usize,
) -> Result<(), StageError> {
    let params: Vec<(String, usize)> = model
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.tensor.data.len()))
        .collect();
    let velocity: Vec<(String, usize)> =
        opt.velocity.iter().map(|(n, v)| (n.clone(), v.len())).collect();
    let header = Header {
        format_version: CHECKPOINT_VERSION,
        model: model.cfg.clone(),
        train: train.clone(),
        iteration,
        seed: train.seed,
        params,
        velocity,
    };
    let header_json = serde_json::to_vec(&header).expect("header serializes");
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(MAGIC)?;
    f.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    f.write_all(&(header_json.len() as u64).to_le_bytes())?;
    f.write_all(&header_json)?;
    let mut blob = Vec::new();
    for p in model.params() {
        for v in &p.tensor.data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    for v in opt.velocity.values() {
        for x in v {
            blob.extend_from_slice(&x.to_le_bytes());
        }
    }
    f.write_all(&blob)?;
    Ok(())
}

#[derive(Debug)]
pub struct LoadedCheckpoint {
    pub model: StageModel,
    pub optimizer: SgdMomentum,
    pub train: TrainConfig,
    pub iteration: usize,
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint, StageError> {
    let mut f = std::fs::File::open(path)
        .map_err(|e| StageError::Data(format!("cannot open checkpoint {}: {e}", path.display())))?;
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)
        .map_err(|e| StageError::Data(format!("short checkpoint {}: {e}", path.display())))?;
    if &magic != MAGIC {
        return Err(StageError::Data(format!("{} is not a checkpoint (bad magic)", path.display())));
    }
    let mut word = [0u8; 4];
    f.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != CHECKPOINT_VERSION {
        return Err(StageError::Data(format!(
            "checkpoint format version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let mut len8 = [0u8; 8];
    f.read_exact(&mut len8)?;
    let hlen = u64::from_le_bytes(len8) as usize;
    let mut hbuf = vec![0u8; hlen];
    f.read_exact(&mut hbuf)?;
    let header: Header = serde_json::from_slice(&hbuf)
        .map_err(|e| StageError::Data(format!("corrupt checkpoint header: {e}")))?;
    let mut blob = Vec::new();
    f.read_to_end(&mut blob)?;
    let expect: usize = header.params.iter().map(|(_, l)| l).sum::<usize>()
        + header.velocity.iter().map(|(_, l)| l).sum::<usize>();
    if blob.len() != expect * 8 {
        return Err(StageError::Data(format!(
            "checkpoint blob is {} bytes, header implies {}",
            blob.len(),
            expect * 8
        )));
    }
    let mut floats = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));

    let mut model = StageModel::build(header.model.clone(), header.seed)?;
    for (name, len) in &header.params {
        let data: Vec<f64> = floats.by_ref().take(*len).collect();
        model.set_param(name, data)?;
    }
    let mut velocity = BTreeMap::new();
    for (name, len) in &header.velocity {
        let data: Vec<f64> = floats.by_ref().take(*len).collect();
        velocity.insert(name.clone(), data);
    }
    let mut optimizer = SgdMomentum::new(header.train.lr0.max(1e-12), header.train.momentum)?;
    optimizer.velocity = velocity;
    Ok(LoadedCheckpoint { model, optimizer, train: header.train, iteration: header.iteration })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_sequence, DistractorSpec};
    use crate::model::ModelConfig;
    use crate::sam::{SamConfig, SamVariant};
    use crate::tsm::TsmConfig;
    use tempfile::tempdir;

    fn small_model() -> StageModel {
        let cfg = ModelConfig {
            backbone: crate::backbone::BackboneConfig {
                image_size: (16, 16),
                channels_per_stage: vec![4],
                out_spatial: (8, 8),
            },
            sam: SamConfig {
                variant: SamVariant::ConcatResidual,
                d: 8,
                attn_heads: 2,
                attn_head_dim: None,
                attn_layers: 1,
                dual_hidden: 4,
                dropout_p: 0.5,
                groups: 2,
                force_unit_attention: false,
            },
            tsm: TsmConfig { hidden: 8, max_seq_len: 8, ..TsmConfig::default() },
            loss: Default::default(),
        };
        StageModel::build(cfg, 77).unwrap()
    }

    #[test]
    fn round_trip_reproduces_forward_bit_for_bit() {
        let dir = tempdir().unwrap();
        let model = small_model();
        let opt = SgdMomentum::new(0.01, 0.9).unwrap();
        let train = TrainConfig { seed: 77, ..TrainConfig::default() };
        let path = dir.path().join("m.stgc");
        save_checkpoint(&path, &model, &opt, &train, 123).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.iteration, 123);
        let seq = generate_sequence(3, (16, 16), &DistractorSpec::default(), (0.0, 0.0), 5, "p", "s")
            .unwrap();
        let a = model.predict(&seq.frames).unwrap();
        let b = loaded.model.predict(&seq.frames).unwrap();
        assert_eq!(a.gaze, b.gaze);
    }

    #[test]
    fn bad_magic_is_a_data_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("junk.stgc");
        std::fs::write(&path, b"NOPE....").unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(matches!(err, StageError::Data(_)));
    }
}
