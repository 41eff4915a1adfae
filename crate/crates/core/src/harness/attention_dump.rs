//! Attention-map export: raw per-step map files plus grayscale frame
//! overlays with a red attention heat layer.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::datagen::VideoSequence;
use crate::error::StageError;
use crate::model::StageModel;

pub const ATTENTION_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"ATTN";

#[derive(Debug)]
pub struct AttentionDump {
    pub maps_path: PathBuf,
    pub overlay_paths: Vec<PathBuf>,
}

/// Write `attention.bin` (header, source frame indices, n * 2 * h * w f64
/// little-endian) and one PNG overlay per frame.
pub fn dump_attention(model: &StageModel, seq: &VideoSequence, out_dir: &Path) -> Result<AttentionDump, StageError> {
    if !model.cfg.sam.variant.has_maps() {
        return Err(StageError::Config(format!(
            "variant {} exposes no dual attention maps",
            model.cfg.sam.variant.tag()
        )));
    }
    let pred = model.predict(&seq.frames)?;
    let maps = pred.maps.expect("map-bearing variant returns maps");
    let n = maps.len();
    let (h, w) = (maps[0].0.shape[0], maps[0].0.shape[1]);
    std::fs::create_dir_all(out_dir)?;

    let maps_path = out_dir.join("attention.bin");
    let mut f = std::fs::File::create(&maps_path)?;
    f.write_all(MAGIC)?;
    f.write_all(&ATTENTION_VERSION.to_le_bytes())?;
    f.write_all(&(n as u16).to_le_bytes())?;
    f.write_all(&(h as u16).to_le_bytes())?;
    f.write_all(&(w as u16).to_le_bytes())?;
    f.write_all(&0u16.to_le_bytes())?;
    for t in 0..n {
        // z_t is computed from the pair (t-1, t); the padded first step
        // reads frame 0 twice
        let src = t.saturating_sub(1) as u32;
        f.write_all(&src.to_le_bytes())?;
    }
    for (a_prev, a_cur) in &maps {
        for v in a_prev.data.iter().chain(a_cur.data.iter()) {
            f.write_all(&v.to_le_bytes())?;
        }
    }

    let (h0, w0) = seq.image_size();
    let mut overlay_paths = Vec::with_capacity(n);
    for (t, (_, a_cur)) in maps.iter().enumerate() {
        let mut img = image::RgbImage::new(w0 as u32, h0 as u32);
        let frame = seq.frame(t);
        for y in 0..h0 {
            for x in 0..w0 {
                let i = (y * w0 + x) * 3;
                let gray = (frame[i] + frame[i + 1] + frame[i + 2]) / 3.0;
                let a = a_cur.data[(y * h / h0) * w + (x * w / w0)];
                let r = gray * (1.0 - a) + a;
                let gb = gray * (1.0 - a);
                img.put_pixel(
                    x as u32,
                    y as u32,
                    image::Rgb([
                        (r * 255.0).round() as u8,
                        (gb * 255.0).round() as u8,
                        (gb * 255.0).round() as u8,
                    ]),
                );
            }
        }
        let p = out_dir.join(format!("overlay_{t:03}.png"));
        img.save(&p)
            .map_err(|e| StageError::Data(format!("cannot write overlay {}: {e}", p.display())))?;
        overlay_paths.push(p);
    }
    Ok(AttentionDump { maps_path, overlay_paths })
}

/// Read back a map file: (frame indices, maps flattened as n*2*h*w).
pub fn read_attention(path: &Path) -> Result<(Vec<u32>, Vec<f64>, usize, usize, usize), StageError> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 16 || &bytes[0..4] != MAGIC {
        return Err(StageError::Data(format!("{} is not an attention file", path.display())));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != ATTENTION_VERSION {
        return Err(StageError::Data(format!("attention file version {version} unsupported")));
    }
    let n = u16::from_le_bytes(bytes[8..10].try_into().unwrap()) as usize;
    let h = u16::from_le_bytes(bytes[10..12].try_into().unwrap()) as usize;
    let w = u16::from_le_bytes(bytes[12..14].try_into().unwrap()) as usize;
    let mut off = 16;
    let mut indices = Vec::with_capacity(n);
    for _ in 0..n {
        indices.push(u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()));
        off += 4;
    }
    let vals = n * 2 * h * w;
    if bytes.len() != off + vals * 8 {
        return Err(StageError::Data("attention file payload truncated".into()));
    }
    let data = bytes[off..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((indices, data, n, h, w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_sequence, DistractorSpec};
    use crate::model::ModelConfig;
    use crate::sam::{SamConfig, SamVariant};
    use crate::tsm::TsmConfig;
    use tempfile::tempdir;

    fn model(variant: SamVariant) -> StageModel {
        let cfg = ModelConfig {
            backbone: crate::backbone::BackboneConfig {
                image_size: (16, 16),
                channels_per_stage: vec![4],
                out_spatial: (8, 8),
            },
            sam: SamConfig {
                variant,
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
        StageModel::build(cfg, 3).unwrap()
    }

    #[test]
    fn hybrid_dump_round_trips_with_expected_shape() {
        let dir = tempdir().unwrap();
        let m = model(SamVariant::Hybrid);
        let seq = generate_sequence(5, (16, 16), &DistractorSpec::default(), (0.0, 0.0), 2, "p", "s")
            .unwrap();
        let dump = dump_attention(&m, &seq, dir.path()).unwrap();
        assert_eq!(dump.overlay_paths.len(), 5);
        let (idx, data, n, h, w) = read_attention(&dump.maps_path).unwrap();
        assert_eq!((n, h, w), (5, 8, 8));
        assert_eq!(idx, vec![0, 0, 1, 2, 3]);
        assert_eq!(data.len(), 5 * 2 * 64);
        assert!(data.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn mapless_variants_are_rejected() {
        let dir = tempdir().unwrap();
        let m = model(SamVariant::HybridDagger);
        let seq = generate_sequence(3, (16, 16), &DistractorSpec::default(), (0.0, 0.0), 2, "p", "s")
            .unwrap();
        let err = dump_attention(&m, &seq, dir.path()).unwrap_err();
        assert!(err.to_string().contains("exposes no dual attention maps"));
    }

    #[test]
    fn constant_sequence_gives_identical_maps_across_steps() {
        let dir = tempdir().unwrap();
        let m = model(SamVariant::Dual);
        let one = generate_sequence(2, (16, 16), &DistractorSpec::default(), (0.0, 0.0), 9, "p", "s")
            .unwrap();
        let stride = 16 * 16 * 3;
        let mut data = Vec::new();
        for _ in 0..4 {
            data.extend_from_slice(&one.frames.data[..stride]);
        }
        let seq = crate::datagen::VideoSequence {
            frames: crate::numerics::tensor::Tensor::new(vec![4, 16, 16, 3], data).unwrap(),
            gaze: vec![one.gaze[0]; 4],
            pog: None,
            person_id: "p".into(),
            seq_id: "s".into(),
        };
        let dump = dump_attention(&m, &seq, dir.path()).unwrap();
        let (_, maps, n, h, w) = read_attention(&dump.maps_path).unwrap();
        let step = 2 * h * w;
        for t in 1..n {
            assert_eq!(&maps[..step], &maps[t * step..(t + 1) * step]);
        }
    }
}
