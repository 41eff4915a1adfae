//! Dataset generation command: persons x sequences with deterministic
//! per-sequence seeds.

use std::path::Path;

use crate::datagen::{derive_seed, generate_sequence, write_dataset, DatasetManifest, VideoSequence};
use crate::error::StageError;
use crate::harness::config::GenerateConfig;

#[derive(Debug)]
pub struct GenerateSummary {
    pub manifest: DatasetManifest,
    pub sequences: usize,
    pub persons: usize,
}

/// Generate the configured grid of sequences under `dir`. Refuses to write
/// into a non-empty directory unless `force` is set.
pub fn generate_dataset(cfg: &GenerateConfig, dir: &Path, force: bool) -> Result<GenerateSummary, StageError> {
    cfg.validate()?;
    if dir.exists() {
        let occupied = std::fs::read_dir(dir)?.next().is_some();
        if occupied && !force {
            return Err(StageError::Usage(format!(
                "output directory {} is not empty (pass --force to overwrite)",
                dir.display()
            )));
        }
    }
    let mut sequences = Vec::with_capacity(cfg.persons * cfg.sequences_per_person);
    for p in 0..cfg.persons {
        let person_id = format!("p{p:02}");
        let bias = cfg.bias_for(p);
        for s in 0..cfg.sequences_per_person {
            let seq_id = format!("{person_id}_s{s:02}");
            let seed = derive_seed(cfg.seed, p as u64, s as u64);
            sequences.push(generate_sequence(
                cfg.frames,
                (cfg.image_size[0], cfg.image_size[1]),
                &cfg.distractors,
                bias,
                seed,
                &person_id,
                &seq_id,
            )?);
        }
    }
    let manifest = write_dataset(&sequences, dir)?;
    Ok(GenerateSummary {
        sequences: manifest.records.len(),
        persons: cfg.persons,
        manifest,
    })
}

/// In-memory variant for tests and the acceptance suite.
pub fn generate_in_memory(cfg: &GenerateConfig) -> Result<Vec<VideoSequence>, StageError> {
    cfg.validate()?;
    let mut sequences = Vec::with_capacity(cfg.persons * cfg.sequences_per_person);
    for p in 0..cfg.persons {
        let person_id = format!("p{p:02}");
        let bias = cfg.bias_for(p);
        for s in 0..cfg.sequences_per_person {
            let seq_id = format!("{person_id}_s{s:02}");
            let seed = derive_seed(cfg.seed, p as u64, s as u64);
            sequences.push(generate_sequence(
                cfg.frames,
                (cfg.image_size[0], cfg.image_size[1]),
                &cfg.distractors,
                bias,
                seed,
                &person_id,
                &seq_id,
            )?);
        }
    }
    Ok(sequences)
}
