//! On-disk dataset layout: a JSON manifest listing per-sequence binary
//! tensor files (16-byte header + little-endian f64 payload) and diff-able
//! JSON label files.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::generator::{FaceLayout, VideoSequence};
use crate::error::StageError;
use crate::numerics::tensor::Tensor;

pub const MANIFEST_NAME: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"SVG1";
const FLAG_POG: u16 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecordMeta {
    pub sequence_file: String,
    pub label_file: String,
    pub person_id: String,
    pub seq_id: String,
    pub n: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub image_size: [usize; 2],
    /// Published gaze-to-pixel affine map and scene geometry.
    pub layout: FaceLayout,
    pub records: Vec<RecordMeta>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LabelFile {
    person_id: String,
    seq_id: String,
    n: usize,
    gaze: Vec<[f64; 2]>,
    pog: Option<Vec<[f64; 2]>>,
}

/// Write sequences under `dir` and return the manifest. Storage is lossless:
/// loading reproduces every float bit-for-bit.
pub fn write_dataset(sequences: &[VideoSequence], dir: &Path) -> Result<DatasetManifest, StageError> {
    if sequences.is_empty() {
        return Err(StageError::Data("refusing to write an empty dataset".into()));
    }
    let (h0, w0) = sequences[0].image_size();
    fs::create_dir_all(dir)?;
    let mut records = Vec::with_capacity(sequences.len());
    for (i, seq) in sequences.iter().enumerate() {
        seq.validate()?;
        if seq.image_size() != (h0, w0) {
            return Err(StageError::Data(format!(
                "sequence {} has image size {:?}, dataset is {:?}",
                seq.seq_id,
                seq.image_size(),
                (h0, w0)
            )));
        }
        let seq_name = format!("seq_{i:04}.bin");
        let label_name = format!("seq_{i:04}.labels.json");
        write_sequence_file(&dir.join(&seq_name), seq)?;
        let labels = LabelFile {
            person_id: seq.person_id.clone(),
            seq_id: seq.seq_id.clone(),
            n: seq.n(),
            gaze: seq.gaze.clone(),
            pog: seq.pog.clone(),
        };
        fs::write(dir.join(&label_name), serde_json::to_string_pretty(&labels).unwrap())?;
        records.push(RecordMeta {
            sequence_file: seq_name,
            label_file: label_name,
            person_id: seq.person_id.clone(),
            seq_id: seq.seq_id.clone(),
            n: seq.n(),
        });
    }
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        image_size: [h0, w0],
        layout: FaceLayout::for_size(h0, w0)?,
        records,
    };
    fs::write(dir.join(MANIFEST_NAME), serde_json::to_string_pretty(&manifest).unwrap())?;
    Ok(manifest)
}

fn write_sequence_file(path: &Path, seq: &VideoSequence) -> Result<(), StageError> {
    let (h0, w0) = seq.image_size();
    let n = seq.n();
    let mut buf = Vec::with_capacity(16 + seq.frames.data.len() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(n as u16).to_le_bytes());
    buf.extend_from_slice(&(h0 as u16).to_le_bytes());
    buf.extend_from_slice(&(w0 as u16).to_le_bytes());
    let flags: u16 = if seq.pog.is_some() { FLAG_POG } else { 0 };
    buf.extend_from_slice(&flags.to_le_bytes());
    for v in &seq.frames.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for g in &seq.gaze {
        buf.extend_from_slice(&g[0].to_le_bytes());
        buf.extend_from_slice(&g[1].to_le_bytes());
    }
    if let Some(pog) = &seq.pog {
        for p in pog {
            buf.extend_from_slice(&p[0].to_le_bytes());
            buf.extend_from_slice(&p[1].to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

fn read_sequence_file(path: &Path, person_id: &str, seq_id: &str) -> Result<VideoSequence, StageError> {
    let mut f = fs::File::open(path)
        .map_err(|e| StageError::Data(format!("cannot open {}: {e}", path.display())))?;
    let mut header = [0u8; 16];
    f.read_exact(&mut header)
        .map_err(|e| StageError::Data(format!("short header in {}: {e}", path.display())))?;
    if &header[0..4] != MAGIC {
        return Err(StageError::Data(format!("{} is not a sequence file (bad magic)", path.display())));
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(StageError::Data(format!(
            "{}: format version {version}, expected {FORMAT_VERSION}",
            path.display()
        )));
    }
    let n = u16::from_le_bytes(header[8..10].try_into().unwrap()) as usize;
    let h0 = u16::from_le_bytes(header[10..12].try_into().unwrap()) as usize;
    let w0 = u16::from_le_bytes(header[12..14].try_into().unwrap()) as usize;
    let flags = u16::from_le_bytes(header[14..16].try_into().unwrap());
    let has_pog = flags & FLAG_POG != 0;

    let mut rest = Vec::new();
    f.read_to_end(&mut rest)?;
    let frame_vals = n * h0 * w0 * 3;
    let expect = (frame_vals + n * 2 + if has_pog { n * 2 } else { 0 }) * 8;
    if rest.len() != expect {
        return Err(StageError::Data(format!(
            "{}: payload is {} bytes, header implies {expect}",
            path.display(),
            rest.len()
        )));
    }
    let mut floats = rest.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let frames: Vec<f64> = floats.by_ref().take(frame_vals).collect();
    let gaze: Vec<[f64; 2]> = (0..n)
        .map(|_| [floats.next().unwrap(), floats.next().unwrap()])
        .collect();
    let pog = has_pog.then(|| {
        (0..n)
            .map(|_| [floats.next().unwrap(), floats.next().unwrap()])
            .collect()
    });
    Ok(VideoSequence {
        frames: Tensor::new(vec![n, h0, w0, 3], frames)?,
        gaze,
        pog,
        person_id: person_id.to_string(),
        seq_id: seq_id.to_string(),
    })
}

/// Streaming reader over a dataset directory.
pub struct DatasetReader {
    dir: PathBuf,
    manifest: DatasetManifest,
    next: usize,
}

impl DatasetReader {
    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }
}

impl Iterator for DatasetReader {
    type Item = Result<VideoSequence, StageError>;

    fn next(&mut self) -> Option<Self::Item> {
        let rec = self.manifest.records.get(self.next)?.clone();
        self.next += 1;
        Some(load_record(&self.dir, &rec))
    }
}

fn load_record(dir: &Path, rec: &RecordMeta) -> Result<VideoSequence, StageError> {
    let seq = read_sequence_file(&dir.join(&rec.sequence_file), &rec.person_id, &rec.seq_id)?;
    if seq.n() != rec.n {
        return Err(StageError::Data(format!(
            "record {}: manifest says n={}, file {} holds {} frames",
            rec.seq_id,
            rec.n,
            rec.sequence_file,
            seq.n()
        )));
    }
    let label_path = dir.join(&rec.label_file);
    let label_text = fs::read_to_string(&label_path)
        .map_err(|e| StageError::Data(format!("cannot read {}: {e}", label_path.display())))?;
    let labels: LabelFile = serde_json::from_str(&label_text)
        .map_err(|e| StageError::Data(format!("corrupt label file {}: {e}", label_path.display())))?;
    if labels.n != seq.n() || labels.gaze != seq.gaze {
        return Err(StageError::Data(format!(
            "record {}: label file {} disagrees with sequence payload",
            rec.seq_id, rec.label_file
        )));
    }
    seq.validate()?;
    Ok(seq)
}

pub fn load_dataset(dir: &Path) -> Result<DatasetReader, StageError> {
    let manifest_path = dir.join(MANIFEST_NAME);
    if !manifest_path.exists() {
        return Err(StageError::Data(format!(
            "manifest missing: no {} in {}",
            MANIFEST_NAME,
            dir.display()
        )));
    }
    let text = fs::read_to_string(&manifest_path)?;
    let manifest: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| StageError::Data(format!("corrupt manifest {}: {e}", manifest_path.display())))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(StageError::Data(format!(
            "manifest format version {} unsupported (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    Ok(DatasetReader { dir: dir.to_path_buf(), manifest, next: 0 })
}

/// Load every sequence eagerly.
pub fn load_dataset_vec(dir: &Path) -> Result<(DatasetManifest, Vec<VideoSequence>), StageError> {
    let reader = load_dataset(dir)?;
    let manifest = reader.manifest().clone();
    let seqs: Result<Vec<_>, _> = reader.collect();
    Ok((manifest, seqs?))
}
