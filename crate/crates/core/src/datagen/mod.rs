//! Synthetic video-gaze generation and the on-disk dataset format.

pub mod generator;
pub mod storage;

pub use generator::{
    decode_gaze, gaze_to_pog, generate_sequence, region_masks, DistractorSpec, FaceLayout,
    Rect, RegionMasks, VideoSequence, PITCH_CLAMP, PITCH_WALK_STD, YAW_CLAMP, YAW_WALK_STD,
};
pub use storage::{
    load_dataset, load_dataset_vec, write_dataset, DatasetManifest, DatasetReader, RecordMeta,
    FORMAT_VERSION, MANIFEST_NAME,
};

/// Deterministic per-(person, sequence) seed derivation from a base seed.
pub fn derive_seed(base: u64, person: u64, seq: u64) -> u64 {
    let mut x = base ^ person.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ seq.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x ^= x >> 30;
    x = x.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}
