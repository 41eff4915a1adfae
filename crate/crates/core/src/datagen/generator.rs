//! Deterministic synthetic video-gaze renderer.
//!
//! Each frame shows a schematic face whose pupils sit at an affine offset of
//! the (bias-shifted) gaze angles inside fixed rectangular eye regions, so a
//! pixel-level centroid decoder can recover the rendered gaze analytically.
//! Distractors (a moving background blob, mouth flicker, illumination drift)
//! never touch the eye rectangles: eyes are stamped last and the
//! illumination pass skips them, which keeps the label-bearing geometry
//! byte-identical across distractor settings at equal seeds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::StageError;
use crate::numerics::tensor::{standard_normal, Tensor};

pub const PITCH_WALK_STD: f64 = 0.30;
pub const YAW_WALK_STD: f64 = 0.55;
pub const PITCH_CLAMP: f64 = 0.58;
pub const YAW_CLAMP: f64 = 0.97;
/// Extra rendering headroom beyond the walk clamp for per-person bias.
const PITCH_RENDER_MAX: f64 = 0.75;
const YAW_RENDER_MAX: f64 = 1.15;
const EYE_WHITE: f64 = 0.95;
const PUPIL_AMP: f64 = 0.85;

/// n frames of a schematic face video with per-frame gaze labels.
#[derive(Debug, Clone)]
pub struct VideoSequence {
    /// [n, h0, w0, 3] floats in [0, 1].
    pub frames: Tensor,
    /// Per-frame (pitch, yaw) in radians.
    pub gaze: Vec<[f64; 2]>,
    /// Optional per-frame normalized screen point of gaze in [0,1]^2.
    pub pog: Option<Vec<[f64; 2]>>,
    pub person_id: String,
    pub seq_id: String,
}

impl VideoSequence {
    pub fn n(&self) -> usize {
        self.frames.shape[0]
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.frames.shape[1], self.frames.shape[2])
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let stride = self.frames.shape[1] * self.frames.shape[2] * 3;
        &self.frames.data[t * stride..(t + 1) * stride]
    }

    pub fn validate(&self) -> Result<(), StageError> {
        let s = &self.frames.shape;
        if s.len() != 4 || s[3] != 3 {
            return Err(StageError::Data(format!("frames must be [n,h,w,3], got {s:?}")));
        }
        if s[0] < 2 {
            return Err(StageError::Data(format!(
                "sequence {} has {} frames; at least 2 are required",
                self.seq_id, s[0]
            )));
        }
        if self.gaze.len() != s[0] {
            return Err(StageError::Data(format!(
                "sequence {}: {} gaze labels for {} frames",
                self.seq_id,
                self.gaze.len(),
                s[0]
            )));
        }
        for (t, g) in self.gaze.iter().enumerate() {
            if g[0].abs() > std::f64::consts::FRAC_PI_2 || g[1].abs() > std::f64::consts::PI {
                return Err(StageError::Data(format!(
                    "sequence {}: gaze {:?} at frame {t} outside pitch/yaw bounds",
                    self.seq_id, g
                )));
            }
        }
        if let Some(pog) = &self.pog {
            if pog.len() != s[0] {
                return Err(StageError::Data(format!(
                    "sequence {}: {} pog labels for {} frames",
                    self.seq_id,
                    pog.len(),
                    s[0]
                )));
            }
            for p in pog {
                if !(0.0..=1.0).contains(&p[0]) || !(0.0..=1.0).contains(&p[1]) {
                    return Err(StageError::Data(format!(
                        "sequence {}: pog {:?} outside [0,1]^2",
                        self.seq_id, p
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Amplitudes of the gaze-irrelevant scene changes. Zero everywhere yields a
/// distractor-free sequence.
#[derive(Debug, Clone, Serialize, Deserialize, Default, PartialEq)]
pub struct DistractorSpec {
    pub background_motion: f64,
    pub expression_flicker: f64,
    pub illumination_drift: f64,
    pub seed: u64,
}

impl DistractorSpec {
    pub fn validate(&self) -> Result<(), StageError> {
        for (name, v) in [
            ("background_motion", self.background_motion),
            ("expression_flicker", self.expression_flicker),
            ("illumination_drift", self.illumination_drift),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(StageError::Config(format!(
                    "distractor amplitude {name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Inclusive pixel rectangle.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Rect {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }
}

/// Scene geometry plus the published affine map from gaze angles to pupil
/// pixel offsets. Everything is a pure function of the image size.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FaceLayout {
    pub h0: usize,
    pub w0: usize,
    pub eye_left: Rect,
    pub eye_right: Rect,
    pub eye_center_left: (usize, usize),
    pub eye_center_right: (usize, usize),
    /// Pupil x-offset in pixels per radian of yaw.
    pub gain_x: f64,
    /// Pupil y-offset in pixels per radian of pitch (upward gaze moves the
    /// pupil up the image: dy = -gain_y * pitch).
    pub gain_y: f64,
    pub pupil_sigma: f64,
    pub mouth: Rect,
    pub blob_center: (f64, f64),
    pub blob_orbit: f64,
    pub blob_radius: f64,
}

impl FaceLayout {
    pub fn for_size(h0: usize, w0: usize) -> Result<Self, StageError> {
        if h0 < 16 || w0 < 16 {
            return Err(StageError::Config(format!(
                "image {h0}x{w0} too small to place a face (minimum 16x16)"
            )));
        }
        let eye = |fx: f64| -> (Rect, (usize, usize)) {
            let cx = (fx * w0 as f64).round() as usize;
            let cy = (0.42 * h0 as f64).round() as usize;
            let hw = (0.145 * w0 as f64).floor() as usize;
            let hh = (0.10 * h0 as f64).floor() as usize;
            (Rect { x0: cx - hw, y0: cy - hh, x1: cx + hw, y1: cy + hh }, (cx, cy))
        };
        let (eye_left, eye_center_left) = eye(0.30);
        let (eye_right, eye_center_right) = eye(0.70);
        let sigma = (0.021 * h0.min(w0) as f64).max(0.8);
        let hw = (0.145 * w0 as f64).floor();
        let hh = (0.10 * h0 as f64).floor();
        let gain_x = ((hw - 3.0 * sigma - 0.5) / YAW_RENDER_MAX).max(0.2);
        let gain_y = ((hh - 3.0 * sigma - 0.5) / PITCH_RENDER_MAX).max(0.2);
        let mcx = (0.5 * w0 as f64).round() as usize;
        let mcy = (0.78 * h0 as f64).round() as usize;
        let mhw = (0.12 * w0 as f64).floor().max(1.0) as usize;
        let mhh = (0.045 * h0 as f64).floor().max(1.0) as usize;
        Ok(FaceLayout {
            h0,
            w0,
            eye_left,
            eye_right,
            eye_center_left,
            eye_center_right,
            gain_x,
            gain_y,
            pupil_sigma: sigma,
            mouth: Rect {
                x0: mcx - mhw,
                y0: mcy - mhh,
                x1: (mcx + mhw).min(w0 - 1),
                y1: (mcy + mhh).min(h0 - 1),
            },
            blob_center: (0.12 * w0 as f64, 0.12 * h0 as f64),
            blob_orbit: 0.05 * h0.min(w0) as f64,
            blob_radius: 0.05 * h0.min(w0) as f64,
        })
    }

    pub fn in_eye(&self, x: usize, y: usize) -> bool {
        self.eye_left.contains(x, y) || self.eye_right.contains(x, y)
    }
}

/// Boolean masks over an feature grid marking cells whose pixel footprint
/// intersects the eye rectangles or the distractor areas (blob orbit zone
/// and mouth).
#[derive(Debug, Clone)]
pub struct RegionMasks {
    pub eye: Vec<bool>,
    pub distractor: Vec<bool>,
}

pub fn region_masks(layout: &FaceLayout, feat_h: usize, feat_w: usize) -> RegionMasks {
    let cell_h = layout.h0 as f64 / feat_h as f64;
    let cell_w = layout.w0 as f64 / feat_w as f64;
    let mut eye = vec![false; feat_h * feat_w];
    let mut distractor = vec![false; feat_h * feat_w];
    let blob_reach = layout.blob_orbit + layout.blob_radius + 2.0;
    for gy in 0..feat_h {
        for gx in 0..feat_w {
            let (px0, px1) = (gx as f64 * cell_w, (gx + 1) as f64 * cell_w);
            let (py0, py1) = (gy as f64 * cell_h, (gy + 1) as f64 * cell_h);
            let overlaps = |r: &Rect| {
                px0 < (r.x1 + 1) as f64
                    && px1 > r.x0 as f64
                    && py0 < (r.y1 + 1) as f64
                    && py1 > r.y0 as f64
            };
            if overlaps(&layout.eye_left) || overlaps(&layout.eye_right) {
                eye[gy * feat_w + gx] = true;
            }
            let blob = px0 < layout.blob_center.0 + blob_reach
                && px1 > layout.blob_center.0 - blob_reach
                && py0 < layout.blob_center.1 + blob_reach
                && py1 > layout.blob_center.1 - blob_reach;
            if blob || overlaps(&layout.mouth) {
                distractor[gy * feat_w + gx] = true;
            }
        }
    }
    // a cell claimed by the eye never counts as distractor
    for i in 0..eye.len() {
        if eye[i] {
            distractor[i] = false;
        }
    }
    RegionMasks { eye, distractor }
}

fn ou_walk(n: usize, std: f64, clamp: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let kappa: f64 = 0.15;
    let step = std * (2.0 * kappa - kappa * kappa).sqrt();
    let mut x = (standard_normal(rng) * std * 0.8).clamp(-clamp, clamp);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(x);
        x += kappa * (-x) + step * standard_normal(rng);
        x = x.clamp(-clamp, clamp);
    }
    out
}

/// Map label gaze to a normalized screen point; the walk clamps keep the
/// result inside [0,1]^2.
pub fn gaze_to_pog(pitch: f64, yaw: f64) -> [f64; 2] {
    [0.5 + yaw / (2.0 * 1.0), 0.5 + pitch / (2.0 * 0.65)]
}

/// Render a sequence. Labels are the raw gaze walk; `person_bias` shifts
/// only the rendered pupil, so a model trained on unbiased persons shows a
/// per-person residual equal to the bias.
pub fn generate_sequence(
    n: usize,
    image_size: (usize, usize),
    distractors: &DistractorSpec,
    person_bias: (f64, f64),
    seed: u64,
    person_id: &str,
    seq_id: &str,
) -> Result<VideoSequence, StageError> {
    if n < 2 {
        return Err(StageError::Config(format!("sequence needs n >= 2 frames, got {n}")));
    }
    distractors.validate()?;
    let (h0, w0) = image_size;
    let layout = FaceLayout::for_size(h0, w0)?;

    let mut gaze_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dis_rng = ChaCha8Rng::seed_from_u64(seed ^ distractors.seed.rotate_left(17) ^ 0x9e37_79b9_7f4a_7c15);

    let pitch = ou_walk(n, PITCH_WALK_STD, PITCH_CLAMP, &mut gaze_rng);
    let yaw = ou_walk(n, YAW_WALK_STD, YAW_CLAMP, &mut gaze_rng);

    // distractor trajectories are drawn unconditionally so that amplitudes
    // scale a fixed path instead of re-routing the stream
    let blob_phase0: f64 = dis_rng.random::<f64>() * std::f64::consts::TAU;
    let mouth_phase: f64 = dis_rng.random::<f64>() * std::f64::consts::TAU;
    let illum_walk = ou_walk(n, 1.0, 2.5, &mut dis_rng);

    let frame_px = h0 * w0 * 3;
    let mut data = vec![0.0; n * frame_px];
    for t in 0..n {
        let frame = &mut data[t * frame_px..(t + 1) * frame_px];
        render_scene(frame, &layout, t, distractors, blob_phase0, mouth_phase, illum_walk[t]);
        let pe = pitch[t] + person_bias.0;
        let ye = yaw[t] + person_bias.1;
        for (rect, center) in [
            (&layout.eye_left, layout.eye_center_left),
            (&layout.eye_right, layout.eye_center_right),
        ] {
            stamp_eye(frame, w0, rect, center, pe, ye, &layout);
        }
        for v in frame.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }

    let gaze: Vec<[f64; 2]> = (0..n).map(|t| [pitch[t], yaw[t]]).collect();
    let pog: Vec<[f64; 2]> = gaze.iter().map(|g| gaze_to_pog(g[0], g[1])).collect();
    let seq = VideoSequence {
        frames: Tensor::new(vec![n, h0, w0, 3], data)?,
        gaze,
        pog: Some(pog),
        person_id: person_id.to_string(),
        seq_id: seq_id.to_string(),
    };
    seq.validate()?;
    Ok(seq)
}

fn render_scene(
    frame: &mut [f64],
    layout: &FaceLayout,
    t: usize,
    dis: &DistractorSpec,
    blob_phase0: f64,
    mouth_phase: f64,
    illum_w: f64,
) {
    let (h0, w0) = (layout.h0, layout.w0);
    let set = |frame: &mut [f64], x: usize, y: usize, rgb: [f64; 3]| {
        let i = (y * w0 + x) * 3;
        frame[i] = rgb[0];
        frame[i + 1] = rgb[1];
        frame[i + 2] = rgb[2];
    };

    for y in 0..h0 {
        for x in 0..w0 {
            set(frame, x, y, [0.16, 0.18, 0.22]);
        }
    }

    if dis.background_motion > 0.0 {
        let phase = blob_phase0 + 0.25 * dis.background_motion * t as f64;
        let bx = layout.blob_center.0 + layout.blob_orbit * phase.cos();
        let by = layout.blob_center.1 + layout.blob_orbit * phase.sin();
        let r = layout.blob_radius;
        let x_lo = (bx - r - 2.0).floor().max(0.0) as usize;
        let x_hi = ((bx + r + 2.0).ceil() as usize).min(w0 - 1);
        let y_lo = (by - r - 2.0).floor().max(0.0) as usize;
        let y_hi = ((by + r + 2.0).ceil() as usize).min(h0 - 1);
        for y in y_lo..=y_hi {
            for x in x_lo..=x_hi {
                let d = ((x as f64 - bx).powi(2) + (y as f64 - by).powi(2)).sqrt();
                let a = smoothstep(r + 1.0, r - 1.0, d);
                if a > 0.0 {
                    let i = (y * w0 + x) * 3;
                    frame[i] = frame[i] * (1.0 - a) + 0.35 * a;
                    frame[i + 1] = frame[i + 1] * (1.0 - a) + 0.85 * a;
                    frame[i + 2] = frame[i + 2] * (1.0 - a) + 0.45 * a;
                }
            }
        }
    }

    // face ellipse
    let (fcx, fcy) = (0.5 * w0 as f64, 0.55 * h0 as f64);
    let (frx, fry) = (0.38 * w0 as f64, 0.42 * h0 as f64);
    for y in 0..h0 {
        for x in 0..w0 {
            let dx = (x as f64 - fcx) / frx;
            let dy = (y as f64 - fcy) / fry;
            if dx * dx + dy * dy <= 1.0 {
                set(frame, x, y, [0.78, 0.68, 0.58]);
            }
        }
    }

    // mouth, optionally flickering in intensity
    let flick = 1.0 + dis.expression_flicker * 0.6 * (0.9 * t as f64 + mouth_phase).sin();
    let m = &layout.mouth;
    for y in m.y0..=m.y1 {
        for x in m.x0..=m.x1 {
            set(frame, x, y, [0.48 * flick, 0.26 * flick, 0.26 * flick]);
        }
    }

    // global brightness drift everywhere except the eye rectangles
    if dis.illumination_drift > 0.0 {
        let mul = (1.0 + dis.illumination_drift * 0.25 * illum_w).clamp(0.55, 1.45);
        for y in 0..h0 {
            for x in 0..w0 {
                if layout.in_eye(x, y) {
                    continue;
                }
                let i = (y * w0 + x) * 3;
                frame[i] *= mul;
                frame[i + 1] *= mul;
                frame[i + 2] *= mul;
            }
        }
    }
}

fn stamp_eye(
    frame: &mut [f64],
    w0: usize,
    rect: &Rect,
    center: (usize, usize),
    pitch_eff: f64,
    yaw_eff: f64,
    layout: &FaceLayout,
) {
    let px = center.0 as f64 + layout.gain_x * yaw_eff;
    let py = center.1 as f64 - layout.gain_y * pitch_eff;
    let inv2s2 = 1.0 / (2.0 * layout.pupil_sigma * layout.pupil_sigma);
    for y in rect.y0..=rect.y1 {
        for x in rect.x0..=rect.x1 {
            let d2 = (x as f64 - px).powi(2) + (y as f64 - py).powi(2);
            let v = EYE_WHITE - PUPIL_AMP * (-d2 * inv2s2).exp();
            let i = (y * w0 + x) * 3;
            frame[i] = v;
            frame[i + 1] = v;
            frame[i + 2] = v;
        }
    }
}

fn smoothstep(edge0: f64, edge1: f64, x: f64) -> f64 {
    let t = ((x - edge0) / (edge1 - edge0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Pixel-level decoder: weighted darkness centroid inside each eye
/// rectangle, inverted through the published affine map. Returns the
/// *rendered* (bias-shifted) gaze.
pub fn decode_gaze(frame: &[f64], layout: &FaceLayout) -> (f64, f64) {
    let w0 = layout.w0;
    let mut dx_sum = 0.0;
    let mut dy_sum = 0.0;
    for (rect, center) in [
        (&layout.eye_left, layout.eye_center_left),
        (&layout.eye_right, layout.eye_center_right),
    ] {
        let mut wsum = 0.0;
        let mut cx = 0.0;
        let mut cy = 0.0;
        for y in rect.y0..=rect.y1 {
            for x in rect.x0..=rect.x1 {
                let i = (y * w0 + x) * 3;
                let gray = (frame[i] + frame[i + 1] + frame[i + 2]) / 3.0;
                let w = (EYE_WHITE - gray).max(0.0);
                wsum += w;
                cx += w * x as f64;
                cy += w * y as f64;
            }
        }
        dx_sum += cx / wsum - center.0 as f64;
        dy_sum += cy / wsum - center.1 as f64;
    }
    let dx = dx_sum / 2.0;
    let dy = dy_sum / 2.0;
    (-dy / layout.gain_y, dx / layout.gain_x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec_zero() -> DistractorSpec {
        DistractorSpec::default()
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_sequence(5, (64, 64), &spec_zero(), (0.0, 0.0), 99, "p", "s").unwrap();
        let b = generate_sequence(5, (64, 64), &spec_zero(), (0.0, 0.0), 99, "p", "s").unwrap();
        assert_eq!(a.frames.data, b.frames.data);
        assert_eq!(a.gaze, b.gaze);
    }

    #[test]
    fn too_few_frames_or_tiny_image_rejected() {
        assert!(generate_sequence(1, (64, 64), &spec_zero(), (0.0, 0.0), 1, "p", "s").is_err());
        assert!(generate_sequence(5, (12, 64), &spec_zero(), (0.0, 0.0), 1, "p", "s").is_err());
    }

    #[test]
    fn centroid_decoder_recovers_labels_without_distractors() {
        let layout = FaceLayout::for_size(64, 64).unwrap();
        for seed in 0..5 {
            let s = generate_sequence(20, (64, 64), &spec_zero(), (0.0, 0.0), seed, "p", "s").unwrap();
            for t in 0..s.n() {
                let (p, y) = decode_gaze(s.frame(t), &layout);
                assert!(
                    (p - s.gaze[t][0]).abs() < 0.02,
                    "seed {seed} frame {t}: pitch decode {p} vs {}",
                    s.gaze[t][0]
                );
                assert!(
                    (y - s.gaze[t][1]).abs() < 0.02,
                    "seed {seed} frame {t}: yaw decode {y} vs {}",
                    s.gaze[t][1]
                );
            }
        }
    }

    #[test]
    fn person_bias_shows_up_as_decoded_offset() {
        let layout = FaceLayout::for_size(64, 64).unwrap();
        let s = generate_sequence(15, (64, 64), &spec_zero(), (0.1, 0.0), 5, "p", "s").unwrap();
        for t in 0..s.n() {
            let (p, _) = decode_gaze(s.frame(t), &layout);
            let residual = p - s.gaze[t][0];
            assert!((residual - 0.1).abs() < 0.02, "frame {t}: residual {residual}");
        }
    }

    #[test]
    fn distractors_leave_eye_pixels_untouched() {
        let clean = generate_sequence(8, (64, 64), &spec_zero(), (0.0, 0.0), 7, "p", "s").unwrap();
        let noisy = generate_sequence(
            8,
            (64, 64),
            &DistractorSpec {
                background_motion: 2.0,
                expression_flicker: 1.0,
                illumination_drift: 1.0,
                seed: 3,
            },
            (0.0, 0.0),
            7,
            "p",
            "s",
        )
        .unwrap();
        let layout = FaceLayout::for_size(64, 64).unwrap();
        assert_eq!(clean.gaze, noisy.gaze);
        let mut changed_outside = 0usize;
        for t in 0..8 {
            let (fc, fn_) = (clean.frame(t), noisy.frame(t));
            for y in 0..64 {
                for x in 0..64 {
                    let i = (y * 64 + x) * 3;
                    let diff = (fc[i] - fn_[i]).abs()
                        + (fc[i + 1] - fn_[i + 1]).abs()
                        + (fc[i + 2] - fn_[i + 2]).abs();
                    if layout.in_eye(x, y) {
                        assert!(diff < 1e-6, "eye pixel ({x},{y}) differs by {diff} at t={t}");
                    } else if diff > 1e-6 {
                        changed_outside += 1;
                    }
                }
            }
        }
        assert!(changed_outside > 100, "distractors changed only {changed_outside} pixels");
    }

    #[test]
    fn pog_stays_in_unit_square() {
        for seed in 0..10 {
            let s = generate_sequence(30, (64, 64), &spec_zero(), (0.0, 0.0), seed, "p", "s").unwrap();
            s.validate().unwrap();
        }
    }

    #[test]
    fn region_masks_separate_eye_from_distractor_cells() {
        let layout = FaceLayout::for_size(64, 64).unwrap();
        let masks = region_masks(&layout, 8, 8);
        let eyes = masks.eye.iter().filter(|&&b| b).count();
        let dis = masks.distractor.iter().filter(|&&b| b).count();
        assert!(eyes >= 2 && dis >= 2, "eyes {eyes} distractor {dis}");
        for i in 0..64 {
            assert!(!(masks.eye[i] && masks.distractor[i]));
        }
    }
}
