//! Diagnostic: ridge-regress gaze from frozen random-init backbone
//! features to measure how much signal the feature map carries.

use stage_core::datagen::{generate_sequence, DistractorSpec};
use stage_core::harness::GenerateConfig;
use stage_core::model::{ModelConfig, StageModel};
use stage_core::tsm::angular_error_angles_deg;

fn main() {
    let cfg = ModelConfig::default();
    let model = StageModel::build(cfg, 42).unwrap();
    let gen = |seed: u64, n_seq: usize| -> Vec<stage_core::datagen::VideoSequence> {
        (0..n_seq)
            .map(|i| {
                generate_sequence(
                    8,
                    (64, 64),
                    &DistractorSpec::default(),
                    (0.0, 0.0),
                    seed * 1000 + i as u64,
                    "p",
                    &format!("s{i}"),
                )
                .unwrap()
            })
            .collect()
    };
    let train = gen(1, 40);
    let eval = gen(2, 12);
    let _ = GenerateConfig::default();

    let mut feats: Vec<Vec<f64>> = Vec::new();
    let mut targets: Vec<[f64; 2]> = Vec::new();
    for s in &train {
        for (t, f) in model.frame_features(&s.frames).unwrap().into_iter().enumerate() {
            feats.push(f);
            targets.push(s.gaze[t]);
        }
    }
    let n = feats.len();
    let d = feats[0].len() + 1; // bias column
    eprintln!("probe: {n} frames x {d} features");
    // normal equations with ridge
    let mut xtx = vec![0.0; d * d];
    let mut xty = vec![0.0; d * 2];
    for (f, y) in feats.iter().zip(&targets) {
        let mut row = f.clone();
        row.push(1.0);
        for i in 0..d {
            if row[i] == 0.0 {
                continue;
            }
            for j in 0..d {
                xtx[i * d + j] += row[i] * row[j];
            }
            xty[i * 2] += row[i] * y[0];
            xty[i * 2 + 1] += row[i] * y[1];
        }
    }
    for i in 0..d {
        xtx[i * d + i] += 1.0;
    }
    // cholesky solve
    let l = chol(&xtx, d);
    let w0 = solve(&l, &(0..d).map(|i| xty[i * 2]).collect::<Vec<_>>(), d);
    let w1 = solve(&l, &(0..d).map(|i| xty[i * 2 + 1]).collect::<Vec<_>>(), d);

    for (name, set) in [("train", &train), ("eval", &eval)] {
        let mut err = 0.0;
        let mut cnt = 0;
        for s in set.iter() {
            for (t, f) in model.frame_features(&s.frames).unwrap().into_iter().enumerate() {
                let mut row = f;
                row.push(1.0);
                let p: f64 = row.iter().zip(&w0).map(|(a, b)| a * b).sum();
                let y: f64 = row.iter().zip(&w1).map(|(a, b)| a * b).sum();
                err += angular_error_angles_deg(&[p, y], &s.gaze[t]);
                cnt += 1;
            }
        }
        eprintln!("{name}: linear-probe mean angular error {:.3} deg over {cnt} frames", err / cnt as f64);
    }
}

fn chol(a: &[f64], n: usize) -> Vec<f64> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                l[i * n + j] = s.max(1e-12).sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    l
}

fn solve(l: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut x = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            x[i] -= l[i * n + k] * x[k];
        }
        x[i] /= l[i * n + i];
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            x[i] -= l[k * n + i] * x[k];
        }
        x[i] /= l[i * n + i];
    }
    x
}
