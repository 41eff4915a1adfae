//! Per-person additive bias correction: two independent one-dimensional
//! Gaussian processes (pitch, yaw) over flattened backbone features, with an
//! ARD squared-exponential kernel, constant mean, marginal-likelihood
//! pre-training on the base model's training pool, and early-stopping
//! adaptation to a handful of labeled frames per person.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::VideoSequence;
use crate::error::StageError;
use crate::model::FrozenModel;

/// Relative jitter added to the kernel diagonal before factorization.
const JITTER_REL: f64 = 1e-10;
/// Noise-variance floor.
const SIGMA2_FLOOR: f64 = 1e-6;
const THETA_FLOOR: f64 = 1e-8;

/// Constant mean, kernel scale, noise variance, and per-dimension length
/// scales: d + 3 hyperparameters in total.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GpHyperparams {
    pub mu0: f64,
    pub sigma2: f64,
    pub tau: f64,
    pub theta: Vec<f64>,
}

impl GpHyperparams {
    pub fn validate(&self) -> Result<(), StageError> {
        if !(self.sigma2 > 0.0 && self.tau > 0.0) {
            return Err(StageError::Config(format!(
                "sigma2 and tau must be positive, got {} and {}",
                self.sigma2, self.tau
            )));
        }
        if self.theta.iter().any(|&t| !(t > 0.0)) {
            return Err(StageError::Config("every length scale must be positive".into()));
        }
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.theta.len() + 3
    }

    /// Data-driven starting point: length scales follow per-dimension
    /// feature spread (so the summed exponent starts O(1)), the kernel
    /// scale follows the residual variance.
    pub fn init_from_data(features: &[Vec<f64>], targets: &[f64]) -> Self {
        let d = features.first().map(|f| f.len()).unwrap_or(1);
        let n = features.len().max(1) as f64;
        let mut mean = vec![0.0; d];
        for f in features {
            for (m, v) in mean.iter_mut().zip(f) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; d];
        for f in features {
            for ((v, m), x) in var.iter_mut().zip(&mean).zip(f) {
                *v += (x - m) * (x - m) / n;
            }
        }
        let scale = (d as f64).sqrt();
        let theta = var.iter().map(|v| scale * (v.sqrt() + 1e-2) * 2.0).collect();
        let ymean = targets.iter().sum::<f64>() / targets.len().max(1) as f64;
        let yvar = targets.iter().map(|y| (y - ymean) * (y - ymean)).sum::<f64>()
            / targets.len().max(1) as f64;
        GpHyperparams {
            mu0: ymean,
            sigma2: (0.25 * yvar).max(1e-4),
            tau: (yvar + 1e-4).max(1e-4),
            theta,
        }
    }
}

/// k(h, h') = tau * exp(-sum_s (h_s - h'_s)^2 / theta_s^2).
pub fn ard_kernel(a: &[f64], b: &[f64], hyper: &GpHyperparams) -> Result<f64, StageError> {
    if a.len() != b.len() || a.len() != hyper.theta.len() {
        return Err(StageError::ShapeMismatch {
            op: "ard_kernel",
            lhs: vec![a.len()],
            rhs: vec![b.len(), hyper.theta.len()],
        });
    }
    let s: f64 = a
        .iter()
        .zip(b)
        .zip(&hyper.theta)
        .map(|((x, y), t)| {
            let d = x - y;
            d * d / (t * t)
        })
        .sum();
    Ok(hyper.tau * (-s).exp())
}

// ── Dense symmetric solves ───────────────────────────────────────────

fn cholesky(a: &[f64], n: usize) -> Result<Vec<f64>, StageError> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= 0.0 {
                    let diag_max = (0..n).map(|k| a[k * n + k]).fold(f64::MIN, f64::max);
                    return Err(StageError::Numeric(format!(
                        "kernel matrix not positive definite at pivot {i} (value {s:.3e}, \
                         condition estimate >= {:.3e})",
                        diag_max / s.abs().max(1e-300)
                    )));
                }
                l[i * n + j] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Ok(l)
}

/// Solve (L L^T) x = b.
fn chol_solve(l: &[f64], b: &[f64], n: usize) -> Vec<f64> {
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

fn chol_logdet(l: &[f64], n: usize) -> f64 {
    (0..n).map(|i| l[i * n + i].ln()).sum::<f64>() * 2.0
}

fn chol_inverse(l: &[f64], n: usize) -> Vec<f64> {
    let mut inv = vec![0.0; n * n];
    let mut e = vec![0.0; n];
    for c in 0..n {
        e.iter_mut().for_each(|v| *v = 0.0);
        e[c] = 1.0;
        let col = chol_solve(l, &e, n);
        for r in 0..n {
            inv[r * n + c] = col[r];
        }
    }
    inv
}

// ── Conditioned regressor ────────────────────────────────────────────

/// A GP conditioned on l residual samples, caching the Cholesky factor of
/// (K_H + sigma^2 I + jitter I) and alpha = K~^{-1}(y - mu0).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GpRegressor {
    pub hyper: GpHyperparams,
    pub features: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
    chol: Vec<f64>,
    alpha: Vec<f64>,
}

fn kernel_matrix(h: &[Vec<f64>], hyper: &GpHyperparams) -> Result<Vec<f64>, StageError> {
    let l = h.len();
    let mut k = vec![0.0; l * l];
    for i in 0..l {
        for j in 0..=i {
            let v = ard_kernel(&h[i], &h[j], hyper)?;
            k[i * l + j] = v;
            k[j * l + i] = v;
        }
    }
    Ok(k)
}

impl GpRegressor {
    pub fn fit(hyper: GpHyperparams, features: Vec<Vec<f64>>, targets: Vec<f64>) -> Result<Self, StageError> {
        hyper.validate()?;
        if features.is_empty() || features.len() != targets.len() {
            return Err(StageError::Config(format!(
                "GP needs matching non-empty features/targets, got {} and {}",
                features.len(),
                targets.len()
            )));
        }
        let l = features.len();
        let mut k = kernel_matrix(&features, &hyper)?;
        let ridge = hyper.sigma2 + JITTER_REL * hyper.tau;
        for i in 0..l {
            k[i * l + i] += ridge;
        }
        let chol = cholesky(&k, l)?;
        let resid: Vec<f64> = targets.iter().map(|y| y - hyper.mu0).collect();
        let alpha = chol_solve(&chol, &resid, l);
        Ok(GpRegressor { hyper, features, targets, chol, alpha })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// Posterior mean and variance at a query point. The mean uses the
    /// standard constant-mean form mu0 + k_h^T K~^{-1} (y - mu0 1); the
    /// variance is clamped into [0, tau].
    pub fn posterior(&self, h: &[f64]) -> Result<(f64, f64), StageError> {
        let l = self.len();
        let mut kh = vec![0.0; l];
        for (ki, f) in kh.iter_mut().zip(&self.features) {
            *ki = ard_kernel(h, f, &self.hyper)?;
        }
        let mean = self.hyper.mu0 + kh.iter().zip(&self.alpha).map(|(a, b)| a * b).sum::<f64>();
        let w = chol_solve(&self.chol, &kh, l);
        let var = self.hyper.tau - kh.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
        Ok((mean, var.clamp(0.0, self.hyper.tau)))
    }

    /// Exact log marginal likelihood through the cached factorization.
    pub fn log_marginal_likelihood(&self) -> f64 {
        let l = self.len();
        let resid: Vec<f64> = self.targets.iter().map(|y| y - self.hyper.mu0).collect();
        let fit: f64 = resid.iter().zip(&self.alpha).map(|(a, b)| a * b).sum();
        -0.5 * fit - 0.5 * chol_logdet(&self.chol, l)
            - 0.5 * l as f64 * (2.0 * std::f64::consts::PI).ln()
    }

    /// Gradient of the log marginal likelihood wrt (mu0, log sigma2,
    /// log tau, log theta_s). The jitter is part of the model, so these
    /// match finite differences of `log_marginal_likelihood` exactly.
    pub fn lml_grad(&self) -> Result<LmlGrad, StageError> {
        let l = self.len();
        let d = self.hyper.theta.len();
        let kinv = chol_inverse(&self.chol, l);
        // M = alpha alpha^T - K~^{-1}
        let mut m = vec![0.0; l * l];
        for i in 0..l {
            for j in 0..l {
                m[i * l + j] = self.alpha[i] * self.alpha[j] - kinv[i * l + j];
            }
        }
        let k = kernel_matrix(&self.features, &self.hyper)?;
        let tr_m: f64 = (0..l).map(|i| m[i * l + i]).sum();
        let jitter = JITTER_REL * self.hyper.tau;

        let d_mu0: f64 = self.alpha.iter().sum();
        let d_log_sigma2 = 0.5 * self.hyper.sigma2 * tr_m;
        let mk: f64 = m.iter().zip(&k).map(|(a, b)| a * b).sum();
        let d_log_tau = 0.5 * (mk + jitter * tr_m);

        let mut d_log_theta = vec![0.0; d];
        for i in 0..l {
            for j in 0..i {
                let w = 2.0 * m[i * l + j] * k[i * l + j];
                let (fi, fj) = (&self.features[i], &self.features[j]);
                for s in 0..d {
                    let delta = fi[s] - fj[s];
                    let t = self.hyper.theta[s];
                    d_log_theta[s] += w * delta * delta / (t * t);
                }
            }
        }
        Ok(LmlGrad { d_mu0, d_log_sigma2, d_log_tau, d_log_theta })
    }
}

#[derive(Debug, Clone)]
pub struct LmlGrad {
    pub d_mu0: f64,
    pub d_log_sigma2: f64,
    pub d_log_tau: f64,
    pub d_log_theta: Vec<f64>,
}

// ── Hyperparameter optimization ──────────────────────────────────────

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: usize,
    lr: f64,
}

impl Adam {
    fn new(n: usize, lr: f64) -> Self {
        Adam { m: vec![0.0; n], v: vec![0.0; n], t: 0, lr }
    }

    /// Ascent step along `grad`.
    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let bc1 = 1.0 - B1.powi(self.t as i32);
        let bc2 = 1.0 - B2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * grad[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * grad[i] * grad[i];
            params[i] += self.lr * (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + EPS);
        }
    }
}

fn pack(h: &GpHyperparams) -> Vec<f64> {
    let mut v = vec![h.mu0, h.sigma2.ln(), h.tau.ln()];
    v.extend(h.theta.iter().map(|t| t.ln()));
    v
}

fn unpack(v: &[f64]) -> GpHyperparams {
    GpHyperparams {
        mu0: v[0],
        sigma2: v[1].exp().max(SIGMA2_FLOOR),
        tau: v[2].exp().max(1e-12),
        theta: v[3..].iter().map(|t| t.exp().max(THETA_FLOOR)).collect(),
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOpts {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub min_pool: usize,
    pub seed: u64,
}

impl Default for PretrainOpts {
    fn default() -> Self {
        PretrainOpts { steps: 200, lr: 1e-3, batch: 32, min_pool: 64, seed: 0 }
    }
}

/// Optimize hyperparameters by stochastic gradient ascent on the log
/// marginal likelihood over random pool subsets, in log space for
/// positivity. Deterministic given the seed.
pub fn gp_pretrain(
    features: &[Vec<f64>],
    targets: &[f64],
    init: GpHyperparams,
    opts: &PretrainOpts,
) -> Result<GpHyperparams, StageError> {
    if features.len() != targets.len() {
        return Err(StageError::Config("feature/target counts differ".into()));
    }
    if features.len() < opts.min_pool {
        return Err(StageError::Config(format!(
            "pre-training pool of {} is below the minimum {}",
            features.len(),
            opts.min_pool
        )));
    }
    init.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut phi = pack(&init);
    let mut adam = Adam::new(phi.len(), opts.lr);
    let mut halvings = 0u32;
    let mut step = 0usize;
    while step < opts.steps {
        let batch = opts.batch.min(features.len());
        let idx = rand::seq::index::sample(&mut rng, features.len(), batch);
        let h: Vec<Vec<f64>> = idx.iter().map(|i| features[i].clone()).collect();
        let y: Vec<f64> = idx.iter().map(|i| targets[i]).collect();
        let before = phi.clone();
        let gp = GpRegressor::fit(unpack(&phi), h.clone(), y.clone())?;
        let grad = gp.lml_grad()?;
        let mut g = vec![grad.d_mu0, grad.d_log_sigma2, grad.d_log_tau];
        g.extend(grad.d_log_theta);
        adam.step(&mut phi, &g);
        clamp_phi(&mut phi);
        // divergence guard: halve the step and retry if the objective blew up
        let ok = GpRegressor::fit(unpack(&phi), h, y)
            .map(|gp| gp.log_marginal_likelihood().is_finite())
            .unwrap_or(false);
        if !ok {
            halvings += 1;
            if halvings > 5 {
                return Err(StageError::Numeric(
                    "GP pre-training diverged after 5 step halvings".into(),
                ));
            }
            phi = before;
            adam.lr *= 0.5;
            continue;
        }
        step += 1;
    }
    Ok(unpack(&phi))
}

fn clamp_phi(phi: &mut [f64]) {
    phi[1] = phi[1].max(SIGMA2_FLOOR.ln());
    phi[2] = phi[2].clamp(-27.0, 27.0);
    for t in &mut phi[3..] {
        *t = t.clamp(THETA_FLOOR.ln(), 30.0);
    }
}

#[derive(Debug, Clone)]
pub struct AdaptOpts {
    pub max_steps: usize,
    pub patience: usize,
    pub lr: f64,
}

impl Default for AdaptOpts {
    fn default() -> Self {
        AdaptOpts { max_steps: 200, patience: 10, lr: 1e-3 }
    }
}

/// Fine-tune hyperparameters on one person's samples with early stopping on
/// their log likelihood (evaluated every step, best kept), then condition.
pub fn adapt_component(
    pretrained: &GpHyperparams,
    features: Vec<Vec<f64>>,
    targets: Vec<f64>,
    opts: &AdaptOpts,
) -> Result<GpRegressor, StageError> {
    if features.is_empty() {
        return Err(StageError::Usage("personalization needs at least one labeled frame".into()));
    }
    let mut phi = pack(pretrained);
    let mut best_phi = phi.clone();
    let mut best =
        GpRegressor::fit(unpack(&phi), features.clone(), targets.clone())?.log_marginal_likelihood();
    let mut adam = Adam::new(phi.len(), opts.lr);
    let mut since_best = 0usize;
    for _ in 0..opts.max_steps {
        let gp = GpRegressor::fit(unpack(&phi), features.clone(), targets.clone())?;
        let grad = gp.lml_grad()?;
        let mut g = vec![grad.d_mu0, grad.d_log_sigma2, grad.d_log_tau];
        g.extend(grad.d_log_theta);
        adam.step(&mut phi, &g);
        clamp_phi(&mut phi);
        let ll = GpRegressor::fit(unpack(&phi), features.clone(), targets.clone())?
            .log_marginal_likelihood();
        if ll.is_finite() && ll > best {
            best = ll;
            best_phi = phi.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= opts.patience {
                break;
            }
        }
    }
    GpRegressor::fit(unpack(&best_phi), features, targets)
}

// ── Personalized prediction ──────────────────────────────────────────

/// Frozen base model plus the two per-person correction GPs.
#[derive(Debug, Clone)]
pub struct PersonalizedPredictor {
    pub base: FrozenModel,
    pub gp_pitch: GpRegressor,
    pub gp_yaw: GpRegressor,
}

#[derive(Debug, Clone, Copy)]
pub struct PersonalizedFrame {
    pub gaze: [f64; 2],
    pub stddev: [f64; 2],
}

/// Labeled frames of one person, flattened for GP consumption.
pub struct PersonSamples {
    pub features: Vec<Vec<f64>>,
    pub pitch_residuals: Vec<f64>,
    pub yaw_residuals: Vec<f64>,
}

/// Residual targets from the frozen base: y_i = g_i - g_hat_i per component.
pub fn collect_residuals(
    base: &FrozenModel,
    sequences: &[&VideoSequence],
) -> Result<PersonSamples, StageError> {
    let mut out = PersonSamples {
        features: Vec::new(),
        pitch_residuals: Vec::new(),
        yaw_residuals: Vec::new(),
    };
    for seq in sequences {
        let pred = base.predict(&seq.frames)?;
        let feats = base.frame_features(&seq.frames)?;
        for (t, h) in feats.into_iter().enumerate() {
            out.features.push(h);
            out.pitch_residuals.push(seq.gaze[t][0] - pred.gaze[t][0]);
            out.yaw_residuals.push(seq.gaze[t][1] - pred.gaze[t][1]);
        }
    }
    Ok(out)
}

/// Adapt both component GPs to one person and return the combined
/// predictor.
pub fn gp_adapt(
    pretrained_pitch: &GpHyperparams,
    pretrained_yaw: &GpHyperparams,
    base: FrozenModel,
    samples: PersonSamples,
    opts: &AdaptOpts,
) -> Result<PersonalizedPredictor, StageError> {
    let gp_pitch =
        adapt_component(pretrained_pitch, samples.features.clone(), samples.pitch_residuals, opts)?;
    let gp_yaw = adapt_component(pretrained_yaw, samples.features, samples.yaw_residuals, opts)?;
    Ok(PersonalizedPredictor { base, gp_pitch, gp_yaw })
}

impl PersonalizedPredictor {
    /// Per frame and per component: base prediction + posterior mean, with
    /// the posterior standard deviation attached (intervals are mean +/- 2
    /// stddev).
    pub fn predict(&self, seq: &VideoSequence) -> Result<Vec<PersonalizedFrame>, StageError> {
        let pred = self.base.predict(&seq.frames)?;
        let feats = self.base.frame_features(&seq.frames)?;
        let mut out = Vec::with_capacity(feats.len());
        for (t, h) in feats.iter().enumerate() {
            let (mp, vp) = self.gp_pitch.posterior(h)?;
            let (my, vy) = self.gp_yaw.posterior(h)?;
            out.push(PersonalizedFrame {
                gaze: [pred.gaze[t][0] + mp, pred.gaze[t][1] + my],
                stddev: [vp.sqrt(), vy.sqrt()],
            });
        }
        Ok(out)
    }
}

/// One point of the uncertainty curve: prefix fraction and the MAE of each
/// component (degrees) over the lowest-variance frames of that prefix.
pub type UncertaintyCurve = Vec<(f64, f64, f64)>;

/// Sort frames ascending by posterior variance per component and report the
/// prefix MAE at each decile.
pub fn uncertainty_sorted_mae(
    pp: &PersonalizedPredictor,
    eval: &[&VideoSequence],
) -> Result<UncertaintyCurve, StageError> {
    let mut pitch: Vec<(f64, f64)> = Vec::new(); // (variance, abs error deg)
    let mut yaw: Vec<(f64, f64)> = Vec::new();
    for seq in eval {
        let preds = pp.predict(seq)?;
        for (t, p) in preds.iter().enumerate() {
            let pe = (p.gaze[0] - seq.gaze[t][0]).abs().to_degrees();
            let ye = (p.gaze[1] - seq.gaze[t][1]).abs().to_degrees();
            pitch.push((p.stddev[0] * p.stddev[0], pe));
            yaw.push((p.stddev[1] * p.stddev[1], ye));
        }
    }
    let n = pitch.len();
    if n < 10 {
        return Err(StageError::Usage(format!(
            "uncertainty curve needs at least 10 eval frames, got {n}"
        )));
    }
    pitch.sort_by(|a, b| a.0.total_cmp(&b.0));
    yaw.sort_by(|a, b| a.0.total_cmp(&b.0));
    let prefix_mae = |v: &[(f64, f64)], count: usize| -> f64 {
        v[..count].iter().map(|(_, e)| e).sum::<f64>() / count as f64
    };
    let mut curve = Vec::with_capacity(10);
    for k in 1..=10 {
        let frac = k as f64 / 10.0;
        let count = ((frac * n as f64).round() as usize).clamp(1, n);
        curve.push((frac, prefix_mae(&pitch, count), prefix_mae(&yaw, count)));
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn hyper(d: usize) -> GpHyperparams {
        GpHyperparams { mu0: 0.0, sigma2: 0.05, tau: 1.0, theta: vec![1.0; d] }
    }

    fn rand_features(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..d).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect())
            .collect()
    }

    /// Plain Gauss-Jordan inverse used as the dense direct-solve oracle.
    fn dense_inverse(a: &[f64], n: usize) -> Vec<f64> {
        let mut aug = vec![0.0; n * 2 * n];
        for r in 0..n {
            for c in 0..n {
                aug[r * 2 * n + c] = a[r * n + c];
            }
            aug[r * 2 * n + n + r] = 1.0;
        }
        for col in 0..n {
            let piv = (col..n)
                .max_by(|&x, &y| aug[x * 2 * n + col].abs().total_cmp(&aug[y * 2 * n + col].abs()))
                .unwrap();
            for c in 0..2 * n {
                aug.swap(col * 2 * n + c, piv * 2 * n + c);
            }
            let p = aug[col * 2 * n + col];
            for c in 0..2 * n {
                aug[col * 2 * n + c] /= p;
            }
            for r in 0..n {
                if r != col {
                    let f = aug[r * 2 * n + col];
                    for c in 0..2 * n {
                        aug[r * 2 * n + c] -= f * aug[col * 2 * n + c];
                    }
                }
            }
        }
        let mut inv = vec![0.0; n * n];
        for r in 0..n {
            for c in 0..n {
                inv[r * n + c] = aug[r * 2 * n + n + c];
            }
        }
        inv
    }

    fn oracle_posterior(
        h: &[Vec<f64>],
        y: &[f64],
        hy: &GpHyperparams,
        q: &[f64],
    ) -> (f64, f64) {
        let l = h.len();
        let mut k = kernel_matrix(h, hy).unwrap();
        let ridge = hy.sigma2 + JITTER_REL * hy.tau;
        for i in 0..l {
            k[i * l + i] += ridge;
        }
        let kinv = dense_inverse(&k, l);
        let kh: Vec<f64> = h.iter().map(|f| ard_kernel(q, f, hy).unwrap()).collect();
        let resid: Vec<f64> = y.iter().map(|v| v - hy.mu0).collect();
        let mut mean = hy.mu0;
        let mut var = hy.tau;
        for i in 0..l {
            for j in 0..l {
                mean += kh[i] * kinv[i * l + j] * resid[j];
                var -= kh[i] * kinv[i * l + j] * kh[j];
            }
        }
        (mean, var)
    }

    fn oracle_lml(h: &[Vec<f64>], y: &[f64], hy: &GpHyperparams) -> f64 {
        let l = h.len();
        let mut k = kernel_matrix(h, hy).unwrap();
        let ridge = hy.sigma2 + JITTER_REL * hy.tau;
        for i in 0..l {
            k[i * l + i] += ridge;
        }
        // determinant by LU-free Gauss elimination on a copy
        let mut m = k.clone();
        let mut det = 1.0;
        for col in 0..l {
            let piv = (col..l)
                .max_by(|&x, &y| m[x * l + col].abs().total_cmp(&m[y * l + col].abs()))
                .unwrap();
            if piv != col {
                for c in 0..l {
                    m.swap(col * l + c, piv * l + c);
                }
                det = -det;
            }
            det *= m[col * l + col];
            for r in col + 1..l {
                let f = m[r * l + col] / m[col * l + col];
                for c in col..l {
                    m[r * l + c] -= f * m[col * l + c];
                }
            }
        }
        let kinv = dense_inverse(&k, l);
        let resid: Vec<f64> = y.iter().map(|v| v - hy.mu0).collect();
        let mut fit = 0.0;
        for i in 0..l {
            for j in 0..l {
                fit += resid[i] * kinv[i * l + j] * resid[j];
            }
        }
        -0.5 * fit - 0.5 * det.ln() - 0.5 * l as f64 * (2.0 * std::f64::consts::PI).ln()
    }

    #[test]
    fn kernel_basics() {
        let hy = GpHyperparams { mu0: 0.0, sigma2: 0.1, tau: 2.0, theta: vec![1.0] };
        assert_relative_eq!(ard_kernel(&[0.3], &[0.3], &hy).unwrap(), 2.0);
        let v = ard_kernel(&[0.0], &[1.0], &hy).unwrap();
        assert_relative_eq!(v, 2.0 * (-1.0_f64).exp(), epsilon = 1e-12);
        assert!((v - 0.735759).abs() < 1e-6);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let a: Vec<f64> = (0..3).map(|_| rng.random::<f64>()).collect();
            let b: Vec<f64> = (0..3).map(|_| rng.random::<f64>()).collect();
            let hy3 = hyper(3);
            assert_eq!(ard_kernel(&a, &b, &hy3).unwrap(), ard_kernel(&b, &a, &hy3).unwrap());
        }
        assert!(ard_kernel(&[0.0, 1.0], &[0.0], &hy).is_err());
    }

    #[test]
    fn noiseless_interpolation_and_prior_reversion() {
        let hy = GpHyperparams { mu0: 0.0, sigma2: 1e-12, tau: 1.0, theta: vec![1.0] };
        let gp = GpRegressor::fit(hy, vec![vec![0.5]], vec![0.7]).unwrap();
        let (mean, var) = gp.posterior(&[0.5]).unwrap();
        assert!((mean - 0.7).abs() < 1e-6);
        assert!(var < 1e-6);
        // far away: back to the prior
        let hy = GpHyperparams { mu0: 0.3, sigma2: 0.01, tau: 0.8, theta: vec![1.0] };
        let gp = GpRegressor::fit(hy, vec![vec![0.0]], vec![0.9]).unwrap();
        let (mean, var) = gp.posterior(&[50.0]).unwrap();
        assert_relative_eq!(mean, 0.3, epsilon = 1e-9);
        assert_relative_eq!(var, 0.8, epsilon = 1e-9);
    }

    #[test]
    fn posterior_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for trial in 0..20 {
            let l = 2 + (trial % 9);
            let d = 1 + (trial % 3);
            let h = rand_features(l, d, &mut rng);
            let y: Vec<f64> = (0..l).map(|_| rng.random::<f64>() - 0.5).collect();
            let mut hy = hyper(d);
            hy.mu0 = 0.1;
            let gp = GpRegressor::fit(hy.clone(), h.clone(), y.clone()).unwrap();
            let q: Vec<f64> = (0..d).map(|_| rng.random::<f64>()).collect();
            let (m, v) = gp.posterior(&q).unwrap();
            let (om, ov) = oracle_posterior(&h, &y, &hy, &q);
            assert!((m - om).abs() < 1e-8, "trial {trial}: mean {m} vs {om}");
            assert!((v - ov.max(0.0)).abs() < 1e-8, "trial {trial}: var {v} vs {ov}");
            assert!((0.0..=hy.tau + 1e-9).contains(&v));
        }
    }

    #[test]
    fn lml_matches_dense_oracle_and_single_point_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = rand_features(4, 2, &mut rng);
        let y: Vec<f64> = (0..4).map(|_| rng.random::<f64>()).collect();
        let hy = hyper(2);
        let gp = GpRegressor::fit(hy.clone(), h.clone(), y.clone()).unwrap();
        assert!((gp.log_marginal_likelihood() - oracle_lml(&h, &y, &hy)).abs() < 1e-8);

        // l=1 with mu0 = y1: -0.5 ln(tau + sigma2) - 0.5 ln 2pi
        let hy = GpHyperparams { mu0: 0.4, sigma2: 0.3, tau: 1.3, theta: vec![1.0] };
        let gp = GpRegressor::fit(hy, vec![vec![0.0]], vec![0.4]).unwrap();
        let expect = -0.5 * (1.3_f64 + 0.3).ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((gp.log_marginal_likelihood() - expect).abs() < 1e-8);
    }

    #[test]
    fn lml_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..5 {
            let (l, d) = (6, 3);
            let h = rand_features(l, d, &mut rng);
            let y: Vec<f64> = (0..l).map(|_| rng.random::<f64>() - 0.5).collect();
            let hy = GpHyperparams {
                mu0: 0.05,
                sigma2: 0.2,
                tau: 0.9,
                theta: vec![1.1, 0.8, 1.4],
            };
            let gp = GpRegressor::fit(hy.clone(), h.clone(), y.clone()).unwrap();
            let g = gp.lml_grad().unwrap();
            let mut phi = pack(&hy);
            let analytic = {
                let mut v = vec![g.d_mu0, g.d_log_sigma2, g.d_log_tau];
                v.extend(g.d_log_theta.clone());
                v
            };
            let eps = 1e-5;
            for i in 0..phi.len() {
                let orig = phi[i];
                phi[i] = orig + eps;
                let up = GpRegressor::fit(unpack(&phi), h.clone(), y.clone())
                    .unwrap()
                    .log_marginal_likelihood();
                phi[i] = orig - eps;
                let down = GpRegressor::fit(unpack(&phi), h.clone(), y.clone())
                    .unwrap()
                    .log_marginal_likelihood();
                phi[i] = orig;
                let fd = (up - down) / (2.0 * eps);
                let rel = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-3);
                assert!(rel < 1e-4, "trial {trial} coord {i}: fd {fd} vs {}", analytic[i]);
            }
        }
    }

    #[test]
    fn sigma_floor_and_monotone_shrink_on_zero_residuals() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = rand_features(80, 2, &mut rng);
        let y = vec![0.0; 80];
        let init = GpHyperparams { mu0: 0.0, sigma2: 0.5, tau: 0.5, theta: vec![1.0, 1.0] };
        // run step by step to watch sigma2
        let mut last = init.sigma2;
        let mut shrinking = true;
        for steps in [10, 20, 40, 80] {
            let out = gp_pretrain(
                &h,
                &y,
                init.clone(),
                &PretrainOpts { steps, seed: 9, ..PretrainOpts::default() },
            )
            .unwrap();
            if out.sigma2 > last + 1e-12 {
                shrinking = false;
            }
            last = out.sigma2;
        }
        assert!(shrinking, "sigma2 did not shrink monotonically");
        let final_out = gp_pretrain(
            &h,
            &y,
            init,
            &PretrainOpts { steps: 3000, seed: 9, ..PretrainOpts::default() },
        )
        .unwrap();
        assert!(final_out.sigma2 < 0.05, "sigma2 {} still large", final_out.sigma2);
        assert!(final_out.sigma2 >= SIGMA2_FLOOR);
    }

    #[test]
    fn ard_recovers_relevant_dimension_ratio() {
        // residuals drawn from a known ARD GP with theta* = (1, 10): the
        // second dimension is nearly irrelevant and its recovered length
        // scale must stretch accordingly.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 96;
        let h = rand_features(n, 2, &mut rng);
        let truth = GpHyperparams { mu0: 0.0, sigma2: 1e-4, tau: 1.0, theta: vec![1.0, 10.0] };
        let mut k = kernel_matrix(&h, &truth).unwrap();
        for i in 0..n {
            k[i * n + i] += truth.sigma2 + 1e-9;
        }
        let l = cholesky(&k, n).unwrap();
        let z: Vec<f64> = (0..n)
            .map(|_| crate::numerics::tensor::standard_normal(&mut rng))
            .collect();
        let mut y = vec![0.0; n];
        for i in 0..n {
            for j in 0..=i {
                y[i] += l[i * n + j] * z[j];
            }
        }
        let init = GpHyperparams { mu0: 0.0, sigma2: 0.05, tau: 0.5, theta: vec![2.0, 2.0] };
        let out = gp_pretrain(
            &h,
            &y,
            init,
            &PretrainOpts { steps: 1200, lr: 5e-3, batch: 32, min_pool: 64, seed: 6 },
        )
        .unwrap();
        let ratio = out.theta[1] / out.theta[0];
        assert!(ratio > 3.0, "recovered ratio {ratio} (theta {:?})", out.theta);
    }

    #[test]
    fn pretrain_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h = rand_features(70, 2, &mut rng);
        let y: Vec<f64> = (0..70).map(|_| rng.random::<f64>() * 0.1).collect();
        let init = GpHyperparams::init_from_data(&h, &y);
        let opts = PretrainOpts { steps: 50, seed: 11, ..PretrainOpts::default() };
        let a = gp_pretrain(&h, &y, init.clone(), &opts).unwrap();
        let b = gp_pretrain(&h, &y, init, &opts).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn variance_never_increases_when_adding_a_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for trial in 0..20 {
            let d = 2;
            let mut h = rand_features(4, d, &mut rng);
            let mut y: Vec<f64> = (0..4).map(|_| rng.random::<f64>()).collect();
            let hy = hyper(d);
            let q: Vec<f64> = (0..d).map(|_| rng.random::<f64>()).collect();
            let before = GpRegressor::fit(hy.clone(), h.clone(), y.clone())
                .unwrap()
                .posterior(&q)
                .unwrap()
                .1;
            h.push((0..d).map(|_| rng.random::<f64>()).collect());
            y.push(rng.random::<f64>());
            let after = GpRegressor::fit(hy, h, y).unwrap().posterior(&q).unwrap().1;
            assert!(after <= before + 1e-8, "trial {trial}: {after} > {before}");
        }
    }

    #[test]
    fn adaptation_on_zero_residuals_stays_near_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h = rand_features(3, 2, &mut rng);
        let pre = GpHyperparams { mu0: 0.0, sigma2: 0.01, tau: 0.05, theta: vec![1.0, 1.0] };
        let gp = adapt_component(&pre, h.clone(), vec![0.0; 3], &AdaptOpts::default()).unwrap();
        for q in &h {
            let (mean, _) = gp.posterior(q).unwrap();
            assert!(mean.abs() < 1e-3, "mean {mean}");
        }
    }

    #[test]
    fn component_gps_are_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let h = rand_features(4, 2, &mut rng);
        let pre = hyper(2);
        let pitch_y = vec![0.1, 0.12, 0.08, 0.11];
        let gp_a = adapt_component(&pre, h.clone(), pitch_y.clone(), &AdaptOpts::default()).unwrap();
        // different yaw targets must not affect the pitch component
        let gp_b = adapt_component(&pre, h.clone(), pitch_y, &AdaptOpts::default()).unwrap();
        let q: Vec<f64> = vec![0.2, -0.3];
        assert_eq!(gp_a.posterior(&q).unwrap().0, gp_b.posterior(&q).unwrap().0);
    }

    #[test]
    fn empty_sample_set_is_a_usage_error() {
        let pre = hyper(2);
        let err = adapt_component(&pre, vec![], vec![], &AdaptOpts::default()).unwrap_err();
        assert!(matches!(err, StageError::Usage(_)));
    }
}
