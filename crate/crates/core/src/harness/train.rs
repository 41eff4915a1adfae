//! Training loop: cosine-annealed SGD with momentum over seeded minibatches
//! of whole sequences, periodic evaluation, checkpointing, and exact
//! resumption.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datagen::{derive_seed, VideoSequence};
use crate::error::StageError;
use crate::harness::checkpoint::{load_checkpoint, save_checkpoint};
use crate::harness::config::ExperimentConfig;
use crate::harness::eval::evaluate_model;
use crate::harness::metrics::{MetricsRecord, MetricsWriter};
use crate::model::StageModel;
use crate::numerics::optim::{cosine_anneal_lr, SgdMomentum};
use crate::numerics::tape::Tape;

pub struct TrainOutcome {
    pub checkpoint_path: PathBuf,
    pub metrics_path: PathBuf,
    pub final_loss: f64,
    pub final_eval_deg: Option<f64>,
    pub iterations_run: usize,
}

/// Deterministic batch for one iteration: indices derived purely from
/// (seed, iteration), so resumption reproduces the stream exactly.
fn batch_indices(seed: u64, iteration: usize, pool: usize, batch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xba7c4, iteration as u64));
    rand::seq::index::sample(&mut rng, pool, batch.min(pool)).into_vec()
}

fn check_seq_len(seqs: &[VideoSequence], want: usize) -> Result<(), StageError> {
    for s in seqs {
        if s.n() != want {
            return Err(StageError::Data(format!(
                "sequence {} has {} frames, config seq_len is {want}",
                s.seq_id,
                s.n()
            )));
        }
    }
    Ok(())
}

pub fn train(
    cfg: &ExperimentConfig,
    train_seqs: &[VideoSequence],
    eval_seqs: Option<&[VideoSequence]>,
) -> Result<TrainOutcome, StageError> {
    cfg.validate()?;
    if train_seqs.is_empty() {
        return Err(StageError::Data("training dataset is empty".into()));
    }
    check_seq_len(train_seqs, cfg.train.seq_len)?;
    let model = StageModel::build(cfg.model.clone(), cfg.train.seed)?;
    let opt = SgdMomentum::new(cfg.train.lr0.max(1e-12), cfg.train.momentum)?;
    run_loop(cfg, model, opt, 0, train_seqs, eval_seqs)
}

/// Continue a checkpointed run to the configured iteration count; with
/// equal seeds this reproduces the uninterrupted run step for step.
pub fn resume(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    train_seqs: &[VideoSequence],
    eval_seqs: Option<&[VideoSequence]>,
) -> Result<TrainOutcome, StageError> {
    cfg.validate()?;
    check_seq_len(train_seqs, cfg.train.seq_len)?;
    let loaded = load_checkpoint(checkpoint)?;
    if loaded.model.cfg != cfg.model {
        return Err(StageError::Config(
            "checkpoint model configuration differs from the experiment config".into(),
        ));
    }
    run_loop(cfg, loaded.model, loaded.optimizer, loaded.iteration, train_seqs, eval_seqs)
}

fn run_loop(
    cfg: &ExperimentConfig,
    mut model: StageModel,
    mut opt: SgdMomentum,
    start_iter: usize,
    train_seqs: &[VideoSequence],
    eval_seqs: Option<&[VideoSequence]>,
) -> Result<TrainOutcome, StageError> {
    let out_dir = &cfg.output.dir;
    std::fs::create_dir_all(out_dir)?;
    let mut metrics = MetricsWriter::create(out_dir)?;
    let tag = cfg.variant_tag();
    let t = &cfg.train;
    let mut final_loss = f64::NAN;
    let mut final_eval = None;
    let ckpt_path = out_dir.join("model.stgc");

    for iter in start_iter..t.iterations {
        let started = Instant::now();
        let lr = cosine_anneal_lr(iter, t.iterations, t.lr0);
        let idx = batch_indices(t.seed, iter, train_seqs.len(), t.batch);
        let batch: Vec<&VideoSequence> = idx.iter().map(|&i| &train_seqs[i]).collect();
        let mut tape = Tape::for_training(derive_seed(t.seed, 0xd207, iter as u64));
        let loss_id = model.loss_on_batch(&mut tape, &batch)?;
        let loss = tape.data(loss_id)[0];
        if !loss.is_finite() {
            let crash = out_dir.join(format!("crash_iter{:06}.stgc", iter));
            save_checkpoint(&crash, &model, &opt, t, iter)?;
            metrics.flush()?;
            return Err(StageError::Numeric(format!(
                "loss became {loss} at iteration {iter}; last good iteration {} saved to {}",
                iter.saturating_sub(1),
                crash.display()
            )));
        }
        tape.backward(loss_id)?;
        let grads = tape.param_grads();
        drop(tape);
        if let Err(e) = opt.step(&mut model.params_mut(), &grads, lr) {
            let crash = out_dir.join(format!("crash_iter{:06}.stgc", iter));
            save_checkpoint(&crash, &model, &opt, t, iter)?;
            metrics.flush()?;
            return Err(e);
        }
        final_loss = loss;

        let mut eval_deg = None;
        if t.eval_every > 0 && (iter + 1) % t.eval_every == 0 {
            if let Some(es) = eval_seqs {
                let report = evaluate_model(&model, es, &tag)?;
                eval_deg = Some(report.overall_mean_deg);
                final_eval = eval_deg;
            }
        }
        metrics.append(&MetricsRecord {
            iteration: iter + 1,
            train_loss: loss,
            eval_error_deg: eval_deg,
            tag: tag.clone(),
            wall_ms: started.elapsed().as_millis(),
        })?;
        if t.checkpoint_every > 0 && (iter + 1) % t.checkpoint_every == 0 {
            save_checkpoint(
                &out_dir.join(format!("ckpt_iter{:06}.stgc", iter + 1)),
                &model,
                &opt,
                t,
                iter + 1,
            )?;
        }
    }
    metrics.flush()?;
    save_checkpoint(&ckpt_path, &model, &opt, t, t.iterations)?;
    let summary = serde_json::json!({
        "iterations": t.iterations,
        "final_train_loss": final_loss,
        "final_eval_error_deg": final_eval,
        "tag": tag,
    });
    std::fs::write(out_dir.join("summary.json"), serde_json::to_string_pretty(&summary).unwrap())?;
    Ok(TrainOutcome {
        checkpoint_path: ckpt_path,
        metrics_path: metrics.metrics_path.clone(),
        final_loss,
        final_eval_deg: final_eval,
        iterations_run: t.iterations - start_iter,
    })
}
