//! Command-line front end: generate-data, train, eval, personalize, and
//! dump-attention. Errors print a single machine-parseable JSON line on
//! stderr and exit 2 (usage/config), 3 (data), or 4 (numeric).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use stage_core::datagen::load_dataset_vec;
use stage_core::error::StageError;
use stage_core::gp::{AdaptOpts, PretrainOpts};
use stage_core::harness::{
    dump_attention, evaluate_model, generate_dataset, load_checkpoint, personalize, pretrain_gps,
    resume, train, write_report, ExperimentConfig, PersonalizationArtifact, PretrainedGps,
};

#[derive(Parser)]
#[command(name = "stage", about = "Video gaze estimation: spatial attention over frame differences, causal temporal models, and GP personalization", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic video-gaze dataset from [data.generate] config.
    GenerateData {
        #[arg(long)]
        config: PathBuf,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train a model per the config; optionally resume from a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Mean angular error of a checkpoint over a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Report directory (defaults to the checkpoint's directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Few-shot GP personalization for one person of a dataset.
    Personalize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        person: String,
        #[arg(long, default_value_t = 3)]
        shots: usize,
        #[arg(long, default_value_t = 10)]
        resamplings: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Pre-trained GP artifact (JSON). Without it, --pretrain-data can
        /// build one; otherwise a default init is used with a warning.
        #[arg(long)]
        gp: Option<PathBuf>,
        /// Training dataset to pre-train the GPs on.
        #[arg(long)]
        pretrain_data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export attention maps and overlays for one sequence.
    DumpAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Record index within the dataset.
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!(
                "{}",
                serde_json::json!({ "error": e.kind(), "code": e.exit_code(), "message": e.to_string() })
            );
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<(), StageError> {
    match cli.command {
        Command::GenerateData { config, force } => {
            let cfg = ExperimentConfig::load(&config)?;
            let gen = cfg.data.generate.clone().ok_or_else(|| {
                StageError::Usage("config has no [data.generate] section".into())
            })?;
            let summary = generate_dataset(&gen, &cfg.output.dir, force)?;
            println!(
                "wrote {} sequences for {} persons to {} ({} frames each, distractors: bg={} flicker={} illum={})",
                summary.sequences,
                summary.persons,
                cfg.output.dir.display(),
                gen.frames,
                gen.distractors.background_motion,
                gen.distractors.expression_flicker,
                gen.distractors.illumination_drift,
            );
            Ok(())
        }
        Command::Train { config, resume: resume_from } => {
            let cfg = ExperimentConfig::load(&config)?;
            let train_dir = cfg.data.train_dir.clone().ok_or_else(|| {
                StageError::Usage("config has no data.train_dir".into())
            })?;
            let (_, train_seqs) = load_dataset_vec(&train_dir)?;
            let eval_seqs = match &cfg.data.eval_dir {
                Some(d) => Some(load_dataset_vec(d)?.1),
                None => None,
            };
            let outcome = match resume_from {
                Some(ckpt) => resume(&cfg, &ckpt, &train_seqs, eval_seqs.as_deref())?,
                None => train(&cfg, &train_seqs, eval_seqs.as_deref())?,
            };
            println!(
                "trained {} iterations, final loss {:.4}, checkpoint {}",
                outcome.iterations_run,
                outcome.final_loss,
                outcome.checkpoint_path.display()
            );
            if let Some(e) = outcome.final_eval_deg {
                println!("final eval mean angular error: {e:.3} deg");
            }
            Ok(())
        }
        Command::Eval { checkpoint, data, out } => {
            let loaded = load_checkpoint(&checkpoint)?;
            let (_, seqs) = load_dataset_vec(&data)?;
            let tag = format!(
                "{}+{}",
                loaded.model.cfg.sam.variant.tag(),
                loaded.model.cfg.tsm.variant.tag()
            );
            let report = evaluate_model(&loaded.model, &seqs, &tag)?;
            let out_dir = out.unwrap_or_else(|| {
                checkpoint.parent().map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."))
            });
            write_report(&out_dir, &report)?;
            println!(
                "mean angular error: {:.3} deg over {} frames of {} sequences ({})",
                report.overall_mean_deg, report.frames, report.sequences, report.tag
            );
            println!("{}", report.note);
            Ok(())
        }
        Command::Personalize {
            checkpoint,
            data,
            person,
            shots,
            resamplings,
            seed,
            gp,
            pretrain_data,
            out,
        } => {
            if shots == 0 {
                return Err(StageError::Usage("--shots must be at least 1".into()));
            }
            let loaded = load_checkpoint(&checkpoint)?;
            let base = loaded.model.freeze();
            let (_, seqs) = load_dataset_vec(&data)?;
            let person_seqs: Vec<_> = seqs.iter().filter(|s| s.person_id == person).collect();
            if person_seqs.is_empty() {
                return Err(StageError::Data(format!("person {person} not present in {}", data.display())));
            }
            let out_dir = out.unwrap_or_else(|| {
                checkpoint.parent().map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."))
            });
            let pretrained = match (gp, pretrain_data) {
                (Some(path), _) => PretrainedGps::load(&path)?,
                (None, Some(pool_dir)) => {
                    let (_, pool) = load_dataset_vec(&pool_dir)?;
                    let gps = pretrain_gps(&base, &pool, &PretrainOpts { seed, ..PretrainOpts::default() })?;
                    let path = out_dir.join("gp_pretrained.json");
                    gps.save(&path)?;
                    println!("pre-trained GPs saved to {}", path.display());
                    gps
                }
                (None, None) => {
                    eprintln!("warning: no pre-trained GP supplied; falling back to default init");
                    let samples = stage_core::gp::collect_residuals(&base, &person_seqs)?;
                    PretrainedGps {
                        format_version: stage_core::harness::personalize::GP_ARTIFACT_VERSION,
                        pitch: stage_core::gp::GpHyperparams::init_from_data(
                            &samples.features,
                            &samples.pitch_residuals,
                        ),
                        yaw: stage_core::gp::GpHyperparams::init_from_data(
                            &samples.features,
                            &samples.yaw_residuals,
                        ),
                    }
                }
            };
            let (report, predictor) = personalize(
                &base,
                &pretrained,
                &person,
                &person_seqs,
                shots,
                resamplings,
                seed,
                &AdaptOpts::default(),
            )?;
            std::fs::create_dir_all(&out_dir)?;
            std::fs::write(
                out_dir.join(format!("personalize_{person}.json")),
                serde_json::to_string_pretty(&report).unwrap(),
            )?;
            let artifact = PersonalizationArtifact::from_predictor(&predictor, &person);
            artifact.save(&out_dir.join(format!("personalization_{person}.json")))?;
            println!(
                "person {person}: before {:.3}±{:.3} deg, after {:.3}±{:.3} deg ({} of {} resamplings improved)",
                report.before_mean_deg,
                report.before_stderr_deg,
                report.after_mean_deg,
                report.after_stderr_deg,
                report.improved_resamplings,
                report.resamplings
            );
            println!("{}", report.note);
            Ok(())
        }
        Command::DumpAttention { checkpoint, data, index, out } => {
            let loaded = load_checkpoint(&checkpoint)?;
            let (_, seqs) = load_dataset_vec(&data)?;
            let seq = seqs.get(index).ok_or_else(|| {
                StageError::Usage(format!("record index {index} out of range ({} records)", seqs.len()))
            })?;
            let out_dir = out.unwrap_or_else(|| PathBuf::from("attention_dump"));
            let dump = dump_attention(&loaded.model, seq, &out_dir)?;
            println!(
                "wrote {} and {} overlays to {}",
                dump.maps_path.display(),
                dump.overlay_paths.len(),
                out_dir.display()
            );
            Ok(())
        }
    }
}
