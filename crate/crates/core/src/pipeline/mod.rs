//! Three-stage training, closed-loop evaluation and the run configuration.

mod config;
mod eval;
mod model;
mod train;

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{Ablation, DataConfig, EvalConfig, FastConfig, FlowConfig, RunConfig, Stage, StageConfig};
pub use eval::{
    drawn_scenes, evaluate, evaluate_scenes, rollout, seen_scenes, EpisodeOutcome, EvalReport, Policy, RandomPolicy,
    Scene, ScriptedPolicy, VlaPolicy, SUCCESS_HORIZON,
};
pub use model::{ActionNorm, InferredChunk, RobotExample, RobotGraph, Vla};
pub use train::{
    action_chunks, csv_header, fit_fast, label_dataset, logs_to_csv, optimizer_for, qa_step, robot_step,
    run_stage1_lam, train_vla, Corpus, StageReport, StepLog,
};

use crate::backbone::BackboneError;
use crate::data::{generate_dataset, generate_qa, io::episode_dir_name, DataError, Dataset, QaSample};
use crate::expert::ExpertError;
use crate::fast::FastError;
use crate::grad::GradError;
use crate::lam::{write_labels, LamError, LatentCode};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("missing {0}")]
    Missing(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("training diverged at {stage} (loss {loss})")]
    Diverged { stage: String, loss: f64 },
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Fast(#[from] FastError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Expert(#[from] ExpertError),
    #[error(transparent)]
    Lam(#[from] LamError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub const LABELS_FILE: &str = "latent_labels.txt";

/// Robot episodes and QA samples generated from the run seed.
pub fn generate_data(cfg: &RunConfig) -> Result<(Dataset, Vec<QaSample>), PipelineError> {
    let ds = generate_dataset(cfg.data.episodes, cfg.seed)?;
    let qa = if cfg.data.qa_samples > 0 { generate_qa(cfg.data.qa_samples, cfg.seed ^ 0x51A)? } else { Vec::new() };
    Ok((ds, qa))
}

/// Writes one label file inside each episode directory of `root`.
pub fn write_dataset_labels(root: &Path, labels: &[Vec<LatentCode>]) -> Result<(), PipelineError> {
    for (i, l) in labels.iter().enumerate() {
        let dir = root.join(episode_dir_name(i));
        std::fs::create_dir_all(&dir)?;
        write_labels(&dir.join(LABELS_FILE), l)?;
    }
    Ok(())
}

pub fn read_dataset_labels(root: &Path, n: usize) -> Result<Vec<Vec<LatentCode>>, PipelineError> {
    (0..n)
        .map(|i| Ok(crate::lam::read_labels(&root.join(episode_dir_name(i)).join(LABELS_FILE), i)?))
        .collect()
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub ablation: Ablation,
    pub seed: u64,
    pub lam_losses: Vec<f64>,
    pub pretrain: StageReport,
    pub finetune: StageReport,
    pub pretrain_eval: EvalReport,
    pub finetune_eval: EvalReport,
}

impl RunSummary {
    pub fn final_success(&self) -> f64 {
        self.finetune_eval.success_rate
    }
}

/// Evaluation scenes for a run: training initial configurations when
/// `cfg.eval.seen`, otherwise scenes from a held-out seed.
pub fn eval_scenes(cfg: &RunConfig, ds: &Dataset) -> Vec<Scene> {
    if cfg.eval.seen {
        seen_scenes(ds, cfg.eval.episodes)
    } else {
        drawn_scenes(cfg.eval.episodes, cfg.seed.wrapping_add(1_000_003))
    }
}

/// Generates data and runs all stages, evaluating after pretraining and after
/// finetuning. Artifacts go under `out` when given.
pub fn run_pipeline(
    cfg: &RunConfig,
    out: Option<&Path>,
    mut log: impl FnMut(&str),
) -> Result<RunSummary, PipelineError> {
    cfg.validate()?;
    let start = std::time::Instant::now();
    let mut log = move |m: &str| log(&format!("[{:.1}s] {m}", start.elapsed().as_secs_f64()));
    let (ds, qa) = generate_data(cfg)?;
    log(&format!("data: {} episodes, {} qa samples", ds.episodes.len(), qa.len()));

    let (labels, lam_losses) = if cfg.ablation.use_lam {
        let (lam, labels, losses) = run_stage1_lam(cfg, &ds, |step, loss| {
            if step % 200 == 0 {
                log(&format!("lam step {step} loss {loss:.5}"));
            }
        })?;
        if let Some(dir) = out {
            std::fs::create_dir_all(dir)?;
            lam.save(&dir.join("lam.ckpt"))?;
            write_dataset_labels(&dir.join("labels"), &labels)?;
        }
        (labels, losses)
    } else {
        (Vec::new(), Vec::new())
    };

    let fast = if cfg.ablation.use_fast { Some(fit_fast(cfg, &ds)?) } else { None };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x71A);
    let mut vla = Vla::new(cfg, fast, ActionNorm::fit(&ds), &mut rng);
    let corpus = Corpus::new(&ds, &labels, &qa);
    let scenes = eval_scenes(cfg, &ds);

    let run_stage = |vla: &mut Vla, stage: Stage, log: &mut dyn FnMut(&str)| -> Result<(StageReport, EvalReport), PipelineError> {
        let report = train_vla(vla, cfg, stage, &corpus, |l| {
            if l.step % 250 == 0 {
                log(&format!(
                    "{stage:?} step {} lat {:.4} fast {:.4} answer {:.4} flow {:.4}",
                    l.step, l.loss_lat, l.loss_fast, l.loss_answer, l.loss_flow
                ));
            }
        })?;
        let mut ev = evaluate_scenes(&mut VlaPolicy::new(vla), &scenes, cfg.eval.max_steps, cfg.seed)?;
        log(&format!("{stage:?} eval success {:.3}", ev.success_rate));
        if let Some(dir) = out {
            let name = format!("{:?}", stage).to_lowercase();
            let csv = dir.join(format!("{name}_losses.csv"));
            std::fs::create_dir_all(dir)?;
            std::fs::write(&csv, logs_to_csv(&report.logs))?;
            ev.losses_csv = Some(csv);
            ev.write(dir, &format!("{name}_eval"))?;
            vla.save(&dir.join(format!("{name}.ckpt")), cfg)?;
        }
        Ok((report, ev))
    };
    let (pretrain, pretrain_eval) = run_stage(&mut vla, Stage::Pretrain, &mut log)?;
    let (finetune, finetune_eval) = run_stage(&mut vla, Stage::Finetune, &mut log)?;
    Ok(RunSummary { ablation: cfg.ablation, seed: cfg.seed, lam_losses, pretrain, finetune, pretrain_eval, finetune_eval })
}

/// Success rates of the full model and the ablation without FAST and LAM, per seed.
#[derive(Clone, Debug)]
pub struct AblationSummary {
    pub seeds: Vec<u64>,
    pub full: Vec<f64>,
    pub ablated: Vec<f64>,
}

impl AblationSummary {
    pub fn mean(v: &[f64]) -> f64 {
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("seed full no_fast_no_lam\n");
        for (i, seed) in self.seeds.iter().enumerate() {
            s.push_str(&format!("{seed} {:.4} {:.4}\n", self.full[i], self.ablated[i]));
        }
        s.push_str(&format!("mean {:.4} {:.4}\n", Self::mean(&self.full), Self::mean(&self.ablated)));
        s
    }
}

pub fn run_ablation(
    base: &RunConfig,
    seeds: &[u64],
    out: Option<&Path>,
    mut log: impl FnMut(&str),
) -> Result<AblationSummary, PipelineError> {
    let mut summary = AblationSummary { seeds: seeds.to_vec(), full: Vec::new(), ablated: Vec::new() };
    for &seed in seeds {
        for ablation in [Ablation { use_fast: true, use_lam: true }, Ablation { use_fast: false, use_lam: false }] {
            let cfg = RunConfig { seed, ablation, ..base.clone() };
            let dir: Option<PathBuf> = out.map(|d| d.join(format!("seed{seed}_{}", ablation.label())));
            let r = run_pipeline(&cfg, dir.as_deref(), |m| log(&format!("[seed {seed} {}] {m}", ablation.label())))?;
            if ablation.use_fast {
                summary.full.push(r.final_success());
            } else {
                summary.ablated.push(r.final_success());
            }
        }
    }
    if let Some(d) = out {
        std::fs::create_dir_all(d)?;
        std::fs::write(d.join("ablation.txt"), summary.to_text())?;
    }
    Ok(summary)
}
