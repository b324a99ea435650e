use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use vla_core::data::{self, io, Dataset, QaSample};
use vla_core::fast::FastTokenizer;
use vla_core::lam::Lam;
use vla_core::pipeline::{
    self, evaluate_scenes, fit_fast, label_dataset, logs_to_csv, read_dataset_labels, run_stage1_lam, train_vla,
    write_dataset_labels, ActionNorm, Corpus, PipelineError, Policy, RandomPolicy, RunConfig, ScriptedPolicy, Stage,
    Vla, VlaPolicy,
};

#[derive(Parser)]
#[command(name = "vla", about = "Desk-scale vision-language-action training and evaluation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct ConfigArg {
    /// TOML run config; defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArg {
    fn load(&self) -> Result<RunConfig, PipelineError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Print the default config as TOML.
    Config,
    /// Generate robot episodes and QA samples into DIR/robot and DIR/qa.
    GenData {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the FAST tokenizer on a dataset's action chunks.
    FitFast {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the latent action model and label every episode.
    TrainLam {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-label a dataset with an existing LAM checkpoint.
    Label {
        #[arg(long)]
        lam: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Stage II on robot + QA data.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        data: PathBuf,
        /// FAST tokenizer file (fitted on the fly when omitted).
        #[arg(long)]
        fast: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage III on robot data, starting from a pretrained checkpoint.
    Finetune {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict one action chunk for a stored episode step.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        episode: PathBuf,
        #[arg(long, default_value_t = 0)]
        step: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Closed-loop evaluation of a checkpoint or a reference policy.
    Eval {
        /// Checkpoint; `scripted` or `random` select the reference policies.
        #[arg(long)]
        model: String,
        #[arg(long, default_value_t = 50)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Evaluate on the initial scenes of this dataset instead of fresh draws.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// All stages end to end, with evaluation after pretraining and finetuning.
    Run {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full model against the no-FAST/no-LAM ablation over several seeds.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// FAST tokenizer utilities.
    Fast {
        #[command(subcommand)]
        cmd: FastCmd,
    },
    /// Dataset utilities.
    Data {
        #[command(subcommand)]
        cmd: DataCmd,
    },
}

#[derive(Subcommand)]
enum FastCmd {
    /// Same as `fit-fast`.
    Fit {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Token ids of one episode chunk.
    Encode {
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long)]
        episode: PathBuf,
        #[arg(long, default_value_t = 0)]
        step: usize,
    },
    /// Decode whitespace-separated token ids into a chunk.
    Decode {
        #[arg(long)]
        tokenizer: PathBuf,
        ids: Vec<u32>,
    },
}

#[derive(Subcommand)]
enum DataCmd {
    /// Robot episodes only.
    Gen {
        #[arg(long, default_value_t = 500)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// QA samples only.
    Qa {
        #[arg(long = "n", alias = "samples", default_value_t = 500)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-dimension action statistics.
    Stats {
        /// Dataset directory.
        #[arg(value_name = "DIR", required_unless_present = "data_flag")]
        data: Option<PathBuf>,
        #[arg(long = "data", id = "data_flag", conflicts_with = "data")]
        data_flag: Option<PathBuf>,
    },
}

/// Accepts either the `gen-data` output root or its `robot` directory.
fn robot_dir(root: &Path) -> PathBuf {
    if root.join("index.json").exists() {
        root.to_path_buf()
    } else {
        root.join("robot")
    }
}

fn qa_dir(root: &Path) -> PathBuf {
    root.join("qa")
}

fn load_robot(root: &Path) -> Result<Dataset, PipelineError> {
    Ok(io::read_dataset(&robot_dir(root))?)
}

fn load_qa(root: &Path) -> Result<Vec<QaSample>, PipelineError> {
    let dir = qa_dir(root);
    if dir.join("qa.json").exists() {
        Ok(io::read_qa(&dir)?)
    } else {
        Ok(Vec::new())
    }
}

fn load_labels(cfg: &RunConfig, root: &Path, ds: &Dataset) -> Result<Vec<Vec<vla_core::lam::LatentCode>>, PipelineError> {
    if cfg.ablation.use_lam {
        read_dataset_labels(&robot_dir(root), ds.episodes.len())
    } else {
        Ok(Vec::new())
    }
}

fn fit_fast_cmd(cfg: &ConfigArg, data: &Path, out: &Path) -> Result<(), PipelineError> {
    let cfg = cfg.load()?;
    let tok = fit_fast(&cfg, &load_robot(data)?)?;
    tok.save(out)?;
    println!("vocab {} ids, {} merges", tok.id_space(), tok.vocab.merges().len());
    Ok(())
}

fn stage_cmd(vla: &mut Vla, cfg: &RunConfig, stage: Stage, data: &Path, out: &Path) -> Result<(), PipelineError> {
    let ds = load_robot(data)?;
    let qa = if stage == Stage::Pretrain { load_qa(data)? } else { Vec::new() };
    let labels = load_labels(cfg, data, &ds)?;
    let corpus = Corpus::new(&ds, &labels, &qa);
    let report = train_vla(vla, cfg, stage, &corpus, |l| {
        if l.step % 100 == 0 {
            eprintln!(
                "step {} lat {:.4} fast {:.4} answer {:.4} flow {:.4}",
                l.step, l.loss_lat, l.loss_fast, l.loss_answer, l.loss_flow
            );
        }
    })?;
    vla.save(out, cfg)?;
    std::fs::write(out.with_extension("csv"), logs_to_csv(&report.logs))?;
    println!("saved {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    match cli.cmd {
        Cmd::Config => print!("{}", RunConfig::default().to_toml()),
        Cmd::GenData { cfg, out } => {
            let cfg = cfg.load()?;
            let (ds, qa) = pipeline::generate_data(&cfg)?;
            io::write_dataset(&robot_dir(&out), &ds)?;
            if !qa.is_empty() {
                io::write_qa(&qa_dir(&out), &qa)?;
            }
            println!("{} episodes, {} qa samples -> {}", ds.episodes.len(), qa.len(), out.display());
        }
        Cmd::FitFast { cfg, data, out } | Cmd::Fast { cmd: FastCmd::Fit { cfg, data, out } } => {
            fit_fast_cmd(&cfg, &data, &out)?
        }
        Cmd::TrainLam { cfg, data, out } => {
            let cfg = cfg.load()?;
            let ds = load_robot(&data)?;
            let (lam, labels, _) = run_stage1_lam(&cfg, &ds, |step, loss| {
                if step % 100 == 0 {
                    eprintln!("lam step {step} loss {loss:.5}");
                }
            })?;
            lam.save(&out)?;
            write_dataset_labels(&robot_dir(&data), &labels)?;
            println!("saved {} and labels for {} episodes", out.display(), labels.len());
        }
        Cmd::Label { lam, data } => {
            let lam = Lam::load(&lam)?;
            let ds = load_robot(&data)?;
            let labels = label_dataset(&ds, &lam)?;
            write_dataset_labels(&robot_dir(&data), &labels)?;
            println!("labelled {} episodes", labels.len());
        }
        Cmd::Pretrain { cfg, data, fast, out } => {
            let cfg = cfg.load()?;
            cfg.validate()?;
            let ds = load_robot(&data)?;
            let tok = match (cfg.ablation.use_fast, fast) {
                (false, _) => None,
                (true, Some(p)) => Some(FastTokenizer::load(&p)?),
                (true, None) => Some(fit_fast(&cfg, &ds)?),
            };
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x71A);
            let mut vla = Vla::new(&cfg, tok, ActionNorm::fit(&ds), &mut rng);
            stage_cmd(&mut vla, &cfg, Stage::Pretrain, &data, &out)?;
        }
        Cmd::Finetune { cfg, data, init, out } => {
            let (mut vla, saved) = Vla::load(&init)?;
            let cfg = if cfg.config.is_some() { cfg.load()? } else { saved };
            stage_cmd(&mut vla, &cfg, Stage::Finetune, &data, &out)?;
        }
        Cmd::Infer { model, episode, step, seed } => {
            let (vla, _) = Vla::load(&model)?;
            let ep = io::read_episode(&episode)?;
            let t = step.min(ep.len() - 1);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = vla.infer_chunk(&ep.frames[t], &ep.instruction, &ep.states[t], &mut rng)?;
            println!("latents {:?}", out.latents);
            println!("context roles {:?}", out.ctx_roles);
            for a in out.native(ep.arm) {
                println!("{:.5} {:.5} {:.5} {:.5}", a[0], a[1], a[2], a[3]);
            }
        }
        Cmd::Eval { model, episodes, seed, data, out } => {
            let scenes = match data {
                Some(d) => pipeline::seen_scenes(&load_robot(&d)?, episodes),
                None => pipeline::drawn_scenes(episodes, seed),
            };
            let k = vla_core::expert::ExpertConfig::default().k;
            let loaded;
            let mut policy: Box<dyn Policy> = match model.as_str() {
                "scripted" => Box::new(ScriptedPolicy { k }),
                "random" => Box::new(RandomPolicy::new(k)),
                path => {
                    loaded = Vla::load(Path::new(path))?.0;
                    Box::new(VlaPolicy::new(&loaded))
                }
            };
            let report = evaluate_scenes(policy.as_mut(), &scenes, pipeline::SUCCESS_HORIZON, seed)?;
            if let Some(dir) = out {
                report.write(&dir, "eval")?;
            }
            print!("{}", report.to_text());
        }
        Cmd::Run { cfg, out } => {
            let cfg = cfg.load()?;
            let r = pipeline::run_pipeline(&cfg, Some(&out), |m| eprintln!("{m}"))?;
            println!(
                "pretrain success {:.3}, finetune success {:.3}",
                r.pretrain_eval.success_rate, r.finetune_eval.success_rate
            );
        }
        Cmd::Ablate { cfg, seeds, out } => {
            let cfg = cfg.load()?;
            let s = pipeline::run_ablation(&cfg, &seeds, Some(&out), |m| eprintln!("{m}"))?;
            print!("{}", s.to_text());
        }
        Cmd::Fast { cmd: FastCmd::Encode { tokenizer, episode, step } } => {
            let tok = FastTokenizer::load(&tokenizer)?;
            let ep = io::read_episode(&episode)?;
            let chunk: Vec<Vec<f64>> = ep.chunk(step, tok.chunk_len).iter().map(|r| r.to_vec()).collect();
            let ids = tok.encode(&chunk)?.ids;
            println!("{}", ids.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" "));
        }
        Cmd::Fast { cmd: FastCmd::Decode { tokenizer, ids } } => {
            let tok = FastTokenizer::load(&tokenizer)?;
            for row in tok.decode(&ids)? {
                println!("{}", row.iter().map(|v| format!("{v:.5}")).collect::<Vec<_>>().join(" "));
            }
        }
        Cmd::Data { cmd: DataCmd::Gen { episodes, seed, out } } => {
            let ds = data::generate_dataset(episodes, seed)?;
            io::write_dataset(&out, &ds)?;
            println!("{} episodes -> {}", ds.episodes.len(), out.display());
        }
        Cmd::Data { cmd: DataCmd::Qa { samples, seed, out } } => {
            let qa = data::generate_qa(samples, seed)?;
            io::write_qa(&out, &qa)?;
            println!("{} qa samples -> {}", qa.len(), out.display());
        }
        Cmd::Data { cmd: DataCmd::Stats { data, data_flag } } => {
            let data = data.or(data_flag).expect("clap enforces one of the two");
            let ds = io::read_dataset(&data).or_else(|_| io::read_dataset(&robot_dir(&data)))?;
            println!("dim p01 p99 mean std");
            for (d, s) in data::action_stats(&ds).iter().enumerate() {
                println!("{d} {:.5} {:.5} {:.5} {:.5}", s.p01, s.p99, s.mean, s.std);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
