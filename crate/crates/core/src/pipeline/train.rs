use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, MixStream, QaSample};
use crate::expert::{make_flow_sample, GradientBoundary};
use crate::fast::FastTokenizer;
use crate::grad::{LrSchedule, Optimizer, ParamGrads, Scope};
use crate::lam::{frame_pairs, label_episode, FramePair, Lam, LatentCode};

use super::config::{RunConfig, Stage, StageConfig};
use super::model::{RobotExample, Vla};
use super::PipelineError;

/// Losses averaged over the samples of one step that carry each term.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub loss_lat: f64,
    pub loss_fast: f64,
    pub loss_answer: f64,
    pub loss_flow: f64,
}

#[derive(Clone, Debug, Default)]
pub struct StageReport {
    pub logs: Vec<StepLog>,
    pub noise_draws: usize,
    pub robot_samples: usize,
    pub qa_samples: usize,
    /// Largest |gradient| on a backbone parameter produced by a step, per step.
    pub backbone_grad_max: Vec<f64>,
}

pub fn csv_header() -> &'static str {
    "step,loss_lat,loss_fast,loss_answer,loss_flow"
}

pub fn logs_to_csv(logs: &[StepLog]) -> String {
    let mut s = String::from(csv_header());
    s.push('\n');
    for l in logs {
        s.push_str(&format!("{},{},{},{},{}\n", l.step, l.loss_lat, l.loss_fast, l.loss_answer, l.loss_flow));
    }
    s
}

pub fn optimizer_for(cfg: &RunConfig, st: &StageConfig) -> Optimizer {
    let schedule = LrSchedule { base: st.lr, total_steps: st.steps, warmup: st.warmup, floor: 0.05 };
    let opt = Optimizer::new(cfg.optimizer, schedule);
    if cfg.clip_norm > 0.0 {
        opt.with_clip(cfg.clip_norm)
    } else {
        opt
    }
}

/// Trains the latent action model on one-second frame pairs and labels every episode.
pub fn run_stage1_lam(
    cfg: &RunConfig,
    ds: &Dataset,
    mut on_step: impl FnMut(usize, f64),
) -> Result<(Lam, Vec<Vec<LatentCode>>, Vec<f64>), PipelineError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x1A11);
    let mut lam = Lam::new(cfg.lam_model.clone(), &mut rng);
    let pairs: Vec<FramePair> = ds.episodes.iter().flat_map(frame_pairs).collect();
    if pairs.is_empty() {
        return Err(PipelineError::Missing("frame pairs (episodes too short)".into()));
    }
    let mut stream = MixStream::new(&[(pairs.len(), 1.0)], cfg.seed ^ 0x1A12)?;
    let mut opt = optimizer_for(cfg, &cfg.lam);
    let mut losses = Vec::with_capacity(cfg.lam.steps);
    for step in 0..cfg.lam.steps {
        let batch: Vec<FramePair> = (0..cfg.lam.batch)
            .map(|_| pairs[stream.next().expect("endless").index].clone())
            .collect();
        let loss = lam.train_step(&batch, &mut opt, &mut rng)?;
        on_step(step, loss);
        losses.push(loss);
    }
    let labels = label_dataset(ds, &lam)?;
    Ok((lam, labels, losses))
}

pub fn label_dataset(ds: &Dataset, lam: &Lam) -> Result<Vec<Vec<LatentCode>>, PipelineError> {
    Ok(ds.episodes.iter().map(|ep| label_episode(ep, lam)).collect::<Result<_, _>>()?)
}

/// Every `k`-step chunk of every episode (zero-padded past the end).
pub fn action_chunks(ds: &Dataset, k: usize) -> Vec<Vec<Vec<f64>>> {
    ds.episodes
        .iter()
        .flat_map(|ep| (0..ep.len()).map(move |t| ep.chunk(t, k).iter().map(|r| r.to_vec()).collect()))
        .collect()
}

pub fn fit_fast(cfg: &RunConfig, ds: &Dataset) -> Result<FastTokenizer, PipelineError> {
    Ok(FastTokenizer::fit(&action_chunks(ds, cfg.expert.k), cfg.fast.gamma, cfg.fast.vocab_size)?)
}

/// Training data for the VLA stages.
pub struct Corpus<'a> {
    pub ds: &'a Dataset,
    pub labels: &'a [Vec<LatentCode>],
    pub qa: &'a [QaSample],
    /// `(episode, step)` of every robot example.
    pub index: Vec<(usize, usize)>,
}

impl<'a> Corpus<'a> {
    pub fn new(ds: &'a Dataset, labels: &'a [Vec<LatentCode>], qa: &'a [QaSample]) -> Self {
        let index = ds
            .episodes
            .iter()
            .enumerate()
            .flat_map(|(e, ep)| (0..ep.len().saturating_sub(1)).map(move |t| (e, t)))
            .collect();
        Self { ds, labels, qa, index }
    }

    pub fn example(&self, e: usize, t: usize, k: usize) -> RobotExample<'a> {
        let ep = &self.ds.episodes[e];
        RobotExample {
            image: &ep.frames[t],
            instruction: &ep.instruction,
            state: ep.states[t],
            chunk: ep.chunk(t, k),
            labels: self.labels.get(e).and_then(|l| l.get(t)),
        }
    }
}

/// Gradients and loss values of one robot example.
pub fn robot_step(
    vla: &Vla,
    ex: &RobotExample<'_>,
    m: usize,
    boundary: GradientBoundary,
    rng: &mut ChaCha8Rng,
) -> Result<(ParamGrads, StepLog), PipelineError> {
    let input = vla.robot_input(ex)?;
    let chunk = vla.norm.normalize(&ex.chunk);
    let samples: Vec<_> = (0..m).map(|_| make_flow_sample(&chunk, rng, vla.literal_sign)).collect();
    let mut s = Scope::new(&vla.store);
    let g = vla.robot_graph(&mut s, &input, &samples, boundary)?;
    let total = g.losses.total(&mut s, &[g.flow])?.expect("flow loss present");
    let (lat, fast, _) = g.losses.values(&s);
    let log = StepLog { step: 0, loss_lat: lat, loss_fast: fast, loss_answer: 0.0, loss_flow: s.graph.value(g.flow).item() };
    let total_v = s.graph.value(total).item();
    if !total_v.is_finite() {
        return Err(PipelineError::Diverged { stage: "robot example".into(), loss: total_v });
    }
    Ok((s.backward(total)?, log))
}

/// Gradients of the answer loss for one QA sample. Fails if any expert
/// parameter was touched.
pub fn qa_step(vla: &Vla, qa: &QaSample) -> Result<(ParamGrads, f64), PipelineError> {
    let input = vla.qa_input(&qa.frame, &qa.question, &qa.answer)?;
    let mut s = Scope::new(&vla.store);
    let (emb, layout) = vla.backbone.assemble_tokens(&mut s, &input)?;
    let out = vla.backbone.backbone_forward(&mut s, emb, &layout)?;
    let losses = vla.backbone.vlm_loss(&mut s, out.logits, &layout, &input)?;
    let loss = losses.answer.expect("answer span");
    let grads = s.backward(loss)?;
    if let Some((id, _)) = grads.iter().find(|(id, _)| vla.store.name(*id).starts_with("act.")) {
        return Err(PipelineError::Contract(format!(
            "QA sample produced a gradient on expert parameter {}",
            vla.store.name(id)
        )));
    }
    Ok((grads, s.graph.value(loss).item()))
}

/// Pretrain (mixed robot + QA stream) or finetune (robot only).
pub fn train_vla(
    vla: &mut Vla,
    cfg: &RunConfig,
    stage: Stage,
    corpus: &Corpus<'_>,
    mut on_step: impl FnMut(&StepLog),
) -> Result<StageReport, PipelineError> {
    let st = match stage {
        Stage::Pretrain => &cfg.pretrain,
        Stage::Finetune => &cfg.finetune,
        Stage::Lam => return Err(PipelineError::Config("use run_stage1_lam for the LAM stage".into())),
    };
    let boundary = st.boundary(stage);
    let salt = if stage == Stage::Pretrain { 0x5052 } else { 0x4654 };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ salt);
    let use_qa = stage == Stage::Pretrain && !corpus.qa.is_empty() && cfg.data.qa_weight > 0.0;
    let mut sources = vec![(corpus.index.len(), cfg.data.robot_weight)];
    if use_qa {
        sources.push((corpus.qa.len(), cfg.data.qa_weight));
    }
    let mut stream = MixStream::new(&sources, cfg.seed ^ salt ^ 0xD1)?;
    let mut opt = optimizer_for(cfg, st);
    let mut report = StageReport::default();
    let k = vla.k();
    for step in 0..st.steps {
        let mut grads = ParamGrads::default();
        let mut log = StepLog { step, ..StepLog::default() };
        let (mut n_robot, mut n_qa) = (0usize, 0usize);
        for _ in 0..st.batch {
            let draw = stream.next().expect("endless");
            if draw.source == 0 {
                let (e, t) = corpus.index[draw.index];
                let ex = corpus.example(e, t, k);
                let (g, l) = robot_step(vla, &ex, cfg.flow.m, boundary, &mut rng)?;
                grads.accumulate(g);
                log.loss_lat += l.loss_lat;
                log.loss_fast += l.loss_fast;
                log.loss_flow += l.loss_flow;
                report.noise_draws += cfg.flow.m;
                n_robot += 1;
            } else {
                let (g, l) = qa_step(vla, &corpus.qa[draw.index])?;
                grads.accumulate(g);
                log.loss_answer += l;
                n_qa += 1;
            }
        }
        if n_robot > 0 {
            log.loss_lat /= n_robot as f64;
            log.loss_fast /= n_robot as f64;
            log.loss_flow /= n_robot as f64;
        }
        if n_qa > 0 {
            log.loss_answer /= n_qa as f64;
        }
        report.robot_samples += n_robot;
        report.qa_samples += n_qa;
        grads.scale(1.0 / st.batch as f64);
        if !grads.is_finite() {
            return Err(PipelineError::Diverged { stage: format!("{stage:?} step {step}"), loss: f64::NAN });
        }
        report.backbone_grad_max.push(grads.max_abs_with_prefix(&vla.store, "vlm."));
        opt.step(&mut vla.store, &grads);
        on_step(&log);
        report.logs.push(log);
    }
    Ok(report)
}
