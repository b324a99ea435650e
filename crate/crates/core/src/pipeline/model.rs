use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{
    route_kv, truncate_context, Backbone, ExpertContext, RouteOptions, SpanLosses, TextVocab, TokenInput,
    TokenLayout, VocabMap,
};
use crate::data::{unpad, Arm, Dataset, Image, NativeAction, Vec20, PADDED_DIMS};
use crate::expert::{euler_integrate, gaussian, ActionExpert, FlowSample, GradientBoundary};
use crate::fast::FastTokenizer;
use crate::grad::{load_checkpoint, save_checkpoint, Checkpoint, NodeId, ParamStore, Scope, Tensor};
use crate::lam::{patchify, LatentCode};

use super::config::{Ablation, RunConfig};
use super::PipelineError;

/// Per-dimension z-score used for the expert's action space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ActionNorm {
    pub fn fit(ds: &Dataset) -> Self {
        let stats = crate::data::action_stats(ds);
        Self { mean: stats.iter().map(|s| s.mean).collect(), std: stats.iter().map(|s| s.std).collect() }
    }

    pub fn identity() -> Self {
        Self { mean: vec![0.0; PADDED_DIMS], std: vec![1.0; PADDED_DIMS] }
    }

    pub fn normalize(&self, rows: &[Vec20]) -> Tensor {
        let data = rows
            .iter()
            .flat_map(|r| {
                (0..PADDED_DIMS).map(move |d| if self.std[d] > 0.0 { (r[d] - self.mean[d]) / self.std[d] } else { 0.0 })
            })
            .collect();
        Tensor::matrix(rows.len(), PADDED_DIMS, data).expect("chunk shape")
    }

    pub fn denormalize(&self, t: &Tensor) -> Vec<Vec20> {
        t.data()
            .chunks_exact(PADDED_DIMS)
            .map(|r| {
                let mut out = [0.0; PADDED_DIMS];
                for d in 0..PADDED_DIMS {
                    out[d] = self.mean[d] + r[d] * self.std[d];
                }
                out
            })
            .collect()
    }
}

/// One robot training example before tokenisation.
pub struct RobotExample<'a> {
    pub image: &'a Image,
    pub instruction: &'a str,
    pub state: Vec20,
    pub chunk: Vec<Vec20>,
    pub labels: Option<&'a LatentCode>,
}

/// Backbone, action expert and the fitted tokenisers, sharing one store.
#[derive(Clone, Debug)]
pub struct Vla {
    pub backbone: Backbone,
    pub expert: ActionExpert,
    pub store: ParamStore,
    pub text: TextVocab,
    pub fast: Option<FastTokenizer>,
    pub norm: ActionNorm,
    pub ablation: Ablation,
    pub route: RouteOptions,
    pub sigma: f64,
    pub literal_sign: bool,
}

pub struct RobotGraph {
    pub losses: SpanLosses,
    pub flow: NodeId,
    pub layout: TokenLayout,
    pub ctx_len: usize,
    pub ctx_roles: Vec<crate::backbone::Role>,
}

impl Vla {
    pub fn new<R: Rng + ?Sized>(cfg: &RunConfig, fast: Option<FastTokenizer>, norm: ActionNorm, rng: &mut R) -> Self {
        let fast_ids = fast.as_ref().map_or(cfg.fast.vocab_size, |f| f.id_space());
        let vocab = VocabMap::new(cfg.backbone.text_vocab, fast_ids);
        let backbone = Backbone::new(cfg.backbone.clone(), vocab);
        let expert = ActionExpert::new(cfg.expert.clone());
        let mut store = ParamStore::new();
        backbone.init_params(&mut store, rng);
        expert.init_params(&mut store, rng);
        Self {
            backbone,
            expert,
            store,
            text: TextVocab::standard(),
            fast,
            norm,
            ablation: cfg.ablation,
            route: RouteOptions { include_fast: cfg.flow.include_fast, lat_only_context: cfg.flow.lat_only_context },
            sigma: cfg.flow.sigma,
            literal_sign: cfg.flow.paper_literal_sign,
        }
    }

    pub fn k(&self) -> usize {
        self.expert.cfg.k
    }

    /// Token inputs for a robot example; spans disabled by the ablation are omitted.
    pub fn robot_input(&self, ex: &RobotExample<'_>) -> Result<TokenInput, PipelineError> {
        let vocab = self.backbone.vocab;
        let lat = match (self.ablation.use_lam, ex.labels) {
            (true, Some(l)) => l.indices.iter().map(|&c| vocab.latent_id(c)).collect(),
            (true, None) => return Err(PipelineError::Missing("latent labels".into())),
            (false, _) => Vec::new(),
        };
        let fast = if self.ablation.use_fast {
            let tok = self.fast.as_ref().ok_or_else(|| PipelineError::Missing("FAST tokenizer".into()))?;
            let rows: Vec<Vec<f64>> = ex.chunk.iter().map(|r| r.to_vec()).collect();
            tok.encode(&rows)?.ids.iter().map(|&t| vocab.fast_id(t as usize)).collect()
        } else {
            Vec::new()
        };
        Ok(TokenInput {
            patches: Some(patchify(ex.image)),
            text: self.text.encode(ex.instruction)?,
            state: Some(ex.state),
            qa: false,
            answer: Vec::new(),
            lat,
            fast,
        })
    }

    pub fn qa_input(&self, image: &Image, question: &str, answer: &str) -> Result<TokenInput, PipelineError> {
        Ok(TokenInput {
            patches: Some(patchify(image)),
            text: self.text.encode(question)?,
            state: None,
            qa: true,
            answer: self.text.encode(answer)?,
            lat: Vec::new(),
            fast: Vec::new(),
        })
    }

    /// Builds span losses and the flow loss for one robot example.
    pub fn robot_graph(
        &self,
        s: &mut Scope,
        input: &TokenInput,
        samples: &[FlowSample],
        boundary: GradientBoundary,
    ) -> Result<RobotGraph, PipelineError> {
        let (emb, layout) = self.backbone.assemble_tokens(s, input)?;
        let out = self.backbone.backbone_forward(s, emb, &layout)?;
        let losses = self.backbone.vlm_loss(s, out.logits, &layout, input)?;
        let ctx = self.context(s, &out.cache, boundary)?;
        let flow = self.expert.flow_loss(s, samples, &input.state.expect("robot input"), &ctx)?;
        Ok(RobotGraph { losses, flow, layout, ctx_len: ctx.len(), ctx_roles: ctx.roles })
    }

    pub fn context(
        &self,
        s: &mut Scope,
        cache: &crate::backbone::KvNodes,
        boundary: GradientBoundary,
    ) -> Result<ExpertContext, PipelineError> {
        let ctx = route_kv(s, cache, self.route)?;
        Ok(match boundary {
            GradientBoundary::Truncate => truncate_context(s, &ctx),
            GradientBoundary::FlowThrough => ctx,
        })
    }

    /// One action chunk: a single prefix forward, greedy latent decoding with
    /// the KV cache, then Euler integration of the expert field.
    pub fn infer_chunk<R: Rng + ?Sized>(
        &self,
        image: &Image,
        instruction: &str,
        state: &Vec20,
        rng: &mut R,
    ) -> Result<InferredChunk, PipelineError> {
        let input = TokenInput {
            patches: Some(patchify(image)),
            text: self.text.encode(instruction)?,
            state: Some(*state),
            ..TokenInput::default()
        };
        let mut s = Scope::new(&self.store);
        let (emb, layout) = self.backbone.assemble_tokens(&mut s, &input)?;
        let out = self.backbone.backbone_forward(&mut s, emb, &layout)?;
        let (latents, cache) = if self.ablation.use_lam {
            let (codes, cache) = self.backbone.decode_latents(&mut s, out.logits, out.cache)?;
            (codes, cache)
        } else {
            (Vec::new(), out.cache)
        };
        let ctx = self.context(&mut s, &cache, GradientBoundary::Truncate)?;
        let init = gaussian(&[self.k(), PADDED_DIMS], rng);
        let mut evals = 0usize;
        let result = euler_integrate::<_, PipelineError>(
            init,
            |a, tau| {
                evals += 1;
                let x = s.graph.constant(a.clone());
                let v = self.expert.forward(&mut s, x, tau, state, &ctx)?;
                let mut v = s.graph.value(v).clone();
                if self.literal_sign {
                    v.data_mut().iter_mut().for_each(|x| *x = -*x);
                }
                Ok(v)
            },
            self.sigma,
        )?;
        Ok(InferredChunk {
            padded: self.norm.denormalize(&result),
            latents,
            field_evals: evals,
            ctx_roles: ctx.roles.clone(),
        })
    }

    pub fn save(&self, path: &Path, cfg: &RunConfig) -> Result<(), PipelineError> {
        let mut meta = BTreeMap::new();
        meta.insert("run_config".into(), serde_json::to_string(cfg)?);
        meta.insert("vocab_map".into(), serde_json::to_string(&self.backbone.vocab)?);
        meta.insert("action_norm".into(), serde_json::to_string(&self.norm)?);
        if let Some(f) = &self.fast {
            meta.insert("fast_tokenizer".into(), f.to_text());
        }
        save_checkpoint(path, &Checkpoint { params: self.store.clone(), meta })?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, RunConfig), PipelineError> {
        let ck = load_checkpoint(path)?;
        let get = |k: &str| ck.meta.get(k).ok_or_else(|| PipelineError::Missing(format!("checkpoint metadata `{k}`")));
        let cfg: RunConfig = serde_json::from_str(get("run_config")?)?;
        let vocab: VocabMap = serde_json::from_str(get("vocab_map")?)?;
        let norm: ActionNorm = serde_json::from_str(get("action_norm")?)?;
        let fast = match ck.meta.get("fast_tokenizer") {
            Some(t) => Some(FastTokenizer::from_text(t)?),
            None => None,
        };
        let vla = Self {
            backbone: Backbone::new(cfg.backbone.clone(), vocab),
            expert: ActionExpert::new(cfg.expert.clone()),
            store: ck.params,
            text: TextVocab::standard(),
            fast,
            norm,
            ablation: cfg.ablation,
            route: RouteOptions { include_fast: cfg.flow.include_fast, lat_only_context: cfg.flow.lat_only_context },
            sigma: cfg.flow.sigma,
            literal_sign: cfg.flow.paper_literal_sign,
        };
        Ok((vla, cfg))
    }
}

#[derive(Clone, Debug)]
pub struct InferredChunk {
    /// `k` padded 20-dim actions in the original action units.
    pub padded: Vec<Vec20>,
    pub latents: Vec<usize>,
    pub field_evals: usize,
    pub ctx_roles: Vec<crate::backbone::Role>,
}

impl InferredChunk {
    pub fn native(&self, arm: Arm) -> Vec<NativeAction> {
        self.padded.iter().map(|r| unpad(r, arm)).collect()
    }
}
