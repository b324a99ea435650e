//! Latent action model: a frame-pair encoder quantised with noise-substitution
//! VQ into 8 codes from a 32-entry codebook, and a decoder that reconstructs
//! the future frame from the (stop-gradient) current frame plus codes.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Episode, Image, CHANNELS, IMAGE_SIZE};
use crate::grad::{
    load_checkpoint, save_checkpoint, Checkpoint, GradError, Mask, NodeId, Optimizer, ParamGrads,
    ParamStore, Scope, Tensor,
};
use crate::nn::{block, cross_block, dense, init_block, init_cross_block, init_dense, init_norm, norm};

pub const CODEBOOK_SIZE: usize = 32;
pub const NUM_SLOTS: usize = 8;
pub const PATCH: usize = 8;
pub const GRID_PATCHES: usize = IMAGE_SIZE / PATCH;
pub const PATCHES: usize = GRID_PATCHES * GRID_PATCHES;
pub const PATCH_DIM: usize = PATCH * PATCH * CHANNELS;

#[derive(Debug, thiserror::Error)]
pub enum LamError {
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error("episode has {len} frames, labelling needs at least {needed}")]
    EpisodeTooShort { len: usize, needed: usize },
    #[error("non-finite loss {loss} at step {step}")]
    NonFinite { step: usize, loss: f64 },
    #[error("empty batch")]
    EmptyBatch,
    #[error("bad label file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("bad checkpoint metadata: {0}")]
    Meta(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LamConfig {
    pub d_model: usize,
    pub d_code: usize,
    pub heads: usize,
    pub mlp: usize,
    pub decoder_layers: usize,
    pub refresh_every: usize,
    pub refresh_threshold: u64,
    pub refresh_noise: f64,
    pub pool_size: usize,
}

impl Default for LamConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            d_code: 64,
            heads: 4,
            mlp: 128,
            decoder_layers: 2,
            refresh_every: 500,
            refresh_threshold: 0,
            refresh_noise: 0.01,
            pool_size: 512,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FramePair {
    pub current: Image,
    pub future: Image,
    pub gap_seconds: f64,
}

/// Eight codebook indices for one timestep of one episode.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LatentCode {
    pub indices: [usize; NUM_SLOTS],
    pub step_index: usize,
    pub episode_id: usize,
}

/// `[16, 192]` patch matrix; patches row-major over the grid, pixels `(y, x, c)` within.
pub fn patchify(img: &Image) -> Tensor {
    let mut data = Vec::with_capacity(PATCHES * PATCH_DIM);
    for py in 0..GRID_PATCHES {
        for px in 0..GRID_PATCHES {
            for y in 0..PATCH {
                for x in 0..PATCH {
                    let base = ((py * PATCH + y) * IMAGE_SIZE + px * PATCH + x) * CHANNELS;
                    data.extend(img.data[base..base + CHANNELS].iter().map(|&v| f64::from(v)));
                }
            }
        }
    }
    Tensor::matrix(PATCHES, PATCH_DIM, data).expect("patch grid")
}

pub fn unpatchify(t: &Tensor) -> Image {
    let mut img = Image { data: vec![0.0; IMAGE_SIZE * IMAGE_SIZE * CHANNELS] };
    let src = t.data();
    let mut i = 0;
    for py in 0..GRID_PATCHES {
        for px in 0..GRID_PATCHES {
            for y in 0..PATCH {
                for x in 0..PATCH {
                    let base = ((py * PATCH + y) * IMAGE_SIZE + px * PATCH + x) * CHANNELS;
                    for c in 0..CHANNELS {
                        img.data[base + c] = src[i] as f32;
                        i += 1;
                    }
                }
            }
        }
    }
    img
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the codebook row closest to `x`; ties go to the lowest index.
pub fn nearest_code(x: &[f64], codebook: &Tensor) -> usize {
    let d = codebook.shape()[1];
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (n, c) in codebook.data().chunks_exact(d).enumerate() {
        let dist = squared_distance(x, c);
        if dist < best_d {
            best_d = dist;
            best = n;
        }
    }
    best
}

/// `x + (‖x − c‖ / ‖w‖)·w` for a given noise direction.
pub fn nsvq_with_noise(x: &[f64], c: &[f64], w: &[f64]) -> Vec<f64> {
    let err = squared_distance(x, c).sqrt();
    let wn = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    x.iter().zip(w).map(|(xi, wi)| xi + err / wn * wi).collect()
}

pub fn sample_direction<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let w: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        if w.iter().any(|&v| v != 0.0) {
            return w;
        }
    }
}

pub fn nsvq_substitute<R: Rng + ?Sized>(x: &[f64], c: &[f64], rng: &mut R) -> Vec<f64> {
    let w = sample_direction(x.len(), rng);
    nsvq_with_noise(x, c, &w)
}

/// Source of quantisation noise for [`Lam::quantize`].
pub enum Noise<'r, R: Rng + ?Sized> {
    Sampled(&'r mut R),
    /// One noise row per slot, held fixed (gradient testing).
    Frozen(&'r Tensor),
    /// Hard nearest-code substitution.
    Hard,
}

pub struct Quantized {
    pub codes: NodeId,
    pub indices: [usize; NUM_SLOTS],
}

#[derive(Clone, Debug)]
pub struct Lam {
    pub cfg: LamConfig,
    pub store: ParamStore,
    pub usage: [u64; CODEBOOK_SIZE],
    pool: VecDeque<Vec<f64>>,
    steps: usize,
}

pub const CODEBOOK: &str = "lam.codebook";

impl Lam {
    pub fn new<R: Rng + ?Sized>(cfg: LamConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        let mut s = ParamStore::new();
        init_dense(&mut s, "lam.enc.patch", PATCH_DIM, d, 1.0, rng);
        s.insert("lam.enc.pos", Tensor::randn(&[PATCHES, d], 0.1, rng));
        s.insert("lam.enc.frame", Tensor::randn(&[2, d], 0.1, rng));
        init_block(&mut s, "lam.enc.spatial", d, cfg.mlp, rng);
        init_block(&mut s, "lam.enc.temporal", d, cfg.mlp, rng);
        s.insert("lam.enc.slots", Tensor::randn(&[NUM_SLOTS, d], 1.0, rng));
        init_cross_block(&mut s, "lam.enc.read", d, cfg.mlp, rng);
        init_norm(&mut s, "lam.enc.ln_f", d);
        init_dense(&mut s, "lam.enc.proj", d, cfg.d_code, 1.0, rng);
        s.insert(CODEBOOK, Tensor::randn(&[CODEBOOK_SIZE, cfg.d_code], 1.0, rng));
        init_dense(&mut s, "lam.dec.patch", PATCH_DIM, d, 1.0, rng);
        s.insert("lam.dec.pos", Tensor::randn(&[PATCHES, d], 0.1, rng));
        init_dense(&mut s, "lam.dec.code", cfg.d_code, d, 1.0, rng);
        s.insert("lam.dec.slotpos", Tensor::randn(&[NUM_SLOTS, d], 0.1, rng));
        for l in 0..cfg.decoder_layers {
            init_block(&mut s, &format!("lam.dec.block{l}"), d, cfg.mlp, rng);
        }
        init_norm(&mut s, "lam.dec.ln_f", d);
        init_dense(&mut s, "lam.dec.head", d, PATCH_DIM, 1.0, rng);
        Self::from_store(cfg, s)
    }

    pub fn from_store(cfg: LamConfig, store: ParamStore) -> Self {
        Self { cfg, store, usage: [0; CODEBOOK_SIZE], pool: VecDeque::new(), steps: 0 }
    }

    pub fn codebook(&self) -> &Tensor {
        self.store.get(CODEBOOK).expect("codebook present")
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Encoder features for both frames: `[8, d_code]`.
    pub fn encode(s: &mut Scope, cur: NodeId, fut: NodeId) -> Result<NodeId, GradError> {
        for (which, id) in [("current", cur), ("future", fut)] {
            if s.graph.shape(id) != [PATCHES, PATCH_DIM] {
                return Err(GradError::Shape {
                    op: "lam_encode",
                    detail: format!("{which} frame patches {:?}, expected [{PATCHES}, {PATCH_DIM}]", s.graph.shape(id)),
                });
            }
        }
        let heads = Self::heads_of(s)?;
        let pos = s.p("lam.enc.pos")?;
        let frame = s.p("lam.enc.frame")?;
        let mut tokens = Vec::with_capacity(2);
        for (f, id) in [cur, fut].into_iter().enumerate() {
            let e = dense(s, "lam.enc.patch", id)?;
            let e = s.graph.add(e, pos)?;
            let fe = s.graph.slice(frame, 0, f, 1)?;
            tokens.push(s.graph.add(e, fe)?);
        }
        let x = s.graph.concat(&tokens, 0)?;
        let n = 2 * PATCHES;
        let spatial = Mask::from_fn(n, n, |i, j| i / PATCHES == j / PATCHES);
        let x = block(s, "lam.enc.spatial", x, heads, None, &spatial)?.out;
        let temporal = Mask::from_fn(n, n, |i, j| i % PATCHES == j % PATCHES);
        let x = block(s, "lam.enc.temporal", x, heads, None, &temporal)?.out;
        let slots = s.p("lam.enc.slots")?;
        let r = cross_block(s, "lam.enc.read", slots, x, heads)?;
        let r = norm(s, "lam.enc.ln_f", r)?;
        dense(s, "lam.enc.proj", r)
    }

    fn heads_of(s: &Scope) -> Result<usize, GradError> {
        let d = s.store().get("lam.enc.pos")?.shape()[1];
        Ok(if d % 4 == 0 { 4 } else { 1 })
    }

    /// Nearest codes per slot and the substituted code vectors.
    pub fn quantize<R: Rng + ?Sized>(s: &mut Scope, x_enc: NodeId, noise: Noise<'_, R>) -> Result<Quantized, GradError> {
        let cb_val = s.store().get(CODEBOOK)?.clone();
        let x_val = s.graph.value(x_enc).clone();
        let d = x_val.shape()[1];
        let mut indices = [0usize; NUM_SLOTS];
        for (i, row) in x_val.data().chunks_exact(d).enumerate() {
            indices[i] = nearest_code(row, &cb_val);
        }
        let cb = s.p(CODEBOOK)?;
        let c = s.graph.embedding_lookup(cb, &indices)?;
        let dirs = match noise {
            Noise::Hard => return Ok(Quantized { codes: c, indices }),
            Noise::Frozen(w) => w.clone(),
            Noise::Sampled(rng) => {
                let data: Vec<f64> = (0..NUM_SLOTS).flat_map(|_| sample_direction(d, rng)).collect();
                Tensor::matrix(NUM_SLOTS, d, data)?
            }
        };
        let unit: Vec<f64> = dirs
            .data()
            .chunks_exact(d)
            .flat_map(|w| {
                let n = w.iter().map(|v| v * v).sum::<f64>().sqrt();
                w.iter().map(move |v| v / n)
            })
            .collect();
        let unit = s.graph.constant(Tensor::matrix(NUM_SLOTS, d, unit)?);
        let diff = s.graph.sub(x_enc, c)?;
        let err = s.graph.l2_norm(diff);
        let err = s.graph.reshape(err, &[NUM_SLOTS, 1])?;
        let offset = s.graph.mul(err, unit)?;
        let codes = s.graph.add(x_enc, offset)?;
        Ok(Quantized { codes, indices })
    }

    /// Predicted future patches `[16, 192]`. The current frame is detached.
    pub fn decode(s: &mut Scope, cur: NodeId, codes: NodeId) -> Result<NodeId, GradError> {
        let heads = Self::heads_of(s)?;
        let layers = (0..).take_while(|l| s.store().contains(&format!("lam.dec.block{l}.q.w"))).count();
        let cur = s.graph.detach(cur);
        let e = dense(s, "lam.dec.patch", cur)?;
        let pos = s.p("lam.dec.pos")?;
        let e = s.graph.add(e, pos)?;
        let c = dense(s, "lam.dec.code", codes)?;
        let sp = s.p("lam.dec.slotpos")?;
        let c = s.graph.add(c, sp)?;
        let mut x = s.graph.concat(&[e, c], 0)?;
        let n = PATCHES + NUM_SLOTS;
        let mask = Mask::full(n, n);
        for l in 0..layers {
            x = block(s, &format!("lam.dec.block{l}"), x, heads, None, &mask)?.out;
        }
        let x = s.graph.slice(x, 0, 0, PATCHES)?;
        let x = norm(s, "lam.dec.ln_f", x)?;
        dense(s, "lam.dec.head", x)
    }

    /// Reconstruction loss for one pair.
    pub fn pair_loss<R: Rng + ?Sized>(
        s: &mut Scope,
        cur: &Tensor,
        fut: &Tensor,
        noise: Noise<'_, R>,
    ) -> Result<(NodeId, NodeId, [usize; NUM_SLOTS]), GradError> {
        let c = s.graph.constant(cur.clone());
        let f = s.graph.constant(fut.clone());
        let x = Self::encode(s, c, f)?;
        let q = Self::quantize(s, x, noise)?;
        let pred = Self::decode(s, c, q.codes)?;
        let loss = s.graph.mse(pred, f)?;
        Ok((loss, x, q.indices))
    }

    /// One optimiser step on a batch; returns the mean reconstruction loss.
    pub fn train_step<R: Rng + ?Sized>(
        &mut self,
        batch: &[FramePair],
        opt: &mut Optimizer,
        rng: &mut R,
    ) -> Result<f64, LamError> {
        if batch.is_empty() {
            return Err(LamError::EmptyBatch);
        }
        let mut grads = ParamGrads::default();
        let mut total = 0.0;
        let mut encodings = Vec::new();
        for pair in batch {
            let cur = patchify(&pair.current);
            let fut = patchify(&pair.future);
            let mut s = Scope::new(&self.store);
            let (loss, x, idx) = Self::pair_loss(&mut s, &cur, &fut, Noise::Sampled(&mut *rng))?;
            let l = s.graph.value(loss).item();
            if !l.is_finite() {
                return Err(LamError::NonFinite { step: self.steps, loss: l });
            }
            total += l;
            grads.accumulate(s.backward(loss)?);
            for i in idx {
                self.usage[i] += 1;
            }
            let xv = s.graph.value(x);
            encodings.extend(xv.data().chunks_exact(xv.shape()[1]).map(<[f64]>::to_vec));
        }
        grads.scale(1.0 / batch.len() as f64);
        if !grads.is_finite() {
            return Err(LamError::NonFinite { step: self.steps, loss: f64::NAN });
        }
        opt.step(&mut self.store, &grads);
        for e in encodings {
            if self.pool.len() == self.cfg.pool_size {
                self.pool.pop_front();
            }
            self.pool.push_back(e);
        }
        self.steps += 1;
        if self.cfg.refresh_every > 0 && self.steps % self.cfg.refresh_every == 0 {
            self.codebook_refresh(rng);
        }
        Ok(total / batch.len() as f64)
    }

    pub fn pool_len(&self) -> usize {
        self.pool.len()
    }

    pub fn push_pool(&mut self, x: Vec<f64>) {
        if self.pool.len() == self.cfg.pool_size.max(1) {
            self.pool.pop_front();
        }
        self.pool.push_back(x);
    }

    /// Replaces entries used at most `refresh_threshold` times since the last
    /// check with random recent encoder outputs plus small noise.
    pub fn codebook_refresh<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Vec<usize> {
        if self.pool.is_empty() {
            return Vec::new();
        }
        let dead: Vec<usize> = (0..CODEBOOK_SIZE).filter(|&i| self.usage[i] <= self.cfg.refresh_threshold).collect();
        let d = self.cfg.d_code;
        let noise = self.cfg.refresh_noise;
        let cb = self.store.get_mut(CODEBOOK).expect("codebook present");
        for &i in &dead {
            let src = &self.pool[rng.gen_range(0..self.pool.len())];
            for (j, v) in cb.data_mut()[i * d..(i + 1) * d].iter_mut().enumerate() {
                *v = src[j] + noise * rng.sample::<f64, _>(StandardNormal);
            }
        }
        self.usage = [0; CODEBOOK_SIZE];
        dead
    }

    /// Hard code indices for one frame pair (no noise).
    pub fn code_indices(&self, current: &Image, future: &Image) -> Result<[usize; NUM_SLOTS], LamError> {
        let mut s = Scope::new(&self.store);
        let c = s.graph.constant(patchify(current));
        let f = s.graph.constant(patchify(future));
        let x = Self::encode(&mut s, c, f)?;
        let xv = s.graph.value(x);
        let cb = self.codebook();
        let mut out = [0; NUM_SLOTS];
        for (i, row) in xv.data().chunks_exact(xv.shape()[1]).enumerate() {
            out[i] = nearest_code(row, cb);
        }
        Ok(out)
    }

    /// Predicted future frame from hard codes.
    pub fn reconstruct(&self, current: &Image, future: &Image) -> Result<Image, LamError> {
        let mut s = Scope::new(&self.store);
        let c = s.graph.constant(patchify(current));
        let f = s.graph.constant(patchify(future));
        let x = Self::encode(&mut s, c, f)?;
        let q = Self::quantize::<rand_chacha::ChaCha8Rng>(&mut s, x, Noise::Hard)?;
        let pred = Self::decode(&mut s, c, q.codes)?;
        Ok(unpatchify(s.graph.value(pred)))
    }

    pub fn save(&self, path: &Path) -> Result<(), LamError> {
        let mut meta = std::collections::BTreeMap::new();
        meta.insert(
            "lam_config".to_string(),
            serde_json::to_string(&self.cfg).map_err(|e| LamError::Meta(e.to_string()))?,
        );
        save_checkpoint(path, &Checkpoint { params: self.store.clone(), meta })?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, LamError> {
        let ck = load_checkpoint(path)?;
        let cfg = match ck.meta.get("lam_config") {
            Some(s) => serde_json::from_str(s).map_err(|e| LamError::Meta(e.to_string()))?,
            None => return Err(LamError::Meta("missing lam_config".into())),
        };
        Ok(Self::from_store(cfg, ck.params))
    }
}

/// Frame offset spanning one second of the episode.
pub fn frame_gap(ep: &Episode) -> usize {
    ep.frames_per_second().max(1)
}

/// One label per step; steps without a frame `k` ahead reuse the last label.
pub fn label_episode(ep: &Episode, lam: &Lam) -> Result<Vec<LatentCode>, LamError> {
    let k = frame_gap(ep);
    if ep.len() < k + 1 {
        return Err(LamError::EpisodeTooShort { len: ep.len(), needed: k + 1 });
    }
    let valid = ep.len() - k;
    let mut out = Vec::with_capacity(ep.len());
    for t in 0..ep.len() {
        let indices = if t < valid {
            lam.code_indices(&ep.frames[t], &ep.frames[t + k])?
        } else {
            out.last().map(|c: &LatentCode| c.indices).expect("at least one valid step")
        };
        out.push(LatentCode { indices, step_index: t, episode_id: ep.id });
    }
    Ok(out)
}

/// Training pairs `(o_t, o_{t+k})` with a one-second gap.
pub fn frame_pairs(ep: &Episode) -> Vec<FramePair> {
    let k = frame_gap(ep);
    (0..ep.len().saturating_sub(k))
        .map(|t| FramePair {
            current: ep.frames[t].clone(),
            future: ep.frames[t + k].clone(),
            gap_seconds: k as f64 / ep.fps,
        })
        .collect()
}

pub fn labels_to_text(labels: &[LatentCode]) -> String {
    let mut s = String::from("# step c0 c1 c2 c3 c4 c5 c6 c7\n");
    for l in labels {
        let _ = write!(s, "{}", l.step_index);
        for i in l.indices {
            let _ = write!(s, " {i}");
        }
        s.push('\n');
    }
    s
}

pub fn labels_from_text(text: &str, episode_id: usize) -> Result<Vec<LatentCode>, LamError> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: &str| LamError::Parse { line: n + 1, msg: msg.into() };
        let nums: Vec<usize> = line
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| err("not an integer")))
            .collect::<Result<_, _>>()?;
        if nums.len() != NUM_SLOTS + 1 {
            return Err(err("expected a step index and 8 codes"));
        }
        if nums[1..].iter().any(|&c| c >= CODEBOOK_SIZE) {
            return Err(err("code index out of range"));
        }
        let mut indices = [0; NUM_SLOTS];
        indices.copy_from_slice(&nums[1..]);
        out.push(LatentCode { indices, step_index: nums[0], episode_id });
    }
    Ok(out)
}

pub fn write_labels(path: &Path, labels: &[LatentCode]) -> Result<(), LamError> {
    std::fs::write(path, labels_to_text(labels))?;
    Ok(())
}

pub fn read_labels(path: &Path, episode_id: usize) -> Result<Vec<LatentCode>, LamError> {
    labels_from_text(&std::fs::read_to_string(path)?, episode_id)
}
