//! Toy decoder-only vision-language backbone with reserved latent/FAST token
//! ranges, span-restricted supervision, and role-tagged KV caches.

use std::cell::Cell;
use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Vec20, PADDED_DIMS};
use crate::grad::{GradError, Mask, NodeId, ParamStore, Scope, Tensor};
use crate::lam::{CODEBOOK_SIZE, NUM_SLOTS, PATCHES, PATCH_DIM};
use crate::nn::{argmax, block, dense, init_block, init_dense, init_norm, norm};

#[derive(Debug, thiserror::Error)]
pub enum BackboneError {
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error("sample is missing its {0} input")]
    MissingModality(Role),
    #[error("target id {id} outside the {role} range {lo}..{hi}")]
    TargetOutOfRange { role: Role, id: usize, lo: usize, hi: usize },
    #[error("unknown word `{0}`")]
    UnknownWord(String),
    #[error("sequence of {len} tokens exceeds the {max} positions")]
    TooLong { len: usize, max: usize },
    #[error("invalid layout: {0}")]
    Layout(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Role {
    Img,
    Txt,
    State,
    QaMark,
    Answer,
    Lat,
    Fast,
}

impl Role {
    pub const ORDER: [Role; 7] = [Role::Img, Role::Txt, Role::State, Role::QaMark, Role::Answer, Role::Lat, Role::Fast];

    pub fn name(self) -> &'static str {
        match self {
            Role::Img => "IMG",
            Role::Txt => "TXT",
            Role::State => "STATE",
            Role::QaMark => "QA_MARK",
            Role::Answer => "ANSWER",
            Role::Lat => "LAT",
            Role::Fast => "FAST",
        }
    }
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Token id ranges: text, then 32 latent ids, then FAST ids, then the QA marker.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabMap {
    pub text: usize,
    pub latent: usize,
    pub fast: usize,
}

impl VocabMap {
    pub fn new(text: usize, fast: usize) -> Self {
        Self { text, latent: CODEBOOK_SIZE, fast }
    }

    pub fn text_range(&self) -> Range<usize> {
        0..self.text
    }

    pub fn latent_range(&self) -> Range<usize> {
        self.text..self.text + self.latent
    }

    pub fn fast_range(&self) -> Range<usize> {
        let lo = self.text + self.latent;
        lo..lo + self.fast
    }

    pub fn qa_mark(&self) -> usize {
        self.text + self.latent + self.fast
    }

    pub fn total(&self) -> usize {
        self.qa_mark() + 1
    }

    pub fn latent_id(&self, code: usize) -> usize {
        self.text + code
    }

    pub fn fast_id(&self, token: usize) -> usize {
        self.text + self.latent + token
    }

    /// Reserved range a supervised role's targets must fall in.
    pub fn range_for(&self, role: Role) -> Option<Range<usize>> {
        match role {
            Role::Lat => Some(self.latent_range()),
            Role::Fast => Some(self.fast_range()),
            Role::Answer => Some(self.text_range()),
            _ => None,
        }
    }
}

/// Closed word vocabulary covering the environment's instruction and QA templates.
#[derive(Clone, Debug, PartialEq)]
pub struct TextVocab {
    words: Vec<String>,
}

impl TextVocab {
    pub fn standard() -> Self {
        let mut words: Vec<String> = ["<unk>", "put", "the", "into", "which", "object", "is", "left", "of", "?", "nothing"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        words.extend(crate::data::Color::ALL.iter().map(|c| c.word().to_string()));
        words.extend(crate::data::Shape::ALL.iter().map(|c| c.word().to_string()));
        words.extend(crate::data::ContainerKind::ALL.iter().map(|c| c.word().to_string()));
        Self { words }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Whitespace split with `?` separated into its own token.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>, BackboneError> {
        text.replace('?', " ? ")
            .split_whitespace()
            .map(|w| {
                self.words
                    .iter()
                    .position(|v| v == w)
                    .ok_or_else(|| BackboneError::UnknownWord(w.to_string()))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.words.get(i).map_or("<unk>", String::as_str))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Span {
    pub role: Role,
    pub start: usize,
    pub len: usize,
}

impl Span {
    pub fn range(&self) -> Range<usize> {
        self.start..self.start + self.len
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct TokenLayout {
    pub spans: Vec<Span>,
}

impl TokenLayout {
    pub fn from_lengths(parts: &[(Role, usize)]) -> Result<Self, BackboneError> {
        let mut spans = Vec::new();
        let mut start = 0;
        let mut last = None;
        for &(role, len) in parts {
            if len == 0 {
                continue;
            }
            let rank = Role::ORDER.iter().position(|&r| r == role).unwrap();
            if last.is_some_and(|l| rank <= l) {
                return Err(BackboneError::Layout(format!("{role} out of order")));
            }
            if role == Role::State && len != 1 {
                return Err(BackboneError::Layout("STATE span must have length 1".into()));
            }
            if role == Role::Lat && len != NUM_SLOTS {
                return Err(BackboneError::Layout(format!("LAT span must have length {NUM_SLOTS}")));
            }
            last = Some(rank);
            spans.push(Span { role, start, len });
            start += len;
        }
        Ok(Self { spans })
    }

    pub fn len(&self) -> usize {
        self.spans.last().map_or(0, |s| s.start + s.len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn span(&self, role: Role) -> Option<Span> {
        self.spans.iter().copied().find(|s| s.role == role)
    }

    pub fn span_len(&self, role: Role) -> usize {
        self.span(role).map_or(0, |s| s.len)
    }

    /// Role tag per position.
    pub fn roles(&self) -> Vec<Role> {
        self.spans.iter().flat_map(|s| std::iter::repeat(s.role).take(s.len)).collect()
    }

    pub fn describe(&self) -> String {
        self.spans.iter().map(|s| format!("{}:{}", s.role, s.len)).collect::<Vec<_>>().join(" ")
    }
}

/// Raw inputs for one backbone sequence. Supervised spans hold absolute vocab ids.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TokenInput {
    /// `[16, 192]` image patches.
    pub patches: Option<Tensor>,
    pub text: Vec<usize>,
    pub state: Option<Vec20>,
    pub qa: bool,
    pub answer: Vec<usize>,
    pub lat: Vec<usize>,
    pub fast: Vec<usize>,
}

impl TokenInput {
    pub fn layout(&self) -> Result<TokenLayout, BackboneError> {
        if self.patches.is_none() {
            return Err(BackboneError::MissingModality(Role::Img));
        }
        if self.text.is_empty() {
            return Err(BackboneError::MissingModality(Role::Txt));
        }
        if self.qa {
            if self.answer.is_empty() {
                return Err(BackboneError::MissingModality(Role::Answer));
            }
            TokenLayout::from_lengths(&[
                (Role::Img, PATCHES),
                (Role::Txt, self.text.len()),
                (Role::QaMark, 1),
                (Role::Answer, self.answer.len()),
            ])
        } else {
            if self.state.is_none() {
                return Err(BackboneError::MissingModality(Role::State));
            }
            TokenLayout::from_lengths(&[
                (Role::Img, PATCHES),
                (Role::Txt, self.text.len()),
                (Role::State, 1),
                (Role::Lat, self.lat.len()),
                (Role::Fast, self.fast.len()),
            ])
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp: usize,
    pub max_len: usize,
    pub text_vocab: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { d_model: 64, layers: 4, heads: 4, mlp: 128, max_len: 96, text_vocab: 512 }
    }
}

/// Per-layer key/value nodes inside one graph plus role tags.
#[derive(Clone, Debug)]
pub struct KvNodes {
    pub layers: Vec<(NodeId, NodeId)>,
    pub roles: Vec<Role>,
}

impl KvNodes {
    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }

    /// Value snapshot of the cache.
    pub fn snapshot(&self, s: &Scope) -> KvCacheSet {
        KvCacheSet {
            layers: self
                .layers
                .iter()
                .map(|&(k, v)| (s.graph.value(k).clone(), s.graph.value(v).clone()))
                .collect(),
            roles: self.roles.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KvCacheSet {
    pub layers: Vec<(Tensor, Tensor)>,
    pub roles: Vec<Role>,
}

/// Routed keys/values for the action expert. `layers` is empty when no
/// position survives routing.
#[derive(Clone, Debug)]
pub struct ExpertContext {
    pub layers: Vec<(NodeId, NodeId)>,
    pub roles: Vec<Role>,
    pub depth: usize,
}

impl ExpertContext {
    pub fn empty(depth: usize) -> Self {
        Self { layers: Vec::new(), roles: Vec::new(), depth }
    }

    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }

    /// Layer `l`'s keys/values, if any position was routed.
    pub fn layer(&self, l: usize) -> Option<(NodeId, NodeId)> {
        self.layers.get(l).copied()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RouteOptions {
    pub include_fast: bool,
    pub lat_only_context: bool,
}

fn routed(role: Role, opts: RouteOptions) -> bool {
    if opts.lat_only_context {
        return role == Role::Lat;
    }
    match role {
        Role::Fast => opts.include_fast,
        Role::Answer | Role::QaMark => false,
        _ => true,
    }
}

/// Keeps cache rows whose role survives routing, preserving order.
pub fn route_kv(s: &mut Scope, cache: &KvNodes, opts: RouteOptions) -> Result<ExpertContext, GradError> {
    let keep: Vec<bool> = cache.roles.iter().map(|&r| routed(r, opts)).collect();
    let mut runs: Vec<(usize, usize)> = Vec::new();
    for (i, &k) in keep.iter().enumerate() {
        if !k {
            continue;
        }
        match runs.last_mut() {
            Some((st, len)) if *st + *len == i => *len += 1,
            _ => runs.push((i, 1)),
        }
    }
    let roles: Vec<Role> = cache.roles.iter().zip(&keep).filter(|(_, &k)| k).map(|(&r, _)| r).collect();
    let depth = cache.layers.len();
    if roles.is_empty() {
        return Ok(ExpertContext::empty(depth));
    }
    let full = runs.len() == 1 && runs[0] == (0, cache.len());
    let mut layers = Vec::with_capacity(depth);
    for &(k, v) in &cache.layers {
        if full {
            layers.push((k, v));
            continue;
        }
        let pick = |t: NodeId, s: &mut Scope| -> Result<NodeId, GradError> {
            let parts = runs
                .iter()
                .map(|&(st, len)| s.graph.slice(t, 0, st, len))
                .collect::<Result<Vec<_>, _>>()?;
            if parts.len() == 1 {
                Ok(parts[0])
            } else {
                s.graph.concat(&parts, 0)
            }
        };
        let kk = pick(k, s)?;
        let vv = pick(v, s)?;
        layers.push((kk, vv));
    }
    Ok(ExpertContext { layers, roles, depth })
}

/// Replaces context nodes with gradient-stopped copies.
pub fn truncate_context(s: &mut Scope, ctx: &ExpertContext) -> ExpertContext {
    ExpertContext {
        layers: ctx.layers.iter().map(|&(k, v)| (s.graph.detach(k), s.graph.detach(v))).collect(),
        roles: ctx.roles.clone(),
        depth: ctx.depth,
    }
}

pub struct ForwardOut {
    pub logits: NodeId,
    pub cache: KvNodes,
}

/// Backbone parameters live in a shared store under the `vlm.` prefix.
#[derive(Debug)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub vocab: VocabMap,
    calls: Cell<usize>,
}

impl Clone for Backbone {
    fn clone(&self) -> Self {
        Self { cfg: self.cfg.clone(), vocab: self.vocab, calls: Cell::new(0) }
    }
}

impl Backbone {
    pub fn new(cfg: BackboneConfig, vocab: VocabMap) -> Self {
        Self { cfg, vocab, calls: Cell::new(0) }
    }

    pub fn init_params<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let d = self.cfg.d_model;
        init_dense(store, "vlm.patch", PATCH_DIM, d, 1.0, rng);
        store.insert("vlm.tok", Tensor::randn(&[self.vocab.total(), d], 0.5, rng));
        store.insert("vlm.pos", Tensor::randn(&[self.cfg.max_len, d], 0.1, rng));
        init_dense(store, "vlm.state", PADDED_DIMS, d, 1.0, rng);
        for l in 0..self.cfg.layers {
            init_block(store, &format!("vlm.block{l}"), d, self.cfg.mlp, rng);
        }
        init_norm(store, "vlm.ln_f", d);
        init_dense(store, "vlm.head", d, self.vocab.total(), 1.0, rng);
    }

    /// Number of forward invocations (full or incremental) so far.
    pub fn forward_calls(&self) -> usize {
        self.calls.get()
    }

    pub fn reset_calls(&self) {
        self.calls.set(0);
    }

    fn check_ids(&self, role: Role, ids: &[usize]) -> Result<(), BackboneError> {
        let r = self.vocab.range_for(role).expect("supervised role");
        if let Some(&id) = ids.iter().find(|id| !r.contains(id)) {
            return Err(BackboneError::TargetOutOfRange { role, id, lo: r.start, hi: r.end });
        }
        Ok(())
    }

    /// Embeds every span (before position embeddings) and returns the layout.
    pub fn assemble_tokens(&self, s: &mut Scope, input: &TokenInput) -> Result<(NodeId, TokenLayout), BackboneError> {
        let layout = input.layout()?;
        if layout.len() > self.cfg.max_len {
            return Err(BackboneError::TooLong { len: layout.len(), max: self.cfg.max_len });
        }
        if let Some(&w) = input.text.iter().find(|&&w| w >= self.vocab.text) {
            return Err(BackboneError::TargetOutOfRange { role: Role::Txt, id: w, lo: 0, hi: self.vocab.text });
        }
        self.check_ids(Role::Answer, &input.answer)?;
        self.check_ids(Role::Lat, &input.lat)?;
        self.check_ids(Role::Fast, &input.fast)?;
        let tok = s.p("vlm.tok")?;
        let mut parts = Vec::new();
        let patches = s.graph.constant(input.patches.clone().expect("checked by layout"));
        parts.push(dense(s, "vlm.patch", patches)?);
        parts.push(s.graph.embedding_lookup(tok, &input.text)?);
        if input.qa {
            parts.push(s.graph.embedding_lookup(tok, &[self.vocab.qa_mark()])?);
            parts.push(s.graph.embedding_lookup(tok, &input.answer)?);
        } else {
            let st = s.graph.constant(Tensor::matrix(1, PADDED_DIMS, input.state.expect("checked").to_vec())?);
            parts.push(dense(s, "vlm.state", st)?);
            if !input.lat.is_empty() {
                parts.push(s.graph.embedding_lookup(tok, &input.lat)?);
            }
            if !input.fast.is_empty() {
                parts.push(s.graph.embedding_lookup(tok, &input.fast)?);
            }
        }
        Ok((s.graph.concat(&parts, 0)?, layout))
    }

    /// Causal forward over `emb` rows placed after `past` (if any). Returns
    /// logits for the new rows and their own keys/values per layer.
    pub fn forward_from(
        &self,
        s: &mut Scope,
        emb: NodeId,
        roles: &[Role],
        past: Option<&KvNodes>,
    ) -> Result<ForwardOut, BackboneError> {
        self.calls.set(self.calls.get() + 1);
        let m = s.graph.shape(emb)[0];
        let p = past.map_or(0, KvNodes::len);
        if p + m > self.cfg.max_len {
            return Err(BackboneError::TooLong { len: p + m, max: self.cfg.max_len });
        }
        let pos_all = s.p("vlm.pos")?;
        let pos = s.graph.slice(pos_all, 0, p, m)?;
        let mut x = s.graph.add(emb, pos)?;
        let mask = Mask::from_fn(m, p + m, |i, j| j <= p + i);
        let mut layers = Vec::with_capacity(self.cfg.layers);
        for l in 0..self.cfg.layers {
            let prefix = past.map(|c| c.layers[l]);
            let out = block(s, &format!("vlm.block{l}"), x, self.cfg.heads, prefix, &mask)?;
            x = out.out;
            layers.push(match prefix {
                Some((pk, pv)) => (s.graph.concat(&[pk, out.k], 0)?, s.graph.concat(&[pv, out.v], 0)?),
                None => (out.k, out.v),
            });
        }
        let h = norm(s, "vlm.ln_f", x)?;
        let logits = dense(s, "vlm.head", h)?;
        let mut all_roles = past.map_or_else(Vec::new, |c| c.roles.clone());
        all_roles.extend_from_slice(roles);
        Ok(ForwardOut { logits, cache: KvNodes { layers, roles: all_roles } })
    }

    pub fn backbone_forward(&self, s: &mut Scope, emb: NodeId, layout: &TokenLayout) -> Result<ForwardOut, BackboneError> {
        self.forward_from(s, emb, &layout.roles(), None)
    }

    /// Greedy autoregressive decode of the 8 latent tokens after a prefix
    /// (IMG, TXT, STATE). Returns the latent codes and the cache including
    /// their keys/values.
    pub fn decode_latents(
        &self,
        s: &mut Scope,
        prefix_logits: NodeId,
        cache: KvNodes,
    ) -> Result<(Vec<usize>, KvNodes), BackboneError> {
        let tok = s.p("vlm.tok")?;
        let lat = self.vocab.latent_range();
        let mut cache = cache;
        let mut last = prefix_logits;
        let mut codes = Vec::with_capacity(NUM_SLOTS);
        for _ in 0..NUM_SLOTS {
            let rows = s.graph.shape(last)[0];
            let row = s.graph.value(last).row(rows - 1);
            let code = argmax(&row[lat.clone()]);
            codes.push(code);
            let e = s.graph.embedding_lookup(tok, &[self.vocab.latent_id(code)])?;
            let out = self.forward_from(s, e, &[Role::Lat], Some(&cache))?;
            last = out.logits;
            cache = out.cache;
        }
        Ok((codes, cache))
    }

    /// Cross-entropy per supervised span, scored over that span's reserved
    /// id range. Returns `(lat, fast, answer)` loss nodes (absent spans: `None`).
    pub fn vlm_loss(
        &self,
        s: &mut Scope,
        logits: NodeId,
        layout: &TokenLayout,
        input: &TokenInput,
    ) -> Result<SpanLosses, BackboneError> {
        let mut out = SpanLosses::default();
        for (role, ids) in [(Role::Lat, &input.lat), (Role::Fast, &input.fast), (Role::Answer, &input.answer)] {
            let Some(span) = layout.span(role) else { continue };
            if ids.len() != span.len {
                return Err(BackboneError::Layout(format!("{role} targets {} for span {}", ids.len(), span.len)));
            }
            if span.start == 0 {
                return Err(BackboneError::Layout(format!("{role} span cannot start the sequence")));
            }
            self.check_ids(role, ids)?;
            let r = self.vocab.range_for(role).expect("supervised");
            let rows = s.graph.slice(logits, 0, span.start - 1, span.len)?;
            let cols = s.graph.slice(rows, 1, r.start, r.end - r.start)?;
            let targets: Vec<usize> = ids.iter().map(|&id| id - r.start).collect();
            let loss = s.graph.cross_entropy_logits(cols, &targets)?;
            match role {
                Role::Lat => out.lat = Some(loss),
                Role::Fast => out.fast = Some(loss),
                _ => out.answer = Some(loss),
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct SpanLosses {
    pub lat: Option<NodeId>,
    pub fast: Option<NodeId>,
    pub answer: Option<NodeId>,
}

impl SpanLosses {
    pub fn values(&self, s: &Scope) -> (f64, f64, f64) {
        let v = |n: Option<NodeId>| n.map_or(0.0, |n| s.graph.value(n).item());
        (v(self.lat), v(self.fast), v(self.answer))
    }

    /// Sum of the present span losses plus `extra`.
    pub fn total(&self, s: &mut Scope, extra: &[NodeId]) -> Result<Option<NodeId>, GradError> {
        let mut acc: Option<NodeId> = None;
        for n in [self.lat, self.fast, self.answer].into_iter().flatten().chain(extra.iter().copied()) {
            acc = Some(match acc {
                None => n,
                Some(a) => s.graph.add(a, n)?,
            });
        }
        Ok(acc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_ranges_are_disjoint() {
        let v = VocabMap::new(512, 256);
        assert_eq!(v.total(), 512 + 32 + 256 + 1);
        assert_eq!(v.latent_range().start, v.text_range().end);
        assert_eq!(v.fast_range().start, v.latent_range().end);
        assert_eq!(v.qa_mark(), v.fast_range().end);
    }

    #[test]
    fn text_vocab_round_trips_templates() {
        let t = TextVocab::standard();
        let ids = t.encode("which object is left of the red circle?").unwrap();
        assert_eq!(ids.len(), 9);
        assert_eq!(t.decode(&ids), "which object is left of the red circle ?");
        assert!(t.encode("fly away").is_err());
    }

    #[test]
    fn layout_rejects_bad_order() {
        assert!(TokenLayout::from_lengths(&[(Role::Txt, 2), (Role::Img, 16)]).is_err());
        assert!(TokenLayout::from_lengths(&[(Role::Img, 16), (Role::State, 2)]).is_err());
        let l = TokenLayout::from_lengths(&[(Role::Img, 16), (Role::Txt, 5), (Role::State, 1)]).unwrap();
        assert_eq!(l.len(), 22);
        assert_eq!(l.describe(), "IMG:16 TXT:5 STATE:1");
    }
}
