//! Flow-matching action expert: denoises a `k × 20` chunk conditioned on the
//! routed backbone context, the robot state and the flow time.

use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backbone::ExpertContext;
use crate::data::{Vec20, PADDED_DIMS};
use crate::grad::{GradError, Mask, NodeId, ParamStore, Scope, Tensor};
use crate::nn::{block, dense, init_block, init_dense, init_norm, norm};

pub const TAU_MIN: f64 = 0.001;
pub const TAU_MAX: f64 = 0.999;

#[derive(Debug, thiserror::Error)]
pub enum ExpertError {
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error("context has {ctx} layers but the expert has {expert}")]
    LayerMismatch { ctx: usize, expert: usize },
    #[error("step size {0} does not divide the unit interval")]
    BadStep(f64),
    #[error("chunk shape {got:?}, expected [{k}, {PADDED_DIMS}]")]
    Shape { got: Vec<usize>, k: usize },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientBoundary {
    #[default]
    Truncate,
    FlowThrough,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExpertConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp: usize,
    pub k: usize,
    pub time_features: usize,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self { d_model: 64, layers: 4, heads: 4, mlp: 128, k: 7, time_features: 32 }
    }
}

/// `τ = clamp(1 − u, 0.001, 0.999)` with `u ~ Beta(1.5, 1)`.
pub fn sample_tau<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = Beta::new(1.5, 1.0).expect("valid beta").sample(rng);
    (1.0 - u).clamp(TAU_MIN, TAU_MAX)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowSample {
    pub tau: f64,
    pub chunk: Tensor,
    pub epsilon: Tensor,
    pub noised: Tensor,
    pub target_field: Tensor,
}

/// Noised chunk `τ·A + (1−τ)·ε` with regression target `A − ε`
/// (or `ε − A` when `literal_sign`).
pub fn flow_sample_at(chunk: &Tensor, tau: f64, epsilon: Tensor, literal_sign: bool) -> FlowSample {
    let a = chunk.data();
    let e = epsilon.data();
    let noised: Vec<f64> = a.iter().zip(e).map(|(a, e)| tau * a + (1.0 - tau) * e).collect();
    let target: Vec<f64> = a
        .iter()
        .zip(e)
        .map(|(a, e)| if literal_sign { e - a } else { a - e })
        .collect();
    let shape = chunk.shape().to_vec();
    FlowSample {
        tau,
        chunk: chunk.clone(),
        noised: Tensor::new(shape.clone(), noised).expect("same shape"),
        target_field: Tensor::new(shape, target).expect("same shape"),
        epsilon,
    }
}

pub fn make_flow_sample<R: Rng + ?Sized>(chunk: &Tensor, rng: &mut R, literal_sign: bool) -> FlowSample {
    let tau = sample_tau(rng);
    let eps = gaussian(chunk.shape(), rng);
    flow_sample_at(chunk, tau, eps, literal_sign)
}

pub fn gaussian<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()).expect("shape")
}

/// Sinusoidal features of `τ` at geometric frequencies.
pub fn time_features(tau: f64, n: usize) -> Vec<f64> {
    let half = n / 2;
    let mut out = Vec::with_capacity(n);
    for i in 0..half {
        let freq = (1000f64).powf(-(i as f64) / half.max(1) as f64);
        let arg = tau * 100.0 * freq;
        out.push(arg.sin());
        out.push(arg.cos());
    }
    out.resize(n, 0.0);
    out
}

#[derive(Clone, Debug)]
pub struct ActionExpert {
    pub cfg: ExpertConfig,
}

impl ActionExpert {
    pub fn new(cfg: ExpertConfig) -> Self {
        Self { cfg }
    }

    pub fn init_params<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let d = self.cfg.d_model;
        init_dense(store, "act.state", PADDED_DIMS, d, 1.0, rng);
        init_dense(store, "act.in", PADDED_DIMS, d, 1.0, rng);
        init_dense(store, "act.time", self.cfg.time_features, d, 1.0, rng);
        store.insert("act.pos", Tensor::randn(&[self.cfg.k, d], 0.1, rng));
        for l in 0..self.cfg.layers {
            init_block(store, &format!("act.block{l}"), d, self.cfg.mlp, rng);
        }
        init_norm(store, "act.ln_f", d);
        init_dense(store, "act.out", d, PADDED_DIMS, 0.5, rng);
    }

    /// Predicted velocity field `[k, 20]`.
    pub fn forward(
        &self,
        s: &mut Scope,
        noised: NodeId,
        tau: f64,
        state: &Vec20,
        ctx: &ExpertContext,
    ) -> Result<NodeId, ExpertError> {
        let k = self.cfg.k;
        if s.graph.shape(noised) != [k, PADDED_DIMS] {
            return Err(ExpertError::Shape { got: s.graph.shape(noised).to_vec(), k });
        }
        if ctx.depth != self.cfg.layers {
            return Err(ExpertError::LayerMismatch { ctx: ctx.depth, expert: self.cfg.layers });
        }
        let st = s.graph.constant(Tensor::matrix(1, PADDED_DIMS, state.to_vec())?);
        let st = dense(s, "act.state", st)?;
        let tf = s.graph.constant(Tensor::matrix(1, self.cfg.time_features, time_features(tau, self.cfg.time_features))?);
        let te = dense(s, "act.time", tf)?;
        let a = dense(s, "act.in", noised)?;
        let a = s.graph.add(a, te)?;
        let pos = s.p("act.pos")?;
        let a = s.graph.add(a, pos)?;
        let mut x = s.graph.concat(&[st, a], 0)?;
        let n = 1 + k;
        let mask = Mask::full(n, ctx.len() + n);
        for l in 0..self.cfg.layers {
            x = block(s, &format!("act.block{l}"), x, self.cfg.heads, ctx.layer(l), &mask)?.out;
        }
        let x = s.graph.slice(x, 0, 1, k)?;
        let x = norm(s, "act.ln_f", x)?;
        Ok(dense(s, "act.out", x)?)
    }

    /// Mean squared error between predicted and target fields, averaged over
    /// the given samples (which share one context).
    pub fn flow_loss(
        &self,
        s: &mut Scope,
        samples: &[FlowSample],
        state: &Vec20,
        ctx: &ExpertContext,
    ) -> Result<NodeId, ExpertError> {
        let mut acc: Option<NodeId> = None;
        for fs in samples {
            let x = s.graph.constant(fs.noised.clone());
            let v = self.forward(s, x, fs.tau, state, ctx)?;
            let t = s.graph.constant(fs.target_field.clone());
            let l = s.graph.mse(v, t)?;
            acc = Some(match acc {
                None => l,
                Some(a) => s.graph.add(a, l)?,
            });
        }
        let total = acc.ok_or_else(|| GradError::Shape { op: "flow_loss", detail: "no samples".into() })?;
        Ok(s.graph.scale(total, 1.0 / samples.len() as f64))
    }
}

/// Number of Euler steps for step size `sigma`.
pub fn euler_steps(sigma: f64) -> Result<usize, ExpertError> {
    if !(sigma > 0.0 && sigma <= 1.0) {
        return Err(ExpertError::BadStep(sigma));
    }
    let n = (1.0 / sigma).round();
    if ((n * sigma) - 1.0).abs() > 1e-9 {
        return Err(ExpertError::BadStep(sigma));
    }
    Ok(n as usize)
}

/// Forward Euler from `τ = 0` to `τ = 1`.
pub fn euler_integrate<F, E>(initial: Tensor, mut field: F, sigma: f64) -> Result<Tensor, E>
where
    F: FnMut(&Tensor, f64) -> Result<Tensor, E>,
    E: From<ExpertError>,
{
    let steps = euler_steps(sigma)?;
    let mut a = initial;
    for i in 0..steps {
        let tau = i as f64 * sigma;
        let v = field(&a, tau)?;
        for (x, d) in a.data_mut().iter_mut().zip(v.data()) {
            *x += sigma * d;
        }
    }
    Ok(a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn step_count_must_divide_unit_interval() {
        assert_eq!(euler_steps(0.2).unwrap(), 5);
        assert_eq!(euler_steps(0.25).unwrap(), 4);
        assert!(euler_steps(0.3).is_err());
        assert!(euler_steps(0.0).is_err());
    }

    #[test]
    fn target_plus_noise_recovers_chunk() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = gaussian(&[7, 20], &mut rng);
        let fs = make_flow_sample(&a, &mut rng, false);
        for i in 0..a.numel() {
            assert!((fs.target_field.data()[i] + fs.epsilon.data()[i] - a.data()[i]).abs() < 1e-12);
        }
        let lit = flow_sample_at(&a, 0.5, fs.epsilon.clone(), true);
        assert_eq!(lit.target_field.data()[0], fs.epsilon.data()[0] - a.data()[0]);
    }

    #[test]
    fn zero_field_is_identity() {
        let x = Tensor::full(&[2, 3], 0.7);
        let out = euler_integrate::<_, ExpertError>(x.clone(), |a, _| Ok(Tensor::zeros(a.shape())), 0.2).unwrap();
        assert_eq!(out, x);
    }
}
