use serde::{Deserialize, Serialize};

use super::{ParamGrads, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Momentum-free gradient descent.
    #[default]
    Sgd,
    Adam,
}

/// Linear warmup followed by cosine decay to `floor · base`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub total_steps: usize,
    pub warmup: usize,
    pub floor: f64,
}

impl LrSchedule {
    pub fn constant(base: f64) -> Self {
        Self { base, total_steps: 0, warmup: 0, floor: 1.0 }
    }

    pub fn cosine(base: f64, total_steps: usize) -> Self {
        Self { base, total_steps, warmup: 0, floor: 0.0 }
    }

    pub fn at(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.base * (step + 1) as f64 / self.warmup as f64;
        }
        if self.total_steps <= self.warmup {
            return self.base;
        }
        let span = (self.total_steps - self.warmup) as f64;
        let t = ((step - self.warmup) as f64 / span).min(1.0);
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
        self.base * (self.floor + (1.0 - self.floor) * cos)
    }
}

#[derive(Clone, Debug)]
struct AdamSlot {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

/// Applies updates only to parameters present in the gradient map, so
/// parameters a step never touched stay bit-identical.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    pub schedule: LrSchedule,
    clip_norm: Option<f64>,
    slots: Vec<Option<AdamSlot>>,
    step: usize,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, schedule: LrSchedule) -> Self {
        Self { kind, schedule, clip_norm: None, slots: Vec::new(), step: 0 }
    }

    pub fn with_clip(mut self, max_norm: f64) -> Self {
        self.clip_norm = Some(max_norm);
        self
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        self.schedule.at(self.step)
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads) {
        let lr = self.schedule.at(self.step);
        self.step += 1;
        let scale = match self.clip_norm {
            Some(c) => {
                let n = grads.global_norm();
                if n > c { c / n } else { 1.0 }
            }
            None => 1.0,
        };
        if self.slots.len() < store.len() {
            self.slots.resize(store.len(), None);
        }
        for (id, g) in grads.iter() {
            let p: &mut Tensor = store.by_id_mut(id);
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, gi) in p.data_mut().iter_mut().zip(g.data()) {
                        *w -= lr * scale * gi;
                    }
                }
                OptimizerKind::Adam => {
                    const B1: f64 = 0.9;
                    const B2: f64 = 0.999;
                    const EPS: f64 = 1e-8;
                    let slot = self.slots[id].get_or_insert_with(|| AdamSlot {
                        m: vec![0.0; g.numel()],
                        v: vec![0.0; g.numel()],
                        t: 0,
                    });
                    slot.t += 1;
                    let c1 = 1.0 - B1.powi(slot.t as i32);
                    let c2 = 1.0 - B2.powi(slot.t as i32);
                    for (i, w) in p.data_mut().iter_mut().enumerate() {
                        let gi = g.data()[i] * scale;
                        slot.m[i] = B1 * slot.m[i] + (1.0 - B1) * gi;
                        slot.v[i] = B2 * slot.v[i] + (1.0 - B2) * gi * gi;
                        *w -= lr * (slot.m[i] / c1) / ((slot.v[i] / c2).sqrt() + EPS);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_hits_endpoints() {
        let s = LrSchedule::cosine(0.1, 100);
        assert!((s.at(0) - 0.1).abs() < 1e-15);
        assert!(s.at(100).abs() < 1e-15);
        assert!((s.at(50) - 0.05).abs() < 1e-12);
    }

    #[test]
    fn untouched_parameters_do_not_move() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::full(&[2], 1.0));
        store.insert("b", Tensor::full(&[2], 1.0));
        let mut opt = Optimizer::new(OptimizerKind::Adam, LrSchedule::constant(0.1));
        let mut scope = crate::grad::Scope::new(&store);
        let a = scope.p("a").unwrap();
        let l = scope.graph.sum(a);
        let g = scope.backward(l).unwrap();
        opt.step(&mut store, &g);
        assert_eq!(store.get("b").unwrap().data(), &[1.0, 1.0]);
        assert!(store.get("a").unwrap().data()[0] < 1.0);
    }
}
