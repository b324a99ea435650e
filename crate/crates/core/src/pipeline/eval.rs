use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{
    draw_scene, env_step, pad_to_20, render, scripted_expert, stream_rng, Arm, Dataset, Goal, NativeAction,
    WorldState, MAX_STEP,
};

use super::model::Vla;
use super::PipelineError;

pub const SUCCESS_HORIZON: usize = 150;

/// Anything that turns an observation into a chunk of native actions.
pub trait Policy {
    fn act(
        &mut self,
        world: &WorldState,
        goal: &Goal,
        instruction: &str,
        arm: Arm,
    ) -> Result<Vec<NativeAction>, PipelineError>;

    /// Called once at the start of every episode with its private RNG seed.
    fn reset(&mut self, _episode_seed: u64) {}
}

/// The scripted controller, simulated `k` steps ahead and executed open loop.
pub struct ScriptedPolicy {
    pub k: usize,
}

impl Policy for ScriptedPolicy {
    fn act(&mut self, world: &WorldState, goal: &Goal, _: &str, _: Arm) -> Result<Vec<NativeAction>, PipelineError> {
        let mut s = world.clone();
        let mut out = Vec::with_capacity(self.k);
        for _ in 0..self.k {
            let a = scripted_expert(&s, goal);
            s = env_step(&s, &a);
            out.push(a);
        }
        Ok(out)
    }
}

/// Uniform random motion with a random grip bit.
pub struct RandomPolicy {
    pub k: usize,
    rng: ChaCha8Rng,
}

impl RandomPolicy {
    pub fn new(k: usize) -> Self {
        Self { k, rng: ChaCha8Rng::seed_from_u64(0) }
    }
}

impl Policy for RandomPolicy {
    fn act(&mut self, _: &WorldState, _: &Goal, _: &str, _: Arm) -> Result<Vec<NativeAction>, PipelineError> {
        Ok((0..self.k)
            .map(|_| {
                [
                    self.rng.gen_range(-MAX_STEP..=MAX_STEP),
                    self.rng.gen_range(-MAX_STEP..=MAX_STEP),
                    if self.rng.gen_bool(0.5) { 1.0 } else { 0.0 },
                    0.0,
                ]
            })
            .collect())
    }

    fn reset(&mut self, episode_seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(episode_seed);
    }
}

/// The trained model, re-inferring after each executed chunk.
pub struct VlaPolicy<'a> {
    pub vla: &'a Vla,
    rng: ChaCha8Rng,
}

impl<'a> VlaPolicy<'a> {
    pub fn new(vla: &'a Vla) -> Self {
        Self { vla, rng: ChaCha8Rng::seed_from_u64(0) }
    }
}

impl Policy for VlaPolicy<'_> {
    fn act(&mut self, world: &WorldState, _: &Goal, instruction: &str, arm: Arm) -> Result<Vec<NativeAction>, PipelineError> {
        let img = render(world);
        let state = pad_to_20(&world.native_state().map(|v| f64::from(v as f32)), arm);
        Ok(self.vla.infer_chunk(&img, instruction, &state, &mut self.rng)?.native(arm))
    }

    fn reset(&mut self, episode_seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(episode_seed);
    }
}

#[derive(Clone, Debug)]
pub struct Scene {
    pub init: WorldState,
    pub goal: Goal,
    pub arm: Arm,
}

/// Initial configurations of the first `n` training episodes.
pub fn seen_scenes(ds: &Dataset, n: usize) -> Vec<Scene> {
    ds.episodes.iter().take(n).map(|e| Scene { init: e.init.clone(), goal: e.goal, arm: e.arm }).collect()
}

/// `n` scenes drawn from `seed`.
pub fn drawn_scenes(n: usize, seed: u64) -> Vec<Scene> {
    (0..n)
        .map(|i| {
            let (init, goal, arm) = draw_scene(seed, i);
            Scene { init, goal, arm }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeOutcome {
    pub success: bool,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub success_rate: f64,
    pub episodes: usize,
    pub outcomes: Vec<EpisodeOutcome>,
    pub losses_csv: Option<PathBuf>,
}

impl EvalReport {
    pub fn successes(&self) -> usize {
        self.outcomes.iter().filter(|o| o.success).count()
    }

    pub fn step_counts(&self) -> Vec<usize> {
        self.outcomes.iter().map(|o| o.steps).collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "success_rate {:.4}", self.success_rate);
        let _ = writeln!(s, "episodes {}", self.episodes);
        let _ = writeln!(s, "successes {}", self.successes());
        if let Some(p) = &self.losses_csv {
            let _ = writeln!(s, "losses_csv {}", p.display());
        }
        let _ = writeln!(s, "# episode success steps");
        for (i, o) in self.outcomes.iter().enumerate() {
            let _ = writeln!(s, "{i} {} {}", u8::from(o.success), o.steps);
        }
        s
    }

    pub fn outcomes_csv(&self) -> String {
        let mut s = String::from("episode,success,steps\n");
        for (i, o) in self.outcomes.iter().enumerate() {
            let _ = writeln!(s, "{i},{},{}", u8::from(o.success), o.steps);
        }
        s
    }

    /// Writes `<stem>.txt` and `<stem>_episodes.csv`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<(), PipelineError> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("{stem}.txt")), self.to_text())?;
        std::fs::write(dir.join(format!("{stem}_episodes.csv")), self.outcomes_csv())?;
        Ok(())
    }
}

/// Runs one closed-loop episode: every action of a chunk is executed before re-inference.
pub fn rollout<P: Policy + ?Sized>(policy: &mut P, scene: &Scene, max_steps: usize) -> Result<EpisodeOutcome, PipelineError> {
    let instruction = crate::data::instruction_for(&scene.init, &scene.goal);
    let mut s = scene.init.clone();
    let mut steps = 0;
    while steps < max_steps {
        let chunk = policy.act(&s, &scene.goal, &instruction, scene.arm)?;
        if chunk.is_empty() {
            return Err(PipelineError::Contract("policy returned an empty chunk".into()));
        }
        for a in &chunk {
            s = env_step(&s, a);
            steps += 1;
            if s.placed(scene.goal.object, scene.goal.container) {
                return Ok(EpisodeOutcome { success: true, steps });
            }
            if steps >= max_steps {
                break;
            }
        }
    }
    Ok(EpisodeOutcome { success: false, steps })
}

pub fn evaluate_scenes<P: Policy + ?Sized>(
    policy: &mut P,
    scenes: &[Scene],
    max_steps: usize,
    seed: u64,
) -> Result<EvalReport, PipelineError> {
    let mut outcomes = Vec::with_capacity(scenes.len());
    for (i, scene) in scenes.iter().enumerate() {
        policy.reset(stream_rng(seed, i as u64).gen());
        outcomes.push(rollout(policy, scene, max_steps)?);
    }
    let successes = outcomes.iter().filter(|o| o.success).count();
    Ok(EvalReport {
        success_rate: if scenes.is_empty() { 0.0 } else { successes as f64 / scenes.len() as f64 },
        episodes: scenes.len(),
        outcomes,
        losses_csv: None,
    })
}

/// `n_episodes` fresh scenes drawn from `seed`, with the standard horizon.
pub fn evaluate<P: Policy + ?Sized>(policy: &mut P, n_episodes: usize, seed: u64) -> Result<EvalReport, PipelineError> {
    evaluate_scenes(policy, &drawn_scenes(n_episodes, seed), SUCCESS_HORIZON, seed)
}
