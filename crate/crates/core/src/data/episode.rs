use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::expert::{scripted_expert, Goal};
use super::world::{
    env_step, render, Color, Container, ContainerKind, Image, NativeAction, NativeState, Object,
    Shape, WorldState, CELL, GRID,
};
use super::DataError;

pub const PADDED_DIMS: usize = 20;
pub const NATIVE_DIMS: usize = 4;
pub const ARM_SLOTS: usize = 10;
/// Frames per second of generated episodes.
pub const FPS: f64 = 5.0;
/// Step budget for one scripted or learned rollout.
pub const EXPERT_STEP_LIMIT: usize = 120;
/// Episodes are padded with no-op steps to at least this many frames.
pub const MIN_FRAMES: usize = 8;

pub type Vec20 = [f64; PADDED_DIMS];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arm {
    Left,
    Right,
}

impl Arm {
    pub fn offset(self) -> usize {
        match self {
            Arm::Left => 0,
            Arm::Right => ARM_SLOTS,
        }
    }
}

/// Places a native vector into the assigned arm's leading slots.
pub fn pad_to_20(native: &[f64; NATIVE_DIMS], arm: Arm) -> Vec20 {
    let mut out = [0.0; PADDED_DIMS];
    out[arm.offset()..arm.offset() + NATIVE_DIMS].copy_from_slice(native);
    out
}

pub fn unpad(padded: &Vec20, arm: Arm) -> [f64; NATIVE_DIMS] {
    let mut out = [0.0; NATIVE_DIMS];
    out.copy_from_slice(&padded[arm.offset()..arm.offset() + NATIVE_DIMS]);
    out
}

/// One demonstration. `frames`, `states` and `actions` have equal length; the
/// final action is the terminal no-op (all zeros).
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub id: usize,
    pub instruction: String,
    pub frames: Vec<Image>,
    pub states: Vec<Vec20>,
    pub actions: Vec<Vec20>,
    pub fps: f64,
    pub arm: Arm,
    pub init: WorldState,
    pub goal: Goal,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// `k` consecutive actions starting at `t`, zero-padded past the end.
    pub fn chunk(&self, t: usize, k: usize) -> Vec<Vec20> {
        (t..t + k).map(|i| self.actions.get(i).copied().unwrap_or([0.0; PADDED_DIMS])).collect()
    }

    /// Frame offset corresponding to one second.
    pub fn frames_per_second(&self) -> usize {
        self.fps.round() as usize
    }
}

pub fn instruction_for(state: &WorldState, goal: &Goal) -> String {
    format!(
        "put the {} into the {}",
        state.objects[goal.object].name(),
        state.containers[goal.container].kind.word()
    )
}

fn cell_center(col: usize, row: usize) -> [f64; 2] {
    [(col as f64 + 0.5) * CELL, (row as f64 + 0.5) * CELL]
}

/// Three objects in distinct columns of the upper rows and two containers in
/// the bottom row.
pub fn random_scene<R: Rng + ?Sized>(rng: &mut R) -> (WorldState, Goal) {
    let mut cols: Vec<usize> = (0..GRID).collect();
    cols.shuffle(rng);
    let mut kinds: Vec<(Color, Shape)> = Color::ALL
        .iter()
        .flat_map(|&c| Shape::ALL.iter().map(move |&s| (c, s)))
        .collect();
    kinds.shuffle(rng);
    let objects = (0..3)
        .map(|i| Object {
            color: kinds[i].0,
            shape: kinds[i].1,
            pos: cell_center(cols[i], rng.gen_range(0..GRID - 1)),
        })
        .collect();
    let mut ccols: Vec<usize> = (0..GRID).collect();
    ccols.shuffle(rng);
    let mut ckinds = ContainerKind::ALL.to_vec();
    ckinds.shuffle(rng);
    let containers = (0..2)
        .map(|i| Container { kind: ckinds[i], center: cell_center(ccols[i], GRID - 1), half: CELL / 2.0 })
        .collect();
    let state = WorldState {
        gripper: [rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)],
        gripper_closed: false,
        objects,
        containers,
        held: None,
    };
    let goal = Goal { object: rng.gen_range(0..3), container: rng.gen_range(0..2) };
    (state, goal)
}

fn to_f32_precision(a: NativeAction) -> NativeAction {
    a.map(|v| f64::from(v as f32))
}

fn padded_state(s: &NativeState, arm: Arm) -> Vec20 {
    pad_to_20(&s.map(|v| f64::from(v as f32)), arm)
}

/// Rolls the scripted expert from `init`. `None` if it fails within the budget.
pub fn rollout_expert(id: usize, init: WorldState, goal: Goal, arm: Arm) -> Option<Episode> {
    let mut s = init.clone();
    let mut frames = vec![render(&s)];
    let mut states = vec![padded_state(&s.native_state(), arm)];
    let mut actions = Vec::new();
    let mut done = false;
    for _ in 0..EXPERT_STEP_LIMIT {
        let a = to_f32_precision(scripted_expert(&s, &goal));
        s = env_step(&s, &a);
        actions.push(pad_to_20(&a, arm));
        frames.push(render(&s));
        states.push(padded_state(&s.native_state(), arm));
        if s.placed(goal.object, goal.container) {
            done = true;
            break;
        }
    }
    if !done {
        return None;
    }
    while frames.len() < MIN_FRAMES {
        let a = [0.0; NATIVE_DIMS];
        s = env_step(&s, &a);
        actions.push(pad_to_20(&a, arm));
        frames.push(render(&s));
        states.push(padded_state(&s.native_state(), arm));
    }
    actions.push([0.0; PADDED_DIMS]);
    Some(Episode {
        id,
        instruction: instruction_for(&init, &goal),
        frames,
        states,
        actions,
        fps: FPS,
        arm,
        init,
        goal,
    })
}

/// Independent RNG stream for item `index` under `seed`.
pub fn stream_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(index);
    r
}

/// Scene, goal and arm for episode `index` of the dataset generated from `seed`.
pub fn draw_scene(seed: u64, index: usize) -> (WorldState, Goal, Arm) {
    let mut rng = stream_rng(seed, index as u64);
    let (state, goal) = random_scene(&mut rng);
    let arm = if rng.gen_bool(0.5) { Arm::Left } else { Arm::Right };
    (state, goal, arm)
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub seed: u64,
    pub episodes: Vec<Episode>,
}

/// `n` successful expert episodes. Aborts if fewer than half the attempted
/// scenes succeed.
pub fn generate_dataset(n: usize, seed: u64) -> Result<Dataset, DataError> {
    if n == 0 {
        return Err(DataError::Invalid("n_episodes must be at least 1".into()));
    }
    let mut episodes = Vec::with_capacity(n);
    let mut attempts = 0usize;
    let mut index = 0usize;
    while episodes.len() < n {
        let (state, goal, arm) = draw_scene(seed, index);
        index += 1;
        attempts += 1;
        if let Some(ep) = rollout_expert(episodes.len(), state, goal, arm) {
            episodes.push(ep);
        }
        if attempts >= 20 && episodes.len() * 2 < attempts {
            return Err(DataError::LowSuccess { succeeded: episodes.len(), attempted: attempts });
        }
    }
    Ok(Dataset { seed, episodes })
}

#[derive(Clone, Debug, PartialEq)]
pub struct QaSample {
    pub frame: Image,
    pub question: String,
    pub answer: String,
    pub scene: WorldState,
    pub subject: usize,
}

/// Object immediately to the left of `subject` (largest x below the subject's).
pub fn left_of(scene: &WorldState, subject: usize) -> Option<usize> {
    let x = scene.objects[subject].pos[0];
    scene
        .objects
        .iter()
        .enumerate()
        .filter(|(i, o)| *i != subject && o.pos[0] < x)
        .max_by(|a, b| a.1.pos[0].total_cmp(&b.1.pos[0]))
        .map(|(i, _)| i)
}

pub fn qa_answer(scene: &WorldState, subject: usize) -> String {
    match left_of(scene, subject) {
        Some(i) => format!("the {}", scene.objects[i].name()),
        None => "nothing".to_string(),
    }
}

pub fn generate_qa(n: usize, seed: u64) -> Result<Vec<QaSample>, DataError> {
    if n == 0 {
        return Err(DataError::Invalid("n must be at least 1".into()));
    }
    Ok((0..n)
        .map(|i| {
            let mut rng = stream_rng(seed ^ 0x5141_5141, i as u64);
            let (scene, _) = random_scene(&mut rng);
            let subject = rng.gen_range(0..scene.objects.len());
            QaSample {
                frame: render(&scene),
                question: format!("which object is left of the {}?", scene.objects[subject].name()),
                answer: qa_answer(&scene, subject),
                scene,
                subject,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pad_right_fills_slots_ten_to_thirteen() {
        let p = pad_to_20(&[1.0, 2.0, 3.0, 4.0], Arm::Right);
        for (i, v) in p.iter().enumerate() {
            let expect = if (10..14).contains(&i) { (i - 9) as f64 } else { 0.0 };
            assert_eq!(*v, expect);
        }
        assert_eq!(pad_to_20(&[0.0; 4], Arm::Left), [0.0; 20]);
    }

    #[test]
    fn chunk_pads_past_the_end() {
        let ds = generate_dataset(1, 3).unwrap();
        let ep = &ds.episodes[0];
        let c = ep.chunk(ep.len() - 2, 7);
        assert_eq!(c.len(), 7);
        assert!(c[2..].iter().all(|r| r.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn episodes_have_aligned_lengths_and_terminal_noop() {
        let ds = generate_dataset(5, 11).unwrap();
        for ep in &ds.episodes {
            assert_eq!(ep.frames.len(), ep.states.len());
            assert_eq!(ep.states.len(), ep.actions.len());
            assert!(ep.len() >= MIN_FRAMES);
            assert_eq!(*ep.actions.last().unwrap(), [0.0; 20]);
        }
    }

    #[test]
    fn zero_episodes_is_an_error() {
        assert!(generate_dataset(0, 1).is_err());
        assert!(generate_qa(0, 1).is_err());
    }
}
