use serde::{Deserialize, Serialize};

/// Side length of rendered observations in pixels.
pub const IMAGE_SIZE: usize = 32;
pub const CHANNELS: usize = 3;
pub const PIXELS: usize = IMAGE_SIZE * IMAGE_SIZE * CHANNELS;
/// Maximum per-axis gripper displacement per step.
pub const MAX_STEP: f64 = 0.1;
/// Grab radius around the gripper.
pub const GRAB_RADIUS: f64 = 0.05;
/// Scenes are laid out on a `GRID × GRID` lattice of cells.
pub const GRID: usize = 4;
pub const CELL: f64 = 1.0 / GRID as f64;
const OBJECT_RADIUS: f64 = 0.09;

pub const BACKGROUND: [f32; 3] = [0.12, 0.12, 0.14];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum ContainerKind {
    Bowl,
    Box,
    Basket,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];
    pub fn word(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }
}

impl Color {
    pub const ALL: [Color; 3] = [Color::Red, Color::Green, Color::Blue];
    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
        }
    }
    fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [0.9, 0.15, 0.15],
            Color::Green => [0.15, 0.85, 0.2],
            Color::Blue => [0.2, 0.3, 0.95],
        }
    }
}

impl ContainerKind {
    pub const ALL: [ContainerKind; 3] = [ContainerKind::Bowl, ContainerKind::Box, ContainerKind::Basket];
    pub fn word(self) -> &'static str {
        match self {
            ContainerKind::Bowl => "bowl",
            ContainerKind::Box => "box",
            ContainerKind::Basket => "basket",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Object {
    pub shape: Shape,
    pub color: Color,
    pub pos: [f64; 2],
}

impl Object {
    pub fn name(&self) -> String {
        format!("{} {}", self.color.word(), self.shape.word())
    }
}

/// Axis-aligned square region.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Container {
    pub kind: ContainerKind,
    pub center: [f64; 2],
    pub half: f64,
}

impl Container {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        (p[0] - self.center[0]).abs() <= self.half && (p[1] - self.center[1]).abs() <= self.half
    }
}

/// Full simulator state. Coordinates are in `[0,1]²`, `y` grows downward.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub gripper: [f64; 2],
    pub gripper_closed: bool,
    pub objects: Vec<Object>,
    pub containers: Vec<Container>,
    pub held: Option<usize>,
}

/// Native 4-dim action: `(dx, dy, grip, unused)`.
pub type NativeAction = [f64; 4];
/// Native 4-dim proprioceptive state: `(x, y, closed, holding)`.
pub type NativeState = [f64; 4];

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

impl WorldState {
    pub fn empty() -> Self {
        Self {
            gripper: [0.5, 0.5],
            gripper_closed: false,
            objects: Vec::new(),
            containers: Vec::new(),
            held: None,
        }
    }

    pub fn native_state(&self) -> NativeState {
        [
            self.gripper[0],
            self.gripper[1],
            f64::from(u8::from(self.gripper_closed)),
            f64::from(u8::from(self.held.is_some())),
        ]
    }

    /// `true` once `object` rests (not held) inside `container`.
    pub fn placed(&self, object: usize, container: usize) -> bool {
        self.held != Some(object) && self.containers[container].contains(self.objects[object].pos)
    }

    /// Nearest object within the grab radius; lowest index wins ties.
    fn graspable(&self) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, o) in self.objects.iter().enumerate() {
            let d = dist(o.pos, self.gripper);
            if d <= GRAB_RADIUS && best.map_or(true, |(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        best.map(|(i, _)| i)
    }
}

/// Advances the world by one action. Motion is applied first, then the grip.
pub fn env_step(state: &WorldState, action: &NativeAction) -> WorldState {
    let mut s = state.clone();
    let dx = action[0].clamp(-MAX_STEP, MAX_STEP);
    let dy = action[1].clamp(-MAX_STEP, MAX_STEP);
    s.gripper = [(s.gripper[0] + dx).clamp(0.0, 1.0), (s.gripper[1] + dy).clamp(0.0, 1.0)];
    if let Some(h) = s.held {
        s.objects[h].pos = s.gripper;
    }
    if action[2] > 0.5 {
        s.gripper_closed = true;
        if s.held.is_none() {
            s.held = s.graspable();
            if let Some(h) = s.held {
                s.objects[h].pos = s.gripper;
            }
        }
    } else {
        s.gripper_closed = false;
        s.held = None;
    }
    s
}

/// HWC `f32` image in `[0,1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub data: Vec<f32>,
}

impl Image {
    pub fn background() -> Self {
        let mut data = Vec::with_capacity(PIXELS);
        for _ in 0..IMAGE_SIZE * IMAGE_SIZE {
            data.extend_from_slice(&BACKGROUND);
        }
        Self { data }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * IMAGE_SIZE + x) * CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    fn set(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * IMAGE_SIZE + x) * CHANNELS;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }
}

fn pixel_center(p: usize) -> f64 {
    (p as f64 + 0.5) / IMAGE_SIZE as f64
}

fn inside_shape(shape: Shape, dx: f64, dy: f64) -> bool {
    let r = OBJECT_RADIUS;
    match shape {
        Shape::Circle => dx * dx + dy * dy <= r * r,
        Shape::Square => dx.abs() <= 0.8 * r && dy.abs() <= 0.8 * r,
        Shape::Triangle => dy >= -r && dy <= 0.8 * r && dx.abs() <= 0.5 * (dy + r),
    }
}

/// Deterministic rasterisation: containers, then objects, then the gripper.
pub fn render(state: &WorldState) -> Image {
    let mut img = Image::background();
    for c in &state.containers {
        for py in 0..IMAGE_SIZE {
            for px in 0..IMAGE_SIZE {
                let dx = pixel_center(px) - c.center[0];
                let dy = pixel_center(py) - c.center[1];
                let (ax, ay) = (dx.abs(), dy.abs());
                if ax > c.half || ay > c.half {
                    continue;
                }
                let edge = 1.0 / IMAGE_SIZE as f64;
                let on = match c.kind {
                    ContainerKind::Box => ax > c.half - edge * 1.5 || ay > c.half - edge * 1.5,
                    ContainerKind::Bowl => {
                        let r = (dx * dx + dy * dy).sqrt();
                        (r - (c.half - edge)).abs() <= edge * 0.9
                    }
                    ContainerKind::Basket => (px + py) % 2 == 0,
                };
                if on {
                    let rgb = match c.kind {
                        ContainerKind::Box => [0.95, 0.8, 0.2],
                        ContainerKind::Bowl => [0.9, 0.9, 0.9],
                        ContainerKind::Basket => [0.6, 0.4, 0.2],
                    };
                    img.set(px, py, rgb);
                }
            }
        }
    }
    for o in &state.objects {
        for py in 0..IMAGE_SIZE {
            for px in 0..IMAGE_SIZE {
                let dx = pixel_center(px) - o.pos[0];
                let dy = pixel_center(py) - o.pos[1];
                if inside_shape(o.shape, dx, dy) {
                    img.set(px, py, o.color.rgb());
                }
            }
        }
    }
    let gx = ((state.gripper[0] * IMAGE_SIZE as f64) as usize).min(IMAGE_SIZE - 1);
    let gy = ((state.gripper[1] * IMAGE_SIZE as f64) as usize).min(IMAGE_SIZE - 1);
    let rgb = if state.gripper_closed { [1.0, 0.4, 1.0] } else { [1.0, 1.0, 1.0] };
    for (ox, oy) in [(0i64, 0i64), (-1, 0), (1, 0), (0, -1), (0, 1)] {
        let x = gx as i64 + ox;
        let y = gy as i64 + oy;
        if (0..IMAGE_SIZE as i64).contains(&x) && (0..IMAGE_SIZE as i64).contains(&y) {
            img.set(x as usize, y as usize, rgb);
        }
    }
    img
}

/// Pixels the gripper marker can touch when the gripper is at `p`.
pub fn gripper_footprint(p: [f64; 2]) -> Vec<(usize, usize)> {
    let gx = ((p[0] * IMAGE_SIZE as f64) as usize).min(IMAGE_SIZE - 1) as i64;
    let gy = ((p[1] * IMAGE_SIZE as f64) as usize).min(IMAGE_SIZE - 1) as i64;
    [(0i64, 0i64), (-1, 0), (1, 0), (0, -1), (0, 1)]
        .iter()
        .map(|(ox, oy)| (gx + ox, gy + oy))
        .filter(|(x, y)| (0..IMAGE_SIZE as i64).contains(x) && (0..IMAGE_SIZE as i64).contains(y))
        .map(|(x, y)| (x as usize, y as usize))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_object(pos: [f64; 2]) -> WorldState {
        let mut s = WorldState::empty();
        s.objects.push(Object { shape: Shape::Circle, color: Color::Red, pos });
        s
    }

    #[test]
    fn zero_action_is_a_fixed_point() {
        let mut s = one_object([0.3, 0.3]);
        s.gripper = [0.61, 0.2];
        assert_eq!(env_step(&s, &[0.0; 4]), s);
    }

    #[test]
    fn motion_clips_to_bounds() {
        let mut s = WorldState::empty();
        s.gripper = [0.98, 0.5];
        let n = env_step(&s, &[0.1, 0.0, 0.0, 0.0]);
        assert_eq!(n.gripper[0], 1.0);
    }

    #[test]
    fn oversized_motion_is_clamped() {
        let s = WorldState::empty();
        let n = env_step(&s, &[0.5, -0.5, 0.0, 0.0]);
        assert!((n.gripper[0] - 0.6).abs() < 1e-12 && (n.gripper[1] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn close_grabs_within_radius() {
        let mut s = one_object([0.54, 0.5]);
        s.gripper = [0.5, 0.5];
        let n = env_step(&s, &[0.0, 0.0, 1.0, 0.0]);
        assert_eq!(n.held, Some(0));
        assert_eq!(n.objects[0].pos, n.gripper);

        let mut far = one_object([0.56, 0.5]);
        far.gripper = [0.5, 0.5];
        assert_eq!(env_step(&far, &[0.0, 0.0, 1.0, 0.0]).held, None);
    }

    #[test]
    fn held_object_tracks_and_drops() {
        let mut s = one_object([0.5, 0.5]);
        s.gripper = [0.5, 0.5];
        let s = env_step(&s, &[0.0, 0.0, 1.0, 0.0]);
        let s = env_step(&s, &[0.1, 0.05, 1.0, 0.0]);
        assert_eq!(s.objects[0].pos, s.gripper);
        let s = env_step(&s, &[0.0, 0.0, 0.0, 0.0]);
        assert_eq!(s.held, None);
        assert!((s.objects[0].pos[0] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn empty_scene_renders_background_outside_gripper() {
        let s = WorldState::empty();
        let img = render(&s);
        let fp = gripper_footprint(s.gripper);
        for y in 0..IMAGE_SIZE {
            for x in 0..IMAGE_SIZE {
                if !fp.contains(&(x, y)) {
                    assert_eq!(img.pixel(x, y), BACKGROUND);
                }
            }
        }
    }

    #[test]
    fn centred_object_colours_the_centre() {
        let mut s = one_object([0.5, 0.5]);
        s.gripper = [0.05, 0.05];
        let img = render(&s);
        assert_eq!(img.pixel(16, 16), Color::Red.rgb());
        assert_eq!(img.pixel(15, 15), Color::Red.rgb());
    }

    #[test]
    fn render_is_deterministic() {
        let mut s = one_object([0.37, 0.61]);
        s.containers.push(Container { kind: ContainerKind::Bowl, center: [0.625, 0.875], half: 0.125 });
        assert_eq!(render(&s), render(&s));
    }
}
