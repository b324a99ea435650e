use serde::{Deserialize, Serialize};

use super::world::{NativeAction, WorldState, MAX_STEP};

/// Which object goes into which container, by index into the world's lists.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Goal {
    pub object: usize,
    pub container: usize,
}

const ARRIVED: f64 = 1e-9;

fn step_toward(from: [f64; 2], to: [f64; 2]) -> ([f64; 2], bool) {
    let d = [
        (to[0] - from[0]).clamp(-MAX_STEP, MAX_STEP),
        (to[1] - from[1]).clamp(-MAX_STEP, MAX_STEP),
    ];
    let after = [from[0] + d[0], from[1] + d[1]];
    let arrived = (after[0] - to[0]).abs() <= ARRIVED && (after[1] - to[1]).abs() <= ARRIVED;
    (d, arrived)
}

/// Saturating proportional controller: reach, grip, carry, release.
pub fn scripted_expert(state: &WorldState, goal: &Goal) -> NativeAction {
    match state.held {
        Some(h) if h == goal.object => {
            let target = state.containers[goal.container].center;
            let (d, arrived) = step_toward(state.gripper, target);
            [d[0], d[1], if arrived { 0.0 } else { 1.0 }, 0.0]
        }
        // wrong object in hand: let go where we are
        Some(_) => [0.0, 0.0, 0.0, 0.0],
        None => {
            if state.placed(goal.object, goal.container) {
                return [0.0; 4];
            }
            let target = state.objects[goal.object].pos;
            let (d, arrived) = step_toward(state.gripper, target);
            [d[0], d[1], if arrived { 1.0 } else { 0.0 }, 0.0]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::world::*;

    fn scene() -> (WorldState, Goal) {
        let mut s = WorldState::empty();
        s.objects.push(Object { shape: Shape::Square, color: Color::Blue, pos: [0.125, 0.375] });
        s.containers.push(Container { kind: ContainerKind::Box, center: [0.875, 0.875], half: 0.125 });
        s.gripper = [0.9, 0.1];
        (s, Goal { object: 0, container: 0 })
    }

    #[test]
    fn releases_over_container_while_holding() {
        let (mut s, goal) = scene();
        s.gripper = s.containers[0].center;
        s.held = Some(0);
        s.gripper_closed = true;
        s.objects[0].pos = s.gripper;
        let a = scripted_expert(&s, &goal);
        assert_eq!(a, [0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn completes_the_task_with_bounded_steps() {
        let (mut s, goal) = scene();
        for _ in 0..120 {
            let a = scripted_expert(&s, &goal);
            assert!(a[0].abs() <= MAX_STEP && a[1].abs() <= MAX_STEP);
            s = env_step(&s, &a);
            if s.placed(goal.object, goal.container) {
                return;
            }
        }
        panic!("expert did not finish");
    }
}
