//! Four-rooms gridworld on a 16x16 layout: outer walls plus a cross wall
//! with two doorways per arm. The agent has an orientation and moves
//! relative to it; rotations and strafes come from the 10-action set shared
//! with the door-key domain.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::draw::{Canvas, AGENT_BODY, AGENT_NOSE, FLOOR, WALL};
use super::{ActionId, EnvError, EnvSpec, Environment, Observation, State};

pub const GRID: i32 = 16;
const CELL: usize = 2;

/// Facing directions: 0 North (up), 1 East, 2 South, 3 West; clockwise order.
pub const DIRS: [(i32, i32); 4] = [(0, -1), (1, 0), (0, 1), (-1, 0)];

const F_X: usize = 0;
const F_Y: usize = 1;
const F_DIR: usize = 2;

pub struct FourRooms {
    spec: EnvSpec,
}

impl FourRooms {
    pub fn new() -> Self {
        Self {
            spec: EnvSpec {
                name: "fourrooms".into(),
                n_actions: 10,
                k_gt: 3,
                factor_names: vec!["agent_x".into(), "agent_y".into(), "agent_dir".into()],
                factor_ranges: vec![(1.0, 14.0), (1.0, 14.0), (0.0, 3.0)],
                controllable: vec![true, true, true],
                latent_dim: 5,
            },
        }
    }

    pub fn is_wall(x: i32, y: i32) -> bool {
        if x <= 0 || y <= 0 || x >= GRID - 1 || y >= GRID - 1 {
            return true;
        }
        // cross walls at row/col 8, doorways at 4 and 12 on each arm
        if y == 8 && x != 4 && x != 12 {
            return true;
        }
        if x == 8 && y != 4 && y != 12 {
            return true;
        }
        false
    }

    fn walkable_cells() -> Vec<(i32, i32)> {
        let mut v = Vec::new();
        for y in 0..GRID {
            for x in 0..GRID {
                if !Self::is_wall(x, y) {
                    v.push((x, y));
                }
            }
        }
        v
    }
}

impl Default for FourRooms {
    fn default() -> Self {
        Self::new()
    }
}

/// Apply one of the shared 10 actions to (x, y, dir) given a wall predicate.
/// Returns the new pose; blocked moves leave the position unchanged.
pub(crate) fn oriented_move(
    x: i32,
    y: i32,
    dir: i32,
    action: u8,
    blocked: impl Fn(i32, i32) -> bool,
) -> (i32, i32, i32) {
    match action {
        1 => (x, y, (dir + 1).rem_euclid(4)),
        2 => (x, y, (dir + 3).rem_euclid(4)),
        3 | 4 | 5 | 6 => {
            let move_dir = match action {
                3 => dir,                       // forward
                4 => (dir + 2).rem_euclid(4),   // backward
                5 => (dir + 1).rem_euclid(4),   // strafe right
                _ => (dir + 3).rem_euclid(4),   // strafe left
            };
            let (dx, dy) = DIRS[move_dir as usize];
            let (nx, ny) = (x + dx, y + dy);
            if blocked(nx, ny) {
                (x, y, dir)
            } else {
                (nx, ny, dir)
            }
        }
        _ => (x, y, dir), // no-op, pickup, open, done
    }
}

impl Environment for FourRooms {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&self, rng: &mut ChaCha8Rng) -> State {
        let cells = Self::walkable_cells();
        let (x, y) = cells[rng.gen_range(0..cells.len())];
        let dir = rng.gen_range(0..4);
        State(vec![x as f32, y as f32, dir as f32])
    }

    fn step(&self, s: &State, a: ActionId) -> Result<State, EnvError> {
        self.check_action(a, "fourrooms")?;
        let (x, y, dir) = (s.0[F_X] as i32, s.0[F_Y] as i32, s.0[F_DIR] as i32);
        let (nx, ny, ndir) = oriented_move(x, y, dir, a.0, |cx, cy| Self::is_wall(cx, cy));
        Ok(State(vec![nx as f32, ny as f32, ndir as f32]))
    }

    fn render(&self, s: &State) -> Observation {
        let mut c = Canvas::filled(FLOOR);
        for y in 0..GRID {
            for x in 0..GRID {
                if Self::is_wall(x, y) {
                    c.fill_rect(x as usize * CELL, y as usize * CELL, CELL, CELL, WALL);
                }
            }
        }
        let (ax, ay) = (s.0[F_X] as usize * CELL, s.0[F_Y] as usize * CELL);
        c.fill_rect(ax, ay, CELL, CELL, AGENT_BODY);
        // nose marks the facing edge of the 2x2 agent block
        match s.0[F_DIR] as i32 {
            0 => c.fill_rect(ax, ay, 2, 1, AGENT_NOSE),
            1 => c.fill_rect(ax + 1, ay, 1, 2, AGENT_NOSE),
            2 => c.fill_rect(ax, ay + 1, 2, 1, AGENT_NOSE),
            _ => c.fill_rect(ax, ay, 1, 2, AGENT_NOSE),
        }
        Observation::new(c.into_pixels())
    }

    fn enumerate_states(&self) -> Option<Vec<State>> {
        let mut out = Vec::new();
        for (x, y) in Self::walkable_cells() {
            for dir in 0..4 {
                out.push(State(vec![x as f32, y as f32, dir as f32]));
            }
        }
        Some(out)
    }
}
