//! 8x8 door-key world. A dividing wall with a door whose row is sampled per
//! episode and then fixed; a key on the left side that the agent must face
//! to pick up; the door opens only while holding the key. The door row is
//! the one factor no action can change.
//!
//! Factor layout (also the exported ground truth):
//! [agent_x, agent_y, agent_dir, key_held, door_open, door_y, key_x].
//! While the key is held it has no grid cell; key_x tracks agent_x.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::draw::{Canvas, AGENT_BODY, AGENT_NOSE, DOOR, FLOOR, KEY, WALL};
use super::fourrooms::{oriented_move, DIRS};
use super::{ActionId, EnvError, EnvSpec, Environment, Observation, State};

pub const GRID: i32 = 8;
const CELL: usize = 4;
/// Column of the dividing wall.
pub const WALL_X: i32 = 4;
/// Keys always spawn on this row; only their column varies.
pub const KEY_Y: i32 = 3;

const F_X: usize = 0;
const F_Y: usize = 1;
const F_DIR: usize = 2;
const F_HELD: usize = 3;
const F_OPEN: usize = 4;
const F_DOOR_Y: usize = 5;
const F_KEY_X: usize = 6;

pub struct DoorKey {
    spec: EnvSpec,
}

impl DoorKey {
    pub fn new() -> Self {
        Self {
            spec: EnvSpec {
                name: "doorkey".into(),
                n_actions: 10,
                k_gt: 7,
                factor_names: vec![
                    "agent_x".into(),
                    "agent_y".into(),
                    "agent_dir".into(),
                    "key_held".into(),
                    "door_open".into(),
                    "door_y".into(),
                    "key_x".into(),
                ],
                factor_ranges: vec![
                    (1.0, 6.0),
                    (1.0, 6.0),
                    (0.0, 3.0),
                    (0.0, 1.0),
                    (0.0, 1.0),
                    (1.0, 6.0),
                    (1.0, 6.0),
                ],
                controllable: vec![true, true, true, true, true, false, true],
                latent_dim: 7,
            },
        }
    }

    fn blocked(f: &[f32], x: i32, y: i32) -> bool {
        if x <= 0 || y <= 0 || x >= GRID - 1 || y >= GRID - 1 {
            return true;
        }
        if x == WALL_X {
            // only the door cell can be passed, and only once opened
            return !(y == f[F_DOOR_Y] as i32 && f[F_OPEN] > 0.5);
        }
        // a key on the ground blocks its cell
        if f[F_HELD] < 0.5 && x == f[F_KEY_X] as i32 && y == KEY_Y {
            return true;
        }
        false
    }

    fn agent_cells(f: &[f32]) -> Vec<(i32, i32)> {
        let mut v = Vec::new();
        for y in 1..GRID - 1 {
            for x in 1..GRID - 1 {
                if !Self::blocked(f, x, y) {
                    v.push((x, y));
                }
            }
        }
        v
    }
}

impl Default for DoorKey {
    fn default() -> Self {
        Self::new()
    }
}

impl Environment for DoorKey {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&self, rng: &mut ChaCha8Rng) -> State {
        let door_y = rng.gen_range(1..GRID - 1) as f32;
        let key_x = rng.gen_range(1..WALL_X) as f32;
        // Holding/open states are rare under uniform random actions; sampling
        // them at reset keeps those factors represented in collected data.
        let held = if rng.gen_range(0.0..1.0) < 0.3 { 1.0 } else { 0.0 };
        let open = if rng.gen_range(0.0..1.0) < 0.3 { 1.0 } else { 0.0 };
        let dir = rng.gen_range(0..4) as f32;
        let mut f = vec![0.0, 0.0, dir, held, open, door_y, key_x];
        let cells = Self::agent_cells(&f);
        let (ax, ay) = cells[rng.gen_range(0..cells.len())];
        f[F_X] = ax as f32;
        f[F_Y] = ay as f32;
        if held > 0.5 {
            f[F_KEY_X] = ax as f32;
        }
        State(f)
    }

    fn step(&self, s: &State, a: ActionId) -> Result<State, EnvError> {
        self.check_action(a, "doorkey")?;
        let mut f = s.0.clone();
        let (x, y, dir) = (f[F_X] as i32, f[F_Y] as i32, f[F_DIR] as i32);
        match a.0 {
            7 => {
                // pickup: must face the key cell
                let (dx, dy) = DIRS[dir as usize];
                if f[F_HELD] < 0.5 && x + dx == f[F_KEY_X] as i32 && y + dy == KEY_Y {
                    f[F_HELD] = 1.0;
                    f[F_KEY_X] = f[F_X];
                }
            }
            8 => {
                // open: must face the door while holding the key
                let (dx, dy) = DIRS[dir as usize];
                if f[F_HELD] > 0.5 && f[F_OPEN] < 0.5 && x + dx == WALL_X && y + dy == f[F_DOOR_Y] as i32 {
                    f[F_OPEN] = 1.0;
                }
            }
            _ => {
                let (nx, ny, ndir) = oriented_move(x, y, dir, a.0, |cx, cy| Self::blocked(&f, cx, cy));
                f[F_X] = nx as f32;
                f[F_Y] = ny as f32;
                f[F_DIR] = ndir as f32;
                if f[F_HELD] > 0.5 {
                    f[F_KEY_X] = nx as f32;
                }
            }
        }
        Ok(State(f))
    }

    fn render(&self, s: &State) -> Observation {
        let f = &s.0;
        let mut c = Canvas::filled(FLOOR);
        let door_y = f[F_DOOR_Y] as i32;
        for y in 0..GRID {
            for x in 0..GRID {
                let ring = x == 0 || y == 0 || x == GRID - 1 || y == GRID - 1;
                if ring || (x == WALL_X && y != door_y) {
                    c.fill_rect(x as usize * CELL, y as usize * CELL, CELL, CELL, WALL);
                }
            }
        }
        // door: solid while closed, frame once opened
        let (dx, dy) = (WALL_X as usize * CELL, door_y as usize * CELL);
        if f[F_OPEN] > 0.5 {
            c.outline_rect(dx, dy, CELL, CELL, DOOR);
        } else {
            c.fill_rect(dx, dy, CELL, CELL, DOOR);
        }
        // key on the ground
        if f[F_HELD] < 0.5 {
            let (kx, ky) = (f[F_KEY_X] as usize * CELL, KEY_Y as usize * CELL);
            c.fill_rect(kx + 1, ky + 1, 2, 2, KEY);
        }
        // agent: body, held-key marker in the center, nose on the facing edge
        let (ax, ay) = (f[F_X] as usize * CELL, f[F_Y] as usize * CELL);
        c.fill_rect(ax, ay, CELL, CELL, AGENT_BODY);
        if f[F_HELD] > 0.5 {
            c.fill_rect(ax + 1, ay + 1, 2, 2, KEY);
        }
        match f[F_DIR] as i32 {
            0 => c.fill_rect(ax, ay, CELL, 1, AGENT_NOSE),
            1 => c.fill_rect(ax + CELL - 1, ay, 1, CELL, AGENT_NOSE),
            2 => c.fill_rect(ax, ay + CELL - 1, CELL, 1, AGENT_NOSE),
            _ => c.fill_rect(ax, ay, 1, CELL, AGENT_NOSE),
        }
        Observation::new(c.into_pixels())
    }

    fn enumerate_states(&self) -> Option<Vec<State>> {
        let mut out = Vec::new();
        for door_y in 1..GRID - 1 {
            for open in [0.0f32, 1.0] {
                for held in [0.0f32, 1.0] {
                    for key_x in 1..WALL_X {
                        let mut f = vec![0.0, 0.0, 0.0, held, open, door_y as f32, key_x as f32];
                        for (ax, ay) in Self::agent_cells(&f) {
                            // held keys track the agent column; skip inconsistent combos
                            if held > 0.5 && key_x != ax {
                                continue;
                            }
                            f[F_X] = ax as f32;
                            f[F_Y] = ay as f32;
                            if held > 0.5 {
                                f[F_KEY_X] = ax as f32;
                            }
                            for dir in 0..4 {
                                f[F_DIR] = dir as f32;
                                out.push(State(f.clone()));
                            }
                        }
                    }
                }
            }
        }
        // de-duplicate held states that coincide across ground key columns
        out.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        out.dedup();
        Some(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn base() -> Vec<f32> {
        // agent at (2,2) facing south, key on ground at (1,3), door closed at y=4
        vec![2.0, 2.0, 2.0, 0.0, 0.0, 4.0, 1.0]
    }

    #[test]
    fn noop_is_identity() {
        let env = DoorKey::new();
        let s = State(base());
        assert_eq!(env.step(&s, ActionId(0)).unwrap(), s);
    }

    #[test]
    fn pickup_requires_facing_key() {
        let env = DoorKey::new();
        // facing south from (1,2) looks at the key cell (1,3)
        let mut f = base();
        f[F_X] = 1.0;
        let s = State(f);
        let n = env.step(&s, ActionId(7)).unwrap();
        assert_eq!(n.0[F_HELD], 1.0);
        assert_eq!(n.0[F_KEY_X], 1.0);
        // from (2,2) facing south the key is not ahead
        let s = State(base());
        let n = env.step(&s, ActionId(7)).unwrap();
        assert_eq!(n.0[F_HELD], 0.0);
    }

    #[test]
    fn side_pickup_moves_key_column_to_agent() {
        let env = DoorKey::new();
        // agent at (2,3) facing west, key at (1,3)
        let s = State(vec![2.0, 3.0, 3.0, 0.0, 0.0, 4.0, 1.0]);
        let n = env.step(&s, ActionId(7)).unwrap();
        assert_eq!(n.0[F_HELD], 1.0);
        assert_eq!(n.0[F_KEY_X], 2.0);
    }

    #[test]
    fn key_blocks_until_held() {
        let env = DoorKey::new();
        // agent at (1,2) facing south: key at (1,3) blocks forward
        let mut f = base();
        f[F_X] = 1.0;
        let s = State(f);
        assert_eq!(env.step(&s, ActionId(3)).unwrap(), s);
    }

    #[test]
    fn door_opens_only_with_key_and_blocks_until_open() {
        let env = DoorKey::new();
        // agent at (3,4) facing east looks at the door at (4,4)
        let closed = State(vec![3.0, 4.0, 1.0, 0.0, 0.0, 4.0, 1.0]);
        // no key: opening fails, moving fails
        assert_eq!(env.step(&closed, ActionId(8)).unwrap(), closed);
        assert_eq!(env.step(&closed, ActionId(3)).unwrap(), closed);
        // holding the key: open succeeds, then forward passes through
        let holding = State(vec![3.0, 4.0, 1.0, 1.0, 0.0, 4.0, 3.0]);
        let opened = env.step(&holding, ActionId(8)).unwrap();
        assert_eq!(opened.0[F_OPEN], 1.0);
        let through = env.step(&opened, ActionId(3)).unwrap();
        assert_eq!(through.0[F_X], 4.0);
        let beyond = env.step(&through, ActionId(3)).unwrap();
        assert_eq!(beyond.0[F_X], 5.0);
    }

    #[test]
    fn held_key_column_tracks_agent() {
        let env = DoorKey::new();
        let s = State(vec![2.0, 2.0, 1.0, 1.0, 0.0, 4.0, 2.0]);
        let n = env.step(&s, ActionId(3)).unwrap(); // east
        assert_eq!(n.0[F_X], 3.0);
        assert_eq!(n.0[F_KEY_X], 3.0);
        // moving along y leaves key_x alone
        let s2 = State(vec![2.0, 2.0, 0.0, 1.0, 0.0, 4.0, 2.0]);
        let n2 = env.step(&s2, ActionId(3)).unwrap(); // north
        assert_eq!(n2.0[F_Y], 1.0);
        assert_eq!(n2.0[F_KEY_X], 2.0);
    }

    #[test]
    fn door_row_varies_and_is_fixed_per_episode() {
        let env = DoorKey::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut seen = std::collections::HashSet::new();
        for _ in 0..10_000 {
            let s = env.reset(&mut rng);
            seen.insert(s.0[F_DOOR_Y] as i32);
        }
        assert!(seen.len() >= 2, "door_y took {} values", seen.len());
        // identical rng state gives identical resets
        let mut r1 = ChaCha8Rng::seed_from_u64(7);
        let mut r2 = ChaCha8Rng::seed_from_u64(7);
        assert_eq!(env.reset(&mut r1), env.reset(&mut r2));
    }
}
