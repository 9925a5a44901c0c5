//! 5x5 taxi world: a hollow-square taxi, one passenger drawn as a disc in
//! the color of its goal corner, and a frame border that turns striped while
//! the passenger rides in the taxi. Natural dynamics are static.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::draw::{blend, Canvas, FLOOR, GOAL_COLORS, TAXI_BORDER, TAXI_SQUARE, TAXI_STRIPE};
use super::{ActionId, EnvError, EnvSpec, Environment, Observation, State};

const GRID: i32 = 5;
const CELL: usize = 6;
/// Factor layout: [taxi_x, taxi_y, pass_x, pass_y, in_taxi, goal_id]
const F_TX: usize = 0;
const F_TY: usize = 1;
const F_PX: usize = 2;
const F_PY: usize = 3;
const F_IN: usize = 4;
const F_GOAL: usize = 5;

/// Goal corner cells, indexed by goal_id.
pub const GOALS: [(i32, i32); 4] = [(0, 0), (4, 0), (0, 4), (4, 4)];

pub struct Taxi {
    spec: EnvSpec,
}

impl Taxi {
    pub fn new() -> Self {
        Self {
            spec: EnvSpec {
                name: "taxi".into(),
                n_actions: 6,
                k_gt: 6,
                factor_names: vec![
                    "taxi_x".into(),
                    "taxi_y".into(),
                    "pass_x".into(),
                    "pass_y".into(),
                    "in_taxi".into(),
                    "goal_id".into(),
                ],
                factor_ranges: vec![
                    (0.0, 4.0),
                    (0.0, 4.0),
                    (0.0, 4.0),
                    (0.0, 4.0),
                    (0.0, 1.0),
                    (0.0, 3.0),
                ],
                controllable: vec![true, true, true, true, true, false],
                latent_dim: 6,
            },
        }
    }
}

impl Default for Taxi {
    fn default() -> Self {
        Self::new()
    }
}

impl Environment for Taxi {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&self, rng: &mut ChaCha8Rng) -> State {
        let tx = rng.gen_range(0..GRID) as f32;
        let ty = rng.gen_range(0..GRID) as f32;
        // Ride states are rare under uniform random actions; seeding some at
        // reset keeps the in_taxi factor represented in collected data.
        let in_taxi = if rng.gen_range(0.0..1.0) < 1.0 / 3.0 { 1.0 } else { 0.0 };
        let (px, py) = if in_taxi > 0.5 {
            (tx, ty)
        } else {
            (rng.gen_range(0..GRID) as f32, rng.gen_range(0..GRID) as f32)
        };
        let goal = rng.gen_range(0..4) as f32;
        State(vec![tx, ty, px, py, in_taxi, goal])
    }

    fn step(&self, s: &State, a: ActionId) -> Result<State, EnvError> {
        self.check_action(a, "taxi")?;
        let mut f = s.0.clone();
        match a.0 {
            0 => {}
            1..=4 => {
                let (dx, dy) = match a.0 {
                    1 => (0, -1), // up
                    2 => (0, 1),  // down
                    3 => (-1, 0), // left
                    _ => (1, 0),  // right
                };
                let nx = (f[F_TX] as i32 + dx).clamp(0, GRID - 1) as f32;
                let ny = (f[F_TY] as i32 + dy).clamp(0, GRID - 1) as f32;
                f[F_TX] = nx;
                f[F_TY] = ny;
                if f[F_IN] > 0.5 {
                    f[F_PX] = nx;
                    f[F_PY] = ny;
                }
            }
            5 => {
                // pickup / drop toggle
                if f[F_IN] > 0.5 {
                    f[F_IN] = 0.0;
                } else if f[F_TX] == f[F_PX] && f[F_TY] == f[F_PY] {
                    f[F_IN] = 1.0;
                }
            }
            _ => unreachable!(),
        }
        Ok(State(f))
    }

    fn render(&self, s: &State) -> Observation {
        let mut c = Canvas::filled(FLOOR);
        // border ring: striped while the passenger rides in the taxi
        let riding = s.0[F_IN] > 0.5;
        for i in 0..32usize {
            for (x, y) in [(i, 0), (i, 31), (0, i), (31, i)] {
                let color = if riding {
                    if (x + y) % 2 == 0 {
                        TAXI_STRIPE
                    } else {
                        TAXI_BORDER
                    }
                } else {
                    TAXI_BORDER
                };
                c.set(x, y, color);
            }
        }
        // static goal-corner tints
        for (gid, &(gx, gy)) in GOALS.iter().enumerate() {
            let (px, py) = cell_origin(gx, gy);
            c.fill_rect(px, py, CELL, CELL, blend(FLOOR, GOAL_COLORS[gid], 0.25));
        }
        // passenger disc in its goal color
        let goal = s.0[F_GOAL] as usize;
        let (px, py) = cell_origin(s.0[F_PX] as i32, s.0[F_PY] as i32);
        c.fill_disc(px as f32 + CELL as f32 / 2.0, py as f32 + CELL as f32 / 2.0, 2.2, GOAL_COLORS[goal]);
        // hollow taxi square on top; its open center keeps the disc visible
        let (tx, ty) = cell_origin(s.0[F_TX] as i32, s.0[F_TY] as i32);
        c.outline_rect(tx, ty, CELL, CELL, TAXI_SQUARE);
        Observation::new(c.into_pixels())
    }

    fn enumerate_states(&self) -> Option<Vec<State>> {
        let mut out = Vec::new();
        for tx in 0..GRID {
            for ty in 0..GRID {
                for goal in 0..4 {
                    out.push(State(vec![tx as f32, ty as f32, tx as f32, ty as f32, 1.0, goal as f32]));
                    for px in 0..GRID {
                        for py in 0..GRID {
                            out.push(State(vec![
                                tx as f32, ty as f32, px as f32, py as f32, 0.0, goal as f32,
                            ]));
                        }
                    }
                }
            }
        }
        Some(out)
    }
}

fn cell_origin(cx: i32, cy: i32) -> (usize, usize) {
    (1 + cx as usize * CELL, 1 + cy as usize * CELL)
}
