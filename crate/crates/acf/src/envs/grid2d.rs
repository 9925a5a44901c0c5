//! Continuous 2-D box: the agent is a light square moving in [0,1]^2.
//! Moves shift the position by a fixed step, clamped at the walls; the
//! rendering is anti-aliased so subpixel positions stay distinguishable.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::draw::{Canvas, G2_AGENT, G2_BG};
use super::{ActionId, EnvError, EnvSpec, Environment, Observation, State};

pub const STEP: f32 = 0.05;
/// Agent square side in pixels; the square's top-left travels over 32 - SIDE px.
const SIDE: f32 = 7.0;
const TRAVEL: f32 = 32.0 - SIDE;

pub struct Grid2d {
    spec: EnvSpec,
}

impl Grid2d {
    pub fn new() -> Self {
        Self {
            spec: EnvSpec {
                name: "grid2d".into(),
                n_actions: 5,
                k_gt: 2,
                factor_names: vec!["x".into(), "y".into()],
                factor_ranges: vec![(0.0, 1.0), (0.0, 1.0)],
                controllable: vec![true, true],
                latent_dim: 2,
            },
        }
    }
}

impl Default for Grid2d {
    fn default() -> Self {
        Self::new()
    }
}

impl Environment for Grid2d {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&self, rng: &mut ChaCha8Rng) -> State {
        State(vec![rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)])
    }

    fn step(&self, s: &State, a: ActionId) -> Result<State, EnvError> {
        self.check_action(a, "grid2d")?;
        let (mut x, mut y) = (s.0[0], s.0[1]);
        match a.0 {
            0 => {}
            1 => y += STEP, // up
            2 => y -= STEP, // down
            3 => x -= STEP, // left
            4 => x += STEP, // right
            _ => unreachable!(),
        }
        Ok(State(vec![x.clamp(0.0, 1.0), y.clamp(0.0, 1.0)]))
    }

    fn render(&self, s: &State) -> Observation {
        let mut c = Canvas::filled(G2_BG);
        let left = s.0[0] * TRAVEL;
        // y grows upward in state space, rows grow downward on screen
        let top = (1.0 - s.0[1]) * TRAVEL;
        c.fill_square_aa(left, top, SIDE, G2_AGENT);
        Observation::new(c.into_pixels())
    }

    fn enumerate_states(&self) -> Option<Vec<State>> {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn up_moves_by_step() {
        let env = Grid2d::new();
        let s = State(vec![0.5, 0.5]);
        let next = env.step(&s, ActionId(1)).unwrap();
        assert_eq!(next.0, vec![0.5, 0.55]);
    }

    #[test]
    fn noop_is_identity() {
        let env = Grid2d::new();
        let s = State(vec![0.31, 0.77]);
        assert_eq!(env.step(&s, ActionId(0)).unwrap(), s);
    }

    #[test]
    fn clamped_at_walls() {
        let env = Grid2d::new();
        let s = State(vec![0.0, 1.0]);
        let left = env.step(&s, ActionId(3)).unwrap();
        assert_eq!(left.0[0], 0.0);
        let up = env.step(&s, ActionId(1)).unwrap();
        assert_eq!(up.0[1], 1.0);
    }

    #[test]
    fn reset_histogram_roughly_uniform() {
        let env = Grid2d::new();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut bins = [0usize; 10];
        let n = 10_000;
        for _ in 0..n {
            let s = env.reset(&mut rng);
            bins[(s.0[0] * 10.0) as usize % 10] += 1;
        }
        for (i, &b) in bins.iter().enumerate() {
            assert!((600..=1400).contains(&b), "bin {i} has {b} of {n}");
        }
    }

    #[test]
    fn render_distinguishes_nearby_positions() {
        let env = Grid2d::new();
        let a = env.render(&State(vec![0.500, 0.5]));
        let b = env.render(&State(vec![0.505, 0.5]));
        assert_ne!(a, b);
    }
}
