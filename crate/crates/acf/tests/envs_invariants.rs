//! Cross-domain environment invariants: no-op neutrality, sparse action
//! effects matching the declared controllable set, boundary safety,
//! renderer injectivity, and byte-compared golden renders.
//!
//! Regenerate the golden fixtures with `ACF_BLESS=1 cargo test -p acf
//! --test envs_invariants`.

use std::collections::HashMap;
use std::path::PathBuf;

use acf::envs::{draw, make_env, ActionId, Environment, State, ENV_NAMES, NO_OP, OBS_SIZE};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn changed_factors(env: &dyn Environment, a: &State, b: &State) -> Vec<usize> {
    let ga = env.ground_truth(a);
    let gb = env.ground_truth(b);
    (0..ga.len()).filter(|&i| ga[i] != gb[i]).collect()
}

fn sample_states(env: &dyn Environment, n: usize, seed: u64) -> Vec<State> {
    match env.enumerate_states() {
        Some(all) => all,
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..n).map(|_| env.reset(&mut rng)).collect()
        }
    }
}

#[test]
fn noop_is_neutral_everywhere() {
    for name in ENV_NAMES {
        let env = make_env(name).unwrap();
        for s in sample_states(env.as_ref(), 500, 1) {
            let n = env.step(&s, NO_OP).unwrap();
            assert_eq!(n, s, "{name}: no-op changed state {:?}", s);
        }
    }
}

#[test]
fn effects_are_sparse_and_match_declared_controllability() {
    for name in ENV_NAMES {
        let env = make_env(name).unwrap();
        let spec = env.spec();
        let states = sample_states(env.as_ref(), 300, 2);
        for s in &states {
            let natural = env.step(s, NO_OP).unwrap();
            for a in 1..spec.n_actions {
                let next = env.step(s, ActionId(a as u8)).unwrap();
                let changed = changed_factors(env.as_ref(), &natural, &next);
                assert!(
                    changed.len() <= 2,
                    "{name}: action {a} changed {} factors at {:?}",
                    changed.len(),
                    s
                );
                for &f in &changed {
                    assert!(
                        spec.controllable[f],
                        "{name}: action {a} changed non-controllable factor {} ({})",
                        f, spec.factor_names[f]
                    );
                }
            }
        }
    }
}

#[test]
fn oriented_moves_change_one_coordinate_rotations_none() {
    for name in ["fourrooms", "doorkey"] {
        let env = make_env(name).unwrap();
        for s in sample_states(env.as_ref(), 0, 3) {
            // rotations: only the direction factor
            for a in [1u8, 2] {
                let n = env.step(&s, ActionId(a)).unwrap();
                let changed = changed_factors(env.as_ref(), &s, &n);
                assert_eq!(changed, vec![2], "{name}: rotation changed {changed:?}");
            }
            // moves: at most one of x, y (plus a tracked key column in doorkey)
            for a in [3u8, 4, 5, 6] {
                let n = env.step(&s, ActionId(a)).unwrap();
                let changed = changed_factors(env.as_ref(), &s, &n);
                let pos_changed: Vec<usize> =
                    changed.iter().copied().filter(|&f| f == 0 || f == 1).collect();
                assert!(
                    pos_changed.len() <= 1,
                    "{name}: move {a} changed both coordinates: {changed:?}"
                );
                for &f in &changed {
                    assert!(f == 0 || f == 1 || (name == "doorkey" && f == 6), "{name}: move {a} changed factor {f}");
                }
            }
        }
    }
}

#[test]
fn positions_never_leave_bounds() {
    for name in ENV_NAMES {
        let env = make_env(name).unwrap();
        let spec = env.spec().clone();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut s = env.reset(&mut rng);
        let mut arng = ChaCha8Rng::seed_from_u64(5);
        for t in 0..2000 {
            use rand::Rng;
            let a = ActionId(arng.gen_range(0..spec.n_actions) as u8);
            s = env.step(&s, a).unwrap();
            let gt = env.ground_truth(&s);
            for (i, &v) in gt.iter().enumerate() {
                let (lo, hi) = spec.factor_ranges[i];
                assert!(
                    v >= lo && v <= hi,
                    "{name}: factor {} = {v} outside [{lo}, {hi}] after step {t}",
                    spec.factor_names[i]
                );
            }
            if t % 64 == 0 {
                s = env.reset(&mut rng);
            }
        }
    }
}

#[test]
fn renderer_injective_discrete_domains() {
    for name in ["taxi", "fourrooms", "doorkey"] {
        let env = make_env(name).unwrap();
        let states = env.enumerate_states().unwrap();
        let mut seen: HashMap<Vec<u8>, State> = HashMap::with_capacity(states.len());
        for s in states {
            let img = env.render(&s).0;
            if let Some(prev) = seen.insert(img, s.clone()) {
                panic!("{name}: states {:?} and {:?} render identically", prev, s);
            }
        }
    }
}

#[test]
fn renderer_injective_grid2d_dense_sampling() {
    let env = make_env("grid2d").unwrap();
    let mut seen: HashMap<Vec<u8>, State> = HashMap::new();
    let n = 140;
    for i in 0..n {
        for j in 0..n {
            let s = State(vec![i as f32 / n as f32, j as f32 / n as f32]);
            let img = env.render(&s).0;
            if let Some(prev) = seen.insert(img, s.clone()) {
                panic!("grid2d: states {:?} and {:?} render identically", prev, s);
            }
        }
    }
}

#[test]
fn taxi_riding_states_render_distinct_images() {
    // in_taxi toggling with identical positions must still be visible
    let env = make_env("taxi").unwrap();
    let a = env.render(&State(vec![3.0, 1.0, 3.0, 1.0, 0.0, 2.0]));
    let b = env.render(&State(vec![3.0, 1.0, 3.0, 1.0, 1.0, 2.0]));
    assert_ne!(a, b);
}

// ── golden renders ───────────────────────────────────────────────────

fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn canonical_states() -> Vec<(&'static str, &'static str, State)> {
    vec![
        ("grid2d", "center", State(vec![0.5, 0.5])),
        ("grid2d", "offgrid_subpixel", State(vec![0.53, 0.21])),
        ("taxi", "free", State(vec![2.0, 1.0, 0.0, 4.0, 0.0, 1.0])),
        ("taxi", "riding", State(vec![3.0, 3.0, 3.0, 3.0, 1.0, 2.0])),
        ("fourrooms", "east_door", State(vec![4.0, 8.0, 1.0])),
        ("fourrooms", "north_room", State(vec![2.0, 2.0, 0.0])),
        ("doorkey", "start", State(vec![2.0, 2.0, 2.0, 0.0, 0.0, 4.0, 1.0])),
        ("doorkey", "holding_open", State(vec![5.0, 4.0, 1.0, 1.0, 1.0, 4.0, 5.0])),
    ]
}

#[test]
fn golden_renders_match_fixtures() {
    let bless = std::env::var("ACF_BLESS").is_ok();
    let dir = fixture_dir();
    if bless {
        std::fs::create_dir_all(&dir).unwrap();
    }
    for (envname, tag, state) in canonical_states() {
        let env = make_env(envname).unwrap();
        let img = env.render(&state);
        let path = dir.join(format!("{envname}_{tag}.ppm"));
        if bless {
            draw::write_ppm(&path, OBS_SIZE, OBS_SIZE, img.pixels()).unwrap();
            continue;
        }
        let (w, h, bytes) = draw::read_ppm(&path)
            .unwrap_or_else(|e| panic!("missing fixture {path:?} ({e}); run with ACF_BLESS=1"));
        assert_eq!((w, h), (OBS_SIZE, OBS_SIZE));
        assert_eq!(bytes, img.pixels(), "{envname}/{tag} render drifted from fixture");
    }
}
