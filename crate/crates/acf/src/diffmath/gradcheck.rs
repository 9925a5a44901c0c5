//! Central-difference gradient checking against the f64 reference evaluator.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::reference::eval_scalar_f64;
use super::tape::{Tape, Var};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// (node index, element index, analytic, finite difference) of the worst coordinate
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err < tol
    }
}

/// Compare analytic gradients of `loss` w.r.t. `params` against central
/// finite differences with step `h`. At most `samples` coordinates per
/// parameter are probed (all coordinates when the tensor is small enough).
pub fn check_grads(
    tape: &Tape,
    loss: Var,
    params: &[Var],
    samples: usize,
    h: f64,
    seed: u64,
) -> GradCheckReport {
    let grads = tape.backward(loss);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel = 0.0f64;
    let mut worst = None;
    let mut checked = 0usize;

    for &p in params {
        let n = tape.value(p).len();
        let mut coords: Vec<usize> = (0..n).collect();
        if n > samples {
            coords.shuffle(&mut rng);
            coords.truncate(samples);
        }
        let analytic = grads.get(p);
        for &i in &coords {
            let up = eval_scalar_f64(tape, loss, Some((p, i, h)));
            let dn = eval_scalar_f64(tape, loss, Some((p, i, -h)));
            let fd = (up - dn) / (2.0 * h);
            let an = analytic.map(|t| t.data()[i] as f64).unwrap_or(0.0);
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-2);
            if rel > max_rel {
                max_rel = rel;
                worst = Some((p.0, i, an, fd));
            }
            checked += 1;
        }
    }
    GradCheckReport { max_rel_err: max_rel, checked, worst }
}
