//! Finite-difference gradient checks for every tape operation, against the
//! f64 reference evaluator. Central differences, step 1e-3; relative error
//! below 1e-4 per op and 1e-3 for deeper compositions.

use acf::diffmath::{gradcheck::check_grads, orthogonal_init, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-3;
const OP_TOL: f64 = 1e-4;
const DEEP_TOL: f64 = 1e-3;

fn randt(shape: Vec<usize>, rng: &mut ChaCha8Rng, lo: f32, hi: f32) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect())
}

/// Reduce to a scalar through fixed random weights so every coordinate of the
/// op output carries a nondegenerate gradient.
fn weighted_loss(tape: &mut Tape, y: Var, rng: &mut ChaCha8Rng) -> Var {
    let shape = tape.value(y).shape().to_vec();
    let w = tape.constant(randt(shape, rng, -1.0, 1.0));
    let prod = tape.mul(y, w);
    tape.sum(prod)
}

fn assert_op_grad(name: &str, build: impl FnOnce(&mut Tape, &mut ChaCha8Rng) -> (Var, Vec<Var>)) {
    let mut rng = ChaCha8Rng::seed_from_u64(0xACF0);
    let mut tape = Tape::new();
    let (y, params) = build(&mut tape, &mut rng);
    let loss = weighted_loss(&mut tape, y, &mut rng);
    let report = check_grads(&tape, loss, &params, 24, H, 99);
    assert!(
        report.passes(OP_TOL),
        "{name}: max rel err {:.3e} over {} coords, worst {:?}",
        report.max_rel_err,
        report.checked,
        report.worst
    );
}

#[test]
fn grad_silu() {
    assert_op_grad("silu", |t, rng| {
        let p = t.param("p", randt(vec![3, 5], rng, -2.0, 2.0));
        (t.silu(p), vec![p])
    });
}

#[test]
fn grad_tanh() {
    assert_op_grad("tanh", |t, rng| {
        let p = t.param("p", randt(vec![3, 5], rng, -2.0, 2.0));
        (t.tanh(p), vec![p])
    });
}

#[test]
fn grad_sigmoid() {
    assert_op_grad("sigmoid", |t, rng| {
        let p = t.param("p", randt(vec![3, 5], rng, -2.0, 2.0));
        (t.sigmoid(p), vec![p])
    });
}

#[test]
fn grad_exp() {
    assert_op_grad("exp", |t, rng| {
        let p = t.param("p", randt(vec![3, 5], rng, -1.0, 1.0));
        (t.exp(p), vec![p])
    });
}

#[test]
fn grad_log() {
    assert_op_grad("log", |t, rng| {
        let p = t.param("p", randt(vec![3, 5], rng, 0.5, 3.0));
        (t.log(p), vec![p])
    });
}

#[test]
fn grad_log_sigmoid() {
    assert_op_grad("log_sigmoid", |t, rng| {
        let p = t.param("p", randt(vec![3, 5], rng, -3.0, 3.0));
        (t.log_sigmoid(p), vec![p])
    });
}

#[test]
fn grad_scale() {
    assert_op_grad("scale", |t, rng| {
        let p = t.param("p", randt(vec![4], rng, -2.0, 2.0));
        (t.scale(p, -1.7), vec![p])
    });
}

#[test]
fn grad_binary_same_row_col_scalar() {
    for kind in ["add", "sub", "mul"] {
        for bc in ["same", "row", "col", "scalar"] {
            assert_op_grad(&format!("{kind}/{bc}"), |t, rng| {
                let a = t.param("a", randt(vec![3, 4], rng, -2.0, 2.0));
                let bshape = match bc {
                    "same" => vec![3, 4],
                    "row" => vec![4],
                    "col" => vec![3, 1],
                    _ => vec![1],
                };
                let b = t.param("b", randt(bshape, rng, -2.0, 2.0));
                let y = match kind {
                    "add" => t.add(a, b),
                    "sub" => t.sub(a, b),
                    _ => t.mul(a, b),
                };
                (y, vec![a, b])
            });
        }
    }
}

#[test]
fn grad_matmul_all_transpose_flags() {
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        assert_op_grad(&format!("matmul ta={ta} tb={tb}"), |t, rng| {
            let ashape = if ta { vec![4, 3] } else { vec![3, 4] };
            let bshape = if tb { vec![5, 4] } else { vec![4, 5] };
            let a = t.param("a", randt(ashape, rng, -1.0, 1.0));
            let b = t.param("b", randt(bshape, rng, -1.0, 1.0));
            (t.matmul_t(a, ta, b, tb), vec![a, b])
        });
    }
}

#[test]
fn grad_sum_mean() {
    assert_op_grad("sum", |t, rng| {
        let p = t.param("p", randt(vec![3, 4], rng, -2.0, 2.0));
        let s = t.sum(p);
        (s, vec![p])
    });
    assert_op_grad("mean", |t, rng| {
        let p = t.param("p", randt(vec![3, 4], rng, -2.0, 2.0));
        let s = t.mean(p);
        (s, vec![p])
    });
}

#[test]
fn grad_logsumexp_rows() {
    assert_op_grad("logsumexp_rows", |t, rng| {
        let p = t.param("p", randt(vec![4, 6], rng, -2.0, 2.0));
        (t.logsumexp_rows(p), vec![p])
    });
}

#[test]
fn grad_softmax_rows() {
    assert_op_grad("softmax_rows", |t, rng| {
        let p = t.param("p", randt(vec![4, 6], rng, -2.0, 2.0));
        (t.softmax_rows(p), vec![p])
    });
}

#[test]
fn grad_concat() {
    assert_op_grad("concat_cols", |t, rng| {
        let a = t.param("a", randt(vec![3, 2], rng, -1.0, 1.0));
        let b = t.param("b", randt(vec![3, 4], rng, -1.0, 1.0));
        (t.concat_cols(a, b), vec![a, b])
    });
    assert_op_grad("concat_rows", |t, rng| {
        let a = t.param("a", randt(vec![2, 3], rng, -1.0, 1.0));
        let b = t.param("b", randt(vec![4, 3], rng, -1.0, 1.0));
        (t.concat_rows(a, b), vec![a, b])
    });
}

#[test]
fn grad_slice_take_gather_diag() {
    assert_op_grad("slice_rows", |t, rng| {
        let p = t.param("p", randt(vec![6, 3], rng, -1.0, 1.0));
        (t.slice_rows(p, 1, 3), vec![p])
    });
    assert_op_grad("take_rows", |t, rng| {
        let p = t.param("p", randt(vec![5, 3], rng, -1.0, 1.0));
        (t.take_rows(p, &[4, 0, 0, 2]), vec![p])
    });
    assert_op_grad("gather_cols", |t, rng| {
        let p = t.param("p", randt(vec![4, 5], rng, -1.0, 1.0));
        (t.gather_cols(p, &[1, 0, 4, 2]), vec![p])
    });
    assert_op_grad("diag", |t, rng| {
        let p = t.param("p", randt(vec![4, 4], rng, -1.0, 1.0));
        (t.diag(p), vec![p])
    });
}

#[test]
fn grad_reshape() {
    assert_op_grad("reshape", |t, rng| {
        let p = t.param("p", randt(vec![3, 4], rng, -1.0, 1.0));
        let r = t.reshape(p, vec![2, 6]);
        (t.silu(r), vec![p])
    });
}

#[test]
fn grad_rms_norm() {
    assert_op_grad("rms_norm_rows", |t, rng| {
        let x = t.param("x", randt(vec![4, 8], rng, -2.0, 2.0));
        let g = t.param("g", randt(vec![8], rng, 0.5, 1.5));
        (t.rms_norm_rows(x, g, 1e-6), vec![x, g])
    });
}

#[test]
fn grad_conv2d_3x3_stride2() {
    assert_op_grad("conv3x3s2", |t, rng| {
        let x = t.param("x", randt(vec![2, 6, 6, 3], rng, -1.0, 1.0));
        let w = t.param("w", randt(vec![9 * 3, 4], rng, -0.5, 0.5));
        let b = t.param("b", randt(vec![4], rng, -0.5, 0.5));
        (t.conv2d_nhwc(x, w, Some(b), 3, 3, 2, 1), vec![x, w, b])
    });
}

#[test]
fn grad_conv2d_1x1() {
    assert_op_grad("conv1x1", |t, rng| {
        let x = t.param("x", randt(vec![2, 4, 4, 5], rng, -1.0, 1.0));
        let w = t.param("w", randt(vec![5, 3], rng, -0.5, 0.5));
        (t.conv2d_nhwc(x, w, None, 1, 1, 1, 0), vec![x, w])
    });
}

#[test]
fn grad_pair_energy() {
    assert_op_grad("pair_energy", |t, rng| {
        let b = 4;
        let d = 3;
        let hid = 8;
        let na = 5;
        let z = t.param("z", randt(vec![b, d], rng, -1.0, 1.0));
        let zk = t.param("zk", randt(vec![b, 1], rng, -1.0, 1.0));
        let w1 = t.param("w1", randt(vec![d + 1, hid], rng, -0.7, 0.7));
        let b1 = t.param("b1", randt(vec![hid], rng, -0.3, 0.3));
        let w2 = t.param("w2", randt(vec![hid, na], rng, -0.7, 0.7));
        let b2 = t.param("b2", randt(vec![na], rng, -0.3, 0.3));
        (t.pair_energy(z, zk, w1, b1, w2, b2), vec![z, zk, w1, b1, w2, b2])
    });
}

/// The stated oracle for backward(): a random two-layer SiLU net whose
/// gradient must match central differences at rel. err < 1e-4.
#[test]
fn grad_two_layer_silu_net() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut tape = Tape::new();
    let x = tape.constant(randt(vec![4, 6], &mut rng, -1.0, 1.0));
    let w1 = tape.param("w1", orthogonal_init(6, 8, 1.0, &mut rng));
    let b1 = tape.param("b1", randt(vec![8], &mut rng, -0.2, 0.2));
    let w2 = tape.param("w2", orthogonal_init(8, 3, 1.0, &mut rng));
    let b2 = tape.param("b2", randt(vec![3], &mut rng, -0.2, 0.2));
    let h0 = tape.matmul(x, w1);
    let h1 = tape.add(h0, b1);
    let h2 = tape.silu(h1);
    let y0 = tape.matmul(h2, w2);
    let y = tape.add(y0, b2);
    let loss = weighted_loss(&mut tape, y, &mut rng);
    let report = check_grads(&tape, loss, &[w1, b1, w2, b2], 32, H, 5);
    assert!(
        report.passes(OP_TOL),
        "2-layer net: max rel err {:.3e}, worst {:?}",
        report.max_rel_err,
        report.worst
    );
}

/// Composition at least three ops deep keeps rel. err below 1e-3.
#[test]
fn grad_deep_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut tape = Tape::new();
    let x = tape.constant(randt(vec![5, 4], &mut rng, -1.0, 1.0));
    let w1 = tape.param("w1", randt(vec![4, 6], &mut rng, -0.6, 0.6));
    let g = tape.param("g", randt(vec![6], &mut rng, 0.8, 1.2));
    let w2 = tape.param("w2", randt(vec![6, 6], &mut rng, -0.6, 0.6));
    let h0 = tape.matmul(x, w1);
    let h1 = tape.rms_norm_rows(h0, g, 1e-6);
    let h2 = tape.silu(h1);
    let h3 = tape.matmul(h2, w2);
    let h4 = tape.tanh(h3);
    let lse = tape.logsumexp_rows(h4);
    let shifted = tape.sub(h4, lse);
    let picked = tape.gather_cols(shifted, &[0, 3, 1, 5, 2]);
    let loss0 = tape.mean(picked);
    let loss = tape.scale(loss0, -1.0);
    let report = check_grads(&tape, loss, &[w1, g, w2], 24, H, 6);
    assert!(
        report.passes(DEEP_TOL),
        "deep composition: max rel err {:.3e}, worst {:?}",
        report.max_rel_err,
        report.worst
    );
}

/// stop_grad contributes exactly zero gradient through its edge.
#[test]
fn stop_grad_cuts_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut tape = Tape::new();
    let p = tape.param("p", randt(vec![3, 3], &mut rng, -1.0, 1.0));
    let q = tape.param("q", randt(vec![3, 3], &mut rng, -1.0, 1.0));
    let frozen = tape.stop_grad(p);
    let mixed = tape.mul(frozen, q);
    let loss = tape.sum(mixed);
    let grads = tape.backward(loss);
    assert!(grads.get(p).is_none(), "p must receive no gradient through stop_grad");
    let gq = grads.get(q).unwrap();
    for (gv, pv) in gq.data().iter().zip(tape.value(p).data()) {
        assert_eq!(gv, pv);
    }
}
