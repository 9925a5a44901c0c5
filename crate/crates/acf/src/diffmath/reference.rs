//! Double-precision re-execution of a recorded tape. Used as the independent
//! oracle for finite-difference gradient checks: the backward pass under test
//! never touches this path.

use super::tape::{Bcast, BinKind, Op, Tape, Var};

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

fn mm(a: &[f64], ash: (usize, usize), ta: bool, b: &[f64], bsh: (usize, usize), tb: bool) -> Vec<f64> {
    let (m, k) = if ta { (ash.1, ash.0) } else { ash };
    let n = if tb { bsh.0 } else { bsh.1 };
    let at = |i: usize, p: usize| if ta { a[p * ash.1 + i] } else { a[i * ash.1 + p] };
    let bt = |p: usize, j: usize| if tb { b[j * bsh.1 + p] } else { b[p * bsh.1 + j] };
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += at(i, p) * bt(p, j);
            }
            c[i * n + j] = s;
        }
    }
    c
}

/// Evaluate every node value in f64. `bump` optionally adds `delta` to one
/// element of one leaf node before evaluation.
pub fn eval_f64(tape: &Tape, bump: Option<(Var, usize, f64)>) -> Vec<Vec<f64>> {
    let mut vals: Vec<Vec<f64>> = Vec::with_capacity(tape.nodes.len());
    for (idx, node) in tape.nodes.iter().enumerate() {
        let shape = node.value.shape();
        let rows = node.value.rows();
        let cols = node.value.cols();
        let v: Vec<f64> = match &node.op {
            Op::Leaf { .. } => {
                let mut v: Vec<f64> = node.value.data().iter().map(|&x| x as f64).collect();
                if let Some((bv, i, d)) = bump {
                    if bv.0 == idx {
                        v[i] += d;
                    }
                }
                v
            }
            Op::StopGrad(x) | Op::Reshape(x) => vals[x.0].clone(),
            Op::Silu(x) => vals[x.0].iter().map(|&v| silu(v)).collect(),
            Op::Tanh(x) => vals[x.0].iter().map(|&v| v.tanh()).collect(),
            Op::Sigmoid(x) => vals[x.0].iter().map(|&v| sigmoid(v)).collect(),
            Op::Exp(x) => vals[x.0].iter().map(|&v| v.exp()).collect(),
            Op::Log(x) => vals[x.0].iter().map(|&v| v.ln()).collect(),
            Op::LogSigmoid(x) => vals[x.0].iter().map(|&v| log_sigmoid(v)).collect(),
            Op::Scale(x, c) => vals[x.0].iter().map(|&v| v * *c as f64).collect(),
            Op::Bin(kind, a, b, bc) => {
                let av = &vals[a.0];
                let bv = &vals[b.0];
                let f = |x: f64, y: f64| match kind {
                    BinKind::Add => x + y,
                    BinKind::Sub => x - y,
                    BinKind::Mul => x * y,
                };
                match bc {
                    Bcast::Same => av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
                    Bcast::Scalar => av.iter().map(|&x| f(x, bv[0])).collect(),
                    Bcast::Row => (0..av.len()).map(|i| f(av[i], bv[i % cols])).collect(),
                    Bcast::Col => (0..av.len()).map(|i| f(av[i], bv[i / cols])).collect(),
                }
            }
            Op::MatMul { a, ta, b, tb } => {
                let ash = (tape.nodes[a.0].value.rows(), tape.nodes[a.0].value.cols());
                let bsh = (tape.nodes[b.0].value.rows(), tape.nodes[b.0].value.cols());
                mm(&vals[a.0], ash, *ta, &vals[b.0], bsh, *tb)
            }
            Op::Sum(x) => vec![vals[x.0].iter().sum()],
            Op::Mean(x) => vec![vals[x.0].iter().sum::<f64>() / vals[x.0].len() as f64],
            Op::LogSumExpRows(x) => {
                let xc = tape.nodes[x.0].value.cols();
                let xv = &vals[x.0];
                (0..rows)
                    .map(|r| {
                        let row = &xv[r * xc..(r + 1) * xc];
                        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
                    })
                    .collect()
            }
            Op::SoftmaxRows(x) => {
                let xv = &vals[x.0];
                let mut out = Vec::with_capacity(xv.len());
                for r in 0..rows {
                    let row = &xv[r * cols..(r + 1) * cols];
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let s: f64 = row.iter().map(|&v| (v - m).exp()).sum();
                    out.extend(row.iter().map(|&v| (v - m).exp() / s));
                }
                out
            }
            Op::ConcatCols(a, b) => {
                let ac = tape.nodes[a.0].value.cols();
                let bc = tape.nodes[b.0].value.cols();
                let mut out = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    out.extend_from_slice(&vals[a.0][r * ac..(r + 1) * ac]);
                    out.extend_from_slice(&vals[b.0][r * bc..(r + 1) * bc]);
                }
                out
            }
            Op::ConcatRows(a, b) => {
                let mut out = vals[a.0].clone();
                out.extend_from_slice(&vals[b.0]);
                out
            }
            Op::SliceRows { x, start, len } => {
                let xc = tape.nodes[x.0].value.cols();
                vals[x.0][start * xc..(start + len) * xc].to_vec()
            }
            Op::TakeRows { x, idx } => {
                let xc = tape.nodes[x.0].value.cols();
                let mut out = Vec::with_capacity(idx.len() * xc);
                for &i in idx.iter() {
                    out.extend_from_slice(&vals[x.0][i * xc..(i + 1) * xc]);
                }
                out
            }
            Op::GatherCols { x, idx } => {
                let xc = tape.nodes[x.0].value.cols();
                idx.iter().enumerate().map(|(r, &c)| vals[x.0][r * xc + c]).collect()
            }
            Op::Diag(x) => {
                let xc = tape.nodes[x.0].value.cols();
                (0..rows).map(|r| vals[x.0][r * xc + r]).collect()
            }
            Op::RmsNormRows { x, gain, eps } => {
                let xv = &vals[x.0];
                let gv = &vals[gain.0];
                let mut out = Vec::with_capacity(xv.len());
                for r in 0..rows {
                    let row = &xv[r * cols..(r + 1) * cols];
                    let ms = row.iter().map(|&v| v * v).sum::<f64>() / cols as f64;
                    let inv = 1.0 / (ms + *eps as f64).sqrt();
                    for (c, &v) in row.iter().enumerate() {
                        out.push(v * inv * gv[c]);
                    }
                }
                out
            }
            Op::Conv2dNhwc { x, w, b, kh, kw, stride, pad } => {
                let xs = tape.nodes[x.0].value.shape().to_vec();
                let (bs, h, wd, c) = (xs[0], xs[1], xs[2], xs[3]);
                let out_c = tape.nodes[w.0].value.cols();
                let oh = (h + 2 * pad - kh) / stride + 1;
                let ow = (wd + 2 * pad - kw) / stride + 1;
                let xv = &vals[x.0];
                let wv = &vals[w.0];
                let mut out = vec![0.0f64; bs * oh * ow * out_c];
                for bi in 0..bs {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let orow = ((bi * oh + oy) * ow + ox) * out_c;
                            for ky in 0..*kh {
                                let sy = (oy * stride + ky) as isize - *pad as isize;
                                if sy < 0 || sy >= h as isize {
                                    continue;
                                }
                                for kx in 0..*kw {
                                    let sx = (ox * stride + kx) as isize - *pad as isize;
                                    if sx < 0 || sx >= wd as isize {
                                        continue;
                                    }
                                    let src = ((bi * h + sy as usize) * wd + sx as usize) * c;
                                    for ci in 0..c {
                                        let wrow = ((ky * kw + kx) * c + ci) * out_c;
                                        let xval = xv[src + ci];
                                        for oc in 0..out_c {
                                            out[orow + oc] += xval * wv[wrow + oc];
                                        }
                                    }
                                }
                            }
                            if let Some(bvar) = b {
                                for oc in 0..out_c {
                                    out[orow + oc] += vals[bvar.0][oc];
                                }
                            }
                        }
                    }
                }
                out
            }
            Op::PairEnergy { z, zk, w1, b1, w2, b2 } => {
                let bsz = tape.nodes[z.0].value.rows();
                let d = tape.nodes[z.0].value.cols();
                let hid = tape.nodes[w1.0].value.cols();
                let na = tape.nodes[w2.0].value.cols();
                let zv = &vals[z.0];
                let zkv = &vals[zk.0];
                let w1v = &vals[w1.0];
                let b1v = &vals[b1.0];
                let w2v = &vals[w2.0];
                let b2v = &vals[b2.0];
                let mut out = vec![0.0f64; bsz * bsz * na];
                for i in 0..bsz {
                    for j in 0..bsz {
                        for a in 0..na {
                            let mut y = b2v[a];
                            for hcol in 0..hid {
                                let mut pre = b1v[hcol] + zkv[j] * w1v[d * hid + hcol];
                                for t in 0..d {
                                    pre += zv[i * d + t] * w1v[t * hid + hcol];
                                }
                                y += silu(pre) * w2v[hcol * na + a];
                            }
                            out[(i * bsz + j) * na + a] = y;
                        }
                    }
                }
                out
            }
        };
        debug_assert_eq!(v.len(), shape.iter().product::<usize>());
        vals.push(v);
    }
    vals
}

/// Scalar value of `loss` re-evaluated in f64, optionally with one leaf
/// element bumped by `delta`.
pub fn eval_scalar_f64(tape: &Tape, loss: Var, bump: Option<(Var, usize, f64)>) -> f64 {
    let vals = eval_f64(tape, bump);
    vals[loss.0][0]
}
