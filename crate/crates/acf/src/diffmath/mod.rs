//! Minimal dense-tensor core with tape-based reverse-mode differentiation,
//! an AdamW optimizer, and a binary checkpoint format. Single precision
//! throughout; the tape is rebuilt for every optimization step.

mod checkpoint;
mod optim;
mod tape;
mod tensor;

pub mod gradcheck;
pub mod reference;

pub use checkpoint::{parse_checkpoint, read_checkpoint, write_checkpoint, CheckpointError};
pub use optim::{AdamW, OptimError, ParamStore};
pub use tape::{Bcast, Gradients, Tape, Var};
pub use tensor::Tensor;

/// Orthogonal-ish initialization: rows (or columns, whichever is smaller)
/// of a Gaussian draw orthonormalized by modified Gram-Schmidt in f64.
pub fn orthogonal_init(rows: usize, cols: usize, gain: f32, rng: &mut impl rand::Rng) -> Tensor {
    use rand_distr::{Distribution, StandardNormal};
    let (r, c, transpose) = if rows >= cols { (rows, cols, false) } else { (cols, rows, true) };
    // r >= c: build c orthonormal columns in R^r, i.e. orthonormalize columns.
    let mut m = vec![0.0f64; r * c];
    for v in m.iter_mut() {
        let x: f64 = StandardNormal.sample(rng);
        *v = x;
    }
    for j in 0..c {
        for prev in 0..j {
            let mut dot = 0.0f64;
            for i in 0..r {
                dot += m[i * c + j] * m[i * c + prev];
            }
            for i in 0..r {
                m[i * c + j] -= dot * m[i * c + prev];
            }
        }
        let norm = (0..r).map(|i| m[i * c + j] * m[i * c + j]).sum::<f64>().sqrt().max(1e-12);
        for i in 0..r {
            m[i * c + j] /= norm;
        }
    }
    let mut out = vec![0.0f32; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            let v = if transpose { m[j * c + i] } else { m[i * c + j] };
            out[i * cols + j] = (gain as f64 * v) as f32;
        }
    }
    Tensor::new(vec![rows, cols], out)
}
