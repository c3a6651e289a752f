//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Everything runs on a [`Tape`]: forward ops record their parents in
//! creation order, `backward` replays the recording in reverse exactly once.
//! All storage is row-major `Vec<f64>`; 64-bit floats keep finite-difference
//! verification meaningful at desk scale.

mod grad_check;
mod tape;

pub use grad_check::{grad_check, GradCheckReport, ParamSpec, REL_ERR_FLOOR};
pub use tape::{Tape, TensorId};

/// A recorded value on the tape.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

pub(crate) fn check_shape_data(shape: &[usize], len: usize) -> crate::Result<()> {
    let numel: usize = shape.iter().product();
    if numel != len {
        return Err(crate::Error::Dimension {
            op: "tensor",
            lhs: shape.to_vec(),
            rhs: vec![len],
        });
    }
    Ok(())
}

/// Raw matrix product C += A[m,k] * B[k,n], row-major.
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let o_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// C += A[m,n] * B[k,n]^T, i.e. C[i][p] += dot(A row i, B row p).
pub(crate) fn matmul_nt_acc(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        let o_row = &mut out[i * k..(i + 1) * k];
        for (p, o) in o_row.iter_mut().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            *o += acc;
        }
    }
}

/// C += A[m,k]^T * B[m,n], producing [k,n].
pub(crate) fn matmul_tn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let o_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}
