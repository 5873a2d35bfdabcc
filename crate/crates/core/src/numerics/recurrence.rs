//! Linear time-invariant recurrence kernel shared by the scan API and the tape.
//!
//! ```text
//! h(l) = A·h(l−1) + B·x(l),   h(0) = 0
//! y(l) = C·h(l)
//! ```
//! With row-major row vectors this is `h = h·Aᵀ + x·Bᵀ`, `y = h·Cᵀ`.

use super::matrix::DenseMatrix;
use crate::error::{Error, Result};

/// Per-step outputs and the full state history (`L + 1` rows, row 0 is the
/// zero initial state).
#[derive(Debug, Clone)]
pub struct RecurrenceTrace {
    pub outputs: DenseMatrix,
    pub states: DenseMatrix,
}

pub(crate) fn check_shapes(
    x: &DenseMatrix,
    a: &DenseMatrix,
    b: &DenseMatrix,
    c: &DenseMatrix,
) -> Result<()> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::dim("scan A", a.shape(), (n, n)));
    }
    if b.rows() != n || b.cols() != x.cols() {
        return Err(Error::dim("scan B", b.shape(), (n, x.cols())));
    }
    if c.cols() != n {
        return Err(Error::dim("scan C", c.shape(), (c.rows(), n)));
    }
    Ok(())
}

/// Runs the recurrence over the rows of `x` (already input-projected).
pub fn run(
    x: &DenseMatrix,
    a: &DenseMatrix,
    b: &DenseMatrix,
    c: &DenseMatrix,
) -> Result<RecurrenceTrace> {
    check_shapes(x, a, b, c)?;
    let (len, width) = x.shape();
    let n = a.rows();
    let out_dim = c.rows();
    let mut states = DenseMatrix::zeros(len + 1, n);
    let mut outputs = DenseMatrix::zeros(len, out_dim);
    let (ad, bd, cd) = (a.data(), b.data(), c.data());

    for l in 0..len {
        let xl = x.row(l);
        let (prev_rows, next_rows) = states.data_mut().split_at_mut((l + 1) * n);
        let prev = &prev_rows[l * n..];
        let h = &mut next_rows[..n];
        for i in 0..n {
            let a_row = &ad[i * n..(i + 1) * n];
            let b_row = &bd[i * width..(i + 1) * width];
            let mut acc = 0.0;
            for (aij, hj) in a_row.iter().zip(prev) {
                acc += aij * hj;
            }
            for (bij, xj) in b_row.iter().zip(xl) {
                acc += bij * xj;
            }
            h[i] = acc;
        }
        let y = outputs.row_mut(l);
        for (k, yk) in y.iter_mut().enumerate() {
            let c_row = &cd[k * n..(k + 1) * n];
            *yk = c_row.iter().zip(h.iter()).map(|(ck, hk)| ck * hk).sum();
        }
    }
    Ok(RecurrenceTrace { outputs, states })
}

/// Gradients of the recurrence given upstream gradient on the outputs.
pub(crate) struct RecurrenceGrads {
    pub x: DenseMatrix,
    pub a: DenseMatrix,
    pub b: DenseMatrix,
    pub c: DenseMatrix,
}

/// Backpropagation through time.
pub(crate) fn backward(
    x: &DenseMatrix,
    a: &DenseMatrix,
    b: &DenseMatrix,
    c: &DenseMatrix,
    states: &DenseMatrix,
    grad_out: &DenseMatrix,
) -> RecurrenceGrads {
    let (len, width) = x.shape();
    let n = a.rows();
    let out_dim = c.rows();
    let mut gx = DenseMatrix::zeros(len, width);
    let mut ga = DenseMatrix::zeros(n, n);
    let mut gb = DenseMatrix::zeros(n, width);
    let mut gc = DenseMatrix::zeros(out_dim, n);
    // dL/dh(l), carried backwards
    let mut carry = vec![0.0; n];
    let mut gh = vec![0.0; n];

    for l in (0..len).rev() {
        let h = states.row(l + 1);
        let h_prev = states.row(l);
        let gy = grad_out.row(l);
        // gh = Cᵀ·gy + carry
        gh.copy_from_slice(&carry);
        for k in 0..out_dim {
            let g = gy[k];
            if g == 0.0 {
                continue;
            }
            for i in 0..n {
                gh[i] += c.get(k, i) * g;
            }
            for i in 0..n {
                gc.data_mut()[k * n + i] += g * h[i];
            }
        }
        for i in 0..n {
            let g = gh[i];
            for j in 0..n {
                ga.data_mut()[i * n + j] += g * h_prev[j];
            }
            let xl = x.row(l);
            for j in 0..width {
                gb.data_mut()[i * width + j] += g * xl[j];
            }
        }
        let gxl = gx.row_mut(l);
        for j in 0..width {
            gxl[j] = (0..n).map(|i| b.get(i, j) * gh[i]).sum();
        }
        // carry = Aᵀ·gh
        for j in 0..n {
            carry[j] = (0..n).map(|i| a.get(i, j) * gh[i]).sum();
        }
    }
    RecurrenceGrads {
        x: gx,
        a: ga,
        b: gb,
        c: gc,
    }
}
