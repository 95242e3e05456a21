//! Dense f64 tensors in row-major order.
//!
//! Values are validated to be finite on construction; the tape re-checks
//! after every committed operation, so a NaN or an overflow surfaces as an
//! error at the op that produced it instead of propagating silently.

use crate::error::{CoreError, Result};

/// Row-major n-dimensional array of f64 with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(CoreError::DimensionMismatch {
                op: "Tensor::new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(CoreError::NonFinite { op: "Tensor::new" });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(vec![1], vec![v]).expect("finite scalar")
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Zeroes the gradient buffer, allocating it if absent.
    pub fn zero_grad(&mut self) {
        match &mut self.grad {
            Some(g) => g.iter_mut().for_each(|v| *v = 0.0),
            None => self.grad = Some(vec![0.0; self.data.len()]),
        }
    }

    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        debug_assert_eq!(delta.len(), self.data.len());
        match &mut self.grad {
            Some(g) => g.iter_mut().zip(delta).for_each(|(a, b)| *a += b),
            None => self.grad = Some(delta.to_vec()),
        }
    }
}

/// Broadcast two shapes by trailing-axis alignment: axes are matched from
/// the right, and each pair must be equal or contain a 1.
pub fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let ndim = a.len().max(b.len());
    let mut out = vec![0usize; ndim];
    for i in 0..ndim {
        let da = if i < ndim - a.len() { 1 } else { a[i - (ndim - a.len())] };
        let db = if i < ndim - b.len() { 1 } else { b[i - (ndim - b.len())] };
        if da == db || da == 1 || db == 1 {
            out[i] = da.max(db);
        } else {
            return Err(CoreError::DimensionMismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        }
    }
    Ok(out)
}

/// Row-major strides for a shape, with stride 0 on axes of extent 1 so a
/// broadcast tensor can be indexed with the output's coordinates directly.
pub fn broadcast_strides(shape: &[usize], out_ndim: usize) -> Vec<usize> {
    let mut strides = vec![0usize; out_ndim];
    let offset = out_ndim - shape.len();
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        strides[offset + i] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Reduce `grad` (laid out as `from_shape`) back onto `to_shape` by summing
/// over the broadcast axes. Inverse of broadcasting in the backward pass.
pub fn reduce_to_shape(grad: &[f64], from_shape: &[usize], to_shape: &[usize]) -> Vec<f64> {
    let to_numel: usize = to_shape.iter().product();
    if from_shape == to_shape {
        return grad.to_vec();
    }
    let ndim = from_shape.len();
    let strides = broadcast_strides(to_shape, ndim);
    let mut out = vec![0.0; to_numel];
    let mut coords = vec![0usize; ndim];
    for &g in grad {
        let mut idx = 0usize;
        for d in 0..ndim {
            idx += coords[d] * strides[d];
        }
        out[idx] += g;
        // advance row-major coordinates
        for d in (0..ndim).rev() {
            coords[d] += 1;
            if coords[d] < from_shape[d] {
                break;
            }
            coords[d] = 0;
        }
    }
    out
}
