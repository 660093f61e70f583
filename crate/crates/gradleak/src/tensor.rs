//! Plain shaped f64 buffers plus the broadcast/contraction arithmetic the
//! tape primitives are built on. A `Tensor` detached from any tape is just
//! data and may move freely between threads.

use crate::error::{Error, Result};

/// Shaped, contiguous, row-major f64 buffer. A scalar has shape `[]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidArgument(format!(
                "shape {:?} implies {} elements, buffer has {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Scalar value; panics if the tensor is not single-element.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Numpy-style trailing broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = dim_from_end(a, rank - 1 - i);
        let db = dim_from_end(b, rank - 1 - i);
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return None;
        };
    }
    Some(out)
}

// Dimension at aligned position i (0 = leftmost of the padded shape),
// with missing leading dims treated as 1.
fn dim_from_end(shape: &[usize], from_end: usize) -> usize {
    if from_end < shape.len() {
        shape[shape.len() - 1 - from_end]
    } else {
        1
    }
}

fn broadcast_strides(shape: &[usize], out_rank: usize) -> Vec<usize> {
    // Row-major strides, zeroed where the dim broadcasts.
    let mut strides = vec![0usize; out_rank];
    let mut acc = 1usize;
    for i in 0..shape.len() {
        let d = shape[shape.len() - 1 - i];
        strides[out_rank - 1 - i] = if d == 1 { 0 } else { acc };
        acc *= d;
    }
    strides
}

/// Elementwise binary op with broadcasting.
pub fn broadcast_apply(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape == b.shape {
        let data = a
            .data
            .iter()
            .zip(&b.data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        return Ok(Tensor {
            shape: a.shape.clone(),
            data,
        });
    }
    let shape = broadcast_shape(&a.shape, &b.shape).ok_or(Error::ShapeMismatch {
        op,
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
    })?;
    let rank = shape.len();
    // Scalar fast paths.
    if a.data.len() == 1 {
        let x = a.data[0];
        return Ok(Tensor {
            shape,
            data: b.data.iter().map(|&y| f(x, y)).collect(),
        });
    }
    if b.data.len() == 1 {
        let y = b.data[0];
        return Ok(Tensor {
            shape,
            data: a.data.iter().map(|&x| f(x, y)).collect(),
        });
    }
    let sa = broadcast_strides(&a.shape, rank);
    let sb = broadcast_strides(&b.shape, rank);
    let numel: usize = shape.iter().product();
    let mut data = vec![0.0; numel];
    let mut coords = vec![0usize; rank];
    let mut ia = 0usize;
    let mut ib = 0usize;
    for slot in data.iter_mut() {
        *slot = f(a.data[ia], b.data[ib]);
        // Odometer increment.
        for axis in (0..rank).rev() {
            coords[axis] += 1;
            ia += sa[axis];
            ib += sb[axis];
            if coords[axis] < shape[axis] {
                break;
            }
            coords[axis] = 0;
            ia -= sa[axis] * shape[axis];
            ib -= sb[axis] * shape[axis];
        }
    }
    Ok(Tensor { shape, data })
}

/// Sum a tensor down to a broadcast-compatible target shape (the adjoint of
/// broadcasting). `target` must be expandable to `t.shape()`.
pub fn sum_to(t: &Tensor, target: &[usize]) -> Result<Tensor> {
    if t.shape() == target {
        return Ok(t.clone());
    }
    let ok = broadcast_shape(target, t.shape()).map(|s| s == t.shape) == Some(true);
    if !ok {
        return Err(Error::ShapeMismatch {
            op: "sum_to",
            lhs: t.shape.clone(),
            rhs: target.to_vec(),
        });
    }
    let rank = t.shape.len();
    let st = broadcast_strides(target, rank);
    let mut out = Tensor::zeros(target);
    let mut coords = vec![0usize; rank];
    let mut it = 0usize;
    for &v in &t.data {
        out.data[it] += v;
        for axis in (0..rank).rev() {
            coords[axis] += 1;
            it += st[axis];
            if coords[axis] < t.shape[axis] {
                break;
            }
            coords[axis] = 0;
            it -= st[axis] * t.shape[axis];
        }
    }
    Ok(out)
}

/// 2-D matrix product with optional transposes: `op(a) @ op(b)`.
pub fn matmul(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Result<Tensor> {
    let err = || Error::ShapeMismatch {
        op: "matmul",
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
    };
    if a.shape.len() != 2 || b.shape.len() != 2 {
        return Err(err());
    }
    let (m, ka) = if ta {
        (a.shape[1], a.shape[0])
    } else {
        (a.shape[0], a.shape[1])
    };
    let (kb, n) = if tb {
        (b.shape[1], b.shape[0])
    } else {
        (b.shape[0], b.shape[1])
    };
    if ka != kb {
        return Err(err());
    }
    let k = ka;
    let lhs = materialize(a, ta);
    let rhs = materialize(b, tb);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row_out = &mut out[i * n..(i + 1) * n];
        for l in 0..k {
            let av = lhs[i * k + l];
            if av == 0.0 {
                continue;
            }
            let row_b = &rhs[l * n..(l + 1) * n];
            for (o, &bv) in row_out.iter_mut().zip(row_b) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

fn materialize(t: &Tensor, transpose: bool) -> Vec<f64> {
    if !transpose {
        return t.data.clone();
    }
    let (r, c) = (t.shape[0], t.shape[1]);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = t.data[i * c + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_bias_over_feature_map() {
        let x = Tensor::zeros(&[1, 2, 3, 3]);
        let b = Tensor::new(vec![2, 1, 1], vec![1.0, 2.0]).unwrap();
        let y = broadcast_apply("add", &x, &b, |a, b| a + b).unwrap();
        assert_eq!(y.shape(), &[1, 2, 3, 3]);
        assert_eq!(y.data()[0], 1.0);
        assert_eq!(y.data()[9], 2.0);
    }

    #[test]
    fn sum_to_inverts_broadcast() {
        let t = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let s = sum_to(&t, &[3]).unwrap();
        assert_eq!(s.data(), &[5.0, 7.0, 9.0]);
        let s2 = sum_to(&t, &[2, 1]).unwrap();
        assert_eq!(s2.data(), &[6.0, 15.0]);
        let s3 = sum_to(&t, &[]).unwrap();
        assert_eq!(s3.item(), 21.0);
    }

    #[test]
    fn sum_to_rejects_incompatible_target() {
        let t = Tensor::zeros(&[2, 3]);
        assert!(sum_to(&t, &[4]).is_err());
    }

    #[test]
    fn matmul_identity_and_transpose() {
        let eye = Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let a = Tensor::new(vec![3, 2], (0..6).map(|v| v as f64).collect()).unwrap();
        let r = matmul(&eye, &a, false, false).unwrap();
        assert_eq!(r.data(), a.data());
        // (A^T A) symmetric check
        let ata = matmul(&a, &a, true, false).unwrap();
        assert_eq!(ata.shape(), &[2, 2]);
        assert_eq!(ata.data()[1], ata.data()[2]);
    }

    #[test]
    fn matmul_inner_dim_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 2]);
        assert!(matmul(&a, &b, false, false).is_err());
    }
}
