//! Dense row-major f64 tensors.
//!
//! `NdTensor` is a small value type: a shape, a reference-counted data
//! buffer, and an optional link to a node on a gradient tape. Cloning is
//! cheap (the buffer is shared); mutation goes through [`NdTensor::data_mut`]
//! which copies on write and severs any tape link, since editing a buffer in
//! place invalidates whatever graph recorded it.
//!
//! Pure (tape-free) arithmetic lives here; differentiable ops are recorded
//! through `GradTape` in the sibling module.

use std::rc::Rc;

use crate::error::{Result, SanmError};

/// Link from a tensor to the tape node that produced it.
///
/// `tape` is the unique tag of the owning [`super::tape::GradTape`]; `node`
/// is the index into that tape's node list. Mixing tensors across tapes is
/// detected through the tag and reported as an error.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GradRef {
    pub(crate) tape: u64,
    pub(crate) node: usize,
}

/// Dense row-major tensor of `f64` values.
#[derive(Clone, Debug)]
pub struct NdTensor {
    shape: Vec<usize>,
    data: Rc<Vec<f64>>,
    pub(crate) grad_node: Option<GradRef>,
}

fn shape_numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl NdTensor {
    /// Tensor of zeros.
    pub fn zeros(shape: &[usize]) -> Self {
        NdTensor::full(shape, 0.0)
    }

    /// Tensor filled with a constant.
    pub fn full(shape: &[usize], value: f64) -> Self {
        NdTensor {
            shape: shape.to_vec(),
            data: Rc::new(vec![value; shape_numel(shape)]),
            grad_node: None,
        }
    }

    /// Single-element tensor of shape `[1]`.
    pub fn scalar(value: f64) -> Self {
        NdTensor {
            shape: vec![1],
            data: Rc::new(vec![value]),
            grad_node: None,
        }
    }

    /// Build from an explicit buffer; the buffer length must match the shape.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape_numel(shape) != data.len() {
            return Err(SanmError::Shape(format!(
                "buffer of {} values does not fill shape {:?} ({} elements)",
                data.len(),
                shape,
                shape_numel(shape)
            )));
        }
        Ok(NdTensor {
            shape: shape.to_vec(),
            data: Rc::new(data),
            grad_node: None,
        })
    }

    /// Build by evaluating `f` at each flat (row-major) index.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = shape_numel(shape);
        NdTensor {
            shape: shape.to_vec(),
            data: Rc::new((0..n).map(&mut f).collect()),
            grad_node: None,
        }
    }

    /// Shape as a slice.
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// Total number of elements.
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Read-only view of the underlying buffer (row-major).
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable view of the buffer. Copies on write if shared and severs any
    /// tape link — a mutated tensor no longer matches what the tape recorded.
    pub fn data_mut(&mut self) -> &mut [f64] {
        self.grad_node = None;
        Rc::make_mut(&mut self.data).as_mut_slice()
    }

    /// Whether this tensor is linked to a gradient-tape node.
    pub fn is_tracked(&self) -> bool {
        self.grad_node.is_some()
    }

    /// Copy of this tensor with any tape link removed.
    pub fn detach(&self) -> NdTensor {
        NdTensor {
            shape: self.shape.clone(),
            data: Rc::clone(&self.data),
            grad_node: None,
        }
    }

    /// Value of a single-element tensor.
    pub fn scalar_value(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(SanmError::Shape(format!(
                "expected a single-element tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub(crate) fn tracked(shape: Vec<usize>, data: Rc<Vec<f64>>, node: GradRef) -> Self {
        debug_assert_eq!(shape_numel(&shape), data.len());
        NdTensor {
            shape,
            data,
            grad_node: Some(node),
        }
    }

    pub(crate) fn data_rc(&self) -> &Rc<Vec<f64>> {
        &self.data
    }

    /// Apply `f` elementwise (pure; result is untracked).
    pub fn map(&self, f: impl Fn(f64) -> f64) -> NdTensor {
        NdTensor {
            shape: self.shape.clone(),
            data: Rc::new(self.data.iter().map(|&v| f(v)).collect()),
            grad_node: None,
        }
    }

    /// Combine two same-shaped tensors elementwise (pure).
    pub fn zip_map(&self, other: &NdTensor, f: impl Fn(f64, f64) -> f64) -> Result<NdTensor> {
        if self.shape != other.shape {
            return Err(SanmError::Shape(format!(
                "elementwise op on mismatched shapes {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(NdTensor {
            shape: self.shape.clone(),
            data: Rc::new(
                self.data
                    .iter()
                    .zip(other.data.iter())
                    .map(|(&a, &b)| f(a, b))
                    .collect(),
            ),
            grad_node: None,
        })
    }

    /// Elementwise sum (pure).
    pub fn add(&self, other: &NdTensor) -> Result<NdTensor> {
        self.zip_map(other, |a, b| a + b)
    }

    /// Elementwise difference (pure).
    pub fn sub(&self, other: &NdTensor) -> Result<NdTensor> {
        self.zip_map(other, |a, b| a - b)
    }

    /// Elementwise product (pure).
    pub fn mul(&self, other: &NdTensor) -> Result<NdTensor> {
        self.zip_map(other, |a, b| a * b)
    }

    /// Multiply every element by a constant (pure).
    pub fn scale(&self, c: f64) -> NdTensor {
        self.map(|v| v * c)
    }

    /// Add a constant to every element (pure).
    pub fn add_scalar(&self, c: f64) -> NdTensor {
        self.map(|v| v + c)
    }

    /// Matrix product of two rank-2 tensors: `[m,k] x [k,n] -> [m,n]` (pure).
    pub fn matmul(&self, other: &NdTensor) -> Result<NdTensor> {
        let (m, k) = rank2(&self.shape, "matmul left operand")?;
        let (k2, n) = rank2(&other.shape, "matmul right operand")?;
        if k != k2 {
            return Err(SanmError::Shape(format!(
                "matmul inner dimensions differ: {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(&self.data, &other.data, m, k, n, &mut out);
        NdTensor::from_vec(&[m, n], out)
    }

    /// Transpose of a rank-2 tensor (pure).
    pub fn transpose2(&self) -> Result<NdTensor> {
        let (m, n) = rank2(&self.shape, "transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        NdTensor::from_vec(&[n, m], out)
    }

    /// Same buffer under a new shape with equal element count (pure).
    pub fn reshape(&self, shape: &[usize]) -> Result<NdTensor> {
        if shape_numel(shape) != self.numel() {
            return Err(SanmError::Shape(format!(
                "cannot reshape {:?} ({} elements) to {:?} ({} elements)",
                self.shape,
                self.numel(),
                shape,
                shape_numel(shape)
            )));
        }
        Ok(NdTensor {
            shape: shape.to_vec(),
            data: Rc::clone(&self.data),
            grad_node: None,
        })
    }

    /// Sum of all elements.
    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Mean of all elements (0 for an empty tensor).
    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum() / self.data.len() as f64
        }
    }

    /// Euclidean norm of the flattened tensor.
    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Largest element.
    pub fn max(&self) -> f64 {
        self.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Smallest element.
    pub fn min(&self) -> f64 {
        self.data.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// Mean and population standard deviation reduced over `axes`.
    ///
    /// The outputs keep the non-reduced axes in order; reducing every axis
    /// yields shape `[1]`. Errors: empty axis list, repeated axis, or an axis
    /// outside the tensor's rank.
    pub fn mean_std(&self, axes: &[usize]) -> Result<(NdTensor, NdTensor)> {
        if axes.is_empty() {
            return Err(SanmError::Shape(
                "statistics reduction needs at least one axis".into(),
            ));
        }
        let rank = self.shape.len();
        let mut reduce = vec![false; rank];
        for &a in axes {
            if a >= rank {
                return Err(SanmError::Shape(format!(
                    "reduction axis {a} out of range for shape {:?}",
                    self.shape
                )));
            }
            if reduce[a] {
                return Err(SanmError::Shape(format!("reduction axis {a} repeated")));
            }
            reduce[a] = true;
        }
        let out_shape: Vec<usize> = (0..rank)
            .filter(|&i| !reduce[i])
            .map(|i| self.shape[i])
            .collect();
        let out_shape = if out_shape.is_empty() { vec![1] } else { out_shape };
        let out_n = shape_numel(&out_shape);
        let group = self.numel() / out_n;
        if group == 0 {
            return Err(SanmError::Shape(
                "statistics reduction over an empty tensor".into(),
            ));
        }

        // Strides of the output index within the input's flat index space.
        let mut in_strides = vec![0usize; rank];
        let mut acc = 1usize;
        for i in (0..rank).rev() {
            in_strides[i] = acc;
            acc *= self.shape[i];
        }
        let kept: Vec<usize> = (0..rank).filter(|&i| !reduce[i]).collect();

        let mut sums = vec![0.0; out_n];
        let mut sq = vec![0.0; out_n];
        let mut idx = vec![0usize; rank];
        for (flat, &v) in self.data.iter().enumerate() {
            // Decode the multi-index once per element.
            let mut rem = flat;
            for i in 0..rank {
                idx[i] = rem / in_strides[i];
                rem %= in_strides[i];
            }
            let mut out_idx = 0usize;
            for &i in &kept {
                out_idx = out_idx * self.shape[i] + idx[i];
            }
            sums[out_idx] += v;
            sq[out_idx] += v * v;
        }
        let inv = 1.0 / group as f64;
        let means: Vec<f64> = sums.iter().map(|s| s * inv).collect();
        let stds: Vec<f64> = sq
            .iter()
            .zip(means.iter())
            .map(|(&s2, &m)| (s2 * inv - m * m).max(0.0).sqrt())
            .collect();
        Ok((
            NdTensor::from_vec(&out_shape, means)?,
            NdTensor::from_vec(&out_shape, stds)?,
        ))
    }
}

/// Interpret a shape as rank-2, with a readable error otherwise.
pub(crate) fn rank2(shape: &[usize], what: &str) -> Result<(usize, usize)> {
    match shape {
        [m, n] => Ok((*m, *n)),
        _ => Err(SanmError::Shape(format!(
            "{what} must be rank-2, got shape {shape:?}"
        ))),
    }
}

/// `out += / = A x B` kernel on flat row-major buffers (`out` is overwritten).
pub(crate) fn matmul_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for row in 0..m {
        let out_row = &mut out[row * n..(row + 1) * n];
        out_row.fill(0.0);
        for inner in 0..k {
            let av = a[row * k + inner];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[inner * n..(inner + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
                *o += av * bv;
            }
        }
    }
}

/// `out = A x B^T` kernel: `A [m,k]`, `B [n,k]`, `out [m,n]`.
pub(crate) fn matmul_nt_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for row in 0..m {
        let a_row = &a[row * k..(row + 1) * k];
        for col in 0..n {
            let b_row = &b[col * k..(col + 1) * k];
            out[row * n + col] = a_row.iter().zip(b_row.iter()).map(|(&x, &y)| x * y).sum();
        }
    }
}

/// `out = A^T x B` kernel: `A [k,m]`, `B [k,n]`, `out [m,n]`.
pub(crate) fn matmul_tn_into(a: &[f64], b: &[f64], k: usize, m: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.fill(0.0);
    for inner in 0..k {
        let a_row = &a[inner * m..(inner + 1) * m];
        let b_row = &b[inner * n..(inner + 1) * n];
        for row in 0..m {
            let av = a_row[row];
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[row * n..(row + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
                *o += av * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(NdTensor::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        assert!(NdTensor::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn clone_shares_and_mutation_copies() {
        let a = NdTensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let mut b = a.clone();
        b.data_mut()[0] = 9.0;
        assert_eq!(a.data()[0], 1.0);
        assert_eq!(b.data()[0], 9.0);
    }

    #[test]
    fn matmul_matches_hand_computation() {
        let a = NdTensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = NdTensor::from_vec(&[3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 2]);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = NdTensor::zeros(&[2, 3]);
        let b = NdTensor::zeros(&[4, 2]);
        assert!(a.matmul(&b).is_err());
    }

    #[test]
    fn nt_and_tn_kernels_agree_with_explicit_transpose() {
        let a = NdTensor::from_fn(&[3, 4], |i| (i as f64) * 0.37 - 1.0);
        let b = NdTensor::from_fn(&[5, 4], |i| (i as f64).sin());
        let mut out = vec![0.0; 15];
        matmul_nt_into(a.data(), b.data(), 3, 4, 5, &mut out);
        let want = a.matmul(&b.transpose2().unwrap()).unwrap();
        for (x, y) in out.iter().zip(want.data()) {
            assert!((x - y).abs() < 1e-12);
        }

        let c = NdTensor::from_fn(&[4, 3], |i| (i as f64) * 0.11 + 0.5);
        let d = NdTensor::from_fn(&[4, 5], |i| (i as f64).cos());
        let mut out = vec![0.0; 15];
        matmul_tn_into(c.data(), d.data(), 4, 3, 5, &mut out);
        let want = c.transpose2().unwrap().matmul(&d).unwrap();
        for (x, y) in out.iter().zip(want.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_std_over_all_axes_is_population() {
        let x = NdTensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let (m, s) = x.mean_std(&[0]).unwrap();
        assert_eq!(m.shape(), &[1]);
        assert!((m.data()[0] - 2.0).abs() < 1e-15);
        assert!((s.data()[0] - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn mean_std_keeps_remaining_axes() {
        let x = NdTensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 10.0, 20.0, 30.0]).unwrap();
        let (m, _) = x.mean_std(&[1]).unwrap();
        assert_eq!(m.shape(), &[2]);
        assert!((m.data()[0] - 2.0).abs() < 1e-15);
        assert!((m.data()[1] - 20.0).abs() < 1e-15);
        let (m0, _) = x.mean_std(&[0]).unwrap();
        assert_eq!(m0.shape(), &[3]);
        assert!((m0.data()[1] - 11.0).abs() < 1e-15);
    }

    #[test]
    fn mean_std_rejects_bad_axes() {
        let x = NdTensor::zeros(&[2, 2]);
        assert!(x.mean_std(&[]).is_err());
        assert!(x.mean_std(&[2]).is_err());
        assert!(x.mean_std(&[0, 0]).is_err());
    }

    #[test]
    fn reshape_preserves_data_and_checks_count() {
        let x = NdTensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let y = x.reshape(&[3, 2]).unwrap();
        assert_eq!(y.data(), x.data());
        assert!(x.reshape(&[4, 2]).is_err());
    }

    #[test]
    fn detach_and_mutation_drop_tracking() {
        let mut x = NdTensor::scalar(1.0);
        x.grad_node = Some(GradRef { tape: 1, node: 0 });
        assert!(x.is_tracked());
        assert!(!x.detach().is_tracked());
        x.data_mut()[0] = 2.0;
        assert!(!x.is_tracked());
    }
}
