//! Dense row-major tensors and the statistics primitives the quantizers,
//! reparameterization and reconstruction code are built on.
//!
//! Every [`Tensor`] holds finite `f64` values; quantized codes live in
//! [`IntTensor`] as `i32`.


use crate::error::{dim_err, Error, Result};

/// Dense n-dimensional `f64` array in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Dense n-dimensional array of integer quantization codes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntTensor {
    shape: Vec<usize>,
    data: Vec<i32>,
}

/// Per-channel minimum and maximum along one axis.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    pub axis: usize,
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.contains(&0) {
        return Err(dim_err!("dimension sizes must be positive, got {shape:?}"));
    }
    let numel: usize = shape.iter().product();
    if numel != len {
        return Err(dim_err!(
            "shape {shape:?} holds {numel} elements but buffer has {len}"
        ));
    }
    Ok(())
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        check_shape(&shape, data.len())?;
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!(
                "non-finite value {} at flat index {i}",
                data[i]
            )));
        }
        Ok(Self { shape, data })
    }

    /// One-dimensional tensor from a vector.
    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; numel],
        }
    }

    /// Builds a tensor from parts produced by arithmetic on finite inputs.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        debug_assert!(data.iter().all(|v| v.is_finite()), "non-finite result");
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        check_shape(&shape, self.data.len())?;
        Ok(Self {
            shape,
            data: self.data,
        })
    }

    pub(crate) fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(dim_err!(
                "shape mismatch {:?} vs {:?}",
                self.shape,
                other.shape
            ));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    /// Mean squared difference against a tensor of the same shape.
    pub fn mse(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(dim_err!(
                "shape mismatch {:?} vs {:?}",
                self.shape,
                other.shape
            ));
        }
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Ok(sum / self.data.len() as f64)
    }

    /// Selects the leading-axis rows `start..end`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor> {
        let rows = self.shape[0];
        if start >= end || end > rows {
            return Err(dim_err!("row range {start}..{end} invalid for {rows} rows"));
        }
        let inner: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Self::from_parts(
            shape,
            self.data[start * inner..end * inner].to_vec(),
        ))
    }

    /// Concatenates tensors along the leading axis.
    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Domain("nothing to concatenate".into()))?;
        let tail = &first.shape[1..];
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(dim_err!("trailing shape mismatch in concat"));
            }
            rows += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = rows;
        Ok(Self::from_parts(shape, data))
    }
}

impl IntTensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<i32>) -> Result<Self> {
        let shape = shape.into();
        check_shape(&shape, data.len())?;
        Ok(Self { shape, data })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<i32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[i32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<i32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Distance between consecutive elements of `axis` in a row-major buffer.
pub(crate) fn axis_stride(shape: &[usize], axis: usize) -> usize {
    shape[axis + 1..].iter().product()
}

/// Matrix product of `a[.., M, K]` with `b[K, N]`, giving `[.., M, N]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if b.ndim() != 2 {
        return Err(dim_err!("right operand must be 2-D, got {:?}", b.shape));
    }
    if a.ndim() < 1 {
        return Err(dim_err!("left operand must have at least one axis"));
    }
    let k = a.last_dim();
    let (kb, n) = (b.shape[0], b.shape[1]);
    if k != kb {
        return Err(dim_err!(
            "inner dimensions disagree: {:?} x {:?}",
            a.shape,
            b.shape
        ));
    }
    let m = a.len() / k;
    let mut out = vec![0.0; m * n];
    matmul_into(&a.data, &b.data, &mut out, m, k, n);
    let mut shape = a.shape.clone();
    *shape.last_mut().unwrap() = n;
    Ok(Tensor::from_parts(shape, out))
}

/// `out[m, n] = a[m, k] · b[k, n]` over raw row-major buffers.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    // SAFETY: the slices cover exactly m*k, k*n and m*n elements with the
    // row-major strides passed below, and `out` does not alias the inputs.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Minimum and maximum over every element sharing each index of `axis`.
pub fn channel_minmax(x: &Tensor, axis: usize) -> Result<ChannelStats> {
    if x.is_empty() {
        return Err(Error::Domain("channel statistics of an empty tensor".into()));
    }
    if axis >= x.ndim() {
        return Err(dim_err!("axis {axis} out of range for {:?}", x.shape));
    }
    let channels = x.shape[axis];
    let stride = axis_stride(&x.shape, axis);
    let mut min = vec![f64::INFINITY; channels];
    let mut max = vec![f64::NEG_INFINITY; channels];
    for (i, &v) in x.data.iter().enumerate() {
        let c = (i / stride) % channels;
        min[c] = min[c].min(v);
        max[c] = max[c].max(v);
    }
    Ok(ChannelStats { min, max, axis })
}

/// Middle element of the sorted values; the mean of the two middle elements
/// for even lengths.
pub fn median(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::Domain("median of an empty vector".into()));
    }
    let mut sorted = v.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    Ok(if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        0.5 * (sorted[mid - 1] + sorted[mid])
    })
}

/// `(1/D) Σ |v_i − center|`.
pub fn mean_abs_dev(v: &[f64], center: f64) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::Domain("mean absolute deviation of an empty vector".into()));
    }
    Ok(v.iter().map(|x| (x - center).abs()).sum::<f64>() / v.len() as f64)
}

pub fn mean(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::Domain("mean of an empty vector".into()));
    }
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}
