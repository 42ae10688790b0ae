use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Storage precision of a [`Tensor`].
///
/// Values are always held as `f64`; an `F32` tensor holds only values that are
/// exactly representable in `f32`, and every operation producing an `F32`
/// tensor rounds its results through `f32`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum DType {
    #[default]
    F32,
    F64,
}

impl DType {
    #[inline]
    pub fn round(self, v: f64) -> f64 {
        match self {
            DType::F32 => v as f32 as f64,
            DType::F64 => v,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Dense row-major n-dimensional array.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    dtype: DType,
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor<{:?}>{:?}", self.dtype, self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.iter().any(|&d| d == 0) {
        return Err(shape_err!("extents must be positive, got {shape:?}"));
    }
    let n: usize = shape.iter().product();
    if n != len {
        return Err(shape_err!(
            "shape {shape:?} holds {n} values but data has {len}"
        ));
    }
    Ok(())
}

impl Tensor {
    /// Builds a 64-bit tensor.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        Self::with_dtype(DType::F64, shape, data)
    }

    /// Builds a tensor of the given precision, rounding `data` into it.
    pub fn with_dtype(dtype: DType, shape: impl Into<Vec<usize>>, mut data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        check_shape(&shape, data.len())?;
        if dtype == DType::F32 {
            data.iter_mut().for_each(|v| *v = DType::F32.round(*v));
        }
        Ok(Self { dtype, shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self::new(shape, vec![value; n]).expect("extents must be positive")
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self::new(shape, (0..n).map(&mut f).collect()).expect("extents must be positive")
    }

    /// 2-D tensor from nested rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(shape_err!("ragged rows"));
        }
        Self::new([r, c], rows.concat())
    }

    pub fn scalar(v: f64) -> Self {
        Self::new([1], vec![v]).unwrap()
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable view of the values. Writers are responsible for keeping `F32`
    /// tensors representable; [`Tensor::to_dtype`] re-rounds.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn to_dtype(&self, dtype: DType) -> Tensor {
        Tensor::with_dtype(dtype, self.shape.clone(), self.data.clone()).unwrap()
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        let shape = shape.into();
        check_shape(&shape, self.data.len())?;
        Ok(Tensor {
            dtype: self.dtype,
            shape,
            data: self.data.clone(),
        })
    }

    pub fn into_reshaped(mut self, shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        let shape = shape.into();
        check_shape(&shape, self.data.len())?;
        self.shape = shape;
        Ok(self)
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(shape_err!("expected rank 2, got shape {:?}", self.shape)),
        }
    }

    /// Product of all extents but the last, and the last extent.
    pub fn rows_cols(&self) -> (usize, usize) {
        let c = *self.shape.last().unwrap_or(&1);
        (self.data.len() / c.max(1), c)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let (_, c) = self.rows_cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// Element at a multi-index.
    pub fn at(&self, idx: &[usize]) -> f64 {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut off = 0;
        for (&i, &d) in idx.iter().zip(&self.shape) {
            debug_assert!(i < d);
            off = off * d + i;
        }
        self.data[off]
    }

    /// Sub-tensor along the leading axis.
    pub fn index_axis0(&self, i: usize) -> Result<Tensor> {
        if self.rank() < 2 || i >= self.shape[0] {
            return Err(shape_err!("cannot index {i} into {:?}", self.shape));
        }
        let inner: usize = self.shape[1..].iter().product();
        Ok(Tensor {
            dtype: self.dtype,
            shape: self.shape[1..].to_vec(),
            data: self.data[i * inner..(i + 1) * inner].to_vec(),
        })
    }

    /// Stacks equal-shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::EmptyInput("nothing to stack".into()))?;
        if items.iter().any(|t| t.shape != first.shape) {
            return Err(shape_err!("stack requires equal shapes"));
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        let data = items.iter().flat_map(|t| t.data.iter().copied()).collect();
        Ok(Tensor {
            dtype: first.dtype,
            shape,
            data,
        })
    }

    /// Concatenates along the leading axis.
    pub fn concat0(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::EmptyInput("nothing to concatenate".into()))?;
        if items.iter().any(|t| t.shape[1..] != first.shape[1..]) {
            return Err(shape_err!("concat requires equal trailing shapes"));
        }
        let mut shape = first.shape.clone();
        shape[0] = items.iter().map(|t| t.shape[0]).sum();
        let data = items.iter().flat_map(|t| t.data.iter().copied()).collect();
        Ok(Tensor {
            dtype: first.dtype,
            shape,
            data,
        })
    }

    /// Rows `start..end` along the leading axis.
    pub fn slice0(&self, start: usize, end: usize) -> Result<Tensor> {
        if start >= end || end > self.shape[0] {
            return Err(shape_err!(
                "slice {start}..{end} out of range for {:?}",
                self.shape
            ));
        }
        let inner: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Tensor {
            dtype: self.dtype,
            shape,
            data: self.data[start * inner..end * inner].to_vec(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        let dt = self.dtype;
        Tensor {
            dtype: dt,
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| dt.round(f(v))).collect(),
        }
    }

    /// Elementwise combination of two same-shaped tensors; the result takes
    /// the wider precision.
    pub fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(shape_err!(
                "elementwise shapes differ: {:?} vs {:?}",
                self.shape,
                other.shape
            ));
        }
        let dt = if self.dtype == DType::F64 || other.dtype == DType::F64 {
            DType::F64
        } else {
            DType::F32
        };
        Ok(Tensor {
            dtype: dt,
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| dt.round(f(a, b)))
                .collect(),
        })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Bitwise equality of shape, dtype and every value.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.dtype == other.dtype
            && self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}
