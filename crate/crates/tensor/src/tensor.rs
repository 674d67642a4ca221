use crate::error::{Result, TensorError};
use crate::precision;

/// A dense row-major array.
///
/// Extents are all positive; a rank-0 tensor holds a single scalar.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, rounding elements to the active precision.
    pub fn new(shape: Vec<usize>, mut data: Vec<f64>) -> Result<Self> {
        check_shape(&shape, data.len())?;
        precision::round_slice(&mut data);
        Ok(Self { shape, data })
    }

    /// Builds a tensor from `f32` payload (checkpoint loading).
    pub fn from_f32(shape: Vec<usize>, data: &[f32]) -> Result<Self> {
        check_shape(&shape, data.len())?;
        Ok(Self {
            shape,
            data: data.iter().map(|&v| v as f64).collect(),
        })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![precision::round(value)],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![precision::round(value); n],
        }
    }

    /// Fills elements from their flat row-major index.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        let mut data: Vec<f64> = (0..n).map(f).collect();
        precision::round_slice(&mut data);
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable element access. Callers writing new values should round them
    /// with [`precision::round`] to keep the 32-bit invariant.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(TensorError::Shape {
                op: "dims2",
                lhs: self.shape.clone(),
                rhs: vec![],
            }),
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.flat_index(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let i = self.flat_index(index);
        self.data[i] = precision::round(value);
    }

    fn flat_index(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut flat = 0;
        for (i, (&ix, &ext)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < ext, "index {ix} out of bound {ext} on axis {i}");
            flat = flat * ext + ix;
        }
        flat
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        check_shape(&shape, self.data.len())?;
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
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

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn scale_in_place(&mut self, factor: f64) {
        for v in &mut self.data {
            *v *= factor;
        }
        precision::round_slice(&mut self.data);
    }

    /// `self += factor * other`, elementwise.
    pub fn add_scaled(&mut self, other: &Tensor, factor: f64) -> Result<()> {
        if self.shape != other.shape {
            return Err(TensorError::Shape {
                op: "add_scaled",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += factor * b;
        }
        precision::round_slice(&mut self.data);
        Ok(())
    }

    /// Keeps only the listed indices along `axis`, in the given order.
    pub fn index_select(&self, axis: usize, keep: &[usize]) -> Result<Tensor> {
        let (outer, extent, inner) = self.split_at_axis(axis)?;
        if let Some(&bad) = keep.iter().find(|&&k| k >= extent) {
            return Err(TensorError::Index {
                op: "index_select",
                index: bad,
                bound: extent,
            });
        }
        if keep.is_empty() {
            return Err(TensorError::Parameter {
                op: "index_select",
                msg: "cannot select zero indices".into(),
            });
        }
        let mut data = Vec::with_capacity(outer * keep.len() * inner);
        for o in 0..outer {
            for &k in keep {
                let start = (o * extent + k) * inner;
                data.extend_from_slice(&self.data[start..start + inner]);
            }
        }
        let mut shape = self.shape.clone();
        shape[axis] = keep.len();
        Ok(Tensor::from_parts(shape, data))
    }

    /// Zeroes a contiguous index range along `axis`.
    pub fn zero_range(&mut self, axis: usize, start: usize, len: usize) -> Result<()> {
        let (outer, extent, inner) = self.split_at_axis(axis)?;
        if start + len > extent {
            return Err(TensorError::Index {
                op: "zero_range",
                index: start + len,
                bound: extent,
            });
        }
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            self.data[base..base + len * inner].fill(0.0);
        }
        Ok(())
    }

    pub(crate) fn split_at_axis(&self, axis: usize) -> Result<(usize, usize, usize)> {
        split_shape(&self.shape, axis)
    }

    pub fn to_f32_vec(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }
}

pub(crate) fn split_shape(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(TensorError::Axis {
            axis,
            rank: shape.len(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.contains(&0) || shape.iter().product::<usize>() != len {
        return Err(TensorError::InvalidShape {
            shape: shape.to_vec(),
            len,
        });
    }
    Ok(())
}
