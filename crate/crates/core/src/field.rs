//! Dense row-major `f32` arrays.

use crate::error::{ensure, Error, Result};

/// Dense n-dimensional array of finite `f32` values, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Field {
    /// Builds a field, validating length and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        ensure!(
            n == data.len(),
            Shape,
            "shape {:?} needs {} values, got {}",
            shape,
            n,
            data.len()
        );
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("field element {i}")));
        }
        Ok(Field { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Field {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f32) -> Self {
        assert!(value.is_finite());
        let n = shape.iter().product();
        Field {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// Builds from a function of the flat index.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Result<Self> {
        let n: usize = shape.iter().product();
        Field::new(shape.to_vec(), (0..n).map(&mut f).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Size of the trailing axis (1 for rank-0).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Returns the same data under another shape with equal element count.
    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        ensure!(
            n == self.data.len(),
            Shape,
            "cannot reshape {:?} into {:?}",
            self.shape,
            shape
        );
        Ok(Field {
            shape: shape.to_vec(),
            data: self.data,
        })
    }

    pub fn ensure_same_shape(&self, other: &Field, what: &str) -> Result<()> {
        ensure!(
            self.shape == other.shape,
            Shape,
            "{what}: {:?} vs {:?}",
            self.shape,
            other.shape
        );
        Ok(())
    }

    /// Applies `f` elementwise, re-checking finiteness.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Self> {
        Field::new(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    /// Combines two same-shape fields elementwise.
    pub fn zip_map(&self, other: &Field, f: impl Fn(f32, f32) -> f32) -> Result<Self> {
        self.ensure_same_shape(other, "zip_map")?;
        Field::new(
            self.shape.clone(),
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    /// Row `i` when the field is viewed as `[len / last_dim, last_dim]`.
    pub fn row(&self, i: usize) -> &[f32] {
        let k = self.last_dim();
        &self.data[i * k..(i + 1) * k]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.last_dim().max(1))
    }

    pub fn mean(&self) -> f32 {
        if self.data.is_empty() {
            return 0.0;
        }
        (self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64) as f32
    }

    /// Bit pattern digest; equal digests mean bit-identical contents.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for &d in &self.shape {
            h.update((d as u64).to_le_bytes());
        }
        for &v in &self.data {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}
