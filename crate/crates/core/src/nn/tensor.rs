use std::collections::BTreeMap;
use std::fmt::Debug;

use num_traits::Float;

use crate::checkpoint::Checkpoint;
use crate::error::{ensure, Error, Result};
use crate::field::Field;
use crate::rng::RandomStream;

/// Scalar type the network engine runs on: `f32` for training and sampling,
/// `f64` for gradient checks.
pub trait Real: Float + Default + Debug + Send + Sync + std::iter::Sum + 'static {
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c = alpha * a @ b + beta * c` with arbitrary strides.
    ///
    /// # Safety
    /// Pointers and strides must describe valid `m×k`, `k×n` and `m×n` views.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Row-major matrix view: `(data, rows, cols, transposed)`.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub trans: bool,
}

impl<'a, T> Mat<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        Mat {
            data,
            rows,
            cols,
            trans: false,
        }
    }
    pub fn t(self) -> Self {
        Mat {
            trans: !self.trans,
            ..self
        }
    }
    fn logical(&self) -> (usize, usize) {
        if self.trans {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }
    fn strides(&self) -> (isize, isize) {
        if self.trans {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `out (m×n, row-major) = beta * out + a @ b`.
pub(crate) fn gemm<T: Real>(a: Mat<'_, T>, b: Mat<'_, T>, out: &mut [T], beta: T) {
    let (m, k) = a.logical();
    let (k2, n) = b.logical();
    assert_eq!(k, k2, "gemm inner dimension");
    assert!(a.data.len() >= a.rows * a.cols && b.data.len() >= b.rows * b.cols);
    assert_eq!(out.len(), m * n, "gemm output size");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: bounds checked above; strides describe row-major buffers.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn from_field(f: &Field) -> Self {
        Tensor {
            shape: f.shape().to_vec(),
            data: f.data().iter().map(|&v| T::from_f64(v as f64)).collect(),
        }
    }

    pub fn to_field(&self) -> Result<Field> {
        Field::new(
            self.shape.clone(),
            self.data.iter().map(|v| v.as_f64() as f32).collect(),
        )
    }
}

/// Named parameter table, ordered by name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        let name = name.into();
        let prev = self.tensors.insert(name.clone(), t);
        assert!(prev.is_none(), "duplicate parameter {name}");
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn expect(&self, name: &str) -> &Tensor<T> {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }

    /// Moves every tensor of `other` in under `prefix`.
    pub fn absorb(&mut self, prefix: &str, other: ParamSet<T>) {
        for (n, t) in other.tensors {
            self.insert(format!("{prefix}{n}"), t);
        }
    }

    /// Sub-table of names starting with `prefix`, with the prefix stripped.
    pub fn extract(&self, prefix: &str) -> ParamSet<T> {
        let mut out = ParamSet::new();
        for (n, t) in &self.tensors {
            if let Some(rest) = n.strip_prefix(prefix) {
                out.insert(rest.to_string(), t.clone());
            }
        }
        out
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| {
                    (
                        n.clone(),
                        Tensor {
                            shape: t.shape.clone(),
                            data: t.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn ensure_finite(&self) -> Result<()> {
        for (n, t) in &self.tensors {
            ensure!(t.data.iter().all(|v| v.is_finite()), NonFinite, "parameter {n}");
        }
        Ok(())
    }

    pub fn to_tensors(&self) -> Result<Vec<(String, Field)>> {
        self.tensors
            .iter()
            .map(|(n, t)| Ok((n.clone(), t.to_field()?)))
            .collect()
    }

    /// Loads tensors named exactly like those in `template`; names missing
    /// from either side and shape disagreements are errors.
    pub fn load_matching(template: &ParamSet<T>, ckpt: &Checkpoint, prefix: &str) -> Result<ParamSet<T>> {
        let mut out = ParamSet::new();
        for (name, field) in &ckpt.tensors {
            let Some(rest) = name.strip_prefix(prefix) else { continue };
            let Some(t) = template.get(rest) else {
                return Err(Error::Format(format!("unknown tensor '{name}' in checkpoint")));
            };
            ensure!(
                t.shape == field.shape(),
                Shape,
                "tensor '{name}': checkpoint {:?} vs model {:?}",
                field.shape(),
                t.shape
            );
            out.insert(rest, Tensor::from_field(field));
        }
        for name in template.names() {
            ensure!(
                out.get(name).is_some(),
                Format,
                "checkpoint lacks tensor '{prefix}{name}'"
            );
        }
        Ok(out)
    }

    /// Content hash over names and f32 bit patterns.
    pub fn content_hash(&self) -> String {
        Checkpoint {
            tensors: self.to_tensors().expect("finite parameters"),
            meta: Default::default(),
        }
        .content_hash()
    }
}

/// Initializers for freshly created layers.
pub(crate) fn kaiming_uniform<T: Real>(shape: &[usize], fan_in: usize, rs: &mut RandomStream) -> Tensor<T> {
    let bound = (3.0f64 / fan_in.max(1) as f64).sqrt();
    Tensor {
        shape: shape.to_vec(),
        data: (0..shape.iter().product::<usize>())
            .map(|_| T::from_f64(rs.uniform_range(-bound, bound)))
            .collect(),
    }
}

pub(crate) fn normal_init<T: Real>(shape: &[usize], std: f64, rs: &mut RandomStream) -> Tensor<T> {
    Tensor {
        shape: shape.to_vec(),
        data: (0..shape.iter().product::<usize>())
            .map(|_| T::from_f64(rs.normal() * std))
            .collect(),
    }
}

pub(crate) fn constant<T: Real>(shape: &[usize], v: f64) -> Tensor<T> {
    Tensor {
        shape: shape.to_vec(),
        data: vec![T::from_f64(v); shape.iter().product()],
    }
}

/// `[B, H, W, C]` row-major data to an NCHW tensor.
pub fn nhwc_to_nchw<T: Real>(data: &[f32], b: usize, h: usize, w: usize, c: usize) -> Tensor<T> {
    let mut out = vec![T::zero(); data.len()];
    for n in 0..b {
        for p in 0..h * w {
            for ch in 0..c {
                out[(n * c + ch) * h * w + p] = T::from_f64(data[(n * h * w + p) * c + ch] as f64);
            }
        }
    }
    Tensor {
        shape: vec![b, c, h, w],
        data: out,
    }
}

/// Channels `start..start+len` of an NCHW buffer as `[B, H, W, len]` f32 data.
pub fn nchw_to_nhwc<T: Real>(data: &[T], shape: &[usize], start: usize, len: usize) -> Vec<f32> {
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let mut out = Vec::with_capacity(b * h * w * len);
    for n in 0..b {
        for p in 0..h * w {
            for ch in start..start + len {
                out.push(data[(n * c + ch) * h * w + p].as_f64() as f32);
            }
        }
    }
    out
}
