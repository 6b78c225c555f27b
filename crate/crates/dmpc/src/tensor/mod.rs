//! Dense tensors, reverse-mode autodiff, network architectures, and
//! optimisation.
//!
//! Parameters and activations are `f64` throughout; checkpoint files store
//! `f32` (see [`checkpoint`]). Reductions (losses, norms, statistics)
//! accumulate in `f64` as well, which keeps gradient checks against central
//! finite differences tight.

mod checkpoint;
mod net;
mod optim;
mod tape;

pub use checkpoint::{
    load_checkpoint, param_fingerprint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use net::{
    bind_params, causal_forward, causal_mask, denoiser_forward, forward, fourier_features,
    mlp_forward, regressor_forward, tape_causal, tape_denoiser, tape_mlp, tape_regressor,
    time_embedding, CausalOutput, IoSpec, NetInput, NetKind, NetworkSpec, ParamSet, TokenRole,
};
pub use optim::{clip_global_norm, AdamParams, Optimizer, TrainSchedule};
pub use tape::{Gradients, NodeId, Tape};

use thiserror::Error;

/// Errors from tensor construction, shape checking, and serialization.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("tensor holds a non-finite value (index {index})")]
    NonFinite { index: usize },
    #[error("dims {dims:?} do not match value count {len}")]
    DimsMismatch { dims: Vec<usize>, len: usize },
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint corrupt: {0}")]
    Corrupt(String),
    #[error("{0}")]
    Invalid(String),
}

/// A dense row-major tensor of `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, validating that `dims` multiply out to `values.len()`
    /// and that every entry is finite.
    pub fn new(dims: Vec<usize>, values: Vec<f64>) -> Result<Self, TensorError> {
        let n: usize = dims.iter().product();
        if n != values.len() {
            return Err(TensorError::DimsMismatch { dims, len: values.len() });
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { index });
        }
        Ok(Self { dims, values })
    }

    /// Internal constructor for op outputs; skips the finiteness scan.
    pub(crate) fn from_raw(dims: Vec<usize>, values: Vec<f64>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), values.len());
        Self { dims, values }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let n = dims.iter().product();
        Self { dims: dims.to_vec(), values: vec![0.0; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Self { dims: vec![1], values: vec![v] }
    }

    /// A `[rows, cols]` matrix from a flat row-major slice.
    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self, TensorError> {
        Self::new(vec![rows, cols], values)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Scalar payload of a `[1]`/`[1,1]` tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.len(), 1, "item() on non-scalar tensor");
        self.values[0]
    }

    /// Rows of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        debug_assert_eq!(self.rank(), 2);
        self.dims[0]
    }

    /// Columns of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.rank(), 2);
        self.dims[1]
    }

    pub fn get2(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.dims[1] + c]
    }

    pub fn set2(&mut self, r: usize, c: usize, v: f64) {
        self.values[r * self.dims[1] + c] = v;
    }

    /// True if any entry is NaN or infinite.
    pub fn has_non_finite(&self) -> bool {
        self.values.iter().any(|v| !v.is_finite())
    }

    /// Copies a rank-2 tensor out as one `Vec` per row.
    pub fn row_vecs(&self) -> Vec<Vec<f64>> {
        debug_assert_eq!(self.rank(), 2);
        self.values.chunks(self.dims[1].max(1)).map(|c| c.to_vec()).collect()
    }

    /// Sum of squares, accumulated in `f64`.
    pub fn sq_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }
}

/// `c = a @ b` for row-major rank-2 tensors, `[m,k] x [k,n] -> [m,n]`.
///
/// The k-middle loop ordering keeps the inner loop contiguous over both `b`
/// and `c`, which the compiler vectorises well; small transformer shapes stay
/// in L1.
pub(crate) fn matmul_raw(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.dims[0], a.dims[1]);
    let (k2, n) = (b.dims[0], b.dims[1]);
    debug_assert_eq!(k, k2, "matmul inner dims");
    let mut c = vec![0.0f64; m * n];
    for i in 0..m {
        let arow = &a.values[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b.values[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    Tensor::from_raw(vec![m, n], c)
}

/// `c = a^T @ b` without materialising the transpose, `[k,m]^T x [k,n]`.
pub(crate) fn matmul_at_b(a: &Tensor, b: &Tensor) -> Tensor {
    let (k, m) = (a.dims[0], a.dims[1]);
    let n = b.dims[1];
    debug_assert_eq!(k, b.dims[0]);
    let mut c = vec![0.0f64; m * n];
    for p in 0..k {
        let arow = &a.values[p * m..(p + 1) * m];
        let brow = &b.values[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    Tensor::from_raw(vec![m, n], c)
}

/// `c = a @ b^T`, `[m,k] x [n,k]^T -> [m,n]`.
pub(crate) fn matmul_a_bt(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.dims[0], a.dims[1]);
    let n = b.dims[0];
    debug_assert_eq!(k, b.dims[1]);
    let mut c = vec![0.0f64; m * n];
    for i in 0..m {
        let arow = &a.values[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b.values[j * k..(j + 1) * k];
            let mut acc = 0.0f64;
            for p in 0..k {
                acc += arow[p] * brow[p];
            }
            c[i * n + j] = acc;
        }
    }
    Tensor::from_raw(vec![m, n], c)
}
