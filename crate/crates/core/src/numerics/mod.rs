//! Dense `f32` tensors and a reverse-mode tape covering every op the model uses.

mod graph;
pub mod kernels;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use kernels::Scalar;
pub use params::{ParamId, ParamSet};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Additive mask value for a blocked attention entry.
pub const BLOCKED: f32 = -1e9;

/// Eager `a · b`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.cols() != b.rows() {
        return Err(Error::shape(format!(
            "matmul {}x{} · {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    kernels::gemm(m, k, n, a.data(), false, b.data(), false, &mut out, false);
    Tensor::matrix(m, n, out)
}

/// Result of an eager masked softmax.
#[derive(Debug, Clone)]
pub struct MaskedSoftmax {
    pub probs: Tensor,
    /// Number of rows whose every entry was blocked (written as zeros).
    pub fully_blocked_rows: usize,
}

/// Eager row softmax over `logits + mask`, restricted to unblocked entries.
pub fn softmax_masked(logits: &Tensor, mask: &Tensor) -> Result<MaskedSoftmax> {
    if logits.shape() != mask.shape() {
        return Err(Error::shape(format!(
            "softmax_masked {:?} vs mask {:?}",
            logits.shape(),
            mask.shape()
        )));
    }
    let mut out = vec![0.0; logits.numel()];
    let fully_blocked_rows =
        kernels::softmax_masked_rows(logits.data(), mask.data(), logits.cols(), &mut out);
    Ok(MaskedSoftmax {
        probs: Tensor::new(logits.shape().to_vec(), out)?,
        fully_blocked_rows,
    })
}

/// Eager per-row layer normalization with affine `scale`/`shift` (length `d`).
pub fn layer_norm(x: &Tensor, scale: &Tensor, shift: &Tensor) -> Result<Tensor> {
    let d = x.cols();
    if scale.numel() != d || shift.numel() != d {
        return Err(Error::shape(format!(
            "layer_norm width {d} vs scale {} / shift {}",
            scale.numel(),
            shift.numel()
        )));
    }
    let mut out = vec![0.0; x.numel()];
    kernels::layer_norm_rows(x.data(), d, scale.data(), shift.data(), &mut out);
    Tensor::new(x.shape().to_vec(), out)
}

#[cfg(test)]
mod tests;
